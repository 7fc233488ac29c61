use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsevar::metrics::per_block_mse_maps;
use sparsevar::toymodel::{Linear, BRANCH_GAIN};
use sparsevar::{mse_change_map, FeatureGrid, Grid, Mask, Model, ModelConfig, StageCache, StageRequest};

fn small_cfg() -> ModelConfig {
    ModelConfig {
        n_blocks: 3,
        d_model: 8,
        n_heads: 2,
        vocab: 10,
        seed: 99,
        selected_block: 2,
    }
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureGrid {
    Grid::from_fn(h, w, c, |_, _| (0..c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn request<'a>(stage: usize, input: &'a FeatureGrid, cache: &'a StageCache, active: &'a Mask) -> StageRequest<'a> {
    StageRequest {
        stage,
        input,
        conditioning: None,
        cache,
        active,
    }
}

#[test]
fn init_is_deterministic() {
    let a = Model::init(small_cfg()).unwrap();
    let b = Model::init(small_cfg()).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(a.weights(), b.weights());
    let c = Model::init(ModelConfig {
        seed: 100,
        ..small_cfg()
    })
    .unwrap();
    assert_ne!(a.checksum(), c.checksum());
    assert_eq!(a.checksum().len(), 64);
}

#[test]
fn parameter_shapes() {
    let cfg = ModelConfig {
        n_blocks: 2,
        d_model: 4,
        n_heads: 2,
        vocab: 8,
        seed: 1,
        selected_block: 1,
    };
    let m = Model::init(cfg).unwrap();
    assert_eq!(m.blocks.len(), 2);
    assert_eq!(m.embedding.len(), 8 * 4);
    assert_eq!(m.blocks[0].w1.weight.len(), 4 * 16);
}

#[test]
fn invalid_configs() {
    for cfg in [
        ModelConfig {
            n_blocks: 1,
            selected_block: 1,
            ..small_cfg()
        },
        ModelConfig {
            n_heads: 3,
            ..small_cfg()
        },
        ModelConfig {
            selected_block: 0,
            ..small_cfg()
        },
        ModelConfig {
            selected_block: 4,
            ..small_cfg()
        },
        ModelConfig {
            vocab: 0,
            ..small_cfg()
        },
    ] {
        assert!(Model::init(cfg).is_err());
    }
}

fn set(l: &mut Linear, entries: &[(usize, usize, f64)]) {
    l.weight.iter_mut().for_each(|w| *w = 0.0);
    for &(i, o, v) in entries {
        l.weight[i * l.output + o] = v;
    }
}

#[test]
fn single_token_forward_by_hand() {
    let cfg = ModelConfig {
        n_blocks: 2,
        d_model: 2,
        n_heads: 1,
        vocab: 2,
        seed: 3,
        selected_block: 2,
    };
    let mut m = Model::init(cfg).unwrap();
    for p in [
        &mut m.positional.row_freq,
        &mut m.positional.col_freq,
        &mut m.positional.phase,
        &mut m.positional.stage_phase,
    ] {
        p.iter_mut().for_each(|v| *v = 0.0);
    }
    for b in &mut m.blocks {
        set(&mut b.wv, &[(0, 0, 2.0), (1, 1, 1.0)]);
        set(&mut b.wo, &[(0, 0, 1.0), (1, 1, 1.0)]);
        set(&mut b.w1, &[(0, 0, 1.0), (1, 1, 1.0)]);
        set(&mut b.w2, &[(0, 0, 1.0), (1, 1, 1.0)]);
    }
    m.embedding = vec![1.0, 0.0, 0.0, 1.0];

    let gelu = |x: f64| 0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x.powi(3))).tanh());
    let e = 1.0 / (1.0f64 + 1e-6).sqrt();
    let mut x = [-e, e];
    for _ in 0..2 {
        // One key: attention reduces to the value path.
        x = [x[0] + 0.5 * 2.0 * x[0], x[1] + 0.5 * x[1]];
        x = [x[0] + 0.5 * gelu(x[0]), x[1] + 0.5 * gelu(x[1])];
    }

    let input = Grid::new(1, 1, 2, vec![1.0, 3.0]).unwrap();
    let cache = StageCache::new();
    let active = Mask::filled(1, 1, true);
    let out = m.run_stage(&request(1, &input, &cache, &active)).unwrap();
    let got = out.logits.at(0, 0);
    assert!((got[0] - x[0]).abs() < 1e-14, "{} vs {}", got[0], x[0]);
    assert!((got[1] - x[1]).abs() < 1e-14, "{} vs {}", got[1], x[1]);
    assert_eq!(out.attended_pairs, 1);
}

/// Straight-line forward over every token, with its own key/value store.
struct Reference<'m> {
    m: &'m Model,
    kv: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl<'m> Reference<'m> {
    fn new(m: &'m Model) -> Self {
        Self {
            m,
            kv: vec![Vec::new(); m.blocks.len()],
        }
    }

    fn matvec(l: &Linear, x: &[f64]) -> Vec<f64> {
        (0..l.output)
            .map(|o| (0..l.input).map(|i| x[i] * l.weight[i * l.output + o]).sum())
            .collect()
    }

    fn stage(&mut self, stage: usize, input: &FeatureGrid) -> Grid {
        let cfg = self.m.config().clone();
        let (h, w, c) = (input.h(), input.w(), cfg.d_model);
        let hd = cfg.head_dim();
        let mut xs: Vec<Vec<f64>> = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let t = input.at(i, j);
                let mean = t.iter().sum::<f64>() / c as f64;
                let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let pos = self.m.positional.encode(stage, (i, j), (h, w));
                xs.push((0..c).map(|k| (t[k] - mean) / (var + 1e-6).sqrt() + pos[k]).collect());
            }
        }
        for (b, block) in self.m.blocks.iter().enumerate() {
            let rms = |x: &[f64]| {
                let s = (x.iter().map(|v| v * v).sum::<f64>() / c as f64 + 1e-6).sqrt();
                x.iter().map(|v| v / s).collect::<Vec<f64>>()
            };
            let fresh: Vec<(Vec<f64>, Vec<f64>)> = xs
                .iter()
                .map(|x| (Self::matvec(&block.wk, &rms(x)), Self::matvec(&block.wv, x)))
                .collect();
            let keys: Vec<&(Vec<f64>, Vec<f64>)> = self.kv[b].iter().chain(fresh.iter()).collect();
            let queries: Vec<Vec<f64>> = xs.iter().map(|x| Self::matvec(&block.wq, &rms(x))).collect();
            for (x, q) in xs.iter_mut().zip(&queries) {
                let mut mixed = vec![0.0; c];
                for head in 0..cfg.n_heads {
                    let r = head * hd..(head + 1) * hd;
                    let s: Vec<f64> = keys
                        .iter()
                        .map(|(k, _)| {
                            q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                        })
                        .collect();
                    let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                    for (sv, (_, v)) in s.iter().zip(&keys) {
                        for d in r.clone() {
                            mixed[d] += (sv - mx).exp() / z * v[d];
                        }
                    }
                }
                let o = Self::matvec(&block.wo, &mixed);
                for d in 0..c {
                    x[d] += BRANCH_GAIN * o[d];
                }
            }
            for x in xs.iter_mut() {
                let hid: Vec<f64> = Self::matvec(&block.w1, x)
                    .into_iter()
                    .map(|v| {
                        0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
                    })
                    .collect();
                let y = Self::matvec(&block.w2, &hid);
                for d in 0..c {
                    x[d] += BRANCH_GAIN * y[d];
                }
            }
            self.kv[b].extend(fresh);
        }
        let emb = &self.m.embedding;
        let data = xs
            .iter()
            .flat_map(|x| (0..cfg.vocab).map(move |t| (0..c).map(|d| emb[t * c + d] * x[d]).sum::<f64>()))
            .collect();
        Grid::new(h, w, cfg.vocab, data).unwrap()
    }
}

#[test]
fn full_mask_matches_reference_forward() {
    let m = Model::init(small_cfg()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut reference = Reference::new(&m);
    let mut cache = StageCache::new();
    for (stage, side) in [(1, 1), (2, 2), (3, 3)] {
        let input = random_grid(&mut rng, side, side, 8);
        let active = Mask::filled(side, side, true);
        let out = m.run_stage(&request(stage, &input, &cache, &active)).unwrap();
        let want = reference.stage(stage, &input);
        for (a, b) in out.logits.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "stage {stage}: {a} vs {b}");
        }
        cache = out.cache;
    }
    assert_eq!(cache.len(), 1 + 4 + 9);
}

#[test]
fn inactive_payload_is_never_read() {
    let m = Model::init(small_cfg()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let prev = random_grid(&mut rng, 2, 2, 8);
    let seed_cache = m
        .run_stage(&request(1, &prev, &StageCache::new(), &Mask::filled(2, 2, true)))
        .unwrap()
        .cache;
    let active = Mask::from_fn(4, 4, |i, j| (i * 4 + j) % 3 != 0);
    let a = random_grid(&mut rng, 4, 4, 8);
    let mut b = a.clone();
    for i in 0..4 {
        for j in 0..4 {
            if !active.get(i, j) {
                b.at_mut(i, j)
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-50.0..50.0));
            }
        }
    }
    let oa = m.run_stage(&request(2, &a, &seed_cache, &active)).unwrap();
    let ob = m.run_stage(&request(2, &b, &seed_cache, &active)).unwrap();
    assert_eq!(oa.logits, ob.logits);
    assert_eq!(oa.trace, ob.trace);
    assert_eq!(oa.cache, ob.cache);
    for (i, j) in active.not().positions() {
        assert!(oa.logits.at(i, j).iter().all(|&v| v == 0.0));
        assert!(oa.trace.before.at(i, j).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn attention_rows_are_stochastic() {
    let m = Model::init(small_cfg()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let first = random_grid(&mut rng, 1, 3, 8);
    let cache = m
        .run_stage(&request(1, &first, &StageCache::new(), &Mask::filled(1, 3, true)))
        .unwrap()
        .cache;
    assert_eq!(cache.len(), 3);
    let input = random_grid(&mut rng, 2, 3, 8);
    let active = Mask::from_fn(2, 3, |i, j| (i, j) == (0, 1) || (i, j) == (1, 2));
    let att = m.dump_attention(&request(2, &input, &cache, &active)).unwrap();
    assert_eq!(att.len(), 3);
    for a in &att {
        assert_eq!((a.queries, a.keys), (2, 5));
        for q in 0..2 {
            assert!((a.row(q).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(a.row(q).iter().all(|&p| p > 0.0));
        }
    }

    let one = random_grid(&mut rng, 1, 1, 8);
    let att = m
        .dump_attention(&request(1, &one, &StageCache::new(), &Mask::filled(1, 1, true)))
        .unwrap();
    for a in &att {
        assert_eq!(a.data, vec![1.0]);
    }
}

#[test]
fn cache_grows_by_active_count() {
    let m = Model::init(small_cfg()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cache = StageCache::new();
    for (stage, side) in [(1usize, 1usize), (2, 2), (3, 4)] {
        let input = random_grid(&mut rng, side, side, 8);
        let active = Mask::from_fn(side, side, |i, j| stage < 3 || (i + j) % 2 == 0);
        let before = cache.len();
        let out = m.run_stage(&request(stage, &input, &cache, &active)).unwrap();
        assert_eq!(out.cache.len() - before, active.count());
        assert_eq!(out.n_cache, before);
        assert_eq!(out.attended_pairs, (out.n_active * (out.n_cache + out.n_active)) as u64);
        let tags = &out.cache.tags()[before..];
        let expect: Vec<(usize, usize)> = active.positions();
        assert_eq!(tags.iter().map(|t| (t.row, t.col)).collect::<Vec<_>>(), expect);
        assert!(tags.iter().all(|t| t.stage == stage));
        assert_eq!(&out.cache.tags()[..before], cache.tags());
        cache = out.cache;
    }
    assert_eq!(cache.keys(0).len(), cache.len() * 8);
}

#[test]
fn empty_mask_runs_nothing() {
    let m = Model::init(small_cfg()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let first = random_grid(&mut rng, 1, 1, 8);
    let cache = m
        .run_stage(&request(1, &first, &StageCache::new(), &Mask::filled(1, 1, true)))
        .unwrap()
        .cache;
    let input = random_grid(&mut rng, 3, 3, 8);
    let active = Mask::filled(3, 3, false);
    let out = m.run_stage(&request(2, &input, &cache, &active)).unwrap();
    assert!(out.empty);
    assert_eq!(out.n_active, 0);
    assert_eq!(out.attended_pairs, 0);
    assert_eq!(out.cache, cache);
    assert!(out.logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_mismatches_are_rejected() {
    let m = Model::init(small_cfg()).unwrap();
    let cache = StageCache::new();
    let wrong_c = Grid::zeros(2, 2, 4);
    assert!(m
        .run_stage(&request(1, &wrong_c, &cache, &Mask::filled(2, 2, true)))
        .is_err());
    let input = Grid::zeros(2, 2, 8);
    assert!(m
        .run_stage(&request(1, &input, &cache, &Mask::filled(2, 3, true)))
        .is_err());
    let cond = Grid::zeros(3, 3, 8);
    let full = Mask::filled(2, 2, true);
    let req = StageRequest {
        conditioning: Some(&cond),
        ..request(1, &input, &cache, &full)
    };
    assert!(m.run_stage(&req).is_err());
    assert!(m
        .run_stage_traced(&request(1, &input, &cache, &Mask::filled(2, 2, true)), 4)
        .is_err());
}

#[test]
fn reruns_and_threads_are_bit_identical() {
    let m = Model::init(small_cfg()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let input = random_grid(&mut rng, 4, 4, 8);
    let active = Mask::from_fn(4, 4, |i, j| i != j);
    let cache = StageCache::new();
    let base = m.run_stage(&request(1, &input, &cache, &active)).unwrap();
    let outs: Vec<Grid> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..4)
            .map(|_| s.spawn(|| m.run_stage(&request(1, &input, &cache, &active)).unwrap().logits))
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for o in outs {
        assert_eq!(o, base.logits);
    }
}

#[test]
fn checkpoint_round_trip() {
    let m = Model::init(small_cfg()).unwrap();
    let mut buf = Vec::new();
    m.write_checkpoint(&mut buf).unwrap();
    assert_eq!(&buf[..4], b"SSMD");
    assert_eq!(buf.len(), 32 + 8 * m.weights().len());
    let back = Model::read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.checksum(), m.checksum());

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(Model::read_checkpoint(&mut bad.as_slice()).is_err());
    assert!(Model::read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
}

#[test]
fn per_block_maps_count_and_agree_with_trace() {
    let m = Model::init(small_cfg()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = random_grid(&mut rng, 3, 3, 8);
    let active = Mask::from_fn(3, 3, |i, j| (i + j) != 2);
    let cache = StageCache::new();
    let req = request(1, &input, &cache, &active);
    let maps = per_block_mse_maps(&m, &req).unwrap();
    assert_eq!(maps.len(), 2);
    for s in 2..=3 {
        let out = m.run_stage_traced(&req, s).unwrap();
        let direct = mse_change_map(&out.trace, &active).unwrap();
        assert_eq!(maps[s - 2], direct);
        assert!(direct.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
}
