//! Shared fixtures for integration tests.

#![allow(dead_code, unused_imports)]

use sparsevar::StageSchedule;

pub use sparsevar::walkthrough::WalkthroughPredictor as PencilPredictor;

/// Expected stage-3 outcome, computed by hand and checked with an independent
/// numpy walk-through.
pub mod pencil_expected {
    /// Interpolated MSE change map at stage 3.
    pub const F_TILDE: [[f64; 4]; 4] = [
        [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
        [4.0 / 3.0, 19.0 / 9.0, 26.0 / 9.0, 11.0 / 3.0],
        [8.0 / 3.0, 35.0 / 9.0, 46.0 / 9.0, 19.0 / 3.0],
        [4.0, 17.0 / 3.0, 22.0 / 3.0, 9.0],
    ];

    pub const LOW: [[u8; 4]; 4] = [[1, 1, 1, 1], [1, 1, 1, 1], [1, 1, 0, 0], [1, 0, 0, 0]];

    pub const ACTIVE: [[u8; 4]; 4] = [[1, 0, 1, 0], [0, 0, 0, 0], [1, 0, 1, 1], [0, 1, 1, 1]];

    pub const ANCHORS: [(usize, usize); 4] = [(0, 0), (0, 2), (2, 0), (2, 2)];

    /// Excluded non-anchor positions in row-major order with the assigned
    /// anchor index and similarity, or `None` for a zero fill.
    /// Position and, for copies, the anchor index with its similarity.
    pub type Entry = ((usize, usize), Option<(usize, f64)>);

    pub const ASSIGNMENT: [Entry; 8] = [
        ((0, 1), Some((2, 0.9982743731749958))),
        ((0, 3), None),
        ((1, 0), Some((0, 0.9899494936611665))),
        ((1, 1), Some((2, 0.9498352692842752))),
        ((1, 2), None),
        ((1, 3), Some((3, 0.9019434190207032))),
        ((2, 1), None),
        ((3, 0), Some((1, 0.9899494936611664))),
    ];

    /// Accumulated map after stage 2.
    pub const R2: [[[f64; 2]; 2]; 2] = [[[2.0, 0.0], [1.0, 1.0]], [[2.0, 0.0], [1.6, 0.8]]];

    /// Accumulated map after stage 3.
    pub const R3: [[[f64; 2]; 4]; 4] = [
        [
            [2.6, 0.8],
            [2.666666666666667, 1.0 / 3.0],
            [1.3333333333333335, 1.6666666666666665],
            [1.0, 1.0],
        ],
        [
            [2.6, 0.8],
            [2.7333333333333334, 0.3111111111111111],
            [1.466666666666667, 0.6222222222222222],
            [2.2, 0.9333333333333333],
        ],
        [
            [3.0, 0.0],
            [1.8000000000000003, 0.2888888888888889],
            [2.6, 0.5777777777777778],
            [1.4, 1.8666666666666667],
        ],
        [
            [2.0, 1.0],
            [2.8666666666666667, 0.26666666666666666],
            [2.3333333333333335, 1.3333333333333335],
            [2.2, 1.6],
        ],
    ];

    /// Attended pairs per stage: 1*1, 4*(1+4), 8*(5+8).
    pub const PAIRS: [u64; 3] = [1, 20, 104];
    pub const CACHE: [usize; 3] = [1, 5, 13];
    pub const S3: f64 = 11.0 / 16.0;
}

/// A small conditioned stack for fast pipeline tests.
pub fn small_stack(seed: u64) -> sparsevar::ToyStack {
    let model = sparsevar::ModelConfig {
        n_blocks: 3,
        d_model: 8,
        n_heads: 2,
        vocab: 16,
        seed,
        selected_block: 2,
    };
    let cfg = sparsevar::StackConfig {
        fixture: Some(sparsevar::FlatTextureFixture::new(8).with_seed(seed ^ 0x55)),
        schedule: StageSchedule::square(&[1, 2, 4, 6, 8], 3).unwrap(),
        codebook_seed: seed + 1,
        decoder_seed: seed + 2,
        model,
    };
    sparsevar::ToyStack::build(&cfg).unwrap()
}
