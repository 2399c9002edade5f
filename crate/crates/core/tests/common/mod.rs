//! Random memory-bank operation sequences shared by the property tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recon_core::geometry::{FlowField, Intrinsics, SE3Pose};
use recon_core::memory::{DualMemoryBank, MemoryConfig, MemoryToken};

pub const DIM: usize = 3;
pub const IMAGE: usize = 8;
pub const PATCH: usize = 4;

#[derive(Debug, Clone)]
pub enum Op {
    /// Token count, RNG seed for their contents.
    Insert(usize, u64),
    /// Flow magnitude (px) and baseline seed.
    Filter(f64, u64),
    Retrieve(u64),
    Prune,
}

pub fn config_strategy() -> impl Strategy<Value = MemoryConfig> {
    (1usize..5, 1usize..24, 0.0f64..8.0).prop_map(|(ls, k, beta)| MemoryConfig {
        short_term_frames: ls,
        long_term_capacity: k,
        beta,
        ..MemoryConfig::new(DIM, DIM)
    })
}

pub fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0usize..6, any::<u64>()).prop_map(|(n, s)| Op::Insert(n, s)),
        2 => (0.0f64..6.0, any::<u64>()).prop_map(|(m, s)| Op::Filter(m, s)),
        2 => any::<u64>().prop_map(Op::Retrieve),
        1 => Just(Op::Prune),
    ]
}

pub fn ops_strategy() -> impl Strategy<Value = (MemoryConfig, Vec<Op>)> {
    (config_strategy(), prop::collection::vec(op_strategy(), 1..40))
}

pub fn random_tokens(frame_id: u64, n: usize, seed: u64) -> Vec<MemoryToken> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| MemoryToken {
            key: (0..DIM).map(|_| rng.random_range(-2.0..2.0)).collect(),
            value: (0..DIM).map(|_| rng.random_range(-2.0..2.0)).collect(),
            frame_id,
            patch_index: (i % ((IMAGE / PATCH) * (IMAGE / PATCH))) as u32,
            // Coarse values so that confidence ties occur.
            confidence: 1.0 + rng.random_range(0..4) as f64,
            uncertainty: None,
        })
        .collect()
}

fn random_flow(magnitude: f64, rng: &mut ChaCha8Rng) -> FlowField {
    let flow = (0..IMAGE * IMAGE)
        .map(|_| Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * magnitude)
        .collect();
    FlowField::new(IMAGE, IMAGE, flow).unwrap()
}

pub fn random_queries(seed: u64, rows: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, DIM, |_, _| rng.random_range(-3.0..3.0))
}

/// Applies `ops`, checking every invariant after each step. Returns the
/// final bank.
pub fn run_ops(cfg: MemoryConfig, ops: &[Op]) -> Result<DualMemoryBank, TestCaseError> {
    let mut bank = DualMemoryBank::new(cfg).unwrap();
    let k = Intrinsics::centered(10.0, IMAGE, IMAGE);
    let mut next_frame = 0u64;
    for op in ops {
        match *op {
            Op::Insert(n, seed) => {
                bank.insert_frame(next_frame, random_tokens(next_frame, n, seed)).unwrap();
                next_frame += 1;
            }
            Op::Filter(magnitude, seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let flow = random_flow(magnitude, &mut rng);
                let pose_j = if rng.random_bool(0.2) {
                    SE3Pose::identity()
                } else {
                    SE3Pose::from_translation(Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)))
                };
                let report = bank.uncertainty_filter(&flow, &SE3Pose::identity(), &pose_j, &k, PATCH);
                prop_assert!(report.removed_patches.len() == report.removed);
            }
            Op::Retrieve(seed) => {
                if bank.is_empty() {
                    prop_assert!(bank.retrieve(&random_queries(seed, 2)).is_err());
                } else {
                    let q = random_queries(seed, 3);
                    let a = bank.attention(&q).unwrap();
                    for row in a.row_iter() {
                        prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
                        prop_assert!(row.iter().all(|&w| w >= 0.0));
                    }
                    prop_assert_eq!(bank.retrieve(&q).unwrap().shape(), (3, DIM));
                }
            }
            Op::Prune => {
                let before = bank.long_term().len();
                let pruned = bank.prune_topk();
                prop_assert_eq!(before - pruned, bank.long_term().len());
            }
        }
        if let Err(e) = bank.check_invariants() {
            return Err(TestCaseError::fail(e));
        }
        prop_assert!(bank.short_term().len() <= cfg.short_term_frames);
        prop_assert!(bank.long_term().len() <= cfg.long_term_capacity);
        for t in bank.long_term() {
            prop_assert!(t.uncertainty.unwrap() <= cfg.beta);
        }
    }
    Ok(bank)
}
