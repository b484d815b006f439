#![allow(dead_code)]

pub mod checks;
pub mod invariants;

use std::sync::Arc;

use lca::harness::{gen_synthetic, SyntheticSpec};
use lca::nn::{init_params, loss_and_gradient, Dataset, LayerLayout};
use lca::optim::{EpochSampler, OptimConfig, Optimizer};
use lca::trajectory::MemoryTrajectory;

pub fn toy_data(n: usize, d: usize, c: usize, separation: f64, seed: u64) -> Dataset {
    gen_synthetic(&SyntheticSpec {
        n,
        d,
        c,
        separation,
        seed,
    })
    .unwrap()
}

/// Minibatch training kept in memory; snapshots θ_0..θ_T in 64-bit.
pub fn train_in_memory(
    arch: &[usize],
    data: &Dataset,
    cfg: OptimConfig,
    steps: usize,
    seed: u64,
) -> (Arc<LayerLayout>, MemoryTrajectory) {
    let mut theta = init_params(arch, seed).unwrap();
    let layout = theta.layout().clone();
    let opt = Optimizer::new(cfg.clone(), layout.clone()).unwrap();
    let mut state = opt.init_state();
    let mut sampler = EpochSampler::new(data.len(), seed ^ 0xabcd).unwrap();
    let mut snaps = vec![theta.values().to_vec()];
    for _ in 0..steps {
        let idx = sampler.next_batch(cfg.batch_size).unwrap();
        let (_, g) = loss_and_gradient(&theta, data, Some(&idx)).unwrap();
        opt.step(&mut theta, &mut state, &g).unwrap();
        snaps.push(theta.values().to_vec());
    }
    (layout, MemoryTrajectory::new(snaps).unwrap())
}
