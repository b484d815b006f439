//! Accounting identities checked on random small trajectories.

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use lca::analysis::{layer_series, layer_totals};
use lca::engine::{compute_lca_per_class, ClassAggregate, LcaOptions, Method, MlpLandscape};
use lca::optim::{LayerOverride, OptimConfig};
use lca::trajectory::SnapshotSource;

use super::{toy_data, train_in_memory};

#[derive(Debug, Clone)]
pub struct Case {
    pub d: usize,
    pub hidden: usize,
    pub c: usize,
    pub n: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub frozen: Option<usize>,
    pub separation: f64,
    pub seed: u64,
    pub max_depth: u8,
    pub first_order: bool,
}

pub fn cases() -> impl Strategy<Value = Case> {
    (
        2usize..6,
        2usize..8,
        2usize..5,
        20usize..80,
        1usize..12,
        0.01f64..0.8,
        prop_oneof![Just(0.0), 0.0f64..0.95],
        1usize..20,
        prop_oneof![Just(None), (0usize..2).prop_map(Some)],
        (0.0f64..4.0, any::<u64>(), 0u8..4, any::<bool>()),
    )
        .prop_map(
            |(d, hidden, c, n, steps, lr, momentum, batch, frozen, (separation, seed, max_depth, first_order))| Case {
                d,
                hidden,
                c,
                n,
                steps,
                lr,
                momentum,
                batch,
                frozen,
                separation,
                seed,
                max_depth,
                first_order,
            },
        )
}

/// Σ_i A[t,i] + ε_t = ΔL_t, Σ_c A_c = A, frozen layers get exactly zero,
/// and layer, parameter and grand totals agree.
pub fn reconcile(case: &Case) -> Result<(), TestCaseError> {
    let data = toy_data(case.n, case.d, case.c, case.separation, case.seed);
    let arch = [case.d, case.hidden, case.c];
    let mut cfg = OptimConfig::sgd(case.lr, case.momentum, case.batch.min(case.n));
    if let Some(l) = case.frozen {
        cfg = cfg.with_layer(format!("dense_{l}"), LayerOverride { frozen: true, ..Default::default() });
    }
    let (layout, traj) = train_in_memory(&arch, &data, cfg, case.steps, case.seed);
    let land = MlpLandscape::new(&data, layout.clone()).unwrap();
    let opts = LcaOptions {
        tol: 1e-3,
        max_depth: case.max_depth,
        // the gate is not under test here
        gate_pct: f64::MAX,
        method: if case.first_order { Method::FirstOrder } else { Method::Simpson },
    };
    let (m, classes) = compute_lca_per_class(&traj, &land, &opts, ClassAggregate::None).unwrap();
    let s = &m.summary;
    prop_assert_eq!(m.steps(), traj.num_iterations());

    for t in 0..m.steps() {
        // Σ_i A[t,i] + ε_t = ΔL_t
        let dl = s.losses[t + 1] - s.losses[t];
        let sum: f64 = m.row(t).iter().sum();
        prop_assert!((sum + s.iter_error[t] - dl).abs() <= 1e-12 * (1.0 + dl.abs()),
            "t={} sum={} eps={} dl={}", t, sum, s.iter_error[t], dl);

        // Σ_c A_c[t,i] = A[t,i]
        for i in 0..m.params() {
            let total: f64 = (0..classes.classes).map(|c| classes.get(c, t, i)).sum();
            prop_assert!((total - m.get(t, i)).abs() <= 1e-9, "t={} i={}", t, i);
        }
    }

    if let Some(l) = case.frozen {
        for t in 0..m.steps() {
            for i in layout.layer_range(l) {
                prop_assert_eq!(m.get(t, i), 0.0);
                for c in 0..classes.classes {
                    prop_assert_eq!(classes.get(c, t, i), 0.0);
                }
            }
        }
    }

    // layer sums = parameter sums = grand total
    let per_param = m.totals_per_param();
    let grand: f64 = per_param.iter().sum();
    let layers = layer_totals(&m, &layout);
    let by_layer: f64 = layers.totals.iter().sum();
    prop_assert!((by_layer - grand).abs() <= 1e-9 * (1.0 + grand.abs()));
    prop_assert!((grand - s.allocated_total).abs() <= 1e-9 * (1.0 + grand.abs()));
    let series = layer_series(&m, &layout);
    for (l, ser) in series.iter().enumerate() {
        let from_series: f64 = ser.iter().sum();
        prop_assert!((from_series - layers.totals[l]).abs() <= 1e-9 * (1.0 + from_series.abs()));
    }
    let eps: f64 = s.iter_error.iter().sum();
    prop_assert!((grand + eps - s.loss_change()).abs() <= 1e-9 * (1.0 + s.loss_change().abs()));
    Ok(())
}

pub fn run_suite(cases_n: u32) -> Result<(), String> {
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(cases_n));
    runner.run(&cases(), |c| reconcile(&c)).map_err(|e| e.to_string())
}
