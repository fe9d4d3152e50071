//! Shared fixtures for the integration suites: canonical models, a
//! seeded random-model generator, and matrix quadrature.
#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mapexit::model::{JumpLaw, JumpStream, Phase};
use mapexit::{MapModel, ScaleEvaluator};

/// Single-phase Brownian model.
pub fn scalar(drift: f64, sigma: f64, kill: f64) -> MapModel {
    MapModel {
        q: DMatrix::from_element(1, 1, 0.0),
        kill_rate: kill,
        phases: vec![Phase {
            drift,
            sigma,
            jumps: Vec::new(),
            auxiliary: false,
        }],
        transition_jumps: BTreeMap::new(),
    }
}

/// The canonical two-state model: symmetric unit switching, drifts
/// (1, -2), unit volatilities.
pub fn canonical(kill: f64) -> MapModel {
    MapModel {
        q: DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]),
        kill_rate: kill,
        phases: vec![
            Phase {
                drift: 1.0,
                sigma: 1.0,
                jumps: Vec::new(),
                auxiliary: false,
            },
            Phase {
                drift: -2.0,
                sigma: 1.0,
                jumps: Vec::new(),
                auxiliary: false,
            },
        ],
        transition_jumps: BTreeMap::new(),
    }
}

/// A conservative two-state model with positive asymptotic drift.
pub fn drift_up_two_state() -> MapModel {
    MapModel {
        q: DMatrix::from_row_slice(2, 2, &[-0.7, 0.7, 1.1, -1.1]),
        kill_rate: 0.0,
        phases: vec![
            Phase {
                drift: 2.0,
                sigma: 1.0,
                jumps: Vec::new(),
                auxiliary: false,
            },
            Phase {
                drift: -1.0,
                sigma: 0.8,
                jumps: Vec::new(),
                auxiliary: false,
            },
        ],
        transition_jumps: BTreeMap::new(),
    }
}

/// Unit-drift compound Poisson process with rate-1 Exp(1) downward
/// jumps (zero asymptotic drift, so the oscillating branch).
pub fn unit_drift_cpp() -> MapModel {
    MapModel {
        q: DMatrix::from_element(1, 1, 0.0),
        kill_rate: 0.0,
        phases: vec![Phase {
            drift: 1.0,
            sigma: 0.0,
            jumps: vec![JumpStream {
                rate: 1.0,
                law: JumpLaw::exponential(1.0),
            }],
            auxiliary: false,
        }],
        transition_jumps: BTreeMap::new(),
    }
}

/// Seeded random killed model with 2-4 phases, dense switching, kill
/// rate in [0.5, 1.5], and (on half the draws) a downward jump stream.
/// Deterministic in `seed`.
pub fn random_killed(seed: u64) -> MapModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let n = 2 + (seed % 3) as usize;
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            if i != j {
                let r = u(0.2, 1.2);
                q[(i, j)] = r;
                row += r;
            }
        }
        q[(i, i)] = -row;
    }
    let kill_rate = u(0.5, 1.5);
    let with_jumps = u(0.0, 1.0) < 0.5;
    let phases = (0..n)
        .map(|i| Phase {
            drift: u(-1.5, 1.5),
            sigma: u(0.6, 1.4),
            jumps: if with_jumps && i == 0 {
                vec![JumpStream {
                    rate: u(0.2, 0.8),
                    law: JumpLaw::exponential(u(0.8, 2.5)),
                }]
            } else {
                Vec::new()
            },
            auxiliary: false,
        })
        .collect();
    MapModel {
        q,
        kill_rate,
        phases,
        transition_jumps: BTreeMap::new(),
    }
}

/// Builds the evaluator, panicking with the seed on failure so a bad
/// fixture is attributable.
pub fn ev(model: &MapModel) -> ScaleEvaluator {
    ScaleEvaluator::new(model).expect("scale evaluator on fixture model")
}

/// Max absolute entry difference.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// Adaptive Simpson quadrature of a matrix-valued integrand, refined
/// until the entrywise rule difference is below `tol`.
pub fn integrate_matrix<F>(f: F, a: f64, b: f64, tol: f64) -> DMatrix<f64>
where
    F: Fn(f64) -> DMatrix<f64>,
{
    fn simpson(fa: &DMatrix<f64>, fm: &DMatrix<f64>, fb: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
        (fa + fm * 4.0 + fb) * (h / 6.0)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> DMatrix<f64>>(
        f: &F,
        a: f64,
        b: f64,
        fa: DMatrix<f64>,
        fm: DMatrix<f64>,
        fb: DMatrix<f64>,
        whole: DMatrix<f64>,
        tol: f64,
        depth: u32,
    ) -> DMatrix<f64> {
        let m = 0.5 * (a + b);
        let lm = f(0.5 * (a + m));
        let rm = f(0.5 * (m + b));
        let left = simpson(&fa, &lm, &fm, m - a);
        let right = simpson(&fm, &rm, &fb, b - m);
        let refined = &left + &right;
        if depth == 0 || (&refined - &whole).amax() <= 15.0 * tol {
            return refined;
        }
        recurse(f, a, m, fa, lm, fm.clone(), left, 0.5 * tol, depth - 1)
            + recurse(f, m, b, fm, rm, fb, right, 0.5 * tol, depth - 1)
    }
    let fa = f(a);
    let fm = f(0.5 * (a + b));
    let fb = f(b);
    let whole = simpson(&fa, &fm, &fb, b - a);
    recurse(&f, a, b, fa, fm, fb, whole, tol, 28)
}
