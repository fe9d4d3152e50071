//! Model description for spectrally negative Markov-additive processes.
//!
//! A model couples an `N`-state transition-rate matrix `Q` (row sums ≤ 0;
//! any row defect acts as state-dependent killing, and a global
//! `kill_rate` adds an independent exponential clock) with per-phase level
//! dynamics: drift `a_i`, Brownian volatility `σ_i`, and any number of
//! downward jump streams, each a Poisson process of hyperexponential
//! magnitudes. Phase switches `i → j` may additionally trigger a downward
//! jump drawn from a transition-specific law.
//!
//! The central object is the matrix exponent
//!
//! ```text
//! F(α) = diag(ψ_1(α), …, ψ_N(α)) + Q ∘ G(α) − q·I,
//! ψ_i(α) = a_i α + σ_i² α²/2 + Σ_s λ_s (ĝ_s(α) − 1),
//! ```
//!
//! where `∘` is the entrywise product, `G(α)_{ij} = E e^{α U_{ij}}` is the
//! transform of the (non-positive) switch jump (`1` when no jump is
//! attached, `G_{ii} = 1`), and `ĝ(α) = Σ_m w_m μ_m/(μ_m + α)` is the
//! transform of a hyperexponential downward jump. It satisfies
//! `E[e^{α(X(t)−X(0))}; J(t) = j | J(0) = i] = (e^{F(α)t})_{ij}`.
//!
//! Spectrally negative means the level never jumps up; every phase must be
//! able to move up (σ_i > 0 or a_i > 0). The one exception is the
//! `auxiliary` phases manufactured by [`MapModel::embed_fluid`], which
//! carry slope −1 and replace jumps by linear stretches so that all
//! downstream spectral machinery only ever sees a jump-free model.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tol;

/// Complex scalar used across the spectral machinery.
pub type C64 = Complex<f64>;

/// One exponential component of a hyperexponential mixture: weight `w`
/// and rate `μ` (the magnitude is Exp(μ), jumping downward).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    /// Mixture weight; weights must be positive and sum to one.
    pub weight: f64,
    /// Exponential rate of the magnitude; must be positive.
    pub mu: f64,
}

/// A hyperexponential law for a downward jump magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JumpLaw {
    /// Mixture components `(w_m, μ_m)`.
    pub components: Vec<MixtureComponent>,
}

impl JumpLaw {
    /// A single-component exponential law with rate `mu`.
    pub fn exponential(mu: f64) -> Self {
        JumpLaw {
            components: vec![MixtureComponent { weight: 1.0, mu }],
        }
    }

    /// Transform `E e^{αU} = Σ_m w_m μ_m / (μ_m + α)` of the signed jump
    /// `U = −V`, `V` hyperexponential. Defined for `α` away from the
    /// poles at `−μ_m`.
    pub fn transform(&self, alpha: C64) -> C64 {
        let mut g = C64::new(0.0, 0.0);
        for c in &self.components {
            g += C64::new(c.weight * c.mu, 0.0) / (alpha + C64::new(c.mu, 0.0));
        }
        g
    }

    /// Derivative of [`JumpLaw::transform`] in `α`:
    /// `−Σ_m w_m μ_m / (μ_m + α)²`.
    pub fn transform_deriv(&self, alpha: C64) -> C64 {
        let mut g = C64::new(0.0, 0.0);
        for c in &self.components {
            let d = alpha + C64::new(c.mu, 0.0);
            g -= C64::new(c.weight * c.mu, 0.0) / (d * d);
        }
        g
    }

    /// Second derivative of [`JumpLaw::transform`] in `α`:
    /// `Σ_m 2 w_m μ_m / (μ_m + α)³`.
    pub fn transform_deriv2(&self, alpha: C64) -> C64 {
        let mut g = C64::new(0.0, 0.0);
        for c in &self.components {
            let d = alpha + C64::new(c.mu, 0.0);
            g += C64::new(2.0 * c.weight * c.mu, 0.0) / (d * d * d);
        }
        g
    }

    /// Mean magnitude `E V = Σ_m w_m / μ_m`.
    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight / c.mu).sum()
    }

    /// Distance from `alpha` to the nearest transform pole `−μ_m`.
    pub fn pole_distance(&self, alpha: C64) -> f64 {
        self.components
            .iter()
            .map(|c| (alpha + C64::new(c.mu, 0.0)).norm())
            .fold(f64::INFINITY, f64::min)
    }
}

/// A Poisson stream of downward jumps local to one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpStream {
    /// Poisson intensity; must be positive.
    pub rate: f64,
    /// Magnitude law.
    #[serde(rename = "mixture")]
    pub law: JumpLaw,
}

/// Level dynamics of one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    /// Linear drift `a_i`.
    pub drift: f64,
    /// Brownian volatility `σ_i ≥ 0`.
    pub sigma: f64,
    /// Phase-local downward jump streams.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub jumps: Vec<JumpStream>,
    /// Marks the unit-downslope phases introduced by the fluid embedding.
    /// User models must not set this; embedded models use it to tell the
    /// spectral layer which coordinates carry the original process.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub auxiliary: bool,
}

/// A fully specified Markov-additive model.
#[derive(Debug, Clone, PartialEq)]
pub struct MapModel {
    /// Transition-rate matrix: off-diagonal ≥ 0, row sums ≤ 0 (strict
    /// deficit = state-dependent killing).
    pub q: DMatrix<f64>,
    /// Global killing rate `q ≥ 0` (an independent Exp(q) lifetime).
    pub kill_rate: f64,
    /// Per-phase dynamics; `phases.len()` equals the dimension of `q`.
    pub phases: Vec<Phase>,
    /// Jump laws attached to specific transitions `i → j`, `i ≠ j`.
    pub transition_jumps: BTreeMap<(usize, usize), JumpLaw>,
}

/// Where an auxiliary phase of the fluid embedding came from.
#[derive(Debug, Clone, PartialEq)]
pub enum AuxOrigin {
    /// Replaces one mixture component of a phase-local jump stream;
    /// `stream` is the index into `phases[source].jumps`.
    Stream { stream: usize, component: usize },
    /// Replaces one mixture component of the jump on transition
    /// `source → target`.
    Transition { target: usize, component: usize },
}

/// One auxiliary phase created by [`MapModel::embed_fluid`].
#[derive(Debug, Clone, PartialEq)]
pub struct AuxPhase {
    /// Index of this phase in the embedded model.
    pub index: usize,
    /// Original phase whose dynamics spawn this stretch.
    pub source: usize,
    /// What the stretch replaces.
    pub origin: AuxOrigin,
    /// Rate of entering this phase (λ·w or q_{ij}·w).
    pub entry_rate: f64,
    /// Rate of leaving (the mixture component's μ).
    pub mu: f64,
}

/// Book-keeping of the fluid embedding: which embedded coordinates are
/// the original phases and where the auxiliary ones came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    /// Number of original phases.
    pub n_original: usize,
    /// Indices of the original phases inside the embedded model (always
    /// the leading block `0..n_original`).
    pub original_indices: Vec<usize>,
    /// Auxiliary phases in embedded-index order.
    pub aux: Vec<AuxPhase>,
}

/// A single validation finding. `validate` returns all findings rather
/// than stopping at the first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// Dotted path of the offending field (`"phases[1].sigma"`).
    pub field: String,
    /// Human-readable description.
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Errors from model-level operations.
#[derive(Debug, Error)]
pub enum ModelError {
    /// The model failed validation; all findings are attached.
    #[error("invalid model: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    /// Evaluation was requested within [`tol::POLE_PROXIMITY`] of a
    /// transform pole `−μ`.
    #[error("matrix exponent evaluated at α = {alpha} within {dist:.3e} of the pole −{mu}")]
    PoleProximity { alpha: C64, mu: f64, dist: f64 },
    /// An operation that needs an unkilled conservative model (stationary
    /// distribution, asymptotic drift) was applied to a killed one.
    #[error("operation requires an unkilled conservative model ({reason})")]
    NotConservative { reason: String },
    /// The Perron eigenvalue came back with a non-negligible imaginary
    /// part, which contradicts Perron–Frobenius for an irreducible
    /// Metzler matrix.
    #[error("dominant eigenvalue of F({alpha}) has imaginary part {imag:.3e}")]
    PerronNotReal { alpha: f64, imag: f64 },
    /// The model file could not be parsed.
    #[error("model parse error: {0}")]
    Parse(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// On-disk JSON representation (see `MapModel::from_json_str`).
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    states: usize,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    #[serde(default)]
    kill_rate: f64,
    phases: Vec<Phase>,
    #[serde(default)]
    transition_jumps: BTreeMap<String, JumpLaw>,
}

impl MapModel {
    /// Number of phases.
    pub fn n(&self) -> usize {
        self.phases.len()
    }

    /// Indices of the non-auxiliary phases (the original process).
    pub fn original_set(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.phases[i].auxiliary).collect()
    }

    /// True when the model carries no jumps (neither phase-local streams
    /// nor transition jumps) and can be fed to the spectral layer
    /// directly.
    pub fn is_jump_free(&self) -> bool {
        self.transition_jumps.is_empty() && self.phases.iter().all(|p| p.jumps.is_empty())
    }

    /// Largest magnitude among rates/drifts/variances, used to scale
    /// tolerances.
    pub fn scale(&self) -> f64 {
        let mut s = 1.0f64;
        for v in self.q.iter() {
            s = s.max(v.abs());
        }
        for p in &self.phases {
            s = s.max(p.drift.abs()).max(p.sigma * p.sigma);
            for j in &p.jumps {
                s = s.max(j.rate);
            }
        }
        s.max(self.kill_rate)
    }

    /// Parse a model from the JSON format
    ///
    /// ```json
    /// {
    ///   "states": 2,
    ///   "Q": [[-1.0, 1.0], [1.0, -1.0]],
    ///   "kill_rate": 0.0,
    ///   "phases": [
    ///     {"drift": 1.0, "sigma": 1.0,
    ///      "jumps": [{"rate": 1.0, "mixture": [{"weight": 1.0, "mu": 1.0}]}]},
    ///     {"drift": -2.0, "sigma": 1.0}
    ///   ],
    ///   "transition_jumps": {"0,1": [{"weight": 1.0, "mu": 2.0}]}
    /// }
    /// ```
    ///
    /// `kill_rate`, `jumps` and `transition_jumps` are optional; unknown
    /// keys are rejected. Parsing does not validate the numbers — call
    /// [`MapModel::validate`] next.
    pub fn from_json_str(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        let n = file.states;
        if file.q.len() != n || file.q.iter().any(|row| row.len() != n) {
            return Err(ModelError::Parse(format!(
                "Q must be a {n}×{n} row-major matrix matching `states`"
            )));
        }
        if file.phases.len() != n {
            return Err(ModelError::Parse(format!(
                "`phases` has {} entries, expected {n}",
                file.phases.len()
            )));
        }
        let q = DMatrix::from_fn(n, n, |i, j| file.q[i][j]);
        let mut transition_jumps = BTreeMap::new();
        for (key, law) in file.transition_jumps {
            let parts: Vec<&str> = key.split(',').collect();
            let parse_pair = || -> Option<(usize, usize)> {
                if parts.len() != 2 {
                    return None;
                }
                let i = parts[0].trim().parse().ok()?;
                let j = parts[1].trim().parse().ok()?;
                Some((i, j))
            };
            let (i, j) = parse_pair().ok_or_else(|| {
                ModelError::Parse(format!(
                    "transition_jumps key {key:?} is not of the form \"i,j\""
                ))
            })?;
            transition_jumps.insert((i, j), law);
        }
        Ok(MapModel {
            q,
            kill_rate: file.kill_rate,
            phases: file.phases,
            transition_jumps,
        })
    }

    /// Serialize to the same JSON format accepted by
    /// [`MapModel::from_json_str`].
    pub fn to_json_string(&self) -> String {
        let n = self.n();
        let file = ModelFile {
            states: n,
            q: (0..n)
                .map(|i| (0..n).map(|j| self.q[(i, j)]).collect())
                .collect(),
            kill_rate: self.kill_rate,
            phases: self.phases.clone(),
            transition_jumps: self
                .transition_jumps
                .iter()
                .map(|(&(i, j), law)| (format!("{i},{j}"), law.clone()))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
    }

    /// Check every structural constraint and return all findings (empty
    /// means the model is usable).
    ///
    /// Checked: square finite `Q` with non-negative off-diagonal and
    /// non-positive row sums; irreducibility of the switch graph;
    /// `kill_rate ≥ 0`; per phase `σ ≥ 0` and the spectral negativity
    /// requirement σ > 0 or a > 0 (auxiliary phases instead require
    /// σ = 0, a = −1); jump stream rates > 0; mixture weights positive
    /// and summing to 1 with positive rates; transition-jump keys in
    /// range with `i ≠ j`.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.n();
        fn push(out: &mut Vec<Violation>, field: String, message: String) {
            out.push(Violation { field, message });
        }

        if n == 0 {
            push(&mut out, "phases".into(), "model must have at least one phase".into());
            return out;
        }
        if self.q.nrows() != n || self.q.ncols() != n {
            push(
                &mut out,
                "Q".into(),
                format!(
                    "Q is {}×{}, expected {n}×{n}",
                    self.q.nrows(),
                    self.q.ncols()
                ),
            );
            return out;
        }
        if self.q.iter().any(|v| !v.is_finite()) {
            push(&mut out, "Q".into(), "entries must be finite".into());
        }
        if !(self.kill_rate >= 0.0 && self.kill_rate.is_finite()) {
            push(
                &mut out,
                "kill_rate".into(),
                format!("must be finite and ≥ 0, got {}", self.kill_rate),
            );
        }
        let scale = self.scale();
        for i in 0..n {
            let mut row_sum = 0.0;
            for j in 0..n {
                let v = self.q[(i, j)];
                if i != j && v < 0.0 {
                    push(
                        &mut out,
                        format!("Q[{i}][{j}]"),
                        format!("off-diagonal rates must be ≥ 0, got {v}"),
                    );
                }
                row_sum += v;
            }
            if row_sum > tol::CONSERVATIVE_ROW_SUM * scale {
                push(
                    &mut out,
                    format!("Q[{i}]"),
                    format!("row sum must be ≤ 0 (deficit = killing), got {row_sum:e}"),
                );
            }
        }
        if !self.strongly_connected() {
            push(
                &mut out,
                "Q".into(),
                "switch graph must be irreducible (every phase reachable from every other)".into(),
            );
        }
        for (i, p) in self.phases.iter().enumerate() {
            if !(p.sigma >= 0.0 && p.sigma.is_finite()) {
                push(
                    &mut out,
                    format!("phases[{i}].sigma"),
                    format!("must be finite and ≥ 0, got {}", p.sigma),
                );
            }
            if !p.drift.is_finite() {
                push(&mut out, format!("phases[{i}].drift"), "must be finite".into());
            }
            if p.auxiliary {
                if p.sigma != 0.0 || p.drift != -1.0 || !p.jumps.is_empty() {
                    push(
                        &mut out,
                        format!("phases[{i}]"),
                        "auxiliary phases carry σ = 0, a = −1 and no jumps".into(),
                    );
                }
            } else if !(p.sigma > 0.0 || p.drift > 0.0) {
                push(
                    &mut out,
                    format!("phases[{i}]"),
                    format!(
                        "phase paths must be able to increase: σ > 0 or a > 0 \
                         (got σ = {}, a = {})",
                        p.sigma, p.drift
                    ),
                );
            }
            for (s, stream) in p.jumps.iter().enumerate() {
                if !(stream.rate > 0.0 && stream.rate.is_finite()) {
                    push(
                        &mut out,
                        format!("phases[{i}].jumps[{s}].rate"),
                        format!("must be finite and > 0, got {}", stream.rate),
                    );
                }
                validate_law(&stream.law, &format!("phases[{i}].jumps[{s}].mixture"), &mut out);
            }
        }
        for (&(i, j), law) in &self.transition_jumps {
            let field = format!("transition_jumps[{i},{j}]");
            if i >= n || j >= n {
                push(&mut out, field.clone(), format!("indices out of range for {n} phases"));
                continue;
            }
            if i == j {
                push(&mut out, field.clone(), "jumps attach to transitions, not sojourns (i ≠ j)".into());
                continue;
            }
            validate_law(law, &field, &mut out);
        }
        out
    }

    /// Strong connectivity of the directed graph with edges where
    /// `Q_{ij} > 0`.
    fn strongly_connected(&self) -> bool {
        let n = self.n();
        if n == 1 {
            return true;
        }
        let reach = |forward: bool| -> usize {
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            let mut count = 1;
            while let Some(i) = stack.pop() {
                for (j, seen_j) in seen.iter_mut().enumerate() {
                    let edge = if forward {
                        self.q[(i, j)] > 0.0
                    } else {
                        self.q[(j, i)] > 0.0
                    };
                    if i != j && edge && !*seen_j {
                        *seen_j = true;
                        count += 1;
                        stack.push(j);
                    }
                }
            }
            count
        };
        reach(true) == n && reach(false) == n
    }

    /// Guard against evaluations near the transform poles `−μ_m`.
    fn check_poles(&self, alpha: C64) -> Result<(), ModelError> {
        let mut worst: Option<(f64, f64)> = None;
        let mut consider = |law: &JumpLaw| {
            for c in &law.components {
                let d = (alpha + C64::new(c.mu, 0.0)).norm();
                if worst.is_none_or(|(w, _)| d < w) {
                    worst = Some((d, c.mu));
                }
            }
        };
        for p in &self.phases {
            for s in &p.jumps {
                consider(&s.law);
            }
        }
        for law in self.transition_jumps.values() {
            consider(law);
        }
        if let Some((dist, mu)) = worst {
            if dist < tol::POLE_PROXIMITY {
                return Err(ModelError::PoleProximity { alpha, mu, dist });
            }
        }
        Ok(())
    }

    /// The matrix exponent `F(α)` (complex `α` allowed; see module docs).
    pub fn matrix_exponent(&self, alpha: C64) -> Result<DMatrix<C64>, ModelError> {
        self.check_poles(alpha)?;
        let n = self.n();
        let mut f = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
        for i in 0..n {
            let p = &self.phases[i];
            let mut psi = alpha * C64::new(p.drift, 0.0)
                + alpha * alpha * C64::new(0.5 * p.sigma * p.sigma, 0.0);
            for s in &p.jumps {
                psi += C64::new(s.rate, 0.0) * (s.law.transform(alpha) - C64::new(1.0, 0.0));
            }
            f[(i, i)] = psi + C64::new(self.q[(i, i)] - self.kill_rate, 0.0);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let g = match self.transition_jumps.get(&(i, j)) {
                    Some(law) => law.transform(alpha),
                    None => C64::new(1.0, 0.0),
                };
                f[(i, j)] = C64::new(self.q[(i, j)], 0.0) * g;
            }
        }
        Ok(f)
    }

    /// `F(α)` at real `α`, returned as a real matrix.
    pub fn matrix_exponent_real(&self, alpha: f64) -> Result<DMatrix<f64>, ModelError> {
        let f = self.matrix_exponent(C64::new(alpha, 0.0))?;
        Ok(f.map(|z| z.re))
    }

    /// Analytic derivative `F′(α)`.
    pub fn matrix_exponent_deriv(&self, alpha: C64) -> Result<DMatrix<C64>, ModelError> {
        self.check_poles(alpha)?;
        let n = self.n();
        let mut f = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
        for i in 0..n {
            let p = &self.phases[i];
            let mut dpsi =
                C64::new(p.drift, 0.0) + alpha * C64::new(p.sigma * p.sigma, 0.0);
            for s in &p.jumps {
                dpsi += C64::new(s.rate, 0.0) * s.law.transform_deriv(alpha);
            }
            f[(i, i)] = dpsi;
            for j in 0..n {
                if j == i {
                    continue;
                }
                if let Some(law) = self.transition_jumps.get(&(i, j)) {
                    f[(i, j)] = C64::new(self.q[(i, j)], 0.0) * law.transform_deriv(alpha);
                }
            }
        }
        Ok(f)
    }

    /// Analytic second derivative `F″(α)`.
    pub fn matrix_exponent_deriv2(&self, alpha: C64) -> Result<DMatrix<C64>, ModelError> {
        self.check_poles(alpha)?;
        let n = self.n();
        let mut f = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
        for i in 0..n {
            let p = &self.phases[i];
            let mut d2psi = C64::new(p.sigma * p.sigma, 0.0);
            for s in &p.jumps {
                d2psi += C64::new(s.rate, 0.0) * s.law.transform_deriv2(alpha);
            }
            f[(i, i)] = d2psi;
            for j in 0..n {
                if j == i {
                    continue;
                }
                if let Some(law) = self.transition_jumps.get(&(i, j)) {
                    f[(i, j)] = C64::new(self.q[(i, j)], 0.0) * law.transform_deriv2(alpha);
                }
            }
        }
        Ok(f)
    }

    /// The Perron root `k(α)`: the dominant (simple, real) eigenvalue of
    /// the irreducible Metzler matrix `F(α)` for real `α`. Convex in `α`,
    /// with `k(0) ≤ 0` and `k(0) = 0` exactly for unkilled conservative
    /// models.
    pub fn perron_root(&self, alpha: f64) -> Result<f64, ModelError> {
        let f = self.matrix_exponent_real(alpha)?;
        let eigs = f.complex_eigenvalues();
        let mut best = eigs[0];
        for &e in eigs.iter() {
            if e.re > best.re {
                best = e;
            }
        }
        let scale = f.amax().max(1.0);
        if best.im.abs() > 1e-7 * scale {
            return Err(ModelError::PerronNotReal {
                alpha,
                imag: best.im,
            });
        }
        Ok(best.re)
    }

    /// Whether the model is free of killing: `kill_rate = 0` and `Q`
    /// conservative (row sums 0 within tolerance).
    pub fn is_conservative(&self) -> bool {
        if self.kill_rate != 0.0 {
            return false;
        }
        let scale = self.scale();
        (0..self.n()).all(|i| {
            let s: f64 = (0..self.n()).map(|j| self.q[(i, j)]).sum();
            s.abs() <= tol::CONSERVATIVE_ROW_SUM * scale.max(1.0)
        })
    }

    /// Stationary distribution `π` of `Q` (requires a conservative model).
    pub fn stationary(&self) -> Result<DVector<f64>, ModelError> {
        if !self.is_conservative() {
            return Err(ModelError::NotConservative {
                reason: "stationary distribution of a killed chain is not defined".into(),
            });
        }
        let n = self.n();
        if n == 1 {
            return Ok(DVector::from_element(1, 1.0));
        }
        // Solve πQ = 0, π𝟙 = 1: transpose and replace the last equation
        // by the normalization.
        let mut a = self.q.transpose();
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut b = DVector::zeros(n);
        b[n - 1] = 1.0;
        let lu = a.lu();
        let pi = lu.solve(&b).ok_or_else(|| ModelError::NotConservative {
            reason: "transition-rate matrix is numerically reducible".into(),
        })?;
        Ok(pi)
    }

    /// Asymptotic drift `k′(0) = π F′(0) 𝟙`, the a.s. limit of `X(t)/t`.
    /// Only defined for unkilled conservative models.
    pub fn asymptotic_drift(&self) -> Result<f64, ModelError> {
        let pi = self.stationary()?;
        let n = self.n();
        let mut total = 0.0;
        for i in 0..n {
            let p = &self.phases[i];
            // (F′(0)𝟙)_i = a_i − Σ_s λ_s E V_s − Σ_{j≠i} Q_{ij} E V_{ij}.
            let mut row = p.drift;
            for s in &p.jumps {
                row -= s.rate * s.law.mean();
            }
            for j in 0..n {
                if j != i {
                    if let Some(law) = self.transition_jumps.get(&(i, j)) {
                        row -= self.q[(i, j)] * law.mean();
                    }
                }
            }
            total += pi[i] * row;
        }
        Ok(total)
    }

    /// The same model with the global killing rate set to `q`.
    pub fn with_killing(&self, q: f64) -> MapModel {
        let mut m = self.clone();
        m.kill_rate = q;
        m
    }

    /// Replace every jump by a unit-downslope auxiliary phase (the fluid
    /// embedding): a phase-local stream `(λ, Σ w_m Exp(μ_m))` on phase
    /// `i` becomes, per component, an auxiliary phase entered from `i` at
    /// rate `λ w_m` and left back to `i` at rate `μ_m`; a jump on
    /// transition `i → j` with rate `r` routes through an auxiliary phase
    /// entered at `r·w_m` and left to `j` at `μ_m`. Original phases keep
    /// their indices (leading block). Killing — global and row-deficit —
    /// stays on the original rows only (jumps are instantaneous in the
    /// original time scale), encoded as row deficit of the embedded `Q`
    /// with `kill_rate = 0`.
    ///
    /// The embedded exponent satisfies the Schur-complement identity
    /// `F(α) = A₁₁(α) − A₁₂ A₂₂(α)⁻¹ A₂₁` with blocks split original /
    /// auxiliary, so `F(α)⁻¹` is the original block of `F_emb(α)⁻¹`.
    ///
    /// A jump-free model embeds to itself (with killing folded into the
    /// row deficit in the same way).
    pub fn embed_fluid(&self) -> (MapModel, EmbeddingMap) {
        let n = self.n();
        // Enumerate auxiliary phases first.
        let mut aux = Vec::new();
        let mut next = n;
        for (i, p) in self.phases.iter().enumerate() {
            for (s, stream) in p.jumps.iter().enumerate() {
                for (m, comp) in stream.law.components.iter().enumerate() {
                    aux.push(AuxPhase {
                        index: next,
                        source: i,
                        origin: AuxOrigin::Stream {
                            stream: s,
                            component: m,
                        },
                        entry_rate: stream.rate * comp.weight,
                        mu: comp.mu,
                    });
                    next += 1;
                }
            }
        }
        for (&(i, j), law) in &self.transition_jumps {
            let rate = self.q[(i, j)];
            if rate <= 0.0 {
                // A law on a never-firing transition embeds to nothing.
                continue;
            }
            for (m, comp) in law.components.iter().enumerate() {
                aux.push(AuxPhase {
                    index: next,
                    source: i,
                    origin: AuxOrigin::Transition {
                        target: j,
                        component: m,
                    },
                    entry_rate: rate * comp.weight,
                    mu: comp.mu,
                });
                next += 1;
            }
        }
        let n_emb = next;

        let mut q = DMatrix::zeros(n_emb, n_emb);
        // Original off-diagonal rates, minus transitions rerouted through
        // auxiliary phases.
        for i in 0..n {
            for j in 0..n {
                if i != j && !self.transition_jumps.contains_key(&(i, j)) {
                    q[(i, j)] = self.q[(i, j)];
                }
            }
        }
        for a in &aux {
            q[(a.source, a.index)] = a.entry_rate;
            let back = match a.origin {
                AuxOrigin::Stream { .. } => a.source,
                AuxOrigin::Transition { target, .. } => target,
            };
            q[(a.index, back)] = a.mu;
            q[(a.index, a.index)] = -a.mu;
        }
        // Original diagonals: preserve each row's total deficit
        // (original deficit plus global killing).
        for i in 0..n {
            let orig_row_sum: f64 = (0..n).map(|j| self.q[(i, j)]).sum();
            let deficit = -orig_row_sum + self.kill_rate;
            let out: f64 = (0..n_emb).filter(|&j| j != i).map(|j| q[(i, j)]).sum();
            q[(i, i)] = -out - deficit;
        }

        let mut phases: Vec<Phase> = self
            .phases
            .iter()
            .map(|p| Phase {
                drift: p.drift,
                sigma: p.sigma,
                jumps: Vec::new(),
                auxiliary: p.auxiliary,
            })
            .collect();
        for _ in &aux {
            phases.push(Phase {
                drift: -1.0,
                sigma: 0.0,
                jumps: Vec::new(),
                auxiliary: true,
            });
        }

        let embedded = MapModel {
            q,
            kill_rate: 0.0,
            phases,
            transition_jumps: BTreeMap::new(),
        };
        let map = EmbeddingMap {
            n_original: n,
            original_indices: (0..n).collect(),
            aux,
        };
        (embedded, map)
    }
}

fn validate_law(law: &JumpLaw, field: &str, out: &mut Vec<Violation>) {
    if law.components.is_empty() {
        out.push(Violation {
            field: field.into(),
            message: "mixture must have at least one component".into(),
        });
        return;
    }
    let mut total = 0.0;
    for (m, c) in law.components.iter().enumerate() {
        if !(c.weight > 0.0 && c.weight.is_finite()) {
            out.push(Violation {
                field: format!("{field}[{m}].weight"),
                message: format!("must be finite and > 0, got {}", c.weight),
            });
        }
        if !(c.mu > 0.0 && c.mu.is_finite()) {
            out.push(Violation {
                field: format!("{field}[{m}].mu"),
                message: format!("must be finite and > 0, got {}", c.mu),
            });
        }
        total += c.weight;
    }
    if (total - 1.0).abs() > 1e-12 {
        out.push(Violation {
            field: field.into(),
            message: format!("mixture weights must sum to 1, got {total}"),
        });
    }
}
