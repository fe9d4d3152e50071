//! Spectral analysis of the matrix exponent of a jump-free model.
//!
//! For a jump-free (post-embedding) model every entry of `F(α)` is a
//! polynomial, so `det F(α)` is a polynomial of degree `N + #{i: σ_i>0}`
//! and its zeros carry the entire fluctuation theory:
//!
//! * zeros in the closed right half-plane (counted per the drift rules
//!   below) supply the eigenpairs of the first-passage generator `Λ`
//!   with `P[J(τ_x⁺)] = e^{Λx}`;
//! * the residues of `F(α)⁻¹` at all zeros give the scale matrix as an
//!   exponential sum (module `scale`).
//!
//! Roots are located by linearizing the quadratic pencil
//! `½diag(σ²)α² + diag(a)α + Q̃` into a companion eigenproblem, polished
//! by Newton steps on `log det F`, and paired into conjugates. For each
//! simple root `ρ` the right/left null vectors `h, v` of `F(ρ)` define
//! the residue `R = h vᵀ / (vᵀ F′(ρ) h)`.
//!
//! Root bookkeeping at the origin: an unkilled conservative model has
//! `det F(0) = 0`. The zero root joins the ascending (Λ) family when the
//! asymptotic drift `k′(0)` is non-negative (with `h = 𝟙`), and the
//! descending family when `k′(0) < 0`. When `k′(0) = 0` the zero root is
//! structurally double ("oscillating"); `F(α)⁻¹` then has a second-order
//! pole at 0 whose Laurent coefficients `B/α² + A/α` are recovered by a
//! small contour integral instead of a residue formula.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{C64, MapModel, ModelError};
use crate::tol;

/// A simple zero `ρ` of `det F(α)` together with its null vectors and
/// the residue of `F(α)⁻¹` at `ρ`.
#[derive(Debug, Clone)]
pub struct Root {
    /// Location of the root.
    pub rho: C64,
    /// Right null vector: `F(ρ)h = 0`, unit norm, first significant
    /// entry rotated positive-real (deterministic across runs).
    pub h: DVector<C64>,
    /// Left null vector: `vᵀF(ρ) = 0` (plain transpose, no conjugation),
    /// normalized like `h`.
    pub v: DVector<C64>,
    /// Residue of `F(α)⁻¹` at `ρ`: `h vᵀ / (vᵀ F′(ρ) h)`.
    pub residue: DMatrix<C64>,
}

/// Structure of `det F` at the origin.
#[derive(Debug, Clone)]
pub enum ZeroRoot {
    /// `det F(0) ≠ 0` (killing present or non-conservative rates).
    None,
    /// Simple zero root belonging to the ascending family
    /// (`q = 0`, conservative, `k′(0) > 0`); `h = 𝟙`.
    SimpleUp(Root),
    /// Simple zero root belonging to the descending family
    /// (`q = 0`, conservative, `k′(0) < 0`); still `h = 𝟙`.
    SimpleDown(Root),
    /// Structurally double zero root (`k′(0) = 0`, oscillating case).
    /// `F(α)⁻¹ = b/α² + a/α + O(1)` near 0; `a` and `b` are real.
    Double {
        /// First-order Laurent coefficient of `F(α)⁻¹` at 0.
        a: DMatrix<f64>,
        /// Second-order Laurent coefficient of `F(α)⁻¹` at 0.
        b: DMatrix<f64>,
    },
}

/// Errors from spectrum construction and evaluation.
#[derive(Debug, Error)]
pub enum SpectralError {
    /// Underlying model problem (validation or evaluation).
    #[error(transparent)]
    Model(#[from] ModelError),
    /// The model still carries jumps; embed it first.
    #[error("spectrum requires a jump-free model; apply the fluid embedding first")]
    NotJumpFree,
    /// Two roots collide, or a root's residue denominator vanishes —
    /// the Jordan structure this implies is unsupported.
    #[error("repeated or defective root near α = {rho} ({detail}); perturb the model parameters")]
    RepeatedRoot { rho: C64, detail: String },
    /// The half-plane root counts contradict the theory; indicates a
    /// failed eigensolve or an unsupported model.
    #[error("root count mismatch: {detail}")]
    CountMismatch { detail: String },
    /// A null vector could not be computed to tolerance.
    #[error("null vector at root α = {rho} failed to converge (residual {residual:.3e})")]
    NullVector { rho: C64, residual: f64 },
    /// A matrix that must be real came out with a large imaginary part.
    #[error("{what} has imaginary residue {imag:.3e}, above tolerance")]
    NotReal { what: String, imag: f64 },
    /// Operation needs a finite occupation limit, which the recurrent
    /// (unkilled, zero-drift) case does not have.
    #[error("operation undefined in the recurrent case (q = 0, k′(0) = 0): {what}; add a small killing rate")]
    Recurrent { what: String },
}

/// The full spectral data of a jump-free model: classified roots,
/// residues, the first-passage generator `Λ`, and the dominant rate `η`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    /// The (jump-free) model the spectrum belongs to.
    pub model: MapModel,
    /// Indices of the non-auxiliary phases.
    pub original: Vec<usize>,
    /// Simple roots with `Re ρ > 0`.
    pub right: Vec<Root>,
    /// Simple roots with `Re ρ < 0`.
    pub left: Vec<Root>,
    /// Root structure at the origin.
    pub zero: ZeroRoot,
    /// First-passage generator on the original phases:
    /// `P[J(τ_x⁺)] = e^{Λx}`.
    pub lambda: DMatrix<f64>,
    /// Largest real part among ascending roots: `W(x) = O(e^{ηx})`.
    pub eta: f64,
    /// Asymptotic drift `k′(0)` (only defined without killing).
    pub k_prime0: Option<f64>,
    /// Ascending eigenvalues `ρ` in the order of `h_asc` columns.
    rho_asc: Vec<C64>,
    /// Ascending `h`-vectors restricted to original coordinates
    /// (square, by the root-count invariant).
    h_asc: DMatrix<C64>,
    /// Inverse of `h_asc`.
    h_asc_inv: DMatrix<C64>,
}

impl Spectrum {
    /// Number of phases of the underlying (embedded) model.
    pub fn n(&self) -> usize {
        self.model.n()
    }

    /// Number of original (non-auxiliary) phases.
    pub fn n_original(&self) -> usize {
        self.original.len()
    }

    /// Whether the model is in the oscillating (recurrent) regime:
    /// no killing and zero asymptotic drift.
    pub fn oscillating(&self) -> bool {
        matches!(self.zero, ZeroRoot::Double { .. })
    }

    /// Simple roots of the ascending family: `Re ρ > 0` plus the zero
    /// root when `k′(0) > 0`. Their residues sum to the occupation
    /// limit 𝕃 (original block). Excludes the oscillating double zero,
    /// which has no simple residue.
    pub fn ascending(&self) -> Vec<&Root> {
        let mut v: Vec<&Root> = self.right.iter().collect();
        if let ZeroRoot::SimpleUp(r) = &self.zero {
            v.push(r);
        }
        v
    }

    /// Simple roots of the descending family: `Re ρ < 0` plus the zero
    /// root when `k′(0) < 0`.
    pub fn descending(&self) -> Vec<&Root> {
        let mut v: Vec<&Root> = self.left.iter().collect();
        if let ZeroRoot::SimpleDown(r) = &self.zero {
            v.push(r);
        }
        v
    }

    /// All simple roots (both families).
    pub fn all_simple(&self) -> Vec<&Root> {
        let mut v = self.ascending();
        v.extend(self.descending());
        v
    }

    /// Laurent coefficients `(a, b)` of `F(α)⁻¹ = b/α² + a/α + …` in the
    /// oscillating case, `None` otherwise.
    pub fn laurent(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        match &self.zero {
            ZeroRoot::Double { a, b } => Some((a, b)),
            _ => None,
        }
    }

    /// First-passage probabilities `P[J(τ_x⁺)] = e^{Λx}` on the original
    /// phases, evaluated in exact spectral form `H e^{−diag(ρ)x} H⁻¹`
    /// (no scaling-and-squaring error, stable for all `x ≥ 0`).
    pub fn first_passage_matrix(&self, x: f64) -> Result<DMatrix<f64>, SpectralError> {
        let n = self.n_original();
        let d = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                (-self.rho_asc[i] * C64::new(x, 0.0)).exp()
            } else {
                C64::new(0.0, 0.0)
            }
        });
        let m = &self.h_asc * d * &self.h_asc_inv;
        realify(&m, &format!("e^(Λ·{x})"))
    }
}

/// Take the real part of a matrix that must be real, failing loudly if
/// the imaginary residue exceeds [`tol::IMAG_DISCARD`] relative to the
/// matrix scale.
pub(crate) fn realify(m: &DMatrix<C64>, what: &str) -> Result<DMatrix<f64>, SpectralError> {
    let scale = m.iter().map(|z| z.norm()).fold(1.0f64, f64::max);
    let imag = m.iter().map(|z| z.im.abs()).fold(0.0f64, f64::max);
    if imag > tol::IMAG_DISCARD * scale {
        return Err(SpectralError::NotReal {
            what: what.to_string(),
            imag,
        });
    }
    Ok(m.map(|z| z.re))
}

/// Companion linearization of the pencil
/// `F(α)h = (½diag(σ²)α² + diag(a)α + Q̃)h = 0`.
///
/// With `g_i = α h_i` on rows where `σ_i > 0`, the pencil becomes the
/// standard eigenproblem `M (h, g)ᵀ = α (h, g)ᵀ` of size `N + #{σ>0}`;
/// rows with `σ_i = 0` have `a_i ≠ 0` (validation) and eliminate to
/// first order directly. All eigenvalues of `M` are exactly the zeros
/// of `det F` (the polynomial degrees match), so nothing is discarded.
fn pencil_matrix(model: &MapModel) -> DMatrix<f64> {
    let n = model.n();
    let diffusive: Vec<usize> = (0..n).filter(|&i| model.phases[i].sigma > 0.0).collect();
    let pos_of: Vec<Option<usize>> = {
        let mut v = vec![None; n];
        for (p, &i) in diffusive.iter().enumerate() {
            v[i] = Some(p);
        }
        v
    };
    let dim = n + diffusive.len();
    // Q̃ = Q − qI (row defects already encode per-row killing).
    let qt = {
        let mut m = model.q.clone();
        for i in 0..n {
            m[(i, i)] -= model.kill_rate;
        }
        m
    };
    let mut m = DMatrix::zeros(dim, dim);
    for i in 0..n {
        match pos_of[i] {
            Some(p) => {
                // α h_i = g_i
                m[(i, n + p)] = 1.0;
                // α g_i = −(2/σ²)(Q̃ h)_i − (2a/σ²) g_i
                let s2 = model.phases[i].sigma * model.phases[i].sigma;
                for j in 0..n {
                    m[(n + p, j)] = -2.0 * qt[(i, j)] / s2;
                }
                m[(n + p, n + p)] = -2.0 * model.phases[i].drift / s2;
            }
            None => {
                // α h_i = −(1/a_i)(Q̃ h)_i
                let a = model.phases[i].drift;
                for j in 0..n {
                    m[(i, j)] = -qt[(i, j)] / a;
                }
            }
        }
    }
    m
}

/// A few Newton steps on `log det F(α)` (derivative `tr(F⁻¹F′)`), which
/// converges quadratically to the nearby simple root and leaves the
/// iterate unchanged when `F` is numerically singular already.
fn polish_root(model: &MapModel, mut z: C64) -> C64 {
    for _ in 0..8 {
        let f = match model.matrix_exponent(z) {
            Ok(f) => f,
            Err(_) => return z,
        };
        let fp = match model.matrix_exponent_deriv(z) {
            Ok(fp) => fp,
            Err(_) => return z,
        };
        let lu = f.lu();
        let x = match lu.solve(&fp) {
            Some(x) => x,
            None => return z,
        };
        let tr = x.trace();
        if tr.norm() < 1e-300 {
            return z;
        }
        let step = C64::new(1.0, 0.0) / tr;
        z -= step;
        if step.norm() <= 1e-14 * (1.0 + z.norm()) {
            break;
        }
    }
    z
}

/// Right null vector of `f` by inverse iteration through an LU solve.
/// The start vector is a fixed, structureless ramp so results are
/// deterministic. Falls back to a tiny diagonal shift when `f` is
/// exactly singular to the LU.
fn null_vector(f: &DMatrix<C64>) -> Option<DVector<C64>> {
    let n = f.nrows();
    let start = DVector::from_fn(n, |k, _| C64::new(1.0 + 0.37 * k as f64, 0.21 - 0.11 * k as f64));
    let scale = f.iter().map(|z| z.norm()).fold(0.0f64, f64::max).max(1.0);
    for shift in [0.0, 1e-14, 1e-12] {
        let mut g = f.clone();
        for i in 0..n {
            g[(i, i)] += C64::new(shift * scale, shift * scale);
        }
        let lu = g.lu();
        let mut x = start.clone().unscale(start.norm());
        let mut ok = true;
        for _ in 0..4 {
            match lu.solve(&x) {
                Some(y) => x = y.unscale(y.norm()),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Some(normalize_phase(x));
        }
    }
    None
}

/// Fix the complex phase and sign: unit norm, first entry with
/// significant magnitude rotated to the positive real axis.
fn normalize_phase(mut x: DVector<C64>) -> DVector<C64> {
    let norm = x.norm();
    if norm > 0.0 {
        x = x.unscale(norm);
    }
    if let Some(k) = (0..x.len()).find(|&k| x[k].norm() > 1e-8) {
        let phase = x[k] / C64::new(x[k].norm(), 0.0);
        x = x.map(|z| z / phase);
    }
    x
}

/// Null-vector residual `‖F h‖ / scale(F)`.
fn null_residual(f: &DMatrix<C64>, h: &DVector<C64>) -> f64 {
    let scale = f.iter().map(|z| z.norm()).fold(1.0f64, f64::max);
    (f * h).norm() / scale
}

/// Build the [`Root`] record (null vectors + residue) for a simple root.
fn build_root(model: &MapModel, rho: C64) -> Result<Root, SpectralError> {
    let f = model.matrix_exponent(rho)?;
    let h = null_vector(&f).ok_or(SpectralError::NullVector {
        rho,
        residual: f64::INFINITY,
    })?;
    let v = null_vector(&f.transpose()).ok_or(SpectralError::NullVector {
        rho,
        residual: f64::INFINITY,
    })?;
    let res_h = null_residual(&f, &h);
    let res_v = null_residual(&f.transpose(), &v);
    let residual = res_h.max(res_v);
    if residual > tol::ROOT_RESIDUAL {
        return Err(SpectralError::NullVector { rho, residual });
    }
    finish_root(model, rho, h, v)
}

/// Attach the residue to known null vectors, guarding the denominator.
fn finish_root(
    model: &MapModel,
    rho: C64,
    h: DVector<C64>,
    v: DVector<C64>,
) -> Result<Root, SpectralError> {
    let fp = model.matrix_exponent_deriv(rho)?;
    let denom = (v.transpose() * &fp * &h)[(0, 0)];
    let fp_scale = fp.iter().map(|z| z.norm()).fold(1.0f64, f64::max);
    if denom.norm() <= tol::RESIDUE_DENOMINATOR * fp_scale {
        return Err(SpectralError::RepeatedRoot {
            rho,
            detail: format!("residue denominator vᵀF′(ρ)h = {denom:.3e} vanishes"),
        });
    }
    let residue = (&h * v.transpose()).map(|z| z / denom);
    Ok(Root { rho, h, v, residue })
}

/// Laurent coefficients `(a, b)` of `F(α)⁻¹ = b/α² + a/α + O(1)` at the
/// structurally double zero root, via trapezoid contour quadrature on a
/// circle separating 0 from every other root. The integrand is analytic
/// in an annulus, so the trapezoid rule converges geometrically;
/// [`tol::CONTOUR_POINTS`] nodes put the error far below 1e-12.
fn laurent_coefficients(
    model: &MapModel,
    nonzero: &[C64],
) -> Result<(DMatrix<f64>, DMatrix<f64>), SpectralError> {
    let nearest = nonzero
        .iter()
        .map(|z| z.norm())
        .fold(f64::INFINITY, f64::min);
    let radius = if nearest.is_finite() {
        0.5 * nearest
    } else {
        0.5
    };
    let n = model.n();
    let m = tol::CONTOUR_POINTS;
    let mut a = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
    let mut b = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
    for k in 0..m {
        let theta = 2.0 * std::f64::consts::PI * (k as f64) / (m as f64);
        let z = C64::new(radius * theta.cos(), radius * theta.sin());
        let f = model.matrix_exponent(z)?;
        let inv = f
            .lu()
            .try_inverse()
            .ok_or_else(|| SpectralError::CountMismatch {
                detail: format!("F(z) singular on the Laurent contour at z = {z}"),
            })?;
        // (1/2πi)∮ g(z)dz = (1/m)Σ g(z_k)·z_k on the circle.
        a += inv.map(|w| w * z);
        b += inv.map(|w| w * z * z);
    }
    let a = a.map(|w| w / C64::new(m as f64, 0.0));
    let b = b.map(|w| w / C64::new(m as f64, 0.0));
    Ok((
        realify(&a, "Laurent coefficient a")?,
        realify(&b, "Laurent coefficient b")?,
    ))
}

/// Compute the full spectrum of a jump-free model: all pencil roots,
/// polished and conjugate-paired, classified into ascending/descending
/// families, with residues, `Λ`, and `η`.
///
/// # Errors
///
/// * [`SpectralError::NotJumpFree`] if the model carries jumps;
/// * [`SpectralError::RepeatedRoot`] when two roots are closer than
///   [`tol::ROOT_SEPARATION`] or a residue denominator vanishes;
/// * [`SpectralError::CountMismatch`] when the half-plane counts
///   disagree with the phase-direction counts required by the theory.
///
/// # Examples
///
/// ```
/// use mapexit::{MapModel, spectral::solve_spectrum};
///
/// // Driftless killed Brownian phase: F(α) = α² − 1, roots ±1, Λ = [−1].
/// let m = MapModel::from_json_str(r#"{
///     "states": 1, "Q": [[0.0]], "kill_rate": 1.0,
///     "phases": [{"drift": 0.0, "sigma": 1.4142135623730951}]
/// }"#).unwrap();
/// let s = solve_spectrum(&m).unwrap();
/// assert!((s.lambda[(0, 0)] + 1.0).abs() < 1e-9);
/// assert!((s.eta - 1.0).abs() < 1e-9);
/// ```
pub fn solve_spectrum(model: &MapModel) -> Result<Spectrum, SpectralError> {
    let violations = model.validate();
    if !violations.is_empty() {
        return Err(ModelError::Invalid(violations).into());
    }
    if !model.is_jump_free() {
        return Err(SpectralError::NotJumpFree);
    }
    let n = model.n();
    let original = model.original_set();

    // 1. All pencil roots, polished.
    let pencil = pencil_matrix(model);
    let eigs = pencil.complex_eigenvalues();
    let mut raw: Vec<C64> = eigs.iter().map(|&z| polish_root(model, z)).collect();
    // Discard numerically tiny imaginary parts so real roots are real.
    for z in raw.iter_mut() {
        if z.im.abs() <= tol::IMAG_DISCARD * (1.0 + z.norm()) {
            z.im = 0.0;
        }
    }

    // 2. Zero-root bookkeeping.
    let conservative = model.is_conservative();
    let k_prime0 = if conservative {
        Some(model.asymptotic_drift()?)
    } else {
        None
    };
    let expected_zeros = match k_prime0 {
        Some(k) if k.abs() <= tol::DRIFT_ZERO => 2,
        Some(_) => 1,
        None => 0,
    };
    let (zeros, mut nonzero): (Vec<C64>, Vec<C64>) = raw
        .drain(..)
        .partition(|z| z.norm() <= tol::ZERO_ROOT_SNAP);
    if zeros.len() != expected_zeros {
        return Err(SpectralError::CountMismatch {
            detail: format!(
                "found {} roots within {:.0e} of the origin, theory requires {} \
                 (killing {}, conservative {}, k′(0) {:?})",
                zeros.len(),
                tol::ZERO_ROOT_SNAP,
                expected_zeros,
                model.kill_rate,
                conservative,
                k_prime0
            ),
        });
    }

    // 3. Conjugate pairing: canonicalize each complex root from its
    // upper-half representative so the set is exactly conjugate-closed.
    nonzero.sort_by(|x, y| {
        (x.re, x.im)
            .partial_cmp(&(y.re, y.im))
            .expect("roots are finite")
    });
    let mut canonical: Vec<C64> = Vec::with_capacity(nonzero.len());
    {
        let mut uppers: Vec<C64> = Vec::new();
        let mut lowers: Vec<C64> = Vec::new();
        for z in &nonzero {
            if z.im == 0.0 {
                canonical.push(*z);
            } else if z.im > 0.0 {
                uppers.push(*z);
            } else {
                lowers.push(*z);
            }
        }
        if uppers.len() != lowers.len() {
            return Err(SpectralError::CountMismatch {
                detail: format!(
                    "complex roots not conjugate-paired ({} upper vs {} lower)",
                    uppers.len(),
                    lowers.len()
                ),
            });
        }
        for u in uppers {
            // Consume the nearest lower-half partner; tolerate polish noise.
            let (idx, dist) = lowers
                .iter()
                .enumerate()
                .map(|(i, l)| (i, (l - u.conj()).norm()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
                .expect("non-empty by the count check");
            if dist > 1e-6 * (1.0 + u.norm()) {
                return Err(SpectralError::CountMismatch {
                    detail: format!("no conjugate partner for root {u} (nearest at distance {dist:.3e})"),
                });
            }
            lowers.swap_remove(idx);
            canonical.push(u);
            canonical.push(u.conj());
        }
    }

    // 4. Separation check (Jordan structure unsupported).
    for i in 0..canonical.len() {
        for j in (i + 1)..canonical.len() {
            let d = (canonical[i] - canonical[j]).norm();
            if d < tol::ROOT_SEPARATION * (1.0 + canonical[i].norm()) {
                return Err(SpectralError::RepeatedRoot {
                    rho: canonical[i],
                    detail: format!("second root at distance {d:.3e}"),
                });
            }
        }
        if canonical[i].re.abs() <= tol::IMAG_DISCARD && canonical[i].im != 0.0 {
            return Err(SpectralError::CountMismatch {
                detail: format!("root {} on the imaginary axis", canonical[i]),
            });
        }
    }

    // 5. Null vectors and residues. Conjugate roots get conjugated data
    // (cheaper and exactly symmetric).
    let mut right: Vec<Root> = Vec::new();
    let mut left: Vec<Root> = Vec::new();
    let mut i = 0;
    while i < canonical.len() {
        let rho = canonical[i];
        let root = build_root(model, rho)?;
        let mut push = |r: Root| {
            if r.rho.re > 0.0 {
                right.push(r);
            } else {
                left.push(r);
            }
        };
        if rho.im != 0.0 {
            let conj = Root {
                rho: rho.conj(),
                h: root.h.map(|z| z.conj()),
                v: root.v.map(|z| z.conj()),
                residue: root.residue.map(|z| z.conj()),
            };
            push(root);
            push(conj);
            i += 2;
        } else {
            push(root);
            i += 1;
        }
    }

    // 6. Zero-root record. `h = 𝟙` always (conservative rows sum to 0);
    // the left null vector is the stationary distribution of Q.
    let zero = match expected_zeros {
        0 => ZeroRoot::None,
        1 => {
            let h = normalize_phase(DVector::from_element(n, C64::new(1.0, 0.0)));
            let pi = model.stationary()?;
            let v = normalize_phase(DVector::from_fn(n, |k, _| C64::new(pi[k], 0.0)));
            let root = finish_root(model, C64::new(0.0, 0.0), h, v)?;
            if k_prime0.expect("conservative by construction") > 0.0 {
                ZeroRoot::SimpleUp(root)
            } else {
                ZeroRoot::SimpleDown(root)
            }
        }
        _ => {
            let (a, b) = laurent_coefficients(model, &canonical)?;
            ZeroRoot::Double { a, b }
        }
    };

    // 7. Half-plane count checks against phase-direction counts.
    let n_inc = (0..n)
        .filter(|&i| model.phases[i].sigma > 0.0 || model.phases[i].drift > 0.0)
        .count();
    let n_dec = (0..n)
        .filter(|&i| model.phases[i].sigma > 0.0 || model.phases[i].drift < 0.0)
        .count();
    let asc_count = right.len() + matches!(zero, ZeroRoot::SimpleUp(_) | ZeroRoot::Double { .. }) as usize;
    let desc_count = left.len()
        + matches!(zero, ZeroRoot::SimpleDown(_) | ZeroRoot::Double { .. }) as usize;
    if asc_count != n_inc || desc_count != n_dec {
        return Err(SpectralError::CountMismatch {
            detail: format!(
                "ascending {asc_count} vs {n_inc} increasing phases; \
                 descending {desc_count} vs {n_dec} decreasing phases"
            ),
        });
    }

    // 8. Λ from the ascending family restricted to original phases.
    let mut rho_asc: Vec<C64> = Vec::with_capacity(asc_count);
    let mut h_cols: Vec<DVector<C64>> = Vec::with_capacity(asc_count);
    for r in &right {
        rho_asc.push(r.rho);
        h_cols.push(DVector::from_fn(original.len(), |k, _| r.h[original[k]]));
    }
    match &zero {
        ZeroRoot::SimpleUp(_) | ZeroRoot::Double { .. } => {
            rho_asc.push(C64::new(0.0, 0.0));
            h_cols.push(DVector::from_element(original.len(), C64::new(1.0, 0.0)));
        }
        _ => {}
    }
    if rho_asc.len() != original.len() {
        return Err(SpectralError::CountMismatch {
            detail: format!(
                "{} ascending roots for {} original phases",
                rho_asc.len(),
                original.len()
            ),
        });
    }
    let h_asc = DMatrix::from_columns(&h_cols);
    let h_asc_inv = h_asc
        .clone()
        .try_inverse()
        .ok_or_else(|| SpectralError::CountMismatch {
            detail: "ascending h-vectors are linearly dependent on the original phases".into(),
        })?;
    let d = DMatrix::from_fn(rho_asc.len(), rho_asc.len(), |i, j| {
        if i == j {
            -rho_asc[i]
        } else {
            C64::new(0.0, 0.0)
        }
    });
    let lambda = realify(&(&h_asc * d * &h_asc_inv), "Λ")?;
    let eta = rho_asc.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);

    Ok(Spectrum {
        model: model.clone(),
        original,
        right,
        left,
        zero,
        lambda,
        eta,
        k_prime0,
        rho_asc,
        h_asc,
        h_asc_inv,
    })
}
