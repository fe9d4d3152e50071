//! Scale matrices `W`, `Z` and occupation densities.
//!
//! For a spectrally negative model the two-sided exit theory is carried
//! by a matrix-valued *scale function* `W(x)` on the original phases,
//! defined through its transform `∫₀^∞ e^{−αx} W(x) dx = F(α)⁻¹` (for
//! `α` beyond the rightmost singularity `η`), and its companion
//! `Z(α, x) = e^{αx}(I − ∫₀ˣ e^{−αy} W(y) dy · F(α))`.
//!
//! After the fluid embedding every entry of `F_emb(α)⁻¹` is a rational
//! function with simple poles at the spectrum of the pencil, so `W` is a
//! finite exponential sum
//!
//! ```text
//! W(x) = Σ_k R_k e^{ρ_k x}   (+ A + Bx in the recurrent case),
//! ```
//!
//! with `R_k` the (original-block) residues computed by the spectral
//! layer and `A, B` the Laurent coefficients of the double zero root.
//! Everything this module evaluates — `W`, `W′`, partial transforms,
//! `Z`, occupation densities `𝕃(x)`, hitting probabilities — reduces to
//! stable combinations of that sum. Two rearrangements matter for
//! numerics and are used throughout:
//!
//! * ascending residues are eigen-directions of the first-passage
//!   generator, `e^{Λx} R_k = e^{−ρ_k x} R_k`, so products like
//!   `e^{Λx} W(x)` collapse analytically instead of multiplying huge
//!   against tiny factors;
//! * `Z` switches from the direct form to the tail expansion
//!   `Z(α,x) = [Σ_k R_k e^{ρ_k x}/(α−ρ_k) + …]·F(α)` once `(α−η)x` is
//!   large, which evaluates the growing solution without cancellation.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::model::{C64, MapModel, ModelError};
use crate::spectral::{realify, solve_spectrum, SpectralError, Spectrum};
use crate::tol;

/// Errors from scale-matrix evaluation.
#[derive(Debug, Error)]
pub enum ScaleError {
    /// Underlying model problem.
    #[error(transparent)]
    Model(#[from] ModelError),
    /// Underlying spectral problem.
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    /// An argument is outside the domain of the identity.
    #[error("domain error: {what}")]
    Domain { what: String },
    /// The quantity has no finite value in the recurrent case
    /// (no killing, zero asymptotic drift).
    #[error("{what} is undefined in the recurrent case (q = 0, k′(0) = 0); add a small killing rate")]
    Recurrent { what: String },
    /// A matrix that the theory guarantees invertible failed to invert.
    #[error("singular matrix: {what}")]
    Singular { what: String },
}

/// Evaluator for every scale-type quantity of one model.
///
/// Construction embeds the model's jumps as auxiliary fluid phases,
/// solves the spectrum of the embedded pencil once, restricts all
/// residues to the original coordinates, and caches the occupation
/// limit `𝕃 = Σ_{ascending} R_k` together with its inverse. All
/// evaluation methods are then closed-form in the cached data.
///
/// # Examples
///
/// ```
/// use mapexit::{MapModel, scale::ScaleEvaluator};
///
/// // Killed driftless Brownian phase: W(x) = sinh(x).
/// let m = MapModel::from_json_str(r#"{
///     "states": 1, "Q": [[0.0]], "kill_rate": 1.0,
///     "phases": [{"drift": 0.0, "sigma": 1.4142135623730951}]
/// }"#).unwrap();
/// let sc = ScaleEvaluator::new(&m).unwrap();
/// let w = sc.scale_w(2.0).unwrap();
/// assert!((w[(0, 0)] - 2.0f64.sinh()).abs() < 1e-12);
/// ```
#[derive(Debug, Clone)]
pub struct ScaleEvaluator {
    /// The user's model (with its jumps), used for `F(α)` evaluations.
    original: MapModel,
    /// Spectrum of the embedded, jump-free model.
    spectrum: Spectrum,
    /// Ascending roots with original-block residues (zero root included
    /// when it ascends).
    asc: Vec<(C64, DMatrix<C64>)>,
    /// Descending roots with original-block residues (zero root included
    /// when it descends).
    desc: Vec<(C64, DMatrix<C64>)>,
    /// Original blocks of the Laurent coefficients `(A, B)` at the
    /// double zero root (recurrent case only).
    laurent_o: Option<(DMatrix<f64>, DMatrix<f64>)>,
    /// `Σ_{ascending} R_k` (equals `𝕃` outside the recurrent case).
    asc_sum: DMatrix<f64>,
    /// Occupation limit `𝕃` and its inverse (absent in the recurrent
    /// case, where the occupation density diverges).
    ell: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl ScaleEvaluator {
    /// Embed, solve the spectrum, and cache residue data.
    ///
    /// # Errors
    ///
    /// Model validation failures, spectral failures (repeated roots,
    /// count mismatches), or a singular occupation limit.
    pub fn new(model: &MapModel) -> Result<Self, ScaleError> {
        let violations = model.validate();
        if !violations.is_empty() {
            return Err(ModelError::Invalid(violations).into());
        }
        let (embedded, _map) = model.embed_fluid();
        let spectrum = solve_spectrum(&embedded)?;
        let o = spectrum.original.clone();
        let no = o.len();
        let restrict = |m: &DMatrix<C64>| DMatrix::from_fn(no, no, |r, c| m[(o[r], o[c])]);

        let mut asc: Vec<(C64, DMatrix<C64>)> = Vec::new();
        let mut desc: Vec<(C64, DMatrix<C64>)> = Vec::new();
        for r in spectrum.ascending() {
            asc.push((r.rho, restrict(&r.residue)));
        }
        for r in spectrum.descending() {
            desc.push((r.rho, restrict(&r.residue)));
        }
        let laurent_o = spectrum.laurent().map(|(a, b)| {
            (
                DMatrix::from_fn(no, no, |r, c| a[(o[r], o[c])]),
                DMatrix::from_fn(no, no, |r, c| b[(o[r], o[c])]),
            )
        });

        let mut asc_c = DMatrix::from_element(no, no, C64::new(0.0, 0.0));
        for (_, r) in &asc {
            asc_c += r;
        }
        let asc_sum = realify(&asc_c, "Σ ascending residues")?;
        let ell = if spectrum.oscillating() {
            None
        } else {
            let inv = asc_sum
                .clone()
                .try_inverse()
                .ok_or_else(|| ScaleError::Singular {
                    what: "occupation limit 𝕃".into(),
                })?;
            Some((asc_sum.clone(), inv))
        };

        Ok(ScaleEvaluator {
            original: model.clone(),
            spectrum,
            asc,
            desc,
            laurent_o,
            asc_sum,
            ell,
        })
    }

    /// The model the evaluator was built from.
    pub fn original(&self) -> &MapModel {
        &self.original
    }

    /// Spectrum of the embedded model.
    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    /// Number of original phases (the dimension of all returned matrices).
    pub fn n(&self) -> usize {
        self.asc_sum.nrows()
    }

    /// Whether the model sits in the recurrent (oscillating) regime.
    pub fn oscillating(&self) -> bool {
        self.spectrum.oscillating()
    }

    /// First-passage generator `Λ`.
    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.spectrum.lambda
    }

    /// Rightmost spectral point `η` (growth rate of `W`).
    pub fn eta(&self) -> f64 {
        self.spectrum.eta
    }

    /// First-passage probabilities `e^{Λx}` in exact spectral form.
    pub fn exp_lambda(&self, x: f64) -> Result<DMatrix<f64>, ScaleError> {
        check_nonneg(x, "x")?;
        Ok(self.spectrum.first_passage_matrix(x)?)
    }

    /// Occupation limit `𝕃 = lim_{x→∞} 𝕃(x)`.
    ///
    /// # Errors
    ///
    /// [`ScaleError::Recurrent`] when the limit diverges.
    pub fn ell(&self) -> Result<&DMatrix<f64>, ScaleError> {
        self.ell
            .as_ref()
            .map(|(l, _)| l)
            .ok_or_else(|| ScaleError::Recurrent {
                what: "the occupation limit 𝕃".into(),
            })
    }

    /// Inverse of the occupation limit.
    pub fn ell_inv(&self) -> Result<&DMatrix<f64>, ScaleError> {
        self.ell
            .as_ref()
            .map(|(_, i)| i)
            .ok_or_else(|| ScaleError::Recurrent {
                what: "the occupation limit 𝕃".into(),
            })
    }

    /// Decaying part of the scale sum: `Σ_{descending} R_k e^{ρ_k x}`.
    /// Bounded for all `x ≥ 0` (descending roots have `Re ρ ≤ 0`).
    fn k_raw(&self, x: f64) -> Result<DMatrix<f64>, ScaleError> {
        let no = self.n();
        let mut s = DMatrix::from_element(no, no, C64::new(0.0, 0.0));
        for (rho, r) in &self.desc {
            let g = (rho * C64::new(x, 0.0)).exp();
            s += r.map(|z| z * g);
        }
        Ok(realify(&s, "descending scale part")?)
    }

    /// The factor `K(x) = [Σ_{descending} R_k e^{ρ_k x}]·𝕃⁻¹` appearing
    /// in the stable forms of the exit identities. `W(x) = [e^{−Λx} +
    /// K(x)]·𝕃` and `P[hit −x] = −K(x)`.
    pub(crate) fn k_factor(&self, x: f64) -> Result<DMatrix<f64>, ScaleError> {
        check_nonneg(x, "x")?;
        let (_, ell_inv) = self.ell.as_ref().ok_or_else(|| ScaleError::Recurrent {
            what: "the K-factor (it divides by 𝕃)".into(),
        })?;
        Ok(self.k_raw(x)? * ell_inv)
    }

    /// Scale matrix `W(x)` on the original phases.
    ///
    /// `W(0)` is diagonal with `1/a_i` on bounded-variation phases
    /// (`σ_i = 0`) and `0` elsewhere; `W` grows like `e^{ηx}`.
    pub fn scale_w(&self, x: f64) -> Result<DMatrix<f64>, ScaleError> {
        check_nonneg(x, "x")?;
        let no = self.n();
        let mut s = DMatrix::from_element(no, no, C64::new(0.0, 0.0));
        for (rho, r) in self.asc.iter().chain(self.desc.iter()) {
            let g = (rho * C64::new(x, 0.0)).exp();
            s += r.map(|z| z * g);
        }
        let mut w = realify(&s, "W")?;
        if let Some((a, b)) = &self.laurent_o {
            w += a + b * x;
        }
        Ok(w)
    }

    /// Derivative `W′(x)` (two-sided for `x > 0`; at `0` the right
    /// derivative). On Brownian phases `W′(0)_{ii} = 2/σ_i²`.
    pub fn scale_w_deriv(&self, x: f64) -> Result<DMatrix<f64>, ScaleError> {
        check_nonneg(x, "x")?;
        let no = self.n();
        let mut s = DMatrix::from_element(no, no, C64::new(0.0, 0.0));
        for (rho, r) in self.asc.iter().chain(self.desc.iter()) {
            let g = rho * (rho * C64::new(x, 0.0)).exp();
            s += r.map(|z| z * g);
        }
        let mut w = realify(&s, "W′")?;
        if let Some((_, b)) = &self.laurent_o {
            w += b;
        }
        Ok(w)
    }

    /// Partial transform `∫₀ˣ e^{−αy} W(y) dy`, branch-stable near
    /// `α = ρ_k` (see [`tol::INT_EXP_W_LIMIT`], [`tol::INT_EXP_W_TAYLOR`]).
    pub fn int_exp_w(&self, alpha: f64, x: f64) -> Result<DMatrix<f64>, ScaleError> {
        check_nonneg(x, "x")?;
        check_finite(alpha, "alpha")?;
        let no = self.n();
        let a = C64::new(alpha, 0.0);
        let mut s = DMatrix::from_element(no, no, C64::new(0.0, 0.0));
        for (rho, r) in self.asc.iter().chain(self.desc.iter()) {
            let z = rho - a;
            let zn = z.norm();
            let factor = if zn < tol::INT_EXP_W_LIMIT {
                C64::new(x, 0.0)
            } else if zn < tol::INT_EXP_W_TAYLOR {
                C64::new(x, 0.0) + z * C64::new(0.5 * x * x, 0.0)
            } else {
                ((z * C64::new(x, 0.0)).exp() - C64::new(1.0, 0.0)) / z
            };
            s += r.map(|v| v * factor);
        }
        let mut m = realify(&s, "∫e^{−αy}W(y)dy")?;
        if let Some((am, bm)) = &self.laurent_o {
            let (psi0, psi1) = psi_integrals(alpha, x);
            m += am * psi0 + bm * psi1;
        }
        Ok(m)
    }

    /// Second scale matrix `Z(α, x)` for real `α ≥ 0`.
    ///
    /// For `(α − η)x ≤` [`tol::Z_TAIL_EXPONENT`] the defining form
    /// `e^{αx}(I − ∫₀ˣe^{−αy}W(y)dy·F(α))` is used directly (it needs no
    /// inversion, so `α` at a zero of `det F` is fine). Beyond that the
    /// tail expansion takes over; terms whose root lies within
    /// [`tol::Z_NEAR_ROOT`] of `α` are evaluated by the removable-
    /// singularity series. `Z(α, 0) = I` in every branch.
    pub fn z_matrix(&self, alpha: f64, x: f64) -> Result<DMatrix<f64>, ScaleError> {
        check_nonneg(x, "x")?;
        check_finite(alpha, "alpha")?;
        if alpha < 0.0 {
            return Err(ScaleError::Domain {
                what: format!("Z(α, x) requires α ≥ 0, got {alpha}"),
            });
        }
        let no = self.n();
        if x == 0.0 {
            return Ok(DMatrix::identity(no, no));
        }
        if (alpha - self.eta()) * x <= tol::Z_TAIL_EXPONENT {
            let f = self.original.matrix_exponent_real(alpha)?;
            let iw = self.int_exp_w(alpha, x)?;
            let scale = (alpha * x).exp();
            return Ok((DMatrix::identity(no, no) - iw * f) * scale);
        }
        // Tail branch: α > η strictly, F(α) invertible, and the sum
        // Σ R_k e^{ρ_k x}/(α−ρ_k) (+ Laurent tail) equals
        // e^{αx}∫ₓ^∞ e^{−αy}W(y)dy — every term non-negative in growth,
        // nothing cancels.
        let a = C64::new(alpha, 0.0);
        let fo = self
            .original
            .matrix_exponent(a)
            .map_err(ScaleError::from)?;
        let mut far = DMatrix::from_element(no, no, C64::new(0.0, 0.0));
        let mut near = DMatrix::from_element(no, no, C64::new(0.0, 0.0));
        for (rho, r) in self.asc.iter().chain(self.desc.iter()) {
            let dz = a - rho;
            let grow = (rho * C64::new(x, 0.0)).exp();
            if dz.norm() <= tol::Z_NEAR_ROOT {
                let f1 = self.original.matrix_exponent_deriv(*rho)?;
                let f2 = self.original.matrix_exponent_deriv2(*rho)?;
                let series = r * (f1 + f2.map(|v| v * dz * C64::new(0.5, 0.0)));
                near += series.map(|v| v * grow);
            } else {
                far += r.map(|v| v * grow / dz);
            }
        }
        if let Some((am, bm)) = &self.laurent_o {
            // e^{αx}∫ₓ^∞ e^{−αy}(A + By)dy = A/α + B(1 + αx)/α².
            let c0 = C64::new(1.0 / alpha, 0.0);
            let c1 = C64::new((1.0 + alpha * x) / (alpha * alpha), 0.0);
            far += am.map(|v| C64::new(v, 0.0) * c0) + bm.map(|v| C64::new(v, 0.0) * c1);
        }
        let z = far * fo + near;
        Ok(realify(&z, "Z")?)
    }

    /// Occupation density at level 0 before first passage above `x`
    /// (`Some(x)`), or its `x → ∞` limit `𝕃` (`None`).
    ///
    /// Evaluated in the cancellation-free form
    /// `𝕃(x) = Σ_asc R_k + e^{Λx}[Σ_desc R_k e^{ρ_k x} + A + Bx]`,
    /// which is the analytic collapse of `e^{Λx} W(x)`.
    pub fn occupation_matrix(&self, x: Option<f64>) -> Result<DMatrix<f64>, ScaleError> {
        match x {
            None => Ok(self.ell()?.clone()),
            Some(x) => {
                check_nonneg(x, "x")?;
                let mut tail = self.k_raw(x)?;
                if let Some((a, b)) = &self.laurent_o {
                    tail += a + b * x;
                }
                Ok(&self.asc_sum + self.exp_lambda(x)? * tail)
            }
        }
    }

    /// Probability of hitting level `−x` (in each phase) before the
    /// killing clock, for models whose paths can only creep downward —
    /// i.e. jump-free models. Returns `−K(x)`; rows of descending
    /// residues make every entry a genuine probability.
    ///
    /// # Errors
    ///
    /// `Domain` for models with jumps (they overshoot levels) or for
    /// `x ≤ 0`; `Recurrent` when hitting is certain in the limit sense
    /// (no killing, zero drift) and the identity degenerates.
    pub fn hitting_below(&self, x: f64) -> Result<DMatrix<f64>, ScaleError> {
        if !self.original.is_jump_free() {
            return Err(ScaleError::Domain {
                what: "hitting probabilities need a jump-free model (jumps overshoot the level)"
                    .into(),
            });
        }
        if x.is_nan() || x <= 0.0 {
            return Err(ScaleError::Domain {
                what: format!("hitting level must satisfy x > 0, got {x}"),
            });
        }
        Ok(-self.k_factor(x)?)
    }

    /// Max-norm residual of the resolvent identity
    /// `F(α)⁻¹ = (αI + Λ)⁻¹𝕃 + Σ_{descending} R_k/(α − ρ_k)`
    /// at a real `α ≥ 0` with `k(α) < 0` (so `F(α)` is invertible).
    /// A correct spectrum drives this to rounding level.
    pub fn transform_identity_residual(&self, alpha: f64) -> Result<f64, ScaleError> {
        check_finite(alpha, "alpha")?;
        if alpha < 0.0 {
            return Err(ScaleError::Domain {
                what: format!("the resolvent identity needs α ≥ 0, got {alpha}"),
            });
        }
        let perron = self.original.perron_root(alpha)?;
        if perron >= 0.0 {
            return Err(ScaleError::Domain {
                what: format!(
                    "the resolvent identity needs k(α) < 0 (F(α) invertible); k({alpha}) = {perron}"
                ),
            });
        }
        let no = self.n();
        let f_inv = self
            .original
            .matrix_exponent_real(alpha)?
            .lu()
            .try_inverse()
            .ok_or_else(|| ScaleError::Singular {
                what: format!("F({alpha}) with negative Perron root"),
            })?;
        let (ell, _) = self.ell.as_ref().ok_or_else(|| ScaleError::Recurrent {
            what: "the resolvent identity (it contains 𝕃)".into(),
        })?;
        let shifted = self.spectrum.lambda.clone() + DMatrix::identity(no, no) * alpha;
        let first = shifted
            .lu()
            .solve(ell)
            .ok_or_else(|| ScaleError::Singular {
                what: format!("αI + Λ at α = {alpha}"),
            })?;
        let a = C64::new(alpha, 0.0);
        let mut down = DMatrix::from_element(no, no, C64::new(0.0, 0.0));
        for (rho, r) in &self.desc {
            down += r.map(|v| v / (a - rho));
        }
        let down = realify(&down, "descending resolvent part")?;
        let resid = f_inv - first - down;
        Ok(resid.amax())
    }
}

/// `(ψ₀, ψ₁) = (∫₀ˣ e^{−αy} dy, ∫₀ˣ y e^{−αy} dy)` with series fallback
/// for small `|αx|` (see [`tol::PSI_SERIES`]).
fn psi_integrals(alpha: f64, x: f64) -> (f64, f64) {
    let u = alpha * x;
    if u.abs() < tol::PSI_SERIES {
        let psi0 = x * (1.0 - u / 2.0 + u * u / 6.0);
        let psi1 = x * x * (0.5 - u / 3.0 + u * u / 8.0);
        (psi0, psi1)
    } else {
        let e = (-u).exp();
        let psi0 = (1.0 - e) / alpha;
        let psi1 = (1.0 - e * (1.0 + u)) / (alpha * alpha);
        (psi0, psi1)
    }
}

fn check_nonneg(x: f64, name: &str) -> Result<(), ScaleError> {
    if x.is_finite() && x >= 0.0 {
        Ok(())
    } else {
        Err(ScaleError::Domain {
            what: format!("{name} must be finite and ≥ 0, got {x}"),
        })
    }
}

fn check_finite(x: f64, name: &str) -> Result<(), ScaleError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(ScaleError::Domain {
            what: format!("{name} must be finite, got {x}"),
        })
    }
}
