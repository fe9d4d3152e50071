//! Centralized numerical tolerances and algorithm constants.
//!
//! Every threshold used by the solvers and the verification harness is
//! defined here with its rationale, so there are no ad-hoc magic numbers
//! scattered through the numerics. Three broad categories appear:
//!
//! | Category            | Basis                                   |
//! |---------------------|-----------------------------------------|
//! | Machine precision   | IEEE 754 f64 plus modest accumulation   |
//! | Method accuracy     | Truncation order of a specific formula  |
//! | Statistical         | Monte Carlo standard-error multiples    |

/// Relative residual allowed for a computed spectral root: a root `ρ` with
/// right null vector `h` (‖h‖ = 1) must satisfy ‖F(ρ)h‖ ≤ `ROOT_RESIDUAL`
/// · ‖F(ρ)‖. Roots are Newton-polished after the eigensolve, so the
/// achievable residual is near machine precision; 1e-9 leaves headroom for
/// ill-scaled models.
pub const ROOT_RESIDUAL: f64 = 1e-9;

/// Minimum separation between distinct spectral roots. Two roots closer
/// than this (other than the structural double zero of the unkilled
/// zero-drift case, which is handled by Laurent coefficients) indicate a
/// Jordan block, which the residue expansion cannot represent.
pub const ROOT_SEPARATION: f64 = 1e-7;

/// Floor on the residue denominator |vᵀF′(ρ)h|. A simple root has a
/// nonzero denominator; values at or below this floor indicate a defective
/// (repeated) eigenvalue and are rejected.
pub const RESIDUE_DENOMINATOR: f64 = 1e-10;

/// Guard distance from the poles of the matrix exponent. Hyperexponential
/// jump transforms have simple poles at `α = −μ`; evaluations within this
/// distance are refused rather than returned with catastrophic error.
pub const POLE_PROXIMITY: f64 = 1e-10;

/// Imaginary parts at or below this bound are treated as rounding noise
/// when a quantity is real by theory (the first-passage generator, scale
/// matrices, Perron roots) and are discarded after being checked.
pub const IMAG_DISCARD: f64 = 1e-9;

/// Below this |ρ_k − α| the integrand term `(e^{(ρ_k−α)x} − 1)/(ρ_k − α)`
/// is replaced by its exact limit `x`.
pub const INT_EXP_W_LIMIT: f64 = 1e-9;

/// Within [`INT_EXP_W_LIMIT`, `INT_EXP_W_TAYLOR`) the same term uses the
/// first-order Taylor form `x + (ρ_k − α)x²/2`; beyond it the closed form
/// is accurate (relative error ≤ ~2e-16/|ρ_k−α| ≤ 2e-10 at the boundary).
pub const INT_EXP_W_TAYLOR: f64 = 1e-6;

/// Switch point for `Z(α, x)`: while `(α − η)x` stays below this the
/// direct form `e^{αx}(I − ∫₀ˣe^{−αy}W(y)dy·F(α))` loses at most
/// ~10/ln 10 ≈ 4.3 digits to cancellation; beyond it the evaluator
/// switches to the tail (partial-fraction) form, which subtracts nothing.
pub const Z_TAIL_EXPONENT: f64 = 10.0;

/// In the tail form of `Z(α, x)`, roots with `|α − ρ_k|` below this have
/// their term `R_k F(α)/(α − ρ_k)` replaced by the removable-singularity
/// series `R_k[F′(ρ_k) + (α − ρ_k)F″(ρ_k)/2]` (error `O(|α−ρ_k|²)`,
/// ≤ ~1e-8 relative at the boundary; the plain quotient takes over there
/// with cancellation error ≤ ~1e-12).
pub const Z_NEAR_ROOT: f64 = 1e-4;

/// Below `|αx|` = this, the occupation-term integrals
/// `ψ₀ = ∫₀ˣe^{−αy}dy` and `ψ₁ = ∫₀ˣy·e^{−αy}dy` use three-term series
/// in `αx` (truncation ≤ (αx)³/24 ≈ 4e-14 relative); above it the closed
/// forms lose at most ~1e-12 to cancellation.
pub const PSI_SERIES: f64 = 1e-4;

/// `first_passage_down` switches to its limiting (Richardson) branch
/// when `α` is within this distance of a real zero of `det F`. At the
/// boundary the regular formula still carries ~1e-9 cancellation error
/// and the extrapolated limit differs from the exact value by
/// ~1e-7·‖∂f/∂α‖, both inside every stated tolerance.
pub const FPD_ROOT_TRIGGER: f64 = 1e-7;

/// Offsets for the two-point Richardson limit used where an exit formula
/// has a removable singularity (zeros of det F(α)): the limit is taken as
/// `2·f(α ± OFFSET/2) − f(α ± OFFSET)`, leaving an O(OFFSET²) error.
pub const RICHARDSON_OFFSET: f64 = 1e-5;

/// Abscissa standing in for `α = ∞` when extracting the jump structure of
/// a Markov-modulated compound Poisson process from its matrix exponent.
pub const MMCPP_ALPHA_HI: f64 = 1e8;

/// Companion abscissa used both for the convergence check and for the
/// 1/α-Richardson extrapolation of `F(∞)`.
pub const MMCPP_ALPHA_LO: f64 = 1e7;

/// Maximum relative difference allowed between the matrix exponent at
/// [`MMCPP_ALPHA_HI`] and [`MMCPP_ALPHA_LO`]: larger differences mean the
/// exponent has not converged (the process is not of compound-Poisson
/// type) and the extraction is refused.
pub const MMCPP_CONVERGENCE: f64 = 1e-4;

/// Ceiling on the occupation-transform identity residual checked by the
/// verification harness (an exact identity assembled from independently
/// computed pieces; the bound allows for conditioning of `F(α)⁻¹`).
pub const TRANSFORM_RESIDUAL: f64 = 1e-8;

/// Default |z|-score threshold for Monte Carlo cross-checks: a Gaussian
/// 4σ two-sided test has a ~6e-5 false-alarm rate per entry.
pub const VERIFY_Z_THRESHOLD: f64 = 4.0;

/// Default tolerance for the analytic identities exercised by `verify`.
pub const VERIFY_ANALYTIC_TOL: f64 = 1e-8;

/// Row sums of a conservative transition-rate matrix must vanish to this
/// tolerance (scaled by the largest rate) for a model to count as
/// unkilled.
pub const CONSERVATIVE_ROW_SUM: f64 = 1e-12;

/// |k′(0)| at or below this marks the unkilled zero-mean-drift case, in
/// which `det F` has a structural double zero at the origin.
pub const DRIFT_ZERO: f64 = 1e-9;

/// Roots within this distance of the origin snap to the exact structural
/// zero root of an unkilled conservative model.
pub const ZERO_ROOT_SNAP: f64 = 1e-6;

/// Quadrature points for the contour (trapezoid) extraction of the
/// Laurent coefficients at a structural double zero root. The trapezoid
/// rule on a circle converges geometrically for analytic integrands, so
/// 256 points reach machine precision for any reasonable root separation.
pub const CONTOUR_POINTS: usize = 256;

/// Relative tolerance of the finite-difference derivative check
/// (central difference with step [`FD_STEP`], truncation error O(h²) ~
/// 1e-10 against analytic values of order one).
pub const FD_REL_TOL: f64 = 1e-6;

/// Step for finite-difference derivative checks.
pub const FD_STEP: f64 = 1e-5;

/// Default Monte Carlo step when none is supplied.
pub const DEFAULT_DT: f64 = 1e-4;

/// Horizon multiplier for killed models: a path alive at `t = 40/q` has
/// survival probability e^{−40} ≈ 4e-18, so censoring there is invisible
/// at Monte Carlo accuracy.
pub const HORIZON_KILL_MULTIPLE: f64 = 40.0;

/// Fallback horizon (time units) for unkilled models.
pub const DEFAULT_HORIZON: f64 = 1000.0;

/// Brownian-bridge corrections (crossing probabilities and sampled
/// extrema) are skipped when the crossing exponent `2·g/(σ²h)` exceeds
/// this bound: `exp(−40) ≈ 4e-18` is far below Monte Carlo resolution,
/// and the guard keeps the per-step cost at a multiply and a compare on
/// the overwhelming majority of steps.
pub const BRIDGE_GUARD: f64 = 40.0;
