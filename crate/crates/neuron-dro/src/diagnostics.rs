//! Data-driven estimates of the constants the guarantees depend on, plus
//! post-run checks of the final bounds.
//!
//! The central quantity is the sharpness of the activation along the data:
//!
//! ```text
//!   c₀ = 2·inf_w  E_p[(σ(w·x) − σ(w*·x))·((w − w*)·x)] / ‖w − w*‖²
//! ```
//!
//! over admissible perturbations w of the planted model w*, from which
//! c₁ = c₀²/(24·B). A related spectral witness is the minimum eigenvalue of
//! the indicator-masked second-moment matrix Σ_j p_j·x_j x_jᵀ·1{w*·x_j ≥
//! γ‖w*‖}, computed here by power iteration on a spectral shift.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activations::Activation;
use crate::datagen::{self, Dataset};
use crate::empirical::{self, ModelParams, RegularizedObjective, WeightVector};
use crate::error::{Error, Result};
use crate::linalg::{self, RunningSum};

/// Margin thresholds γ swept by the spectral check.
pub const MARGIN_GAMMAS: [f64; 4] = [0.05, 0.1, 0.2, 0.5];

// ---------------------------------------------------------------------------
// Spectral margin check
// ---------------------------------------------------------------------------

fn matvec(a: &[f64], d: usize, v: &[f64], out: &mut [f64]) {
    for r in 0..d {
        out[r] = linalg::dot(&a[r * d..(r + 1) * d], v);
    }
}

/// Largest eigenvalue of a symmetric matrix by 200 power-iteration steps
/// from a seeded start; returns the Rayleigh quotient and its residual
/// norm ‖Av − ρv‖.
fn power_lambda(a: &[f64], d: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let mut v: Vec<f64> = loop {
        let cand: Vec<f64> = (0..d)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let n = linalg::norm2(&cand);
        if n > 1e-9 {
            break cand.iter().map(|&c| c / n).collect();
        }
    };
    let mut av = vec![0.0; d];
    let mut prev = f64::INFINITY;
    for _ in 0..200 {
        matvec(a, d, &v, &mut av);
        let next = linalg::dot(&v, &av);
        let n = linalg::norm2(&av);
        if n <= 1e-300 {
            // v is (numerically) in the kernel: the quotient is already 0.
            return (0.0, 0.0);
        }
        for (vj, &aj) in v.iter_mut().zip(av.iter()) {
            *vj = aj / n;
        }
        if (next - prev).abs() <= 1e-12 * next.abs().max(1.0) {
            break;
        }
        prev = next;
    }
    matvec(a, d, &v, &mut av);
    let rho = linalg::dot(&v, &av);
    let residual = (0..d)
        .map(|j| (av[j] - rho * v[j]).powi(2))
        .sum::<f64>()
        .sqrt();
    (rho, residual)
}

/// Minimum eigenvalue of Σ_j weights_j·x_j x_jᵀ·1{w*·x_j ≥ γ‖w*‖}.
///
/// Two power-iteration passes: one for λ_max, then one on the shifted
/// matrix cI − A with c just above λ_max, whose top eigenvalue is c − λ_min.
pub fn check_margin(
    weights: &WeightVector,
    ds: &Dataset,
    w_star: &[f64],
    gamma: f64,
) -> Result<f64> {
    if weights.len() != ds.n() {
        return Err(Error::DimensionMismatch {
            expected: ds.n(),
            got: weights.len(),
        });
    }
    if w_star.len() != ds.dim() {
        return Err(Error::DimensionMismatch {
            expected: ds.dim(),
            got: w_star.len(),
        });
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::param("gamma", "must be finite and nonnegative"));
    }
    let wnorm = linalg::norm2(w_star);
    if wnorm <= 0.0 {
        return Err(Error::param(
            "w_star",
            "the margin check needs a nonzero direction",
        ));
    }
    let d = ds.dim();
    let thresh = gamma * wnorm;
    let mut a = vec![0.0; d * d];
    for (j, (x, _)) in ds.samples().enumerate() {
        if weights[j] != 0.0 && linalg::dot(w_star, x) >= thresh {
            for r in 0..d {
                let s = weights[j] * x[r];
                for c in 0..d {
                    a[r * d + c] += s * x[c];
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x6d61_7267);
    let (lam_max, residual) = power_lambda(&a, d, &mut rng);
    // Shift just above the top of the spectrum: slight overshoot keeps the
    // pass fast, the residual covers a possible Rayleigh underestimate.
    let c = lam_max + residual + 1e-6 * (1.0 + lam_max.abs());
    let mut shifted = vec![0.0; d * d];
    for r in 0..d {
        for col in 0..d {
            shifted[r * d + col] = -a[r * d + col];
        }
        shifted[r * d + r] += c;
    }
    let (lam_shift, _) = power_lambda(&shifted, d, &mut rng);
    Ok(c - lam_shift)
}

/// One point of the margin sweep.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MarginPoint {
    pub gamma: f64,
    pub lambda_hat: f64,
}

/// [`check_margin`] at every γ in [`MARGIN_GAMMAS`].
pub fn margin_sweep(
    weights: &WeightVector,
    ds: &Dataset,
    w_star: &[f64],
) -> Result<Vec<MarginPoint>> {
    MARGIN_GAMMAS
        .iter()
        .map(|&gamma| {
            check_margin(weights, ds, w_star, gamma).map(|lambda_hat| MarginPoint {
                gamma,
                lambda_hat,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Sharpness estimation
// ---------------------------------------------------------------------------

/// Measured curvature constants around the planted model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SharpnessReport {
    /// 2 × the smallest observed alignment ratio.
    pub c0_hat: f64,
    /// max_u E[(u·x)²] over the sampled unit directions.
    pub moment2_max: f64,
    /// max_u E[(u·x)⁴] over the sampled unit directions.
    pub moment4_max: f64,
    /// Best spectral margin over the γ sweep.
    pub margin_lambda_hat: f64,
    /// c₁ = c₀²/(24·B).
    pub c1_hat: f64,
}

fn sample_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let cand: Vec<f64> = (0..d)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let n = linalg::norm2(&cand);
        if n > 1e-6 {
            return cand.iter().map(|&c| c / n).collect();
        }
    }
}

/// Estimate the sharpness constants by sampling perturbations w uniformly
/// from the ball of radius 2‖w*‖, discarding those closer than √ε to w*.
/// Deterministic given the seed.
#[allow(clippy::too_many_arguments)]
pub fn estimate_sharpness(
    weights: &WeightVector,
    ds: &Dataset,
    w_star: &ModelParams,
    act: &Activation,
    trials: usize,
    epsilon: f64,
    seed: u64,
    concentration: f64,
) -> Result<SharpnessReport> {
    if trials == 0 {
        return Err(Error::param("trials", "need at least one sample"));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::param("epsilon", "must be positive"));
    }
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(Error::param("concentration", "must be positive"));
    }
    if weights.len() != ds.n() {
        return Err(Error::DimensionMismatch {
            expected: ds.n(),
            got: weights.len(),
        });
    }
    let ws = w_star.coeffs();
    if ws.len() != ds.dim() {
        return Err(Error::DimensionMismatch {
            expected: ds.dim(),
            got: ws.len(),
        });
    }
    let wnorm = w_star.norm();
    if wnorm <= 0.0 {
        return Err(Error::param(
            "w_star",
            "sharpness estimation needs a nonzero planted model",
        ));
    }
    let min_dist = epsilon.sqrt();
    if min_dist >= 3.0 * wnorm {
        return Err(Error::param(
            "epsilon",
            "√ε exceeds the sampling ball; no admissible perturbations",
        ));
    }

    let d = ds.dim();
    let dots_star: Vec<f64> = ds.samples().map(|(x, _)| linalg::dot(ws, x)).collect();
    let preds_star: Vec<f64> = dots_star
        .iter()
        .map(|&t| act.eval(t))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = 1000usize.saturating_mul(trials);
    let mut draws = 0usize;
    let mut min_ratio = f64::INFINITY;
    let mut moment2_max = 0.0f64;
    let mut moment4_max = 0.0f64;

    for _ in 0..trials {
        let w = loop {
            if draws >= budget {
                return Err(Error::Generation { draws, budget });
            }
            draws += 1;
            let cand = datagen::sample_in_ball(&mut rng, d, 2.0 * wnorm);
            if linalg::dist2(&cand, ws) >= min_dist {
                break cand;
            }
        };
        let dist_sq = linalg::dist2_sq(&w, ws);
        let mut num = RunningSum::new();
        for (j, (x, _)) in ds.samples().enumerate() {
            if weights[j] == 0.0 {
                continue;
            }
            let t = linalg::dot(&w, x);
            num.add(weights[j] * (act.eval(t)? - preds_star[j]) * (t - dots_star[j]));
        }
        let ratio = num.value() / dist_sq;
        if ratio < min_ratio {
            min_ratio = ratio;
        }

        let u = sample_unit(&mut rng, d);
        let mut m2 = RunningSum::new();
        let mut m4 = RunningSum::new();
        for (j, (x, _)) in ds.samples().enumerate() {
            let t = linalg::dot(&u, x);
            let t2 = t * t;
            m2.add(weights[j] * t2);
            m4.add(weights[j] * t2 * t2);
        }
        moment2_max = moment2_max.max(m2.value());
        moment4_max = moment4_max.max(m4.value());
    }

    let c0_hat = 2.0 * min_ratio;
    let margin_lambda_hat = margin_sweep(weights, ds, ws)?
        .into_iter()
        .map(|p| p.lambda_hat)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(SharpnessReport {
        c0_hat,
        moment2_max,
        moment4_max,
        margin_lambda_hat,
        c1_hat: c0_hat * c0_hat / (24.0 * concentration),
    })
}

// ---------------------------------------------------------------------------
// Ambiguity-radius check
// ---------------------------------------------------------------------------

/// Whether the worst-case reweighting of the planted model stays inside
/// the radius the analysis assumes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AmbiguityCheck {
    /// χ²(p*, p₀).
    pub chi2_value: f64,
    /// c₁/(1536·β⁴·B).
    pub bound: f64,
    pub pass: bool,
}

pub fn check_ambiguity_radius(
    w_star: &ModelParams,
    obj: &RegularizedObjective,
    concentration: f64,
    c1: f64,
) -> Result<AmbiguityCheck> {
    if !(c1 > 0.0) || !(concentration > 0.0) {
        return Err(Error::param("c1", "c1 and concentration must be positive"));
    }
    let p_star = empirical::qhat_general(w_star, obj)?;
    let chi2_value = empirical::chi2(&p_star, obj.reference())?;
    let beta = obj.activation().beta;
    let bound = c1 / (1536.0 * beta.powi(4) * concentration);
    Ok(AmbiguityCheck {
        chi2_value,
        bound,
        pass: chi2_value <= bound + 1e-12,
    })
}

// ---------------------------------------------------------------------------
// Final bounds report
// ---------------------------------------------------------------------------

/// One inequality of the final guarantee, evaluated numerically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

impl BoundCheck {
    fn new(name: &str, lhs: f64, rhs: f64) -> Self {
        BoundCheck {
            name: name.to_string(),
            lhs,
            rhs,
            pass: lhs <= rhs + 1e-12,
        }
    }
}

/// The end-of-run guarantees, with every constant spelled out.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalBoundsReport {
    /// E_{p*}[ℓ(w*)].
    pub opt_hat: f64,
    /// C₃ = 16β√B/c₁.
    pub c3: f64,
    /// C₄ = 1 + 2(10Bβ² + c₁)C₃ + c₁√(5B)β²C₃².
    pub c4: f64,
    pub checks: Vec<BoundCheck>,
}

impl FinalBoundsReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Evaluate the distance, square-loss, and excess-risk guarantees of a
/// trained model against the planted one.
pub fn final_bounds_report(
    w_hat: &ModelParams,
    w_star: &ModelParams,
    obj: &RegularizedObjective,
    concentration: f64,
    c1: f64,
    epsilon: f64,
) -> Result<FinalBoundsReport> {
    if !(c1 > 0.0) || !(concentration > 0.0) || !(epsilon > 0.0) {
        return Err(Error::param(
            "c1",
            "c1, concentration, and epsilon must be positive",
        ));
    }
    let beta = obj.activation().beta;
    let b = concentration;
    let p_star = empirical::qhat_general(w_star, obj)?;
    let losses_star = obj.losses_at(w_star.coeffs())?;
    let opt_hat = empirical::expectation(&p_star, &losses_star)?;
    let losses_hat = obj.losses_at(w_hat.coeffs())?;
    let sq_loss_hat = empirical::expectation(&p_star, &losses_hat)?;

    let c3 = 16.0 * beta * b.sqrt() / c1;
    let c4 = 1.0
        + 2.0 * (10.0 * b * beta * beta + c1) * c3
        + c1 * (5.0 * b).sqrt() * beta * beta * c3 * c3;

    let dist = linalg::dist2(w_hat.coeffs(), w_star.coeffs());
    let risk_hat = empirical::risk_closed_form(w_hat, obj)?.value;
    let risk_star = empirical::risk_closed_form(w_star, obj)?.value;

    let checks = vec![
        BoundCheck::new("distance", dist, c3 * opt_hat.sqrt() + epsilon.sqrt()),
        BoundCheck::new(
            "square_loss",
            sq_loss_hat,
            (2.0 + 20.0 * b * beta * beta * c3 * c3) * opt_hat + 10.0 * beta * beta * b * epsilon,
        ),
        BoundCheck::new("excess_risk", risk_hat - risk_star, c4 * (opt_hat + epsilon)),
    ];
    Ok(FinalBoundsReport {
        opt_hat,
        c3,
        c4,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sign_dataset() -> Dataset {
        Dataset::from_rows(vec![vec![1.0], vec![-1.0]], vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn margin_matches_exact_eigenvalue() {
        // Active samples e₁ and (0.6, 0.8) at uniform weight ½ give
        // A = [[0.68, 0.24], [0.24, 0.32]] with eigenvalues {0.8, 0.2}.
        let ds = Dataset::from_rows(
            vec![vec![1.0, 0.0], vec![0.6, 0.8]],
            vec![0.0, 0.0],
        )
        .unwrap();
        let weights = WeightVector::uniform(2);
        let lam = check_margin(&weights, &ds, &[1.0, 0.0], 0.05).unwrap();
        assert!((lam - 0.2).abs() <= 1e-8, "lambda_min {lam}");
    }

    #[test]
    fn margin_excludes_samples_below_threshold() {
        // At γ = 0.5 only e₁ stays active: A = ½·e₁e₁ᵀ, so λ_min = 0.
        let ds = Dataset::from_rows(
            vec![vec![1.0, 0.0], vec![0.3, 0.954]],
            vec![0.0, 0.0],
        )
        .unwrap();
        let weights = WeightVector::uniform(2);
        let lam = check_margin(&weights, &ds, &[1.0, 0.0], 0.5).unwrap();
        assert!(lam.abs() <= 1e-8, "lambda_min {lam}");
    }

    #[test]
    fn margin_rejects_zero_direction() {
        let ds = sign_dataset();
        let weights = WeightVector::uniform(2);
        assert!(check_margin(&weights, &ds, &[0.0], 0.1).is_err());
    }

    #[test]
    fn margin_is_monotone_in_gamma() {
        let ds = Dataset::from_rows(
            vec![vec![1.0, 0.2], vec![0.4, 0.9], vec![-0.1, 0.3]],
            vec![0.0; 3],
        )
        .unwrap();
        let weights = WeightVector::uniform(3);
        let sweep = margin_sweep(&weights, &ds, &[0.8, 0.6]).unwrap();
        for pair in sweep.windows(2) {
            assert!(pair[1].lambda_hat <= pair[0].lambda_hat + 1e-9);
        }
    }

    #[test]
    fn sharpness_is_exact_on_sign_data() {
        // x ∈ {+1, −1} with w* = 1: the alignment ratio is exactly ½ for
        // every perturbation, so c₀ = 1 and c₁ = 1/24; both unit-direction
        // moments are exactly 1, and only x = +1 passes the margin test.
        let ds = sign_dataset();
        let weights = WeightVector::uniform(2);
        let mp = ModelParams::new(vec![1.0], 2.0).unwrap();
        let act = Activation::relu();
        let rep =
            estimate_sharpness(&weights, &ds, &mp, &act, 64, 0.01, 9, 1.0).unwrap();
        assert!((rep.c0_hat - 1.0).abs() <= 1e-12, "c0 {}", rep.c0_hat);
        assert!((rep.c1_hat - 1.0 / 24.0).abs() <= 1e-12);
        assert!((rep.moment2_max - 1.0).abs() <= 1e-12);
        assert!((rep.moment4_max - 1.0).abs() <= 1e-12);
        assert!((rep.margin_lambda_hat - 0.5).abs() <= 1e-8);
    }

    #[test]
    fn sharpness_is_deterministic_given_seed() {
        let ds = Dataset::from_rows(
            vec![vec![0.4, 1.0], vec![-0.2, 0.6], vec![1.1, -0.3]],
            vec![0.5, 0.1, 0.9],
        )
        .unwrap();
        let weights = WeightVector::new(vec![0.5, 0.25, 0.25]).unwrap();
        let mp = ModelParams::new(vec![0.6, -0.8], 3.0).unwrap();
        let act = Activation::leaky_relu(0.2).unwrap();
        let a = estimate_sharpness(&weights, &ds, &mp, &act, 50, 0.04, 123, 2.0).unwrap();
        let b = estimate_sharpness(&weights, &ds, &mp, &act, 50, 0.04, 123, 2.0).unwrap();
        assert_eq!(a, b);
        assert!(a.c0_hat >= 0.0);
        assert!(a.c1_hat <= a.c0_hat * a.c0_hat / 24.0 + 1e-15);
    }

    #[test]
    fn sharpness_rejects_degenerate_inputs() {
        let ds = sign_dataset();
        let weights = WeightVector::uniform(2);
        let act = Activation::relu();
        let origin = ModelParams::origin(1, 1.0).unwrap();
        assert!(estimate_sharpness(&weights, &ds, &origin, &act, 10, 0.01, 0, 1.0).is_err());
        let mp = ModelParams::new(vec![0.01], 1.0).unwrap();
        // √ε = 1 dwarfs the sampling ball of radius 0.02.
        assert!(estimate_sharpness(&weights, &ds, &mp, &act, 10, 1.0, 0, 1.0).is_err());
    }

    #[test]
    fn ambiguity_check_matches_variance_closed_form() {
        // Simple-form regime: χ²(p*, p₀) = Var_{p₀}(ℓ*)/(4ν²).
        let ds = Dataset::from_rows(vec![vec![1.0], vec![2.0]], vec![1.0, 0.0]).unwrap();
        let act = Activation::relu();
        let w = ModelParams::origin(1, 1.0).unwrap();
        // Losses at the origin are (1, 0): mean ½, variance ¼.
        let nu = 100.0;
        let obj = RegularizedObjective::new(&ds, act, nu).unwrap();
        let check = check_ambiguity_radius(&w, &obj, 1.0, 1.0).unwrap();
        let expected = 0.25 / (4.0 * nu * nu);
        assert!((check.chi2_value - expected).abs() <= 1e-10);
        assert!((check.bound - 1.0 / 1536.0).abs() <= 1e-15);
        assert!(check.pass);

        // Small ν inflates the reweighting past the admissible radius.
        let obj = RegularizedObjective::new(&ds, act, 0.5).unwrap();
        let check = check_ambiguity_radius(&w, &obj, 1.0, 1.0).unwrap();
        assert!(!check.pass);
    }

    #[test]
    fn final_bounds_pass_at_the_planted_model() {
        let ds = Dataset::from_rows(vec![vec![1.0], vec![0.5]], vec![0.7, 0.35]).unwrap();
        let act = Activation::relu();
        let obj = RegularizedObjective::new(&ds, act, 1.0).unwrap();
        let star = ModelParams::new(vec![0.7], 1.0).unwrap();
        let report = final_bounds_report(&star, &star, &obj, 1.0, 0.5, 0.01).unwrap();
        assert_eq!(report.opt_hat, 0.0);
        assert!(report.pass(), "{report:?}");
        assert!((report.c3 - 32.0).abs() <= 1e-12);

        // A confidently wrong candidate violates the distance bound.
        let bad = ModelParams::new(vec![-0.7], 1.0).unwrap();
        let report = final_bounds_report(&bad, &star, &obj, 1.0, 0.5, 0.01).unwrap();
        assert!(!report.checks[0].pass);
    }
}
