//! Weighted empirical measures and the penalized robust objective.
//!
//! All distributions here are reweightings p of the N training samples,
//! compared against a reference weighting p₀ (uniform unless stated) through
//! the chi-squared divergence
//!
//! ```text
//!   χ²(p, p₀) = Σ_j (p_j − p₀_j)² / p₀_j .
//! ```
//!
//! For a parameter vector w with per-sample squared losses ℓ_j(w), the
//! penalized objective and its induced robust risk are
//!
//! ```text
//!   L(w, p) = Σ_j p_j ℓ_j(w) − ν χ²(p, p₀),        R(w) = max_p L(w, p),
//! ```
//!
//! the maximum running over the probability simplex. The maximizer has an
//! exact water-filling form ([`qhat_general`]); when ν ≥ ½·E_{p₀}ℓ the
//! nonnegativity clamp never activates and everything collapses to closed
//! forms ([`qhat_closed_form`], [`risk_closed_form`]):
//!
//! ```text
//!   q_j = p₀_j + p₀_j (ℓ_j − E_{p₀}ℓ) / (2ν),
//!   R(w) = E_{p₀}ℓ + Var_{p₀}(ℓ) / (4ν),
//!   χ²(q, p₀) = Var_{p₀}(ℓ) / (4ν²).
//! ```

use serde::Serialize;

use crate::activations::Activation;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::linalg;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// A probability vector over the N samples: nonnegative entries summing to
/// one (validated to 1e−9 and renormalized exactly on construction).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(mut entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::param("weights", "must be nonempty"));
        }
        if !linalg::all_finite(&entries) {
            return Err(Error::NonFinite { what: "weight entry" });
        }
        for w in &mut entries {
            if *w < 0.0 {
                if *w < -1e-12 {
                    return Err(Error::param("weights", format!("negative entry {w}")));
                }
                *w = 0.0;
            }
        }
        let sum = linalg::sum_compensated(entries.iter().copied());
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::param("weights", format!("entries sum to {sum}, not 1")));
        }
        for w in &mut entries {
            *w /= sum;
        }
        Ok(WeightVector(entries))
    }

    /// The uniform distribution over n samples.
    pub fn uniform(n: usize) -> Self {
        WeightVector(vec![1.0 / n as f64; n])
    }

    /// All mass on sample `index`.
    pub fn point_mass(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::param("index", format!("{index} out of range for {n} samples")));
        }
        let mut v = vec![0.0; n];
        v[index] = 1.0;
        Ok(WeightVector(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().copied()
    }
}

impl std::ops::Index<usize> for WeightVector {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

impl AsRef<[f64]> for WeightVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A parameter vector constrained to the Euclidean ball of a given radius.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    coeffs: Vec<f64>,
    radius: f64,
}

impl ModelParams {
    pub fn new(coeffs: Vec<f64>, radius: f64) -> Result<Self> {
        if !radius.is_finite() || radius <= 0.0 {
            return Err(Error::param("radius", format!("must be positive, got {radius}")));
        }
        if !linalg::all_finite(&coeffs) {
            return Err(Error::NonFinite { what: "model coefficients" });
        }
        let norm = linalg::norm2(&coeffs);
        if norm > radius + 1e-9 {
            return Err(Error::param(
                "coeffs",
                format!("norm {norm} exceeds the ball radius {radius}"),
            ));
        }
        Ok(ModelParams { coeffs, radius })
    }

    /// The zero vector in the ball of the given radius.
    pub fn origin(dim: usize, radius: f64) -> Result<Self> {
        ModelParams::new(vec![0.0; dim], radius)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn norm(&self) -> f64 {
        linalg::norm2(&self.coeffs)
    }
}

/// The penalized objective L(w, p) = E_p ℓ(w) − ν χ²(p, p₀) over a fixed
/// dataset, activation, penalty strength ν, and reference weighting p₀.
///
/// ν = 0 (no penalty) is admitted so the unpenalized worst case — max loss —
/// can be expressed; the closed-form maximizers require ν > 0 and the
/// brute-force oracle covers ν = 0.
pub struct RegularizedObjective<'a> {
    dataset: &'a Dataset,
    activation: Activation,
    nu: f64,
    p0: WeightVector,
}

impl<'a> RegularizedObjective<'a> {
    /// Objective with the uniform reference weighting.
    pub fn new(dataset: &'a Dataset, activation: Activation, nu: f64) -> Result<Self> {
        Self::with_reference(dataset, activation, nu, WeightVector::uniform(dataset.n()))
    }

    /// Objective with an explicit reference weighting.
    pub fn with_reference(
        dataset: &'a Dataset,
        activation: Activation,
        nu: f64,
        p0: WeightVector,
    ) -> Result<Self> {
        if !nu.is_finite() || nu < 0.0 {
            return Err(Error::param("nu", format!("must be nonnegative, got {nu}")));
        }
        if p0.len() != dataset.n() {
            return Err(Error::DimensionMismatch {
                expected: dataset.n(),
                got: p0.len(),
            });
        }
        Ok(RegularizedObjective {
            dataset,
            activation,
            nu,
            p0,
        })
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn activation(&self) -> &Activation {
        &self.activation
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn reference(&self) -> &WeightVector {
        &self.p0
    }

    /// Per-sample squared losses ℓ_j(w) = (σ(w·x_j) − y_j)².
    pub fn losses_at(&self, w: &[f64]) -> Result<Vec<f64>> {
        losses(w, self.dataset, &self.activation)
    }

    /// E_{p₀} ℓ(w).
    pub fn mean_loss_at(&self, w: &[f64]) -> Result<f64> {
        let l = self.losses_at(w)?;
        expectation(&self.p0, &l)
    }
}

// ---------------------------------------------------------------------------
// Pointwise quantities
// ---------------------------------------------------------------------------

/// Squared loss (σ(w·x) − y)² of one sample.
pub fn loss(w: &[f64], x: &[f64], y: f64, act: &Activation) -> Result<f64> {
    if w.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: w.len(),
        });
    }
    let r = act.eval(linalg::dot(w, x))? - y;
    Ok(r * r)
}

/// The update field v(w; x, y) = 2β(σ(w·x) − ȳ)·x, where ȳ is the label
/// clamped to [−level, level].
pub fn vfield(w: &[f64], x: &[f64], y: f64, act: &Activation, level: f64) -> Result<Vec<f64>> {
    if w.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: w.len(),
        });
    }
    if !level.is_finite() || level <= 0.0 {
        return Err(Error::param("level", format!("must be positive, got {level}")));
    }
    let clamped = y.clamp(-level, level);
    let scale = 2.0 * act.beta * (act.eval(linalg::dot(w, x))? - clamped);
    Ok(x.iter().map(|&c| scale * c).collect())
}

/// Per-sample squared losses over the whole dataset.
pub fn losses(w: &[f64], ds: &Dataset, act: &Activation) -> Result<Vec<f64>> {
    if w.len() != ds.dim() {
        return Err(Error::DimensionMismatch {
            expected: ds.dim(),
            got: w.len(),
        });
    }
    ds.samples()
        .map(|(x, y)| {
            let r = act.eval(linalg::dot(w, x))? - y;
            Ok(r * r)
        })
        .collect()
}

/// Weighted average of the update field: Σ_j p_j · v(w; x_j, y_j).
pub fn mean_vfield(
    w: &[f64],
    ds: &Dataset,
    act: &Activation,
    level: f64,
    p: &[f64],
) -> Result<Vec<f64>> {
    if w.len() != ds.dim() {
        return Err(Error::DimensionMismatch {
            expected: ds.dim(),
            got: w.len(),
        });
    }
    if p.len() != ds.n() {
        return Err(Error::DimensionMismatch {
            expected: ds.n(),
            got: p.len(),
        });
    }
    if !level.is_finite() || level <= 0.0 {
        return Err(Error::param("level", format!("must be positive, got {level}")));
    }
    let two_beta = 2.0 * act.beta;
    let mut acc = vec![0.0; w.len()];
    for (j, (x, y)) in ds.samples().enumerate() {
        let clamped = y.clamp(-level, level);
        let scale = p[j] * two_beta * (act.eval(linalg::dot(w, x))? - clamped);
        if scale != 0.0 {
            for (a, &c) in acc.iter_mut().zip(x) {
                *a += scale * c;
            }
        }
    }
    Ok(acc)
}

/// Σ_j p_j · values_j with compensated summation.
pub fn expectation(p: &WeightVector, values: &[f64]) -> Result<f64> {
    if p.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: values.len(),
        });
    }
    Ok(linalg::sum_compensated(
        p.iter().zip(values.iter()).map(|(a, &b)| a * b),
    ))
}

// ---------------------------------------------------------------------------
// Divergences
// ---------------------------------------------------------------------------

/// χ²(p, p₀) = Σ_j (p_j − p₀_j)²/p₀_j. Undefined (error) when p puts mass
/// where p₀ has none.
pub fn chi2(p: &WeightVector, p0: &WeightVector) -> Result<f64> {
    if p.len() != p0.len() {
        return Err(Error::DimensionMismatch {
            expected: p0.len(),
            got: p.len(),
        });
    }
    chi2_slices(p.as_slice(), p0.as_slice())
}

pub(crate) fn chi2_slices(p: &[f64], p0: &[f64]) -> Result<f64> {
    let mut terms = Vec::with_capacity(p.len());
    for (j, (&pj, &rj)) in p.iter().zip(p0.iter()).enumerate() {
        if rj <= 0.0 {
            if pj != 0.0 {
                return Err(Error::SupportViolation { index: j });
            }
            continue;
        }
        let d = pj - rj;
        terms.push(d * d / rj);
    }
    Ok(linalg::sum_compensated(terms))
}

/// The divergence induced by p ↦ χ²(p, p₀) between two reweightings:
/// D(p, q) = Σ_j (q_j − p_j)²/p₀_j. Symmetric in (p, q), and adding any
/// affine function to the potential leaves it unchanged.
pub fn bregman(p: &WeightVector, q: &WeightVector, p0: &WeightVector) -> Result<f64> {
    if p.len() != p0.len() || q.len() != p0.len() {
        return Err(Error::DimensionMismatch {
            expected: p0.len(),
            got: p.len().max(q.len()),
        });
    }
    let mut terms = Vec::with_capacity(p.len());
    for j in 0..p0.len() {
        let rj = p0[j];
        if rj <= 0.0 {
            if p[j] != 0.0 || q[j] != 0.0 {
                return Err(Error::SupportViolation { index: j });
            }
            continue;
        }
        let d = q[j] - p[j];
        terms.push(d * d / rj);
    }
    Ok(linalg::sum_compensated(terms))
}

// ---------------------------------------------------------------------------
// Objective, worst case, risk
// ---------------------------------------------------------------------------

/// L(w, p) = Σ_j p_j ℓ_j(w) − ν χ²(p, p₀).
pub fn objective_l(w: &ModelParams, p: &WeightVector, obj: &RegularizedObjective) -> Result<f64> {
    let l = obj.losses_at(w.coeffs())?;
    let mean = expectation(p, &l)?;
    if obj.nu() == 0.0 {
        Ok(mean)
    } else {
        Ok(mean - obj.nu() * chi2(p, obj.reference())?)
    }
}

/// The simple closed-form maximizer q_j = p₀_j + p₀_j(ℓ_j − E_{p₀}ℓ)/(2ν),
/// valid when ν ≥ ½·E_{p₀}ℓ (all entries already nonnegative then). Outside
/// that regime it falls through to [`qhat_general`]. When ν ≥ E_{p₀}ℓ, every
/// entry is at least p₀_j/2.
pub fn qhat_closed_form(w: &ModelParams, obj: &RegularizedObjective) -> Result<WeightVector> {
    let l = obj.losses_at(w.coeffs())?;
    let nu = obj.nu();
    let mean = expectation(obj.reference(), &l)?;
    if nu <= 0.0 || nu < 0.5 * mean {
        return qhat_from_losses(&l, obj);
    }
    let p0 = obj.reference();
    let q: Vec<f64> = (0..l.len())
        .map(|j| p0[j] + p0[j] * (l[j] - mean) / (2.0 * nu))
        .collect();
    WeightVector::new(q)
}

/// The exact maximizer of p ↦ L(w, p) over the simplex, for any ν > 0:
///
/// ```text
///   q_j(ξ) = p₀_j · max{ℓ_j − ξ + 2ν, 0} / (2ν),     Σ_j q_j(ξ) = 1,
/// ```
///
/// with the threshold ξ found by water-filling over losses sorted in
/// decreasing order (exact piecewise-linear solve), falling back to
/// bisection if floating-point ties defeat the scan.
pub fn qhat_general(w: &ModelParams, obj: &RegularizedObjective) -> Result<WeightVector> {
    let l = obj.losses_at(w.coeffs())?;
    qhat_from_losses(&l, obj)
}

fn qhat_from_losses(l: &[f64], obj: &RegularizedObjective) -> Result<WeightVector> {
    let nu = obj.nu();
    if nu <= 0.0 {
        return Err(Error::param(
            "nu",
            "closed-form maximizer requires nu > 0; use brute_dual_max for nu = 0",
        ));
    }
    let p0 = obj.reference();
    let n = l.len();
    if n == 1 {
        return WeightVector::new(vec![1.0]);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| l[b].partial_cmp(&l[a]).expect("finite losses"));

    let two_nu = 2.0 * nu;
    let build = |xi: f64| -> Vec<f64> {
        (0..n)
            .map(|j| p0[j] * ((l[j] - xi + two_nu).max(0.0)) / two_nu)
            .collect()
    };

    // Water-filling: take the k largest losses as the active set and solve
    // Σ_active p₀_j (ℓ_j − ξ + 2ν) = 2ν for ξ; valid iff the k-th stays
    // active and the (k+1)-th does not.
    let mut weight_sum = 0.0;
    let mut weighted_loss_sum = 0.0;
    for (rank, &j) in order.iter().enumerate() {
        weight_sum += p0[j];
        weighted_loss_sum += p0[j] * (l[j] + two_nu);
        if weight_sum <= 0.0 {
            continue;
        }
        let xi = (weighted_loss_sum - two_nu) / weight_sum;
        let kth_active = l[order[rank]] + two_nu > xi;
        let next_inactive = rank + 1 >= n || l[order[rank + 1]] + two_nu <= xi;
        if kth_active && next_inactive {
            return WeightVector::new(build(xi));
        }
    }

    // Fallback: Σ_j q_j(ξ) is continuous and decreasing, ≥ 2 at the left
    // end of the bracket and 0 at the right.
    let l_min = l.iter().cloned().fold(f64::INFINITY, f64::min);
    let l_max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (l_min - two_nu, l_max + two_nu);
    let sum_at = |xi: f64| -> f64 {
        linalg::sum_compensated(
            (0..n).map(|j| p0[j] * ((l[j] - xi + two_nu).max(0.0)) / two_nu),
        )
    };
    let mut xi = 0.5 * (lo + hi);
    for _ in 0..200 {
        xi = 0.5 * (lo + hi);
        let s = sum_at(xi);
        if (s - 1.0).abs() <= 1e-12 {
            return WeightVector::new(build(xi));
        }
        if s > 1.0 {
            lo = xi;
        } else {
            hi = xi;
        }
    }
    let residual = (sum_at(xi) - 1.0).abs();
    if residual <= 1e-9 {
        return WeightVector::new(build(xi));
    }
    Err(Error::BisectionStall {
        residual,
        iterations: 200,
    })
}

/// Robust risk at w together with the divergence of the maximizer from the
/// reference weighting.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RiskEvaluation {
    /// R(w) = max_p L(w, p).
    pub value: f64,
    /// χ²(q_w, p₀) at the maximizer q_w.
    pub chi2_to_reference: f64,
}

/// Variance form of the robust risk, R(w) = E_{p₀}ℓ + Var_{p₀}(ℓ)/(4ν) with
/// χ²(q_w, p₀) = Var_{p₀}(ℓ)/(4ν²), valid when ν ≥ ½·E_{p₀}ℓ. Outside that
/// regime the exact maximizer is found by projected gradient ascent instead.
pub fn risk_closed_form(w: &ModelParams, obj: &RegularizedObjective) -> Result<RiskEvaluation> {
    let l = obj.losses_at(w.coeffs())?;
    let nu = obj.nu();
    let mean = expectation(obj.reference(), &l)?;
    if nu <= 0.0 || nu < 0.5 * mean {
        let (value, argmax) = crate::solvers::brute_dual_max(w, obj, 1e-13)?;
        let chi2_to_reference = chi2(&argmax, obj.reference())?;
        return Ok(RiskEvaluation {
            value,
            chi2_to_reference,
        });
    }
    let p0 = obj.reference();
    let variance = linalg::sum_compensated((0..l.len()).map(|j| {
        let d = l[j] - mean;
        p0[j] * d * d
    }));
    Ok(RiskEvaluation {
        value: mean + variance / (4.0 * nu),
        chi2_to_reference: variance / (4.0 * nu * nu),
    })
}

/// The primal-dual gap surrogate Gap(w, p) = L(w, p*) − L(w*, p). Not
/// sign-definite: with ν = 0 and a bad reference pair it can be negative.
pub fn gap(
    w: &ModelParams,
    p: &WeightVector,
    w_star: &ModelParams,
    p_star: &WeightVector,
    obj: &RegularizedObjective,
) -> Result<f64> {
    Ok(objective_l(w, p_star, obj)? - objective_l(w_star, p, obj)?)
}

/// First and second moments of the loss of `w_star` under its own
/// worst-case reweighting q_{w*}.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OptStatistics {
    /// E_{q*} ℓ(w*) — the robust optimum value when w_star is the min-max
    /// optimizer.
    pub mean_loss: f64,
    /// E_{q*} ℓ(w*)² — controls how large ν must be for the guarantees.
    pub mean_sq_loss: f64,
}

/// Evaluate both moments at the worst-case reweighting of `w_star`.
pub fn opt_statistics(w_star: &ModelParams, obj: &RegularizedObjective) -> Result<OptStatistics> {
    let l = obj.losses_at(w_star.coeffs())?;
    let p_star = qhat_from_losses(&l, obj)?;
    let mean_loss = expectation(&p_star, &l)?;
    let sq: Vec<f64> = l.iter().map(|&v| v * v).collect();
    let mean_sq_loss = expectation(&p_star, &sq)?;
    Ok(OptStatistics {
        mean_loss,
        mean_sq_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GeneratorConfig, LabelModel, Marginal};
    use crate::activations::ActivationSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two samples in d = 1: (x, y) = (−2, 2) and (2, 1.5). Under ReLU the
    /// planted w* = −1 fits the first sample exactly and misses the second
    /// by 1.5, while w = 1 misses the first by 2 and the second by 0.5.
    fn two_point_dataset() -> Dataset {
        Dataset::from_rows(vec![vec![-2.0], vec![2.0]], vec![2.0, 1.5]).unwrap()
    }

    fn random_simplex_point(rng: &mut impl Rng, n: usize) -> WeightVector {
        let raw: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
        let sum: f64 = raw.iter().sum();
        WeightVector::new(raw.iter().map(|v| v / sum).collect()).unwrap()
    }

    #[test]
    fn weight_vector_validation() {
        assert!(WeightVector::new(vec![0.5, 0.5]).is_ok());
        assert!(WeightVector::new(vec![0.6, 0.6]).is_err());
        assert!(WeightVector::new(vec![-0.1, 1.1]).is_err());
        assert!(WeightVector::new(vec![]).is_err());
        // Tiny negatives from float round-off are clamped, then renormalized.
        let w = WeightVector::new(vec![1.0 + 1e-13, -1e-13]).unwrap();
        assert_eq!(w[1], 0.0);
        let u = WeightVector::uniform(4);
        assert_eq!(u.as_slice(), &[0.25; 4]);
        let pm = WeightVector::point_mass(3, 1).unwrap();
        assert_eq!(pm.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn model_params_ball_constraint() {
        assert!(ModelParams::new(vec![3.0, 4.0], 5.0).is_ok());
        assert!(ModelParams::new(vec![3.0, 4.0], 4.9).is_err());
        assert!(ModelParams::new(vec![f64::NAN], 1.0).is_err());
    }

    #[test]
    fn loss_examples() {
        let relu = Activation::relu();
        assert_eq!(loss(&[1.0, 0.0], &[2.0, 0.0], 2.0, &relu).unwrap(), 0.0);
        assert_eq!(loss(&[-1.0], &[2.0], 1.5, &relu).unwrap(), 2.25);
        assert_eq!(loss(&[1.0], &[2.0], 1.5, &relu).unwrap(), 0.25);
        assert!(loss(&[1.0], &[1.0, 2.0], 0.0, &relu).is_err());
    }

    #[test]
    fn vfield_examples() {
        let relu = Activation::relu();
        assert_eq!(
            vfield(&[1.0, 0.0], &[1.0, 0.0], 0.0, &relu, 10.0).unwrap(),
            vec![2.0, 0.0]
        );
        assert_eq!(
            vfield(&[0.0, 0.0], &[3.0, 4.0], 0.0, &relu, 10.0).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(vfield(&[1.0], &[1.0], 100.0, &relu, 5.0).unwrap(), vec![-8.0]);
    }

    #[test]
    fn chi2_examples() {
        let u = WeightVector::uniform(2);
        assert_eq!(chi2(&u, &u).unwrap(), 0.0);
        let pm = WeightVector::point_mass(2, 0).unwrap();
        assert!((chi2(&pm, &u).unwrap() - 1.0).abs() < 1e-15);
        let p = WeightVector::new(vec![0.75, 0.25]).unwrap();
        assert!((chi2(&p, &u).unwrap() - 0.25).abs() < 1e-15);
        match chi2(&u, &pm) {
            Err(Error::SupportViolation { index }) => assert_eq!(index, 1),
            other => panic!("expected support violation, got {other:?}"),
        }
    }

    #[test]
    fn bregman_examples() {
        let u = WeightVector::uniform(2);
        let a = WeightVector::point_mass(2, 0).unwrap();
        let b = WeightVector::point_mass(2, 1).unwrap();
        assert_eq!(bregman(&a, &a, &u).unwrap(), 0.0);
        assert!((bregman(&a, &b, &u).unwrap() - 4.0).abs() < 1e-15);
        // Divergence to the reference itself is the chi-squared divergence.
        let p = WeightVector::new(vec![0.3, 0.7]).unwrap();
        assert!((bregman(&p, &u, &u).unwrap() - chi2(&p, &u).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn bregman_ignores_affine_shifts_of_the_potential() {
        // If the potential φ(p) = χ²(p, p₀) + a·p + b, its induced divergence
        // φ(p) − φ(q) − ∇φ(q)·(p − q) must not depend on (a, b).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(2..8);
            let p0 = random_simplex_point(&mut rng, n);
            let p = random_simplex_point(&mut rng, n);
            let q = random_simplex_point(&mut rng, n);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: f64 = rng.gen_range(-3.0..3.0);
            let phi = |v: &WeightVector| -> f64 {
                chi2(v, &p0).unwrap() + crate::linalg::dot(&a, v.as_slice()) + b
            };
            let grad_q: Vec<f64> = (0..n)
                .map(|j| 2.0 * (q[j] - p0[j]) / p0[j] + a[j])
                .collect();
            let inner: f64 = (0..n).map(|j| grad_q[j] * (p[j] - q[j])).sum();
            let direct = phi(&p) - phi(&q) - inner;
            let d = bregman(&p, &q, &p0).unwrap();
            assert!((direct - d).abs() < 1e-10, "direct={direct}, bregman={d}");
        }
    }

    #[test]
    fn objective_examples() {
        let ds = two_point_dataset();
        let relu = Activation::relu();
        let p_star = WeightVector::point_mass(2, 1).unwrap();

        let unpenalized = RegularizedObjective::new(&ds, relu, 0.0).unwrap();
        let w_star = ModelParams::new(vec![-1.0], 1.0).unwrap();
        let w_one = ModelParams::new(vec![1.0], 1.0).unwrap();
        assert_eq!(objective_l(&w_star, &p_star, &unpenalized).unwrap(), 2.25);

        let penalized = RegularizedObjective::new(&ds, relu, 2.0).unwrap();
        assert_eq!(objective_l(&w_one, &p_star, &penalized).unwrap(), -1.75);

        // With p = p₀ the penalty vanishes and the objective is the mean loss.
        let u = WeightVector::uniform(2);
        let val = objective_l(&w_one, &u, &penalized).unwrap();
        assert!((val - 0.5 * (4.0 + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn gap_two_point_example_is_exact() {
        let ds = two_point_dataset();
        let obj = RegularizedObjective::new(&ds, Activation::relu(), 0.0).unwrap();
        let w = ModelParams::new(vec![1.0], 1.0).unwrap();
        let w_star = ModelParams::new(vec![-1.0], 1.0).unwrap();
        let p_star = WeightVector::point_mass(2, 1).unwrap();
        let g = gap(&w, &p_star, &w_star, &p_star, &obj).unwrap();
        assert_eq!(g, -2.0);
        // Gap of the saddle point against itself vanishes.
        let self_gap = gap(&w_star, &p_star, &w_star, &p_star, &obj).unwrap();
        assert_eq!(self_gap, 0.0);
    }

    #[test]
    fn qhat_simple_form_two_point_values() {
        let ds = two_point_dataset();
        let obj = RegularizedObjective::new(&ds, Activation::relu(), 2.0).unwrap();
        let w_star = ModelParams::new(vec![-1.0], 1.0).unwrap();
        // Losses at w* are (0, 2.25); their mean 1.125 ≤ ν so the simple
        // form applies and the values are exact dyadic rationals.
        let q = qhat_closed_form(&w_star, &obj).unwrap();
        assert_eq!(q.as_slice(), &[0.359375, 0.640625]);
        let q2 = qhat_general(&w_star, &obj).unwrap();
        assert!((q[0] - q2[0]).abs() < 1e-12 && (q[1] - q2[1]).abs() < 1e-12);
    }

    #[test]
    fn qhat_equal_losses_returns_reference() {
        let ds = Dataset::from_rows(vec![vec![1.0], vec![1.0], vec![1.0]], vec![0.0, 0.0, 0.0])
            .unwrap();
        let obj = RegularizedObjective::new(&ds, Activation::relu(), 0.7).unwrap();
        let w = ModelParams::new(vec![0.5], 1.0).unwrap();
        let q = qhat_closed_form(&w, &obj).unwrap();
        for j in 0..3 {
            assert!((q[j] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn qhat_large_nu_approaches_reference() {
        let ds = two_point_dataset();
        let w = ModelParams::new(vec![1.0], 1.0).unwrap();
        let obj = RegularizedObjective::new(&ds, Activation::relu(), 1e12).unwrap();
        let q = qhat_closed_form(&w, &obj).unwrap();
        assert!((q[0] - 0.5).abs() < 1e-11);
        assert!((q[1] - 0.5).abs() < 1e-11);
    }

    #[test]
    fn qhat_small_nu_concentrates_mass() {
        let ds = Dataset::from_rows(vec![vec![0.0], vec![10.0]], vec![0.0, 0.0]).unwrap();
        // Losses at w = 1 are (0, 100); with ν = 0.1 the water-filling
        // threshold removes the first sample entirely.
        let obj = RegularizedObjective::new(&ds, Activation::relu(), 0.1).unwrap();
        let w = ModelParams::new(vec![1.0], 1.0).unwrap();
        let q = qhat_general(&w, &obj).unwrap();
        assert_eq!(q.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn qhat_single_sample() {
        let ds = Dataset::from_rows(vec![vec![1.0]], vec![2.0]).unwrap();
        let obj = RegularizedObjective::new(&ds, Activation::relu(), 0.5).unwrap();
        let w = ModelParams::new(vec![0.1], 1.0).unwrap();
        assert_eq!(qhat_general(&w, &obj).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn qhat_entries_stay_above_half_reference_when_nu_large() {
        let ds = two_point_dataset();
        let w = ModelParams::new(vec![1.0], 1.0).unwrap();
        // Mean loss at w is 2.125; pick ν just above it.
        let obj = RegularizedObjective::new(&ds, Activation::relu(), 2.2).unwrap();
        let q = qhat_closed_form(&w, &obj).unwrap();
        for j in 0..2 {
            assert!(q[j] >= 0.5 * 0.5 - 1e-12);
        }
    }

    #[test]
    fn risk_closed_form_examples() {
        let ds = two_point_dataset();
        let relu = Activation::relu();
        let w_star = ModelParams::new(vec![-1.0], 1.0).unwrap();
        let obj = RegularizedObjective::new(&ds, relu, 2.0).unwrap();
        let r = risk_closed_form(&w_star, &obj).unwrap();
        assert!((r.value - 1.283203125).abs() < 1e-15);
        assert!((r.chi2_to_reference - 0.0791015625).abs() < 1e-15);

        // Risk equals the objective at the maximizer.
        let q = qhat_closed_form(&w_star, &obj).unwrap();
        let at_max = objective_l(&w_star, &q, &obj).unwrap();
        assert!((r.value - at_max).abs() < 1e-10);

        // Constant losses: risk is that constant, divergence zero.
        let flat = Dataset::from_rows(vec![vec![1.0], vec![1.0]], vec![0.5, 0.5]).unwrap();
        let flat_obj = RegularizedObjective::new(&flat, relu, 1.0).unwrap();
        let w = ModelParams::new(vec![0.0], 1.0).unwrap();
        let fr = risk_closed_form(&w, &flat_obj).unwrap();
        assert!((fr.value - 0.25).abs() < 1e-15);
        assert_eq!(fr.chi2_to_reference, 0.0);
    }

    #[test]
    fn opt_statistics_two_point_values() {
        let ds = two_point_dataset();
        let obj = RegularizedObjective::new(&ds, Activation::relu(), 2.0).unwrap();
        let w_star = ModelParams::new(vec![-1.0], 1.0).unwrap();
        let stats = opt_statistics(&w_star, &obj).unwrap();
        assert!((stats.mean_loss - 1.44140625).abs() < 1e-12);
        assert!((stats.mean_sq_loss - 0.640625 * 2.25 * 2.25).abs() < 1e-12);
        assert!(stats.mean_loss <= stats.mean_sq_loss.sqrt() + 1e-12);
    }

    #[test]
    fn realizable_optimum_has_zero_loss_statistics() {
        let cfg = GeneratorConfig {
            marginal: Marginal::GaussianIsotropic,
            d: 3,
            n: 30,
            w_star: vec![0.6, 0.0, 0.8],
            radius: 1.0,
            label_model: LabelModel::Realizable,
            seed: 11,
            concentration: 1.0,
            clip_radius: None,
            activation: ActivationSpec::Relu,
        };
        let ds = generate(&cfg).unwrap();
        let obj = RegularizedObjective::new(&ds, Activation::relu(), 1.0).unwrap();
        let w_star = ModelParams::new(cfg.w_star.clone(), 1.0).unwrap();
        let stats = opt_statistics(&w_star, &obj).unwrap();
        assert_eq!(stats.mean_loss, 0.0);
        assert_eq!(stats.mean_sq_loss, 0.0);
    }

    #[test]
    fn qhat_maximizes_the_objective_over_random_simplex_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        for _ in 0..100 {
            let n = rng.gen_range(2..=50);
            let d = rng.gen_range(1..=4);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let labels: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ds = Dataset::from_rows(rows, labels).unwrap();
            let nu = 10f64.powf(rng.gen_range(-2.0..2.0));
            let obj = RegularizedObjective::new(&ds, Activation::relu(), nu).unwrap();
            let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scale = rng.gen::<f64>() / linalg::norm2(&dir).max(1e-9);
            let w = ModelParams::new(dir.iter().map(|v| v * scale).collect(), 1.0).unwrap();

            let l = obj.losses_at(w.coeffs()).unwrap();
            let q = qhat_general(&w, &obj).unwrap();
            let value_at = |p: &WeightVector| -> f64 {
                expectation(p, &l).unwrap() - nu * chi2(p, obj.reference()).unwrap()
            };
            let best = value_at(&q);
            for _ in 0..1000 {
                let p = random_simplex_point(&mut rng, n);
                assert!(
                    best >= value_at(&p) - 1e-9,
                    "random point beats water-filling: n={n}, nu={nu}"
                );
            }
        }
    }
}
