//! The two constrained subproblems of the primal-dual iteration, plus
//! independent brute-force oracles used to verify them.
//!
//! Primal side: a ball-constrained proximal step, solved exactly by a
//! gradient step followed by radial projection.
//!
//! Dual side: maximize over the probability simplex
//!
//! ```text
//!   h(p) = a·(Σ_j p_j ℓ_j − ν Σ_j (p_j − p₀_j)²/p₀_j) − m·Σ_j (p_j − q_j)²/p₀_j
//! ```
//!
//! (q = previous dual iterate, m = proximal weight). Stationarity gives the
//! clamped form p_j = max{0, (c_j − p₀_j λ)} / (2(aν + m)) with
//! c_j = p₀_j(a ℓ_j + 2aν) + 2m q_j, and the multiplier λ is pinned by
//! Σ_j p_j = 1 — monotone in λ, so a bisection always lands it. When no
//! entry clamps, λ is available in closed form and the bisection is skipped.
//!
//! The oracles ([`brute_dual_max`], [`brute_prox_max`]) solve the same
//! problems by projected gradient ascent with a smoothness-matched step and
//! share nothing with the closed forms beyond the objective itself.

use crate::empirical::{RegularizedObjective, ModelParams, WeightVector};
use crate::error::{Error, Result};
use crate::linalg;

// ---------------------------------------------------------------------------
// Primal side
// ---------------------------------------------------------------------------

/// Radial projection onto the Euclidean ball of the given radius.
pub fn project_ball(v: &[f64], radius: f64) -> Vec<f64> {
    let norm = linalg::norm2(v);
    if norm <= radius {
        v.to_vec()
    } else {
        v.iter().map(|c| c * radius / norm).collect()
    }
}

/// The ball-constrained proximal step
///
/// ```text
///   argmin_{‖w‖ ≤ radius}  a·⟨g, w⟩ + ((1 + 0.5·c1·A_prev)/2)·‖w − w_prev‖²
/// ```
///
/// = project_ball(w_prev − a·g/(1 + 0.5·c1·A_prev), radius).
pub fn primal_step(
    w_prev: &[f64],
    g: &[f64],
    a_i: f64,
    a_total_prev: f64,
    c1: f64,
    radius: f64,
) -> Vec<f64> {
    let scale = a_i / (1.0 + 0.5 * c1 * a_total_prev);
    let target: Vec<f64> = w_prev
        .iter()
        .zip(g.iter())
        .map(|(&w, &gj)| w - scale * gj)
        .collect();
    project_ball(&target, radius)
}

// ---------------------------------------------------------------------------
// Weighted simplex projection
// ---------------------------------------------------------------------------

/// argmin over the simplex of Σ_j (p_j − v_j)²/weights_j, for strictly
/// positive weights. Sorted-threshold solve: p_j = max(0, v_j − τ·weights_j)
/// with τ = (Σ_active v_j − 1)/Σ_active weights_j over the right active set.
pub fn simplex_project(v: &[f64], weights: &WeightVector) -> Result<WeightVector> {
    let n = v.len();
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: weights.len(),
        });
    }
    if n == 0 {
        return Err(Error::param("v", "cannot project an empty vector"));
    }
    if !linalg::all_finite(v) {
        return Err(Error::NonFinite { what: "projection input" });
    }
    for j in 0..n {
        if weights[j] <= 0.0 {
            return Err(Error::param("weights", format!("entry {j} is not positive")));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = v[a] / weights[a];
        let rb = v[b] / weights[b];
        rb.partial_cmp(&ra).expect("finite ratios")
    });

    // The active set is a prefix in ratio order; take the largest prefix
    // whose k-th member stays strictly positive at its own threshold.
    let mut sum_v = 0.0;
    let mut sum_w = 0.0;
    let mut tau = f64::NAN;
    for &j in &order {
        let candidate_v = sum_v + v[j];
        let candidate_w = sum_w + weights[j];
        let candidate_tau = (candidate_v - 1.0) / candidate_w;
        if v[j] / weights[j] > candidate_tau {
            sum_v = candidate_v;
            sum_w = candidate_w;
            tau = candidate_tau;
        } else {
            break;
        }
    }
    let p: Vec<f64> = (0..n).map(|j| (v[j] - tau * weights[j]).max(0.0)).collect();
    WeightVector::new(p)
}

// ---------------------------------------------------------------------------
// Dual proximal step
// ---------------------------------------------------------------------------

/// One dual subproblem: maximize a·(E_p ℓ − ν χ²(p, p₀)) − m·D(p, p_prev)
/// over the simplex, where D is the χ²-induced divergence with reference
/// p₀ (strictly positive).
#[derive(Debug, Clone, Copy)]
pub struct DualStepProblem<'a> {
    pub losses: &'a [f64],
    /// Objective weight a ≥ 0 (a = 0 degenerates to the pure prox).
    pub a_i: f64,
    /// Proximal weight m ≥ 0.
    pub prox_weight: f64,
    /// Penalty strength ν > 0.
    pub nu: f64,
    pub p0: &'a WeightVector,
    pub p_prev: &'a WeightVector,
}

impl DualStepProblem<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.losses.len();
        if self.p0.len() != n || self.p_prev.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.p0.len().min(self.p_prev.len()),
            });
        }
        if n == 0 {
            return Err(Error::param("losses", "must be nonempty"));
        }
        if !linalg::all_finite(self.losses) {
            return Err(Error::NonFinite { what: "losses" });
        }
        for v in [self.a_i, self.prox_weight, self.nu] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::param("dual step", format!("negative or non-finite scalar {v}")));
            }
        }
        for j in 0..n {
            if self.p0[j] <= 0.0 {
                return Err(Error::param(
                    "p0",
                    format!("reference weight {j} must be strictly positive"),
                ));
            }
        }
        Ok(())
    }

    /// The (strictly concave for denom > 0) objective value at p.
    pub fn objective(&self, p: &WeightVector) -> Result<f64> {
        let n = self.losses.len();
        if p.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: p.len(),
            });
        }
        let terms = (0..n).map(|j| {
            let dp0 = p[j] - self.p0[j];
            let dpp = p[j] - self.p_prev[j];
            self.a_i * (p[j] * self.losses[j] - self.nu * dp0 * dp0 / self.p0[j])
                - self.prox_weight * dpp * dpp / self.p0[j]
        });
        Ok(linalg::sum_compensated(terms))
    }
}

/// Exact maximizer of the dual subproblem.
///
/// a = 0 returns p_prev (the prox of nothing). Otherwise the KKT multiplier
/// λ is found in closed form when every entry stays positive, and by
/// monotone bisection on Σ_j p_j(λ) = 1 (residual ≤ 1e−12, bracket
/// [min_j a·ℓ_j − 2(aν+m), max_j a·ℓ_j + 2(aν+m)]) when the clamp engages.
pub fn dual_step(prob: &DualStepProblem) -> Result<WeightVector> {
    prob.validate()?;
    let denom = prob.a_i * prob.nu + prob.prox_weight;
    if denom <= 0.0 {
        return Err(Error::param(
            "dual step",
            format!("a·ν + m = {denom} leaves the subproblem degenerate"),
        ));
    }
    if prob.a_i == 0.0 {
        return Ok(prob.p_prev.clone());
    }
    let n = prob.losses.len();
    let two_denom = 2.0 * denom;
    let c: Vec<f64> = (0..n)
        .map(|j| {
            prob.p0[j] * (prob.a_i * prob.losses[j] + 2.0 * prob.a_i * prob.nu)
                + 2.0 * prob.prox_weight * prob.p_prev[j]
        })
        .collect();

    // All-active shortcut: with Σ p₀ = 1, λ = Σ c − 2(aν+m) makes the
    // unclamped solution sum to one exactly; accept it when no entry
    // wants to clamp.
    let lambda_interior = linalg::sum_compensated(c.iter().copied()) - two_denom;
    if (0..n).all(|j| c[j] - prob.p0[j] * lambda_interior >= 0.0) {
        let p: Vec<f64> = (0..n)
            .map(|j| (c[j] - prob.p0[j] * lambda_interior) / two_denom)
            .collect();
        return WeightVector::new(p);
    }

    let scaled_min = prob
        .losses
        .iter()
        .map(|&l| prob.a_i * l)
        .fold(f64::INFINITY, f64::min);
    let scaled_max = prob
        .losses
        .iter()
        .map(|&l| prob.a_i * l)
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (scaled_min - two_denom, scaled_max + two_denom);
    let sum_at = |lambda: f64| -> f64 {
        linalg::sum_compensated(
            (0..n).map(|j| (c[j] - prob.p0[j] * lambda).max(0.0) / two_denom),
        )
    };
    let mut residual = f64::INFINITY;
    for _ in 0..200 {
        let lambda = 0.5 * (lo + hi);
        let s = sum_at(lambda);
        residual = (s - 1.0).abs();
        if residual <= 1e-12 {
            let p: Vec<f64> = (0..n)
                .map(|j| (c[j] - prob.p0[j] * lambda).max(0.0) / two_denom)
                .collect();
            return WeightVector::new(p);
        }
        if s > 1.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }
    }
    Err(Error::BisectionStall {
        residual,
        iterations: 200,
    })
}

// ---------------------------------------------------------------------------
// Brute-force oracles
// ---------------------------------------------------------------------------

/// Projected-gradient-ascent oracle for the dual subproblem. Shares no code
/// with [`dual_step`]: plain Euclidean projection, smoothness-matched step
/// min_j p₀_j / (2(aν + m)), ascent until the objective improves by less
/// than `tol` (1e−13 is a good default).
pub fn brute_prox_max(prob: &DualStepProblem, tol: f64) -> Result<(f64, WeightVector)> {
    prob.validate()?;
    let denom = prob.a_i * prob.nu + prob.prox_weight;
    if denom <= 0.0 {
        return Err(Error::param(
            "dual step",
            format!("a·ν + m = {denom} leaves the subproblem degenerate"),
        ));
    }
    let n = prob.losses.len();
    let min_p0 = (0..n).map(|j| prob.p0[j]).fold(f64::INFINITY, f64::min);
    let step = min_p0 / (2.0 * denom);
    let uniform = WeightVector::uniform(n);

    let mut p = prob.p0.clone();
    let mut value = prob.objective(&p)?;
    for _ in 0..100_000 {
        let target: Vec<f64> = (0..n)
            .map(|j| {
                let grad = prob.a_i
                    * (prob.losses[j] - 2.0 * prob.nu * (p[j] - prob.p0[j]) / prob.p0[j])
                    - 2.0 * prob.prox_weight * (p[j] - prob.p_prev[j]) / prob.p0[j];
                p[j] + step * grad
            })
            .collect();
        let next = simplex_project(&target, &uniform)?;
        let next_value = prob.objective(&next)?;
        if next_value - value < tol {
            if next_value > value {
                return Ok((next_value, next));
            }
            return Ok((value, p));
        }
        p = next;
        value = next_value;
    }
    Ok((value, p))
}

/// Brute-force robust objective maximum at w: for ν > 0 this is
/// [`brute_prox_max`] on the unproximal problem (a = 1, m = 0); for ν = 0 the
/// maximum is the largest loss, attained uniformly over every sample within
/// 1e−12 of it.
pub fn brute_dual_max(
    w: &ModelParams,
    obj: &RegularizedObjective,
    tol: f64,
) -> Result<(f64, WeightVector)> {
    let losses = obj.losses_at(w.coeffs())?;
    if obj.nu() == 0.0 {
        let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ties: Vec<usize> = (0..losses.len())
            .filter(|&j| losses[j] >= max - 1e-12)
            .collect();
        let mut p = vec![0.0; losses.len()];
        for &j in &ties {
            p[j] = 1.0 / ties.len() as f64;
        }
        return Ok((max, WeightVector::new(p)?));
    }
    let prob = DualStepProblem {
        losses: &losses,
        a_i: 1.0,
        prox_weight: 0.0,
        nu: obj.nu(),
        p0: obj.reference(),
        p_prev: obj.reference(),
    };
    brute_prox_max(&prob, tol)
}
