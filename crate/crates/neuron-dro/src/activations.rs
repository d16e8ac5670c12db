//! Activation functions with certified growth and Lipschitz constants.
//!
//! Every activation σ in this module satisfies, for constants 0 < α ≤ β:
//!
//! ```text
//!   σ(0) = 0
//!   σ is non-decreasing and convex
//!   σ(t1) − σ(t2) ≤ β (t1 − t2)        for all t1 ≥ t2
//!   σ(t1) − σ(t2) ≥ α (t1 − t2)        for all t1 ≥ t2 ≥ 0
//! ```
//!
//! The growth floor on the nonnegative axis is what the sharpness
//! diagnostics and the convergence analysis of the training driver lean on.
//! ELU is deliberately absent: it is not convex, so it cannot carry the
//! subgradient inequalities used downstream.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// The supported activation family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    /// max(0, t); α = β = 1.
    Relu,
    /// t for t ≥ 0, slope·t otherwise; requires slope ∈ (0, 1).
    LeakyRelu { slope: f64 },
    /// Temperature-scaled softplus shifted so σ(0) = 0:
    /// σ(t) = τ·ln((1 + e^{t/τ})/2). α = σ′(0) = 1/2, β = 1.
    SoftplusNormalized { temperature: f64 },
}

/// An activation together with its growth constant α and Lipschitz
/// constant β.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activation {
    pub kind: ActivationKind,
    pub alpha: f64,
    pub beta: f64,
}

/// Serializable description of an activation, as it appears in config
/// files: `{"kind": "relu"}`, `{"kind": "leaky_relu", "slope": 0.1}`,
/// `{"kind": "softplus", "temperature": 1.0}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActivationSpec {
    Relu,
    LeakyRelu { slope: f64 },
    Softplus { temperature: f64 },
}

impl Activation {
    pub fn relu() -> Self {
        Activation {
            kind: ActivationKind::Relu,
            alpha: 1.0,
            beta: 1.0,
        }
    }

    pub fn leaky_relu(slope: f64) -> Result<Self> {
        if !slope.is_finite() || slope <= 0.0 || slope >= 1.0 {
            return Err(Error::param("slope", format!("must lie in (0, 1), got {slope}")));
        }
        Ok(Activation {
            kind: ActivationKind::LeakyRelu { slope },
            alpha: slope,
            beta: 1.0,
        })
    }

    pub fn softplus(temperature: f64) -> Result<Self> {
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::param(
                "temperature",
                format!("must be positive, got {temperature}"),
            ));
        }
        Ok(Activation {
            kind: ActivationKind::SoftplusNormalized { temperature },
            // The derivative is the logistic function of t/τ, which is
            // increasing; its minimum over [0, ∞) is attained at 0.
            alpha: 0.5,
            beta: 1.0,
        })
    }

    /// Build from the config-file representation.
    pub fn from_spec(spec: &ActivationSpec) -> Result<Self> {
        match *spec {
            ActivationSpec::Relu => Ok(Activation::relu()),
            ActivationSpec::LeakyRelu { slope } => Activation::leaky_relu(slope),
            ActivationSpec::Softplus { temperature } => Activation::softplus(temperature),
        }
    }

    /// The config-file representation of this activation.
    pub fn spec(&self) -> ActivationSpec {
        match self.kind {
            ActivationKind::Relu => ActivationSpec::Relu,
            ActivationKind::LeakyRelu { slope } => ActivationSpec::LeakyRelu { slope },
            ActivationKind::SoftplusNormalized { temperature } => {
                ActivationSpec::Softplus { temperature }
            }
        }
    }

    /// Evaluate σ(t).
    #[inline]
    pub fn eval(&self, t: f64) -> Result<f64> {
        if !t.is_finite() {
            return Err(Error::NonFinite { what: "activation input" });
        }
        Ok(match self.kind {
            ActivationKind::Relu => t.max(0.0),
            ActivationKind::LeakyRelu { slope } => {
                if t >= 0.0 {
                    t
                } else {
                    slope * t
                }
            }
            ActivationKind::SoftplusNormalized { temperature } => {
                temperature * ln_half_one_plus_exp(t / temperature)
            }
        })
    }

    /// A subderivative σ′(t) ∈ [0, β]. At kinks this returns the right
    /// derivative (so σ′(0) = 1 for ReLU), which is deterministic and sits
    /// on the α-growth side of the kink.
    #[inline]
    pub fn subgrad(&self, t: f64) -> Result<f64> {
        if !t.is_finite() {
            return Err(Error::NonFinite { what: "activation input" });
        }
        Ok(match self.kind {
            ActivationKind::Relu => {
                if t >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu { slope } => {
                if t >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            ActivationKind::SoftplusNormalized { temperature } => logistic(t / temperature),
        })
    }

    /// Check the defining inequalities on every pair of grid points and
    /// report violations. `grid` is sorted internally; the origin is always
    /// included so the σ(0) = 0 normalization is exercised.
    pub fn verify_unbounded_convex(&self, grid: &[f64]) -> Result<UnboundedConvexReport> {
        const TOL: f64 = 1e-12;
        if grid.is_empty() {
            return Err(Error::param("grid", "must be nonempty"));
        }
        let mut points: Vec<f64> = grid.to_vec();
        points.push(0.0);
        points.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
        points.dedup();

        let values: Result<Vec<f64>> = points.iter().map(|&t| self.eval(t)).collect();
        let values = values?;

        let mut report = UnboundedConvexReport {
            zero_at_origin: true,
            measured_alpha: f64::INFINITY,
            measured_beta: 0.0,
            violations: Vec::new(),
        };

        let origin = points.iter().position(|&t| t == 0.0).expect("origin inserted");
        if values[origin] != 0.0 {
            report.zero_at_origin = false;
            report.violations.push(PairViolation {
                condition: ConditionKind::ZeroAtOrigin,
                t1: 0.0,
                t2: 0.0,
                lhs: values[origin],
                rhs: 0.0,
            });
        }

        for i in 0..points.len() {
            for j in 0..i {
                // points[i] ≥ points[j] by the sort.
                let (t1, t2) = (points[i], points[j]);
                let (s1, s2) = (values[i], values[j]);
                let rise = s1 - s2;
                let spread = t1 - t2;
                if spread <= 0.0 {
                    continue;
                }
                let slope = rise / spread;
                report.measured_beta = report.measured_beta.max(slope);

                if rise < -TOL {
                    report.violations.push(PairViolation {
                        condition: ConditionKind::Monotone,
                        t1,
                        t2,
                        lhs: rise,
                        rhs: 0.0,
                    });
                }
                if rise > self.beta * spread + TOL {
                    report.violations.push(PairViolation {
                        condition: ConditionKind::Lipschitz,
                        t1,
                        t2,
                        lhs: rise,
                        rhs: self.beta * spread,
                    });
                }
                if t2 >= 0.0 {
                    report.measured_alpha = report.measured_alpha.min(slope);
                    if rise < self.alpha * spread - TOL {
                        report.violations.push(PairViolation {
                            condition: ConditionKind::Growth,
                            t1,
                            t2,
                            lhs: rise,
                            rhs: self.alpha * spread,
                        });
                    }
                }
                // Midpoint convexity on the pair.
                let mid = self.eval(0.5 * (t1 + t2))?;
                if mid > 0.5 * (s1 + s2) + TOL {
                    report.violations.push(PairViolation {
                        condition: ConditionKind::MidpointConvex,
                        t1,
                        t2,
                        lhs: mid,
                        rhs: 0.5 * (s1 + s2),
                    });
                }
            }
        }
        if !report.measured_alpha.is_finite() {
            report.measured_alpha = self.alpha;
        }
        Ok(report)
    }
}

/// Outcome of [`Activation::verify_unbounded_convex`].
#[derive(Debug, Clone, Serialize)]
pub struct UnboundedConvexReport {
    pub zero_at_origin: bool,
    /// Minimum secant slope observed over nonnegative grid pairs.
    pub measured_alpha: f64,
    /// Maximum secant slope observed over all grid pairs.
    pub measured_beta: f64,
    pub violations: Vec<PairViolation>,
}

impl UnboundedConvexReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// One grid pair that broke one of the defining inequalities.
#[derive(Debug, Clone, Serialize)]
pub struct PairViolation {
    pub condition: ConditionKind,
    pub t1: f64,
    pub t2: f64,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    ZeroAtOrigin,
    Monotone,
    Lipschitz,
    Growth,
    MidpointConvex,
}

/// ln((1 + e^z)/2), evaluated without overflow and exactly zero at z = 0.
#[inline]
fn ln_half_one_plus_exp(z: f64) -> f64 {
    if z <= 0.0 {
        // (1 + e^z)/2 = 1 + (e^z − 1)/2, and e^z − 1 is exp_m1.
        (0.5 * z.exp_m1()).ln_1p()
    } else {
        // Factor out e^z to keep the exponent nonpositive.
        z + (0.5 * (-z).exp_m1()).ln_1p()
    }
}

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_kinds() -> Vec<Activation> {
        vec![
            Activation::relu(),
            Activation::leaky_relu(0.1).unwrap(),
            Activation::softplus(1.0).unwrap(),
            Activation::softplus(0.25).unwrap(),
        ]
    }

    #[test]
    fn relu_values() {
        let act = Activation::relu();
        assert_eq!(act.eval(1.5).unwrap(), 1.5);
        assert_eq!(act.eval(-2.0).unwrap(), 0.0);
        assert_eq!(act.eval(0.0).unwrap(), 0.0);
        assert_eq!(act.subgrad(2.0).unwrap(), 1.0);
        assert_eq!(act.subgrad(0.0).unwrap(), 1.0);
        assert_eq!(act.subgrad(-1.0).unwrap(), 0.0);
    }

    #[test]
    fn leaky_relu_values() {
        let act = Activation::leaky_relu(0.1).unwrap();
        assert!((act.eval(-2.0).unwrap() - (-0.2)).abs() < 1e-15);
        assert_eq!(act.eval(3.0).unwrap(), 3.0);
        assert_eq!(act.subgrad(0.0).unwrap(), 1.0);
        assert_eq!(act.subgrad(-1.0).unwrap(), 0.1);
        assert_eq!(act.alpha, 0.1);
        assert_eq!(act.beta, 1.0);
    }

    #[test]
    fn softplus_is_normalized() {
        let act = Activation::softplus(1.0).unwrap();
        assert_eq!(act.eval(0.0).unwrap(), 0.0);
        // σ(1) = ln(1 + e) − ln 2.
        let expected = (1.0 + std::f64::consts::E).ln() - std::f64::consts::LN_2;
        assert!((act.eval(1.0).unwrap() - expected).abs() < 1e-15);
        assert!((act.eval(1.0).unwrap() - 0.6201145069582775).abs() < 1e-12);
        // Large arguments must not overflow and approach the identity.
        let big = act.eval(800.0).unwrap();
        assert!((big - (800.0 - std::f64::consts::LN_2)).abs() < 1e-9);
        assert!(act.eval(-800.0).unwrap() > -1.0);
        assert!((act.subgrad(0.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(Activation::leaky_relu(0.0).is_err());
        assert!(Activation::leaky_relu(1.0).is_err());
        assert!(Activation::leaky_relu(f64::NAN).is_err());
        assert!(Activation::softplus(0.0).is_err());
        assert!(Activation::relu().eval(f64::INFINITY).is_err());
        assert!(Activation::relu().subgrad(f64::NAN).is_err());
    }

    #[test]
    fn spec_round_trip() {
        for act in all_kinds() {
            let json = serde_json::to_string(&act.spec()).unwrap();
            let back: ActivationSpec = serde_json::from_str(&json).unwrap();
            let rebuilt = Activation::from_spec(&back).unwrap();
            assert_eq!(rebuilt, act);
        }
        let spec: ActivationSpec = serde_json::from_str(r#"{"kind":"leaky_relu","slope":0.3}"#).unwrap();
        assert_eq!(spec, ActivationSpec::LeakyRelu { slope: 0.3 });
    }

    #[test]
    fn verification_grid_passes_for_all_kinds() {
        let grid: Vec<f64> = (-6..=6).map(|i| i as f64 * 0.5).collect();
        for act in all_kinds() {
            let report = act.verify_unbounded_convex(&grid).unwrap();
            assert!(report.pass(), "violations for {:?}: {:?}", act.kind, report.violations);
            assert!(report.zero_at_origin);
            assert!(report.measured_alpha >= act.alpha - 1e-12);
            assert!(report.measured_beta <= act.beta + 1e-12);
        }
    }

    #[test]
    fn lipschitz_and_growth_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for act in all_kinds() {
            for _ in 0..10_000 {
                let mut t1: f64 = rng.gen_range(-100.0..100.0);
                let mut t2: f64 = rng.gen_range(-100.0..100.0);
                if t1 < t2 {
                    std::mem::swap(&mut t1, &mut t2);
                }
                let rise = act.eval(t1).unwrap() - act.eval(t2).unwrap();
                assert!(rise >= -1e-12);
                assert!(rise <= act.beta * (t1 - t2) + 1e-12);

                let u1 = t1.abs();
                let u2 = t2.abs();
                let (hi, lo) = if u1 >= u2 { (u1, u2) } else { (u2, u1) };
                let rise = act.eval(hi).unwrap() - act.eval(lo).unwrap();
                assert!(
                    rise >= act.alpha * (hi - lo) - 1e-12,
                    "growth violated for {:?} at ({hi}, {lo})",
                    act.kind
                );
            }
        }
    }

    #[test]
    fn subgrad_matches_finite_differences_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = 1e-6;
        for act in all_kinds() {
            for _ in 0..2_000 {
                let t: f64 = rng.gen_range(-50.0..50.0);
                if t.abs() < 1e-3 {
                    continue; // too close to the only possible kink
                }
                let fd = (act.eval(t + h).unwrap() - act.eval(t - h).unwrap()) / (2.0 * h);
                let sg = act.subgrad(t).unwrap();
                assert!(
                    (fd - sg).abs() < 1e-6,
                    "{:?} at t={t}: fd={fd}, subgrad={sg}",
                    act.kind
                );
                assert!((0.0..=act.beta + 1e-12).contains(&sg));
            }
        }
    }
}
