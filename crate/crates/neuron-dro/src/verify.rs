//! Self-verification suites: every closed form the library ships is checked
//! here against an independent oracle (projected gradient ascent, direct
//! enumeration, or a re-derivation) on seeded random instances.
//!
//! The same suites back the command-line `verify` subcommand and the
//! integration tests, so there is a single source of truth for what
//! "numerically correct" means. Each suite returns its worst observed
//! deviation per labelled check; a suite passes when every deviation is
//! within its pinned tolerance.
//!
//! The `bias` argument is a harness self-test: a nonzero value is added to
//! every deviation before comparison, so the caller can confirm that an
//! injected error actually turns the report red.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::activations::Activation;
use crate::datagen::{self, Dataset, GeneratorConfig, LabelModel, Marginal};
use crate::driver::{self, AlgoSettings, C1Source};
use crate::empirical::{self, ModelParams, RegularizedObjective, WeightVector};
use crate::error::Result;
use crate::linalg::{self, RunningSum};
use crate::solvers::{self, DualStepProblem};

/// One labelled deviation with its tolerance.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub label: String,
    /// Worst observed deviation (absolute, or relative where the label says
    /// so).
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn new(label: &str, value: f64, tolerance: f64) -> Self {
        Check {
            label: label.to_string(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

/// Outcome of one verification suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub pass: bool,
    /// Number of random instances (or trace records) examined.
    pub cases: usize,
    pub checks: Vec<Check>,
    pub millis: u128,
    /// Populated when the suite aborted instead of finishing.
    pub error: Option<String>,
}

struct SuiteBody {
    cases: usize,
    checks: Vec<Check>,
}

type SuiteFn = fn(f64, u64) -> Result<SuiteBody>;

/// The full battery, in a stable order.
pub const SUITE_NAMES: [&str; 6] = [
    "qhat_agreement",
    "risk_agreement",
    "dual_step_agreement",
    "simplex_projection",
    "step_schedule",
    "gap_sandwich",
];

const SUITES: [(&str, SuiteFn); 6] = [
    ("qhat_agreement", suite_qhat_agreement),
    ("risk_agreement", suite_risk_agreement),
    ("dual_step_agreement", suite_dual_step_agreement),
    ("simplex_projection", suite_simplex_projection),
    ("step_schedule", suite_step_schedule),
    ("gap_sandwich", suite_gap_sandwich),
];

/// Run every suite with the default seed, at most `threads` at a time.
pub fn run_all(bias: f64, threads: usize) -> Vec<SuiteResult> {
    run_all_seeded(bias, threads, 0)
}

/// Run every suite, at most `threads` at a time, drawing instances from a
/// seeded stream so repeated invocations can exercise fresh cases. Results
/// keep the [`SUITE_NAMES`] order regardless of scheduling.
pub fn run_all_seeded(bias: f64, threads: usize, seed: u64) -> Vec<SuiteResult> {
    let threads = threads.clamp(1, SUITES.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SuiteResult>>> = Mutex::new(vec![None; SUITES.len()]);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= SUITES.len() {
                    break;
                }
                let (name, f) = SUITES[i];
                let result = run_suite(name, f, bias, seed);
                results.lock().unwrap()[i] = Some(result);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every suite slot is filled"))
        .collect()
}

fn run_suite(name: &str, f: SuiteFn, bias: f64, seed: u64) -> SuiteResult {
    let start = Instant::now();
    match f(bias, seed) {
        Ok(body) => SuiteResult {
            name: name.to_string(),
            pass: body.checks.iter().all(|c| c.pass),
            cases: body.cases,
            checks: body.checks,
            millis: start.elapsed().as_millis(),
            error: None,
        },
        Err(e) => SuiteResult {
            name: name.to_string(),
            pass: false,
            cases: 0,
            checks: Vec::new(),
            millis: start.elapsed().as_millis(),
            error: Some(e.to_string()),
        },
    }
}

/// Run one suite by name (`None` if the name is unknown).
pub fn run_one(name: &str, bias: f64) -> Option<SuiteResult> {
    let (n, f) = SUITES.iter().find(|(n, _)| *n == name)?;
    Some(run_suite(n, *f, bias, 0))
}

/// Stream position for case `i` of a suite: a fixed per-suite base keeps the
/// suites decorrelated, and the caller's seed shifts the whole stream.
fn instance_seed(base: u64, i: usize, seed: u64) -> u64 {
    base.wrapping_add(i as u64)
        .wrapping_add(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

// ---------------------------------------------------------------------------
// Shared instance generation
// ---------------------------------------------------------------------------

fn instance_activation(rng: &mut ChaCha8Rng) -> Activation {
    match rng.gen_range(0..3u8) {
        0 => Activation::relu(),
        1 => Activation::leaky_relu(0.25).expect("valid slope"),
        _ => Activation::softplus(1.0).expect("valid temperature"),
    }
}

/// A random evaluation point over a random dataset, with ν at least the
/// mean loss so the simple form of the worst-case reweighting is in scope.
fn random_instance(seed: u64) -> Result<(Dataset, ModelParams, Activation, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=50usize);
    let d = rng.gen_range(1..=4usize);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let labels: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let ds = Dataset::from_rows(rows, labels)?;
    let act = instance_activation(&mut rng);
    let w = ModelParams::new(datagen::sample_in_ball(&mut rng, d, 1.5), 1.5)?;
    let losses = empirical::losses(w.coeffs(), &ds, &act)?;
    let mean = empirical::expectation(&WeightVector::uniform(n), &losses)?;
    let nu = mean * (1.0 + rng.gen::<f64>()) + 0.01;
    Ok((ds, w, act, nu))
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Result<WeightVector> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
    let total: f64 = raw.iter().sum();
    WeightVector::new(raw.iter().map(|v| v / total).collect())
}

/// Random strictly interior weights, bounded away from zero so weighted
/// distances stay well conditioned.
fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Result<WeightVector> {
    let raw: Vec<f64> = (0..n).map(|_| 0.2 + rng.gen::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    WeightVector::new(raw.iter().map(|v| v / total).collect())
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

/// Worst-case reweighting: simple form and water-filling vs projected
/// gradient ascent, on 100 instances.
fn suite_qhat_agreement(bias: f64, seed: u64) -> Result<SuiteBody> {
    let mut dev_linf = 0.0f64;
    let mut dev_obj = 0.0f64;
    let mut dev_forms = 0.0f64;
    let cases = 100;
    for i in 0..cases {
        let (ds, w, act, nu) = random_instance(instance_seed(0xA11C_E000, i, seed))?;
        let obj = RegularizedObjective::new(&ds, act, nu)?;
        let closed = empirical::qhat_closed_form(&w, &obj)?;
        let general = empirical::qhat_general(&w, &obj)?;
        let (oracle_value, oracle_p) = solvers::brute_dual_max(&w, &obj, 1e-13)?;
        dev_linf = dev_linf
            .max(linf(closed.as_slice(), oracle_p.as_slice()))
            .max(linf(general.as_slice(), oracle_p.as_slice()));
        let closed_value = empirical::objective_l(&w, &closed, &obj)?;
        dev_obj = dev_obj.max((closed_value - oracle_value).abs());
        dev_forms = dev_forms.max(linf(closed.as_slice(), general.as_slice()));
    }
    Ok(SuiteBody {
        cases,
        checks: vec![
            Check::new("reweighting_linf_vs_oracle", dev_linf + bias, 1e-8),
            Check::new("objective_vs_oracle", dev_obj + bias, 1e-9),
            Check::new("simple_vs_waterfilling_linf", dev_forms + bias, 1e-10),
        ],
    })
}

/// Variance form of the robust risk vs the ascent oracle, on the same kind
/// of instances.
fn suite_risk_agreement(bias: f64, seed: u64) -> Result<SuiteBody> {
    let mut dev_value = 0.0f64;
    let mut dev_chi2 = 0.0f64;
    let cases = 100;
    for i in 0..cases {
        let (ds, w, act, nu) = random_instance(instance_seed(0x315B_2000, i, seed))?;
        let obj = RegularizedObjective::new(&ds, act, nu)?;
        let ev = empirical::risk_closed_form(&w, &obj)?;
        let (oracle_value, oracle_p) = solvers::brute_dual_max(&w, &obj, 1e-13)?;
        dev_value = dev_value.max((ev.value - oracle_value).abs());
        let oracle_chi2 = empirical::chi2(&oracle_p, obj.reference())?;
        dev_chi2 = dev_chi2.max((ev.chi2_to_reference - oracle_chi2).abs());
    }
    Ok(SuiteBody {
        cases,
        checks: vec![
            Check::new("risk_vs_oracle", dev_value + bias, 1e-10),
            Check::new("chi2_vs_oracle", dev_chi2 + bias, 1e-10),
        ],
    })
}

/// Dual proximal step (KKT + bisection) vs projected gradient ascent on
/// instances with scale factors spread over six orders of magnitude.
fn suite_dual_step_agreement(bias: f64, seed: u64) -> Result<SuiteBody> {
    let mut dev_linf = 0.0f64;
    let mut dev_obj = 0.0f64;
    let cases = 100;
    for i in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(0xD0A1_5000, i, seed));
        let n = rng.gen_range(2..=50usize);
        let losses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let log_uniform =
            |rng: &mut ChaCha8Rng| 10f64.powf(rng.gen_range(-3.0..3.0));
        let a_i = log_uniform(&mut rng);
        let prox_weight = log_uniform(&mut rng);
        let nu = log_uniform(&mut rng);
        let p0 = WeightVector::uniform(n);
        let p_prev = random_simplex(&mut rng, n)?;
        let prob = DualStepProblem {
            losses: &losses,
            a_i,
            prox_weight,
            nu,
            p0: &p0,
            p_prev: &p_prev,
        };
        let closed = solvers::dual_step(&prob)?;
        let (oracle_value, oracle_p) = solvers::brute_prox_max(&prob, 1e-13)?;
        dev_linf = dev_linf.max(linf(closed.as_slice(), oracle_p.as_slice()));
        dev_obj = dev_obj.max((prob.objective(&closed)? - oracle_value).abs());
    }
    Ok(SuiteBody {
        cases,
        checks: vec![
            Check::new("step_linf_vs_oracle", dev_linf + bias, 1e-8),
            Check::new("step_objective_vs_oracle", dev_obj + bias, 1e-9),
        ],
    })
}

/// Weighted simplex projection: feasibility, idempotence, fixed points, and
/// optimality against random feasible competitors.
fn suite_simplex_projection(bias: f64, seed: u64) -> Result<SuiteBody> {
    let mut dev_feasible = 0.0f64;
    let mut dev_idempotent = 0.0f64;
    let mut dev_fixed_point = 0.0f64;
    let mut dev_optimal = 0.0f64;
    let cases = 200;
    let weighted_dist_sq = |a: &[f64], b: &[f64], w: &WeightVector| -> f64 {
        linalg::sum_compensated(
            (0..a.len()).map(|j| (a[j] - b[j]) * (a[j] - b[j]) / w[j]),
        )
    };
    for i in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(0x51_3000, i, seed));
        let n = rng.gen_range(1..=30usize);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let weights = if rng.gen::<bool>() {
            WeightVector::uniform(n)
        } else {
            random_weights(&mut rng, n)?
        };
        let p = solvers::simplex_project(&v, &weights)?;

        let sum: f64 = linalg::sum_compensated(p.iter());
        let min = p.iter().fold(f64::INFINITY, f64::min);
        dev_feasible = dev_feasible.max((sum - 1.0).abs()).max((-min).max(0.0));

        let again = solvers::simplex_project(p.as_slice(), &weights)?;
        dev_idempotent = dev_idempotent.max(linf(again.as_slice(), p.as_slice()));

        let q = random_simplex(&mut rng, n)?;
        let fixed = solvers::simplex_project(q.as_slice(), &weights)?;
        dev_fixed_point = dev_fixed_point.max(linf(fixed.as_slice(), q.as_slice()));

        let d_opt = weighted_dist_sq(p.as_slice(), &v, &weights);
        for _ in 0..50 {
            let competitor = random_simplex(&mut rng, n)?;
            let d_comp = weighted_dist_sq(competitor.as_slice(), &v, &weights);
            dev_optimal = dev_optimal.max(d_opt - d_comp);
        }
    }
    Ok(SuiteBody {
        cases,
        checks: vec![
            Check::new("feasibility", dev_feasible + bias, 1e-12),
            Check::new("idempotence_linf", dev_idempotent + bias, 1e-12),
            Check::new("simplex_fixed_point_linf", dev_fixed_point + bias, 1e-12),
            Check::new("optimality_margin", dev_optimal + bias, 1e-9),
        ],
    })
}

/// Step-size schedule: the running cumulative sum against its closed form,
/// and the two growth inequalities the analysis needs, at every iteration.
/// Fully deterministic, so the stream seed is unused.
fn suite_step_schedule(bias: f64, _seed: u64) -> Result<SuiteBody> {
    // (ν, c₁, κ, G, ν₀, k_max): moderate rates run the full 10⁴ horizon,
    // the aggressive rate stops before (1+η)^k overflows.
    let combos: [(f64, f64, f64, f64, f64, usize); 3] = [
        (1.0, 8.0, 50.0, 50.0, 1.0, 10_000),
        (0.5, 2.0, 3.0, 7.0, 0.2, 10_000),
        (2.0, 16.0, 0.5, 1.5, 3.0, 100),
    ];
    let mut dev_closed = 0.0f64;
    let mut dev_ineq_g = 0.0f64;
    let mut dev_ineq_kappa = 0.0f64;
    let mut cases = 0;
    for &(nu, c1, kappa, g, nu0, k_max) in &combos {
        let mut acc = RunningSum::new();
        let mut a_total_prev = 0.0f64;
        for i in 1..=k_max {
            let a_i = driver::step_size(i, nu, c1, kappa, g, nu0)?;
            acc.add(a_i);
            let a_total = acc.value();
            let closed = driver::cumulative_steps_closed_form(i, nu, c1, kappa, g, nu0);
            dev_closed = dev_closed.max((a_total - closed).abs() / closed.abs());

            let lhs_g = 2.0 * g * g * a_i * a_i;
            let rhs_g = (1.0 + 0.5 * c1 * a_total) * (nu0 + nu * a_total_prev);
            dev_ineq_g = dev_ineq_g.max((lhs_g - rhs_g) / rhs_g);

            let lhs_k = 2.0 * kappa * kappa * a_i * a_i;
            let rhs_k =
                (1.0 + 0.5 * c1 * a_total) * (1.0 + 0.5 * c1 * a_total_prev) / 4.0;
            dev_ineq_kappa = dev_ineq_kappa.max((lhs_k - rhs_k) / rhs_k);

            a_total_prev = a_total;
            cases += 1;
        }
    }
    Ok(SuiteBody {
        cases,
        checks: vec![
            Check::new("cumulative_vs_closed_rel", dev_closed + bias, 1e-12),
            Check::new("growth_inequality_g_rel", dev_ineq_g + bias, 1e-12),
            Check::new("growth_inequality_kappa_rel", dev_ineq_kappa + bias, 1e-12),
        ],
    })
}

/// A short instrumented run: the weighted gap must sit between its lower
/// and upper envelopes, and the per-iterate descent inequality must hold.
fn suite_gap_sandwich(bias: f64, seed: u64) -> Result<SuiteBody> {
    let gen = GeneratorConfig {
        marginal: Marginal::GaussianIsotropic,
        d: 2,
        n: 60,
        w_star: vec![0.8, -0.4],
        radius: 1.2,
        label_model: LabelModel::GaussianNoise { stddev: 0.05 },
        seed: 33 ^ seed,
        concentration: 1.0,
        clip_radius: Some(3.0),
        activation: crate::activations::ActivationSpec::Relu,
    };
    let raw = datagen::generate(&gen)?;
    let act = Activation::relu();
    let settings = AlgoSettings {
        nu: None,
        nu0: None,
        c1: None,
        c1_source: C1Source::Estimated,
        radius: 1.2,
        epsilon: 0.01,
        k_max: Some(1500),
        bound_mode: datagen::BoundMode::Tight,
        record_diagnostics: true,
        seed: 5 ^ seed,
        c_m: 1.0,
        concentration: 1.0,
        sharpness_trials: 300,
    };
    let prepared = driver::prepare_run(&raw, &act, &settings, Some(&gen.w_star))?;
    let out = prepared.execute(&act)?;
    let mut dev_lower = 0.0f64;
    let mut dev_upper = 0.0f64;
    let mut dev_aux = 0.0f64;
    for rec in &out.trace {
        let cum = rec.weighted_gap_cum.expect("diagnostics on");
        dev_lower = dev_lower.max(rec.gap_lower_cum.expect("diagnostics on") - cum);
        dev_upper = dev_upper.max(cum - rec.gap_upper.expect("diagnostics on"));
        dev_aux = dev_aux.max(-rec.aux_margin.expect("diagnostics on"));
    }
    Ok(SuiteBody {
        cases: out.trace.len(),
        checks: vec![
            Check::new("lower_envelope_violation", dev_lower + bias, 1e-6),
            Check::new("upper_envelope_violation", dev_upper + bias, 1e-6),
            Check::new("descent_inequality_violation", dev_aux + bias, 1e-6),
        ],
    })
}
