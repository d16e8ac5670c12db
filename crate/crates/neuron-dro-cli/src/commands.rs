//! The four subcommands. Each returns `Ok(())` or a [`Failure`] carrying
//! the process exit code; all terminal output goes through stdout except
//! the final error line, which `main` prints to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use neuron_dro::activations::Activation;
use neuron_dro::datagen::{self, BoundConstants, Dataset, DatasetMetadata};
use neuron_dro::diagnostics::{
    self, AmbiguityCheck, FinalBoundsReport, MarginPoint, SharpnessReport,
};
use neuron_dro::driver::{self, PreparedRun, RunReference, TraceRecord};
use neuron_dro::empirical::{ModelParams, RegularizedObjective};
use neuron_dro::linalg;
use neuron_dro::verify;

use crate::chart::{self, Series};
use crate::config::{load_config, OutputFormat};
use crate::{classify, Failure};

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// Sample a dataset from the config's generator and write `dataset.csv` plus
/// `metadata.json` (seed, planted model, measured covariate bound).
pub fn generate(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let mut gen = cfg.generator.clone();
    gen.activation = cfg.activation.clone();
    if let Some(s) = seed {
        gen.seed = s;
    }
    let out_dir = out.unwrap_or(&cfg.output_dir);
    ensure_dir(out_dir)?;

    let ds = datagen::generate(&gen).map_err(classify)?;
    let csv_path = out_dir.join("dataset.csv");
    ds.write_csv(&csv_path).map_err(classify)?;
    let meta_path = out_dir.join("metadata.json");
    write_json(&meta_path, &DatasetMetadata::describe(&gen, &ds))?;

    println!(
        "wrote {} ({} samples, dimension {})",
        csv_path.display(),
        ds.n(),
        ds.dim()
    );
    println!("wrote {}", meta_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Run summary written to `w_hat.json`.
#[derive(Debug, Serialize)]
struct TrainSummary {
    w_hat: Vec<f64>,
    zero_test_selected_origin: bool,
    iterations: usize,
    k_max: usize,
    nu: f64,
    nu0: f64,
    c1: f64,
    radius: f64,
    epsilon: f64,
    eta: f64,
    d0: f64,
    truncation_level: f64,
    bound_constants: BoundConstants,
    final_norm: f64,
    final_movement: Option<f64>,
    dist_to_star: Option<f64>,
}

/// Final sample reweighting written to `p_hat.json`.
#[derive(Debug, Serialize)]
struct FinalWeights<'a> {
    weights: &'a [f64],
}

/// Guarantee evaluation written to `diagnostics.json` when the dataset has
/// planted-model metadata.
#[derive(Debug, Serialize)]
struct DiagnosticsFile {
    sharpness: Option<SharpnessReport>,
    margin_sweep: Vec<MarginPoint>,
    ambiguity: AmbiguityCheck,
    final_bounds: FinalBoundsReport,
    pass: bool,
}

/// Train on a dataset CSV. Labels are truncated and the zero-candidate test
/// applied automatically; the planted model is read from `metadata.json`
/// next to the dataset when present.
pub fn train(
    config: &Path,
    dataset: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let act = Activation::from_spec(&cfg.activation).map_err(classify)?;
    let raw = Dataset::read_csv(dataset).map_err(classify)?;
    let meta = read_metadata(dataset)?;
    let w_star: Option<Vec<f64>> = meta.map(|m| m.w_star);

    let mut settings = cfg.algo.clone();
    if let Some(s) = seed {
        settings.seed = s;
    }
    let prepared = driver::prepare_run(&raw, &act, &settings, w_star.as_deref()).map_err(classify)?;
    let run = prepared.execute(&act).map_err(classify)?;
    let w_final =
        driver::zero_test(&prepared.dataset, &act, &prepared.config, &run.w_hat).map_err(classify)?;
    let zero_test_selected_origin = w_final != run.w_hat;

    let out_dir = out.unwrap_or(&cfg.output_dir);
    ensure_dir(out_dir)?;

    let dist_to_star = prepared
        .reference
        .as_ref()
        .map(|r| linalg::dist2(&w_final, &r.w_star));
    let summary = TrainSummary {
        w_hat: w_final.clone(),
        zero_test_selected_origin,
        iterations: run.trace.len(),
        k_max: prepared.config.k_max,
        nu: prepared.config.nu,
        nu0: prepared.config.nu0,
        c1: prepared.config.c1,
        radius: prepared.config.radius,
        epsilon: prepared.config.epsilon,
        eta: prepared.eta,
        d0: prepared.d0,
        truncation_level: prepared.level,
        bound_constants: prepared.bounds,
        final_norm: linalg::norm2(&w_final),
        final_movement: run.trace.last().map(|r| r.movement),
        dist_to_star,
    };

    let w_path = out_dir.join("w_hat.json");
    write_json(&w_path, &summary)?;
    let p_path = out_dir.join("p_hat.json");
    write_json(
        &p_path,
        &FinalWeights {
            weights: run.p_hat.as_slice(),
        },
    )?;
    let trace_path = out_dir.join("trace.csv");
    write_trace(&trace_path, &run.trace)?;

    println!("wrote {}", w_path.display());
    println!("wrote {}", p_path.display());
    println!("wrote {} ({} iterations)", trace_path.display(), run.trace.len());

    if let Some(reference) = &prepared.reference {
        let diag = diagnostics_file(&prepared, reference, &act, &w_final).map_err(classify)?;
        let diag_path = out_dir.join("diagnostics.json");
        let verdict = if diag.pass { "guarantees hold" } else { "GUARANTEES VIOLATED" };
        write_json(&diag_path, &diag)?;
        println!("wrote {} ({verdict})", diag_path.display());
    }
    match dist_to_star {
        Some(d) => println!("distance to planted model: {d:.6e}"),
        None => println!("no planted-model metadata; distance not evaluated"),
    }
    Ok(())
}

fn diagnostics_file(
    prepared: &PreparedRun,
    reference: &RunReference,
    act: &Activation,
    w_final: &[f64],
) -> neuron_dro::Result<DiagnosticsFile> {
    let obj = RegularizedObjective::new(&prepared.dataset, *act, prepared.config.nu)?;
    let w_star = ModelParams::new(reference.w_star.clone(), prepared.config.radius)?;
    let w_hat = ModelParams::new(w_final.to_vec(), prepared.config.radius)?;
    let margin_sweep =
        diagnostics::margin_sweep(&reference.p_star, &prepared.dataset, &reference.w_star)?;
    let ambiguity = diagnostics::check_ambiguity_radius(
        &w_star,
        &obj,
        reference.concentration,
        prepared.config.c1,
    )?;
    let final_bounds = diagnostics::final_bounds_report(
        &w_hat,
        &w_star,
        &obj,
        reference.concentration,
        prepared.config.c1,
        prepared.config.epsilon,
    )?;
    let pass = ambiguity.pass && final_bounds.pass();
    Ok(DiagnosticsFile {
        sharpness: prepared.sharpness,
        margin_sweep,
        ambiguity,
        final_bounds,
        pass,
    })
}

/// The planted model travels with the dataset, not the config: look for
/// `metadata.json` in the dataset's directory.
fn read_metadata(dataset: &Path) -> Result<Option<DatasetMetadata>, Failure> {
    let path = dataset
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .join("metadata.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)
        .map_err(|e| Failure::Data(format!("cannot read metadata {}: {e}", path.display())))?;
    let meta: DatasetMetadata = serde_json::from_str(&text)
        .map_err(|e| Failure::Data(format!("invalid metadata {}: {e}", path.display())))?;
    Ok(Some(meta))
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

/// Run the self-verification battery, one pass/fail line per suite.
pub fn verify(seed: Option<u64>, inject_perturbation: bool) -> Result<(), Failure> {
    let threads = suite_threads()?;
    let bias = if inject_perturbation { 1e-3 } else { 0.0 };
    let started = Instant::now();
    let results = verify::run_all_seeded(bias, threads, seed.unwrap_or(0));

    let mut failed = 0usize;
    for suite in &results {
        if suite.pass {
            println!("PASS {} ({} cases, {} ms)", suite.name, suite.cases, suite.millis);
        } else {
            failed += 1;
            println!("FAIL {} ({} cases, {} ms)", suite.name, suite.cases, suite.millis);
            for check in suite.checks.iter().filter(|c| !c.pass) {
                println!(
                    "  {}: {:.6e} exceeds tolerance {:.0e}",
                    check.label, check.value, check.tolerance
                );
            }
            if let Some(e) = &suite.error {
                println!("  aborted: {e}");
            }
        }
    }
    println!(
        "{}/{} suites passed in {} ms",
        results.len() - failed,
        results.len(),
        started.elapsed().as_millis()
    );
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{failed} verification suite(s) failed")))
    }
}

/// Suite parallelism: `NEURON_DRO_THREADS` caps it, otherwise the machine
/// decides.
fn suite_threads() -> Result<usize, Failure> {
    match std::env::var("NEURON_DRO_THREADS") {
        Ok(raw) => raw.trim().parse::<usize>().ok().filter(|&t| t >= 1).ok_or_else(|| {
            Failure::Config(format!(
                "NEURON_DRO_THREADS must be a positive integer, got {raw:?}"
            ))
        }),
        Err(std::env::VarError::NotPresent) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(2)),
        Err(e) => Err(Failure::Config(format!("NEURON_DRO_THREADS is unreadable: {e}"))),
    }
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Convergence-table row when the trace has planted-model columns.
#[derive(Debug, Serialize)]
struct ConvergenceRow {
    i: usize,
    a_total: f64,
    norm_w: f64,
    movement: f64,
    objective: f64,
    dist_to_star: Option<f64>,
    gap_lower_cum: Option<f64>,
    weighted_gap_cum: Option<f64>,
    gap_upper: Option<f64>,
}

/// Convergence-table row for traces without a planted model: the distance
/// and gap columns are omitted entirely.
#[derive(Debug, Serialize)]
struct BareConvergenceRow {
    i: usize,
    a_total: f64,
    norm_w: f64,
    movement: f64,
    objective: f64,
}

/// Summarize a trace CSV into `convergence.csv` and, when requested, a
/// `convergence.svg` line chart over the cumulative step-size axis.
pub fn report(trace: &Path, out: Option<&Path>, formats: &[OutputFormat]) -> Result<(), Failure> {
    let records = read_trace(trace)?;
    if records.is_empty() {
        return Err(Failure::Data(format!(
            "empty trace {}: nothing to report",
            trace.display()
        )));
    }
    let default_dir: PathBuf = trace
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let out_dir = out.unwrap_or(&default_dir);
    ensure_dir(out_dir)?;

    let has_reference = records.iter().any(|r| r.dist_to_star.is_some());
    let table_path = out_dir.join("convergence.csv");
    write_convergence_table(&table_path, &records, has_reference)?;
    println!("wrote {} ({} rows)", table_path.display(), records.len());

    if formats.contains(&OutputFormat::Svg) {
        let svg_path = out_dir.join("convergence.svg");
        fs::write(&svg_path, convergence_chart(&records, has_reference))
            .map_err(|e| Failure::Config(format!("cannot write {}: {e}", svg_path.display())))?;
        println!("wrote {}", svg_path.display());
    }
    Ok(())
}

fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, Failure> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Failure::Data(format!("cannot read trace {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for row in reader.deserialize() {
        let rec: TraceRecord =
            row.map_err(|e| Failure::Data(format!("invalid trace {}: {e}", path.display())))?;
        records.push(rec);
    }
    Ok(records)
}

fn write_convergence_table(
    path: &Path,
    records: &[TraceRecord],
    has_reference: bool,
) -> Result<(), Failure> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Failure::Config(format!("cannot write {}: {e}", path.display())))?;
    for rec in records {
        let result = if has_reference {
            writer.serialize(ConvergenceRow {
                i: rec.i,
                a_total: rec.a_total,
                norm_w: rec.norm_w,
                movement: rec.movement,
                objective: rec.objective,
                dist_to_star: rec.dist_to_star,
                gap_lower_cum: rec.gap_lower_cum,
                weighted_gap_cum: rec.weighted_gap_cum,
                gap_upper: rec.gap_upper,
            })
        } else {
            writer.serialize(BareConvergenceRow {
                i: rec.i,
                a_total: rec.a_total,
                norm_w: rec.norm_w,
                movement: rec.movement,
                objective: rec.objective,
            })
        };
        result.map_err(|e| Failure::Data(format!("cannot tabulate row {}: {e}", rec.i)))?;
    }
    writer
        .flush()
        .map_err(|e| Failure::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Distance-family curves over the cumulative step-size axis, which is
/// strictly increasing by construction.
fn convergence_chart(records: &[TraceRecord], has_reference: bool) -> String {
    let mut series = vec![Series {
        label: "parameter norm".to_string(),
        points: records.iter().map(|r| (r.a_total, r.norm_w)).collect(),
    }];
    if has_reference {
        series.push(Series {
            label: "distance to planted model".to_string(),
            points: records
                .iter()
                .filter_map(|r| r.dist_to_star.map(|d| (r.a_total, d)))
                .collect(),
        });
    }
    chart::line_chart(
        "convergence",
        "cumulative step size",
        "distance",
        &series,
    )
}

// ---------------------------------------------------------------------------
// Shared output helpers
// ---------------------------------------------------------------------------

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| {
        Failure::Config(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::Runtime(format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n")
        .map_err(|e| Failure::Config(format!("cannot write {}: {e}", path.display())))
}

fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<(), Failure> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Failure::Config(format!("cannot write {}: {e}", path.display())))?;
    for rec in trace {
        writer
            .serialize(rec)
            .map_err(|e| Failure::Runtime(format!("cannot serialize trace row {}: {e}", rec.i)))?;
    }
    writer
        .flush()
        .map_err(|e| Failure::Config(format!("cannot write {}: {e}", path.display())))
}
