//! Batch front end: `synth`, `localize`, `evaluate` and `report`.
//!
//! Every command returns a process exit code: 0 on success, 1 on input,
//! configuration or I/O errors, 2 on bad command-line usage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::evaluation::{
    read_results, recall_from_errors, write_results, EvalError, LocalizationInputs, Localizer, Mode, PipelineConfig,
    RecallReport, ResultRow, Thresholds,
};
use crate::synth::{generate_scene, load_oracle, write_benchmark, SynthConfig, SynthError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("{0}")]
    Input(String),
}

fn file_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::File { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Parser)]
#[command(name = "featloc", version, about = "Visual localization on feature hierarchies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark directory.
    Synth(SynthArgs),
    /// Localize every query of a benchmark and write a results CSV.
    Localize(LocalizeArgs),
    /// Recall table of a results CSV against an oracle.
    Evaluate(EvaluateArgs),
    /// Ablation table over several results files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    /// Benchmark directory written by `synth`.
    #[arg(long)]
    pub bench: PathBuf,
    /// Output directory for `results_<mode>.csv` and `effective_config.toml`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "rpa")]
    pub mode: Mode,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Pipeline configuration (TOML, or JSON by extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub oracle: PathBuf,
    /// Threshold levels as `d,deg;d,deg;...`.
    #[arg(long)]
    pub thresholds: Option<Thresholds>,
    /// Summary JSON path; defaults to the results path with `.summary.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    #[arg(long)]
    pub thresholds: Option<Thresholds>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write the markdown report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Localize(a) => cmd_localize(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Report(a) => cmd_report(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let config = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| file_error(p, e))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| file_error(p, e))?
        }
        None => SynthConfig::default(),
    };
    config.validate()?;
    let bench = generate_scene(&config)?;
    write_benchmark(&bench, &args.out)?;
    let eps: Vec<String> = bench.oracle.epsilon_render.iter().map(|(s, e)| format!("{s}:{e:.4}")).collect();
    println!(
        "wrote {}: {} keyframes, {} points, {} queries, scene diameter {:.3}, render floor {}",
        args.out.display(),
        bench.map.keyframes.len(),
        bench.map.points.len(),
        bench.oracle.queries.len(),
        bench.oracle.scene_diameter,
        eps.join(" ")
    );
    Ok(())
}

/// Reads a pipeline configuration; `.json` files are JSON, anything else TOML.
pub fn load_pipeline_config(path: &Path) -> Result<PipelineConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| file_error(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| file_error(path, e))
    } else {
        toml::from_str(&text).map_err(|e| file_error(path, e))
    }
}

pub fn results_file_name(mode: Mode) -> String {
    format!("results_{mode}.csv")
}

pub fn cmd_localize(args: &LocalizeArgs) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(p) => load_pipeline_config(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(k) = args.top_k {
        config.top_k = k;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let (inputs, oracle) = LocalizationInputs::load(&args.bench)?;
    let localizer = Localizer::new(inputs, config.clone())?;
    let mut queries: Vec<_> = oracle.queries.iter().map(|q| (q.id, Some(q.gt_pose))).collect();
    queries.sort_by_key(|q| q.0);
    let outcomes = localizer.localize_all(&queries, args.mode, args.threads)?;

    std::fs::create_dir_all(&args.out).map_err(|e| file_error(&args.out, e))?;
    let rows: Vec<ResultRow> = outcomes.iter().map(ResultRow::from_outcome).collect();
    let results = args.out.join(results_file_name(args.mode));
    write_results(&rows, &results)?;
    let cfg_path = args.out.join("effective_config.toml");
    let text = toml::to_string(&config).map_err(|e| file_error(&cfg_path, e))?;
    std::fs::write(&cfg_path, text).map_err(|e| file_error(&cfg_path, e))?;

    let failed = outcomes.iter().filter(|o| o.failure.is_some()).count();
    println!("{}: {} queries, {} failed, results in {}", args.mode.label(), rows.len(), failed, results.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSummary {
    pub label: String,
    pub total: usize,
    pub missing: usize,
    pub localized: Vec<usize>,
    pub percentages: Vec<f64>,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationSummary {
    pub thresholds: Vec<(f64, f64)>,
    pub modes: BTreeMap<Mode, ModeSummary>,
}

/// Recall per mode over the oracle's query set. Queries without a row count
/// as failures; rows naming unknown or repeated queries are rejected.
pub fn evaluate_rows(
    rows: &[ResultRow],
    expected: &BTreeSet<u64>,
    thresholds: &Thresholds,
) -> Result<EvaluationSummary, CliError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyInput.into());
    }
    let mut by_mode: BTreeMap<Mode, BTreeMap<u64, Option<(f64, f64)>>> = BTreeMap::new();
    for r in rows {
        if !expected.contains(&r.query_id) {
            return Err(CliError::Input(format!("query {} is not in the oracle", r.query_id)));
        }
        if by_mode.entry(r.mode).or_default().insert(r.query_id, r.errors()).is_some() {
            return Err(CliError::Input(format!("query {} appears twice for mode {}", r.query_id, r.mode)));
        }
    }
    let mut modes = BTreeMap::new();
    for (mode, found) in by_mode {
        let errors: Vec<_> = expected.iter().map(|id| found.get(id).copied().flatten()).collect();
        let report = recall_from_errors(&errors, thresholds)?;
        modes.insert(mode, mode_summary(mode, &report, expected.len() - found.len()));
    }
    Ok(EvaluationSummary { thresholds: thresholds.0.clone(), modes })
}

fn mode_summary(mode: Mode, r: &RecallReport, missing: usize) -> ModeSummary {
    ModeSummary {
        label: mode.label().to_string(),
        total: r.total,
        missing,
        localized: r.localized.clone(),
        percentages: r.percentages.clone(),
        summary: r.summary(),
    }
}

fn threshold_header(t: &Thresholds) -> String {
    t.0.iter().map(|(d, a)| format!("({d}, {a}°)")).collect::<Vec<_>>().join(" / ")
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let thresholds = args.thresholds.clone().unwrap_or_default();
    let oracle = load_oracle(&args.oracle).map_err(|e| file_error(&args.oracle, e))?;
    let rows = read_results(&args.results)?;
    if rows.is_empty() {
        return Err(file_error(&args.results, "no result rows"));
    }
    let expected: BTreeSet<u64> = oracle.queries.iter().map(|q| q.id).collect();
    let summary = evaluate_rows(&rows, &expected, &thresholds)?;

    println!("| Method | {} |", threshold_header(&thresholds));
    println!("|---|---|");
    for s in summary.modes.values() {
        println!("| {} | {} |", s.label, s.summary);
        if s.missing > 0 {
            println!("warning: {} has {} queries without results, counted as failures", s.label, s.missing);
        }
    }
    let out = args.out.clone().unwrap_or_else(|| args.results.with_extension("summary.json"));
    let text = serde_json::to_string_pretty(&summary).map_err(|e| file_error(&out, e))?;
    std::fs::write(&out, text).map_err(|e| file_error(&out, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub source: String,
    pub mode: Mode,
    pub queries: usize,
    pub percentages: Vec<f64>,
    pub mean_inliers: Option<f64>,
    pub convergence_rate: Option<f64>,
}

/// Ablation table rows, one per (file, mode), plus warnings about query
/// sets that differ between rows.
pub fn build_report(
    sets: &[(String, Vec<ResultRow>)],
    thresholds: &Thresholds,
) -> Result<(Vec<ReportRow>, Vec<String>), CliError> {
    let mut rows = Vec::new();
    let mut ids: Vec<(String, BTreeSet<u64>)> = Vec::new();
    for (name, results) in sets {
        let mut modes: Vec<Mode> = results.iter().map(|r| r.mode).collect();
        modes.sort();
        modes.dedup();
        if modes.is_empty() {
            return Err(CliError::Input(format!("{name}: no result rows")));
        }
        for mode in modes {
            let subset: Vec<&ResultRow> = results.iter().filter(|r| r.mode == mode).collect();
            let errors: Vec<_> = subset.iter().map(|r| r.errors()).collect();
            let report = recall_from_errors(&errors, thresholds)?;
            let inl: Vec<f64> = subset.iter().filter_map(|r| r.inliers).map(|v| v as f64).collect();
            let conv: Vec<bool> = subset.iter().filter_map(|r| r.converged).collect();
            rows.push(ReportRow {
                source: name.clone(),
                mode,
                queries: subset.len(),
                percentages: report.percentages,
                mean_inliers: (!inl.is_empty()).then(|| inl.iter().sum::<f64>() / inl.len() as f64),
                convergence_rate: (!conv.is_empty())
                    .then(|| conv.iter().filter(|c| **c).count() as f64 / conv.len() as f64),
            });
            ids.push((format!("{name} ({mode})"), subset.iter().map(|r| r.query_id).collect()));
        }
    }
    let mut warnings = Vec::new();
    if let Some((first_name, first)) = ids.first() {
        for (name, set) in &ids[1..] {
            if set != first {
                let only_here = set.difference(first).count();
                let only_there = first.difference(set).count();
                warnings.push(format!(
                    "query set of {name} differs from {first_name}: {only_here} extra, {only_there} missing"
                ));
            }
        }
    }
    Ok((rows, warnings))
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

pub fn render_report(rows: &[ReportRow], warnings: &[String], thresholds: &Thresholds) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| Method | {} | Queries | Mean inliers | Converged |", threshold_header(thresholds));
    let _ = writeln!(s, "|---|---|---|---|---|");
    for r in rows {
        let pct = r.percentages.iter().map(|p| format!("{p:.1}")).collect::<Vec<_>>().join(" / ");
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            r.mode.label(),
            pct,
            r.queries,
            fmt_opt(r.mean_inliers, 1),
            r.convergence_rate.map_or_else(|| "-".to_string(), |c| format!("{:.1}%", 100.0 * c)),
        );
    }
    if !warnings.is_empty() {
        let _ = writeln!(s);
        for w in warnings {
            let _ = writeln!(s, "warning: {w}");
        }
    }
    s
}

pub fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let thresholds = args.thresholds.clone().unwrap_or_default();
    let mut sets = Vec::with_capacity(args.files.len());
    for f in &args.files {
        if !f.exists() {
            return Err(file_error(f, "no such file"));
        }
        sets.push((f.display().to_string(), read_results(f)?));
    }
    let (rows, warnings) = build_report(&sets, &thresholds)?;
    let md = render_report(&rows, &warnings, &thresholds);
    match &args.out {
        Some(p) => std::fs::write(p, &md).map_err(|e| file_error(p, e))?,
        None => print!("{md}"),
    }
    if let Some(p) = &args.csv {
        let mut w = csv::Writer::from_path(p).map_err(|e| file_error(p, e))?;
        let mut header = vec!["source".to_string(), "mode".to_string(), "queries".to_string()];
        header.extend((0..thresholds.0.len()).map(|i| format!("recall_{i}")));
        header.extend(["mean_inliers".to_string(), "convergence_rate".to_string()]);
        w.write_record(&header).map_err(|e| file_error(p, e))?;
        for r in &rows {
            let mut rec = vec![r.source.clone(), r.mode.to_string(), r.queries.to_string()];
            rec.extend(r.percentages.iter().map(|v| v.to_string()));
            rec.push(r.mean_inliers.map_or_else(String::new, |v| v.to_string()));
            rec.push(r.convergence_rate.map_or_else(String::new, |v| v.to_string()));
            w.write_record(&rec).map_err(|e| file_error(p, e))?;
        }
        w.flush().map_err(|e| file_error(p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: u64, mode: Mode, errs: Option<(f64, f64)>) -> ResultRow {
        ResultRow {
            query_id: id,
            mode,
            localized_25: 0,
            localized_50: 0,
            localized_500: 0,
            trans_err: errs.map(|e| e.0),
            rot_err: errs.map(|e| e.1),
            inliers: Some(10 + id as usize),
            converged: Some(id.is_multiple_of(2)),
        }
    }

    #[test]
    fn evaluate_hand_fixture_and_missing_queries() {
        let rows = vec![
            row(0, Mode::Rpa, Some((0.1, 1.0))),
            row(1, Mode::Rpa, Some((0.4, 3.0))),
            row(2, Mode::Rpa, Some((6.0, 20.0))),
        ];
        let expected: BTreeSet<u64> = [0, 1, 2].into();
        let s = evaluate_rows(&rows, &expected, &Thresholds::default()).unwrap();
        assert_eq!(s.modes[&Mode::Rpa].summary, "33.3 / 66.7 / 66.7");

        let four: BTreeSet<u64> = [0, 1, 2, 3].into();
        let s = evaluate_rows(&rows, &four, &Thresholds::default()).unwrap();
        assert_eq!(s.modes[&Mode::Rpa].missing, 1);
        assert_eq!(s.modes[&Mode::Rpa].summary, "25.0 / 50.0 / 50.0");

        assert!(evaluate_rows(&[], &expected, &Thresholds::default()).is_err());
        let unknown = vec![row(9, Mode::Ra, None)];
        assert!(evaluate_rows(&unknown, &expected, &Thresholds::default()).is_err());
        let twice = vec![row(0, Mode::Ra, None), row(0, Mode::Ra, None)];
        assert!(evaluate_rows(&twice, &expected, &Thresholds::default()).is_err());
    }

    #[test]
    fn report_layout_and_warnings() {
        let t = Thresholds::default();
        let a = ("a.csv".to_string(), vec![row(0, Mode::Ra, Some((0.1, 1.0))), row(1, Mode::Ra, None)]);
        let b = ("b.csv".to_string(), vec![row(0, Mode::Rp, Some((0.1, 1.0))), row(1, Mode::Rp, Some((1.0, 1.0)))]);
        let c = ("c.csv".to_string(), vec![row(0, Mode::Rpa, Some((0.1, 1.0)))]);
        let (rows, warnings) = build_report(&[a.clone(), b, c], &t).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].percentages, vec![50.0, 50.0, 50.0]);
        assert_eq!(rows[1].mean_inliers, Some(10.5));
        assert_eq!(rows[0].convergence_rate, Some(0.5));
        assert_eq!(warnings.len(), 1);
        let md = render_report(&rows, &warnings, &t);
        assert!(md.contains("| R+A | 50.0 / 50.0 / 50.0 | 2 | 10.5 | 50.0% |"));
        assert!(md.contains("warning: query set of c.csv (rpa)"));

        let (single, w) = build_report(&[a], &t).unwrap();
        assert_eq!(single.len(), 1);
        assert!(w.is_empty());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_from_args(["featloc", "localize"]), 2);
        assert_eq!(run_from_args(["featloc", "bogus"]), 2);
        assert_eq!(run_from_args(["featloc", "localize", "--bench", "b", "--out", "o", "--mode", "xyz"]), 2);
    }
}
