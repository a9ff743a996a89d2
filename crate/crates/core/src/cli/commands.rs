use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::config::{Levels, RunConfig};
use super::gradcheck::{run_grad_check, GRAD_TOLERANCE};
use super::selection::CaseSelection;
use super::{
    CliError, CliResult, CompareArgs, ExportArgs, GenDataArgs, GradCheckArgs, ReproduceArgs, TrainArgs, OUT_ENV,
};
use crate::autodiff::Tensor;
use crate::container::checksum;
use crate::dataset::{Dataset, Extrema, GenerateOptions};
use crate::doe::ParamVector;
use crate::error::{Error, Result};
use crate::evaluation::{build_comparison, export_case, scatter_csv, scatter_series, ExportedImage, Panel};
use crate::networks::{load_checkpoint, save_checkpoint};
use crate::trainers::{ae_knn_predict, run_training, LatentStore, RunTiming, TrainConfig, TrainReport, Variant};

const REPORT_SUFFIX: &str = ".report.jsonl";
const TIMING_SUFFIX: &str = ".timing.json";

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> CliResult<()> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| Error::io("<stdout>", e).into())
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// `--out` flag, then the config file, then `$STRESS_BD_OUT`.
fn resolve_out(flag: Option<&PathBuf>, cfg: &RunConfig) -> CliResult<PathBuf> {
    if let Some(p) = flag.or(cfg.out.as_ref()) {
        return Ok(p.clone());
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(CliError::usage(format!(
            "no output directory: pass --out or set {OUT_ENV}"
        ))),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// File stem shared by a run's report, timing and weight files.
pub fn report_stem(variant: Variant, seed: u64) -> String {
    format!("{variant}_seed{seed}")
}

fn generate_options(cfg: &RunConfig, seed: u64, levels: Option<&Levels>) -> Result<GenerateOptions> {
    let mut opts = GenerateOptions {
        seed,
        ..cfg.generate.clone()
    };
    if let Some(levels) = levels {
        opts.grid = levels.grid()?;
        // Keep the default 80/20 ratio when the grid size changes, rounded
        // down so a stratified split stays even across layers.
        if opts.n_train == GenerateOptions::default().n_train {
            let layers = if opts.stratified { opts.grid.layers.len().max(1) } else { 1 };
            opts.n_train = opts.grid.len() * 4 / 5 / layers * layers;
        }
    }
    Ok(opts)
}

fn summarize_dataset(ds: &Dataset, bytes: &[u8], out: &mut dyn Write) -> CliResult<()> {
    let m = &ds.manifest;
    say(
        out,
        format!("{} cases ({}/layer)", ds.len(), m.grid.cases_per_layer()),
    )?;
    say(
        out,
        format!(
            "split: {} train / {} test (seed {}, {})",
            m.train_indices.len(),
            m.test_indices.len(),
            m.seed,
            if m.stratified { "stratified by layer" } else { "unstratified" }
        ),
    )?;
    say(out, "per-layer stress extrema (MPa):")?;
    for (layer, e) in &m.per_layer {
        say(out, format!("  {:<9} min {:>10.4}  max {:>10.4}", layer.name(), e.min, e.max))?;
    }
    say(out, format!("checksum {:016x}", checksum(bytes)))
}

pub fn cmd_gen_data(args: &GenDataArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = load_config(args.config.as_deref())?;
    let opts = generate_options(&cfg, args.seed, args.levels.as_ref())?;
    let ds = Dataset::generate(&opts)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let bytes = ds.to_bytes()?;
    fs::write(&args.out, &bytes).map_err(|e| Error::io(&args.out, e))?;
    summarize_dataset(&ds, &bytes, out)?;
    say(out, format!("wrote {}", args.out.display()))
}

fn timing_json(t: &RunTiming) -> Result<String> {
    serde_json::to_string_pretty(t).map_err(|e| Error::Format(e.to_string()))
}

fn timing_path(report: &Path) -> PathBuf {
    let name = report.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name.strip_suffix(REPORT_SUFFIX).unwrap_or(name);
    report.with_file_name(format!("{stem}{TIMING_SUFFIX}"))
}

fn read_timing(report: &Path) -> Option<RunTiming> {
    let text = fs::read_to_string(timing_path(report)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Which checkpoint iterations get a weight file.
#[derive(Clone, Copy)]
enum WeightPolicy {
    Every,
    FinalOnly,
}

struct RunFiles {
    report: PathBuf,
}

fn train_one(
    ds: &Dataset,
    config: &TrainConfig,
    dir: &Path,
    weights: WeightPolicy,
) -> Result<(TrainReport, RunFiles)> {
    let stem = report_stem(config.variant, config.seed);
    let weight_dir = dir.join("weights");
    create_dir(&weight_dir)?;
    let last = config.checkpoints.last().copied();
    let outcome = run_training(ds, config, |iteration, net| {
        if matches!(weights, WeightPolicy::Every) || Some(iteration) == last {
            let path = weight_dir.join(format!("{stem}_it{iteration:06}.weights"));
            save_checkpoint(&path, net, config.variant.name(), iteration, config.seed)?;
        }
        Ok(())
    })?;
    let report = dir.join(format!("{stem}{REPORT_SUFFIX}"));
    outcome.report.write(&report)?;
    write_text(&timing_path(&report), &timing_json(&outcome.report.timing)?)?;
    Ok((outcome.report, RunFiles { report }))
}

fn describe_run(report: &TrainReport, out: &mut dyn Write) -> CliResult<()> {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
    say(out, format!("{} seed {}:", report.variant, report.seed))?;
    say(out, "  iteration  train_ssd  test_ssd   recon_ssd  loss")?;
    for c in &report.checkpoints {
        say(
            out,
            format!(
                "  {:>9}  {:<9}  {:.6}   {:<9}  {:.6}",
                c.iteration,
                fmt(c.train_ssd),
                c.test_ssd,
                fmt(c.recon_ssd),
                c.train_loss.total
            ),
        )?;
    }
    let t = &report.timing;
    say(
        out,
        format!(
            "  time {:.1}s (k-means {:.1}s over {} recomputes = {:.0}%, evaluation {:.1}s)",
            t.total_seconds,
            t.kmeans_seconds,
            report.kmeans_calls,
            100.0 * t.kmeans_seconds / t.total_seconds.max(1e-12),
            t.eval_seconds
        ),
    )
}

fn load_dataset(flag: Option<&PathBuf>, cfg: &RunConfig) -> CliResult<Dataset> {
    let path = flag
        .or(cfg.data.as_ref())
        .ok_or_else(|| CliError::usage("no dataset: pass --data or set [paths] data"))?;
    Ok(Dataset::load(path)?)
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = load_config(args.config.as_deref())?;
    let mut train = cfg.train.clone();
    match &args.variant {
        Some(v) => train.variant = v.parse()?,
        None if cfg.variant_set => {}
        None => return Err(CliError::usage("no variant: pass --variant or set [train] variant")),
    }
    train.seed = args.seed;
    if let Some(n) = args.iterations {
        train.total_iterations = n;
        if args.checkpoints.is_none() {
            train.checkpoints.retain(|&c| c <= n);
            if n > 0 && train.checkpoints.last() != Some(&n) {
                train.checkpoints.push(n);
            }
        }
    }
    if let Some(c) = &args.checkpoints {
        train.checkpoints = c.clone();
    }
    train.validate()?;
    let ds = load_dataset(args.data.as_ref(), &cfg)?;
    let dir = resolve_out(args.out.as_ref(), &cfg)?;
    create_dir(&dir)?;
    let (report, files) = train_one(&ds, &train, &dir, WeightPolicy::Every)?;
    describe_run(&report, out)?;
    say(out, format!("wrote {}", files.report.display()))
}

fn print_table(csv: &str, out: &mut dyn Write) -> CliResult<()> {
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0))
        .collect();
    for r in rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        say(out, line.join("  ").trim_end())?;
    }
    Ok(())
}

/// Writes `comparison.csv` and `scatter.csv` (deterministic), plus
/// `comparison_timed.csv` when every report has a timing file.
fn write_comparison(reports: &[TrainReport], paths: &[PathBuf], dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    let table = build_comparison(reports, &[])?;
    create_dir(dir)?;
    let csv = table.to_csv(false);
    write_text(&dir.join("comparison.csv"), &csv)?;
    write_text(&dir.join("scatter.csv"), &scatter_csv(&scatter_series(reports)))?;

    let timings: Option<Vec<RunTiming>> = paths.iter().map(|p| read_timing(p)).collect();
    let shown = match &timings {
        Some(t) => {
            let secs: Vec<f64> = t.iter().map(|t| t.total_seconds).collect();
            let timed = build_comparison(reports, &secs)?.to_csv(true);
            write_text(&dir.join("comparison_timed.csv"), &timed)?;
            timed
        }
        None => csv,
    };
    print_table(&shown, out)?;
    if let Some(t) = &timings {
        let dc: Vec<&RunTiming> = reports
            .iter()
            .zip(t)
            .filter(|(r, _)| r.variant == Variant::DcBd)
            .map(|(_, t)| t)
            .collect();
        if !dc.is_empty() {
            let km: f64 = dc.iter().map(|t| t.kmeans_seconds).sum();
            let total: f64 = dc.iter().map(|t| t.total_seconds).sum();
            say(
                out,
                format!("dc_bd k-means share of training time: {:.0}%", 100.0 * km / total.max(1e-12)),
            )?;
        }
    }
    say(out, format!("wrote {}", dir.join("comparison.csv").display()))
}

pub fn cmd_compare(args: &CompareArgs, out: &mut dyn Write) -> CliResult<()> {
    if args.reports.is_empty() {
        return Err(CliError::usage("compare needs at least one --reports file"));
    }
    let dir = resolve_out(args.out.as_ref(), &RunConfig::default())?;
    let reports = args
        .reports
        .iter()
        .map(|p| TrainReport::read(p))
        .collect::<Result<Vec<_>>>()?;
    write_comparison(&reports, &args.reports, &dir, out)
}

#[derive(Serialize)]
struct ExportCase {
    case: usize,
    params: ParamVector,
    split: &'static str,
    /// Stress range (MPa) that maps to pixel values 0 and 1.
    scale: Extrema,
    images: Vec<ExportedImage>,
}

pub fn cmd_export(args: &ExportArgs, out: &mut dyn Write) -> CliResult<()> {
    let ds = load_dataset(args.data.as_ref(), &RunConfig::default())?;
    let dir = resolve_out(args.out.as_ref(), &RunConfig::default())?;
    let mut cases = CaseSelection::parse(&args.cases)?.resolve(&ds)?;
    if let Some(limit) = args.limit {
        cases.truncate(limit);
    }
    let mut models = Vec::new();
    for path in &args.weights {
        let (header, net) = load_checkpoint(path)?;
        let variant = header.label.parse::<Variant>().ok();
        let store = match variant {
            Some(Variant::AeKnn) => Some(LatentStore::build(&net, &ds, ds.train_indices())?),
            _ => None,
        };
        let label = format!("{}_seed{}_it{}", header.label, header.seed, header.iteration);
        models.push((label, net, store));
    }

    let params: Vec<_> = cases.iter().map(|&i| ds.input(i)).collect();
    let param_tensor = Tensor::from_rows(&params)?;
    let mut predictions: Vec<Vec<Vec<f64>>> = Vec::new();
    for (_, net, store) in &models {
        predictions.push(match store {
            Some(store) => params
                .iter()
                .map(|q| ae_knn_predict(q, store, net))
                .collect::<Result<_>>()?,
            None => {
                let y = net.predict(&param_tensor)?;
                (0..cases.len()).map(|r| y.row(r).to_vec()).collect()
            }
        });
    }

    let train = ds.train_indices();
    let mut sidecar = Vec::with_capacity(cases.len());
    for (row, &case) in cases.iter().enumerate() {
        let panels: Vec<Panel<'_>> = models
            .iter()
            .zip(&predictions)
            .map(|((label, _, _), p)| Panel {
                label,
                image: &p[row],
            })
            .collect();
        let c = &ds.cases[case];
        let images = export_case(&dir, case, &c.image, &panels)?;
        sidecar.push(ExportCase {
            case,
            params: c.params,
            split: if train.binary_search(&case).is_ok() { "train" } else { "test" },
            scale: ds.manifest.scale_for(c.params.layer),
            images,
        });
    }
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
    write_text(&dir.join("export.json"), &json)?;
    say(
        out,
        format!(
            "exported {} cases × {} images to {}",
            cases.len(),
            models.len() + 1,
            dir.display()
        ),
    )
}

pub fn cmd_grad_check(args: &GradCheckArgs, out: &mut dyn Write) -> CliResult<()> {
    if args.count == 0 {
        return Err(CliError::usage("--count must be ≥ 1"));
    }
    let seeds: Vec<u64> = (0..args.count as u64).map(|i| args.seed + i).collect();
    let summary = run_grad_check(&seeds, args.corrupt)?;
    say(
        out,
        format!(
            "gradient check: {} seeds, {} elements, ε = {:e}, tolerance {:e}",
            seeds.len(),
            summary.elements_checked,
            super::gradcheck::GRAD_EPSILON,
            GRAD_TOLERANCE
        ),
    )?;
    for p in &summary.paths {
        say(out, format!("  {:<6} max rel error {:.3e}", p.path, p.max_rel_error))?;
    }
    let [enc, dec, bnd] = summary.per_network();
    say(out, format!("  encoder  {enc:.3e}"))?;
    say(out, format!("  decoder  {dec:.3e}"))?;
    say(out, format!("  boundary {bnd:.3e}"))?;
    if summary.passed() {
        say(out, format!("PASS max rel error {:.3e}", summary.max_rel_error()))
    } else {
        say(out, format!("FAIL max rel error {:.3e}", summary.max_rel_error()))?;
        Err(CliError::validation(format!(
            "gradient check failed: max rel error {:.3e} ≥ {GRAD_TOLERANCE:e}",
            summary.max_rel_error()
        )))
    }
}

/// Checkpoints at each fifth of `n` (deduplicated, always ending at `n`).
fn fifths(n: usize) -> Vec<usize> {
    let mut c: Vec<usize> = (1..=5).map(|k| n * k / 5).filter(|&c| c > 0).collect();
    c.dedup();
    c
}

pub fn cmd_reproduce(args: &ReproduceArgs, out: &mut dyn Write) -> CliResult<()> {
    if args.seeds == 0 || args.jobs == 0 {
        return Err(CliError::usage("--seeds and --jobs must be ≥ 1"));
    }
    let cfg = load_config(args.config.as_deref())?;
    let dir = resolve_out(args.out.as_ref(), &cfg)?;
    create_dir(&dir)?;

    let opts = generate_options(&cfg, args.seed, args.levels.as_ref())?;
    let ds = Dataset::generate(&opts)?;
    let bytes = ds.to_bytes()?;
    let data_path = dir.join("dataset.sbd");
    fs::write(&data_path, &bytes).map_err(|e| Error::io(&data_path, e))?;
    summarize_dataset(&ds, &bytes, out)?;

    let mut base = cfg.train.clone();
    if let Some(n) = args.iterations {
        base.total_iterations = n;
        base.checkpoints = fifths(n);
    }
    let jobs: Vec<TrainConfig> = Variant::ALL
        .iter()
        .flat_map(|&variant| {
            (0..args.seeds as u64).map({
                let base = base.clone();
                move |i| TrainConfig {
                    variant,
                    seed: args.seed + i,
                    ..base.clone()
                }
            })
        })
        .collect();
    for j in &jobs {
        j.validate()?;
    }
    let runs_dir = dir.join("runs");
    create_dir(&runs_dir)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(TrainReport, RunFiles)>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..args.jobs.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let r = train_one(&ds, job, &runs_dir, WeightPolicy::FinalOnly);
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let mut reports = Vec::with_capacity(jobs.len());
    let mut paths = Vec::with_capacity(jobs.len());
    for r in results.into_inner().expect("workers joined") {
        let (report, files) = r.expect("every job ran")?;
        reports.push(report);
        paths.push(files.report);
    }
    for r in &reports {
        let last = r.final_checkpoint().expect("initial evaluation always present");
        say(
            out,
            format!(
                "{:<7} seed {:<3} test {:.6}  ({:.1}s)",
                r.variant.name(),
                r.seed,
                last.test_ssd,
                r.timing.total_seconds
            ),
        )?;
    }
    write_comparison(&reports, &paths, &dir, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifths_of_iterations() {
        assert_eq!(fifths(5000), vec![1000, 2000, 3000, 4000, 5000]);
        assert_eq!(fifths(3), vec![1, 2, 3]);
        assert_eq!(fifths(0), Vec::<usize>::new());
    }

    #[test]
    fn timing_sits_next_to_report() {
        assert_eq!(
            timing_path(Path::new("d/bd_seed0.report.jsonl")),
            PathBuf::from("d/bd_seed0.timing.json")
        );
    }
}
