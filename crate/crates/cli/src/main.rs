//! `dgz` — layout-to-image synthesis with a denoising conditional GAN.
//!
//! Every run writes its fully resolved configuration next to its outputs so
//! any artifact can be reproduced from that file alone.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure,
//! 3 gradient verification failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dgz_core::config::RunConfig;
use dgz_core::data::{self, SynthesisConfig};
use dgz_core::gradcheck::DEFAULT_TOL;
use dgz_core::trainer::{self, Trainer, ABLATION_CSV_NAME, CHECKPOINT_LATEST_NAME};
use dgz_core::verify;
use dgz_core::{Error, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

#[derive(Parser)]
#[command(
    name = "dgz",
    version,
    about = "Denoising conditional GAN for semantic-layout-to-image synthesis"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic overlapping-objects dataset (layouts, targets,
    /// class table, manifest).
    SynthesizeDataset(SynthesizeArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Render one layout through a trained generator.
    Infer(InferArgs),
    /// Score a trained generator against a manifest of layout/target pairs.
    Evaluate(EvaluateArgs),
    /// Run the ablation study: the named rows by default, the full
    /// sigma x term grid with --grid.
    Ablate(AblateArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (flat key=value). Relative manifest/classes paths inside
    /// it resolve against the file's directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable). Applied after the file, in order.
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Output directory for layouts/, targets/, classes.tsv, manifest.tsv.
    #[arg(long)]
    out: PathBuf,
    /// Master seed (overrides the config key `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of scenes (overrides `count`).
    #[arg(long)]
    count: Option<usize>,
    /// Square image side in pixels (overrides `image_size`).
    #[arg(long)]
    size: Option<usize>,
    /// Probability that a car overlaps another (overrides `overlap_rate`).
    #[arg(long)]
    overlap_rate: Option<f32>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (required; see `synthesize-dataset` for producing one).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints, the training log and the resolved
    /// config.
    #[arg(long)]
    out: PathBuf,
    /// Continue from <out>/checkpoint_latest.dgz instead of starting fresh.
    #[arg(long)]
    resume: bool,
    /// Total epochs to reach (overrides the config key `epochs`).
    #[arg(long)]
    epochs: Option<usize>,
    /// Override a config key (repeatable).
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct InferArgs {
    /// Trained checkpoint (.dgz).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input semantic layout (PGM, one class id per pixel).
    #[arg(long)]
    layout: PathBuf,
    /// Output image path (PPM).
    #[arg(long)]
    out: PathBuf,
    /// Input noise level; 0 renders deterministically.
    #[arg(long, default_value_t = 0.0)]
    sigma: f32,
    /// Seed for the inference noise stream (only used when sigma > 0).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained checkpoint (.dgz).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest of layout<TAB>target<TAB>seed lines to score.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for metrics.csv and the resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Input noise level during scoring (deterministic per entry seed).
    #[arg(long, default_value_t = 0.0)]
    sigma: f32,
}

#[derive(Args)]
struct AblateArgs {
    /// Base config file; each row flips sigma/term knobs on top of it.
    #[arg(long)]
    config: PathBuf,
    /// Output directory: one run_<slug>/ per row plus ablation.csv.
    #[arg(long)]
    out: PathBuf,
    /// Run the full sigma x {perturbed, cascade, instance} grid (24 rows)
    /// instead of the named study rows (10).
    #[arg(long)]
    grid: bool,
    /// Override a config key (repeatable).
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check a single op by name instead of the whole suite.
    #[arg(long)]
    op: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::SynthesizeDataset(a) => cmd_synthesize(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Builds the run config: defaults, then the file (with manifest/classes
/// rebased onto the file's directory), then `--set` overrides (paths taken
/// as given, i.e. relative to the working directory).
fn load_config(config: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        cfg.apply_text(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.manifest = rebase(base, &cfg.manifest);
        cfg.classes = rebase(base, &cfg.classes);
    }
    for kv in sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            Error::config(format!("--set expects KEY=VALUE, got '{kv}'"))
        })?;
        cfg.apply(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn rebase(base: &Path, value: &str) -> String {
    if value.is_empty() || Path::new(value).is_absolute() {
        value.to_string()
    } else {
        base.join(value).display().to_string()
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<(data::ClassTable, Vec<data::DatasetEntry>)> {
    if cfg.manifest.is_empty() {
        return Err(Error::config(
            "no dataset: set `manifest` in the config or via --set manifest=PATH",
        ));
    }
    let table = data::read_class_table(&cfg.classes_path())?;
    let entries = data::read_manifest(Path::new(&cfg.manifest))?;
    Ok((table, entries))
}

fn cmd_synthesize(a: SynthesizeArgs) -> Result<u8> {
    let mut cfg = load_config(a.cfg.config.as_deref(), &a.cfg.set)?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.count {
        cfg.count = v;
    }
    if let Some(v) = a.size {
        cfg.image_size = v;
    }
    if let Some(v) = a.overlap_rate {
        cfg.overlap_rate = v;
    }
    let syn = SynthesisConfig {
        count: cfg.count,
        size: cfg.image_size,
        master_seed: cfg.seed,
        overlap_rate: cfg.overlap_rate,
        min_cars: cfg.min_cars,
        max_cars: cfg.max_cars,
        min_buildings: cfg.min_buildings,
        max_buildings: cfg.max_buildings,
    };
    syn.validate()?;
    let entries = data::synthesize_dataset(&a.out, &syn)?;
    // Point the resolved config at its sibling manifest so it is directly
    // trainable: `dgz train --config <out>/resolved_config.txt --out ...`.
    cfg.manifest = "manifest.tsv".into();
    cfg.classes = String::new();
    trainer::write_resolved_config(&a.out, &cfg)?;
    println!(
        "synthesized {} scene(s) at {}x{} px into {}",
        entries.len(),
        cfg.image_size,
        cfg.image_size,
        a.out.display()
    );
    Ok(0)
}

/// Keys that fix tensor shapes or the deterministic schedule; a resumed run
/// must agree with its checkpoint on all of them.
fn check_resume_consistency(loaded: &RunConfig, file: &RunConfig) -> Result<()> {
    let mut bad = Vec::new();
    macro_rules! same {
        ($field:ident) => {
            if loaded.$field != file.$field {
                bad.push(format!(
                    "{} (checkpoint {:?}, config {:?})",
                    stringify!($field),
                    loaded.$field,
                    file.$field
                ));
            }
        };
    }
    same!(seed);
    same!(image_size);
    same!(gen_base_width);
    same!(gen_res_blocks);
    same!(disc_layers);
    same!(disc_base_width);
    same!(cascade_widths);
    same!(use_instance);
    same!(complex_classes);
    same!(batch_size);
    same!(holdout);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "--resume: config disagrees with the checkpoint on {}",
            bad.join(", ")
        )))
    }
}

fn cmd_train(a: TrainArgs) -> Result<u8> {
    let mut cfg = load_config(Some(&a.config), &a.set)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let (table, entries) = load_corpus(&cfg)?;
    let mut tr = if a.resume {
        let ck = a.out.join(CHECKPOINT_LATEST_NAME);
        if !ck.exists() {
            return Err(Error::config(format!(
                "--resume: no checkpoint at {}; run without --resume to start fresh",
                ck.display()
            )));
        }
        let mut tr = Trainer::load_checkpoint(&ck)?;
        check_resume_consistency(&tr.run_cfg, &cfg)?;
        tr.run_cfg.epochs = cfg.epochs;
        tr
    } else {
        Trainer::new(cfg, &table)?
    };
    let start = std::time::Instant::now();
    let outcome = tr.train(&entries, &a.out)?;
    let secs = start.elapsed().as_secs_f64();
    match (&outcome.final_report, outcome.final_holdout_l1) {
        (Some(r), Some(l1)) => println!(
            "trained {} epoch(s) in {:.1}s; holdout psnr {:.4} mse {:.6} rmse {:.6} ssim {:.4} l1 {:.6}",
            outcome.epochs_run, secs, r.mean_psnr, r.mean_mse, r.mean_rmse, r.mean_ssim, l1
        ),
        _ => println!(
            "trained {} epoch(s) in {:.1}s; checkpoint written to {}",
            outcome.epochs_run,
            secs,
            a.out.display()
        ),
    }
    Ok(0)
}

fn cmd_infer(a: InferArgs) -> Result<u8> {
    let tr = Trainer::load_checkpoint(&a.checkpoint)?;
    let layout = data::read_pgm(&a.layout)?;
    let mut rng = tr.infer_rng(a.seed);
    let img = tr.infer(&layout, a.sigma, &mut rng)?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    data::write_ppm(&a.out, &img)?;
    let mut cfg_path = a.out.clone().into_os_string();
    cfg_path.push(".config.txt");
    let mut blob = format!(
        "# infer checkpoint={} layout={} sigma={} seed={}\n",
        a.checkpoint.display(),
        a.layout.display(),
        a.sigma,
        a.seed
    );
    blob.push_str(&tr.run_cfg.to_text());
    fs::write(PathBuf::from(cfg_path), blob)?;
    println!("wrote {}", a.out.display());
    Ok(0)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<u8> {
    let tr = Trainer::load_checkpoint(&a.checkpoint)?;
    let entries = data::read_manifest(&a.manifest)?;
    if entries.is_empty() {
        return Err(Error::config(format!(
            "manifest {} has no entries",
            a.manifest.display()
        )));
    }
    fs::create_dir_all(&a.out)?;
    let mut cfg = tr.run_cfg.clone();
    cfg.manifest = a.manifest.display().to_string();
    cfg.eval_sigma = a.sigma;
    trainer::write_resolved_config(&a.out, &cfg)?;
    let (report, l1) = tr.evaluate_entries(&entries, a.sigma)?;
    let mut csv = String::from("path,psnr,mse,rmse,ssim\n");
    for m in &report.per_image {
        writeln!(csv, "{},{},{},{},{}", m.path, m.psnr, m.mse, m.rmse, m.ssim)
            .expect("string write");
    }
    writeln!(
        csv,
        "MEAN,{},{},{},{}",
        report.mean_psnr, report.mean_mse, report.mean_rmse, report.mean_ssim
    )
    .expect("string write");
    fs::write(a.out.join("metrics.csv"), csv)?;
    println!(
        "evaluated {} image(s): psnr {:.4} mse {:.6} rmse {:.6} ssim {:.4} l1 {:.6}",
        entries.len(),
        report.mean_psnr,
        report.mean_mse,
        report.mean_rmse,
        report.mean_ssim,
        l1
    );
    Ok(0)
}

fn cmd_ablate(a: AblateArgs) -> Result<u8> {
    let cfg = load_config(Some(&a.config), &a.set)?;
    let (table, entries) = load_corpus(&cfg)?;
    let specs = if a.grid {
        trainer::grid_ablation_specs()
    } else {
        trainer::named_ablation_specs()
    };
    fs::create_dir_all(&a.out)?;
    trainer::write_resolved_config(&a.out, &cfg)?;
    let rows = trainer::run_ablation(&cfg, &specs, &table, &entries, &a.out)?;
    println!("{:<16} {:>9} {:>11} {:>10} {:>7}", "row", "psnr", "mse", "rmse", "ssim");
    for r in &rows {
        println!(
            "{:<16} {:>9.4} {:>11.6} {:>10.6} {:>7.4}",
            r.label, r.psnr, r.mse, r.rmse, r.ssim
        );
    }
    println!("wrote {}", a.out.join(ABLATION_CSV_NAME).display());
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<u8> {
    let outcomes = verify::run_standard_suite(a.op.as_deref())?;
    let mut failures = 0usize;
    for o in &outcomes {
        let ok = o.report.passed(DEFAULT_TOL);
        if !ok {
            failures += 1;
        }
        println!("{} {}", if ok { "PASS" } else { "FAIL" }, o.report);
    }
    println!(
        "{}/{} gradient checks passed (tolerance {DEFAULT_TOL:.0e})",
        outcomes.len() - failures,
        outcomes.len()
    );
    Ok(if failures > 0 { EXIT_GRADCHECK } else { 0 })
}
