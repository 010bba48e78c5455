//! Command-line driver. Exit codes: 0 success, 2 configuration, 3 IO,
//! 4 gain stability, 5 numerical degeneracy.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::{load_config, RunConfig};
use crate::error::{Error, ErrorClass, Result};
use crate::laplace::{transform_survey, TransformSpec};
use crate::pipeline::{build_initial_model, BuildOutput};
use crate::synthetics::synth_time_traces_with;
use crate::trace_io::{export_grid, read_grid, read_survey, write_field_csv, write_grid, write_survey, ExportFormat, SurveyDataset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_STABILITY: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;

pub fn exit_code(err: &Error) -> i32 {
    match err.class() {
        ErrorClass::Config => EXIT_CONFIG,
        ErrorClass::Io => EXIT_IO,
        ErrorClass::Stability => EXIT_STABILITY,
        ErrorClass::Numerical => EXIT_NUMERICAL,
    }
}

#[derive(Debug, Parser)]
#[command(name = "laplace-gain", version, about = "Build starting velocity models from time-gained Laplace-domain data")]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Proceed even when some (n, s) pairs fail the gain stability check.
    #[arg(long, global = true)]
    pub force: bool,
    /// Output file (synth, transform, export) or directory (build).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Export format.
    #[arg(long, global = true, default_value = "csv")]
    pub format: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic survey described by the [synthetic] config section.
    Synth,
    /// Write the gained transforms of a survey as CSV.
    Transform { survey: PathBuf },
    /// Print the gain stability table and data statistics.
    Check { survey: PathBuf },
    /// Build the starting model and write it with diagnostics.
    Build { survey: PathBuf },
    /// Convert a GRD model to CSV or PGM.
    Export { grid: PathBuf },
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    config.pipeline.force |= cli.force;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let threads = pool.current_num_threads();
    pool.install(|| match &cli.command {
        Command::Synth => cmd_synth(&config, require_out(cli)?),
        Command::Transform { survey } => cmd_transform(survey, &config, require_out(cli)?),
        Command::Check { survey } => cmd_check(survey, &config),
        Command::Build { survey } => cmd_build(survey, &config, require_out(cli)?, threads),
        Command::Export { grid } => cmd_export(grid, require_out(cli)?, cli.format.parse()?),
    })
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))
}

pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<()> {
    let synth = config
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::Config("configuration has no [synthetic] section".into()))?;
    let geometry = synth.geometry()?;
    let c = synth.velocity.unwrap_or(config.pipeline.background_velocity);
    let dataset = synth_time_traces_with(&geometry, c, synth.wavelet_width, synth.nt, synth.dt, &synth.options())?;
    write_survey(&dataset, out)?;
    println!(
        "wrote {} shots x {} receivers x {} samples to {}",
        geometry.shot_count(),
        geometry.receiver_count(0),
        synth.nt,
        out.display()
    );
    Ok(())
}

fn transform_spec(config: &RunConfig) -> TransformSpec {
    let p = &config.pipeline;
    TransformSpec {
        damping_constants: p.damping_constants.clone(),
        gain_powers: p.gain_powers.clone(),
        amplitude_floor: p.amplitude_floor,
        stability_threshold: p.stability_threshold,
    }
}

fn warn_unstable(spec: &TransformSpec, t_max: f64) {
    let failing: Vec<String> = spec
        .stability_table(t_max)
        .iter()
        .filter(|r| !r.check.pass)
        .map(|r| format!("(n={}, s={}, ratio={:.3e})", r.n, r.s, r.check.ratio))
        .collect();
    if !failing.is_empty() {
        eprintln!("warning: forced past failing stability pairs {}", failing.join(", "));
    }
}

pub fn cmd_transform(survey: &Path, config: &RunConfig, out: &Path) -> Result<()> {
    let spec = transform_spec(config);
    spec.validate()?;
    let dataset = read_survey(survey)?;
    let force = config.pipeline.force;
    let field = transform_survey(&dataset, &spec, force)?;
    if force {
        warn_unstable(&spec, dataset.record_length());
    }
    write_field_csv(&field, out)?;
    println!("wrote {} values to {}", field.values().len(), out.display());
    Ok(())
}

/// Stability table and data statistics.
pub fn check_report(dataset: &SurveyDataset, spec: &TransformSpec) -> (String, bool) {
    let t_max = dataset.record_length();
    let mut text = String::new();
    let g = dataset.geometry();
    let (mut max_abs, mut sum_sq, mut count) = (0.0f64, 0.0f64, 0usize);
    for v in dataset.gathers().iter().flat_map(|g| g.samples()) {
        let v = f64::from(*v);
        max_abs = max_abs.max(v.abs());
        sum_sq += v * v;
        count += 1;
    }
    let _ = writeln!(text, "shots: {}", g.shot_count());
    let _ = writeln!(text, "traces: {}", g.total_receivers());
    let _ = writeln!(text, "samples_per_trace: {}", dataset.nt());
    let _ = writeln!(text, "dt: {}", dataset.dt());
    let _ = writeln!(text, "record_length: {t_max}");
    let _ = writeln!(text, "max_abs_sample: {max_abs:e}");
    let _ = writeln!(text, "rms_sample: {:e}", (sum_sq / count as f64).sqrt());
    let _ = writeln!(text, "{:>3} {:>8} {:>12} result", "n", "s", "ratio");
    let mut all = true;
    for row in spec.stability_table(t_max) {
        all &= row.check.pass;
        let _ = writeln!(
            text,
            "{:>3} {:>8} {:>12.4e} {}",
            row.n,
            row.s,
            row.check.ratio,
            if row.check.pass { "pass" } else { "fail" }
        );
    }
    (text, all)
}

pub fn cmd_check(survey: &Path, config: &RunConfig) -> Result<()> {
    let spec = transform_spec(config);
    spec.validate()?;
    let dataset = read_survey(survey)?;
    let (text, all) = check_report(&dataset, &spec);
    print!("{text}");
    if all {
        Ok(())
    } else {
        let pairs = spec
            .stability_table(dataset.record_length())
            .into_iter()
            .filter(|r| !r.check.pass)
            .map(|r| (r.n, r.s, r.check.ratio))
            .collect();
        Err(Error::Stability { pairs })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the model, directions and manifest into `out_dir`. The manifest
/// sections before `[paths]` depend only on the inputs.
pub fn cmd_build(survey: &Path, config: &RunConfig, out_dir: &Path, threads: usize) -> Result<()> {
    config.pipeline.validate()?;
    let t0 = Instant::now();
    let dataset = read_survey(survey)?;
    let t_read = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let out = build_initial_model(&dataset, &config.pipeline)?;
    let t_build = t1.elapsed().as_secs_f64();
    if config.pipeline.force {
        warn_unstable(&config.pipeline.transform_spec(), dataset.record_length());
    }

    let t2 = Instant::now();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = write_build_outputs(&out, out_dir)?;
    let t_write = t2.elapsed().as_secs_f64();

    let mut manifest = String::from("# laplace-gain run manifest\ncommand: build\n\n[config]\n");
    manifest.push_str(&config.to_text());
    manifest.push_str("\n[report]\n");
    for line in out.report.lines() {
        manifest.push_str(&line);
        manifest.push('\n');
    }
    let _ = writeln!(
        manifest,
        "objective_decrease: {:e}",
        out.report.objective_before - out.report.objective_after
    );
    manifest.push_str("\n[outputs]\n");
    for f in &files {
        let _ = writeln!(manifest, "{f}");
    }
    manifest.push_str("\n[paths]\n");
    let _ = writeln!(manifest, "input: {}", survey.display());
    let _ = writeln!(manifest, "output_dir: {}", out_dir.display());
    manifest.push_str("\n[runtime]\n");
    let _ = writeln!(manifest, "threads: {threads}");
    let _ = writeln!(manifest, "timing_read_s: {t_read:.6}");
    let _ = writeln!(manifest, "timing_build_s: {t_build:.6}");
    let _ = writeln!(manifest, "timing_write_s: {t_write:.6}");
    write_text(&out_dir.join("manifest.txt"), &manifest)?;
    println!(
        "alpha {} objective {:e} -> {:e}; outputs in {}",
        out.report.alpha,
        out.report.objective_before,
        out.report.objective_after,
        out_dir.display()
    );
    Ok(())
}

fn write_build_outputs(out: &BuildOutput, dir: &Path) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let mut record = |name: String| -> PathBuf {
        let path = dir.join(&name);
        files.push(name);
        path
    };
    write_grid(&out.model, record("model.grd".into()))?;
    export_grid(&out.model, record("model.csv".into()), ExportFormat::Csv)?;
    write_grid(&out.coarse_model, record("coarse_model.grd".into()))?;
    export_grid(&out.direction, record("direction.csv".into()), ExportFormat::Csv)?;
    export_grid(&out.direction, record("direction.pgm".into()), ExportFormat::Pgm)?;
    for d in &out.components {
        let stem = match d.label() {
            Some((s, n)) => format!("direction_s{s}_n{n}"),
            None => continue,
        };
        export_grid(d, record(format!("{stem}.csv")), ExportFormat::Csv)?;
        export_grid(d, record(format!("{stem}.pgm")), ExportFormat::Pgm)?;
    }
    Ok(files)
}

pub fn cmd_export(grid: &Path, out: &Path, format: ExportFormat) -> Result<()> {
    let model = read_grid(grid)?;
    export_grid(&model, out, format)?;
    println!("wrote {}", out.display());
    Ok(())
}
