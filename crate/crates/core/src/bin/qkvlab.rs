//! Command-line surface: run generations, A/B compare guidance settings,
//! export attention maps, validate configs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 validation failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use qkvlab::attention::Branch;
use qkvlab::config::RunConfig;
use qkvlab::error::Error;
use qkvlab::inspect::{export_map_image, load_record, map_entropy, ConsistencyReport};
use qkvlab::sampler::generate;

/// Environment variable overriding the configured output root.
const OUT_ROOT_ENV: &str = "QKVLAB_OUT_ROOT";

#[derive(Parser)]
#[command(name = "qkvlab", version, about = "Deterministic attention-guidance lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config file (TOML).
    config: PathBuf,
    /// Override a config key, e.g. --set guidance.tau=0.2
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one generation and write images, archive and metrics.
    Generate(ConfigArgs),
    /// Run baseline vs toggled-guidance variants and report deltas.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Which mechanism(s) the variant turns on.
        #[arg(long, value_enum)]
        toggle: Toggle,
    },
    /// Export one captured attention map as PGM and print its stats.
    Inspect {
        /// Run directory (contains captures/).
        archive_dir: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long, default_value_t = 0)]
        step: usize,
        #[arg(long, default_value_t = 0)]
        slot: usize,
        /// Defaults to `self` for *.self layers, `text` otherwise.
        #[arg(long)]
        branch: Option<BranchArg>,
        /// Key (token or patch) index whose column is rendered.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output PGM path; defaults into <archive_dir>/exports/.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config, without running anything.
    Validate(ConfigArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Toggle {
    #[value(alias = "kv_share")]
    KvShare,
    Mask,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BranchArg {
    Text,
    Image,
    #[value(name = "self")]
    SelfAttn,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Branch {
        match b {
            BranchArg::Text => Branch::Text,
            BranchArg::Image => Branch::Image,
            BranchArg::SelfAttn => Branch::SelfAttn,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Compare { config, toggle } => cmd_compare(&config, toggle),
        Command::Inspect {
            archive_dir,
            layer,
            step,
            slot,
            branch,
            index,
            out,
        } => cmd_inspect(&archive_dir, &layer, step, slot, branch, index, out),
        Command::Validate(args) => cmd_validate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::Input(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    let cfg = RunConfig::load_with_overrides(&args.config, &args.sets)?;
    cfg.validate()?;
    Ok(cfg)
}

fn output_root(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root),
        _ => cfg.output_dir.clone(),
    }
}

fn cmd_generate(args: &ConfigArgs) -> Result<(), Error> {
    let cfg = load_config(args)?;
    let result = generate(&cfg)?;
    let root = output_root(&cfg);
    let dir = qkvlab::sampler::write_outputs(&cfg, &result, &root)?;
    println!("run {}", result.run_id);
    println!("  images:  {}", dir.join("images").display());
    println!("  metrics: {}", dir.join("metrics.json").display());
    if cfg.capture {
        println!(
            "  archive: {} ({} maps)",
            dir.join("captures").display(),
            result.capture.maps.len()
        );
    }
    println!(
        "  mid-block cross-slot cosine: {:.6}",
        result.metrics.mid_block_cosine
    );
    Ok(())
}

#[derive(Serialize)]
struct CompareReport {
    toggle: String,
    baseline_run: String,
    variant_run: String,
    mid_block_cosine_delta: f64,
    layer_cosine_delta: Vec<DeltaRow>,
    map_iou_delta: Vec<DeltaRow>,
    baseline: ConsistencyReport,
    variant: ConsistencyReport,
}

#[derive(Serialize)]
struct DeltaRow {
    key: String,
    baseline: f64,
    variant: f64,
    delta: f64,
}

fn apply_toggle(cfg: &RunConfig, toggle: Toggle, on: bool) -> RunConfig {
    let mut out = cfg.clone();
    match toggle {
        Toggle::KvShare => out.guidance.kv_share_enabled = on,
        Toggle::Mask => out.guidance.mask_enabled = on,
        Toggle::Both => {
            out.guidance.kv_share_enabled = on;
            out.guidance.mask_enabled = on;
        }
    }
    out
}

fn cmd_compare(args: &ConfigArgs, toggle: Toggle) -> Result<(), Error> {
    let cfg = load_config(args)?;
    let baseline_cfg = apply_toggle(&cfg, toggle, false);
    let variant_cfg = apply_toggle(&cfg, toggle, true);
    let baseline = generate(&baseline_cfg)?;
    let variant = generate(&variant_cfg)?;

    let layer_cosine_delta: Vec<DeltaRow> = baseline
        .metrics
        .feature_cosine
        .iter()
        .filter_map(|b| {
            variant
                .metrics
                .feature_cosine
                .iter()
                .find(|v| v.layer_id == b.layer_id)
                .map(|v| DeltaRow {
                    key: b.layer_id.clone(),
                    baseline: b.cosine,
                    variant: v.cosine,
                    delta: v.cosine - b.cosine,
                })
        })
        .collect();
    let map_iou_delta: Vec<DeltaRow> = baseline
        .metrics
        .map_iou
        .iter()
        .filter_map(|b| {
            variant
                .metrics
                .map_iou
                .iter()
                .find(|v| v.layer_id == b.layer_id && v.branch == b.branch)
                .map(|v| DeltaRow {
                    key: format!("{}/{}", b.layer_id, b.branch),
                    baseline: b.iou,
                    variant: v.iou,
                    delta: v.iou - b.iou,
                })
        })
        .collect();
    let report = CompareReport {
        toggle: format!("{toggle:?}").to_lowercase(),
        baseline_run: baseline.run_id.clone(),
        variant_run: variant.run_id.clone(),
        mid_block_cosine_delta: variant.metrics.mid_block_cosine
            - baseline.metrics.mid_block_cosine,
        layer_cosine_delta,
        map_iou_delta,
        baseline: baseline.metrics,
        variant: variant.metrics,
    };

    let root = output_root(&cfg);
    let dir = root.join(format!(
        "compare-{}-{}",
        report.baseline_run, report.variant_run
    ));
    std::fs::create_dir_all(&dir)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json + "\n")?;

    println!(
        "compare --toggle {:?}: baseline {} vs variant {}",
        toggle, report.baseline_run, report.variant_run
    );
    println!("  report: {}", dir.join("report.json").display());
    println!(
        "  mid-block cosine: {:.6} -> {:.6} (delta {:+.6})",
        report.baseline.mid_block_cosine,
        report.variant.mid_block_cosine,
        report.mid_block_cosine_delta
    );
    println!(
        "  {:<16} {:>12} {:>12} {:>12}",
        "layer cosine", "baseline", "variant", "delta"
    );
    for row in &report.layer_cosine_delta {
        println!(
            "  {:<16} {:>12.6} {:>12.6} {:>+12.6}",
            row.key, row.baseline, row.variant, row.delta
        );
    }
    println!(
        "  {:<16} {:>12} {:>12} {:>12}",
        "mask IoU", "baseline", "variant", "delta"
    );
    for row in &report.map_iou_delta {
        println!(
            "  {:<16} {:>12.6} {:>12.6} {:>+12.6}",
            row.key, row.baseline, row.variant, row.delta
        );
    }
    Ok(())
}

fn cmd_inspect(
    archive_dir: &Path,
    layer: &str,
    step: usize,
    slot: usize,
    branch: Option<BranchArg>,
    index: usize,
    out: Option<PathBuf>,
) -> Result<(), Error> {
    let branch: Branch = match branch {
        Some(b) => b.into(),
        None if layer.ends_with(".self") => Branch::SelfAttn,
        None => Branch::Text,
    };
    let record = load_record(archive_dir, layer, step, slot, branch)?;
    let out_path = match out {
        Some(p) => p,
        None => {
            let dir = archive_dir.join("exports");
            std::fs::create_dir_all(&dir)?;
            dir.join(format!("{layer}_{branch}_s{step}_b{slot}_k{index}.pgm"))
        }
    };
    export_map_image(&record, index, &out_path)?;

    let weights = record.map.weights.data();
    let (mut max, mut argmax) = (f32::NEG_INFINITY, 0usize);
    for (i, &w) in weights.iter().enumerate() {
        if w > max {
            max = w;
            argmax = i;
        }
    }
    let (nq, nkv) = (record.map.queries(), record.map.keys());
    let head = argmax / (nq * nkv);
    let q = (argmax / nkv) % nq;
    let k = argmax % nkv;
    println!(
        "map {layer}:{step}:{branch} slot {slot} ({} heads, {nq} queries, {nkv} keys)",
        record.map.heads()
    );
    println!("  max:     {max:.6} at (head {head}, query {q}, key {k})");
    println!(
        "  entropy: {:.6} nats (uniform = {:.6})",
        map_entropy(&record.map),
        qkvlab::detmath::ln(nkv as f64)
    );
    println!("  export:  {}", out_path.display());
    Ok(())
}

fn cmd_validate(args: &ConfigArgs) -> Result<(), Error> {
    let cfg = load_config(args)?;
    println!("config ok: run id {}", cfg.run_id());
    Ok(())
}
