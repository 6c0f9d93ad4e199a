//! Pipeline driver: gen -> analyze -> quantize -> eval, file-mediated so each
//! stage is independently testable. Diagnostics go to stderr; machine output
//! only to files. Exit code 0 iff no error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use fptq::calibrate::{calibrate, calibrate_with_capture, CalibSource};
use fptq::error::{Error, Result};
use fptq::formats::CheckpointContainer;
use fptq::lae::LaeConfig;
use fptq::model::{generate_checkpoint, ModelConfig, NormKind, OutlierProfile};
use fptq::qmodel::{evaluate, greedy_decode_matches_full, quantize_model};
use fptq::recipe::{build_recipe, build_recipe_naive, PolicyThresholds, QuantSettings, Recipe};
use fptq::report::{histogram_file_name, layer_reports, write_histogram_csv, DecodeCheck, ReportDoc};
use fptq::store::{model_from_container, model_to_container, quantized_from_container, quantized_to_container};

#[derive(Parser)]
#[command(name = "fptq", version, about = "W4A8 post-training quantization toolkit for a toy decoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic FP checkpoint with planted activation outliers
    Gen(GenArgs),
    /// Calibrate, classify layers, and export per-layer ranges and histograms
    Analyze(AnalyzeArgs),
    /// Build (or load) a recipe and write the quantized checkpoint
    Quantize(QuantizeArgs),
    /// Compare a quantized checkpoint against its FP original
    Eval(EvalArgs),
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long = "d-model", default_value_t = 256)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long = "d-ff", default_value_t = 1024)]
    d_ff: usize,
    #[arg(long, default_value_t = 1024)]
    vocab: usize,
    #[arg(long = "max-seq", default_value_t = 256)]
    max_seq: usize,
    /// Normalization kind: rms | layer
    #[arg(long, default_value = "rms")]
    norm: String,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let norm_kind = match self.norm.as_str() {
            "rms" => NormKind::RmsNorm,
            "layer" => NormKind::LayerNorm,
            other => return Err(Error::InvalidArg(format!("unknown norm {other:?} (rms|layer)"))),
        };
        let config = ModelConfig {
            n_layers: self.layers,
            d_model: self.d_model,
            n_heads: self.heads,
            d_ff: self.d_ff,
            vocab_size: self.vocab,
            max_seq: self.max_seq,
            norm_kind,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct GenArgs {
    /// Outlier profile preset: outlier | flat
    #[arg(long, default_value = "outlier")]
    preset: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct CalibArgs {
    /// Calibration source: "random" or a token file path
    #[arg(long, default_value = "random")]
    calib: String,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, default_value_t = 64)]
    seqlen: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

impl CalibArgs {
    fn source(&self) -> CalibSource {
        if self.calib == "random" {
            CalibSource::random(self.samples, self.seqlen, self.seed)
        } else {
            CalibSource::token_file(&self.calib, self.samples, self.seed)
        }
    }
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long, default_value_t = 15.0)]
    v0: f64,
    #[arg(long, default_value_t = 150.0)]
    v1: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
}

impl PolicyArgs {
    fn thresholds(&self) -> Result<PolicyThresholds> {
        PolicyThresholds::new(self.v0, self.v1)
    }

    fn lae(&self) -> Result<LaeConfig> {
        LaeConfig::new(self.alpha)
    }
}

#[derive(Args)]
struct QuantArgs {
    #[arg(long, default_value_t = 4)]
    wbits: u8,
    #[arg(long, default_value_t = 8)]
    abits: u8,
    #[arg(long = "group-size", default_value_t = 128)]
    group_size: usize,
    #[arg(long = "kv-bits", default_value_t = 8)]
    kv_bits: u8,
}

impl QuantArgs {
    fn settings(&self) -> Result<QuantSettings> {
        let s = QuantSettings {
            weight_bits: self.wbits,
            act_bits: self.abits,
            group_size: self.group_size,
            kv_bits: self.kv_bits,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    calib: CalibArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    quant: QuantArgs,
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-layer histogram CSVs
    #[arg(long = "hist-dir")]
    hist_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    bins: usize,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Reuse an existing recipe instead of calibrating
    #[arg(long)]
    recipe: Option<PathBuf>,
    #[command(flatten)]
    calib: CalibArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    quant: QuantArgs,
    /// Baseline mode: no equalization, all-static activations, per-channel weights
    #[arg(long, default_value_t = false)]
    naive: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also write the recipe as JSON
    #[arg(long = "recipe-out")]
    recipe_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    qckpt: PathBuf,
    /// Evaluation token source: "random" or a token file path (keep it
    /// seed-disjoint from the calibration source)
    #[arg(long, default_value = "random")]
    calib: String,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 64)]
    seqlen: usize,
    #[arg(long, default_value_t = 4242)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Greedy decode agreement test length (0 disables)
    #[arg(long = "decode-steps", default_value_t = 64)]
    decode_steps: usize,
}

fn run_gen(args: &GenArgs) -> Result<()> {
    let config = args.model.config()?;
    let profile = match args.preset.as_str() {
        "outlier" => OutlierProfile::outlier(),
        "flat" => OutlierProfile::flat(),
        other => return Err(Error::InvalidArg(format!("unknown preset {other:?} (outlier|flat)"))),
    };
    let (model, report) = generate_checkpoint(&config, &profile, args.seed)?;
    model_to_container(&model)?.write_to(&args.out)?;
    eprintln!(
        "generated {} ({} tuning rounds, seed {})",
        args.out.display(),
        report.rounds,
        args.seed
    );
    for (block, band, inlier, outlier) in &report.achieved {
        eprintln!("  blk{block}.{band}: inlier max {inlier:.2}, outlier max {outlier:.2}");
    }
    Ok(())
}

fn run_analyze(args: &AnalyzeArgs) -> Result<()> {
    let model = model_from_container(&CheckpointContainer::read_from(&args.ckpt)?)?;
    let result = calibrate_with_capture(&model, &args.calib.source(), true)?;
    let (recipe, warnings) = build_recipe(
        &model.config,
        &result.stats,
        &args.policy.thresholds()?,
        &args.policy.lae()?,
        &args.quant.settings()?,
    )?;
    let mut report = ReportDoc::new(&recipe)?;
    report.layers = Some(layer_reports(&recipe, &result.stats, recipe.act_bits)?);
    report.warnings = warnings;
    report.write_to(&args.out)?;

    if let Some(dir) = &args.hist_dir {
        std::fs::create_dir_all(dir)?;
        let captures = result.capture()?;
        for layer in &recipe.layers {
            let cap = captures
                .get(&layer.layer_id)
                .ok_or_else(|| Error::StatsMismatch(format!("no capture for {:?}", layer.layer_id)))?;
            let hist = fptq::calibrate::histogram_export(cap, layer.lae_scales.as_ref(), args.bins)?;
            write_histogram_csv(&dir.join(histogram_file_name(&layer.layer_id)), &hist)?;
        }
    }

    for layer in report.layers.as_deref().unwrap_or_default() {
        eprintln!(
            "  {:<18} v = {:>10.3}  {:?}{}",
            layer.layer_id,
            layer.v,
            layer.strategy,
            layer
                .post_lae_max
                .map(|p| format!("  (post-LAE {p:.3})"))
                .unwrap_or_default()
        );
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!("analysis written to {}", args.out.display());
    Ok(())
}

fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn run_quantize(args: &QuantizeArgs) -> Result<()> {
    let model = model_from_container(&CheckpointContainer::read_from(&args.ckpt)?)?;
    let (recipe, warnings) = match &args.recipe {
        Some(path) => {
            if args.naive {
                return Err(Error::InvalidArg("--naive conflicts with --recipe".into()));
            }
            let recipe = Recipe::from_text(&std::fs::read_to_string(path)?)?;
            recipe.validate(Some(&model.config))?;
            (recipe, Vec::new())
        }
        None => {
            let stats = calibrate(&model, &args.calib.source())?;
            let quant = args.quant.settings()?;
            if args.naive {
                (build_recipe_naive(&model.config, &stats, &quant)?, Vec::new())
            } else {
                build_recipe(
                    &model.config,
                    &stats,
                    &args.policy.thresholds()?,
                    &args.policy.lae()?,
                    &quant,
                )?
            }
        }
    };
    let qm = quantize_model(&model, &recipe)?;
    quantized_to_container(&qm)?.write_to(&args.out)?;
    if let Some(path) = &args.recipe_out {
        write_text_atomic(path, &recipe.to_canonical_text()?)?;
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "quantized W{}A{} (groups of {}, kv {} bits) -> {}",
        recipe.weight_bits,
        recipe.act_bits,
        recipe.group_size,
        recipe.kv_bits,
        args.out.display()
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let model = model_from_container(&CheckpointContainer::read_from(&args.ckpt)?)?;
    let qm = quantized_from_container(&CheckpointContainer::read_from(&args.qckpt)?)?;
    let source = if args.calib == "random" {
        CalibSource::random(args.samples, args.seqlen, args.seed)
    } else {
        CalibSource::token_file(&args.calib, args.samples, args.seed)
    };
    let seqs = source.resolve(model.config.vocab_size, model.config.max_seq)?;
    let metrics = evaluate(&model, &qm, &seqs)?;
    let mut report = ReportDoc::new(&qm.recipe)?;
    if args.decode_steps > 0 {
        let steps = args.decode_steps.min(model.config.max_seq - 1);
        let matched = greedy_decode_matches_full(&qm, &seqs[0][..1], steps)?;
        report.decode_check = Some(DecodeCheck { steps, matched });
        if !matched {
            report.warnings.push("greedy decode diverged from full-context argmax".into());
        }
    }
    report.metrics = Some(metrics.clone());
    report.write_to(&args.out)?;
    eprintln!(
        "mse {:.6e}  cosine {:.6}  top1 {:.4}  xent {:.4}  ({} seqs, {} positions)",
        metrics.logit_mse,
        metrics.cosine,
        metrics.top1_agreement,
        metrics.xent_proxy,
        metrics.sequences,
        metrics.positions
    );
    if let Some(check) = &report.decode_check {
        eprintln!("decode check: {} steps, matched = {}", check.steps, check.matched);
    }
    eprintln!("evaluation written to {}", args.out.display());
    Ok(())
}

fn main() {
    fptq::configure_threads_from_env();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Gen(args) => run_gen(args),
        Cmd::Analyze(args) => run_analyze(args),
        Cmd::Quantize(args) => run_quantize(args),
        Cmd::Eval(args) => run_eval(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
