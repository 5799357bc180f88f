//! `deglass`: synthesize data, train both stages, run inference, evaluate
//! and ablate.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deglass::data::{images_to_tensor, tensor_item, PairedSet};
use deglass::evalkit::{eval_removal, run_ablation, AblationVariant, EvalReport, RunScope};
use deglass::imageops::{hstack, mask_as_rgb, read_rgb_png, write_rgb_png};
use deglass::removal::remove_pipeline;
use deglass::synth::{synth_dataset, Split, SynthConfig};
use deglass::trainer::{
    apply_overrides, load_checkpoint, mask_model_from_checkpoint, removal_model_from_checkpoint, train_mask_stage, train_removal_stage,
    Stage, TrainConfig, CONFIG_ENV,
};
use deglass::Error;

#[derive(Parser)]
#[command(name = "deglass", version, about = "Eyeglasses and cast-shadow removal on synthetic portraits")]
struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a paired dataset plus real-domain proxy images.
    Synth(SynthArgs),
    /// Train the mask stage (domain adaptation, glass and shadow masks).
    TrainMask(TrainArgs),
    /// Train the removal stage on a frozen mask stage.
    TrainRemoval(RemovalArgs),
    /// Remove glasses and shadow from one image.
    Infer(InferArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and evaluate ablation variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with dataset settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of paired samples.
    #[arg(long)]
    n: Option<usize>,
    /// Number of real-domain proxy images.
    #[arg(long)]
    n_real: Option<usize>,
    /// Image side length in pixels.
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Setting override, e.g. `glasses.stroke_width=[1.0,2.0]` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace an existing dataset directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file of training settings; defaults to the file named by $DEGLASS_CONFIG.
    #[arg(long, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Setting override, e.g. `lr=0.001` (repeatable; beats the config file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset root (shorthand for `--set data=...`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (shorthand for `--set out_dir=...`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint of this stage written with the same settings.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RemovalArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Mask-stage checkpoint to freeze and build on.
    #[arg(long)]
    mask_checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Removal-stage checkpoint (holds the frozen mask stage too).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input PNG; sides must be multiples of 8.
    #[arg(long)]
    image: PathBuf,
    /// Output PNG of the cleaned image.
    #[arg(long, default_value = "deglassed.png")]
    out: PathBuf,
    /// Also write a strip: input, glass mask, shadow mask, intermediate, result.
    #[arg(long)]
    debug_grid: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Mask- or removal-stage checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Directory for eval.csv and eval.json.
    #[arg(long, default_value = "eval")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Variant name (FULL, WO_DA, WO_MULTISTEP_MASK, SM_GUIDED_GM, WO_SM, WO_GM,
    /// WO_MULTISTEP_REMOVAL, DEGLASS_FIRST, WO_MO) or `all`.
    #[arg(long)]
    variant: String,
    /// Number of seeds (0, 1, ... k-1).
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Train and score the mask stage only.
    #[arg(long)]
    masks_only: bool,
    #[command(flatten)]
    train: TrainArgs,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
    }
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Error> {
    let mut overrides = Vec::new();
    if let Some(d) = &a.data {
        overrides.push(format!("data={}", toml_string(d)));
    }
    if let Some(o) = &a.out {
        overrides.push(format!("out_dir={}", toml_string(o)));
    }
    overrides.extend(a.overrides.iter().cloned());
    TrainConfig::load(a.config.as_deref(), &overrides)
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn synth(a: &SynthArgs) -> Result<(), Error> {
    let mut table = match &a.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|_| Error::MissingFile(p.clone()))?
            .parse::<toml::Table>()
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => toml::Table::new(),
    };
    let mut overrides = Vec::new();
    for (k, v) in [
        ("n", a.n.map(|v| v as u64)),
        ("n_real", a.n_real.map(|v| v as u64)),
        ("image_size", a.image_size.map(|v| v as u64)),
        ("seed", a.seed),
    ] {
        if let Some(v) = v {
            overrides.push(format!("{k}={v}"));
        }
    }
    overrides.extend(a.overrides.iter().cloned());
    apply_overrides(&mut table, &overrides)?;
    let cfg: SynthConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let m = synth_dataset(&cfg, &a.out, a.overwrite)?;
    println!(
        "wrote {} samples and {} real-domain images to {} (config {})",
        m.samples.len(),
        m.real.len(),
        a.out.display(),
        m.config_hash
    );
    Ok(())
}

fn infer(a: &InferArgs) -> Result<(), Error> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mask = mask_model_from_checkpoint(&ck)?;
    let removal = removal_model_from_checkpoint(&ck)?;
    let img = read_rgb_png(&a.image)?;
    let (_, h, w) = img.dim();
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Shape(format!(
            "{}: {w}×{h} image, sides must be multiples of 8",
            a.image.display()
        )));
    }
    let x = images_to_tensor::<f32>(&[&img])?;
    let out = remove_pipeline(&mask, &removal, &x)?;
    let result = tensor_item(&out.final_image, 0);
    write_rgb_png(result.view(), &a.out)?;
    if let Some(grid) = &a.debug_grid {
        let m = |t| mask_as_rgb(&tensor_item(t, 0).index_axis_move(ndarray::Axis(0), 0));
        let mut strip = vec![img.clone(), m(&out.masks.m_g), m(&out.masks.m_s)];
        if let Some(mid) = &out.intermediate {
            strip.push(tensor_item(mid, 0));
        }
        strip.push(result);
        write_rgb_png(hstack(&strip)?.view(), grid)?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn variant_of(cfg: &TrainConfig) -> String {
    AblationVariant::ALL
        .into_iter()
        .find(|v| v.apply(cfg) == *cfg)
        .map(|v| v.name().to_string())
        .unwrap_or_else(|| "CUSTOM".into())
}

fn eval(a: &EvalArgs) -> Result<(), Error> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mask = mask_model_from_checkpoint(&ck)?;
    let removal = match ck.meta.stage {
        Stage::Removal => Some(removal_model_from_checkpoint(&ck)?),
        Stage::Mask => None,
    };
    let set = PairedSet::load(&a.data, a.split)?;
    let mut row = eval_removal(&mask, removal.as_ref(), &set, a.split)?;
    row.variant = variant_of(&ck.meta.config);
    row.seed = ck.meta.config.seed.to_string();
    row.config_hash = ck.meta.config_hash.clone();
    let report = EvalReport { rows: vec![row] };
    let (csv, _) = report.persist(&a.out, "eval")?;
    print_report(&report);
    println!("report: {}", csv.display());
    Ok(())
}

fn print_report(r: &EvalReport) {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "{:<22} {:>5} {:>9} {:>10} {:>9} {:>9} {:>8}",
        "variant", "seed", "glass_iou", "shadow_iou", "l1_input", "l1_final", "psnr"
    );
    for row in r.rows.iter().chain(&r.summary()) {
        println!(
            "{:<22} {:>5} {:>9.4} {:>10.4} {:>9} {:>9} {:>8}",
            row.variant,
            row.seed,
            row.glass_iou,
            row.shadow_iou,
            f(row.l1_input),
            f(row.l1_final),
            f(row.psnr_final)
        );
    }
}

fn ablate(a: &AblateArgs) -> Result<(), Error> {
    let cfg = train_config(&a.train)?;
    let variants: Vec<AblationVariant> = if a.variant.eq_ignore_ascii_case("all") {
        AblationVariant::ALL.to_vec()
    } else {
        vec![a.variant.parse()?]
    };
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let scope = if a.masks_only { RunScope::Masks } else { RunScope::Pipeline };
    let mut all = EvalReport::default();
    for v in variants {
        all.extend(run_ablation(v, &cfg, &seeds, &cfg.out_dir, scope)?);
    }
    let (csv, _) = all.persist(&cfg.out_dir, "ablation")?;
    print_report(&all);
    println!("report: {}", csv.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::TrainMask(a) => {
            let cfg = train_config(a)?;
            let run = train_mask_stage(&cfg, a.resume.as_deref())?;
            println!("mask stage: last {} best {}", run.last_path.display(), run.best_path.display());
            Ok(())
        }
        Command::TrainRemoval(a) => {
            let cfg = train_config(&a.train)?;
            let run = train_removal_stage(&cfg, a.mask_checkpoint.as_deref(), a.train.resume.as_deref())?;
            println!(
                "removal stage: last {} best {} (mask stage {} unchanged)",
                run.last_path.display(),
                run.best_path.display(),
                &run.mask_hash_after[..12]
            );
            Ok(())
        }
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 1,
                _ => 2,
            })
        }
    }
}
