//! `compseg`: phantom generation, training, evaluation, inference and overlays.
//!
//! Exit status is 0 on success, 2 when an input fails validation and 3 when a
//! valid run fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use compseg::ablation::{run_ablation_grid, Arm};
use compseg::checkpoint::Checkpoint;
use compseg::compnet::Model;
use compseg::config::RunConfig;
use compseg::dataset::{encode_npy, write_atomic, Dataset, DatasetCase};
use compseg::ensemble::ensemble_infer;
use compseg::evaluate::{evaluate_checkpoint, predict, prediction_from_maps, Prediction};
use compseg::losses::Mask;
use compseg::meta_codec::MetadataSchema;
use compseg::overlay::write_overlay;
use compseg::synth::{generate_cases, Split, SplitSizes};
use compseg::trainer::{prepare_case, prepare_cases, train, write_epoch_log};
use compseg::Error;

const DEFAULT_SEED: u64 = 0;

#[derive(Parser, Debug)]
#[command(name = "compseg", version, about = "Compositional cardiac segmentation with metadata fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice; defaults to 0.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset.
    MakeSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Number of cases; overrides the configuration.
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Train one architecture variant.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data_dir: PathBuf,
        /// Output directory for the checkpoint, epoch log and resolved config.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "full")]
        arm: String,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write predicted label maps for one split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Predict with one categorical metadata entity hidden, averaging over its values.
    EnsembleInfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        missing_entity: String,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train every ablation arm under identical seeds and report test scores.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 3)]
        repeats: u64,
        /// Restrict to one arm.
        #[arg(long)]
        arm: Option<String>,
    },
    /// Render label contours over a case image as PNG.
    Overlay {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        case: String,
        #[arg(long)]
        out: PathBuf,
        /// Draw the checkpoint's prediction instead of the reference labels.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Schema(_)
            | Error::Encoding(_)
            | Error::MissingMetadata(_)
            | Error::Shape(_)
            | Error::Config(_)
            | Error::Validation(_)
            | Error::Parse(_)
            | Error::FingerprintMismatch { .. }
            | Error::Checkpoint(_) => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(msg.into())
}

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> CmdResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} is not a directory", path.display())))
    }
}

/// Create `out` (and parents) unless it exists as a file.
fn output_dir(out: &Path) -> CmdResult {
    if out.exists() && !out.is_dir() {
        return Err(invalid(format!("{} exists and is not a directory", out.display())));
    }
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))
}

fn load_config(common: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => {
            require_file(p, "config")?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    let seed = common.seed.unwrap_or(DEFAULT_SEED);
    cfg.train.seed = seed;
    cfg.data.base_seed = seed;
    cfg.phantom.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(s: &str) -> std::result::Result<Split, Failure> {
    Ok(Split::parse(s)?)
}

fn load_dataset(dir: &Path) -> std::result::Result<Dataset, Failure> {
    require_dir(dir, "data directory")?;
    Ok(Dataset::load(dir)?)
}

fn load_checkpoint(path: &Path) -> std::result::Result<Checkpoint, Failure> {
    require_file(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?)
}

fn write_labels(path: &Path, labels: &[u8], h: usize, w: usize) -> CmdResult {
    let bytes = encode_npy(labels, &[h as u64, w as u64]).map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(write_atomic(path, &bytes)?)
}

fn make_synth(common: &Common, out: &Path, cases: Option<usize>) -> CmdResult {
    let mut cfg = load_config(common)?;
    if let Some(n) = cases {
        cfg.data.num_cases = n;
        cfg.validate()?;
    }
    let schema = MetadataSchema::builtin(&cfg.data.schema)?;
    let generated = generate_cases(&cfg.phantom, SplitSizes::proportional(cfg.data.num_cases), cfg.data.base_seed)?;
    Dataset::from_cases(schema, &generated, cfg.phantom.spacing_mm).save(out)?;
    log::info!("wrote {} cases to {}", generated.len(), out.display());
    Ok(())
}

fn train_cmd(common: &Common, data_dir: &Path, out: &Path, arm: &str) -> CmdResult {
    let cfg = load_config(common)?;
    let arm = Arm::parse(arm)?;
    let dataset = load_dataset(data_dir)?;
    output_dir(out)?;
    let (net, schema) = arm.configure(&cfg.net, &dataset.schema)?;
    let hw = net.input_hw;
    let train_cases = prepare_cases(&dataset.split(Split::Train), hw)?;
    let val = prepare_cases(&dataset.split(Split::Val), hw)?;
    if train_cases.is_empty() {
        return Err(invalid("the dataset has no training cases"));
    }
    let model = Model::new(&net, &schema, cfg.train.seed)?;
    log::info!("training arm {} with {} parameters", arm.as_str(), model.num_params());
    let outcome = train(model, &train_cases, &val, &cfg.train)?;
    let resolved = RunConfig { net, ..cfg };
    write_atomic(&out.join("config.toml"), resolved.to_toml_string()?.as_bytes())?;
    write_epoch_log(&out.join("epochs.csv"), &outcome.log)?;
    Checkpoint::new(outcome.model, &dataset.schema, outcome.best_epoch).save(&out.join("model.ckpt"))?;
    log::info!("best epoch {}", outcome.best_epoch);
    Ok(())
}

fn eval_cmd(checkpoint: &Path, data_dir: &Path, out: &Path, split: &str) -> CmdResult {
    let split = parse_split(split)?;
    let ck = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data_dir)?;
    let report = evaluate_checkpoint(&ck, &dataset, split)?;
    output_dir(out)?;
    report.write(out)?;
    println!("mean foreground dice {:.2}%  mean hd {:.2} mm", report.mean_foreground_dice(), report.mean_hd());
    Ok(())
}

fn infer_cmd(checkpoint: &Path, data_dir: &Path, out: &Path, split: &str) -> CmdResult {
    let split = parse_split(split)?;
    let ck = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data_dir)?;
    ck.check_dataset(&dataset.schema)?;
    output_dir(out)?;
    let hw = ck.model.config().input_hw;
    for case in dataset.split(split) {
        let prepared = prepare_case(case, hw)?;
        let pred = predict(&ck.model, &prepared)?;
        write_labels(&out.join(format!("{}_pred.npy", case.case_id)), &pred.labels, hw.0, hw.1)?;
    }
    Ok(())
}

fn ensemble_cmd(checkpoint: &Path, data_dir: &Path, out: &Path, entity: &str, split: &str) -> CmdResult {
    let split = parse_split(split)?;
    let ck = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data_dir)?;
    ck.check_dataset(&dataset.schema)?;
    if ck.model.schema.entity(entity).is_none() {
        return Err(invalid(format!("`{entity}` is not an entity of the checkpoint schema")));
    }
    output_dir(out)?;
    let hw = ck.model.config().input_hw;
    for case in dataset.split(split) {
        let mut prepared = prepare_case(case, hw)?;
        prepared.record = prepared.record.project(&ck.model.schema).with_absent(entity);
        let result = ensemble_infer(&ck.model, &prepared.feature_map()?, &prepared.record, entity)?;
        let Prediction { labels, .. } =
            prediction_from_maps(&result.averaged.sub, result.averaged.super_.as_ref())?;
        write_labels(&out.join(format!("{}_ensemble.npy", case.case_id)), &labels, hw.0, hw.1)?;
    }
    Ok(())
}

fn ablate_cmd(common: &Common, data_dir: &Path, out: &Path, repeats: u64, arm: Option<&str>) -> CmdResult {
    let cfg = load_config(common)?;
    if repeats == 0 {
        return Err(invalid("--repeats must be at least 1"));
    }
    let arms = match arm {
        Some(a) => vec![Arm::parse(a)?],
        None => Arm::ALL.to_vec(),
    };
    let dataset = load_dataset(data_dir)?;
    output_dir(out)?;
    let seeds: Vec<u64> = (0..repeats).map(|i| cfg.train.seed + i).collect();
    let table = run_ablation_grid(&dataset, &cfg.net, &cfg.train, &seeds, &arms)?;
    let csv = table.to_csv()?;
    write_atomic(&out.join("ablation.csv"), &csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn find_case<'a>(dataset: &'a Dataset, id: &str) -> std::result::Result<&'a DatasetCase, Failure> {
    dataset
        .cases
        .iter()
        .find(|c| c.case_id == id)
        .ok_or_else(|| invalid(format!("no case `{id}` in the dataset")))
}

fn overlay_cmd(data_dir: &Path, case_id: &str, out: &Path, checkpoint: Option<&Path>) -> CmdResult {
    let dataset = load_dataset(data_dir)?;
    let case = find_case(&dataset, case_id)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        require_dir(parent, "output directory")?;
    }
    match checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            ck.check_dataset(&dataset.schema)?;
            let (h, w) = ck.model.config().input_hw;
            let prepared = prepare_case(case, (h, w))?;
            let pred = predict(&ck.model, &prepared)?;
            write_overlay(out, &prepared.raw, h, w, &pred.labels, pred.super_mask.as_ref())?;
        }
        None => {
            let (h, w) = (case.height, case.width);
            let fg = Mask::foreground(h, w, &case.labels)?;
            write_overlay(out, &case.image, h, w, &case.labels, Some(&fg))?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match &cli.command {
        Command::MakeSynth { common, out, cases } => make_synth(common, out, *cases),
        Command::Train {
            common,
            data_dir,
            out,
            arm,
        } => train_cmd(common, data_dir, out, arm),
        Command::Eval {
            checkpoint,
            data_dir,
            out,
            split,
        } => eval_cmd(checkpoint, data_dir, out, split),
        Command::Infer {
            checkpoint,
            data_dir,
            out,
            split,
        } => infer_cmd(checkpoint, data_dir, out, split),
        Command::EnsembleInfer {
            checkpoint,
            data_dir,
            out,
            missing_entity,
            split,
        } => ensemble_cmd(checkpoint, data_dir, out, missing_entity, split),
        Command::Ablate {
            common,
            data_dir,
            out,
            repeats,
            arm,
        } => ablate_cmd(common, data_dir, out, *repeats, arm.as_deref()),
        Command::Overlay {
            data_dir,
            case,
            out,
            checkpoint,
        } => overlay_cmd(data_dir, case, out, checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
