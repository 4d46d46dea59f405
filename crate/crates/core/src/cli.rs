//! Command-line entry points.
//!
//! Exit codes: 0 on success, 1 for runtime or validation failures, 2 for
//! usage errors. Progress goes to stderr; machine-readable outputs go to
//! files under `out.dir`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{run_ablation, Axis};
use crate::config::{parse_assignment, RunConfig};
use crate::data::dataset::{restrict_semantic_classes, DatasetManifest, Sample, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, write_predictions, ModelPredictor, Protocol};
use crate::interpret::explain;
use crate::model::{Pathway, SceneNet, FUSION, RGB, RGB_HEAD, SEMANTIC, SEMANTIC_HEAD};
use crate::toy;
use crate::training::{train_stage, Checkpoint, Dependencies, EpochLog, Stage, StageData};
use crate::util::atomic_write;

#[derive(Debug, Parser)]
#[command(name = "semattn", version, about = "Two-branch scene recognition with semantic attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic toy dataset to `data.root`.
    Generate(GenerateArgs),
    /// Train one stage and write `<stage>.ckpt` plus `<stage>_log.jsonl`.
    Train(TrainArgs),
    /// Score a checkpoint on the validation split: `metrics.json` and `predictions.jsonl`.
    Eval(EvalArgs),
    /// Train and compare the variants along one ablation axis.
    Ablate(AblateArgs),
    /// Class activation maps and the object-scene correlation report.
    Explain(ExplainArgs),
    /// Print the resolved configuration in config-file format.
    Config(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_set)]
    pub set: Vec<(String, String)>,
    /// Dataset root (`data.root`).
    #[arg(long, value_name = "DIR")]
    pub data_root: Option<PathBuf>,
    /// Output directory (`out.dir`).
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Global seed (`train.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// `toy.ambiguity`
    #[arg(long)]
    pub ambiguity: Option<f64>,
    /// `toy.num_scene_classes`
    #[arg(long)]
    pub scene_classes: Option<usize>,
    /// `toy.num_semantic_classes`
    #[arg(long)]
    pub semantic_classes: Option<usize>,
    /// `toy.samples_per_class`
    #[arg(long)]
    pub samples_per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// `train.stage`: rgb, semantic or fusion.
    #[arg(long)]
    pub stage: Option<String>,
    /// `checkpoint.resume`
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// `checkpoint.eval`
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// `eval.protocol`: single or ten_crop.
    #[arg(long)]
    pub protocol: Option<String>,
    /// `eval.pathway`: rgb, semantic or fused.
    #[arg(long)]
    pub pathway: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// `ablate.axis`: mechanism, fusion_depth, semantic_backbone or semantic_subset.
    #[arg(long)]
    pub axis: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// `checkpoint.eval`
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// `explain.sample_ids`, comma separated.
    #[arg(long, value_name = "IDS")]
    pub sample_ids: Option<String>,
    /// `explain.pathway`: rgb, semantic or fused.
    #[arg(long)]
    pub pathway: Option<String>,
}

fn parse_set(s: &str) -> std::result::Result<(String, String), String> {
    parse_assignment(s).map_err(|e| e.to_string())
}

/// Parse `args`, run the command and map the outcome to an exit code.
pub fn main_with_args<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Config(a) => {
            print!("{}", resolve(&a, Vec::new())?.to_text()?);
            Ok(())
        }
    }
}

/// Flags become overrides applied after the config file and `--set`.
fn resolve(common: &CommonArgs, flags: Vec<(&str, Option<String>)>) -> Result<RunConfig> {
    let mut sets = common.set.clone();
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let all = [
        ("data.root", path(&common.data_root)),
        ("out.dir", path(&common.out_dir)),
        ("train.seed", common.seed.map(|s| s.to_string())),
    ];
    for (k, v) in all.into_iter().chain(flags) {
        if let Some(v) = v {
            sets.push((k.to_string(), v));
        }
    }
    RunConfig::load(common.config.as_deref(), &sets, RunConfig::default_data_root())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let cfg = resolve(
        &a.common,
        vec![
            ("toy.ambiguity", a.ambiguity.map(|v| v.to_string())),
            ("toy.num_scene_classes", a.scene_classes.map(|v| v.to_string())),
            ("toy.num_semantic_classes", a.semantic_classes.map(|v| v.to_string())),
            ("toy.samples_per_class", a.samples_per_class.map(|v| v.to_string())),
            ("toy.seed", a.common.seed.map(|v| v.to_string())),
        ],
    )?;
    log::info!("generating toy dataset in {}", cfg.data.root.display());
    let manifest = toy::generate(&cfg.toy, &cfg.data.root)?;
    eprintln!(
        "wrote {} train and {} val samples to {}",
        manifest.train.len(),
        manifest.val.len(),
        cfg.data.root.display()
    );
    Ok(())
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<(DatasetManifest, Vec<Sample>)> {
    let mut m = DatasetManifest::load(&cfg.data.root, split)?;
    if cfg.data.semantic_subset > 0 {
        m = restrict_semantic_classes(&m, cfg.data.semantic_subset, cfg.data.subset_seed)?;
    }
    log::info!("loading {} {} samples from {}", m.len(), split.as_str(), cfg.data.root.display());
    let samples = m.load_all()?;
    Ok((m, samples))
}

fn load_dependency(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "{what} checkpoint {} not found; train that stage first",
            path.display()
        )));
    }
    Checkpoint::load(path)
}

fn write_jsonl(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut out = Vec::new();
    for l in logs {
        serde_json::to_writer(&mut out, l).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        out.push(b'\n');
    }
    atomic_write(path, &out)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let resume = a.resume.map(|p| p.display().to_string());
    let cfg = resolve(&a.common, vec![("train.stage", a.stage), ("checkpoint.resume", resume)])?;
    let stage = cfg.train.stage;
    // fail on missing dependencies before loading any data
    let deps = match stage {
        Stage::Fusion => {
            let rgb = cfg.checkpoint.rgb.clone().unwrap_or_else(|| cfg.out.dir.join("branch_rgb.ckpt"));
            let sem = cfg.checkpoint.semantic.clone().unwrap_or_else(|| cfg.out.dir.join("branch_semantic.ckpt"));
            (Some(load_dependency(&rgb, "rgb branch")?), Some(load_dependency(&sem, "semantic branch")?))
        }
        _ => (None, None),
    };
    let resume = cfg.checkpoint.resume.as_deref().map(|p| load_dependency(p, "resume")).transpose()?;

    let (train_m, train) = load_split(&cfg, Split::Train)?;
    let (_, val) = load_split(&cfg, Split::Val)?;
    let model_cfg = cfg.model_config(train_m.num_scene_classes(), train_m.num_semantic_classes)?;

    let log_path = cfg.out.dir.join(format!("{}_log.jsonl", stage.name()));
    let mut history = Vec::new();
    let mut on_epoch = |l: &EpochLog| {
        eprintln!(
            "[{}] epoch {:>3} {:<5} loss {:.4} top1 {:6.2} mca {:6.2} lr {:.2e} ({:.1}s)",
            stage.name(),
            l.epoch,
            l.split,
            l.loss,
            l.top1,
            l.mca,
            l.lr,
            l.wall_time_s
        );
        history.push(l.clone());
        if let Err(e) = write_jsonl(&log_path, &history) {
            log::warn!("could not write {}: {e}", log_path.display());
        }
    };
    let outcome = train_stage(
        &model_cfg,
        &cfg.train,
        StageData {
            train: &train,
            val: (!val.is_empty()).then_some(val.as_slice()),
        },
        Dependencies {
            rgb: deps.0.as_ref(),
            semantic: deps.1.as_ref(),
            resume: resume.as_ref(),
        },
        &mut on_epoch,
    )?;
    let ckpt_path = cfg.out.dir.join(format!("{}.ckpt", stage.name()));
    outcome.checkpoint.save(&ckpt_path)?;
    write_jsonl(&log_path, &outcome.history)?;
    atomic_write(&cfg.out.dir.join(format!("{}_config.txt", stage.name())), cfg.to_text()?.as_bytes())?;
    eprintln!("wrote {}", ckpt_path.display());
    Ok(())
}

/// Load a checkpoint into a fresh model.
fn restore_model(path: &Path) -> Result<(SceneNet<f32>, Stage)> {
    let ckpt = load_dependency(path, "model")?;
    let stage = ckpt.header.stage;
    let mut model = SceneNet::new(ckpt.header.model_config.clone(), ckpt.header.seed)?;
    ckpt.restore(&mut model, stage.saved())?;
    Ok((model, stage))
}

fn check_pathway(stage: Stage, pathway: Pathway) -> Result<()> {
    let needed: &[&str] = match pathway {
        Pathway::Rgb => &[RGB, RGB_HEAD],
        Pathway::Semantic => &[SEMANTIC, SEMANTIC_HEAD],
        Pathway::Fused => &[RGB, SEMANTIC, FUSION],
    };
    if needed.iter().all(|c| stage.saved().contains(c)) {
        Ok(())
    } else {
        Err(Error::Dependency(format!(
            "a {} checkpoint cannot score the {} pathway",
            stage.name(),
            pathway.name()
        )))
    }
}

fn check_dataset(model: &SceneNet<f32>, m: &DatasetManifest) -> Result<()> {
    let (k, l) = (model.config.num_scene_classes(), model.config.num_semantic_classes());
    if (k, l) != (m.num_scene_classes(), m.num_semantic_classes) {
        return Err(Error::shape(
            "dataset classes (K, L)",
            format!("({k}, {l}) from the checkpoint"),
            format!("({}, {})", m.num_scene_classes(), m.num_semantic_classes),
        ));
    }
    Ok(())
}

fn eval_checkpoint(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.checkpoint
        .eval
        .clone()
        .ok_or_else(|| Error::config("checkpoint.eval", "no checkpoint given (use --checkpoint)"))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = a.checkpoint.map(|p| p.display().to_string());
    let cfg = resolve(
        &a.common,
        vec![("checkpoint.eval", ckpt), ("eval.protocol", a.protocol), ("eval.pathway", a.pathway)],
    )?;
    let (mut model, stage) = restore_model(&eval_checkpoint(&cfg)?)?;
    let pathway = cfg.eval.pathway.unwrap_or(stage.pathway());
    check_pathway(stage, pathway)?;
    let (m, val) = load_split(&cfg, Split::Val)?;
    check_dataset(&model, &m)?;
    let (records, report) = evaluate(
        &mut ModelPredictor {
            model: &mut model,
            pathway,
        },
        &val,
        cfg.eval.protocol,
        cfg.eval.batch_size,
    )?;
    report.save(&cfg.out.dir.join("metrics.json"))?;
    write_predictions(&cfg.out.dir.join("predictions.jsonl"), &records)?;
    let protocol = match cfg.eval.protocol {
        Protocol::Single => "single crop",
        Protocol::TenCrop => "ten crop",
    };
    eprintln!(
        "{} pathway, {protocol}, {} samples: top1 {:.2} top5 {:.2} mca {:.2}",
        pathway.name(),
        report.n_samples,
        report.top1,
        report.top5,
        report.mca
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = resolve(&a.common, vec![("ablate.axis", a.axis)])?;
    let (m, train) = load_split(&cfg, Split::Train)?;
    let (_, val) = load_split(&cfg, Split::Val)?;
    let base = cfg.model_config(m.num_scene_classes(), m.num_semantic_classes)?;
    let axis: Axis = cfg.ablate.axis;
    let mut log = |row: &str, l: &EpochLog| {
        if l.split == "val" {
            eprintln!("[{row}] epoch {} val top1 {:.2} mca {:.2}", l.epoch, l.top1, l.mca);
        }
    };
    let table = run_ablation(axis, &base, &cfg.train, &train, &val, &cfg.ablate.seeds, &cfg.ablate.subset_sizes, &mut log)?;
    table.save(&cfg.out.dir)?;
    eprint!("{}", table.to_markdown());
    Ok(())
}

fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let ckpt = a.checkpoint.map(|p| p.display().to_string());
    let cfg = resolve(
        &a.common,
        vec![
            ("checkpoint.eval", ckpt),
            ("explain.sample_ids", a.sample_ids),
            ("explain.pathway", a.pathway),
        ],
    )?;
    let (mut model, stage) = restore_model(&eval_checkpoint(&cfg)?)?;
    let pathway = cfg.explain.pathway;
    check_pathway(stage, pathway)?;
    let (m, val) = load_split(&cfg, Split::Val)?;
    check_dataset(&model, &m)?;
    let samples = if cfg.explain.sample_ids.is_empty() {
        val
    } else {
        cfg.explain
            .sample_ids
            .iter()
            .map(|id| {
                val.iter()
                    .find(|s| &s.id == id)
                    .cloned()
                    .ok_or_else(|| Error::config("explain.sample_ids", format!("no validation sample `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let names: Vec<String> = (0..m.num_semantic_classes).map(|l| m.semantic_label_name(l)).collect();
    let dir = cfg.out.dir.join("explain");
    let ex = explain(&mut model, &samples, pathway, &names, m.label_partition(), cfg.eval.batch_size, Some(&dir))?;
    eprintln!("wrote {} activation maps to {}", ex.maps.len(), dir.display());
    for e in ex.report.iter().take(10) {
        eprintln!("  {:<24} {:?} {:.4}", e.label_name, e.group, e.weight);
    }
    Ok(())
}
