//! `deep-disaster` command-line interface.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{resolve_config, ExperimentConfig};
use crate::data::{
    index_dataset, load_batch, make_synthetic_dataset, read_manifest, DatasetIndex, Label, Split, SyntheticSpec,
    MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_class, evaluate_unseen, render_report, EvalFragment, EvalMode};
use crate::localization::{
    export_heatmap, saliency, saliency_quality, write_metrics_csv, SaliencyMethod, SaliencyMetric, SaliencyModel,
};
use crate::meta::{write_text_with_meta, Meta};
use crate::model::Role;
use crate::scoring::{score_split, write_scores_csv, ScoringModel};
use crate::training::{
    load_checkpoint_as, pretrain_teacher, run_ablation, train_student, AblationKind, Checkpoint, TrainOptions,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_FLOOR: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "deep-disaster",
    version,
    about = "Unsupervised damage detection and localization by student-teacher GAN distillation"
)]
pub struct Cli {
    /// TOML config file; keys it omits keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lambda_kg=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Seed for every random choice (overrides the config).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with a defect manifest.
    Synth(SynthArgs),
    /// Train a teacher pair on no-damage training images.
    Pretrain(PretrainArgs),
    /// Distill a student from a pretrained teacher.
    Train(TrainArgs),
    /// Score a split and write the scores CSV.
    Score(ScoreArgs),
    /// Write saliency heatmaps for test images.
    Localize(LocalizeArgs),
    /// AUC-ROC per class, optionally on unseen classes.
    Eval(EvalArgs),
    /// Train and compare the variants of one ablation.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    pub normal: u64,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub anomalous: u64,
    #[arg(long, default_value = "synthetic")]
    pub class: String,
    #[arg(long, default_value_t = 10)]
    pub defect_min: usize,
    #[arg(long, default_value_t = 20)]
    pub defect_max: usize,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root (`<class>/<damage|no_damage>/<image>`).
    #[arg(long)]
    pub data: PathBuf,
    /// Restrict to one class.
    #[arg(long)]
    pub class: Option<String>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Teacher epochs (overrides the config).
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Student epochs (overrides the config).
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub student: PathBuf,
    #[arg(long)]
    pub teacher: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "vanilla", value_parser = ["vanilla", "smoothgrad", "guided"])]
    pub method: String,
    /// SmoothGrad samples (overrides the config).
    #[arg(long)]
    pub n: Option<usize>,
    /// SmoothGrad noise as a fraction of the input range (overrides the config).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Only damage-labelled test images.
    #[arg(long)]
    pub damage_only: bool,
    /// At most this many images.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `CLASS=STUDENT.ckpt,TEACHER.ckpt` for a model trained on CLASS. Repeatable.
    #[arg(long = "model", value_name = "CLASS=STUDENT,TEACHER", required = true)]
    pub models: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    /// Also score each class with the models of the other classes.
    #[arg(long)]
    pub unseen: bool,
    /// Exit with status 3 if any AUC falls below this.
    #[arg(long)]
    pub floor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_parser = ["training_structure", "student_size", "critical_layers"])]
    pub kind: String,
    #[command(flatten)]
    pub data: DataArgs,
    /// Reuse this pretrained teacher instead of pretraining one per class.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

/// Parse and run; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let command_line = args.iter().map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>().join(" ");
    match execute(&cli, &command_line) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidConfig(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = resolve_config(cli.config.as_deref(), std::env::vars(), &cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn index(args: &DataArgs, cfg: &ExperimentConfig) -> Result<DatasetIndex> {
    let idx = index_dataset(&args.data, cfg.train_fraction, cfg.seed)?;
    match &args.class {
        Some(c) => {
            let f = idx.filter_class(c);
            if f.is_empty() {
                return Err(Error::Data(format!("class {c} not found under {}", args.data.display())));
            }
            Ok(f)
        }
        None => Ok(idx),
    }
}

fn load_models(args: &ModelArgs) -> Result<(Checkpoint, Checkpoint)> {
    Ok((load_checkpoint_as(&args.student, Role::Student)?, load_checkpoint_as(&args.teacher, Role::Teacher)?))
}

fn execute(cli: &Cli, command_line: &str) -> Result<i32> {
    let cfg = resolve(cli)?;
    let meta = Meta::new(command_line, cfg.hash());
    let out = &cli.out;
    match &cli.command {
        Command::Synth(a) => {
            let spec = SyntheticSpec {
                count_normal: a.normal as usize,
                count_anomalous: a.anomalous as usize,
                image_size: cfg.image_size,
                channels: cfg.channels,
                class_name: a.class.clone(),
                defect_min: a.defect_min,
                defect_max: a.defect_max,
                train_fraction: cfg.train_fraction,
                seed: cfg.seed,
                ..SyntheticSpec::default()
            };
            let idx = make_synthetic_dataset(&spec, out, &meta)?;
            let c = idx.counts();
            println!(
                "wrote {} images to {} (train {}, test {}: {} no_damage, {} damage)",
                idx.len(),
                out.display(),
                c.train,
                c.test,
                c.test_no_damage,
                c.test_damage
            );
        }
        Command::Pretrain(a) => {
            let cfg = ExperimentConfig { teacher_epochs: a.epochs.unwrap_or(cfg.teacher_epochs), ..cfg };
            let data = index(&a.data, &cfg)?;
            let opts = train_options(out, "teacher", &meta);
            let o = pretrain_teacher(&cfg, &data, &opts)?;
            println!("teacher checkpoint {} ({} epochs)", out.join("teacher.ckpt").display(), o.checkpoint.epoch);
        }
        Command::Train(a) => {
            let cfg = ExperimentConfig { epochs: a.epochs.unwrap_or(cfg.epochs), ..cfg };
            let teacher = load_checkpoint_as(&a.teacher, Role::Teacher)?;
            let data = index(&a.data, &cfg)?;
            let opts = train_options(out, "student", &meta);
            let o = train_student(&cfg, &teacher, &data, &opts)?;
            println!("student checkpoint {} ({} epochs)", out.join("student.ckpt").display(), o.checkpoint.epoch);
        }
        Command::Score(a) => {
            let (s, t) = load_models(&a.model)?;
            let data = index(&a.data, &s.config)?;
            let model = ScoringModel::distilled(&s, &t.networks)?;
            let scores = score_split(&model, &data, Split::Test)?;
            let path = out.join("scores.csv");
            write_scores_csv(&path, &scores, &meta)?;
            println!("{} scores -> {}", scores.len(), path.display());
        }
        Command::Localize(a) => localize(a, &cfg, out, &meta)?,
        Command::Eval(a) => return eval(a, out, &meta),
        Command::Ablate(a) => {
            let kind: AblationKind = a.kind.parse()?;
            let data = index(&a.data, &cfg)?;
            let teacher = a.teacher.as_deref().map(|p| load_checkpoint_as(p, Role::Teacher)).transpose()?;
            let table = run_ablation(kind, &cfg, &data, teacher.as_ref())?;
            write_text_with_meta(&out.join(format!("ablation_{kind}.csv")), &meta, &table.to_csv())?;
            write_text_with_meta(&out.join(format!("ablation_{kind}.txt")), &meta, &table.to_table())?;
            print!("{}", table.to_table());
        }
    }
    Ok(EXIT_OK)
}

fn train_options(out: &Path, role: &str, meta: &Meta) -> TrainOptions {
    TrainOptions {
        checkpoint_path: Some(out.join(format!("{role}.ckpt"))),
        log_path: Some(out.join(format!("{role}_log.csv"))),
        meta: Some(meta.clone()),
        progress: true,
    }
}

fn localize(a: &LocalizeArgs, cfg: &ExperimentConfig, out: &Path, meta: &Meta) -> Result<()> {
    let method: SaliencyMethod = a.method.parse()?;
    let (s, t) = load_models(&a.model)?;
    let mut scfg = s.config.clone();
    scfg.smoothgrad_samples = a.n.unwrap_or(cfg.smoothgrad_samples);
    scfg.smoothgrad_sigma_fraction = a.sigma.unwrap_or(cfg.smoothgrad_sigma_fraction);
    scfg.channel_reduction = cfg.channel_reduction;
    let scfg = scfg.validated()?;
    let data = index(&a.data, &s.config)?;
    let boxes = match read_manifest(&a.data.data.join(MANIFEST_FILE)) {
        Ok(b) => b,
        Err(Error::Io { .. }) => BTreeMap::new(),
        Err(e) => return Err(e),
    };
    let alphas = s.alphas.ok_or_else(|| Error::Invalid("student checkpoint has no calibrated alpha".into()))?;
    let model = SaliencyModel { config: &scfg, student: &s.networks, teacher: Some(&t.networks), alphas };
    let mut ids: Vec<String> = data
        .records()
        .iter()
        .filter(|r| r.split == Split::Test && (!a.damage_only || r.label == Label::Damage))
        .map(|r| r.sample_id.clone())
        .collect();
    if let Some(n) = a.limit {
        ids.truncate(n);
    }
    let dir = out.join("heatmaps").join(method.to_string());
    let mut metrics = Vec::new();
    for (k, id) in ids.iter().enumerate() {
        let batch = load_batch(&data, std::slice::from_ref(id), &scfg)?;
        let map = saliency(&model, method, id, &batch.pixels, scfg.seed.wrapping_add(k as u64))?;
        export_heatmap(&map, &batch.pixels, &dir.join(format!("{}.png", id.replace('/', "__"))), meta)?;
        if let Some(b) = boxes.get(id) {
            metrics.push(SaliencyMetric {
                sample_id: id.clone(),
                method,
                ratio: saliency_quality(&map.map, map.size, b)?,
            });
        }
    }
    let params = match method {
        SaliencyMethod::SmoothGrad => {
            format!(" (n={}, sigma={})", scfg.smoothgrad_samples, scfg.smoothgrad_sigma_fraction)
        }
        _ => String::new(),
    };
    write_metrics_csv(&out.join(format!("saliency_{method}.csv")), &metrics, meta)?;
    println!("{} {method}{params} heatmaps -> {}", ids.len(), dir.display());
    Ok(())
}

fn parse_model_spec(spec: &str) -> Result<(String, PathBuf, PathBuf)> {
    let bad = || Error::Config(format!("--model `{spec}` is not CLASS=STUDENT,TEACHER"));
    let (class, paths) = spec.split_once('=').ok_or_else(bad)?;
    let (s, t) = paths.split_once(',').ok_or_else(bad)?;
    if class.is_empty() || s.is_empty() || t.is_empty() {
        return Err(bad());
    }
    Ok((class.to_string(), PathBuf::from(s), PathBuf::from(t)))
}

fn eval(a: &EvalArgs, out: &Path, meta: &Meta) -> Result<i32> {
    let mut models = BTreeMap::new();
    for spec in &a.models {
        let (class, s, t) = parse_model_spec(spec)?;
        let pair = (load_checkpoint_as(&s, Role::Student)?, load_checkpoint_as(&t, Role::Teacher)?);
        models.insert(class, pair);
    }
    let first = &models.values().next().expect("at least one model").0.config;
    let data = index_dataset(&a.data, first.train_fraction, first.seed)?;
    let classes = data.classes();
    let mut fragments: Vec<EvalFragment> = Vec::new();
    for (class, (s, t)) in &models {
        if classes.contains(class) {
            let (f, _) = evaluate_class(s, t, &data, class)?;
            fragments.push(f);
        }
    }
    if a.unseen {
        for class in &classes {
            if models.keys().any(|c| c != class) {
                fragments.push(evaluate_unseen(&models, class, &data)?);
            }
        }
    }
    if fragments.is_empty() {
        return Err(Error::Data("none of the model classes are in the dataset".into()));
    }
    let report = render_report(&fragments, out, meta)?;
    print!("{}", report.table());
    if let Some(floor) = a.floor {
        let low: Vec<_> = fragments.iter().filter(|f| f.auc < floor).collect();
        if !low.is_empty() {
            for f in low {
                let mode = if f.mode == EvalMode::Seen { "seen" } else { "unseen" };
                eprintln!("AUC {:.4} for {} ({mode}) is below the floor {floor}", f.auc, f.class);
            }
            return Ok(EXIT_FLOOR);
        }
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["deep-disaster", "synth", "--normal", "0"]), EXIT_USAGE);
        assert_eq!(run(["deep-disaster", "train", "--data", "x"]), EXIT_USAGE);
        assert_eq!(run(["deep-disaster", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["deep-disaster", "--set", "nope=1", "synth"]), EXIT_USAGE);
        assert_eq!(run(["deep-disaster", "--seed", "18446744073709551615", "synth"]), EXIT_USAGE);
    }

    #[test]
    fn model_specs() {
        let (c, s, t) = parse_model_spec("ruby=s.ckpt,t.ckpt").unwrap();
        assert_eq!((c.as_str(), s, t), ("ruby", PathBuf::from("s.ckpt"), PathBuf::from("t.ckpt")));
        assert!(parse_model_spec("ruby=s.ckpt").is_err());
        assert!(parse_model_spec("=a,b").is_err());
    }
}
