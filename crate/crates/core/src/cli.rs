//! Batch front end. Each subcommand loads every input before writing
//! anything, writes outputs atomically and prints a one-line summary.
//!
//! Exit codes: 2 missing input, 3 parse error, 4 invalid configuration,
//! 5 internal invariant violation, 1 anything else.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Deserialize;

use crate::classify::{load_external_scores, ClassifierKind, ScoreVector, SvmParams, TrainedModel};
use crate::dimred::Reducer;
use crate::error::{Error, Result};
use crate::features::{DescriptorConfig, FeatureLayout};
use crate::imaging::GrayImage;
use crate::pipeline::{
    compare_metrics, extract_row, extraction_layout, label_indices, preprocess_image, prune_mask, run_cascade,
    split_by_subject, ComparisonTable, DatasetManifest, EvalReport, FeatureTable, Instance, PreprocessOptions,
    PruneLabel, Split, DEFAULT_PRECISION_FLOOR,
};
use crate::reliability::{calibrate_thresholds, MetricId, Strategy, ThresholdTable, DEFAULT_RECALL_CUTOFF};
use crate::synthgen::{generate, write_corpus, SynthSpec};
use crate::textio::{read_text, write_atomic};

#[derive(Debug, Parser)]
#[command(name = "karyogate", version, about = "Reliability-gated chromosome classification")]
pub struct Cli {
    #[command(flatten)]
    pub tunables: Tunables,

    /// TOML file with defaults for any of the global flags; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by every subcommand, settable by flag or config file.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tunables {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub metric: Option<MetricId>,
    #[arg(long, global = true)]
    pub recall_cutoff: Option<f64>,
    #[arg(long, global = true)]
    pub strategy: Option<Strategy>,
    /// Descriptor keypoints: 5, 25 or 50.
    #[arg(long, global = true)]
    pub keypoints: Option<usize>,
    /// Descriptor orientation bins: 32, 64, 128 or 256.
    #[arg(long, global = true)]
    pub orientations: Option<usize>,
    #[arg(long, global = true)]
    pub dr_mid: Option<usize>,
    #[arg(long, global = true)]
    pub dr_out: Option<usize>,
    #[arg(long, global = true)]
    pub classifier: Option<ClassifierKind>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Generator settings; file only.
    #[arg(skip)]
    pub synth: Option<SynthSpec>,
}

impl Tunables {
    fn or(self, file: Tunables) -> Tunables {
        Tunables {
            seed: self.seed.or(file.seed),
            metric: self.metric.or(file.metric),
            recall_cutoff: self.recall_cutoff.or(file.recall_cutoff),
            strategy: self.strategy.or(file.strategy),
            keypoints: self.keypoints.or(file.keypoints),
            orientations: self.orientations.or(file.orientations),
            dr_mid: self.dr_mid.or(file.dr_mid),
            dr_out: self.dr_out.or(file.dr_out),
            classifier: self.classifier.or(file.classifier),
            k: self.k.or(file.k),
            threads: self.threads.or(file.threads),
            out_dir: self.out_dir.or(file.out_dir),
            synth: self.synth.or(file.synth),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Pruner,
    Identifier,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScorerArgs {
    /// Identifier model from `train --stage identifier`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// External score file (first column is the manifest path) for
    /// `--classifier external`; columns are labels 1..=n.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus with a subject-level split.
    Generate {
        #[arg(long, default_value_t = 50)]
        n_per_class: usize,
        /// Train, valid and test fractions.
        #[arg(long, value_delimiter = ',', default_values_t = [0.6, 0.2, 0.2])]
        splits: Vec<f64>,
    },
    /// Normalize, rotate upright and crop every image of a manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        /// Histogram-equalize after normalization.
        #[arg(long)]
        equalize: bool,
    },
    /// Engineered features (plus descriptor) of preprocessed images.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        /// Skip the keypoint descriptor.
        #[arg(long)]
        no_descriptor: bool,
    },
    /// Fit the two-stage projection on the training split and project all rows.
    Reduce {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Fit the pruner or the identifier on the training split.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        stage: Stage,
    },
    /// Calibrate per-label thresholds on the calibration split.
    Calibrate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[arg(long, default_value = "valid", value_parser = parse_split)]
        split: Split,
    },
    /// Run the cascade on the evaluation split and write the report.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[arg(long)]
        thresholds: PathBuf,
        #[arg(long)]
        pruner: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Calibrate and evaluate under all five metrics.
    CompareMetrics {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[arg(long)]
        pruner: Option<PathBuf>,
        #[arg(long, default_value = "valid", value_parser = parse_split)]
        calibrate_split: Split,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long, default_value_t = DEFAULT_PRECISION_FLOOR)]
        precision_floor: f64,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse()
}

/// Merged and validated settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub metric: MetricId,
    pub recall_cutoff: f64,
    pub strategy: Strategy,
    pub descriptor: DescriptorConfig,
    pub dr_mid: Option<usize>,
    pub dr_out: Option<usize>,
    pub classifier: ClassifierKind,
    pub k: usize,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub synth: SynthSpec,
}

pub const DEFAULT_K: usize = 5;

impl RunConfig {
    pub fn from_tunables(t: Tunables) -> Result<Self> {
        let defaults = DescriptorConfig::default();
        let descriptor = DescriptorConfig::new(
            t.keypoints.unwrap_or(defaults.n_keypoints),
            t.orientations.unwrap_or(defaults.n_orientations),
            defaults.gradient_floor,
        )?;
        let recall_cutoff = t.recall_cutoff.unwrap_or(DEFAULT_RECALL_CUTOFF);
        if !(0.0..=1.0).contains(&recall_cutoff) {
            return Err(Error::InvalidConfig(format!("recall cutoff {recall_cutoff} outside [0, 1]")));
        }
        let k = t.k.unwrap_or(DEFAULT_K);
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if t.threads == Some(0) {
            return Err(Error::InvalidConfig("threads must be at least 1".into()));
        }
        if t.dr_mid == Some(0) || t.dr_out == Some(0) {
            return Err(Error::InvalidConfig("projection dimensions must be positive".into()));
        }
        let synth = t.synth.unwrap_or_default();
        let seed = t.seed.unwrap_or(synth.seed);
        let synth = SynthSpec { seed, ..synth };
        synth.clone().resolved()?;
        Ok(Self {
            seed,
            metric: t.metric.unwrap_or(MetricId::III),
            recall_cutoff,
            strategy: t.strategy.unwrap_or(Strategy::RecallSweep),
            descriptor,
            dr_mid: t.dr_mid,
            dr_out: t.dr_out,
            classifier: t.classifier.unwrap_or(ClassifierKind::Svm),
            k,
            threads: t.threads,
            out_dir: t.out_dir,
            synth,
        })
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("--out-dir is required".into()))
    }
}

pub fn load_config_file(path: &Path) -> Result<Tunables> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| {
        let line = e
            .span()
            .map_or(0, |s| text[..s.start.min(text.len())].lines().count().max(1));
        Error::InvalidConfig(format!("{}: line {line}: {}", path.display(), e.message()))
    })
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::MissingInput(_) => 2,
        Error::Parse { .. } => 3,
        Error::InvalidConfig(_) | Error::MetricArity { .. } => 4,
        Error::Internal(_) => 5,
        _ => 1,
    }
}

/// Parses arguments, runs and returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<String> {
    let file = match &cli.config {
        Some(p) => load_config_file(p)?,
        None => Tunables::default(),
    };
    let cfg = RunConfig::from_tunables(cli.tunables.or(file))?;
    match cfg.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Internal(e.to_string()))?;
            pool.install(|| dispatch(cli.command, &cfg))
        }
        None => dispatch(cli.command, &cfg),
    }
}

fn dispatch(command: Command, cfg: &RunConfig) -> Result<String> {
    match command {
        Command::Generate { n_per_class, splits } => cmd_generate(cfg, n_per_class, &splits),
        Command::Preprocess { manifest, equalize } => cmd_preprocess(cfg, &manifest, equalize),
        Command::Extract { manifest, no_descriptor } => cmd_extract(cfg, &manifest, !no_descriptor),
        Command::Reduce { data } => cmd_reduce(cfg, &data),
        Command::Train { data, stage } => cmd_train(cfg, &data, stage),
        Command::Calibrate { data, scorer, split } => cmd_calibrate(cfg, &data, &scorer, split),
        Command::Evaluate {
            data,
            scorer,
            thresholds,
            pruner,
            split,
        } => cmd_evaluate(cfg, &data, &scorer, &thresholds, pruner.as_deref(), split),
        Command::CompareMetrics {
            data,
            scorer,
            pruner,
            calibrate_split,
            split,
            precision_floor,
        } => cmd_compare_metrics(cfg, &data, &scorer, pruner.as_deref(), calibrate_split, split, precision_floor),
    }
}

pub fn cmd_generate(cfg: &RunConfig, n_per_class: usize, splits: &[f64]) -> Result<String> {
    let out = cfg.out_dir()?;
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n-per-class must be positive".into()));
    }
    let corpus = generate(&cfg.synth, n_per_class)?;
    let split = split_by_subject(&corpus.manifest, splits, cfg.seed)?;
    let mut manifest = split.manifest;
    manifest.root = out.to_path_buf();
    write_corpus(&corpus, &manifest, out)?;
    let subjects: std::collections::BTreeSet<&str> = manifest.instances.iter().map(|i| i.subject.as_str()).collect();
    Ok(format!(
        "generated {} images ({} classes, {} subjects) in {}; split deviation {:.4}",
        manifest.instances.len(),
        cfg.synth.n_classes,
        subjects.len(),
        out.display(),
        split.deviation
    ))
}

/// Output location of an instance under a new root.
fn relocated(inst: &Instance) -> String {
    let p = Path::new(&inst.path);
    if p.is_absolute() {
        format!("images/{}", p.file_name().map_or("image".into(), |f| f.to_string_lossy()))
    } else {
        inst.path.clone()
    }
}

pub fn cmd_preprocess(cfg: &RunConfig, manifest_path: &Path, equalize: bool) -> Result<String> {
    let out = cfg.out_dir()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let opts = PreprocessOptions {
        equalize,
        ..PreprocessOptions::default()
    };
    let results: Vec<Result<GrayImage>> = manifest
        .instances
        .par_iter()
        .map(|inst| preprocess_image(&GrayImage::load(&manifest.resolve(inst))?, &opts))
        .collect();
    let mut kept = Vec::new();
    let mut failed = 0;
    for (inst, result) in manifest.instances.iter().zip(results) {
        match result {
            Ok(img) => kept.push((Instance { path: relocated(inst), ..inst.clone() }, img)),
            Err(e @ (Error::MissingInput(_) | Error::Image(_) | Error::Io(_))) => return Err(e),
            Err(e) => {
                failed += 1;
                eprintln!("warning: skipping {}: {e}", inst.path);
            }
        }
    }
    kept.par_iter().try_for_each(|(inst, img)| img.save_png(&out.join(&inst.path)))?;
    let out_manifest = DatasetManifest {
        instances: kept.into_iter().map(|(i, _)| i).collect(),
        root: out.to_path_buf(),
    };
    out_manifest.save(&out.join("manifest.csv"))?;
    Ok(format!(
        "preprocessed {} of {} images into {} ({failed} skipped)",
        out_manifest.instances.len(),
        manifest.instances.len(),
        out.display()
    ))
}

fn layout_path(features: &Path) -> PathBuf {
    features.with_extension("layout.json")
}

pub fn cmd_extract(cfg: &RunConfig, manifest_path: &Path, descriptor: bool) -> Result<String> {
    let out = cfg.out_dir()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let desc = descriptor.then_some(&cfg.descriptor);
    let layout = extraction_layout(desc);
    let rows: Vec<Result<Vec<f64>>> = manifest
        .instances
        .par_iter()
        .map(|inst| extract_row(&GrayImage::load(&manifest.resolve(inst))?, desc))
        .collect();
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut failed = 0;
    for (inst, row) in manifest.instances.iter().zip(rows) {
        match row {
            Ok(r) => {
                ids.push(inst.path.clone());
                data.extend(r);
            }
            Err(e @ (Error::MissingInput(_) | Error::Image(_) | Error::Io(_))) => return Err(e),
            Err(e) => {
                failed += 1;
                eprintln!("warning: skipping {}: {e}", inst.path);
            }
        }
    }
    let table = FeatureTable {
        values: DMatrix::from_row_slice(ids.len(), layout.total_len(), &data),
        ids,
        columns: layout.column_names(),
    };
    let path = out.join("features.tsv");
    write_layout(&layout, &layout_path(&path))?;
    table.save(&path)?;
    Ok(format!(
        "extracted {} features for {} of {} images into {} ({failed} skipped)",
        layout.total_len(),
        table.ids.len(),
        manifest.instances.len(),
        path.display()
    ))
}

fn write_layout(layout: &FeatureLayout, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(layout).map_err(|e| Error::Internal(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Identifier instances: semi-straight or unknown prune label.
fn identifier_domain(inst: &Instance) -> bool {
    matches!(inst.prune_label, None | Some(PruneLabel::SemiStraight))
}

/// Instances of `split` passing `filter` that have a feature row.
fn available<'a>(
    manifest: &'a DatasetManifest,
    features: &FeatureTable,
    split: Split,
    filter: impl Fn(&Instance) -> bool,
) -> (Vec<&'a Instance>, DMatrix<f64>) {
    let index: BTreeMap<&str, usize> = features.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let chosen: Vec<(&Instance, usize)> = manifest
        .in_split(split)
        .filter(|i| filter(i))
        .filter_map(|i| index.get(i.path.as_str()).map(|&r| (i, r)))
        .collect();
    let x = DMatrix::from_fn(chosen.len(), features.values.ncols(), |r, c| features.values[(chosen[r].1, c)]);
    (chosen.into_iter().map(|(i, _)| i).collect(), x)
}

fn load_data(data: &DataArgs) -> Result<(DatasetManifest, FeatureTable)> {
    Ok((DatasetManifest::load(&data.manifest)?, FeatureTable::load(&data.features)?))
}

fn non_empty(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput(format!("no {what} instances with features")));
    }
    Ok(())
}

pub fn cmd_reduce(cfg: &RunConfig, data: &DataArgs) -> Result<String> {
    let out = cfg.out_dir()?;
    let (manifest, features) = load_data(data)?;
    let (train, x) = available(&manifest, &features, Split::Train, identifier_domain);
    non_empty(train.len(), "training")?;
    let y: Vec<u32> = train.iter().map(|i| i.label).collect();
    let reducer = Reducer::fit(&x, &y, cfg.dr_mid, cfg.dr_out)?;
    let z = reducer.transform(&features.values)?;
    let d = z.ncols();
    let layout = FeatureLayout::from_lengths([("projection", d)]);
    let table = FeatureTable {
        ids: features.ids.clone(),
        columns: layout.column_names(),
        values: z,
    };
    let path = out.join("features.tsv");
    reducer.save(&out.join("reducer.txt"))?;
    write_layout(&layout, &layout_path(&path))?;
    table.save(&path)?;
    Ok(format!(
        "projected {} rows from {} to {} dimensions into {}",
        table.ids.len(),
        features.values.ncols(),
        d,
        path.display()
    ))
}

pub fn cmd_train(cfg: &RunConfig, data: &DataArgs, stage: Stage) -> Result<String> {
    let out = cfg.out_dir()?;
    let (manifest, features) = load_data(data)?;
    let (rows, x) = match stage {
        Stage::Pruner => available(&manifest, &features, Split::Train, |i| i.prune_label.is_some()),
        Stage::Identifier => available(&manifest, &features, Split::Train, identifier_domain),
    };
    non_empty(rows.len(), "training")?;
    let y: Vec<u32> = match stage {
        Stage::Pruner => rows.iter().map(|i| i.prune_label.map_or(0, PruneLabel::code)).collect(),
        Stage::Identifier => rows.iter().map(|i| i.label).collect(),
    };
    let model = match cfg.classifier {
        ClassifierKind::Svm => TrainedModel::fit_svm(&x, &y, &SvmParams::default())?,
        ClassifierKind::Knn => TrainedModel::fit_knn(&x, &y, cfg.k.min(x.nrows()))?,
        ClassifierKind::External => {
            return Err(Error::InvalidConfig("external scores are imported, not trained".into()))
        }
    };
    let name = match stage {
        Stage::Pruner => "pruner.txt",
        Stage::Identifier => "identifier.txt",
    };
    let path = out.join(name);
    model.save(&path)?;
    Ok(format!(
        "trained {:?} {} on {} instances, {} labels, into {}",
        model.kind(),
        name.trim_end_matches(".txt"),
        rows.len(),
        model.class_labels().len(),
        path.display()
    ))
}

/// Identifier scores from a trained model or an external score file.
enum Scorer {
    Model(TrainedModel),
    External {
        by_id: BTreeMap<String, ScoreVector>,
        labels: Vec<u32>,
    },
}

impl Scorer {
    fn load(cfg: &RunConfig, args: &ScorerArgs) -> Result<Self> {
        match (cfg.classifier, &args.model, &args.scores) {
            (ClassifierKind::External, _, Some(path)) => {
                let rows = load_external_scores(path, true)?;
                let n = rows.first().map_or(0, |r| r.scores.n_labels());
                let mut by_id = BTreeMap::new();
                for r in rows {
                    let id = r.id.unwrap_or_default();
                    if by_id.insert(id.clone(), r.scores).is_some() {
                        return Err(Error::parse(path, 0, format!("duplicate id {id}")));
                    }
                }
                Ok(Scorer::External {
                    by_id,
                    labels: (1..=n as u32).collect(),
                })
            }
            (ClassifierKind::External, _, None) => {
                Err(Error::InvalidConfig("--classifier external needs --scores".into()))
            }
            (_, Some(path), _) => Ok(Scorer::Model(TrainedModel::load(path)?)),
            (_, None, _) => Err(Error::InvalidConfig("--model is required".into())),
        }
    }

    fn class_labels(&self) -> &[u32] {
        match self {
            Scorer::Model(m) => m.class_labels(),
            Scorer::External { labels, .. } => labels,
        }
    }

    /// Scores of the kept instances, `None` elsewhere.
    fn score(&self, rows: &[&Instance], x: &DMatrix<f64>, kept: &[bool]) -> Result<Vec<Option<ScoreVector>>> {
        match self {
            Scorer::Model(m) => crate::pipeline::score_kept(m, x, kept),
            Scorer::External { by_id, .. } => rows
                .iter()
                .zip(kept)
                .map(|(inst, &k)| {
                    k.then(|| {
                        by_id
                            .get(&inst.path)
                            .cloned()
                            .ok_or_else(|| Error::InvalidInput(format!("no external scores for {}", inst.path)))
                    })
                    .transpose()
                })
                .collect(),
        }
    }
}

fn calibrate(cfg: &RunConfig, metric: MetricId, scorer: &Scorer, rows: &[&Instance], x: &DMatrix<f64>) -> Result<ThresholdTable> {
    let scores: Vec<ScoreVector> = scorer
        .score(rows, x, &vec![true; rows.len()])?
        .into_iter()
        .map(|s| s.ok_or_else(|| Error::Internal("unscored calibration row".into())))
        .collect::<Result<_>>()?;
    let labels: Vec<u32> = rows.iter().map(|i| i.label).collect();
    let idx = label_indices(&labels, scorer.class_labels())?;
    calibrate_thresholds(&scores, &idx, scorer.class_labels(), metric, cfg.recall_cutoff, cfg.strategy)
}

pub fn cmd_calibrate(cfg: &RunConfig, data: &DataArgs, args: &ScorerArgs, split: Split) -> Result<String> {
    let out = cfg.out_dir()?;
    let (manifest, features) = load_data(data)?;
    let scorer = Scorer::load(cfg, args)?;
    let (rows, x) = available(&manifest, &features, split, identifier_domain);
    non_empty(rows.len(), "calibration")?;
    let table = calibrate(cfg, cfg.metric, &scorer, &rows, &x)?;
    let path = out.join("thresholds.txt");
    table.save(&path)?;
    let (feasible, fallback, unset) = crate::pipeline::thresholds_summary(&table);
    Ok(format!(
        "calibrated metric {} ({}) on {} instances: {feasible} feasible, {fallback} fallback, {unset} unset thresholds in {}",
        table.metric,
        table.strategy.name(),
        rows.len(),
        path.display()
    ))
}

fn cascade(
    scorer: &Scorer,
    pruner: Option<&TrainedModel>,
    rows: &[&Instance],
    x: &DMatrix<f64>,
    table: &ThresholdTable,
) -> Result<EvalReport> {
    if table.class_labels != scorer.class_labels() {
        return Err(Error::InvalidInput(format!(
            "thresholds cover labels {:?}, identifier {:?}",
            table.class_labels,
            scorer.class_labels()
        )));
    }
    let kept = match pruner {
        Some(p) => prune_mask(p, x)?,
        None => vec![true; rows.len()],
    };
    let stage2 = scorer.score(rows, x, &kept)?;
    let labels: Vec<u32> = rows.iter().map(|i| i.label).collect();
    run_cascade(&labels, &stage2, table)
}

fn load_pruner(path: Option<&Path>) -> Result<Option<TrainedModel>> {
    path.map(TrainedModel::load).transpose()
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    data: &DataArgs,
    args: &ScorerArgs,
    thresholds: &Path,
    pruner: Option<&Path>,
    split: Split,
) -> Result<String> {
    let out = cfg.out_dir()?;
    let table = ThresholdTable::load(thresholds)?;
    let (manifest, features) = load_data(data)?;
    let scorer = Scorer::load(cfg, args)?;
    let pruner = load_pruner(pruner)?;
    let (rows, x) = available(&manifest, &features, split, |_| true);
    non_empty(rows.len(), "evaluation")?;
    let report = cascade(&scorer, pruner.as_ref(), &rows, &x, &table)?;
    let json = report.to_json()?;
    write_atomic(&out.join("report.txt"), report.to_table().as_bytes())?;
    write_atomic(&out.join("report.json"), json.as_bytes())?;
    Ok(format!(
        "evaluated {} instances (metric {}): mean precision gated {} ungated {}, rejection rate {}; report in {}",
        report.instances,
        report.metric,
        crate::pipeline::fmt_fixed(report.mean_gated_precision()),
        crate::pipeline::fmt_fixed(report.mean_ungated_precision()),
        crate::pipeline::fmt_fixed(report.rejection_rate),
        out.join("report.txt").display()
    ))
}

pub fn cmd_compare_metrics(
    cfg: &RunConfig,
    data: &DataArgs,
    args: &ScorerArgs,
    pruner: Option<&Path>,
    calibrate_split: Split,
    split: Split,
    precision_floor: f64,
) -> Result<String> {
    let out = cfg.out_dir()?;
    if !(0.0..=1.0).contains(&precision_floor) {
        return Err(Error::InvalidConfig(format!("precision floor {precision_floor} outside [0, 1]")));
    }
    let (manifest, features) = load_data(data)?;
    let scorer = Scorer::load(cfg, args)?;
    let pruner = load_pruner(pruner)?;
    let (cal_rows, cal_x) = available(&manifest, &features, calibrate_split, identifier_domain);
    let (rows, x) = available(&manifest, &features, split, |_| true);
    non_empty(cal_rows.len(), "calibration")?;
    non_empty(rows.len(), "evaluation")?;
    let n_labels = scorer.class_labels().len();
    let metrics: Vec<MetricId> = MetricId::ALL
        .into_iter()
        .filter(|m| m.min_labels() <= n_labels)
        .collect();
    let reports = metrics
        .iter()
        .map(|&m| {
            let table = calibrate(cfg, m, &scorer, &cal_rows, &cal_x)?;
            cascade(&scorer, pruner.as_ref(), &rows, &x, &table)
        })
        .collect::<Result<Vec<_>>>()?;
    let comparison = compare_metrics(&reports, precision_floor);
    let text = ComparisonTable {
        rows: &comparison,
        precision_floor,
    }
    .to_string();
    let mut json = serde_json::to_string_pretty(&serde_json::json!({
        "precision_floor": precision_floor,
        "metrics": comparison,
        "reports": reports,
    }))
    .map_err(|e| Error::Internal(e.to_string()))?;
    json.push('\n');
    write_atomic(&out.join("compare.txt"), text.as_bytes())?;
    write_atomic(&out.join("compare.json"), json.as_bytes())?;
    let best = comparison
        .iter()
        .filter(|r| r.best_improvement.is_some())
        .max_by(|a, b| a.labels_improved.cmp(&b.labels_improved))
        .map_or("none".to_string(), |r| format!("{} ({} labels improved)", r.metric, r.labels_improved));
    Ok(format!(
        "compared {} metrics on {} instances; most labels improved: {best}; table in {}",
        comparison.len(),
        rows.len(),
        out.join("compare.txt").display()
    ))
}
