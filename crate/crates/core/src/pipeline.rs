//! End-to-end run: data → baseline → central-domain selection → full training
//! → held-out evaluation → projection plot, plus the loss-ablation sweep.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::TrainConfig;
use crate::data_synth::{derive_seed, generate_dataset, Dataset, DatasetManifest, GenerateConfig};
use crate::domain_align::{central_domain_select, pairwise_domain_distances, DomainDistanceMatrix, EstimatorConfig};
use crate::error::{Error, Result, StageExt};
use crate::evaluation::{embed_dataset, evaluate_protocol, ProtocolReport};
use crate::losses::LossWeights;
use crate::model::Model;
use crate::plot::plot_features;
use crate::trainer::{train, LossTrace, LOSS_LOG};

pub const RUN_MANIFEST: &str = "run.tsv";
pub const MATRIX_FILE: &str = "matrix.tsv";
pub const FEATURES_FILE: &str = "feats.bin";
pub const REPORT_FILE: &str = "report.tsv";
pub const PROJECTION_CSV: &str = "proj.csv";
pub const PROJECTION_PNG: &str = "proj.png";
pub const ABLATION_FILE: &str = "ablation.tsv";

/// Loss configurations of the ablation, each adding one term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Ide,
    IdeTriplet,
    IdeTripletDa,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ide, Variant::IdeTriplet, Variant::IdeTripletDa, Variant::Full];

    /// `base` with the terms this variant leaves out switched off.
    pub fn weights(self, base: &LossWeights) -> LossWeights {
        let mut w = *base;
        if self < Variant::IdeTriplet {
            w.lambda1 = 0.0;
        }
        if self < Variant::IdeTripletDa {
            w.lambda2 = 0.0;
        }
        if self < Variant::Full {
            w.lambda3 = 0.0;
        }
        w
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ide => "ide",
            Variant::IdeTriplet => "ide+tri",
            Variant::IdeTripletDa => "ide+tri+da",
            Variant::Full => "full",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ide" => Ok(Variant::Ide),
            "ide+tri" | "tri" => Ok(Variant::IdeTriplet),
            "ide+tri+da" | "da" => Ok(Variant::IdeTripletDa),
            "full" | "ide+tri+da+se" => Ok(Variant::Full),
            other => Err(Error::InvalidArgument(format!(
                "unknown ablation variant `{other}` (expected ide, ide+tri, ide+tri+da or full)"
            ))),
        }
    }
}

pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generate into `<out>/data`.
    Generate(GenerateConfig),
    Existing(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub data: DataSource,
    /// Held-out domains; empty means the highest domain id.
    pub test_domains: Vec<u32>,
    pub train: TrainConfig,
    /// Epochs of the IDE + triplet model used for central selection.
    pub baseline_epochs: usize,
    /// Skip selection and use this central domain.
    pub forced_central: Option<u32>,
    pub estimator: EstimatorConfig,
    pub eval_splits: usize,
    pub eval_seed: u64,
    pub ablation: Vec<Variant>,
    pub ablation_seeds: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Generate(GenerateConfig::default()),
            test_domains: Vec::new(),
            train: TrainConfig::default(),
            baseline_epochs: 5,
            forced_central: None,
            estimator: EstimatorConfig::default(),
            eval_splits: 10,
            eval_seed: 0,
            ablation: Vec::new(),
            ablation_seeds: 3,
        }
    }
}

/// Training and held-out datasets of one run.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub manifest: DatasetManifest,
    pub train: Dataset,
    pub test: Dataset,
    pub test_domains: Vec<u32>,
}

impl SplitData {
    pub fn load(manifest: DatasetManifest, test_domains: &[u32]) -> Result<Self> {
        let domains = manifest.domains();
        let test_domains: Vec<u32> = if test_domains.is_empty() {
            domains.last().copied().into_iter().collect()
        } else {
            test_domains.to_vec()
        };
        if let Some(d) = test_domains.iter().find(|d| !domains.contains(d)) {
            return Err(Error::InvalidArgument(format!("held-out domain {d} is not in the dataset")));
        }
        let train_domains: Vec<u32> = domains.iter().copied().filter(|d| !test_domains.contains(d)).collect();
        if train_domains.is_empty() {
            return Err(Error::InvalidArgument("no training domains left after holding out".into()));
        }
        Ok(Self {
            train: Dataset::load(&manifest.filter_domains(&train_domains))?,
            test: Dataset::load(&manifest.filter_domains(&test_domains))?,
            test_domains,
            manifest,
        })
    }
}

/// How the central domain was obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum CentralChoice {
    Selected { domain: u32, matrix: DomainDistanceMatrix },
    Forced(u32),
}

impl CentralChoice {
    pub fn domain(&self) -> u32 {
        match self {
            CentralChoice::Selected { domain, .. } | CentralChoice::Forced(domain) => *domain,
        }
    }
}

/// Trains the IDE + triplet baseline, embeds the training domains and picks
/// the domain with minimal summed sliced-W₁ distance. Writes `feats.bin`,
/// `matrix.tsv` and the baseline log under `out`.
pub fn select_central(data: &SplitData, config: &PipelineConfig, out: &Path) -> Result<CentralChoice> {
    if let Some(c) = config.forced_central {
        if !data.train.domains.contains(&c) {
            return Err(Error::InvalidArgument(format!("forced central domain {c} is not a training domain")));
        }
        return Ok(CentralChoice::Forced(c));
    }
    let mut baseline = config.train.clone();
    baseline.epochs = config.baseline_epochs;
    baseline.weights = Variant::IdeTriplet.weights(&baseline.weights);
    baseline.seed = derive_seed(config.train.seed, &[0x4241_5345]);
    baseline.checkpoint_every = 0;
    let model = train(&data.train, &baseline, Some(&out.join("baseline")), None).stage("baseline training")?.trainer.model;

    let dump = embed_dataset(&model, &data.train).stage("embedding")?;
    dump.write(out.join(FEATURES_FILE)).stage("embedding")?;
    let matrix = pairwise_domain_distances(&dump.by_domain(), &config.estimator).stage("central selection")?;
    write_file(&out.join(MATRIX_FILE), &matrix.to_tsv()).stage("central selection")?;
    let domain = central_domain_select(&matrix).stage("central selection")?;
    Ok(CentralChoice::Selected { domain, matrix })
}

/// Result of one trained and evaluated configuration.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: Model,
    pub traces: Vec<LossTrace>,
    pub report: ProtocolReport,
}

/// Trains on `data.train` with `central` and evaluates on the held-out set.
pub fn train_and_evaluate(data: &SplitData, train_config: &TrainConfig, central: u32, eval_splits: usize, eval_seed: u64, out: Option<&Path>) -> Result<RunResult> {
    let mut cfg = train_config.clone();
    cfg.central_domain = Some(central);
    let outcome = train(&data.train, &cfg, out, None).stage("training")?;
    let report = evaluate_protocol(&outcome.trainer.model, &data.test, eval_splits, eval_seed).stage("evaluation")?;
    if let Some(dir) = out {
        write_file(&dir.join(REPORT_FILE), &report.to_tsv()).stage("evaluation")?;
    }
    Ok(RunResult {
        model: outcome.trainer.model,
        traces: outcome.traces,
        report,
    })
}

/// Per-variant, per-seed held-out rank-1 and mAP.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub rank1: Vec<f64>,
    pub map: Vec<f64>,
}

impl AblationRow {
    pub fn mean_rank1(&self) -> f64 {
        mean(&self.rank1)
    }

    pub fn mean_map(&self) -> f64 {
        mean(&self.map)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Table with one row per variant; accuracies in percent.
pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant");
    if let Some(first) = rows.first() {
        for s in &first.seeds {
            let _ = write!(out, "\tr1_seed{s}");
        }
    }
    out.push_str("\tr1_mean\tmap_mean\n");
    for row in rows {
        let _ = write!(out, "{}", row.variant);
        for r in &row.rank1 {
            let _ = write!(out, "\t{:.2}", 100.0 * r);
        }
        let _ = writeln!(out, "\t{:.2}\t{:.2}", 100.0 * row.mean_rank1(), 100.0 * row.mean_map());
    }
    out
}

/// Trains every variant for `seeds` consecutive seeds starting at
/// `train.seed`, all with the same central domain.
pub fn run_ablation(data: &SplitData, config: &PipelineConfig, central: u32, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let seeds: Vec<u64> = (0..config.ablation_seeds as u64).map(|i| config.train.seed + i).collect();
    let mut rows = Vec::new();
    for &variant in &config.ablation {
        let mut row = AblationRow {
            variant,
            seeds: seeds.clone(),
            rank1: Vec::new(),
            map: Vec::new(),
        };
        for &seed in &seeds {
            let mut cfg = config.train.clone();
            cfg.seed = seed;
            cfg.weights = variant.weights(&config.train.weights);
            cfg.checkpoint_every = 0;
            let dir = out.map(|o| o.join("ablation").join(format!("{variant}_seed{seed}")));
            let run = train_and_evaluate(data, &cfg, central, config.eval_splits, config.eval_seed, dir.as_deref())?;
            log::info!("ablation {variant} seed {seed}: rank-1 {:.2}%", 100.0 * run.report.rank(1));
            row.rank1.push(run.report.rank(1));
            row.map.push(run.report.map);
        }
        rows.push(row);
    }
    if let Some(o) = out {
        write_file(&o.join(ABLATION_FILE), &ablation_tsv(&rows)).stage("ablation")?;
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub data_root: PathBuf,
    pub central: CentralChoice,
    pub run: RunResult,
    pub ablation: Vec<AblationRow>,
}

/// Runs every stage, writing all artifacts under `out`.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<PipelineOutcome> {
    config.train.validate().stage("configuration")?;
    if config.baseline_epochs == 0 && config.forced_central.is_none() {
        return Err(Error::InvalidArgument("baseline_epochs must be >= 1".into())).stage("configuration");
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e)).stage("setup")?;
    let manifest = match &config.data {
        DataSource::Generate(g) => generate_dataset(g, out.join("data")).stage("data generation")?,
        DataSource::Existing(dir) => DatasetManifest::read(dir).stage("data loading")?,
    };
    let data_root = manifest.root.clone();
    let data = SplitData::load(manifest, &config.test_domains).stage("data loading")?;

    let central = select_central(&data, config, out)?;
    let run = train_and_evaluate(&data, &config.train, central.domain(), config.eval_splits, config.eval_seed, Some(out))?;

    // projection of the final embeddings over every domain
    let all = Dataset::load(&data.manifest).stage("plot")?;
    let dump = embed_dataset(&run.model, &all).stage("plot")?;
    plot_features(&dump, &out.join(PROJECTION_CSV), &out.join(PROJECTION_PNG)).stage("plot")?;

    let ablation = if config.ablation.is_empty() {
        Vec::new()
    } else {
        run_ablation(&data, config, central.domain(), Some(out))?
    };

    let outcome = PipelineOutcome {
        data_root,
        central,
        run,
        ablation,
    };
    write_file(&out.join(RUN_MANIFEST), &run_manifest(config, &data, &outcome)).stage("run manifest")?;
    Ok(outcome)
}

fn run_manifest(config: &PipelineConfig, data: &SplitData, outcome: &PipelineOutcome) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k}\t{v}");
    };
    let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
    kv("data_root", outcome.data_root.display().to_string());
    if let DataSource::Generate(g) = &config.data {
        kv("data_seed", g.seed.to_string());
        kv("data_domains", g.num_domains.to_string());
        kv("data_ids_per_domain", g.ids_per_domain.to_string());
        kv("data_images_per_id", g.images_per_id.to_string());
        kv("data_shape", g.shape.to_string());
    }
    kv("train_domains", join(&data.train.manifest.domains()));
    kv("test_domains", join(&data.test_domains));
    kv("train_seed", config.train.seed.to_string());
    kv("baseline_seed", derive_seed(config.train.seed, &[0x4241_5345]).to_string());
    kv("baseline_epochs", config.baseline_epochs.to_string());
    kv("estimator_projections", config.estimator.num_projections.to_string());
    kv("estimator_seed", config.estimator.seed.to_string());
    kv("eval_splits", config.eval_splits.to_string());
    kv("eval_seed", config.eval_seed.to_string());
    match &outcome.central {
        CentralChoice::Selected { domain, .. } => {
            kv("central", "selected".into());
            kv("central_domain", domain.to_string());
        }
        CentralChoice::Forced(domain) => {
            kv("central", "forced".into());
            kv("central_domain", domain.to_string());
        }
    }
    kv("rank1", format!("{:.4}", 100.0 * outcome.run.report.rank(1)));
    kv("map", format!("{:.4}", 100.0 * outcome.run.report.map));
    kv("loss_log", LOSS_LOG.into());
    if !outcome.ablation.is_empty() {
        kv("ablation", ABLATION_FILE.into());
        kv("ablation_seeds", config.ablation_seeds.to_string());
    }
    for key in TrainConfig::KEYS {
        kv(&format!("config.{key}"), config.train.get(key).unwrap_or_default());
    }
    out
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
