use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use ddan_core::data_synth::{generate_dataset, Dataset, DatasetManifest, GenerateConfig, ImageShape};
use ddan_core::domain_align::{central_domain_select, pairwise_domain_distances, EstimatorConfig};
use ddan_core::evaluation::{embed_dataset, evaluate_protocol};
use ddan_core::features::FeatureDump;
use ddan_core::pipeline::{self, CentralChoice, DataSource, PipelineConfig};
use ddan_core::trainer::{self, Trainer};
use ddan_core::{Error, TrainConfig};

#[derive(Parser)]
#[command(name = "ddan", version, about = "Domain-aware person re-identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic multi-domain dataset.
    GenerateData(GenerateArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Write a feature dump of a dataset.
    Embed(EmbedArgs),
    /// Estimate pairwise domain distances and pick the central domain.
    SelectCentral(SelectArgs),
    /// Single-shot evaluation on a dataset.
    Evaluate(EvaluateArgs),
    /// PCA scatter of a feature dump.
    Plot(PlotArgs),
    /// Generate, select the central domain, train, evaluate and plot.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 5)]
    domains: usize,
    #[arg(long, default_value_t = 20)]
    ids_per_domain: usize,
    #[arg(long, default_value_t = 8)]
    images_per_id: usize,
    /// CxHxW
    #[arg(long, default_value = "3x32x32")]
    shape: ImageShape,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint; its configuration is kept except for `epochs`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Comma-separated domain ids to train on (default: all).
    #[arg(long, value_name = "LIST")]
    only_domains: Option<String>,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Feature file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_name = "LIST")]
    only_domains: Option<String>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 128)]
    projections: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-domain row cap before subsampling.
    #[arg(long, default_value_t = 2000)]
    max_rows: usize,
    #[arg(long)]
    matrix_out: Option<PathBuf>,
    /// Record the chosen domain as the central domain of this dataset's manifest.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    splits: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_name = "LIST")]
    only_domains: Option<String>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    features: PathBuf,
    /// Directory receiving proj.csv and proj.png.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    out: PathBuf,
    /// Existing dataset directory; otherwise one is generated under OUT/data.
    #[arg(long, conflicts_with_all = ["domains", "ids_per_domain", "images_per_id", "shape", "data_seed"])]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    domains: usize,
    #[arg(long, default_value_t = 20)]
    ids_per_domain: usize,
    #[arg(long, default_value_t = 8)]
    images_per_id: usize,
    #[arg(long, default_value = "3x32x32")]
    shape: ImageShape,
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
    /// Held-out domains (default: the highest domain id).
    #[arg(long, value_name = "LIST")]
    test_domains: Option<String>,
    /// Epochs of the IDE + triplet baseline used for central selection.
    #[arg(long, default_value_t = 5)]
    baseline_epochs: usize,
    #[arg(long, default_value_t = 128)]
    projections: usize,
    #[arg(long, default_value_t = 0)]
    estimator_seed: u64,
    #[arg(long, default_value_t = 10)]
    splits: usize,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    /// Comma-separated variants: ide, ide+tri, ide+tri+da, full.
    #[arg(long, value_name = "LIST")]
    ablation: Option<String>,
    #[arg(long, default_value_t = 3)]
    ablation_seeds: usize,
    #[command(flatten)]
    config: ConfigFlags,
}

/// `--config FILE` plus one flag per training key. Flags override the file,
/// which overrides the defaults.
#[derive(Debug, Clone, Default)]
struct ConfigFlags {
    file: Option<PathBuf>,
    overrides: Vec<(&'static str, String)>,
}

impl ConfigFlags {
    fn flag(key: &str) -> String {
        key.replace('_', "-")
    }

    fn explicit(&self, key: &str) -> bool {
        self.overrides.iter().any(|(k, _)| *k == key)
    }

    fn resolve(&self) -> Result<TrainConfig> {
        let mut config = match &self.file {
            Some(path) => TrainConfig::from_file(path).with_context(|| format!("reading config {}", path.display()))?,
            None => TrainConfig::default(),
        };
        for (key, value) in &self.overrides {
            config.set(key, value).with_context(|| format!("--{}", Self::flag(key)))?;
        }
        config.validate()?;
        Ok(config)
    }
}

impl FromArgMatches for ConfigFlags {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let overrides = TrainConfig::KEYS
            .iter()
            .filter_map(|&key| m.get_one::<String>(key).map(|v| (key, v.clone())))
            .collect();
        Ok(Self {
            file: m.get_one::<PathBuf>("config").cloned(),
            overrides,
        })
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigFlags {
    fn augment_args(cmd: Command) -> Command {
        let mut cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value training configuration")
                .help_heading("Training configuration"),
        );
        for &key in TrainConfig::KEYS {
            let mut arg = Arg::new(key)
                .long(Self::flag(key))
                .value_name("VALUE")
                .help(TrainConfig::describe(key).unwrap_or_default())
                .help_heading("Training configuration");
            if key == "central_domain" {
                arg = arg.visible_alias("central");
            }
            cmd = cmd.arg(arg);
        }
        cmd
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

fn parse_domains(list: &str) -> Result<Vec<u32>> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|e| Error::InvalidArgument(format!("bad domain id `{s}`: {e}")).into())
        })
        .collect()
}

fn load_dataset(dir: &Path, only: Option<&str>) -> Result<Dataset> {
    let mut manifest = DatasetManifest::read(dir)?;
    if let Some(list) = only {
        manifest = manifest.filter_domains(&parse_domains(list)?);
        if manifest.is_empty() {
            return Err(Error::InvalidArgument(format!("no images in domains {list}")).into());
        }
    }
    Ok(Dataset::load(&manifest)?)
}

fn generate(args: GenerateArgs) -> Result<()> {
    let config = GenerateConfig {
        num_domains: args.domains,
        ids_per_domain: args.ids_per_domain,
        images_per_id: args.images_per_id,
        shape: args.shape,
        seed: args.seed,
    };
    let manifest = generate_dataset(&config, &args.out)?;
    println!("wrote {} images in {} domains to {}", manifest.len(), manifest.domains().len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let resolved = args.config.resolve()?;
    let resume = match &args.resume {
        Some(path) => {
            let mut t = Trainer::load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            if args.config.explicit("epochs") || args.config.file.is_some() {
                t.config.epochs = resolved.epochs;
            }
            Some(t)
        }
        None => None,
    };
    let config = match &resume {
        Some(t) => t.config.clone(),
        None => resolved,
    };
    let dataset = load_dataset(&args.data, args.only_domains.as_deref())?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let outcome = trainer::train(&dataset, &config, Some(&args.out), resume)?;
    if let Some(last) = outcome.traces.last() {
        println!(
            "trained to epoch {}; last step: {}",
            last.epoch,
            last.tsv_row()
        );
    }
    if let Some(ckpt) = &outcome.final_checkpoint {
        println!("checkpoint: {}", ckpt.display());
    }
    Ok(())
}

fn embed(args: EmbedArgs) -> Result<()> {
    let model = trainer::load_model(&args.checkpoint)?;
    let dataset = load_dataset(&args.data, args.only_domains.as_deref())?;
    let dump = embed_dataset(&model, &dataset)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    dump.write(&args.out)?;
    println!("wrote {} x {} features to {}", dump.len(), dump.dim(), args.out.display());
    Ok(())
}

fn select_central(args: SelectArgs) -> Result<()> {
    let dump = FeatureDump::read(&args.features)?;
    let estimator = EstimatorConfig {
        num_projections: args.projections,
        seed: args.seed,
        max_rows: args.max_rows,
    };
    let matrix = pairwise_domain_distances(&dump.by_domain(), &estimator)?;
    let central = central_domain_select(&matrix)?;
    print!("{}", matrix.to_tsv());
    println!("central: {central}");
    if let Some(path) = &args.matrix_out {
        fs::write(path, matrix.to_tsv()).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(dir) = &args.data {
        let mut manifest = DatasetManifest::read(dir)?;
        manifest.central_domain = central;
        manifest.write()?;
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let model = trainer::load_model(&args.checkpoint)?;
    let dataset = load_dataset(&args.data, args.only_domains.as_deref())?;
    let report = evaluate_protocol(&model, &dataset, args.splits, args.seed)?;
    let tsv = report.to_tsv();
    print!("{tsv}");
    if let Some(path) = &args.report {
        fs::write(path, tsv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn plot(args: PlotArgs) -> Result<()> {
    let dump = FeatureDump::read(&args.features)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let csv = args.out.join(pipeline::PROJECTION_CSV);
    let png = args.out.join(pipeline::PROJECTION_PNG);
    ddan_core::plot::plot_features(&dump, &csv, &png)?;
    println!("wrote {} and {}", csv.display(), png.display());
    Ok(())
}

fn run_pipeline(args: PipelineArgs) -> Result<()> {
    let train = args.config.resolve()?;
    let data = match args.data {
        Some(dir) => DataSource::Existing(dir),
        None => DataSource::Generate(GenerateConfig {
            num_domains: args.domains,
            ids_per_domain: args.ids_per_domain,
            images_per_id: args.images_per_id,
            shape: args.shape,
            seed: args.data_seed,
        }),
    };
    let config = PipelineConfig {
        data,
        test_domains: args.test_domains.as_deref().map(parse_domains).transpose()?.unwrap_or_default(),
        forced_central: train.central_domain,
        train,
        baseline_epochs: args.baseline_epochs,
        estimator: EstimatorConfig {
            num_projections: args.projections,
            seed: args.estimator_seed,
            ..EstimatorConfig::default()
        },
        eval_splits: args.splits,
        eval_seed: args.eval_seed,
        ablation: match &args.ablation {
            Some(list) => pipeline::parse_variants(list)?,
            None => Vec::new(),
        },
        ablation_seeds: args.ablation_seeds,
    };
    let outcome = pipeline::run_pipeline(&config, &args.out)?;
    match &outcome.central {
        CentralChoice::Selected { domain, .. } => println!("central: {domain} (selected)"),
        CentralChoice::Forced(domain) => println!("central: {domain} (forced)"),
    }
    let report = &outcome.run.report;
    println!("rank-1 {:.2}%  mAP {:.2}%", 100.0 * report.rank(1), 100.0 * report.map);
    if !outcome.ablation.is_empty() {
        print!("{}", pipeline::ablation_tsv(&outcome.ablation));
    }
    println!("artifacts in {}", args.out.display());
    Ok(())
}

/// 2 usage, 3 data/other, 4 numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::root) {
        Some(Error::InvalidArgument(_)) | Some(Error::Format { kind: "config", .. }) => 2,
        Some(Error::NonFinite(_)) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match cli.command {
        Cmd::GenerateData(a) => generate(a),
        Cmd::Train(a) => train(a),
        Cmd::Embed(a) => embed(a),
        Cmd::SelectCentral(a) => select_central(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Plot(a) => plot(a),
        Cmd::Pipeline(a) => run_pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::debug!("{err:?}");
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.cfg");
        fs::write(&file, "epochs = 7\nlambda2 = 0.5\n").unwrap();
        let cli = Cli::try_parse_from([
            "ddan",
            "train",
            "--data",
            "d",
            "--out",
            "o",
            "--config",
            file.to_str().unwrap(),
            "--lambda2",
            "0.25",
            "--central",
            "1",
        ])
        .unwrap();
        let Cmd::Train(args) = cli.command else { panic!() };
        let c = args.config.resolve().unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.weights.lambda2, 0.25);
        assert_eq!(c.central_domain, Some(1));
        assert_eq!(c.batch_p, TrainConfig::default().batch_p);
    }

    #[test]
    fn bad_values_map_to_usage_errors() {
        let flags = ConfigFlags {
            file: None,
            overrides: vec![("epochs", "many".into())],
        };
        assert_eq!(exit_code(&flags.resolve().unwrap_err()), 2);
        let nf: anyhow::Error = Error::Stage {
            stage: "training",
            source: Box::new(Error::NonFinite("loss".into())),
        }
        .into();
        assert_eq!(exit_code(&nf), 4);
        assert_eq!(exit_code(&anyhow::Error::from(Error::Data("x".into()))), 3);
    }
}
