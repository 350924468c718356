//! Command-line driver: `train`, `evaluate`, `aggatt`, `correlate` and
//! `implinv`.
//!
//! Settings come from flags, then an optional TOML file (`--config`), then
//! defaults. The seed falls back to `ATTREVAL_SEED` when neither a flag nor
//! the file sets it. Every command writes the effective configuration to
//! `run_config.toml` in its output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggatt::{self, RenderMode};
use crate::analysis::{self, correlation_matrix, series_from_records};
use crate::attribution::{map_from_bytes, map_to_bytes, MapHeader, Method, MethodConfig};
use crate::data::{self, LabeledImage};
use crate::error::{Error, Result};
use crate::grids::{
    build_grids, localization_score, merge_grid_outputs, read_records_csv, write_records_csv, write_records_jsonl,
    Campaign, CampaignResult, GridSample, LocalizationRecord, PreparedSetting, Setting, SettingModel,
};
use crate::lrp::{implinv_transform, LrpPreset};
use crate::nn::io::{load_model, model_hash, save_model};
use crate::nn::layer::Layer;
use crate::nn::merge::merge_batchnorm;
use crate::nn::model::{Model, TAP_FINAL, TAP_INPUT, TAP_MID};
use crate::nn::presets::{load_or_train, train_recipe, Arch, ArchConfig, Recipe};
use crate::nn::train::{accuracy, train_sgd, TrainConfig};
use crate::tensor::Tensor;

pub const SEED_ENV: &str = "ATTREVAL_SEED";
pub const CONFIG_ECHO: &str = "run_config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Existing `.atev` file; when unset the preset is loaded from
    /// `models_dir` or trained there.
    pub path: Option<PathBuf>,
    pub arch: Arch,
    pub models_dir: PathBuf,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            path: None,
            arch: Arch::TinyVggPlain,
            models_dir: PathBuf::from("models"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR-10 binary batch file(s) for training and for the grid pool.
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    pub seed: u64,
    pub classes: usize,
    pub size: usize,
    pub train_count: usize,
    pub val_count: usize,
    /// Synthetic grid pool: `pool_count` images from id `pool_first_id`.
    pub pool_first_id: u64,
    pub pool_count: usize,
    /// Minimum softmax probability of the true class for pool images.
    pub confidence: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            train_path: None,
            eval_path: None,
            seed: 0,
            classes: 10,
            size: 32,
            train_count: 5000,
            val_count: 1000,
            pool_first_id: 1_000_000,
            pool_count: 2000,
            confidence: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    /// Tap names, layer indices, or `all`.
    pub taps: Vec<String>,
    pub settings: Vec<Setting>,
    pub n: usize,
    pub grids: usize,
    /// Directory of cached maps; empty disables the cache.
    pub cache_dir: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            methods: vec![
                Method::Gradient,
                Method::InputXGradient,
                Method::IntegratedGradients,
                Method::GradCam,
            ],
            taps: vec![TAP_INPUT.into(), TAP_MID.into(), TAP_FINAL.into()],
            settings: vec![Setting::GridPG],
            n: 2,
            grids: 100,
            cache_dir: PathBuf::from("cache"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggAttConfig {
    pub mode: RenderMode,
}

impl Default for AggAttConfig {
    fn default() -> Self {
        AggAttConfig {
            mode: RenderMode::Positive,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelateConfig {
    /// Records CSV; defaults to `records.csv` in the output directory.
    pub records: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub evaluate: EvalConfig,
    pub attribution: MethodConfig,
    pub aggatt: AggAttConfig,
    pub correlate: CorrelateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            out_dir: PathBuf::from("attreval-out"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            evaluate: EvalConfig::default(),
            attribution: MethodConfig::default(),
            aggatt: AggAttConfig::default(),
            correlate: CorrelateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be ≥ 1".into()));
        }
        if let Some(p) = &self.model.path {
            if !p.exists() {
                return Err(Error::Config(format!("model file {} does not exist", p.display())));
            }
        }
        for p in [&self.data.train_path, &self.data.eval_path].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("data file {} does not exist", p.display())));
            }
        }
        if self.evaluate.n == 0 {
            return Err(Error::Config("grid size n must be ≥ 1".into()));
        }
        self.attribution.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn recipe(&self) -> Recipe {
        let mut train = self.train.clone();
        train.seed = self.seed;
        Recipe {
            arch: self.model.arch,
            arch_config: ArchConfig {
                classes: self.data.classes,
                size: self.data.size,
                ..ArchConfig::default()
            },
            data_seed: self.data.seed,
            train_count: self.data.train_count,
            val_count: self.data.val_count,
            init_seed: self.seed,
            train,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "attreval", version, about = "Evaluate attribution methods on grid settings")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed (falls back to ATTREVAL_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a preset architecture and save it as an .atev file.
    Train(TrainArgs),
    /// Run the method × tap × setting campaign and write localization records.
    Evaluate(EvalArgs),
    /// Bin maps by localization and render per-bin averages.
    Aggatt(AggAttArgs),
    /// Spearman correlations between method/tap pairs.
    Correlate(CorrelateArgs),
    /// Show that the z+ rule depends on how the model is implemented.
    Implinv(EvalArgs),
}

#[derive(Debug, Default, Args)]
pub struct DataArgs {
    #[arg(long, value_enum)]
    pub data: Option<DataSource>,
    #[arg(long)]
    pub train_path: Option<PathBuf>,
    #[arg(long)]
    pub eval_path: Option<PathBuf>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub pool_count: Option<usize>,
    #[arg(long)]
    pub confidence: Option<f64>,
}

#[derive(Debug, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Default, Args)]
pub struct EvalArgs {
    /// Existing .atev model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub models_dir: Option<PathBuf>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// Comma-separated tap names or layer indices, or `all`.
    #[arg(long, value_delimiter = ',')]
    pub taps: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub settings: Option<Vec<Setting>>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub grids: Option<usize>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Disable the map cache.
    #[arg(long)]
    pub no_cache: bool,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Default, Args)]
pub struct AggAttArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long)]
    pub mode: Option<RenderMode>,
}

#[derive(Debug, Default, Args)]
pub struct CorrelateArgs {
    #[arg(long)]
    pub records: Option<PathBuf>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl DataArgs {
    fn apply(self, d: &mut DataConfig) {
        set(&mut d.source, self.data);
        set(&mut d.seed, self.data_seed);
        set(&mut d.train_count, self.train_count);
        set(&mut d.pool_count, self.pool_count);
        set(&mut d.confidence, self.confidence);
        if self.train_path.is_some() {
            d.train_path = self.train_path;
        }
        if self.eval_path.is_some() {
            d.eval_path = self.eval_path;
        }
    }
}

impl EvalArgs {
    fn apply(self, cfg: &mut RunConfig) {
        if self.model.is_some() {
            cfg.model.path = self.model;
        }
        set(&mut cfg.model.arch, self.arch);
        set(&mut cfg.model.models_dir, self.models_dir);
        let e = &mut cfg.evaluate;
        set(&mut e.methods, self.methods);
        set(&mut e.taps, self.taps);
        set(&mut e.settings, self.settings);
        set(&mut e.n, self.n);
        set(&mut e.grids, self.grids);
        set(&mut e.cache_dir, self.cache_dir);
        if self.no_cache {
            e.cache_dir = PathBuf::new();
        }
        self.data.apply(&mut cfg.data);
    }
}

/// Effective configuration: defaults, then the file, then flags. The seed
/// comes from the flag, else the file, else `env_seed`, else 0.
pub fn resolve(cli: Cli, env_seed: Option<&str>) -> Result<(RunConfig, Command)> {
    let (mut cfg, file_has_seed) = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let table: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let has_seed = table.contains_key("seed");
            let cfg: RunConfig = toml::Value::Table(table)
                .try_into()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            (cfg, has_seed)
        }
        None => (RunConfig::default(), false),
    };
    if !file_has_seed {
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an integer")))?;
        }
    }
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.workers, cli.workers);
    set(&mut cfg.out_dir, cli.out);
    let command = cli.command;
    match &command {
        Command::Train(a) => {
            set(&mut cfg.model.arch, a.arch);
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.lr, a.lr);
            set(&mut cfg.train.batch_size, a.batch_size);
        }
        Command::Aggatt(a) => set(&mut cfg.aggatt.mode, a.mode),
        Command::Correlate(a) => {
            if a.records.is_some() {
                cfg.correlate.records = a.records.clone();
            }
        }
        _ => {}
    }
    let command = match command {
        Command::Train(mut a) => {
            std::mem::take(&mut a.data).apply(&mut cfg.data);
            Command::Train(a)
        }
        Command::Evaluate(mut a) => {
            std::mem::take(&mut a).apply(&mut cfg);
            Command::Evaluate(EvalArgs::default())
        }
        Command::Implinv(mut a) => {
            std::mem::take(&mut a).apply(&mut cfg);
            Command::Implinv(EvalArgs::default())
        }
        Command::Aggatt(mut a) => {
            std::mem::take(&mut a.eval).apply(&mut cfg);
            Command::Aggatt(a)
        }
        c => c,
    };
    cfg.validate()?;
    Ok((cfg, command))
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Runtime(e) => write!(f, "{e}"),
        }
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    match run(cli, env_seed.as_deref()) {
        Ok(()) => 0,
        Err(f) => {
            log::error!("{f}");
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

pub fn run(cli: Cli, env_seed: Option<&str>) -> std::result::Result<(), Failure> {
    let (cfg, command) = resolve(cli, env_seed).map_err(|e| Failure::Usage(e.to_string()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Failure::Runtime(Error::Config(e.to_string())))?;
    pool.install(|| {
        prepare_out_dir(&cfg)?;
        match command {
            Command::Train(_) => cmd_train(&cfg).map(|_| ()),
            Command::Evaluate(_) => cmd_evaluate(&cfg).map(|_| ()),
            Command::Aggatt(_) => cmd_aggatt(&cfg).map(|_| ()),
            Command::Correlate(_) => cmd_correlate(&cfg).map(|_| ()),
            Command::Implinv(_) => cmd_implinv(&cfg).map(|_| ()),
        }
    })
    .map_err(Failure::Runtime)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let text = cfg.to_toml()?;
    log::info!("effective configuration:\n{text}");
    write_file(&cfg.out_dir.join(CONFIG_ECHO), text.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model_hash: String,
    pub params: usize,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub epoch_loss: Vec<f64>,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let (model, summary_base) = match cfg.data.source {
        DataSource::Synthetic => {
            let (model, m) = train_recipe(&cfg.recipe())?;
            (model, (m.train_accuracy, Some(m.val_accuracy), m.report.epoch_loss))
        }
        DataSource::Cifar10 => {
            let path = cfg
                .data
                .train_path
                .as_ref()
                .ok_or_else(|| Error::Config("cifar10 training needs data.train_path".into()))?;
            let train = data::load_cifar10(path)?;
            let recipe = cfg.recipe();
            let init = crate::nn::presets::build(recipe.arch, &recipe.arch_config, cfg.seed)?;
            let (model, report) = train_sgd(&init, &train, &recipe.train)?;
            let val = match &cfg.data.eval_path {
                Some(p) => Some(accuracy(&model, &data::load_cifar10(p)?)?),
                None => None,
            };
            (model, (report.final_accuracy, val, report.epoch_loss))
        }
    };
    let path = cfg.out_dir.join("model.atev");
    save_model(&model, &path)?;
    let summary = TrainSummary {
        model_hash: model_hash(&model)?,
        params: model.num_params(),
        train_accuracy: summary_base.0,
        val_accuracy: summary_base.1,
        epoch_loss: summary_base.2,
    };
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    write_file(&cfg.out_dir.join("metrics.json"), &json)?;
    println!(
        "saved {} ({} params), train accuracy {:.4}{}",
        path.display(),
        summary.params,
        summary.train_accuracy,
        summary.val_accuracy.map(|v| format!(", val accuracy {v:.4}")).unwrap_or_default()
    );
    Ok(summary)
}

/// The model to explain, with any BatchNorm folded into its neighbours.
pub fn load_eval_model(cfg: &RunConfig) -> Result<Model> {
    let model = match &cfg.model.path {
        Some(p) => load_model(p)?,
        None => load_or_train(&cfg.recipe(), &cfg.model.models_dir)?.0,
    };
    if model.layers.iter().any(|l| matches!(l, Layer::BatchNorm2d(_))) {
        log::info!("folding BatchNorm layers into adjacent layers");
        merge_batchnorm(&model)
    } else {
        Ok(model)
    }
}

/// Confidently and correctly classified images for building grids.
pub fn evaluation_pool(model: &Model, cfg: &RunConfig) -> Result<Vec<LabeledImage>> {
    let d = &cfg.data;
    let candidates = match d.source {
        DataSource::Synthetic => data::gen_synthetic_range(d.classes, d.size, d.pool_first_id, d.pool_count, d.seed)?,
        DataSource::Cifar10 => {
            let path = d
                .eval_path
                .as_ref()
                .ok_or_else(|| Error::Config("cifar10 evaluation needs data.eval_path".into()))?;
            data::load_cifar10(path)?
        }
    };
    let pool = data::filter_confident(model, &candidates, d.confidence)?;
    log::info!(
        "grid pool: kept {} of {} images at confidence ≥ {}",
        pool.len(),
        candidates.len(),
        d.confidence
    );
    Ok(pool)
}

/// Expand `all` and keep names where the model has them.
pub fn resolve_taps(model: &Model, taps: &[String]) -> Result<Vec<String>> {
    let named: BTreeMap<usize, &String> = model.taps.iter().map(|(k, &v)| (v, k)).collect();
    let mut out = Vec::new();
    for t in taps {
        if t == "all" {
            for i in model.all_depth_taps() {
                out.push(named.get(&i).map(|s| s.to_string()).unwrap_or_else(|| i.to_string()));
            }
        } else {
            model.tap_index(t)?;
            out.push(t.clone());
        }
    }
    Ok(out)
}

pub fn build_setting_grids(cfg: &RunConfig, pool: &[LabeledImage]) -> Result<Vec<(Setting, Vec<GridSample>)>> {
    cfg.evaluate
        .settings
        .iter()
        .map(|&s| Ok((s, build_grids(pool, cfg.evaluate.n, cfg.evaluate.grids, s, cfg.seed)?)))
        .collect()
}

fn file_key(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

/// Maps of one grid stored per (method, tap), stacked over its targets.
/// Entries live under a directory keyed by the model hash and everything
/// else that changes the maps.
pub struct MapCache {
    root: PathBuf,
}

impl MapCache {
    pub fn new(dir: &Path, model: &Model, campaign: &Campaign, n: usize) -> Result<Option<Self>> {
        if dir.as_os_str().is_empty() {
            return Ok(None);
        }
        use sha2::{Digest, Sha256};
        let ident = serde_json::json!({
            "attribution": campaign.config,
            "seed": campaign.seed,
            "n": n,
        });
        let digest = hex::encode(Sha256::digest(serde_json::to_vec(&ident)?));
        let root = dir.join(&model_hash(model)?[..16]).join(&digest[..16]);
        Ok(Some(MapCache { root }))
    }

    fn path(&self, setting: Setting, sample_id: u64, method: &str, tap: &str) -> PathBuf {
        self.root
            .join(setting.name())
            .join(sample_id.to_string())
            .join(format!("{}@{}.atmp", file_key(method), file_key(tap)))
    }

    /// All records and maps of `grid`, or `None` if any entry is missing.
    pub fn load(
        &self,
        setting: Setting,
        campaign: &Campaign,
        grid: &GridSample,
    ) -> Result<Option<Vec<(LocalizationRecord, Tensor)>>> {
        let mut out = Vec::new();
        for method in &campaign.methods {
            let m = method.to_string();
            for tap in &campaign.taps {
                let path = self.path(setting, grid.id, &m, tap);
                let Ok(bytes) = std::fs::read(&path) else { return Ok(None) };
                let (header, stacked) = map_from_bytes(&bytes)?;
                let [t, h, w] = header.shape[..] else {
                    return Err(Error::InvalidTensor(format!("cache entry {} is not stacked", path.display())));
                };
                if t != grid.targets.len() || header.method != m || header.tap != *tap {
                    return Ok(None);
                }
                for (k, &cell) in grid.targets.iter().enumerate() {
                    let map = Tensor::new(vec![h, w], stacked.data()[k * h * w..(k + 1) * h * w].to_vec())?;
                    let (score, numerator) = localization_score(&map, grid.n, cell)?;
                    let rec = LocalizationRecord {
                        sample_id: grid.id,
                        method: m.clone(),
                        tap: tap.clone(),
                        setting,
                        target_cell: cell,
                        score,
                        numerator,
                    };
                    out.push((rec, map));
                }
            }
        }
        Ok(Some(out))
    }

    pub fn store(&self, setting: Setting, grid: &GridSample, unit: &[(LocalizationRecord, Tensor)]) -> Result<()> {
        let t = grid.targets.len();
        for chunk in unit.chunks(t) {
            let rec = &chunk[0].0;
            let (h, w) = chunk[0].1.hw()?;
            let data: Vec<f32> = chunk.iter().flat_map(|(_, m)| m.data().iter().copied()).collect();
            let stacked = Tensor::new(vec![t, h, w], data)?;
            let header = MapHeader {
                method: rec.method.clone(),
                tap: rec.tap.clone(),
                shape: vec![t, h, w],
                sample_id: grid.id.to_string(),
            };
            let path = self.path(setting, grid.id, &rec.method, &rec.tap);
            let dir = path.parent().expect("cache path has a parent");
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let tmp = path.with_extension("atmp.tmp");
            write_file(&tmp, &map_to_bytes(&stacked, &header)?)?;
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Run a campaign for one prepared setting, reusing and filling the cache.
pub fn run_cached(
    prepared: &PreparedSetting,
    campaign: &Campaign,
    grids: &[GridSample],
    cache: Option<&MapCache>,
    result: &mut CampaignResult,
) -> Result<()> {
    let setting = prepared.model.setting;
    let units: Vec<(Result<Vec<(LocalizationRecord, Tensor)>>, bool)> = grids
        .par_iter()
        .map(|grid| {
            if let Some(c) = cache {
                match c.load(setting, campaign, grid) {
                    Ok(Some(hit)) => return (Ok(hit), true),
                    Ok(None) => {}
                    Err(e) => log::warn!("ignoring unreadable cache entry for sample {}: {e}", grid.id),
                }
            }
            (prepared.evaluate_grid(campaign, grid), false)
        })
        .collect();
    let mut ok = Vec::with_capacity(units.len());
    let mut hits = 0;
    for (grid, (unit, hit)) in grids.iter().zip(units) {
        match unit {
            Ok(u) => {
                if hit {
                    hits += 1;
                } else if let Some(c) = cache {
                    c.store(setting, grid, &u)?;
                }
                ok.push(u);
            }
            Err(e) => {
                log::warn!("{setting} sample {} failed: {e}", grid.id);
                result.failures.push((setting, grid.id, e.to_string()));
            }
        }
    }
    log::info!("{setting}: {} grids, {hits} from cache", grids.len());
    merge_grid_outputs(campaign, ok, result);
    Ok(())
}

pub fn campaign_from(cfg: &RunConfig, model: &Model, keep_maps: bool) -> Result<Campaign> {
    Ok(Campaign {
        methods: cfg.evaluate.methods.clone(),
        taps: resolve_taps(model, &cfg.evaluate.taps)?,
        settings: cfg.evaluate.settings.clone(),
        config: cfg.attribution.clone(),
        seed: cfg.seed,
        keep_maps,
    })
}

/// Records (and maps if `keep_maps`) for the configured campaign.
pub fn evaluate_campaign(cfg: &RunConfig, keep_maps: bool) -> Result<CampaignResult> {
    let model = load_eval_model(cfg)?;
    let pool = evaluation_pool(&model, cfg)?;
    let grids = build_setting_grids(cfg, &pool)?;
    let campaign = campaign_from(cfg, &model, keep_maps)?;
    campaign.config.validate()?;
    let cache = MapCache::new(&cfg.evaluate.cache_dir, &model, &campaign, cfg.evaluate.n)?;
    let mut result = CampaignResult::default();
    for (setting, setting_grids) in &grids {
        if setting_grids.is_empty() {
            continue;
        }
        let prepared = PreparedSetting::new(&model, *setting, cfg.evaluate.n, &campaign.taps)?;
        run_cached(&prepared, &campaign, setting_grids, cache.as_ref(), &mut result)?;
    }
    let total: usize = grids.iter().map(|(_, g)| g.len()).sum();
    if total > 0 && result.failures.len() == total {
        return Err(Error::Config(format!("all {total} grids failed")));
    }
    Ok(result)
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<CampaignResult> {
    let result = evaluate_campaign(cfg, false)?;
    let mut csv = Vec::new();
    write_records_csv(&result.records, &mut csv)?;
    write_file(&cfg.out_dir.join("records.csv"), &csv)?;
    let mut jsonl = Vec::new();
    write_records_jsonl(&result.records, &mut jsonl)?;
    write_file(&cfg.out_dir.join("records.jsonl"), &jsonl)?;
    let report = analysis::emit_report(&result.records, &cfg.out_dir)?;
    for r in &report.rows {
        println!(
            "{:<12} {:<20} {:<6} n={:<5} median {:.4} mean {:.4}",
            r.setting.to_string(),
            r.method,
            r.tap,
            r.count,
            r.quartiles.median,
            r.mean
        );
    }
    if !result.failures.is_empty() {
        let mut json = serde_json::to_vec_pretty(&result.failures)?;
        json.push(b'\n');
        write_file(&cfg.out_dir.join("failures.json"), &json)?;
    }
    Ok(result)
}

/// Group indices of records by (setting, method, tap), in record order.
fn groups(records: &[LocalizationRecord]) -> Vec<((Setting, String, String), Vec<usize>)> {
    let mut out: Vec<((Setting, String, String), Vec<usize>)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let key = (r.setting, r.method.clone(), r.tap.clone());
        match out.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(i),
            None => out.push((key, vec![i])),
        }
    }
    out
}

pub fn cmd_aggatt(cfg: &RunConfig) -> Result<Vec<aggatt::AggAttIndex>> {
    let result = evaluate_campaign(cfg, true)?;
    if result.records.is_empty() {
        log::warn!("no records to aggregate");
        return Ok(Vec::new());
    }
    let dir = cfg.out_dir.join("aggatt");
    let mut indices = Vec::new();
    for ((setting, method, tap), idx) in groups(&result.records) {
        let recs: Vec<LocalizationRecord> = idx.iter().map(|&i| result.records[i].clone()).collect();
        let maps: Vec<Tensor> = idx.iter().map(|&i| result.maps[i].clone()).collect();
        let binned = aggatt::sort_and_bin(&recs, &maps)?;
        let stem = format!("{}_{}_{}", setting.name(), file_key(&method), file_key(&tap));
        let index = aggatt::write_outputs(&binned, &dir, &stem, (&method, &tap, setting.name()), cfg.aggatt.mode)?;
        println!("{stem}: normalizer {}", index.normalizer);
        indices.push(index);
    }
    Ok(indices)
}

pub fn cmd_correlate(cfg: &RunConfig) -> Result<Vec<(Setting, analysis::CorrelationMatrix)>> {
    let path = cfg
        .correlate
        .records
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("records.csv"));
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let records = read_records_csv(std::io::BufReader::new(file))?;
    if records.is_empty() {
        log::warn!("no records to correlate");
    }
    let mut out = Vec::new();
    for setting in Setting::ALL {
        let series: Vec<_> = series_from_records(&records)
            .into_iter()
            .filter(|s| s.setting == setting)
            .collect();
        if series.is_empty() {
            continue;
        }
        let matrix = correlation_matrix(&series)?;
        let mut csv = Vec::new();
        matrix.write_csv(&mut csv)?;
        write_file(&cfg.out_dir.join(format!("correlation_{}.csv", setting.name())), &csv)?;
        println!("{setting}: {} series", series.len());
        out.push((setting, matrix));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplInvReport {
    pub grids: usize,
    /// Largest absolute logit difference over all grids.
    pub max_logit_diff: f64,
    pub method: String,
    pub original_median: f64,
    pub transformed_median: f64,
    pub original_mean: f64,
    pub transformed_mean: f64,
}

/// Compare z+ localization on DiFull before and after adding a
/// functionally inert layer to the head.
pub fn implinv_experiment(
    model: &Model,
    grids: &[GridSample],
    n: usize,
    config: &MethodConfig,
    seed: u64,
) -> Result<(ImplInvReport, CampaignResult, CampaignResult)> {
    let original = SettingModel::new(model, Setting::DiFull, n)?;
    let transformed = SettingModel {
        model: implinv_transform(&original.model)?,
        ..original.clone()
    };
    let diffs: Vec<f64> = grids
        .par_iter()
        .map(|g| {
            let a = original.outputs(&g.composite)?;
            let b = transformed.outputs(&g.composite)?;
            Ok(a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs() as f64)
                .fold(0.0, f64::max))
        })
        .collect::<Result<_>>()?;
    let campaign = Campaign {
        methods: vec![Method::Lrp(LrpPreset::ZPlus)],
        taps: vec![TAP_INPUT.into()],
        settings: vec![Setting::DiFull],
        config: config.clone(),
        seed,
        keep_maps: true,
    };
    let mut results = Vec::new();
    for sm in [original, transformed] {
        let prepared = PreparedSetting::from_setting_model(sm, &campaign.taps)?;
        let mut r = CampaignResult::default();
        run_cached(&prepared, &campaign, grids, None, &mut r)?;
        results.push(r);
    }
    let after = results.pop().unwrap();
    let before = results.pop().unwrap();
    let scores = |r: &CampaignResult| r.records.iter().map(|x| x.score).collect::<Vec<f64>>();
    let (sb, sa) = (scores(&before), scores(&after));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let report = ImplInvReport {
        grids: grids.len(),
        max_logit_diff: diffs.into_iter().fold(0.0, f64::max),
        method: campaign.methods[0].to_string(),
        original_median: analysis::median(&sb)?,
        transformed_median: analysis::median(&sa)?,
        original_mean: mean(&sb),
        transformed_mean: mean(&sa),
    };
    Ok((report, before, after))
}

pub fn cmd_implinv(cfg: &RunConfig) -> Result<ImplInvReport> {
    let model = load_eval_model(cfg)?;
    let pool = evaluation_pool(&model, cfg)?;
    let grids = build_grids(&pool, cfg.evaluate.n, cfg.evaluate.grids, Setting::DiFull, cfg.seed)?;
    if grids.is_empty() {
        return Err(Error::Config("implinv needs at least one grid".into()));
    }
    let (report, before, after) = implinv_experiment(&model, &grids, cfg.evaluate.n, &cfg.attribution, cfg.seed)?;
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    write_file(&cfg.out_dir.join("implinv.json"), &json)?;
    for (name, r) in [("original", &before), ("transformed", &after)] {
        if let Some(map) = r.maps.first() {
            let img = aggatt::render_heatmap(map, map.max_abs().max(f32::MIN_POSITIVE), RenderMode::Diverging)?;
            write_file(&cfg.out_dir.join(format!("implinv_{name}.ppm")), &img)?;
        }
    }
    println!(
        "max |Δlogit| {:.3e}; {} median localization {:.4} -> {:.4}",
        report.max_logit_diff, report.method, report.original_median, report.transformed_median
    );
    Ok(report)
}
