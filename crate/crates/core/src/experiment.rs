//! Declarative experiment configuration and the end-to-end pipeline:
//! source training, clustering, the walk-forward grid and its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::Duration;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{GeneratorError, GeneratorSpec, ProductData, Universe};
use crate::eval::{
    improvement_report, walk_forward, write_records_csv, EvalError, EvalRecord, EvalReport, FreshFactory,
    LeakageAudit, ModelFactory, ModelKind, TransferFactory, WalkForwardOptions,
};
use crate::features::{build_features, FeatureError, Scaler};
use crate::net::io::SavedNetwork;
use crate::net::{default_architecture, train, FrozenMask, NetError, NetworkParams, TrainSpec};
use crate::seed;
use crate::similarity::{
    assign_clusters, compute_stats, write_cluster_table, ClusterAssignment, ClusterThresholds, Dimension,
    ProductStats, SimilarityError,
};
use crate::transfer::{build_ensembles, EnsembleSpec, ModelBundle, TransferConfig, TransferError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialise configuration: {0}")]
    Serialise(#[from] toml::ser::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("no trained model for source {0}")]
    MissingSource(String),
    #[error("{product}: {source}")]
    Training { product: String, source: NetError },
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "out/data".into(),
            model_dir: "out/models".into(),
            report_dir: "out/report".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceTraining {
    /// Share of shuffled source rows used for gradient steps; the rest is validation.
    pub train_fraction: f64,
    pub train: TrainSpec,
}

impl Default for SourceTraining {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            train: TrainSpec {
                max_epochs: 8,
                patience: 2,
                ..TrainSpec::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkForwardSettings {
    pub first_week: i64,
    pub last_week: i64,
    pub n_splits: usize,
    pub train_fraction: f64,
    pub configs: Vec<TransferConfig>,
    pub ensemble_config: TransferConfig,
    pub ensemble_dimensions: Vec<Dimension>,
    /// Also build the ensemble over every source.
    pub ensemble_all: bool,
    pub include_ma: bool,
    pub thresholds: ClusterThresholds,
    pub train: TrainSpec,
}

impl Default for WalkForwardSettings {
    fn default() -> Self {
        Self {
            first_week: 3,
            last_week: 17,
            n_splits: 10,
            train_fraction: 0.7,
            configs: TransferConfig::ALL.to_vec(),
            ensemble_config: TransferConfig::Config2,
            ensemble_dimensions: Dimension::ALL.to_vec(),
            ensemble_all: true,
            include_ma: true,
            thresholds: ClusterThresholds::default(),
            train: TrainSpec {
                max_epochs: 3,
                patience: 1,
                ..TrainSpec::default()
            },
        }
    }
}

/// Grid restriction applied by `--quick`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuickSettings {
    pub n_splits: usize,
    pub first_week: i64,
    pub last_week: i64,
}

impl Default for QuickSettings {
    fn default() -> Self {
        Self {
            n_splits: 5,
            first_week: 3,
            last_week: 7,
        }
    }
}

/// Everything a run depends on. `seed` overrides `generator.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
    pub paths: Paths,
    pub generator: GeneratorSpec,
    pub sources: SourceTraining,
    pub walk_forward: WalkForwardSettings,
    pub quick: QuickSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            jobs: 1,
            paths: Paths::default(),
            generator: GeneratorSpec::default(),
            sources: SourceTraining::default(),
            walk_forward: WalkForwardSettings::default(),
            quick: QuickSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let mut cfg: Self = toml::from_str(text)?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String, ExperimentError> {
        Ok(toml::to_string(self)?)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.generator.seed = seed;
    }

    /// Restricts the walk-forward grid to the quick settings.
    pub fn apply_quick(&mut self) {
        self.walk_forward.n_splits = self.quick.n_splits;
        self.walk_forward.first_week = self.quick.first_week;
        self.walk_forward.last_week = self.quick.last_week;
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        self.generator.validate()?;
        let wf = &self.walk_forward;
        if wf.first_week < 3 || wf.first_week > wf.last_week || wf.last_week > self.generator.target_weeks {
            return bad(format!(
                "weeks {}..={} must lie within 3..={}",
                wf.first_week, wf.last_week, self.generator.target_weeks
            ));
        }
        if wf.n_splits == 0 {
            return bad("n_splits must be positive".into());
        }
        for (name, f) in [
            ("walk_forward.train_fraction", wf.train_fraction),
            ("sources.train_fraction", self.sources.train_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("{name} {f} must lie in (0, 1)"));
            }
        }
        let mut configs = wf.configs.clone();
        configs.sort();
        configs.dedup();
        if configs.len() != wf.configs.len() {
            return bad("configs must not repeat".into());
        }
        let wants_ensembles = wf.ensemble_all || !wf.ensemble_dimensions.is_empty();
        if wants_ensembles && !wf.configs.contains(&wf.ensemble_config) {
            return bad(format!("ensemble config {} is not among the configs run", wf.ensemble_config));
        }
        for (name, spec) in [("sources.train", &self.sources.train), ("walk_forward.train", &wf.train)] {
            spec.validate()
                .map_err(|e| ExperimentError::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn source_seed(&self, product_id: &str) -> u64 {
        seed::derive(self.seed, &[seed::str_key("sources"), seed::str_key(product_id)])
    }

    pub fn walk_seed(&self) -> u64 {
        seed::derive(self.seed, &[seed::str_key("walk_forward")])
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, ExperimentError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| ExperimentError::Io {
            path: "thread pool".into(),
            source: std::io::Error::other(e),
        })
}

/// Trains one source network on its full history with a shuffled hold-out.
pub fn train_source(u: &Universe, product: &ProductData, cfg: &ExperimentConfig) -> Result<ModelBundle, ExperimentError> {
    let id = &product.meta.product_id;
    let weeks = (2, cfg.generator.source_history_weeks);
    let rows = build_features(&product.panel, &product.meta, &u.store_metas(), &u.calendar, weeks.0..=weeks.1)?;
    let base = cfg.source_seed(id);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(base));
    let n_train = ((rows.len() as f64 * cfg.sources.train_fraction).round() as usize).clamp(1, rows.len() - 1);
    let scaler = Scaler::fit(order[..n_train].iter().map(|&i| &rows[i]))?;
    let train_set = scaler.dataset(order[..n_train].iter().map(|&i| &rows[i]));
    let val_set = scaler.dataset(order[n_train..].iter().map(|&i| &rows[i]));

    let training_seed = seed::derive(base, &[1]);
    let init = NetworkParams::init(&default_architecture(), seed::derive(base, &[2])).map_err(|source| {
        ExperimentError::Training {
            product: id.clone(),
            source,
        }
    })?;
    let spec = cfg.sources.train.with_seed(training_seed);
    let mask = FrozenMask::none(init.num_layers());
    let (params, history) = train(&init, &train_set, &val_set, &spec, &mask).map_err(|source| {
        ExperimentError::Training {
            product: id.clone(),
            source,
        }
    })?;
    log::info!(
        "{id}: best epoch {} of {}, validation MSE {:.5}",
        history.best_epoch,
        history.val_loss.len(),
        history.val_loss.get(history.best_epoch.saturating_sub(1)).copied().unwrap_or(f64::NAN)
    );
    Ok(ModelBundle {
        product_id: id.clone(),
        source_product: None,
        config: None,
        seed: training_seed,
        train_weeks: weeks,
        scaler,
        network: SavedNetwork::new(&params, training_seed),
        history,
        notes: [("config".to_string(), cfg.to_toml()?)].into(),
    })
}

/// One model per source, in universe order.
pub fn train_sources(u: &Universe, cfg: &ExperimentConfig) -> Result<Vec<ModelBundle>, ExperimentError> {
    if cfg.jobs > 1 {
        pool(cfg.jobs)?.install(|| u.sources.par_iter().map(|p| train_source(u, p, cfg)).collect())
    } else {
        u.sources.iter().map(|p| train_source(u, p, cfg)).collect()
    }
}

fn bundle_path(dir: &Path, product_id: &str) -> PathBuf {
    dir.join(format!("{product_id}.json"))
}

pub fn save_sources(dir: &Path, bundles: &[ModelBundle]) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for b in bundles {
        let path = bundle_path(dir, &b.product_id);
        b.save(&path).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Loads the model of every source in the universe.
pub fn load_sources(dir: &Path, u: &Universe) -> Result<Vec<ModelBundle>, ExperimentError> {
    u.sources
        .iter()
        .map(|p| {
            let path = bundle_path(dir, &p.meta.product_id);
            if !path.exists() {
                return Err(ExperimentError::MissingSource(p.meta.product_id.clone()));
            }
            ModelBundle::load(&path).map_err(io_err(&path))
        })
        .collect()
}

/// Source statistics over the whole history and their cluster labels.
pub fn cluster_sources(
    u: &Universe,
    thresholds: &ClusterThresholds,
) -> Result<(Vec<ProductStats>, Vec<ClusterAssignment>), ExperimentError> {
    let window = 1..=u.spec.source_history_weeks;
    let stats = u
        .sources
        .iter()
        .map(|p| compute_stats(&p.panel, &p.meta, window.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let breakpoints = thresholds.resolve(&stats)?;
    let assignments = assign_clusters(&stats, &breakpoints);
    Ok((stats, assignments))
}

/// Everything the walk-forward run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub records: Vec<EvalRecord>,
    pub report: EvalReport,
    pub audit: LeakageAudit,
    pub stats: Vec<ProductStats>,
    pub assignments: Vec<ClusterAssignment>,
    pub ensembles: Vec<EnsembleSpec>,
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    audit: &'a LeakageAudit,
    clusters: &'a [ClusterAssignment],
    ensembles: &'a [EnsembleSpec],
    report: &'a EvalReport,
}

impl ExperimentOutcome {
    /// True when no trained model produced a single score.
    pub fn total_failure(&self) -> bool {
        !self
            .records
            .iter()
            .any(|r| r.kind != ModelKind::Ma && r.mse.is_some())
    }

    pub fn failed_records(&self) -> usize {
        self.records.iter().filter(|r| r.mse.is_none()).count()
    }

    /// Writes records.csv, report.csv, report.json (with the config and audit),
    /// clusters.csv and config.toml into `dir`.
    pub fn write(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_records_csv(&dir.join("records.csv"), &self.records)?;
        self.report.write_csv(&dir.join("report.csv"))?;
        write_cluster_table(&dir.join("clusters.csv"), &self.stats, &self.assignments)?;
        let summary = Summary {
            config: cfg,
            audit: &self.audit,
            clusters: &self.assignments,
            ensembles: &self.ensembles,
            report: &self.report,
        };
        let path = dir.join("report.json");
        fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(io_err(&path))?;
        let path = dir.join("config.toml");
        fs::write(&path, cfg.to_toml()?).map_err(io_err(&path))?;
        Ok(())
    }
}

/// Runs the no-transfer model, every (source, config) pair, the ensembles and the
/// moving-average baseline over the configured weeks and splits.
pub fn run_experiment(
    u: &Universe,
    sources: &[ModelBundle],
    cfg: &ExperimentConfig,
) -> Result<ExperimentOutcome, ExperimentError> {
    let wf = &cfg.walk_forward;
    let architecture = default_architecture();
    let mut factories: Vec<Box<dyn ModelFactory>> = vec![Box::new(FreshFactory {
        architecture: architecture.clone(),
    })];
    for product in &u.sources {
        let id = &product.meta.product_id;
        let bundle = sources
            .iter()
            .find(|b| &b.product_id == id)
            .ok_or_else(|| ExperimentError::MissingSource(id.clone()))?;
        let params = bundle.params()?;
        let horizon = product.meta.week_start(bundle.train_weeks.1 + 1) - Duration::days(1);
        for &config in &wf.configs {
            factories.push(Box::new(TransferFactory {
                source_id: id.clone(),
                params: params.clone(),
                config,
                horizon,
            }));
        }
    }

    let (stats, assignments) = cluster_sources(u, &wf.thresholds)?;
    let ensembles: Vec<EnsembleSpec> = build_ensembles(&assignments, wf.ensemble_config)
        .into_iter()
        .filter(|e| match e.dimension {
            Some(d) => wf.ensemble_dimensions.contains(&d),
            None => wf.ensemble_all,
        })
        .collect();

    let opts = WalkForwardOptions {
        weeks: wf.first_week..=wf.last_week,
        n_splits: wf.n_splits,
        base_seed: cfg.walk_seed(),
        train_fraction: wf.train_fraction,
        train_spec: wf.train.clone(),
        ensembles: ensembles.clone(),
        include_ma: wf.include_ma,
        jobs: cfg.jobs,
    };
    let target = &u.target;
    let result = walk_forward(&target.panel, &target.meta, &u.store_metas(), &u.calendar, &factories, &opts)?;
    let promo_weeks: Vec<i64> = (wf.first_week..=wf.last_week)
        .filter(|&w| target.meta.is_promo_week(w))
        .collect();
    let report = improvement_report(&result.records, &promo_weeks)?;
    Ok(ExperimentOutcome {
        records: result.records,
        report,
        audit: result.audit,
        stats,
        assignments,
        ensembles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn empty_file_means_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("sed = 3"),
            Err(ExperimentError::Parse(_))
        ));
        assert!(ExperimentConfig::from_toml_str("[walk_forward]\nn_split = 3").is_err());
    }

    #[test]
    fn seed_reaches_the_generator() {
        let cfg = ExperimentConfig::from_toml_str("seed = 7\n[generator]\nn_stores = 3").unwrap();
        assert_eq!((cfg.seed, cfg.generator.seed, cfg.generator.n_stores), (7, 7, 3));
        assert_ne!(cfg.walk_seed(), cfg.source_seed("source_01"));
    }

    #[test]
    fn quick_mode_shrinks_the_grid() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_quick();
        let wf = &cfg.walk_forward;
        assert_eq!((wf.n_splits, wf.first_week, wf.last_week), (5, 3, 7));
    }

    #[test]
    fn invalid_settings_are_named() {
        let cases = [
            "schema_version = 2",
            "jobs = 0",
            "[walk_forward]\nfirst_week = 2",
            "[walk_forward]\nlast_week = 18",
            "[walk_forward]\nconfigs = [\"config1\", \"config1\"]",
            "[walk_forward]\nconfigs = [\"config1\"]",
            "[walk_forward.train]\npatience = 9\nmax_epochs = 9",
            "[sources]\ntrain_fraction = 1.0",
        ];
        for text in cases {
            let cfg = ExperimentConfig::from_toml_str(text).unwrap();
            assert!(matches!(cfg.validate(), Err(ExperimentError::Config(_))), "{text}");
        }
        let ok = ExperimentConfig::from_toml_str(
            "[walk_forward]\nconfigs = [\"config1\"]\nensemble_dimensions = []\nensemble_all = false",
        )
        .unwrap();
        ok.validate().unwrap();
    }
}
