//! Config-driven experiment runner.
//!
//! A run is described by one TOML file. Scalar keys can be overridden from
//! the environment with `FEDSEQ_`-prefixed names, nested keys joined by a
//! double underscore: `FEDSEQ_HYPER__DIM=64` sets `hyper.dim`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{
    plot_csv, privacy_csv, records_csv, run_dynamic, run_privacy, run_static, split_days_by_fraction,
    static_table, DynamicConfig, HyperGrid, MetricRecord, PrivacyRow, StaticConfig, STATIC_MODELS,
};
use crate::federation::{RoundConfig, RoundLogRow};
use crate::ingest::synth::{generate_synthetic, SyntheticConfig};
use crate::ingest::{deduplicate, parse_events, EventLog, SplitDays, DEDUP_WINDOW_SECS, SESSION_GAP_SECS};
use crate::privacy::Mechanism;
use crate::seqmf::Hyperparams;

pub const ENV_PREFIX: &str = "FEDSEQ_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Environment {
    #[default]
    Static,
    Dynamic,
    Privacy,
}

impl Environment {
    pub fn name(self) -> &'static str {
        match self {
            Environment::Static => "static",
            Environment::Dynamic => "dynamic",
            Environment::Privacy => "privacy",
        }
    }
}

/// Generator settings; the seed comes from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub users: usize,
    pub apps: usize,
    pub latent_dim: usize,
    pub steps_per_user: usize,
    pub memoryless: bool,
    pub affinity: f64,
    pub popularity: f64,
    pub repeat: f64,
    pub drift: f64,
    pub adoption: f64,
    pub mean_session_len: f64,
    pub start_spread_days: u32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec::from(&SyntheticConfig::new(50, 40, 8, 500, 0))
    }
}

impl From<&SyntheticConfig> for SyntheticSpec {
    fn from(c: &SyntheticConfig) -> Self {
        SyntheticSpec {
            users: c.users,
            apps: c.apps,
            latent_dim: c.latent_dim,
            steps_per_user: c.steps_per_user,
            memoryless: c.memoryless,
            affinity: c.affinity,
            popularity: c.popularity,
            repeat: c.repeat,
            drift: c.drift,
            adoption: c.adoption,
            mean_session_len: c.mean_session_len,
            start_spread_days: c.start_spread_days,
        }
    }
}

impl SyntheticSpec {
    pub fn with_seed(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            users: self.users,
            apps: self.apps,
            latent_dim: self.latent_dim,
            steps_per_user: self.steps_per_user,
            seed,
            memoryless: self.memoryless,
            affinity: self.affinity,
            popularity: self.popularity,
            repeat: self.repeat,
            drift: self.drift,
            adoption: self.adoption,
            mean_session_len: self.mean_session_len,
            start_spread_days: self.start_spread_days,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Event file; synthetic data is generated when absent.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub dedup_window: i64,
    pub session_gap: i64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            synthetic: SyntheticSpec::default(),
            dedup_window: DEDUP_WINDOW_SECS,
            session_gap: SESSION_GAP_SECS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Explicit day counts take precedence over the fractions.
    pub train_days: Option<u32>,
    pub validation_days: Option<u32>,
    pub test_days: Option<u32>,
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_days: None,
            validation_days: None,
            test_days: None,
            train_fraction: 0.7,
            validation_fraction: 0.1,
        }
    }
}

impl SplitConfig {
    pub fn resolve(&self, log: &EventLog) -> Result<SplitDays> {
        match (self.train_days, self.validation_days, self.test_days) {
            (Some(train), Some(validation), Some(test)) => Ok(SplitDays {
                train,
                validation,
                test,
            }),
            (None, None, None) => split_days_by_fraction(log, self.train_fraction, self.validation_fraction),
            _ => Err(Error::Config(
                "split needs all three of train_days, validation_days and test_days, or none".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacyConfig {
    pub mechanisms: Vec<Mechanism>,
    /// When nonempty, every mechanism is rerun at each of these budgets.
    pub epsilons: Vec<f64>,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        PrivacyConfig {
            mechanisms: vec![
                Mechanism::Laplace { epsilon: 4.5 },
                Mechanism::KHarmony { epsilon: 4.5, k: 8 },
                Mechanism::QHarmony {
                    epsilon: 4.5,
                    k: 8,
                    abs_max: false,
                },
            ],
            epsilons: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub environment: Environment,
    /// Models to report; all when empty.
    pub models: Vec<String>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub data: DataConfig,
    pub hyper: Hyperparams,
    /// Static hyperparameter search; a single point at `hyper` when absent.
    pub grid: Option<HyperGrid>,
    pub training: RoundConfig,
    pub split: SplitConfig,
    pub dynamic: DynamicConfig,
    pub privacy: PrivacyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            environment: Environment::Static,
            models: Vec::new(),
            seeds: vec![0],
            output: PathBuf::from("out"),
            data: DataConfig::default(),
            hyper: Hyperparams::default(),
            grid: None,
            training: RoundConfig {
                server_steps: 200,
                ..RoundConfig::default()
            },
            split: SplitConfig::default(),
            dynamic: DynamicConfig::default(),
            privacy: PrivacyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Range and cross-field checks against a catalogue of `n_apps` apps.
    pub fn validate(&self, n_apps: usize) -> Result<()> {
        self.hyper.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::range("seeds", "at least one seed is required"));
        }
        for m in &self.models {
            if !STATIC_MODELS.contains(&m.as_str()) {
                return Err(Error::range("models", format!("unknown model `{m}`")));
            }
        }
        let dims: Vec<usize> = match &self.grid {
            Some(g) => {
                g.points(&self.hyper)?;
                g.dim.clone()
            }
            None => vec![self.hyper.dim],
        };
        for d in dims {
            self.training.validate(n_apps, d)?;
            for m in &self.privacy.mechanisms {
                m.validate(n_apps, d)?;
                for &e in &self.privacy.epsilons {
                    m.with_epsilon(e).validate(n_apps, d)?;
                }
            }
        }
        if self.dynamic.active_users == 0 {
            return Err(Error::range("dynamic.active_users", "must be at least 1"));
        }
        if self.data.session_gap <= 0 || self.data.dedup_window < 0 {
            return Err(Error::range("data", "session_gap must be > 0 and dedup_window >= 0"));
        }
        if let Some(path) = &self.data.path {
            if !path.exists() {
                return Err(Error::range("data.path", format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }

    /// Canonical TOML rendering, used for the run-log echo and the manifest.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn wants(&self, model: &str) -> bool {
        self.models.is_empty() || self.models.iter().any(|m| m == model || model.starts_with(&format!("{m}/")))
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    // reuse the TOML grammar for numbers, booleans and inline arrays
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("single key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `FEDSEQ_A__B=value` overrides to a parsed config table.
pub fn apply_env_overrides<I>(table: &mut toml::Table, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    for (name, value) in vars {
        let Some(key) = name.strip_prefix(ENV_PREFIX) else { continue };
        let path: Vec<String> = key.split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::Config(format!("malformed override variable {name}")));
        }
        let (last, parents) = path.split_last().expect("split yields one part");
        let mut node = &mut *table;
        for p in parents {
            let entry = node
                .entry(p.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{name} overrides into non-table key `{p}`")))?;
        }
        node.insert(last.clone(), parse_scalar(&value));
    }
    Ok(())
}

fn read_table(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path)?;
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    };
    let text = if path.extension().is_some_and(|e| e == "json") {
        // a run manifest: rerun from its resolved config
        let manifest: serde_json::Value = serde_json::from_str(&text)?;
        manifest
            .get("config")
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| parse_err("manifest has no config".into()))?
            .to_string()
    } else {
        text
    };
    text.parse::<toml::Table>().map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start].lines().count().max(1) as u64);
        Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.message().to_string(),
        }
    })
}

/// Reads `path` (or starts from defaults when `None`), applies overrides
/// and fully validates, loading the dataset (or generating the first seed's
/// synthetic log) to check constraints that depend on the catalogue size.
pub fn resolve_config<I>(path: Option<&Path>, vars: I) -> Result<ExperimentConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table = match path {
        Some(p) => read_table(p)?,
        None => toml::Table::new(),
    };
    apply_env_overrides(&mut table, vars)?;
    // round-trip through text so errors carry the offending key
    let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    let mut config: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config(e.message().to_string()))?;
    // relative dataset paths are taken from the config file's directory
    if let (Some(data), Some(dir)) = (config.data.path.as_mut(), path.and_then(Path::parent)) {
        if data.is_relative() {
            *data = dir.join(&*data);
        }
    }
    if let Some(p) = &config.data.path {
        if !p.exists() {
            return Err(Error::range("data.path", format!("{} does not exist", p.display())));
        }
    }
    let seed = config.seeds.first().copied().unwrap_or(0);
    let n_apps = load_log(&config.data, seed)?.n_apps();
    config.validate(n_apps)?;
    Ok(config)
}

pub fn validate_config_with_env<I>(path: impl AsRef<Path>, vars: I) -> Result<ExperimentConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    resolve_config(Some(path.as_ref()), vars)
}

pub fn validate_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    validate_config_with_env(path, std::env::vars())
}

/// Loads and deduplicates the configured log, or generates it for `seed`.
pub fn load_log(data: &DataConfig, seed: u64) -> Result<EventLog> {
    let log = match &data.path {
        Some(p) => parse_events(p)?,
        None => generate_synthetic(&data.synthetic.with_seed(seed))?.log,
    };
    Ok(deduplicate(&log, data.dedup_window))
}

/// Git blob hash: SHA-256 over `blob <len>\0<content>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub version: &'static str,
    pub environment: Environment,
    pub seeds: Vec<u64>,
    /// Canonical TOML rendering of the resolved config.
    pub config: String,
    /// Hash of `config`.
    pub config_hash: String,
    /// Hash of the event file, when the data came from one.
    pub data_hash: Option<String>,
    /// Output file → content hash.
    pub outputs: BTreeMap<String, String>,
}

/// What a run wrote, relative to the output directory.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub files: BTreeMap<String, String>,
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect()
}

fn round_log_csv(rows: &[RoundLogRow]) -> String {
    let mut out = String::from(RoundLogRow::HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

struct Writer<'a> {
    root: &'a Path,
    files: BTreeMap<String, String>,
}

impl Writer<'_> {
    fn write(&mut self, relative: &str, content: &str) -> Result<()> {
        let path = self.root.join(relative);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, content)?;
        self.files.insert(relative.to_string(), content_hash(content.as_bytes()));
        Ok(())
    }
}

/// Privacy rows for every configured mechanism, at its own budget or at
/// each budget of the sweep.
pub fn compare_privacy(config: &ExperimentConfig, log: &EventLog, seed: u64) -> Result<Vec<PrivacyRow>> {
    let round = RoundConfig {
        seed,
        ..config.training.clone()
    };
    if config.privacy.epsilons.is_empty() {
        return run_privacy(log, &config.dynamic, config.hyper, &round, &config.privacy.mechanisms);
    }
    let mut rows = Vec::new();
    for &eps in &config.privacy.epsilons {
        let mechanisms: Vec<Mechanism> = config.privacy.mechanisms.iter().map(|m| m.with_epsilon(eps)).collect();
        rows.extend(run_privacy(log, &config.dynamic, config.hyper, &round, &mechanisms)?);
    }
    Ok(rows)
}

/// Runs every seed and writes `seed-<s>/...` artifacts plus `manifest.json`
/// under the configured output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    let root = config.output.as_path();
    fs::create_dir_all(root).map_err(|e| Error::from(e).in_phase("output"))?;
    let mut out = Writer {
        root,
        files: BTreeMap::new(),
    };

    for &seed in &config.seeds {
        let log = load_log(&config.data, seed).map_err(|e| e.in_phase("ingest"))?;
        let dir = format!("seed-{seed}");
        let round = RoundConfig {
            seed,
            ..config.training.clone()
        };
        match config.environment {
            Environment::Static => {
                let split = config.split.resolve(&log).map_err(|e| e.in_phase("split"))?;
                let sc = StaticConfig {
                    split,
                    grid: config.grid.clone().unwrap_or_else(|| HyperGrid::single(&config.hyper)),
                    base: config.hyper,
                    round,
                    session_gap: config.data.session_gap,
                };
                let results: Vec<_> = run_static(&log, &sc)
                    .map_err(|e| e.in_phase("static"))?
                    .into_iter()
                    .filter(|r| config.wants(&r.model))
                    .collect();
                let records: Vec<MetricRecord> = results
                    .iter()
                    .flat_map(|r| MetricRecord::expand("static", None, &r.model, &r.metrics))
                    .collect();
                out.write(&format!("{dir}/metrics.csv"), &records_csv(&records))?;
                out.write(&format!("{dir}/table.csv"), &static_table(&results))?;
                for r in &results {
                    if !r.round_log.is_empty() {
                        out.write(&format!("{dir}/round_log/{}.csv", sanitize(&r.model)), &round_log_csv(&r.round_log))?;
                    }
                }
            }
            Environment::Dynamic => {
                let report =
                    run_dynamic(&log, &config.dynamic, config.hyper, &round).map_err(|e| e.in_phase("dynamic"))?;
                let records: Vec<MetricRecord> =
                    report.records.into_iter().filter(|r| config.wants(&r.model)).collect();
                out.write(&format!("{dir}/metrics.csv"), &records_csv(&records))?;
                out.write(&format!("{dir}/plot_data.csv"), &plot_csv(&report.plot))?;
                for (model, rows) in &report.round_logs {
                    out.write(&format!("{dir}/round_log/{}.csv", sanitize(model)), &round_log_csv(rows))?;
                }
            }
            Environment::Privacy => {
                let rows = compare_privacy(config, &log, seed).map_err(|e| e.in_phase("privacy"))?;
                out.write(&format!("{dir}/privacy.csv"), &privacy_csv(&rows))?;
            }
        }
    }

    let data_hash = match &config.data.path {
        Some(p) => Some(content_hash(&fs::read(p)?)),
        None => None,
    };
    let config_text = config.to_toml()?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        environment: config.environment,
        seeds: config.seeds.clone(),
        config_hash: content_hash(config_text.as_bytes()),
        config: config_text,
        data_hash,
        outputs: out.files.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    out.write("manifest.json", &json)?;
    Ok(RunSummary { files: out.files })
}
