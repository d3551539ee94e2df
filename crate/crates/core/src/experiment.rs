//! Experiment runner: config resolution, the (density, seed, noise, model)
//! grid, reports, inference timing and parameter-memory accounting.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::advnet::{self, PredictorParams};
use crate::baselines::{self, CfConfig, NeighborhoodCf, PmfConfig, PmfModel};
use crate::dataset::{
    self, AttributeTable, Interaction, InteractionSet, MatrixFormat, QoSMatrix, WsdreamFiles,
};
use crate::error::{Error, Result};
use crate::graph::{self, NeighborhoodIndex};
use crate::nn::Mode;
use crate::rng;
use crate::training::{self, DataBundle, Graphs, Metrics, QosModel, TrainingConfig};

pub const REPORT_SCHEMA_VERSION: &str = "qosgraph.report.v1";
/// The schema file the report layout is checked against.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.v1.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Qosmgaa,
    Upcc,
    Ipcc,
    Uipcc,
    Pmf,
}

impl ModelKind {
    pub fn is_trained(self) -> bool {
        matches!(self, ModelKind::Qosmgaa | ModelKind::Pmf)
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "qosmgaa" => Ok(ModelKind::Qosmgaa),
            "upcc" => Ok(ModelKind::Upcc),
            "ipcc" => Ok(ModelKind::Ipcc),
            "uipcc" => Ok(ModelKind::Uipcc),
            "pmf" => Ok(ModelKind::Pmf),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::Qosmgaa => "qosmgaa",
            ModelKind::Upcc => "upcc",
            ModelKind::Ipcc => "ipcc",
            ModelKind::Uipcc => "uipcc",
            ModelKind::Pmf => "pmf",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// A WSDream directory, or a matrix file.
    pub dataset: PathBuf,
    pub format: MatrixFormat,
    /// `rt` or `tp` for WSDream directories; a label otherwise.
    pub metric: String,
    pub user_attributes: Option<PathBuf>,
    pub service_attributes: Option<PathBuf>,
    pub user_schema: Vec<String>,
    pub service_schema: Vec<String>,
    pub densities: Vec<f64>,
    pub models: Vec<ModelKind>,
    pub training: TrainingConfig,
    pub noise_ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub val_frac: f64,
    pub cf: CfConfig,
    pub pmf: PmfConfig,
    pub inference_reps: usize,
    pub inference_pairs: usize,
    pub bytes_per_scalar: usize,
    pub save_checkpoints: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: PathBuf::from("data/wsdream"),
            format: MatrixFormat::WsdreamDense,
            metric: "rt".into(),
            user_attributes: None,
            service_attributes: None,
            user_schema: dataset::default_user_schema(),
            service_schema: dataset::default_service_schema(),
            densities: vec![0.05],
            models: vec![ModelKind::Qosmgaa],
            training: TrainingConfig::default(),
            noise_ratios: vec![0.0],
            seeds: vec![1, 2, 3],
            val_frac: 0.1,
            cf: CfConfig::default(),
            pmf: PmfConfig::default(),
            inference_reps: 5,
            inference_pairs: 1000,
            bytes_per_scalar: 4,
            save_checkpoints: false,
            out: PathBuf::from("runs/latest"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

impl ExperimentConfig {
    /// Apply one `key = value` setting. Keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        let v = value.trim();
        let t = &mut self.training;
        match k {
            "dataset" => self.dataset = PathBuf::from(v),
            "format" => self.format = v.parse()?,
            "metric" => self.metric = v.to_ascii_lowercase(),
            "user_attributes" => self.user_attributes = Some(PathBuf::from(v)),
            "service_attributes" => self.service_attributes = Some(PathBuf::from(v)),
            "user_schema" => self.user_schema = parse_list(k, v)?,
            "service_schema" => self.service_schema = parse_list(k, v)?,
            "density" | "densities" => self.densities = parse_list(k, v)?,
            "model" | "models" => self.models = parse_list(k, v)?,
            "noise_ratio" | "noise_ratios" => self.noise_ratios = parse_list(k, v)?,
            "seed" | "seeds" => self.seeds = parse_list(k, v)?,
            "val_frac" => self.val_frac = parse(k, v)?,
            "k" | "neighbors" => self.cf.k = parse(k, v)?,
            "alpha" => self.cf.alpha = parse(k, v)?,
            "allow_negative" => self.cf.allow_negative = parse_bool(k, v)?,
            "pmf_rank" => self.pmf.rank = parse(k, v)?,
            "pmf_lr" => self.pmf.lr = parse(k, v)?,
            "pmf_mu" => self.pmf.mu = parse(k, v)?,
            "pmf_epochs" => self.pmf.epochs = parse(k, v)?,
            "inference_reps" => self.inference_reps = parse(k, v)?,
            "inference_pairs" => self.inference_pairs = parse(k, v)?,
            "bytes_per_scalar" => self.bytes_per_scalar = parse(k, v)?,
            "checkpoints" | "save_checkpoints" => self.save_checkpoints = parse_bool(k, v)?,
            "out" => self.out = PathBuf::from(v),
            "lambda" => t.lambda = parse(k, v)?,
            "tau" => t.tau = parse(k, v)?,
            "epochs" => t.epochs = parse(k, v)?,
            "batch_size" => t.batch_size = parse(k, v)?,
            "lr" | "learning_rate" => t.learning_rate = parse(k, v)?,
            "weight_decay" => t.weight_decay = parse(k, v)?,
            "patience" => t.patience = parse(k, v)?,
            "order" => t.order = parse(k, v)?,
            "heads" => t.heads = parse(k, v)?,
            "embed_dim" => t.embed_dim = parse(k, v)?,
            "predictor_hidden" => t.predictor_hidden = parse(k, v)?,
            "discriminator_hidden" => t.discriminator_hidden = parse(k, v)?,
            "dropout" | "attention_dropout" => t.attention_dropout = parse(k, v)?,
            "init_scale" => t.init_scale = parse(k, v)?,
            "max_order_override" => t.max_order_override = Some(parse(k, v)?),
            "ablation" => self.apply_ablation(v)?,
            _ => return Err(Error::Config(format!("unknown setting `{k}`"))),
        }
        Ok(())
    }

    /// Comma-separated switches: `none`, `no_adversarial`, `no_gumbel`,
    /// `fool_fakes`, `rescale_fakes`, `shared_orders`.
    pub fn apply_ablation(&mut self, list: &str) -> Result<()> {
        let t = &mut self.training;
        for item in list.split(',').map(|s| s.trim().replace('-', "_")) {
            match item.as_str() {
                "" | "none" => {}
                "no_adversarial" | "no_adv" => t.adversarial_on = false,
                "no_gumbel" => t.gumbel_on = false,
                "fool_fakes" => t.fool_fakes = true,
                "rescale_fakes" => t.rescale_fakes = true,
                "shared_orders" => t.shared_orders = true,
                other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
            }
        }
        Ok(())
    }

    /// Apply a `key = value` file. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.densities.is_empty() || self.models.is_empty() || self.noise_ratios.is_empty()
        {
            return Err(Error::Config("seeds, densities, models and noise ratios must be non-empty".into()));
        }
        if let Some(d) = self.densities.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
            return Err(Error::Config(format!("density {d} outside (0, 1)")));
        }
        if let Some(r) = self.noise_ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::Config(format!("noise ratio {r} outside [0, 1)")));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(Error::Config(format!("validation fraction {} outside [0, 1)", self.val_frac)));
        }
        if self.inference_reps < 3 {
            return Err(Error::Config("inference timing needs at least 3 repetitions".into()));
        }
        if self.cf.k < 1 {
            return Err(Error::Config("neighbor count must be at least 1".into()));
        }
        if self.bytes_per_scalar == 0 {
            return Err(Error::Config("bytes per scalar must be positive".into()));
        }
        self.training.validate()
    }
}

/// Matrix plus both attribute tables.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub matrix: QoSMatrix,
    pub user_attrs: AttributeTable,
    pub service_attrs: AttributeTable,
    pub user_schema: Vec<String>,
    pub service_schema: Vec<String>,
}

fn load_attrs(
    path: Option<&PathBuf>,
    schema: &[String],
    n: usize,
) -> Result<(AttributeTable, Vec<String>)> {
    match path {
        Some(p) => Ok((dataset::load_entity_attributes(p, schema, n)?, schema.to_vec())),
        None => Ok((AttributeTable::empty(n, Vec::new()), Vec::new())),
    }
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    if cfg.dataset.is_dir() {
        let files = WsdreamFiles::in_dir(&cfg.dataset);
        let matrix_path = match cfg.metric.as_str() {
            "rt" => &files.rt_matrix,
            "tp" => &files.tp_matrix,
            other => return Err(Error::Config(format!("unknown WSDream metric `{other}`"))),
        };
        let mut matrix = dataset::load_qos_matrix(matrix_path, MatrixFormat::WsdreamDense)?;
        matrix.metric_name = cfg.metric.clone();
        let users = cfg.user_attributes.clone().unwrap_or(files.user_list);
        let services = cfg.service_attributes.clone().unwrap_or(files.service_list);
        let (user_attrs, user_schema) = load_attrs(Some(&users), &cfg.user_schema, matrix.num_users())?;
        let (service_attrs, service_schema) =
            load_attrs(Some(&services), &cfg.service_schema, matrix.num_services())?;
        return Ok(LoadedData {
            matrix,
            user_attrs,
            service_attrs,
            user_schema,
            service_schema,
        });
    }
    let mut matrix = dataset::load_qos_matrix(&cfg.dataset, cfg.format)?;
    matrix.metric_name = cfg.metric.clone();
    let (user_attrs, user_schema) = load_attrs(cfg.user_attributes.as_ref(), &cfg.user_schema, matrix.num_users())?;
    let (service_attrs, service_schema) =
        load_attrs(cfg.service_attributes.as_ref(), &cfg.service_schema, matrix.num_services())?;
    Ok(LoadedData {
        matrix,
        user_attrs,
        service_attrs,
        user_schema,
        service_schema,
    })
}

/// Build both graphs, optionally corrupt them, and index neighborhoods up to `order`.
pub fn build_graphs(data: &LoadedData, order: usize, noise_ratio: f64, seed: u64) -> Result<Graphs> {
    let (nu, ns) = (data.matrix.num_users(), data.matrix.num_services());
    let mut ug = graph::build_heterogeneous_graph(nu, &data.user_attrs, &data.user_schema)?;
    let mut sg = graph::build_heterogeneous_graph(ns, &data.service_attrs, &data.service_schema)?;
    if noise_ratio > 0.0 {
        ug = graph::inject_edge_noise(&ug, noise_ratio, rng::derive(seed, 0xA1))?;
        sg = graph::inject_edge_noise(&sg, noise_ratio, rng::derive(seed, 0xA2))?;
    }
    Ok(Graphs {
        users: NeighborhoodIndex::build(&ug, order)?,
        services: NeighborhoodIndex::build(&sg, order)?,
        num_users: nu,
        num_services: ns,
    })
}

/// Single-pair prediction, the unit timed by [`measure_inference`].
pub trait QosPredictor {
    fn predict(&self, user: usize, service: usize) -> f64;
}

/// A trained model with its graph encodings precomputed. The encodings do
/// not depend on the query pair, so per-pair inference is a row build and a
/// predictor pass.
pub struct EncodedModel {
    pub users: Array2<f64>,
    pub services: Array2<f64>,
    pub predictor: PredictorParams,
}

impl EncodedModel {
    pub fn new(model: &QosModel, graphs: &Graphs) -> Result<Self> {
        let users: Vec<usize> = (0..graphs.num_users).collect();
        let services: Vec<usize> = (0..graphs.num_services).collect();
        let (u, s) = training::encode_entities(&model.generator, graphs, &users, &services)?;
        Ok(EncodedModel {
            users: u,
            services: s,
            predictor: model.generator.predictor.clone(),
        })
    }
}

impl QosPredictor for EncodedModel {
    fn predict(&self, user: usize, service: usize) -> f64 {
        let pair = [Interaction { user, service, value: 0.0 }];
        let rows = advnet::build_interaction(&self.users, &self.services, &pair).expect("pair in range");
        advnet::predict(&rows.rows, &self.predictor, Mode::Eval).expect("consistent widths")[0]
    }
}

impl QosPredictor for PmfModel {
    fn predict(&self, user: usize, service: usize) -> f64 {
        baselines::pmf_predict(self, user, service)
    }
}

/// Neighborhood model bound to one of its three estimators.
pub struct CfPredictor<'a> {
    pub cf: &'a NeighborhoodCf,
    pub kind: ModelKind,
}

impl QosPredictor for CfPredictor<'_> {
    fn predict(&self, user: usize, service: usize) -> f64 {
        match self.kind {
            ModelKind::Upcc => self.cf.upcc(user, service),
            ModelKind::Ipcc => self.cf.ipcc(user, service),
            _ => self.cf.uipcc(user, service),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceTiming {
    /// Median over repetitions of mean seconds per pair.
    pub seconds_per_pair: f64,
    /// Per-repetition seconds per pair, warm-up excluded.
    pub samples: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall-clock seconds per single-pair prediction over `repetitions`
/// timed passes, after one untimed warm-up pass.
pub fn measure_inference(
    model: &dyn QosPredictor,
    pairs: &[(usize, usize)],
    repetitions: usize,
) -> Result<InferenceTiming> {
    if repetitions < 3 {
        return Err(Error::Domain(format!("need at least 3 repetitions, got {repetitions}")));
    }
    if pairs.is_empty() {
        return Err(Error::Domain("no pairs to time".into()));
    }
    let mut sink = 0.0;
    for &(u, s) in pairs {
        sink += model.predict(u, s);
    }
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        for &(u, s) in pairs {
            sink += std::hint::black_box(model.predict(u, s));
        }
        samples.push(start.elapsed().as_secs_f64() / pairs.len() as f64);
    }
    std::hint::black_box(sink);
    Ok(InferenceTiming {
        seconds_per_pair: median(&samples),
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleMemory {
    pub module: String,
    pub params: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub bytes_per_scalar: usize,
    pub modules: Vec<ModuleMemory>,
    pub total_params: usize,
    pub total_bytes: usize,
}

impl MemoryReport {
    pub fn from_counts(counts: &[(&str, usize)], bytes_per_scalar: usize) -> Self {
        let modules: Vec<ModuleMemory> = counts
            .iter()
            .map(|&(m, p)| ModuleMemory {
                module: m.to_string(),
                params: p,
                bytes: p * bytes_per_scalar,
            })
            .collect();
        MemoryReport {
            bytes_per_scalar,
            total_params: modules.iter().map(|m| m.params).sum(),
            total_bytes: modules.iter().map(|m| m.bytes).sum(),
            modules,
        }
    }

    pub fn megabytes(&self) -> f64 {
        self.total_bytes as f64 / 1e6
    }
}

/// Trainable parameter count times `bytes_per_scalar`, per module.
pub fn estimate_memory(model: &QosModel, bytes_per_scalar: usize) -> MemoryReport {
    MemoryReport::from_counts(&model.param_breakdown(), bytes_per_scalar)
}

/// [`estimate_memory`] for a freshly initialized model over graphs of the given sizes.
pub fn estimate_memory_for(
    cfg: &TrainingConfig,
    user_nodes: usize,
    service_nodes: usize,
    bytes_per_scalar: usize,
) -> Result<MemoryReport> {
    Ok(estimate_memory(&QosModel::init(cfg, user_nodes, service_nodes)?, bytes_per_scalar))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub model: ModelKind,
    pub density: f64,
    pub noise_ratio: f64,
    pub seed: u64,
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
    pub inference_seconds: f64,
    pub memory_bytes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs_run: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: ModelKind,
    pub density: f64,
    pub noise_ratio: f64,
    pub runs: usize,
    pub mae_mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub mae_std: Option<f64>,
    pub rmse_mean: f64,
    pub rmse_std: Option<f64>,
    pub inference_seconds_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: String,
    pub config: ExperimentConfig,
    pub runs: Vec<RunRow>,
    pub aggregates: Vec<AggregateRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory: Option<MemoryReport>,
}

pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Group rows by (model, density, noise ratio) in first-seen order.
pub fn aggregate(rows: &[RunRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(ModelKind, u64, u64)> = Vec::new();
    let mut groups: BTreeMap<(ModelKind, u64, u64), Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.model, r.density.to_bits(), r.noise_ratio.to_bits());
        if !groups.contains_key(&key) {
            keys.push(key);
        }
        groups.entry(key).or_default().push(r);
    }
    keys.iter()
        .map(|key| {
            let g = &groups[key];
            let mae: Vec<f64> = g.iter().map(|r| r.mae).collect();
            let rmse: Vec<f64> = g.iter().map(|r| r.rmse).collect();
            let inf: Vec<f64> = g.iter().map(|r| r.inference_seconds).collect();
            let (mae_mean, mae_std) = mean_std(&mae);
            let (rmse_mean, rmse_std) = mean_std(&rmse);
            AggregateRow {
                model: key.0,
                density: g[0].density,
                noise_ratio: g[0].noise_ratio,
                runs: g.len(),
                mae_mean,
                mae_std,
                rmse_mean,
                rmse_std,
                inference_seconds_mean: mean_std(&inf).0,
            }
        })
        .collect()
}

const CSV_HEADER: &str =
    "model,density,noise_ratio,seed,mae,rmse,count,inference_seconds,memory_bytes,train_seconds,epochs_run,best_epoch";

fn csv_row(r: &RunRow) -> String {
    let opt = |v: Option<String>| v.unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.model,
        r.density,
        r.noise_ratio,
        r.seed,
        r.mae,
        r.rmse,
        r.count,
        r.inference_seconds,
        r.memory_bytes,
        opt(r.train_seconds.map(|v| v.to_string())),
        opt(r.epochs_run.map(|v| v.to_string())),
        opt(r.best_epoch.map(|v| v.to_string())),
    )
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Wide CSV: one line per x value, `<model>_mae` and `<model>_rmse` columns.
fn plot_series(aggs: &[AggregateRow], x_name: &str, x_of: impl Fn(&AggregateRow) -> f64, keep: impl Fn(&AggregateRow) -> bool) -> String {
    let mut models: Vec<ModelKind> = aggs.iter().filter(|a| keep(a)).map(|a| a.model).collect();
    models.sort();
    models.dedup();
    let mut xs: Vec<f64> = aggs.iter().filter(|a| keep(a)).map(&x_of).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut out = String::from(x_name);
    for m in &models {
        out.push_str(&format!(",{m}_mae,{m}_rmse"));
    }
    out.push('\n');
    for x in xs {
        out.push_str(&x.to_string());
        for m in &models {
            match aggs.iter().find(|a| keep(a) && a.model == *m && x_of(a) == x) {
                Some(a) => out.push_str(&format!(",{},{}", a.mae_mean, a.rmse_mean)),
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

fn timing_pairs(test: &InteractionSet, n: usize, seed: u64) -> Vec<(usize, usize)> {
    use rand::seq::IndexedRandom;
    let mut r = rng::stream(seed, 0x71);
    test.triples
        .choose_multiple(&mut r, n.min(test.len()))
        .map(|t| (t.user, t.service))
        .collect()
}

fn predictions(model: &dyn QosPredictor, set: &InteractionSet) -> Result<Metrics> {
    let pred: Vec<f64> = set.triples.iter().map(|t| model.predict(t.user, t.service)).collect();
    let truth: Vec<f64> = set.triples.iter().map(|t| t.value).collect();
    Metrics::compute(&pred, &truth)
}

struct Outputs {
    dir: PathBuf,
    csv: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        for sub in ["", "history", "checkpoints"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
        }
        let path = dir.join("metrics.csv");
        let file = File::create(&path).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        let mut csv = BufWriter::new(file);
        writeln!(csv, "{CSV_HEADER}").map_err(|e| Error::io("writing metrics.csv", e))?;
        Ok(Outputs { dir: dir.to_path_buf(), csv })
    }

    fn row(&mut self, r: &RunRow) -> Result<()> {
        writeln!(self.csv, "{}", csv_row(r)).map_err(|e| Error::io("writing metrics.csv", e))?;
        self.csv.flush().map_err(|e| Error::io("writing metrics.csv", e))
    }
}

/// Run the full grid and write `report.json`, `metrics.csv`,
/// `plot_density.csv`, `plot_noise.csv`, `config.json` and per-run history
/// files under `cfg.out`. Rows already finished stay in `metrics.csv` if a
/// later cell fails.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    run_experiment_on(cfg, &data)
}

pub fn run_experiment_on(cfg: &ExperimentConfig, data: &LoadedData) -> Result<RunReport> {
    cfg.validate()?;
    let mut out = Outputs::create(&cfg.out)?;
    write_file(&out.dir.join("config.json"), &serde_json::to_string_pretty(cfg).expect("plain config"))?;
    let mut rows = Vec::new();
    let mut memory = None;
    for &density in &cfg.densities {
        for &seed in &cfg.seeds {
            let (train, test) = dataset::sample_sparse(&data.matrix, density, rng::derive(seed, 0x51))?;
            let mut cf: Option<NeighborhoodCf> = None;
            let mut pmf: Option<(PmfModel, f64)> = None;
            for &noise in &cfg.noise_ratios {
                for &model in &cfg.models {
                    let ctx = format!("model {model}, density {density}, noise {noise}, seed {seed}");
                    let row = run_cell(cfg, data, &train, &test, model, density, noise, seed, &mut cf, &mut pmf, &mut memory)
                        .map_err(|e| e.context(ctx.clone()))?;
                    log::info!("{ctx}: mae {:.4} rmse {:.4}", row.mae, row.rmse);
                    out.row(&row)?;
                    rows.push(row);
                }
            }
        }
    }
    let aggregates = aggregate(&rows);
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        config: cfg.clone(),
        runs: rows,
        aggregates,
        memory,
    };
    write_file(&out.dir.join("report.json"), &serde_json::to_string_pretty(&report).expect("plain report"))?;
    let first_noise = cfg.noise_ratios[0];
    let first_density = cfg.densities[0];
    write_file(
        &out.dir.join("plot_density.csv"),
        &plot_series(&report.aggregates, "density", |a| a.density, |a| a.noise_ratio == first_noise),
    )?;
    write_file(
        &out.dir.join("plot_noise.csv"),
        &plot_series(&report.aggregates, "noise_ratio", |a| a.noise_ratio, |a| a.density == first_density),
    )?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    train: &InteractionSet,
    test: &InteractionSet,
    model: ModelKind,
    density: f64,
    noise: f64,
    seed: u64,
    cf: &mut Option<NeighborhoodCf>,
    pmf: &mut Option<(PmfModel, f64)>,
    memory: &mut Option<MemoryReport>,
) -> Result<RunRow> {
    let (nu, ns) = (data.matrix.num_users(), data.matrix.num_services());
    let pairs = timing_pairs(test, cfg.inference_pairs, seed);
    let base = RunRow {
        model,
        density,
        noise_ratio: noise,
        seed,
        mae: 0.0,
        rmse: 0.0,
        count: 0,
        inference_seconds: 0.0,
        memory_bytes: 0,
        train_seconds: None,
        epochs_run: None,
        best_epoch: None,
        history: None,
    };
    let finish = |row: RunRow, m: Metrics, timing: InferenceTiming| RunRow {
        mae: m.mae,
        rmse: m.rmse,
        count: m.count,
        inference_seconds: timing.seconds_per_pair,
        ..row
    };
    match model {
        ModelKind::Upcc | ModelKind::Ipcc | ModelKind::Uipcc => {
            if cf.is_none() {
                *cf = Some(NeighborhoodCf::fit(train, nu, ns, cfg.cf)?);
            }
            let p = CfPredictor {
                cf: cf.as_ref().expect("fitted"),
                kind: model,
            };
            let m = predictions(&p, test)?;
            let t = measure_inference(&p, &pairs, cfg.inference_reps)?;
            Ok(finish(base, m, t))
        }
        ModelKind::Pmf => {
            if pmf.is_none() {
                let start = Instant::now();
                let pcfg = PmfConfig { seed: rng::derive(seed, 0x9A), ..cfg.pmf };
                let (m, _) = baselines::pmf_fit(train, nu, ns, &pcfg)?;
                *pmf = Some((m, start.elapsed().as_secs_f64()));
            }
            let (p, secs) = pmf.as_ref().expect("fitted");
            let m = predictions(p, test)?;
            let t = measure_inference(p, &pairs, cfg.inference_reps)?;
            let row = RunRow {
                memory_bytes: p.num_params() * cfg.bytes_per_scalar,
                train_seconds: Some(*secs),
                epochs_run: Some(cfg.pmf.epochs),
                ..base
            };
            Ok(finish(row, m, t))
        }
        ModelKind::Qosmgaa => {
            let tcfg = TrainingConfig { seed, ..cfg.training.clone() };
            let (fit, val) = dataset::split_validation(train, cfg.val_frac, rng::derive(seed, 0x52))?;
            let graphs = build_graphs(data, tcfg.effective_order(), noise, seed)?;
            let bundle = DataBundle {
                fit,
                val,
                test: test.clone(),
                graphs,
            };
            let start = Instant::now();
            let (trained, history) = training::fit(&bundle, &tcfg)?;
            let secs = start.elapsed().as_secs_f64();
            let stem = format!("{model}_d{density}_n{noise}_s{seed}");
            let hist_path = cfg.out.join("history").join(format!("{stem}.jsonl"));
            history.write_jsonl(&hist_path)?;
            if cfg.save_checkpoints {
                let mut state = training::TrainState::new(trained.clone(), &tcfg);
                state.epoch = history.best_epoch;
                training::save_checkpoint(&state, &tcfg, cfg.out.join("checkpoints").join(format!("{stem}.ckpt")))?;
            }
            let m = training::evaluate(&trained, &bundle.graphs, &bundle.test)?;
            let encoded = EncodedModel::new(&trained, &bundle.graphs)?;
            let t = measure_inference(&encoded, &pairs, cfg.inference_reps)?;
            let mem = estimate_memory(&trained, cfg.bytes_per_scalar);
            let row = RunRow {
                memory_bytes: mem.total_bytes,
                train_seconds: Some(secs),
                epochs_run: Some(history.records.len()),
                best_epoch: Some(history.best_epoch),
                history: Some(hist_path),
                ..base
            };
            memory.get_or_insert(mem);
            Ok(finish(row, m, t))
        }
    }
}
