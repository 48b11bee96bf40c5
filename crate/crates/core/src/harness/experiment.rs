//! End-to-end experiments driven by a flat config file.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `mode` | required | `direct_calibration`, `parameter_learning`, `module_replacement`, `constitutive_learning` |
//! | `dataset` | none | dataset directory; when absent the synthetic keys below are used |
//! | `n_basins`, `n_days`, `data_seed`, `attribute_dim`, `noise_std`, `climate`, `truth_map` | see [`SyntheticSpec`] | synthetic generator |
//! | `warmup` | 365 | days excluded from loss and metrics |
//! | `train_basins` | all but the test basins | lowest ids are used for training |
//! | `test_basins` | 0 | highest ids are held out |
//! | `train_end` | series end | exclusive end of the training window; later days form the held-out period |
//! | `loss` | `nse_batch` | `mse`, `rmse`, `nse_batch` |
//! | `variance_floor` | 0.1 | added to each basin's observed variance sum in `nse_batch` |
//! | `learning_rate`, `beta1`, `beta2`, `epsilon` | 0.01, 0.9, 0.999, 1e-8 | Adam |
//! | `epochs` | 100 | |
//! | `basin_batch_size` | `all` | basins per Adam step |
//! | `seed` | 0 | network initialization and shuffling |
//! | `hidden` | `16,16` | hidden layer widths |
//! | `activation` | `tanh` | `tanh`, `sigmoid`, `relu` |
//! | `learned_params` | all but MAXBAS | comma-separated names, parameter learning only |
//! | `replaced_flux` | `recharge_fraction` | `recharge_fraction` or `percolation` |
//! | `fixed.<NAME>` | reference set | value of a parameter that is not learned |
//! | `init` | `reference` | direct calibration start: `reference` or `midpoints` |
//! | `init.<NAME>` | | overrides one starting value |
//! | `relation_grid` | `0:1:101` | `lo:hi:n` sample points of a learned flux law |
//! | `output` | none | artifact directory |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::coupling::{
    extract_learned_relation, parameter_dump_csv, relation_csv, CouplingMode, CouplingSpec, HybridModel, ReplacedFlux,
};
use crate::error::{Error, Result};
use crate::hbv::{HbvParameters, ParamName, SimulationOutput, PARAM_COUNT};
use crate::nn::{Activation, MlpConfig, MlpWeights};
use crate::train::{self, LossKind, LossSpec, OptimizerConfig, TrainReport};

use super::config::KeyValues;
use super::dataset::{load_dataset, output_csv, Basin, BasinDataset};
use super::synthetic::{generate_synthetic, reference_parameters, SyntheticSpec};
use super::{compute_metrics, median, metrics_csv, MetricsRow};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub coupling: CouplingSpec,
    pub data: DataSource,
    pub train_basins: Option<usize>,
    pub test_basins: usize,
    pub loss: LossSpec,
    pub optimizer: OptimizerConfig,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub relation_grid: (f64, f64, usize),
    /// Starting parameters for direct calibration.
    pub init: HbvParameters<f64>,
    pub output: Option<PathBuf>,
}

fn parse_list<T: std::str::FromStr>(raw: &str, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| Error::Config(format!("bad entry `{s}` in `{key}`: {e}"))))
        .collect()
}

/// `lo:hi:n`, `n >= 2` evenly spaced points.
pub fn parse_grid(raw: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = raw.split(':').collect();
    let bad = || Error::Config(format!("grid `{raw}` is not lo:hi:n"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n < 2 || !(lo < hi) {
        return Err(bad());
    }
    Ok((lo, hi, n))
}

pub fn grid_points((lo, hi, n): (f64, f64, usize)) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut kv = KeyValues::parse(text, path)?;
        let mode: CouplingMode = kv
            .take("mode")?
            .ok_or_else(|| Error::Config("missing key `mode`".into()))?;
        let warmup: usize = kv.take_or("warmup", 365)?;
        let data = match kv.take_raw("dataset") {
            Some(dir) => {
                let base = path.parent().unwrap_or(Path::new(""));
                DataSource::Directory(base.join(dir))
            }
            None => {
                let mut spec = SyntheticSpec::from_keys(&mut kv)?;
                spec.warmup = warmup;
                spec.validate()?;
                DataSource::Synthetic(spec)
            }
        };

        let mut fixed = reference_parameters();
        for key in kv.keys_with_prefix("fixed.") {
            let name: ParamName = key["fixed.".len()..].parse()?;
            let value: f64 = kv.take(&key)?.expect("key present");
            fixed.set(name, value);
        }
        fixed.validate()?;

        let mut init = match kv.take_raw("init").as_deref() {
            Some("midpoints") => HbvParameters::midpoints(),
            None | Some("reference") => reference_parameters(),
            Some(other) => return Err(Error::Config(format!("unknown init `{other}`"))),
        };
        for key in kv.keys_with_prefix("init.") {
            let name: ParamName = key["init.".len()..].parse()?;
            let value: f64 = kv.take(&key)?.expect("key present");
            init.set(name, value);
        }
        init.validate()?;

        let learned = match kv.take_raw("learned_params") {
            None => None,
            Some(raw) if raw == "all" => None,
            Some(raw) => Some(parse_list::<ParamName>(&raw, "learned_params")?),
        };
        let flux: ReplacedFlux = kv.take_or("replaced_flux", ReplacedFlux::RechargeFraction)?;
        let coupling = match mode {
            CouplingMode::DirectCalibration => CouplingSpec::direct_calibration(),
            CouplingMode::ParameterLearning => {
                let learned = learned.unwrap_or_else(|| {
                    ParamName::ALL.into_iter().filter(|&p| p != ParamName::Maxbas).collect()
                });
                CouplingSpec::parameter_learning(learned, fixed)?
            }
            m => CouplingSpec::flux_replacement(m, flux, fixed)?,
        };

        let loss = LossSpec {
            kind: kv.take_or("loss", LossKind::NseBatch)?,
            warmup,
            end: kv.take("train_end")?,
            variance_floor: kv.take_or("variance_floor", train::DEFAULT_VARIANCE_FLOOR)?,
        };
        let d = OptimizerConfig::default();
        let basin_batch_size = match kv.take_raw("basin_batch_size") {
            None => None,
            Some(raw) if raw == "all" => None,
            Some(raw) => Some(
                raw.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad basin_batch_size `{raw}`")))?,
            ),
        };
        let optimizer = OptimizerConfig {
            learning_rate: kv.take_or("learning_rate", d.learning_rate)?,
            beta1: kv.take_or("beta1", d.beta1)?,
            beta2: kv.take_or("beta2", d.beta2)?,
            epsilon: kv.take_or("epsilon", d.epsilon)?,
            epochs: kv.take_or("epochs", d.epochs)?,
            basin_batch_size,
            seed: kv.take_or("seed", d.seed)?,
        };
        optimizer.validate()?;

        let hidden = match kv.take_raw("hidden") {
            None => vec![16, 16],
            Some(raw) => parse_list(&raw, "hidden")?,
        };
        let config = Self {
            coupling,
            data,
            train_basins: kv.take("train_basins")?,
            test_basins: kv.take_or("test_basins", 0)?,
            loss,
            optimizer,
            hidden,
            activation: kv.take_or("activation", Activation::Tanh)?,
            relation_grid: match kv.take_raw("relation_grid") {
                None => (0.0, 1.0, 101),
                Some(raw) => parse_grid(&raw)?,
            },
            init,
            output: kv.take_raw("output").map(|o| path.parent().unwrap_or(Path::new("")).join(o)),
        };
        kv.finish()?;
        Ok(config)
    }

    pub fn dataset(&self) -> Result<BasinDataset> {
        match &self.data {
            DataSource::Synthetic(spec) => generate_synthetic(spec),
            DataSource::Directory(dir) => load_dataset(dir),
        }
    }

    /// Training and held-out basins.
    pub fn split<'d>(&self, dataset: &'d BasinDataset) -> Result<(Vec<&'d Basin>, Vec<&'d Basin>)> {
        let n = dataset.len();
        let test = self.test_basins;
        let train = self.train_basins.unwrap_or(n.saturating_sub(test));
        if train == 0 || train + test > n {
            return Err(Error::Config(format!(
                "cannot take {train} training and {test} held-out basins from {n}"
            )));
        }
        if test > 0 && self.coupling.mode == CouplingMode::DirectCalibration {
            return Err(Error::Config("direct calibration has no held-out basins".into()));
        }
        Ok((
            dataset.basins[..train].iter().collect(),
            dataset.basins[n - test..].iter().collect(),
        ))
    }

    pub fn build_model(&self, train: &[&Basin], attribute_dim: usize) -> Result<HybridModel> {
        let mode = self.coupling.mode;
        if mode == CouplingMode::DirectCalibration {
            return HybridModel::direct_from(train.iter().map(|b| b.id), &self.init);
        }
        let (inputs, outputs) = if mode.replaces_flux() {
            (1, 1)
        } else {
            (attribute_dim, self.coupling.learned_params.len())
        };
        let mut sizes = vec![inputs];
        sizes.extend(&self.hidden);
        sizes.push(outputs);
        HybridModel::with_network(
            self.coupling.clone(),
            &MlpConfig::new(sizes, self.activation, self.optimizer.seed)?,
        )
    }
}

/// `basin_id,param_name,raw` rows for direct calibration.
pub fn raw_params_csv(model: &HybridModel) -> String {
    let mut out = String::from("basin_id,param_name,raw\n");
    for (id, raw) in &model.direct_params {
        for (name, v) in ParamName::ALL.iter().zip(raw) {
            out.push_str(&format!("{id},{name},{v}\n"));
        }
    }
    out
}

pub fn save_model(model: &HybridModel, path: &Path) -> Result<()> {
    let text = match &model.nn {
        Some(nn) => nn.to_csv(),
        None => raw_params_csv(model),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Replaces the trainable part of `model` with the contents of `path`.
pub fn load_weights(mut model: HybridModel, path: &Path, activation: Activation) -> Result<HybridModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if model.nn.is_some() {
        let net = MlpWeights::from_csv(&text, path, activation)?;
        let expected = model.nn.as_ref().map(MlpWeights::layer_sizes);
        if Some(net.layer_sizes()) != expected {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                message: format!("layer sizes {:?} do not match the config {:?}", net.layer_sizes(), expected),
            });
        }
        model.nn = Some(net);
        return Ok(model);
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let schema = |message: String| Error::Schema {
        path: path.to_path_buf(),
        message,
    };
    let header = rdr.headers().map_err(|e| schema(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["basin_id", "param_name", "raw"] {
        return Err(schema("expected header basin_id,param_name,raw".into()));
    }
    let mut seen: BTreeMap<u32, Vec<(ParamName, f64)>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| schema(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let data = |m: String| Error::Data {
            path: path.to_path_buf(),
            line,
            message: m,
        };
        let id: u32 = record[0].parse().map_err(|_| data(format!("bad basin id `{}`", &record[0])))?;
        let name: ParamName = record[1].parse().map_err(|e: Error| data(e.to_string()))?;
        let v: f64 = record[2].parse().map_err(|_| data(format!("bad value `{}`", &record[2])))?;
        seen.entry(id).or_default().push((name, v));
    }
    for (id, slot) in model.direct_params.iter_mut() {
        let entries = seen
            .get(id)
            .ok_or_else(|| schema(format!("no parameters for basin {id}")))?;
        if entries.len() != PARAM_COUNT {
            return Err(schema(format!("basin {id} lists {} of 13 parameters", entries.len())));
        }
        for (name, v) in entries {
            slot[name.index()] = *v;
        }
    }
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub model: HybridModel,
    pub report: TrainReport,
    pub dataset: BasinDataset,
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    /// Training basins over the training window.
    pub train_metrics: Vec<(u32, MetricsRow)>,
    /// Held-out basins over the full post-warmup series.
    pub test_metrics: Vec<(u32, MetricsRow)>,
    /// Training basins after `train_end`, when set.
    pub period_metrics: Vec<(u32, MetricsRow)>,
    pub outputs: BTreeMap<u32, SimulationOutput<f64>>,
    pub relation: Option<Vec<(f64, f64)>>,
}

fn nse_values(rows: &[(u32, MetricsRow)]) -> Vec<f64> {
    rows.iter().map(|(_, m)| m.nse.unwrap_or(f64::NAN)).collect()
}

impl ExperimentOutcome {
    pub fn median_train_nse(&self) -> Option<f64> {
        median(&nse_values(&self.train_metrics))
    }

    pub fn median_test_nse(&self) -> Option<f64> {
        median(&nse_values(&self.test_metrics))
    }

    pub fn median_period_nse(&self) -> Option<f64> {
        median(&nse_values(&self.period_metrics))
    }

    pub fn summary(&self) -> String {
        let show = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
        format!(
            "epochs = {}\nfinal_loss = {}\nmedian_train_nse = {}\nmedian_test_nse = {}\nmedian_period_nse = {}\n",
            self.report.epoch_loss.len(),
            show(self.report.epoch_loss.last().copied()),
            show(self.median_train_nse()),
            show(self.median_test_nse()),
            show(self.median_period_nse()),
        )
    }

    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        let flux_dir = dir.join("fluxes");
        fs::create_dir_all(&flux_dir).map_err(|e| Error::io(&flux_dir, e))?;
        let put = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("metrics_train.csv", metrics_csv(&self.train_metrics))?;
        put("metrics_test.csv", metrics_csv(&self.test_metrics))?;
        if !self.period_metrics.is_empty() {
            put("metrics_holdout_period.csv", metrics_csv(&self.period_metrics))?;
        }
        put("train_report.csv", self.report.to_csv())?;
        let mut dump = Vec::new();
        for (id, out) in &self.outputs {
            let basin = self.dataset.get(*id).expect("simulated basin exists");
            let p = flux_dir.join(format!("{id}.csv"));
            fs::write(&p, output_csv(basin.start, out)).map_err(|e| Error::io(&p, e))?;
            dump.push((*id, self.model.parameters(*id, &basin.attributes)?));
        }
        put("params.csv", parameter_dump_csv(&dump))?;
        if let Some(rel) = &self.relation {
            put("relation.csv", relation_csv(rel))?;
        }
        save_model(&self.model, &dir.join("weights.csv"))?;
        put("summary.txt", self.summary())
    }
}

/// Simulates and scores `model` on the configured split without training.
pub fn evaluate(config: &ExperimentConfig, dataset: BasinDataset, model: HybridModel, report: TrainReport) -> Result<ExperimentOutcome> {
    let (train_set, test_set) = config.split(&dataset)?;
    let mut outputs = BTreeMap::new();
    let mut train_metrics = Vec::new();
    let mut period_metrics = Vec::new();
    let mut test_metrics = Vec::new();
    for b in &train_set {
        let out = model.simulate(b.id, &b.attributes, &b.forcings, 0)?;
        let window = config.loss.window(b.observed.len())?;
        train_metrics.push((b.id, compute_metrics(&out.discharge[..window.end], &b.observed[..window.end], window.start)?));
        if window.end < b.observed.len() {
            period_metrics.push((b.id, compute_metrics(&out.discharge, &b.observed, window.end)?));
        }
        outputs.insert(b.id, out);
    }
    for b in &test_set {
        let out = model.simulate(b.id, &b.attributes, &b.forcings, 0)?;
        test_metrics.push((b.id, compute_metrics(&out.discharge, &b.observed, config.loss.warmup)?));
        outputs.insert(b.id, out);
    }
    let relation = match (&model.nn, model.spec.mode.replaces_flux()) {
        (Some(nn), true) => Some(extract_learned_relation(nn, &grid_points(config.relation_grid))?),
        _ => None,
    };
    let train_ids = train_set.iter().map(|b| b.id).collect();
    let test_ids = test_set.iter().map(|b| b.id).collect();
    Ok(ExperimentOutcome {
        model,
        report,
        dataset,
        train_ids,
        test_ids,
        train_metrics,
        test_metrics,
        period_metrics,
        outputs,
        relation,
    })
}

fn run_inner(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let dataset = config.dataset()?;
    let (train_set, _) = config.split(&dataset)?;
    let model = config.build_model(&train_set, dataset.attribute_dim())?;
    let owned: Vec<Basin> = train_set.into_iter().cloned().collect();
    let (model, report) = train::train(model, &owned, &config.loss, &config.optimizer)?;
    evaluate(config, dataset, model, report)
}

/// Builds, trains and evaluates the configured model. With an output
/// directory, all artifacts are written there; a failed run leaves a
/// `FAILED` file describing the error next to whatever was written.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    with_artifacts(config, run_inner(config))
}

/// Scores a saved model on the configured data.
pub fn evaluate_saved(config: &ExperimentConfig, weights: &Path) -> Result<ExperimentOutcome> {
    let attempt = (|| {
        let dataset = config.dataset()?;
        let (train_set, _) = config.split(&dataset)?;
        let model = config.build_model(&train_set, dataset.attribute_dim())?;
        let model = load_weights(model, weights, config.activation)?;
        evaluate(config, dataset, model, TrainReport::default())
    })();
    with_artifacts(config, attempt)
}

fn with_artifacts(config: &ExperimentConfig, result: Result<ExperimentOutcome>) -> Result<ExperimentOutcome> {
    let Some(dir) = &config.output else {
        return result;
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let failed = dir.join("FAILED");
    let result = result.and_then(|o| o.write_artifacts(dir).map(|_| o));
    match &result {
        Ok(_) => {
            if failed.exists() {
                fs::remove_file(&failed).map_err(|e| Error::io(&failed, e))?;
            }
        }
        Err(e) => {
            fs::write(&failed, format!("{e}\n")).map_err(|io| Error::io(&failed, io))?;
        }
    }
    result
}
