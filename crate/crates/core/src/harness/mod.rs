//! Synthetic data, dataset files, metrics and experiment orchestration.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod synthetic;

pub use dataset::{load_dataset, save_dataset, Basin, BasinDataset};
pub use experiment::{run_experiment, DataSource, ExperimentConfig, ExperimentOutcome};
pub use synthetic::{generate_synthetic, reference_parameters, Climate, SyntheticSpec, TruthMap};

use crate::autodiff::{grad_check, sum, GradCheckReport, Tape};
use crate::error::{Error, Result};
use crate::hbv::{self, ForcingRecord, HbvParameters, HbvState};
use crate::nn::{Activation, MlpConfig, MlpOnTape, MlpWeights};
use crate::train;

/// Goodness of fit over a post-warmup window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    /// `None` when the observations are constant.
    pub nse: Option<f64>,
    pub rmse: f64,
    /// Mean of `sim - obs`.
    pub bias: f64,
    /// Pearson correlation; `None` when either series is constant.
    pub correlation: Option<f64>,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

pub fn compute_metrics(sim: &[f64], obs: &[f64], warmup: usize) -> Result<MetricsRow> {
    let nse = train::nse(sim, obs, warmup)?;
    let (s, o) = (&sim[warmup..], &obs[warmup..]);
    let n = o.len() as f64;
    let mse = s.iter().zip(o).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let bias = s.iter().zip(o).map(|(a, b)| a - b).sum::<f64>() / n;
    Ok(MetricsRow {
        nse,
        rmse: mse.sqrt(),
        bias,
        correlation: pearson(s, o),
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// `basin_id,nse,rmse,bias`; an undefined NSE is written as `undefined`.
pub fn metrics_csv(rows: &[(u32, MetricsRow)]) -> String {
    let mut out = String::from("basin_id,nse,rmse,bias\n");
    for (id, m) in rows {
        let nse = m.nse.map_or_else(|| "undefined".to_string(), |v| v.to_string());
        out.push_str(&format!("{id},{nse},{},{}\n", m.rmse, m.bias));
    }
    out
}

/// Gradient of the summed discharge with respect to all thirteen parameters.
pub fn hbv_gradcheck(params: &HbvParameters<f64>, forcings: &[ForcingRecord], step: f64) -> Result<GradCheckReport> {
    let point = params.to_array();
    grad_check(
        |_tape: &Tape, x| -> Result<_> {
            let p = HbvParameters::from_array(std::array::from_fn(|i| x[i]));
            let out = hbv::simulate(&HbvState::empty(), &p, forcings, 0)?;
            Ok(sum(out.discharge).expect("non-empty forcing"))
        },
        &point,
        step,
    )
    .map_err(Error::Numerical)
}

/// Gradient of a squared-output loss with respect to every weight of a
/// small seeded network.
pub fn nn_gradcheck(layer_sizes: &[usize], activation: Activation, seed: u64, step: f64) -> Result<GradCheckReport> {
    let net = MlpWeights::init(&MlpConfig::new(layer_sizes.to_vec(), activation, seed)?);
    let input: Vec<f64> = (0..net.input_dim()).map(|i| 0.3 + 0.2 * i as f64).collect();
    let point = net.to_flat();
    grad_check(
        |tape: &Tape, w| -> Result<_> {
            let on = MlpOnTape::from_vars(&net, w.to_vec())?;
            let x: Vec<_> = input.iter().map(|&v| tape.constant(v)).collect();
            let y = on.forward(&x)?;
            Ok(sum(y.iter().enumerate().map(|(k, v)| (*v - 0.1 * k as f64).square())).expect("non-empty"))
        },
        &point,
        step,
    )
    .map_err(Error::Numerical)
}
