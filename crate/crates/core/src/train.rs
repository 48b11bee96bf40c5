//! Losses, metrics and the Adam training loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::coupling::{HybridModel, Recording};
use crate::error::{Error, Result};
use crate::harness::dataset::Basin;

/// Observed-variance floor added to the denominator of the batch NSE loss.
pub const DEFAULT_VARIANCE_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Rmse,
    NseBatch,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "rmse" => Ok(LossKind::Rmse),
            "nse_batch" => Ok(LossKind::NseBatch),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Rmse => "rmse",
            LossKind::NseBatch => "nse_batch",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Leading days excluded from the loss.
    pub warmup: usize,
    /// Exclusive end of the loss window; `None` runs to the end of the series.
    pub end: Option<usize>,
    pub variance_floor: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, warmup: usize) -> Self {
        Self {
            kind,
            warmup,
            end: None,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }

    pub fn window(&self, len: usize) -> Result<std::ops::Range<usize>> {
        let end = self.end.unwrap_or(len).min(len);
        if self.warmup >= end {
            return Err(Error::Config(format!(
                "empty loss window: warmup {} with series end {end}",
                self.warmup
            )));
        }
        Ok(self.warmup..end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// `None` trains on all basins at once.
    pub basin_batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 100,
            basin_batch_size: None,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.basin_batch_size == Some(0) {
            return Err(Error::Config("basin_batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Nash-Sutcliffe efficiency over the post-warmup window; `None` when the
/// observations have zero variance there.
pub fn nse(sim: &[f64], obs: &[f64], warmup: usize) -> Result<Option<f64>> {
    if sim.len() != obs.len() {
        return Err(Error::Dimension {
            context: "nse",
            expected: obs.len(),
            got: sim.len(),
        });
    }
    if warmup >= obs.len() {
        return Err(Error::Config("empty post-warmup window".into()));
    }
    let (sim, obs) = (&sim[warmup..], &obs[warmup..]);
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let dev: f64 = obs.iter().map(|o| (o - mean).powi(2)).sum();
    if dev == 0.0 {
        return Ok(None);
    }
    let err: f64 = sim.iter().zip(obs).map(|(s, o)| (s - o).powi(2)).sum();
    Ok(Some(1.0 - err / dev))
}

/// One basin's contribution before batch normalization: `(term, count)`.
/// The batch loss is `sum(term) / sum(count)` for MSE and the mean of
/// `term` for the NSE loss.
fn basin_term<'t>(sim: &[Var<'t>], obs: &[f64], spec: &LossSpec) -> Result<(Var<'t>, usize)> {
    if sim.len() != obs.len() {
        return Err(Error::Dimension {
            context: "loss series",
            expected: obs.len(),
            got: sim.len(),
        });
    }
    let window = spec.window(obs.len())?;
    let n = window.len();
    let sq_err = window
        .clone()
        .map(|t| (sim[t] - obs[t]).square())
        .reduce(|a, b| a + b)
        .expect("non-empty window");
    match spec.kind {
        LossKind::Mse | LossKind::Rmse => Ok((sq_err, n)),
        LossKind::NseBatch => {
            let o = &obs[window];
            let mean = o.iter().sum::<f64>() / n as f64;
            let dev: f64 = o.iter().map(|v| (v - mean).powi(2)).sum();
            Ok((sq_err * (1.0 / (dev + spec.variance_floor)), 1))
        }
    }
}

/// Batch loss on a single tape.
pub fn loss<'t>(outputs: &[Vec<Var<'t>>], observations: &[Vec<f64>], spec: &LossSpec) -> Result<Var<'t>> {
    if outputs.len() != observations.len() || outputs.is_empty() {
        return Err(Error::Dimension {
            context: "loss basins",
            expected: observations.len(),
            got: outputs.len(),
        });
    }
    let mut total = None;
    let mut count = 0;
    for (sim, obs) in outputs.iter().zip(observations) {
        let (term, n) = basin_term(sim, obs, spec)?;
        count += n;
        total = Some(match total {
            None => term,
            Some(acc) => acc + term,
        });
    }
    let mean = total.expect("non-empty") * (1.0 / count as f64);
    Ok(match spec.kind {
        LossKind::Rmse => mean.pow_const(0.5)?,
        _ => mean,
    })
}

/// Bias-corrected Adam update in place. `t` counts from 1.
pub fn adam_step(
    weights: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    config: &OptimizerConfig,
) -> Result<()> {
    let n = weights.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(Error::Dimension {
            context: "adam state",
            expected: n,
            got: grads.len().min(m.len()).min(v.len()),
        });
    }
    let b1 = config.beta1;
    let b2 = config.beta2;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..n {
        let g = grads[i];
        if g == 0.0 && m[i] == 0.0 && v[i] == 0.0 {
            continue;
        }
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        weights[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

/// Loss value and gradient with respect to the model's trainable vector,
/// accumulated one basin tape at a time in ascending basin-id order.
pub fn batch_gradient(model: &HybridModel, basins: &[&Basin], spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    if basins.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut order: Vec<&Basin> = basins.to_vec();
    order.sort_by_key(|b| b.id);
    let n_params = model.trainable().len();
    let mut grad = vec![0.0; n_params];
    let mut total = 0.0;
    let mut count = 0usize;
    for basin in order {
        let tape = Tape::with_capacity(basin.forcings.len() * 110);
        let (out, span) = model.run_basin(
            &tape,
            basin.id,
            &basin.attributes,
            &basin.forcings,
            0,
            Recording::Trainable,
        )?;
        let (term, n) = basin_term(&out.discharge, &basin.observed, spec)?;
        total += term.value();
        count += n;
        let g = tape.backward(term);
        for (slot, d) in grad[span.offset..span.offset + span.len].iter_mut().zip(g.as_slice()) {
            *slot += d;
        }
    }
    let scale = 1.0 / count as f64;
    let mean = total * scale;
    let (value, chain) = match spec.kind {
        LossKind::Rmse => {
            let r = mean.sqrt();
            (r, if r > 0.0 { scale / (2.0 * r) } else { 0.0 })
        }
        _ => (mean, scale),
    };
    for g in &mut grad {
        *g *= chain;
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Euclidean norm of the last batch gradient of each epoch.
    pub grad_norm: Vec<f64>,
    pub seconds: Vec<f64>,
    /// Training-window NSE per basin after the last epoch.
    pub final_nse: Vec<(u32, Option<f64>)>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,grad_norm,seconds\n");
        for (i, ((l, g), s)) in self
            .epoch_loss
            .iter()
            .zip(&self.grad_norm)
            .zip(&self.seconds)
            .enumerate()
        {
            out.push_str(&format!("{},{l},{g},{s}\n", i + 1));
        }
        out
    }
}

/// Adam over basin batches. Basins are shuffled per epoch with the seeded
/// generator; gradients are reduced in ascending basin-id order.
pub fn train(
    mut model: HybridModel,
    basins: &[Basin],
    loss_spec: &LossSpec,
    config: &OptimizerConfig,
) -> Result<(HybridModel, TrainReport)> {
    config.validate()?;
    if basins.is_empty() {
        return Err(Error::Config("training needs at least one basin".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights = model.trainable();
    let mut m = vec![0.0; weights.len()];
    let mut v = vec![0.0; weights.len()];
    let mut t = 0u64;
    let batch = config.basin_batch_size.unwrap_or(basins.len()).min(basins.len());
    let mut report = TrainReport::default();
    let mut order: Vec<&Basin> = basins.iter().collect();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        let mut last_norm = 0.0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let (value, grad) = batch_gradient(&model, chunk, loss_spec)?;
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at epoch {}, batch {b}",
                    epoch + 1
                )));
            }
            t += 1;
            adam_step(&mut weights, &grad, &mut m, &mut v, t, config)?;
            model.set_trainable(&weights)?;
            last_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            losses.push(value);
        }
        report.epoch_loss.push(losses.iter().sum::<f64>() / losses.len() as f64);
        report.grad_norm.push(last_norm);
        report.seconds.push(started.elapsed().as_secs_f64());
    }

    let mut sorted: Vec<&Basin> = basins.iter().collect();
    sorted.sort_by_key(|b| b.id);
    for b in sorted {
        let out = model.simulate(b.id, &b.attributes, &b.forcings, 0)?;
        let window = loss_spec.window(b.observed.len())?;
        let value = nse(&out.discharge[..window.end], &b.observed[..window.end], window.start)?;
        report.final_nse.push((b.id, value));
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{BasinAttributes, CouplingSpec};
    use crate::hbv::{self, ForcingRecord, HbvParameters, HbvState, ParamName};
    use crate::nn::{Activation, MlpConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn nse_examples() {
        let obs = [1.0, 2.0, 3.0];
        assert_eq!(nse(&obs, &obs, 0).unwrap(), Some(1.0));
        assert_eq!(nse(&[2.0, 2.0, 2.0], &obs, 0).unwrap(), Some(0.0));
        assert_eq!(nse(&[1.0, 2.0, 4.0], &obs, 0).unwrap(), Some(0.5));
        assert_eq!(nse(&[1.0, 1.0], &[3.0, 3.0], 0).unwrap(), None);
        assert!(nse(&[1.0], &obs, 0).is_err());
        assert!(nse(&obs, &obs, 3).is_err());
        // Warmup drops the leading error.
        assert_eq!(nse(&[9.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0], 1).unwrap(), Some(1.0));
    }

    #[test]
    fn loss_examples() {
        let tape = Tape::new();
        let obs = vec![vec![1.0, 2.0, 3.0]];
        let perfect = vec![obs[0].iter().map(|&v| tape.constant(v)).collect::<Vec<_>>()];
        let spec = LossSpec::new(LossKind::Mse, 0);
        assert_eq!(loss(&perfect, &obs, &spec).unwrap().value(), 0.0);
        let off = vec![[1.0, 2.0, 4.0].iter().map(|&v| tape.constant(v)).collect::<Vec<_>>()];
        assert_relative_eq!(loss(&off, &obs, &spec).unwrap().value(), 1.0 / 3.0, max_relative = 1e-15);
        let rmse = LossSpec::new(LossKind::Rmse, 0);
        assert_relative_eq!(loss(&off, &obs, &rmse).unwrap().value(), (1.0f64 / 3.0).sqrt(), max_relative = 1e-15);
        // One error of 1 against an observed deviation sum of 2.
        let nse_spec = LossSpec::new(LossKind::NseBatch, 0);
        assert_relative_eq!(loss(&off, &obs, &nse_spec).unwrap().value(), 1.0 / 2.1, max_relative = 1e-15);
        assert!(loss(&off, &obs, &LossSpec::new(LossKind::Mse, 3)).is_err());
    }

    #[test]
    fn doubled_loss_doubles_gradient() {
        let tape = Tape::new();
        let x: Vec<_> = tape.leaves(&[1.2, 2.5, 2.9]).unwrap();
        let obs = vec![vec![1.0, 2.0, 3.0]];
        let l = loss(&[x.clone()], &obs, &LossSpec::new(LossKind::Mse, 0)).unwrap();
        let g1 = tape.backward(l);
        let g2 = tape.backward(l * 2.0);
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert_eq!(*b, 2.0 * a);
        }
    }

    #[test]
    fn adam_examples() {
        let cfg = OptimizerConfig::default();
        let mut w = vec![0.5, -0.2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut w, &[0.0, 0.0], &mut m, &mut v, 1, &cfg).unwrap();
        assert_eq!((w.clone(), m.clone(), v.clone()), (vec![0.5, -0.2], vec![0.0; 2], vec![0.0; 2]));

        // First step: m_hat = g, v_hat = g^2, so dw = -lr * g / (|g| + eps).
        let mut w = vec![0.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_step(&mut w, &[1.0], &mut m, &mut v, 1, &cfg).unwrap();
        assert_relative_eq!(w[0], -0.01 / (1.0 + 1e-8), max_relative = 1e-12);
        assert!(adam_step(&mut w, &[1.0, 2.0], &mut m, &mut v, 2, &cfg).is_err());
    }

    fn toy_basins(n: u32, days: usize) -> Vec<Basin> {
        (0..n)
            .map(|id| {
                let forcings: Vec<_> = (0..days)
                    .map(|d| {
                        let ph = (d as f64 + id as f64 * 11.0) * std::f64::consts::TAU / 365.0;
                        ForcingRecord {
                            p: if (d + id as usize) % 3 == 0 { 9.0 + 3.0 * ph.cos() } else { 0.0 },
                            t: 9.0 + 8.0 * ph.sin(),
                            pet: 2.0 + 1.2 * ph.sin(),
                        }
                    })
                    .collect();
                let truth = HbvParameters { fc: 200.0 + 30.0 * id as f64, ..HbvParameters::midpoints() };
                let observed = hbv::simulate_values(&HbvState::empty(), &truth, &forcings, 0).unwrap().discharge;
                Basin {
                    id,
                    attributes: BasinAttributes::new(vec![id as f64 / n as f64, 0.5]).unwrap(),
                    forcings,
                    observed,
                    start: crate::harness::dataset::default_start(),
                    truth: Some(truth),
                }
            })
            .collect()
    }

    fn dpl_model(seed: u64) -> HybridModel {
        let spec = CouplingSpec::parameter_learning(vec![ParamName::Fc, ParamName::K1], HbvParameters::midpoints()).unwrap();
        HybridModel::with_network(spec, &MlpConfig::new(vec![2, 6, 2], Activation::Tanh, seed).unwrap()).unwrap()
    }

    #[test]
    fn zero_epochs_returns_model_unchanged() {
        let basins = toy_basins(2, 100);
        let model = dpl_model(1);
        let cfg = OptimizerConfig { epochs: 0, ..Default::default() };
        let (trained, report) = train(model.clone(), &basins, &LossSpec::new(LossKind::NseBatch, 10), &cfg).unwrap();
        assert_eq!(trained, model);
        assert!(report.epoch_loss.is_empty());
        assert_eq!(report.final_nse.len(), 2);
    }

    #[test]
    fn descent_and_determinism() {
        let basins = toy_basins(3, 200);
        let cfg = OptimizerConfig { epochs: 10, seed: 4, ..Default::default() };
        let spec = LossSpec::new(LossKind::NseBatch, 30);
        let (a, ra) = train(dpl_model(2), &basins, &spec, &cfg).unwrap();
        let (b, rb) = train(dpl_model(2), &basins, &spec, &cfg).unwrap();
        assert_eq!(a.trainable(), b.trainable());
        assert_eq!(ra.epoch_loss, rb.epoch_loss);
        assert!(ra.epoch_loss.iter().all(|l| l.is_finite()));
        let min = ra.epoch_loss.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min <= ra.epoch_loss[0]);
        assert_eq!(ra.to_csv().lines().count(), 11);
    }

    #[test]
    fn full_batch_gradient_ignores_basin_order() {
        let basins = toy_basins(4, 150);
        let model = dpl_model(3);
        let spec = LossSpec::new(LossKind::Mse, 20);
        let forward: Vec<&Basin> = basins.iter().collect();
        let reversed: Vec<&Basin> = basins.iter().rev().collect();
        let (la, ga) = batch_gradient(&model, &forward, &spec).unwrap();
        let (lb, gb) = batch_gradient(&model, &reversed, &spec).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn batch_gradient_matches_single_tape_loss() {
        let basins = toy_basins(2, 120);
        let model = dpl_model(5);
        for kind in [LossKind::Mse, LossKind::Rmse, LossKind::NseBatch] {
            let spec = LossSpec::new(kind, 15);
            let refs: Vec<&Basin> = basins.iter().collect();
            let (value, grad) = batch_gradient(&model, &refs, &spec).unwrap();
            let nn = model.nn.as_ref().unwrap();
            let tape = Tape::new();
            let net = nn.leaves(&tape).unwrap();
            let outs: Vec<Vec<Var>> = basins
                .iter()
                .map(|b| {
                    let p = crate::coupling::derive_parameters(&net, &b.attributes, &model.spec).unwrap();
                    hbv::simulate(&HbvState::empty(), &p, &b.forcings, 15).unwrap().discharge
                })
                .collect();
            let obs: Vec<Vec<f64>> = basins.iter().map(|b| b.observed.clone()).collect();
            let l = loss(&outs, &obs, &spec).unwrap();
            assert_relative_eq!(l.value(), value, max_relative = 1e-12);
            let g = tape.backward(l);
            for (a, b) in g.as_slice().iter().zip(&grad) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{kind}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn minibatches_and_bad_config() {
        let basins = toy_basins(3, 80);
        let cfg = OptimizerConfig { epochs: 2, basin_batch_size: Some(2), ..Default::default() };
        let (_, r) = train(dpl_model(6), &basins, &LossSpec::new(LossKind::Mse, 5), &cfg).unwrap();
        assert_eq!(r.epoch_loss.len(), 2);
        let bad = OptimizerConfig { beta1: 1.0, ..Default::default() };
        assert!(train(dpl_model(6), &basins, &LossSpec::new(LossKind::Mse, 5), &bad).is_err());
        assert!(train(dpl_model(6), &[], &LossSpec::new(LossKind::Mse, 5), &cfg).is_err());
    }

    proptest! {
        #[test]
        fn nse_at_most_one(obs in proptest::collection::vec(0.0f64..10.0, 5..40), noise in proptest::collection::vec(-3.0f64..3.0, 40)) {
            let sim: Vec<f64> = obs.iter().zip(&noise).map(|(o, e)| o + e).collect();
            if let Some(v) = nse(&sim, &obs, 0).unwrap() {
                prop_assert!(v <= 1.0);
            }
            if let Some(v) = nse(&obs, &obs, 0).unwrap() {
                prop_assert_eq!(v, 1.0);
            }
        }

        #[test]
        fn adam_zero_gradient_is_identity(w in proptest::collection::vec(-5.0f64..5.0, 1..10), t in 1u64..100) {
            let cfg = OptimizerConfig::default();
            let mut x = w.clone();
            let mut m = vec![0.0; w.len()];
            let mut v = vec![0.0; w.len()];
            adam_step(&mut x, &vec![0.0; w.len()], &mut m, &mut v, t, &cfg).unwrap();
            prop_assert_eq!(x, w);
            prop_assert!(m.iter().chain(&v).all(|&z| z == 0.0));
        }
    }
}
