//! Synthetic basins with a known attribute-to-parameter map.
//!
//! Attributes `a` are drawn uniformly from `[0, 1]^d`. With the regional
//! truth map, parameter `k` (all but MAXBAS) is
//!
//! ```text
//! theta_k = lo_k + (hi_k - lo_k) * sigmoid(z_k)
//! z_k     = logit(r_k) + sum_j W_kj (a_j - 0.5) + 0.3 sin(pi (a_1 + a_2))
//! W_kj    = sin(1.9 (k + 1) (j + 1) + 0.4)
//! ```
//!
//! where `r_k` places the [`reference_parameters`] inside the range. MAXBAS
//! is held at its reference value. The uniform map gives every basin the
//! reference set.
//!
//! Weather depends only on the seed and the attributes, so basins with equal
//! attributes see equal forcing. Wet days occur with probability
//! `0.25 + 0.4 (1 - a_1)` and carry exponential amounts with mean
//! `5 + 5 (1 - a_1)` mm. Temperature is an annual sinusoid around a
//! basin-specific mean plus daily noise. PET follows the same cycle, scaled by
//! `1 + 2 a_1` and by climate.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::coupling::BasinAttributes;
use crate::error::{Error, Result};
use crate::hbv::{self, ForcingRecord, HbvParameters, HbvState, ParamName};

use super::config::KeyValues;
use super::dataset::{default_start, Basin, BasinDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Climate {
    Temperate,
    Snowy,
    Mixed,
}

impl FromStr for Climate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temperate" => Ok(Climate::Temperate),
            "snowy" => Ok(Climate::Snowy),
            "mixed" => Ok(Climate::Mixed),
            other => Err(Error::Config(format!("unknown climate `{other}`"))),
        }
    }
}

impl fmt::Display for Climate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Climate::Temperate => "temperate",
            Climate::Snowy => "snowy",
            Climate::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruthMap {
    Regional,
    Uniform,
}

impl FromStr for TruthMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regional" => Ok(TruthMap::Regional),
            "uniform" => Ok(TruthMap::Uniform),
            other => Err(Error::Config(format!("unknown truth map `{other}`"))),
        }
    }
}

impl fmt::Display for TruthMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TruthMap::Regional => "regional",
            TruthMap::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_basins: usize,
    pub n_days: usize,
    pub warmup: usize,
    pub seed: u64,
    pub attribute_dim: usize,
    /// Standard deviation of additive discharge noise, mm/day.
    pub noise_std: f64,
    pub climate: Climate,
    pub truth_map: TruthMap,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_basins: 1,
            n_days: 730 + 365,
            warmup: 365,
            seed: 0,
            attribute_dim: 4,
            noise_std: 0.0,
            climate: Climate::Temperate,
            truth_map: TruthMap::Regional,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_basins == 0 {
            return Err(Error::Config("n_basins must be positive".into()));
        }
        if self.n_days <= self.warmup {
            return Err(Error::Config(format!(
                "n_days {} must exceed warmup {}",
                self.n_days, self.warmup
            )));
        }
        if self.attribute_dim == 0 {
            return Err(Error::Config("attribute_dim must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Reads the generator keys; missing keys keep their defaults. The
    /// result is not validated.
    pub fn from_keys(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let spec = Self {
            n_basins: kv.take_or("n_basins", d.n_basins)?,
            n_days: kv.take_or("n_days", d.n_days)?,
            warmup: kv.take_or("warmup", d.warmup)?,
            seed: kv.take_or("data_seed", d.seed)?,
            attribute_dim: kv.take_or("attribute_dim", d.attribute_dim)?,
            noise_std: kv.take_or("noise_std", d.noise_std)?,
            climate: kv.take_or("climate", d.climate)?,
            truth_map: kv.take_or("truth_map", d.truth_map)?,
        };
        Ok(spec)
    }

    pub fn from_config(text: &str, path: &Path) -> Result<Self> {
        let mut kv = KeyValues::parse(text, path)?;
        let spec = Self::from_keys(&mut kv)?;
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_config(&self) -> String {
        format!(
            "n_basins = {}\nn_days = {}\nwarmup = {}\ndata_seed = {}\nattribute_dim = {}\nnoise_std = {}\nclimate = {}\ntruth_map = {}\n",
            self.n_basins,
            self.n_days,
            self.warmup,
            self.seed,
            self.attribute_dim,
            self.noise_std,
            self.climate,
            self.truth_map
        )
    }
}

/// The parameter set used by the uniform truth map and as the default for
/// parameters a model does not learn.
pub fn reference_parameters() -> HbvParameters<f64> {
    HbvParameters {
        tt: 0.0,
        cfmax: 3.5,
        cfr: 0.05,
        cwh: 0.1,
        fc: 250.0,
        beta: 2.0,
        lp: 0.7,
        perc: 2.0,
        uzl: 20.0,
        k0: 0.3,
        k1: 0.1,
        k2: 0.03,
        maxbas: 2.5,
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Ground-truth parameters for attributes `a` under `map`.
pub fn truth_parameters(a: &[f64], map: TruthMap) -> HbvParameters<f64> {
    let reference = reference_parameters();
    if map == TruthMap::Uniform {
        return reference;
    }
    let a2 = a.get(1).copied().unwrap_or(a[0]);
    let interaction = 0.3 * (PI * (a[0] + a2)).sin();
    reference.map(|name, r| {
        if name == ParamName::Maxbas {
            return r;
        }
        let k = name.index() as f64;
        let (lo, hi) = name.bounds();
        let frac = (r - lo) / (hi - lo);
        let mut z = (frac / (1.0 - frac)).ln() + interaction;
        for (j, aj) in a.iter().enumerate() {
            z += (1.9 * (k + 1.0) * (j as f64 + 1.0) + 0.4).sin() * (aj - 0.5);
        }
        lo + (hi - lo) * sigmoid(z)
    })
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn weather_seed(seed: u64, a: &[f64]) -> u64 {
    a.iter().fold(splitmix(seed), |h, v| splitmix(h ^ v.to_bits()))
}

/// Daily weather for one basin; depends only on `seed`, `a` and `climate`.
pub fn synthetic_forcing(seed: u64, a: &[f64], n_days: usize, climate: Climate) -> Vec<ForcingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(weather_seed(seed, a));
    let aridity = a[0];
    let (t_range, amplitude, pet_scale) = match climate {
        Climate::Temperate => ((7.0, 12.0), 9.0, 1.0),
        Climate::Snowy => ((-2.0, 3.0), 12.0, 0.6),
        Climate::Mixed => ((-2.0, 12.0), 10.0, 0.8),
    };
    let t_mean = rng.random_range(t_range.0..t_range.1);
    let wet = 0.25 + 0.4 * (1.0 - aridity);
    let amount = Exp::new(1.0 / (5.0 + 5.0 * (1.0 - aridity))).expect("positive rate");
    let t_noise = Normal::new(0.0, 2.0).expect("positive sd");
    (0..n_days)
        .map(|d| {
            let season = (TAU * (d as f64 - 110.0) / 365.0).sin();
            let p = if rng.random_bool(wet) { amount.sample(&mut rng) } else { 0.0 };
            let t = t_mean + amplitude * season + t_noise.sample(&mut rng);
            let pet = pet_scale * (1.0 + 2.0 * aridity) * (1.0 + 0.9 * season);
            ForcingRecord { p, t, pet }
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<BasinDataset> {
    spec.validate()?;
    let mut attr_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid sd");
    let mut basins = Vec::with_capacity(spec.n_basins);
    for id in 0..spec.n_basins as u32 {
        let a: Vec<f64> = (0..spec.attribute_dim).map(|_| attr_rng.random::<f64>()).collect();
        let truth = truth_parameters(&a, spec.truth_map);
        let forcings = synthetic_forcing(spec.seed, &a, spec.n_days, spec.climate);
        let clean = hbv::simulate_values(&HbvState::empty(), &truth, &forcings, 0)?.discharge;
        let observed = if spec.noise_std == 0.0 {
            clean
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(spec.seed ^ splitmix(u64::from(id) + 1)));
            clean.iter().map(|q| (q + noise.sample(&mut rng)).max(0.0)).collect()
        };
        basins.push(Basin {
            id,
            attributes: BasinAttributes::new(a)?,
            forcings,
            observed,
            start: default_start(),
            truth: Some(truth),
        });
    }
    BasinDataset::new(basins, Some(spec.clone()))
}
