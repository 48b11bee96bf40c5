//! Ways of coupling neural networks to the HBV backbone.
//!
//! * Parameter learning: one network maps basin attributes to HBV parameters,
//!   shared by every basin.
//! * Module replacement / constitutive learning: a network takes over one
//!   process law inside the soil or upper-zone routine (the recharge fraction
//!   `(SM/FC)^BETA` by default, percolation optionally).
//! * Direct calibration: no network; each basin owns a vector of raw,
//!   unbounded parameters squashed into the calibration ranges.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::hbv::{
    self, ForcingRecord, HbvParameters, HbvState, ParamName, ProcessOverrides, SimulationOutput,
    PARAM_COUNT,
};
use crate::nn::{bound_value, unbound, MlpConfig, MlpOnTape, MlpWeights};

/// Normalized static basin attributes, each component in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasinAttributes {
    pub values: Vec<f64>,
}

impl BasinAttributes {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite basin attribute".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingMode {
    ParameterLearning,
    ModuleReplacement,
    ConstitutiveLearning,
    DirectCalibration,
}

impl CouplingMode {
    pub fn uses_network(self) -> bool {
        !matches!(self, CouplingMode::DirectCalibration)
    }

    pub fn replaces_flux(self) -> bool {
        matches!(
            self,
            CouplingMode::ModuleReplacement | CouplingMode::ConstitutiveLearning
        )
    }
}

impl fmt::Display for CouplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CouplingMode::ParameterLearning => "parameter_learning",
            CouplingMode::ModuleReplacement => "module_replacement",
            CouplingMode::ConstitutiveLearning => "constitutive_learning",
            CouplingMode::DirectCalibration => "direct_calibration",
        })
    }
}

impl FromStr for CouplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parameter_learning" => Ok(CouplingMode::ParameterLearning),
            "module_replacement" => Ok(CouplingMode::ModuleReplacement),
            "constitutive_learning" => Ok(CouplingMode::ConstitutiveLearning),
            "direct_calibration" => Ok(CouplingMode::DirectCalibration),
            other => Err(Error::Config(format!("unknown coupling mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplacedFlux {
    RechargeFraction,
    Percolation,
}

impl FromStr for ReplacedFlux {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recharge_fraction" => Ok(ReplacedFlux::RechargeFraction),
            "percolation" => Ok(ReplacedFlux::Percolation),
            other => Err(Error::Config(format!("unknown replaceable flux `{other}`"))),
        }
    }
}

impl fmt::Display for ReplacedFlux {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReplacedFlux::RechargeFraction => "recharge_fraction",
            ReplacedFlux::Percolation => "percolation",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSpec {
    pub mode: CouplingMode,
    /// Parameters produced by the network (parameter learning) or calibrated
    /// directly; every other parameter is taken from `fixed_params`.
    pub learned_params: Vec<ParamName>,
    pub replaced_flux: ReplacedFlux,
    pub fixed_params: HbvParameters<f64>,
}

impl CouplingSpec {
    pub fn parameter_learning(learned: Vec<ParamName>, fixed: HbvParameters<f64>) -> Result<Self> {
        let spec = Self {
            mode: CouplingMode::ParameterLearning,
            learned_params: learned,
            replaced_flux: ReplacedFlux::RechargeFraction,
            fixed_params: fixed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn direct_calibration() -> Self {
        Self {
            mode: CouplingMode::DirectCalibration,
            learned_params: ParamName::ALL.to_vec(),
            replaced_flux: ReplacedFlux::RechargeFraction,
            fixed_params: HbvParameters::midpoints(),
        }
    }

    pub fn flux_replacement(mode: CouplingMode, flux: ReplacedFlux, fixed: HbvParameters<f64>) -> Result<Self> {
        let spec = Self {
            mode,
            learned_params: Vec::new(),
            replaced_flux: flux,
            fixed_params: fixed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.fixed_params.validate()?;
        let mut seen = [false; PARAM_COUNT];
        for p in &self.learned_params {
            if std::mem::replace(&mut seen[p.index()], true) {
                return Err(Error::Config(format!("{p} listed twice")));
            }
        }
        match self.mode {
            CouplingMode::ParameterLearning => {
                if self.learned_params.is_empty() {
                    return Err(Error::Config("parameter learning needs learned parameters".into()));
                }
                if seen[ParamName::Maxbas.index()] {
                    return Err(Error::Config("MAXBAS cannot be produced by a network".into()));
                }
            }
            CouplingMode::DirectCalibration => {
                if self.learned_params.len() != PARAM_COUNT {
                    return Err(Error::Config("direct calibration calibrates all parameters".into()));
                }
            }
            CouplingMode::ModuleReplacement | CouplingMode::ConstitutiveLearning => {
                if !self.learned_params.is_empty() {
                    return Err(Error::Config("flux replacement keeps all parameters fixed".into()));
                }
            }
        }
        Ok(())
    }

    /// Parameters not produced by the network or calibration.
    pub fn fixed_names(&self) -> Vec<ParamName> {
        ParamName::ALL
            .into_iter()
            .filter(|p| !self.learned_params.contains(p))
            .collect()
    }
}

/// `theta = bound(NN(A))` for the learned parameters, fixed values elsewhere.
pub fn derive_parameters<'t>(
    net: &MlpOnTape<'_, 't>,
    attributes: &BasinAttributes,
    spec: &CouplingSpec,
) -> Result<HbvParameters<Var<'t>>> {
    let tape = net
        .vars()
        .first()
        .map(|v| v.tape())
        .ok_or_else(|| Error::Config("empty network".into()))?;
    let input: Vec<_> = attributes.values.iter().map(|&a| tape.constant(a)).collect();
    let raw = net.forward(&input)?;
    if raw.len() != spec.learned_params.len() {
        return Err(Error::Dimension {
            context: "parameter network output",
            expected: spec.learned_params.len(),
            got: raw.len(),
        });
    }
    let mut params = spec.fixed_params.constants(tape);
    for (&name, &r) in spec.learned_params.iter().zip(&raw) {
        let (lo, hi) = name.bounds();
        params.set(name, bound_value(r, lo, hi));
    }
    Ok(params)
}

/// `sigmoid(NN(SM/FC))`, used in place of `(SM/FC)^BETA`.
pub fn recharge_override<'t>(net: &MlpOnTape<'_, 't>, sm_fraction: Var<'t>) -> Result<Var<'t>> {
    let out = net.forward(&[sm_fraction.affine(2.0, -1.0)])?;
    if out.len() != 1 {
        return Err(Error::Dimension {
            context: "flux network output",
            expected: 1,
            got: out.len(),
        });
    }
    Ok(out[0].sigmoid())
}

/// `bound(raw)` for all thirteen parameters.
pub fn direct_calibrate_params<'t>(raw: &[Var<'t>]) -> Result<HbvParameters<Var<'t>>> {
    if raw.len() != PARAM_COUNT {
        return Err(Error::Dimension {
            context: "raw parameter vector",
            expected: PARAM_COUNT,
            got: raw.len(),
        });
    }
    Ok(HbvParameters::from_array(std::array::from_fn(|i| {
        let (lo, hi) = ParamName::ALL[i].bounds();
        bound_value(raw[i], lo, hi)
    })))
}

/// Samples the flux network's squashed output on `grid`.
pub fn extract_learned_relation(net: &MlpWeights, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    grid.iter()
        .map(|&x| {
            let tape = Tape::new();
            let on = net.constants(&tape);
            let y = recharge_override(&on, tape.constant(x))?;
            Ok((x, y.value()))
        })
        .collect()
}

pub fn relation_csv(pairs: &[(f64, f64)]) -> String {
    let mut out = String::from("input,output\n");
    for (x, y) in pairs {
        out.push_str(&format!("{x},{y}\n"));
    }
    out
}

/// A flux network plugged into HBV's process hooks.
pub struct NeuralProcess<'a, 't> {
    pub net: &'a MlpOnTape<'a, 't>,
    pub flux: ReplacedFlux,
}

impl<'t> ProcessOverrides<'t> for NeuralProcess<'_, 't> {
    fn recharge_fraction(&self, soil_fraction: Var<'t>) -> Result<Option<Var<'t>>> {
        match self.flux {
            ReplacedFlux::RechargeFraction => recharge_override(self.net, soil_fraction).map(Some),
            ReplacedFlux::Percolation => Ok(None),
        }
    }

    fn percolation_fraction(&self, upper_fraction: Var<'t>) -> Result<Option<Var<'t>>> {
        match self.flux {
            ReplacedFlux::Percolation => recharge_override(self.net, upper_fraction).map(Some),
            ReplacedFlux::RechargeFraction => Ok(None),
        }
    }
}

/// Contiguous range of the model's flat trainable vector registered as
/// leaves on one tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeafSpan {
    pub offset: usize,
    pub len: usize,
}

/// Whether a basin run registers trainable leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recording {
    Trainable,
    Frozen,
}

/// A backbone plus its learnable units.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub spec: CouplingSpec,
    pub nn: Option<MlpWeights>,
    /// Raw unbounded parameter vectors per basin id (direct calibration).
    pub direct_params: BTreeMap<u32, [f64; PARAM_COUNT]>,
}

impl HybridModel {
    /// Network modes: `network` must map `attribute_dim` (parameter learning)
    /// or 1 (flux replacement) inputs to the right number of outputs.
    pub fn with_network(spec: CouplingSpec, network: &MlpConfig) -> Result<Self> {
        spec.validate()?;
        if !spec.mode.uses_network() {
            return Err(Error::Config("direct calibration has no network".into()));
        }
        let out = *network.layer_sizes.last().expect("validated config");
        let expected = if spec.mode.replaces_flux() {
            if network.layer_sizes[0] != 1 {
                return Err(Error::Dimension {
                    context: "flux network input",
                    expected: 1,
                    got: network.layer_sizes[0],
                });
            }
            1
        } else {
            spec.learned_params.len()
        };
        if out != expected {
            return Err(Error::Dimension {
                context: "network output",
                expected,
                got: out,
            });
        }
        Ok(Self {
            spec,
            nn: Some(MlpWeights::init(network)),
            direct_params: BTreeMap::new(),
        })
    }

    /// One raw vector per basin, initialized at zero (range midpoints).
    pub fn direct(basin_ids: impl IntoIterator<Item = u32>) -> Self {
        Self {
            spec: CouplingSpec::direct_calibration(),
            nn: None,
            direct_params: basin_ids.into_iter().map(|id| (id, [0.0; PARAM_COUNT])).collect(),
        }
    }

    /// Direct calibration starting from `start` in every basin.
    pub fn direct_from(basin_ids: impl IntoIterator<Item = u32>, start: &HbvParameters<f64>) -> Result<Self> {
        let mut raw = [0.0; PARAM_COUNT];
        for (i, name) in ParamName::ALL.into_iter().enumerate() {
            let (lo, hi) = name.bounds();
            raw[i] = unbound(start.get(name), lo, hi)?;
        }
        let mut model = Self::direct(basin_ids);
        for slot in model.direct_params.values_mut() {
            *slot = raw;
        }
        Ok(model)
    }

    pub fn trainable(&self) -> Vec<f64> {
        match &self.nn {
            Some(nn) => nn.to_flat(),
            None => self.direct_params.values().flatten().copied().collect(),
        }
    }

    pub fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        match &mut self.nn {
            Some(nn) => nn.set_flat(flat),
            None => {
                let expected = self.direct_params.len() * PARAM_COUNT;
                if flat.len() != expected {
                    return Err(Error::Dimension {
                        context: "direct parameter vector",
                        expected,
                        got: flat.len(),
                    });
                }
                for (raw, chunk) in self.direct_params.values_mut().zip(flat.chunks(PARAM_COUNT)) {
                    raw.copy_from_slice(chunk);
                }
                Ok(())
            }
        }
    }

    fn direct_slot(&self, basin_id: u32) -> Result<(usize, &[f64; PARAM_COUNT])> {
        self.direct_params
            .iter()
            .enumerate()
            .find(|(_, (id, _))| **id == basin_id)
            .map(|(k, (_, raw))| (k, raw))
            .ok_or_else(|| Error::Config(format!("basin {basin_id} has no calibrated parameters")))
    }

    /// Physical parameters for one basin (plain values).
    pub fn parameters(&self, basin_id: u32, attributes: &BasinAttributes) -> Result<HbvParameters<f64>> {
        let tape = Tape::new();
        match (&self.nn, self.spec.mode) {
            (Some(nn), CouplingMode::ParameterLearning) => {
                Ok(derive_parameters(&nn.constants(&tape), attributes, &self.spec)?.values())
            }
            (None, CouplingMode::DirectCalibration) => {
                let (_, raw) = self.direct_slot(basin_id)?;
                let vars: Vec<_> = raw.iter().map(|&r| tape.constant(r)).collect();
                Ok(direct_calibrate_params(&vars)?.values())
            }
            _ => Ok(self.spec.fixed_params),
        }
    }

    /// Records one basin's forward simulation on `tape`.
    pub fn run_basin<'t>(
        &'t self,
        tape: &'t Tape,
        basin_id: u32,
        attributes: &BasinAttributes,
        forcings: &[ForcingRecord],
        warmup: usize,
        recording: Recording,
    ) -> Result<(SimulationOutput<Var<'t>>, LeafSpan)> {
        let initial = HbvState::empty();
        let trainable = recording == Recording::Trainable;
        match (&self.nn, self.spec.mode) {
            (Some(nn), mode) => {
                let net = if trainable { nn.leaves(tape)? } else { nn.constants(tape) };
                let span = LeafSpan {
                    offset: 0,
                    len: if trainable { nn.param_count() } else { 0 },
                };
                let out = if mode == CouplingMode::ParameterLearning {
                    let params = derive_parameters(&net, attributes, &self.spec)?;
                    hbv::simulate(&initial, &params, forcings, warmup)?
                } else {
                    let params = self.spec.fixed_params.constants(tape);
                    let hooks = NeuralProcess {
                        net: &net,
                        flux: self.spec.replaced_flux,
                    };
                    hbv::simulate_with(&initial, &params, forcings, warmup, &hooks)?
                };
                Ok((out, span))
            }
            (None, _) => {
                let (slot, raw) = self.direct_slot(basin_id)?;
                let vars: Vec<_> = if trainable {
                    tape.leaves(raw)?
                } else {
                    raw.iter().map(|&r| tape.constant(r)).collect()
                };
                let params = direct_calibrate_params(&vars)?;
                let out = hbv::simulate(&initial, &params, forcings, warmup)?;
                let span = LeafSpan {
                    offset: slot * PARAM_COUNT,
                    len: if trainable { PARAM_COUNT } else { 0 },
                };
                Ok((out, span))
            }
        }
    }

    /// Plain-value simulation for one basin.
    pub fn simulate(
        &self,
        basin_id: u32,
        attributes: &BasinAttributes,
        forcings: &[ForcingRecord],
        warmup: usize,
    ) -> Result<SimulationOutput<f64>> {
        let tape = Tape::with_capacity(forcings.len() * 100);
        let (out, _) = self.run_basin(&tape, basin_id, attributes, forcings, warmup, Recording::Frozen)?;
        Ok(out.values())
    }
}

/// `basin_id,param_name,value` rows.
pub fn parameter_dump_csv(rows: &[(u32, HbvParameters<f64>)]) -> String {
    let mut out = String::from("basin_id,param_name,value\n");
    for (id, p) in rows {
        for name in ParamName::ALL {
            out.push_str(&format!("{id},{name},{}\n", p.get(name)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, sum};
    use crate::nn::Activation;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dpl_spec() -> CouplingSpec {
        CouplingSpec::parameter_learning(
            vec![ParamName::Fc, ParamName::Beta, ParamName::K1],
            HbvParameters::midpoints(),
        )
        .unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(CouplingSpec::parameter_learning(vec![ParamName::Maxbas], HbvParameters::midpoints()).is_err());
        assert!(CouplingSpec::parameter_learning(vec![], HbvParameters::midpoints()).is_err());
        assert!(CouplingSpec::parameter_learning(vec![ParamName::Fc, ParamName::Fc], HbvParameters::midpoints()).is_err());
        let s = dpl_spec();
        assert_eq!(s.fixed_names().len() + s.learned_params.len(), PARAM_COUNT);
        assert!(CouplingSpec::direct_calibration().validate().is_ok());
        assert!("bogus".parse::<CouplingMode>().is_err());
        assert_eq!("module_replacement".parse::<CouplingMode>().unwrap(), CouplingMode::ModuleReplacement);
    }

    #[test]
    fn zero_network_gives_midpoints() {
        let spec = dpl_spec();
        let nn = MlpWeights::zeros(&[4, 16, 16, 3], Activation::Tanh);
        let tape = Tape::new();
        let on = nn.constants(&tape);
        let p = derive_parameters(&on, &BasinAttributes::new(vec![0.2, 0.4, 0.6, 0.8]).unwrap(), &spec).unwrap();
        for name in ParamName::ALL {
            let (lo, hi) = name.bounds();
            assert_relative_eq!(p.get(name).value(), 0.5 * (lo + hi), max_relative = 1e-11);
        }
    }

    #[test]
    fn hand_set_single_layer() {
        // FC = 50 + 950 * sigmoid(1.5 * a - 0.25) at a = 0.6.
        let spec = CouplingSpec::parameter_learning(vec![ParamName::Fc], HbvParameters::midpoints()).unwrap();
        let mut nn = MlpWeights::zeros(&[1, 1], Activation::Tanh);
        nn.layers[0].weights[0] = 1.5;
        nn.layers[0].bias[0] = -0.25;
        let tape = Tape::new();
        let p = derive_parameters(&nn.constants(&tape), &BasinAttributes::new(vec![0.6]).unwrap(), &spec).unwrap();
        let z: f64 = 1.5 * 0.6 - 0.25;
        let expected = 50.0 + 950.0 / (1.0 + (-z).exp());
        assert_relative_eq!(p.fc.value(), expected, max_relative = 1e-11);
        assert_relative_eq!(expected, 50.0 + 950.0 * 0.6570104626734988, max_relative = 1e-14);
    }

    #[test]
    fn dimension_mismatch() {
        let spec = dpl_spec();
        let nn = MlpWeights::zeros(&[4, 2], Activation::Tanh);
        let tape = Tape::new();
        let r = derive_parameters(&nn.constants(&tape), &BasinAttributes::new(vec![0.0; 4]).unwrap(), &spec);
        assert!(matches!(r, Err(Error::Dimension { .. })));
        let cfg = MlpConfig::new(vec![4, 8, 2], Activation::Tanh, 0).unwrap();
        assert!(HybridModel::with_network(spec, &cfg).is_err());
    }

    #[test]
    fn recharge_network_examples() {
        let nn = MlpWeights::zeros(&[1, 8, 1], Activation::Tanh);
        let grid = [0.0, 0.25, 1.0];
        let rel = extract_learned_relation(&nn, &grid).unwrap();
        assert_eq!(rel, vec![(0.0, 0.5), (0.25, 0.5), (1.0, 0.5)]);
        let two = extract_learned_relation(&nn, &[0.9, 0.1]).unwrap();
        assert_eq!(two.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0.9, 0.1]);
        assert_eq!(relation_csv(&two), "input,output\n0.9,0.5\n0.1,0.5\n");
    }

    #[test]
    fn direct_params_examples() {
        let tape = Tape::new();
        let zeros: Vec<_> = (0..PARAM_COUNT).map(|_| tape.constant(0.0)).collect();
        let p = direct_calibrate_params(&zeros).unwrap().values();
        let mid = HbvParameters::midpoints();
        for name in ParamName::ALL {
            assert_relative_eq!(p.get(name), mid.get(name), max_relative = 1e-11, epsilon = 1e-14);
        }
        let huge: Vec<_> = (0..PARAM_COUNT).map(|_| tape.constant(50.0)).collect();
        let p = direct_calibrate_params(&huge).unwrap().values();
        for name in ParamName::ALL {
            let (_, hi) = name.bounds();
            assert!(p.get(name) < hi && hi - p.get(name) < 1e-8 * hi.max(1.0));
        }
        assert!(direct_calibrate_params(&zeros[..12]).is_err());
    }

    fn forcings(days: usize) -> Vec<ForcingRecord> {
        (0..days)
            .map(|d| {
                let phase = d as f64 * std::f64::consts::TAU / 365.0;
                ForcingRecord {
                    p: if d % 3 == 0 { 8.0 + 4.0 * phase.sin() } else { 0.0 },
                    t: 8.0 + 10.0 * phase.sin(),
                    pet: 2.0 + 1.5 * phase.sin(),
                }
            })
            .collect()
    }

    #[test]
    fn direct_gradient_passes_grad_check() {
        let f = forcings(120);
        let raw = [0.3, -0.2, 0.1, 0.4, -0.5, 0.2, 0.1, -0.3, 0.2, 0.0, -0.1, 0.3, 0.25];
        let r = grad_check(
            |_t, x| {
                let p = direct_calibrate_params(x)?;
                let out = hbv::simulate(&HbvState::empty(), &p, &f, 0)?;
                Ok::<_, Error>(sum(out.discharge.iter().map(|q| q.square())).unwrap())
            },
            &raw,
            1e-6,
        )
        .unwrap();
        assert!(r.max_relative_error() < 1e-5, "{}", r.to_csv());
        assert!(r.flagged() < 3);
    }

    #[test]
    fn parameter_network_gradient_passes_grad_check() {
        let spec = dpl_spec();
        let cfg = MlpConfig::new(vec![4, 5, 3], Activation::Tanh, 9).unwrap();
        let model = HybridModel::with_network(spec.clone(), &cfg).unwrap();
        let nn = model.nn.clone().unwrap();
        let attrs = BasinAttributes::new(vec![0.3, 0.7, 0.1, 0.5]).unwrap();
        let f = forcings(90);
        let r = grad_check(
            |_t, w| {
                let on = MlpOnTape::from_vars(&nn, w.to_vec())?;
                let p = derive_parameters(&on, &attrs, &spec)?;
                let out = hbv::simulate(&HbvState::empty(), &p, &f, 0)?;
                Ok::<_, Error>(sum(out.discharge.iter().copied()).unwrap())
            },
            &nn.to_flat(),
            1e-6,
        )
        .unwrap();
        assert!(r.max_relative_error() < 1e-5, "{}", r.to_csv());
    }

    /// A power law behind the override hook must reproduce the built-in path.
    struct PinnedPowerLaw(f64);

    impl<'t> ProcessOverrides<'t> for PinnedPowerLaw {
        fn recharge_fraction(&self, s: Var<'t>) -> Result<Option<Var<'t>>> {
            Ok(Some(s.pow(s.tape().constant(self.0))?))
        }
    }

    #[test]
    fn pinned_override_matches_pure_hbv() {
        let f = forcings(400);
        let params = HbvParameters { beta: 2.0, ..HbvParameters::midpoints() };
        let pure = hbv::simulate_values(&HbvState::empty(), &params, &f, 0).unwrap();
        let tape = Tape::new();
        let hooked = hbv::simulate_with(&HbvState::empty(), &params.constants(&tape), &f, 0, &PinnedPowerLaw(2.0))
            .unwrap()
            .values();
        for (a, b) in pure.discharge.iter().zip(&hooked.discharge) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(pure.fluxes.len(), hooked.fluxes.len());
    }

    #[test]
    fn all_modes_emit_full_diagnostics() {
        let f = forcings(60);
        let attrs = BasinAttributes::new(vec![0.5; 4]).unwrap();
        let flux_cfg = MlpConfig::new(vec![1, 4, 1], Activation::Tanh, 1).unwrap();
        let models = vec![
            HybridModel::with_network(dpl_spec(), &MlpConfig::new(vec![4, 4, 3], Activation::Tanh, 1).unwrap()).unwrap(),
            HybridModel::with_network(
                CouplingSpec::flux_replacement(CouplingMode::ModuleReplacement, ReplacedFlux::RechargeFraction, HbvParameters::midpoints()).unwrap(),
                &flux_cfg,
            )
            .unwrap(),
            HybridModel::with_network(
                CouplingSpec::flux_replacement(CouplingMode::ConstitutiveLearning, ReplacedFlux::Percolation, HbvParameters::midpoints()).unwrap(),
                &flux_cfg,
            )
            .unwrap(),
            HybridModel::direct([7]),
        ];
        for m in models {
            let out = m.simulate(7, &attrs, &f, 0).unwrap();
            assert_eq!(out.fluxes.len(), f.len());
            assert!(out.fluxes.iter().any(|x| x.et > 0.0));
        }
    }

    #[test]
    fn trainable_round_trip() {
        let mut m = HybridModel::direct([3, 1, 2]);
        let flat: Vec<f64> = (0..3 * PARAM_COUNT).map(|i| i as f64 * 0.01).collect();
        m.set_trainable(&flat).unwrap();
        assert_eq!(m.trainable(), flat);
        assert!(m.set_trainable(&flat[1..]).is_err());
        assert!(m.parameters(9, &BasinAttributes::new(vec![]).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn derived_parameters_in_bounds(seed in 0u64..500, a in proptest::collection::vec(0.0f64..=1.0, 4)) {
            let learned: Vec<_> = ParamName::ALL.into_iter().filter(|p| *p != ParamName::Maxbas).collect();
            let spec = CouplingSpec::parameter_learning(learned.clone(), HbvParameters::midpoints()).unwrap();
            let cfg = MlpConfig::new(vec![4, 16, 16, learned.len()], Activation::Tanh, seed).unwrap();
            let mut model = HybridModel::with_network(spec, &cfg).unwrap();
            // Inflate the weights to push the outputs toward saturation.
            let w: Vec<f64> = model.trainable().iter().map(|x| x * 25.0).collect();
            model.set_trainable(&w).unwrap();
            let attrs = BasinAttributes::new(a).unwrap();
            let p = model.parameters(0, &attrs).unwrap();
            prop_assert!(p.validate().is_ok());
            for name in &learned {
                let (lo, hi) = name.bounds();
                prop_assert!(p.get(*name) > lo && p.get(*name) < hi);
            }
            // Same attributes, same parameters.
            prop_assert_eq!(p, model.parameters(1, &attrs).unwrap());
        }

        #[test]
        fn recharge_override_in_unit_interval(seed in 0u64..500, s in 0.0f64..=1.0) {
            let nn = MlpWeights::init(&MlpConfig::new(vec![1, 8, 1], Activation::Tanh, seed).unwrap());
            let (_, y) = extract_learned_relation(&nn, &[s]).unwrap()[0];
            prop_assert!(y > 0.0 && y < 1.0);
        }
    }
}
