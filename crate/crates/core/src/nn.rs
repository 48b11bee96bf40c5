//! Multilayer perceptrons evaluated on the tape.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Relu => x.relu(),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    /// Input width first, output width last.
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub seed: u64,
}

impl MlpConfig {
    pub fn new(layer_sizes: Vec<usize>, hidden_activation: Activation, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config("an MLP needs at least two layer sizes".into()));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(Self {
            layer_sizes,
            hidden_activation,
            seed,
        })
    }
}

/// One affine layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.inputs + col]
    }

    pub fn set_weight(&mut self, row: usize, col: usize, value: f64) {
        self.weights[row * self.inputs + col] = value;
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub layers: Vec<DenseLayer>,
    pub hidden_activation: Activation,
}

impl MlpWeights {
    /// Glorot-uniform weights, zero biases, deterministic in the seed.
    pub fn init(config: &MlpConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = config
            .layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut layer = DenseLayer::zeros(fan_in, fan_out);
                for x in layer.weights.iter_mut() {
                    *x = rng.random_range(-s..=s);
                }
                layer
            })
            .collect();
        Self {
            layers,
            hidden_activation: config.hidden_activation,
        }
    }

    pub fn zeros(layer_sizes: &[usize], hidden_activation: Activation) -> Self {
        Self {
            layers: layer_sizes
                .windows(2)
                .map(|w| DenseLayer::zeros(w[0], w[1]))
                .collect(),
            hidden_activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.outputs));
        sizes
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Flat view: per layer, weights row-major then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            flat.extend_from_slice(&l.weights);
            flat.extend_from_slice(&l.bias);
        }
        flat
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                context: "flat weight vector",
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// Registers every weight as a tape leaf, in flat order.
    pub fn leaves<'a, 't>(&'a self, tape: &'t Tape) -> Result<MlpOnTape<'a, 't>> {
        let vars = tape.leaves(&self.to_flat())?;
        Ok(MlpOnTape { shape: self, vars })
    }

    /// Records the weights as constants (no gradient requested).
    pub fn constants<'a, 't>(&'a self, tape: &'t Tape) -> MlpOnTape<'a, 't> {
        let vars = self.to_flat().into_iter().map(|w| tape.constant(w)).collect();
        MlpOnTape { shape: self, vars }
    }

    /// Plain evaluation, outside any gradient computation.
    pub fn evaluate(&self, input: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let net = self.constants(&tape);
        let x: Vec<_> = input.iter().map(|&v| tape.constant(v)).collect();
        Ok(net.forward(&x)?.iter().map(Var::value).collect())
    }

    /// Writes the `layer,row,col,value` snapshot. Column `inputs` of each
    /// layer holds the bias of that row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,row,col,value\n");
        for (k, l) in self.layers.iter().enumerate() {
            for r in 0..l.outputs {
                for c in 0..l.inputs {
                    out.push_str(&format!("{k},{r},{c},{}\n", l.weight(r, c)));
                }
                out.push_str(&format!("{k},{r},{},{}\n", l.inputs, l.bias[r]));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, hidden_activation: Activation) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path, hidden_activation)
    }

    pub fn from_csv(text: &str, path: &Path, hidden_activation: Activation) -> Result<Self> {
        let data_err = |line: u64, message: String| Error::Data {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| data_err(1, e.to_string()))?;
        if headers != vec!["layer", "row", "col", "value"] {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                message: format!("expected header `layer,row,col,value`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut entries: Vec<(usize, usize, usize, f64)> = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| data_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            let field = |i: usize| rec.get(i).unwrap_or("").trim();
            let idx = |i: usize| {
                field(i)
                    .parse::<usize>()
                    .map_err(|_| data_err(line, format!("bad index `{}`", field(i))))
            };
            let value: f64 = field(3)
                .parse()
                .map_err(|_| data_err(line, format!("bad value `{}`", field(3))))?;
            if !value.is_finite() {
                return Err(data_err(line, "non-finite weight".into()));
            }
            entries.push((idx(0)?, idx(1)?, idx(2)?, value));
        }
        let n_layers = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
        if n_layers == 0 {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                message: "no weights".into(),
            });
        }
        let mut layers = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let mine: Vec<_> = entries.iter().filter(|e| e.0 == k).collect();
            let outputs = mine.iter().map(|e| e.1 + 1).max().unwrap_or(0);
            let inputs = mine.iter().map(|e| e.2).max().unwrap_or(0);
            if outputs == 0 || inputs == 0 || mine.len() != outputs * (inputs + 1) {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    message: format!("layer {k} is incomplete"),
                });
            }
            let mut layer = DenseLayer::zeros(inputs, outputs);
            let mut seen = vec![false; outputs * (inputs + 1)];
            for &&(_, r, c, v) in &mine {
                let slot = r * (inputs + 1) + c;
                if seen[slot] {
                    return Err(Error::Schema {
                        path: path.to_path_buf(),
                        message: format!("duplicate entry layer {k} row {r} col {c}"),
                    });
                }
                seen[slot] = true;
                if c == inputs {
                    layer.bias[r] = v;
                } else {
                    layer.set_weight(r, c, v);
                }
            }
            layers.push(layer);
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    message: "consecutive layer shapes disagree".into(),
                });
            }
        }
        Ok(Self {
            layers,
            hidden_activation,
        })
    }
}

/// Network weights recorded on a tape.
pub struct MlpOnTape<'a, 't> {
    shape: &'a MlpWeights,
    vars: Vec<Var<'t>>,
}

impl<'a, 't> MlpOnTape<'a, 't> {
    /// Uses existing tape variables (in flat order) as the weights of `shape`.
    pub fn from_vars(shape: &'a MlpWeights, vars: Vec<Var<'t>>) -> Result<Self> {
        if vars.len() != shape.param_count() {
            return Err(Error::Dimension {
                context: "network variables",
                expected: shape.param_count(),
                got: vars.len(),
            });
        }
        Ok(Self { shape, vars })
    }

    /// Tape variables in flat order.
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Affine + activation per hidden layer; the last layer is affine only.
    pub fn forward(&self, input: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        if input.len() != self.shape.input_dim() {
            return Err(Error::Dimension {
                context: "MLP input",
                expected: self.shape.input_dim(),
                got: input.len(),
            });
        }
        let last = self.shape.layers.len() - 1;
        let mut offset = 0;
        let mut x = input.to_vec();
        for (k, layer) in self.shape.layers.iter().enumerate() {
            let w = &self.vars[offset..offset + layer.weights.len()];
            let b = &self.vars[offset + layer.weights.len()..offset + layer.param_count()];
            offset += layer.param_count();
            x = (0..layer.outputs)
                .map(|r| {
                    let row = &w[r * layer.inputs..(r + 1) * layer.inputs];
                    let z = row.iter().zip(&x).fold(b[r], |acc, (wi, xi)| acc + *wi * *xi);
                    if k < last {
                        self.shape.hidden_activation.apply(z)
                    } else {
                        z
                    }
                })
                .collect();
        }
        Ok(x)
    }
}

/// Keeps the bounded output strictly inside `(lo, hi)` even where the
/// sigmoid saturates to 0 or 1 in double precision.
const BOUND_MARGIN: f64 = 1e-12;

/// `lo + (hi - lo) * sigmoid(raw)`, squeezed by a 1e-12 relative margin.
pub fn bound_value<'t>(raw: Var<'t>, lo: f64, hi: f64) -> Var<'t> {
    let span = hi - lo;
    raw.sigmoid()
        .affine(span * (1.0 - 2.0 * BOUND_MARGIN), lo + span * BOUND_MARGIN)
}

/// Raw input that [`bound_value`] maps to `value`.
pub fn unbound(value: f64, lo: f64, hi: f64) -> Result<f64> {
    let span = hi - lo;
    let s = (value - lo - span * BOUND_MARGIN) / (span * (1.0 - 2.0 * BOUND_MARGIN));
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::Config(format!("{value} is not strictly inside ({lo}, {hi})")));
    }
    Ok((s / (1.0 - s)).ln())
}

/// Elementwise [`bound_value`].
pub fn bound<'t>(raw: &[Var<'t>], lo: &[f64], hi: &[f64]) -> Result<Vec<Var<'t>>> {
    if lo.len() != raw.len() || hi.len() != raw.len() {
        return Err(Error::Dimension {
            context: "bound",
            expected: raw.len(),
            got: lo.len().min(hi.len()),
        });
    }
    if let Some(i) = (0..lo.len()).find(|&i| !(lo[i] < hi[i])) {
        return Err(Error::Config(format!("bound {i}: lo {} not below hi {}", lo[i], hi[i])));
    }
    Ok(raw
        .iter()
        .zip(lo.iter().zip(hi))
        .map(|(&r, (&l, &h))| bound_value(r, l, h))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cfg(sizes: &[usize], seed: u64) -> MlpConfig {
        MlpConfig::new(sizes.to_vec(), Activation::Tanh, seed).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(MlpConfig::new(vec![3], Activation::Tanh, 0).is_err());
        assert!(MlpConfig::new(vec![3, 0, 1], Activation::Tanh, 0).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = MlpWeights::init(&cfg(&[2, 3, 1], 7));
        let b = MlpWeights::init(&cfg(&[2, 3, 1], 7));
        assert_eq!(a, b);
        assert_ne!(a, MlpWeights::init(&cfg(&[2, 3, 1], 8)));
        for l in &a.layers {
            let s = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            assert!(l.bias.iter().all(|&x| x == 0.0));
            assert!(l.weights.iter().all(|w| w.abs() <= s));
        }
        assert_eq!(a.param_count(), 2 * 3 + 3 + 3 + 1);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = MlpWeights::zeros(&[4, 16, 16, 3], Activation::Tanh);
        assert_eq!(net.evaluate(&[0.3, 0.1, 0.9, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_affine_layer() {
        let mut net = MlpWeights::zeros(&[1, 1], Activation::Tanh);
        net.layers[0].weights[0] = 2.0;
        net.layers[0].bias[0] = 1.0;
        assert_eq!(net.evaluate(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn two_layer_hand_evaluation() {
        // [1,2,1]: h = tanh(w1 x + b1), y = v . h + c
        let mut net = MlpWeights::zeros(&[1, 2, 1], Activation::Tanh);
        net.layers[0].weights = vec![0.5, -1.5];
        net.layers[0].bias = vec![0.1, 0.2];
        net.layers[1].weights = vec![2.0, 3.0];
        net.layers[1].bias = vec![-0.5];
        let x: f64 = 0.8;
        let h1 = (0.5 * x + 0.1).tanh();
        let h2 = (-1.5 * x + 0.2).tanh();
        let expected = 2.0 * h1 + 3.0 * h2 - 0.5;
        assert_relative_eq!(net.evaluate(&[x]).unwrap()[0], expected, max_relative = 1e-15);
        // tanh(0.5) and tanh(-1.0) to double precision.
        assert_relative_eq!(expected, 2.0 * 0.46211715726000974 + 3.0 * -0.7615941559557649 - 0.5, max_relative = 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let net = MlpWeights::zeros(&[2, 1], Activation::Tanh);
        assert!(matches!(net.evaluate(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn bound_examples() {
        let t = Tape::new();
        let z = t.constant(0.0);
        assert_relative_eq!(bound_value(z, 50.0, 1000.0).value(), 525.0, max_relative = 1e-12);
        let big = t.constant(800.0);
        let v = bound_value(big, 50.0, 1000.0).value();
        assert!(v < 1000.0 && 1000.0 - v < 1e-8);
        let one = t.constant(1.0);
        assert_relative_eq!(bound_value(one, 0.0, 1.0).value(), 0.7310585786300049, max_relative = 1e-11);
        assert!(bound(&[z], &[1.0], &[1.0]).is_err());
        assert!(bound(&[z], &[0.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn snapshot_round_trip_is_exact() {
        let net = MlpWeights::init(&cfg(&[4, 5, 3], 11));
        let mut net = net;
        net.layers[1].bias[2] = 1.0 / 3.0;
        let text = net.to_csv();
        assert!(text.starts_with("layer,row,col,value\n"));
        let back = MlpWeights::from_csv(&text, Path::new("w.csv"), Activation::Tanh).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn snapshot_rejects_incomplete_layers() {
        let text = "layer,row,col,value\n0,0,0,1.0\n";
        assert!(MlpWeights::from_csv(text, Path::new("w.csv"), Activation::Tanh).is_err());
        let text = "layer,rows,col,value\n";
        assert!(matches!(
            MlpWeights::from_csv(text, Path::new("w.csv"), Activation::Tanh),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn gradients_through_forward_and_bound() {
        let net = MlpWeights::init(&cfg(&[3, 4, 2], 3));
        let input = [0.2, 0.7, 0.4];
        let r = grad_check(
            |t, w| {
                let on = MlpOnTape::from_vars(&net, w.to_vec())?;
                let x: Vec<_> = input.iter().map(|&v| t.constant(v)).collect();
                let out = on.forward(&x)?;
                let b = bound(&out, &[0.0, 50.0], &[1.0, 1000.0])?;
                Ok::<_, Error>(b[0].square() + b[1] * 1e-3)
            },
            &net.to_flat(),
            1e-6,
        )
        .unwrap();
        assert_eq!(r.flagged(), 0);
        assert!(r.max_relative_error() < 1e-6, "{}", r.max_relative_error());
    }

    proptest! {
        #[test]
        fn bound_strictly_inside(raw in proptest::num::f64::NORMAL, offset in -10.0f64..10.0, width in 1e-3f64..1e3) {
            // The margin resolves intervals whose magnitude is within ~1e3 of their width.
            let t = Tape::new();
            let lo = offset * width;
            let hi = lo + width;
            let v = bound_value(t.constant(raw), lo, hi).value();
            prop_assert!(v > lo && v < hi, "{} not in ({}, {})", v, lo, hi);
        }

        #[test]
        fn forward_is_pure(seed in 0u64..1000, x in proptest::collection::vec(-1.0f64..1.0, 3)) {
            let net = MlpWeights::init(&cfg(&[3, 6, 2], seed));
            prop_assert_eq!(net.evaluate(&x).unwrap(), net.evaluate(&x).unwrap());
        }
    }
}
