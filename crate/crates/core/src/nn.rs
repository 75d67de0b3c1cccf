//! Trainable scoring heads with exact reverse-mode gradients.
//!
//! Each forward pass returns a tape holding the intermediate values its
//! backward pass needs; nothing is cached on the parameters themselves, so
//! a batch can be evaluated concurrently against shared parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden widths of the default score-level heads.
pub const DEFAULT_HIDDEN: [usize; 2] = [384, 160];
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Fully connected layer, weights stored row-major `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform in `±sqrt(1/fan_in)` for weights and biases.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let mut draw = || rng.gen_range(-bound..bound);
        let weights = (0..in_dim * out_dim).map(|_| draw()).collect();
        let bias = (0..out_dim).map(|_| draw()).collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(Error::ShapeMismatch(format!(
                "dense {}x{} has {} weights and {} biases",
                self.out_dim,
                self.in_dim,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite parameter".into()));
        }
        Ok(())
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.in_dim)
                .zip(&self.bias)
                .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()),
        );
    }
}

/// Feed-forward network ending in a single linear output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
    /// One per hidden layer; the output layer is always linear.
    activations: Vec<Activation>,
}

/// Activation record of one [`Mlp::forward`] call.
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// Input of every layer (the network input first).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

/// Gradients shaped like an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }
}

impl Mlp {
    pub fn new(layers: Vec<Dense>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("MLP needs at least one layer".into()));
        }
        if activations.len() + 1 != layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} layers need {} hidden activations, got {}",
                layers.len(),
                layers.len() - 1,
                activations.len()
            )));
        }
        for l in &layers {
            l.check()?;
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::ShapeMismatch(format!(
                    "layer output {} does not feed input {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        if layers.last().map(|l| l.out_dim) != Some(1) {
            return Err(Error::ShapeMismatch("final layer must emit one scalar".into()));
        }
        if layers[0].in_dim == 0 {
            return Err(Error::ShapeMismatch("input dimension must be positive".into()));
        }
        Ok(Self { layers, activations })
    }

    fn dims(input_dim: usize, hidden: &[usize]) -> Vec<(usize, usize)> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], activation: Activation) -> Result<Self> {
        let layers = Self::dims(input_dim, hidden)
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        Self::new(layers, vec![activation; hidden.len()])
    }

    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = Self::dims(input_dim, hidden)
            .into_iter()
            .map(|(i, o)| Dense::random(i, o, rng))
            .collect();
        Self::new(layers, vec![activation; hidden.len()])
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self.layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect(),
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Overwrite the parameters from a flat slice laid out as in
    /// [`Mlp::flatten_into`]; returns the number of values consumed.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<usize> {
        if flat.len() < self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "need {} values, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(at)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input length {} but MLP expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Score without recording a tape.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward_into(&cur, &mut next);
            if let Some(act) = self.activations.get(i) {
                next.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur[0])
    }

    pub fn forward(&self, x: &[f64]) -> Result<(f64, MlpTape)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.activations.len());
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.out_dim);
            layer.forward_into(&cur, &mut z);
            inputs.push(cur);
            match self.activations.get(i) {
                Some(act) => {
                    cur = z.iter().map(|&v| act.apply(v)).collect();
                    pre.push(z);
                }
                None => cur = z,
            }
        }
        Ok((cur[0], MlpTape { inputs, pre }))
    }

    fn check_tape(&self, tape: &MlpTape) -> Result<()> {
        let ok = tape.inputs.len() == self.layers.len()
            && tape.pre.len() == self.activations.len()
            && tape.inputs.iter().zip(&self.layers).all(|(x, l)| x.len() == l.in_dim)
            && tape.pre.iter().zip(&self.layers).all(|(z, l)| z.len() == l.out_dim);
        if ok {
            Ok(())
        } else {
            Err(Error::TapeMismatch("MLP tape was recorded with other shapes".into()))
        }
    }

    /// Accumulate `upstream · ∂score/∂θ` into `grads` and return
    /// `upstream · ∂score/∂x`.
    pub fn backward_into(&self, tape: &MlpTape, upstream: f64, grads: &mut MlpGrads) -> Result<Vec<f64>> {
        self.check_tape(tape)?;
        if grads.layers.len() != self.layers.len() {
            return Err(Error::ShapeMismatch("gradient buffer has wrong layer count".into()));
        }
        let mut delta = vec![upstream];
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            let input = &tape.inputs[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                row.iter_mut().zip(input).for_each(|(gw, x)| *gw += d * x);
            }
            let mut back = vec![0.0; layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                back.iter_mut().zip(row).for_each(|(b, w)| *b += d * w);
            }
            if i > 0 {
                let act = self.activations[i - 1];
                back.iter_mut()
                    .zip(&tape.pre[i - 1])
                    .for_each(|(b, &z)| *b *= act.derivative(z));
            }
            delta = back;
        }
        Ok(delta)
    }

    /// Gradients of `upstream · score` with respect to every parameter and
    /// the input.
    pub fn backward(&self, tape: &MlpTape, upstream: f64) -> Result<(MlpGrads, Vec<f64>)> {
        let mut g = self.zero_grads();
        let dx = self.backward_into(tape, upstream, &mut g)?;
        Ok((g, dx))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_score(e1: &[f64], e2: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::LengthMismatch {
            module: "nn",
            left: e1.len(),
            right: e2.len(),
        });
    }
    let n1 = dot(e1, e1).sqrt();
    let n2 = dot(e2, e2).sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot(e1, e2) / (n1 * n2))
}

/// Per-dimension weights applied to both embeddings before cosine scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedCosine {
    pub w: Vec<f64>,
}

impl WeightedCosine {
    pub fn ones(dim: usize) -> Self {
        Self { w: vec![1.0; dim] }
    }
}

#[derive(Debug, Clone)]
pub struct CosineTape {
    enr: Vec<f64>,
    tst: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    nu: f64,
    nv: f64,
    score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineGrads {
    pub w: Vec<f64>,
    pub e_enr: Vec<f64>,
    pub e_tst: Vec<f64>,
}

pub fn weighted_cosine_score(p: &WeightedCosine, e_enr: &[f64], e_tst: &[f64]) -> Result<(f64, CosineTape)> {
    if e_enr.len() != p.w.len() || e_tst.len() != p.w.len() {
        return Err(Error::ShapeMismatch(format!(
            "weight length {} vs embeddings {} and {}",
            p.w.len(),
            e_enr.len(),
            e_tst.len()
        )));
    }
    let u: Vec<f64> = p.w.iter().zip(e_enr).map(|(w, e)| w * e).collect();
    let v: Vec<f64> = p.w.iter().zip(e_tst).map(|(w, e)| w * e).collect();
    let nu = dot(&u, &u).sqrt();
    let nv = dot(&v, &v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let score = dot(&u, &v) / (nu * nv);
    Ok((
        score,
        CosineTape {
            enr: e_enr.to_vec(),
            tst: e_tst.to_vec(),
            u,
            v,
            nu,
            nv,
            score,
        },
    ))
}

pub fn weighted_cosine_backward(p: &WeightedCosine, tape: &CosineTape, upstream: f64) -> Result<CosineGrads> {
    if tape.u.len() != p.w.len() {
        return Err(Error::TapeMismatch(format!(
            "tape of length {} for weights of length {}",
            tape.u.len(),
            p.w.len()
        )));
    }
    let inv = 1.0 / (tape.nu * tape.nv);
    let cu = tape.score / (tape.nu * tape.nu);
    let cv = tape.score / (tape.nv * tape.nv);
    let n = p.w.len();
    let mut g = CosineGrads {
        w: Vec::with_capacity(n),
        e_enr: Vec::with_capacity(n),
        e_tst: Vec::with_capacity(n),
    };
    for i in 0..n {
        let du = upstream * (tape.v[i] * inv - cu * tape.u[i]);
        let dv = upstream * (tape.u[i] * inv - cv * tape.v[i]);
        g.w.push(du * tape.enr[i] + dv * tape.tst[i]);
        g.e_enr.push(du * p.w[i]);
        g.e_tst.push(dv * p.w[i]);
    }
    Ok(g)
}
