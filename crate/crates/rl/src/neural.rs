//! Dense multilayer perceptrons with reverse-mode gradients and Adam.
//!
//! Parameters live in one flat vector so optimisers, soft updates and
//! federated averaging work elementwise without knowing the layout.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("architecture mismatch")]
    Architecture,
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Layer widths from input to output, and one activation per layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl Architecture {
    pub fn new(input: usize, hidden: &[usize], output: usize, hidden_act: Activation, output_act: Activation) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut activations = vec![hidden_act; hidden.len()];
        activations.push(output_act);
        Architecture { sizes, activations }
    }

    pub fn input(&self) -> usize {
        self.sizes[0]
    }

    pub fn output(&self) -> usize {
        *self.sizes.last().expect("at least one layer")
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Layer inputs, starting with the network input; the last entry is the output.
    values: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("trace has an output")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    arch: Architecture,
    params: Vec<f64>,
}

impl Mlp {
    /// Uniform fan-in initialisation in `±1/sqrt(fan_in)`; biases zero.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(arch.param_count());
        for w in arch.sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Mlp { arch, params }
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self, NeuralError> {
        if params.len() != arch.param_count() {
            return Err(NeuralError::Shape {
                expected: arch.param_count(),
                got: params.len(),
            });
        }
        Ok(Mlp { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Offsets of the weight matrix and bias of `layer`.
    fn offsets(&self, layer: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.arch.sizes.windows(2).take(layer) {
            off += w[0] * w[1] + w[1];
        }
        let (i, o) = (self.arch.sizes[layer], self.arch.sizes[layer + 1]);
        (off, off + i * o)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        Ok(self.forward_trace(x)?.values.pop().expect("output"))
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace, NeuralError> {
        if x.len() != self.arch.input() {
            return Err(NeuralError::Shape {
                expected: self.arch.input(),
                got: x.len(),
            });
        }
        let mut values = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.arch.activations.len());
        for (l, &act) in self.arch.activations.iter().enumerate() {
            let (wo, bo) = self.offsets(l);
            let (ni, no) = (self.arch.sizes[l], self.arch.sizes[l + 1]);
            let input = values.last().expect("layer input");
            let z: Vec<f64> = (0..no)
                .map(|o| {
                    let row = &self.params[wo + o * ni..wo + (o + 1) * ni];
                    self.params[bo + o] + row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>()
                })
                .collect();
            values.push(z.iter().map(|&v| act.apply(v)).collect());
            pre.push(z);
        }
        Ok(Trace { values, pre })
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂output`, and returns
    /// `∂L/∂input`.
    pub fn backward(&self, trace: &Trace, grad_output: &[f64], grads: &mut [f64]) -> Result<Vec<f64>, NeuralError> {
        if grad_output.len() != self.arch.output() {
            return Err(NeuralError::Shape {
                expected: self.arch.output(),
                got: grad_output.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(NeuralError::Shape {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let mut delta = grad_output.to_vec();
        for l in (0..self.arch.activations.len()).rev() {
            let act = self.arch.activations[l];
            let (wo, bo) = self.offsets(l);
            let (ni, no) = (self.arch.sizes[l], self.arch.sizes[l + 1]);
            let out = &trace.values[l + 1];
            let z = &trace.pre[l];
            let input = &trace.values[l];
            let dz: Vec<f64> = (0..no).map(|o| delta[o] * act.derivative(z[o], out[o])).collect();
            let mut next = vec![0.0; ni];
            for o in 0..no {
                if dz[o] == 0.0 {
                    continue;
                }
                grads[bo + o] += dz[o];
                let row = wo + o * ni;
                for i in 0..ni {
                    grads[row + i] += dz[o] * input[i];
                    next[i] += dz[o] * self.params[row + i];
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Text checkpoint with an architecture header; floats use the shortest
    /// representation that parses back to the same bits.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("mlp v1\n");
        let sizes: Vec<String> = self.arch.sizes.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "sizes {}", sizes.join(" "));
        let acts: Vec<&str> = self.arch.activations.iter().map(|a| a.name()).collect();
        let _ = writeln!(out, "activations {}", acts.join(" "));
        let _ = writeln!(out, "params {}", self.params.len());
        for p in &self.params {
            let _ = writeln!(out, "{p:?}");
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, NeuralError> {
        let mut lines = text.lines().enumerate();
        let mut next = |expect: &str| -> Result<(usize, Vec<String>), NeuralError> {
            let (i, l) = lines.next().ok_or(NeuralError::Checkpoint {
                line: 0,
                message: format!("missing `{expect}`"),
            })?;
            Ok((i + 1, l.split_whitespace().map(str::to_string).collect()))
        };
        let bad = |line, message: &str| NeuralError::Checkpoint {
            line,
            message: message.to_string(),
        };
        let (l, head) = next("mlp v1")?;
        if head != ["mlp", "v1"] {
            return Err(bad(l, "expected `mlp v1` header"));
        }
        let (l, sizes) = next("sizes")?;
        if sizes.first().map(String::as_str) != Some("sizes") || sizes.len() < 3 {
            return Err(bad(l, "expected `sizes <n0> <n1> ...`"));
        }
        let sizes: Vec<usize> = sizes[1..]
            .iter()
            .map(|s| s.parse().map_err(|_| bad(l, "bad layer size")))
            .collect::<Result<_, _>>()?;
        let (l, acts) = next("activations")?;
        if acts.first().map(String::as_str) != Some("activations") || acts.len() != sizes.len() {
            return Err(bad(l, "expected one activation per layer"));
        }
        let activations: Vec<Activation> = acts[1..]
            .iter()
            .map(|s| Activation::parse(s).ok_or_else(|| bad(l, "unknown activation")))
            .collect::<Result<_, _>>()?;
        let arch = Architecture { sizes, activations };
        let (l, count) = next("params")?;
        let n: usize = count
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(l, "expected `params <count>`"))?;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let (l, v) = next("parameter")?;
            let x: f64 = v
                .first()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(l, "bad parameter"))?;
            params.push(x);
        }
        Mlp::from_params(arch, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NeuralError> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| NeuralError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NeuralError> {
        Mlp::from_checkpoint(&std::fs::read_to_string(path).map_err(|e| NeuralError::Io(e.to_string()))?)
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Descends along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NeuralError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NeuralError::Shape {
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// `target ← ζ·target + (1−ζ)·online`.
pub fn soft_update(target: &mut Mlp, online: &Mlp, zeta: f64) -> Result<(), NeuralError> {
    if target.arch != online.arch {
        return Err(NeuralError::Architecture);
    }
    for (t, o) in target.params.iter_mut().zip(&online.params) {
        *t = zeta * *t + (1.0 - zeta) * o;
    }
    Ok(())
}
