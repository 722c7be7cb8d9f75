//! Dense feed-forward network with explicit forward and reverse passes.
//!
//! Batches are column-major: a batch of `B` inputs is an `in × B` matrix.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::lti::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Linear => 1.0,
        }
    }
}

/// One affine layer followed by an elementwise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub weights: Matrix,
    pub biases: Vector,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn affine(&self, x: &Matrix) -> Matrix {
        let mut z = &self.weights * x;
        for mut col in z.column_iter_mut() {
            col += &self.biases;
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    seed: u64,
    version: u64,
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    output: Matrix,
    version: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn batch_size(&self) -> usize {
        self.output.ncols()
    }
}

/// Parameter gradients with the same layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: net.layers.iter().map(|l| Vector::zeros(l.out_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    /// Flattened as layer by layer, row-major weights then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for r in 0..w.nrows() {
                out.extend(w.row(r).iter());
            }
            out.extend(b.iter());
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_finite(&self) -> Result<()> {
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of layer {i} weights")));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of layer {i} biases")));
            }
        }
        Ok(())
    }
}

impl Mlp {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new(sizes: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Architecture("need at least input and output sizes".into()));
        }
        check_dim("activation count", sizes.len() - 1, activations.len())?;
        if sizes.contains(&0) {
            return Err(Error::Architecture("layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..=limit));
                Dense {
                    weights,
                    biases: Vector::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Ok(Self {
            layers,
            seed,
            version: 0,
        })
    }

    pub fn from_layers(layers: Vec<Dense>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Architecture("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            check_dim("layer bias", l.out_dim(), l.biases.len())?;
            if i > 0 {
                check_dim("layer chaining", layers[i - 1].out_dim(), l.in_dim())?;
            }
            if l.weights.iter().chain(l.biases.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameters of layer {i}")));
            }
        }
        Ok(Self {
            layers,
            seed,
            version: 0,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to the layers; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version += 1;
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.out_dim()));
        s
    }

    pub fn same_architecture(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.in_dim() == b.in_dim()
                    && a.out_dim() == b.out_dim()
                    && a.activation == b.activation
            })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Parameters in the [`Gradients::to_flat`] layout.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            for r in 0..l.weights.nrows() {
                out.extend(l.weights.row(r).iter());
            }
            out.extend(l.biases.iter());
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        check_dim("parameter vector", self.parameter_count(), params.len())?;
        let mut it = params.iter().copied();
        for l in self.layers_mut() {
            for r in 0..l.weights.nrows() {
                for c in 0..l.weights.ncols() {
                    l.weights[(r, c)] = it.next().expect("length checked");
                }
            }
            for b in l.biases.iter_mut() {
                *b = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<ForwardCache> {
        check_dim("network input", self.input_dim(), x.nrows())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for l in &self.layers {
            let z = l.affine(&a);
            let out = z.map(|v| l.activation.apply(v));
            inputs.push(a);
            pre.push(z);
            a = out;
        }
        Ok(ForwardCache {
            inputs,
            pre,
            output: a,
            version: self.version,
        })
    }

    pub fn forward(&self, x: &Vector) -> Result<(Vector, ForwardCache)> {
        let cache = self.forward_batch(&Matrix::from_column_slice(x.len(), 1, x.as_slice()))?;
        Ok((cache.output.column(0).into_owned(), cache))
    }

    /// Outputs for a batch without retaining a cache.
    pub fn predict_batch(&self, x: &Matrix) -> Result<Matrix> {
        check_dim("network input", self.input_dim(), x.nrows())?;
        let mut a = x.clone();
        for l in &self.layers {
            let mut z = l.affine(&a);
            z.apply(|v| *v = l.activation.apply(*v));
            a = z;
        }
        Ok(a)
    }

    pub fn predict(&self, x: &Vector) -> Result<Vector> {
        Ok(self
            .predict_batch(&Matrix::from_column_slice(x.len(), 1, x.as_slice()))?
            .column(0)
            .into_owned())
    }

    /// Reverse pass. `d_output` is `out × B`, the loss gradient with respect
    /// to each output column; parameter gradients are summed over the batch.
    pub fn backward(&self, cache: &ForwardCache, d_output: &Matrix) -> Result<Gradients> {
        if cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache(
                "network parameters changed since the forward pass".into(),
            ));
        }
        check_dim("output gradient rows", self.output_dim(), d_output.nrows())?;
        check_dim("output gradient batch", cache.batch_size(), d_output.ncols())?;
        let mut grads = Gradients::zeros_like(self);
        let mut upstream = d_output.clone();
        let mut a_out = cache.output.clone();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let z = &cache.pre[i];
            let mut delta = upstream;
            for ((d, zv), av) in delta.iter_mut().zip(z.iter()).zip(a_out.iter()) {
                *d *= l.activation.derivative(*zv, *av);
            }
            grads.weights[i] = &delta * cache.inputs[i].transpose();
            grads.biases[i] = delta.column_sum();
            upstream = l.weights.transpose() * &delta;
            if i > 0 {
                a_out = cache.inputs[i].clone();
            }
        }
        Ok(grads)
    }

    fn check_grad_shapes(&self, grads: &Gradients) -> Result<()> {
        check_dim("gradient layers", self.layers.len(), grads.weights.len())?;
        for (l, (w, b)) in self.layers.iter().zip(grads.weights.iter().zip(&grads.biases)) {
            check_dim("gradient rows", l.out_dim(), w.nrows())?;
            check_dim("gradient cols", l.in_dim(), w.ncols())?;
            check_dim("gradient bias", l.out_dim(), b.len())?;
        }
        Ok(())
    }

    /// `φ ← φ - lr ∇`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        self.check_grad_shapes(grads)?;
        grads.check_finite()?;
        for (l, (w, b)) in self.layers_mut().iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
            l.weights -= w * lr;
            l.biases -= b * lr;
        }
        Ok(())
    }

    pub fn adam_step(&mut self, grads: &Gradients, state: &mut AdamState, hyper: &AdamConfig) -> Result<()> {
        self.check_grad_shapes(grads)?;
        grads.check_finite()?;
        if state.m.weights.len() != grads.weights.len() {
            *state = AdamState::new(self);
        }
        state.t += 1;
        let t = state.t as i32;
        let c1 = 1.0 - hyper.beta1.powi(t);
        let c2 = 1.0 - hyper.beta2.powi(t);
        let (b1, b2, lr, eps) = (hyper.beta1, hyper.beta2, hyper.lr, hyper.eps);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        let AdamState { m, v, .. } = state;
        for (i, l) in self.layers_mut().iter_mut().enumerate() {
            for (((p, g), mm), vv) in l
                .weights
                .iter_mut()
                .zip(grads.weights[i].iter())
                .zip(m.weights[i].iter_mut())
                .zip(v.weights[i].iter_mut())
            {
                update(p, *g, mm, vv);
            }
            for (((p, g), mm), vv) in l
                .biases
                .iter_mut()
                .zip(grads.biases[i].iter())
                .zip(m.biases[i].iter_mut())
                .zip(v.biases[i].iter_mut())
            {
                update(p, *g, mm, vv);
            }
        }
        Ok(())
    }

    /// Overwrites every parameter with `src`'s (architectures must match).
    pub fn copy_from(&mut self, src: &Mlp) -> Result<()> {
        if !self.same_architecture(src) {
            return Err(Error::Architecture("cannot copy between different architectures".into()));
        }
        for (dst, s) in self.layers_mut().iter_mut().zip(&src.layers) {
            dst.weights.copy_from(&s.weights);
            dst.biases.copy_from(&s.biases);
        }
        Ok(())
    }

    /// Text container: header, seed, per-layer dims and activation, then
    /// row-major weights and biases in shortest round-trip notation.
    pub fn save(&self) -> String {
        let mut out = String::from("quantem-mlp 1\n");
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "layers {}", self.layers.len());
        for l in &self.layers {
            let _ = writeln!(out, "layer {} {} {}", l.in_dim(), l.out_dim(), l.activation.as_str());
            let mut row = Vec::with_capacity(l.weights.len());
            for r in 0..l.weights.nrows() {
                row.extend(l.weights.row(r).iter().map(|v| format!("{v:e}")));
            }
            out.push_str(&row.join(" "));
            out.push('\n');
            let biases: Vec<String> = l.biases.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&biases.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn load(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("unexpected end of model while reading {what}"),
            })
        };
        let (ln, header) = next("header")?;
        if header != "quantem-mlp 1" {
            return Err(Error::Parse {
                line: ln,
                message: format!("unrecognized header `{header}`"),
            });
        }
        let field = |ln: usize, line: &str, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .map(|s| s.trim().to_string())
                .ok_or_else(|| Error::Parse {
                    line: ln,
                    message: format!("expected `{key}`"),
                })
        };
        let num = |ln: usize, s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Parse {
                line: ln,
                message: format!("bad number `{s}`: {e}"),
            })
        };
        let int = |ln: usize, s: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|e| Error::Parse {
                line: ln,
                message: format!("bad integer `{s}`: {e}"),
            })
        };
        let (ln, l) = next("seed")?;
        let seed = int(ln, &field(ln, l, "seed")?)?;
        let (ln, l) = next("layer count")?;
        let count = int(ln, &field(ln, l, "layers")?)? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, l) = next("layer header")?;
            let spec = field(ln, l, "layer")?;
            let parts: Vec<&str> = spec.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Parse {
                    line: ln,
                    message: "expected `layer <in> <out> <activation>`".into(),
                });
            }
            let (din, dout) = (int(ln, parts[0])? as usize, int(ln, parts[1])? as usize);
            let activation = Activation::parse(parts[2]).map_err(|e| Error::Parse {
                line: ln,
                message: e.to_string(),
            })?;
            let (ln, l) = next("weights")?;
            let w: Vec<f64> = l.split_whitespace().map(|s| num(ln, s)).collect::<Result<_>>()?;
            if w.len() != din * dout {
                return Err(Error::Parse {
                    line: ln,
                    message: format!("expected {} weights, found {}", din * dout, w.len()),
                });
            }
            let (ln, l) = next("biases")?;
            let b: Vec<f64> = l.split_whitespace().map(|s| num(ln, s)).collect::<Result<_>>()?;
            if b.len() != dout {
                return Err(Error::Parse {
                    line: ln,
                    message: format!("expected {dout} biases, found {}", b.len()),
                });
            }
            layers.push(Dense {
                weights: Matrix::from_row_slice(dout, din, &w),
                biases: Vector::from_vec(b),
                activation,
            });
        }
        Self::from_layers(layers, seed)
    }
}

/// Bit-identical copy of a network, used for the target-network sync.
pub fn clone_weights(src: &Mlp) -> Mlp {
    src.clone()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Gradients,
    v: Gradients,
    t: u64,
}

impl AdamState {
    pub fn new(net: &Mlp) -> Self {
        Self {
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

/// Either optimizer behind one call.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub optimizer: Optimizer,
    pub adam: AdamConfig,
    state: AdamState,
}

impl Trainer {
    pub fn new(net: &Mlp, optimizer: Optimizer, adam: AdamConfig) -> Self {
        Self {
            optimizer,
            adam,
            state: AdamState::new(net),
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        match self.optimizer {
            Optimizer::Adam => net.adam_step(grads, &mut self.state, &self.adam),
            Optimizer::Sgd => net.sgd_step(grads, self.adam.lr),
        }
    }
}

/// Softmax cross-entropy with max subtraction; gradient is `softmax - onehot`.
pub fn loss_cross_entropy(logits: &Vector, class: usize) -> Result<(f64, Vector)> {
    if class >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.max();
    let exps = logits.map(|z| (z - max).exp());
    let sum = exps.sum();
    let value = sum.ln() - (logits[class] - max);
    let mut grad = exps / sum;
    grad[class] -= 1.0;
    Ok((value, grad))
}

/// `Σ (pred - target)²` with gradient `2 (pred - target)`.
pub fn loss_squared(pred: &Vector, target: &Vector) -> Result<(f64, Vector)> {
    check_dim("squared loss", pred.len(), target.len())?;
    let r = pred - target;
    Ok((r.norm_squared(), r * 2.0))
}

/// Mean cross-entropy over the columns of `logits` with its `out × B`
/// gradient (already divided by `B`).
pub fn cross_entropy_batch(logits: &Matrix, classes: &[usize]) -> Result<(f64, Matrix)> {
    check_dim("batch labels", logits.ncols(), classes.len())?;
    let b = classes.len() as f64;
    let mut grad = Matrix::zeros(logits.nrows(), logits.ncols());
    let mut total = 0.0;
    for (j, &c) in classes.iter().enumerate() {
        let (v, g) = loss_cross_entropy(&logits.column(j).into_owned(), c)?;
        total += v;
        grad.set_column(j, &(g / b));
    }
    Ok((total / b, grad))
}

/// A non-empty batch of same-dimension inputs with per-sample targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch<T> {
    inputs: Matrix,
    targets: Vec<T>,
}

impl<T> TrainBatch<T> {
    pub fn new(inputs: &[Vector], targets: Vec<T>) -> Result<Self> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("batch must be non-empty".into()))?;
        check_dim("batch targets", inputs.len(), targets.len())?;
        for x in inputs {
            check_dim("batch input", first.len(), x.len())?;
        }
        Ok(Self {
            inputs: Matrix::from_columns(inputs),
            targets,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &[T] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}
