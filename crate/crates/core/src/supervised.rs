//! Supervised learning from MPC solutions: feature extraction, dataset
//! collection, direction-classifier training and classifier-driven rollouts.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::emulation::{DropoutPolicy, Emulation};
use crate::error::{check_dim, Error, Result};
use crate::lti::{Matrix, Vector};
use crate::mpc::{drive, mpc_rollout, MpcConfig, Rollout};
use crate::nn::{cross_entropy_batch, Activation, AdamConfig, Mlp, Optimizer, TrainBatch, Trainer};

/// Which features accompany the tracking error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureSpec {
    /// `[x_ref - x_qs; (x_ref(k+1) - x_ref(k)) / h]`.
    #[default]
    ErrorAndRefDirection,
    /// `[x_ref - x_qs; x_ref]`.
    ErrorAndRefLocation,
    /// `[x_ref - x_qs; reference direction; previous quantized direction]`.
    ErrorAndBothDirections,
}

impl FeatureSpec {
    pub fn dim(self, n: usize) -> usize {
        match self {
            FeatureSpec::ErrorAndBothDirections => 3 * n,
            _ => 2 * n,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSpec::ErrorAndRefDirection => "error_and_ref_direction",
            FeatureSpec::ErrorAndRefLocation => "error_and_ref_location",
            FeatureSpec::ErrorAndBothDirections => "error_and_both_directions",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "error_and_ref_direction" => Ok(FeatureSpec::ErrorAndRefDirection),
            "error_and_ref_location" => Ok(FeatureSpec::ErrorAndRefLocation),
            "error_and_both_directions" => Ok(FeatureSpec::ErrorAndBothDirections),
            other => Err(Error::InvalidArgument(format!("unknown feature mode `{other}`"))),
        }
    }
}

pub fn extract_features(
    x_qs: &Vector,
    x_ref: &Vector,
    x_ref_next: &Vector,
    x_qs_prev: Option<&Vector>,
    spec: FeatureSpec,
    h: f64,
) -> Result<Vector> {
    let n = x_qs.len();
    check_dim("feature reference", n, x_ref.len())?;
    check_dim("feature next reference", n, x_ref_next.len())?;
    let error = x_ref - x_qs;
    let ref_dir = || (x_ref_next - x_ref) / h;
    let parts: Vec<Vector> = match spec {
        FeatureSpec::ErrorAndRefDirection => vec![error, ref_dir()],
        FeatureSpec::ErrorAndRefLocation => vec![error, x_ref.clone()],
        FeatureSpec::ErrorAndBothDirections => {
            let prev = x_qs_prev.ok_or_else(|| {
                Error::InvalidArgument("previous quantized state required for this feature mode".into())
            })?;
            check_dim("feature previous state", n, prev.len())?;
            vec![error, ref_dir(), (x_qs - prev) / h]
        }
    };
    Ok(Vector::from_iterator(
        spec.dim(n),
        parts.iter().flat_map(|p| p.iter().copied()),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vector,
    /// Index into the full direction alphabet.
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.len())
    }

    /// CSV `f_0,...,f_{d-1},label` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let d = self.feature_dim().unwrap_or(0);
        let mut out = String::new();
        for i in 0..d {
            let _ = write!(out, "f_{i},");
        }
        out.push_str("label\n");
        for s in &self.samples {
            for v in s.features.iter() {
                let _ = write!(out, "{v:.16e},");
            }
            let _ = writeln!(out, "{}", s.label);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty dataset file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.last() != Some(&"label")
            || cols[..cols.len() - 1]
                .iter()
                .enumerate()
                .any(|(i, c)| *c != format!("f_{i}"))
        {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected header `{header}`"),
            });
        }
        let d = cols.len() - 1;
        let mut samples = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected {} fields, found {}", d + 1, fields.len()),
                });
            }
            let features = fields[..d]
                .iter()
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|e| Error::Parse {
                        line: i + 1,
                        message: format!("bad feature `{f}`: {e}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            let label = fields[d].trim().parse::<usize>().map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("bad label `{}`: {e}", fields[d]),
            })?;
            samples.push(Sample {
                features: Vector::from_vec(features),
                label,
            });
        }
        Ok(Self { samples })
    }
}

/// Features and labels of a rollout, paired with the `(x_qs, x_ref)` state
/// each decision was taken at.
pub fn rollout_samples(
    rollout: &Rollout,
    spec: FeatureSpec,
) -> Result<Vec<(Sample, Vector, Vector)>> {
    let q = rollout.quantized.states();
    let r = rollout.reference.states();
    let h = rollout.quantized.h();
    (0..rollout.steps())
        .map(|k| {
            let prev = if k == 0 { &q[0] } else { &q[k - 1] };
            let features = extract_features(&q[k], &r[k], &r[k + 1], Some(prev), spec, h)?;
            Ok((
                Sample {
                    features,
                    label: rollout.directions[k],
                },
                q[k].clone(),
                r[k].clone(),
            ))
        })
        .collect()
}

/// Runs an MPC rollout of `steps` from every start and shuffles the pooled
/// samples with `seed`.
pub fn generate_dataset(
    starts: &[Vector],
    steps: usize,
    emu: &Emulation,
    cfg: &MpcConfig,
    spec: FeatureSpec,
    seed: u64,
) -> Result<Dataset> {
    if steps == 0 {
        return Ok(Dataset::default());
    }
    let per_start: Vec<Vec<Sample>> = starts
        .par_iter()
        .map(|x0| {
            let rollout = mpc_rollout(x0, steps, emu, cfg, &DropoutPolicy::None)?;
            Ok(rollout_samples(&rollout, spec)?
                .into_iter()
                .map(|(s, _, _)| s)
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut samples: Vec<Sample> = per_start.into_iter().flatten().collect();
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Dataset { samples })
}

/// `count` points evenly spaced on the circle of `radius` (2-D only).
pub fn circle_starts(count: usize, radius: f64) -> Vec<Vector> {
    (0..count)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / count as f64;
            Vector::from_vec(vec![radius * a.cos(), radius * a.sin()])
        })
        .collect()
}

/// `count` seeded points with uniform angle and radius in `[r_min, r_max]`.
pub fn annulus_starts(count: usize, r_min: f64, r_max: f64, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let r = rng.random_range(r_min..=r_max);
            Vector::from_vec(vec![r * a.cos(), r * a.sin()])
        })
        .collect()
}

/// Hidden widths and activations of the classifier; the output layer width
/// is the alphabet size.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierArch {
    pub hidden: Vec<usize>,
    /// One per layer including the output layer.
    pub activations: Vec<Activation>,
}

impl ClassifierArch {
    /// Three hidden layers of `width`, relu/relu/relu/linear.
    pub fn three_hidden(width: usize) -> Self {
        Self {
            hidden: vec![width; 3],
            activations: vec![
                Activation::Relu,
                Activation::Relu,
                Activation::Relu,
                Activation::Linear,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Standardize inputs during training; folded into the first layer after.
    pub standardize: bool,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            optimizer: Optimizer::Adam,
            adam: AdamConfig::default(),
            seed: 0,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

fn feature_stats(data: &Dataset, d: usize) -> (Vector, Vector) {
    let count = data.len() as f64;
    let mut mean = Vector::zeros(d);
    for s in &data.samples {
        mean += &s.features;
    }
    mean /= count;
    let mut var = Vector::zeros(d);
    for s in &data.samples {
        let c = &s.features - &mean;
        var += c.component_mul(&c);
    }
    let std = (var / count).map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
    (mean, std)
}

/// Minibatch cross-entropy training of a direction classifier.
pub fn train_classifier(
    data: &Dataset,
    classes: usize,
    arch: &ClassifierArch,
    cfg: &ClassifierTraining,
) -> Result<(Mlp, TrainReport)> {
    let d = data
        .feature_dim()
        .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
    check_dim("classifier activations", arch.hidden.len() + 1, arch.activations.len())?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    for s in &data.samples {
        check_dim("dataset features", d, s.features.len())?;
        if s.label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {classes} classes",
                s.label
            )));
        }
    }
    let mut sizes = vec![d];
    sizes.extend(&arch.hidden);
    sizes.push(classes);
    let mut net = Mlp::new(&sizes, &arch.activations, cfg.seed)?;
    let (mean, std) = if cfg.standardize {
        feature_stats(data, d)
    } else {
        (Vector::zeros(d), Vector::from_element(d, 1.0))
    };
    let inputs: Vec<Vector> = data
        .samples
        .iter()
        .map(|s| (&s.features - &mean).component_div(&std))
        .collect();
    let mut trainer = Trainer::new(&net, cfg.optimizer, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_DA7A);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<Vector> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| data.samples[i].label).collect();
            let batch = TrainBatch::new(&xs, ys)?;
            let cache = net.forward_batch(batch.inputs())?;
            let (loss, grad) = cross_entropy_batch(cache.output(), batch.targets())?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("classifier loss at epoch {epoch}")));
            }
            total += loss * chunk.len() as f64;
            let grads = net.backward(&cache, &grad)?;
            trainer.step(&mut net, &grads)?;
        }
        epoch_losses.push(total / data.len() as f64);
    }
    if cfg.standardize {
        fold_standardization(&mut net, &mean, &std);
    }
    let train_accuracy = evaluate(&net, data)?;
    Ok((
        net,
        TrainReport {
            epoch_losses,
            train_accuracy,
        },
    ))
}

/// Rewrites the first layer so the network accepts raw features:
/// `W' = W diag(1/σ)`, `b' = b - W' μ`.
fn fold_standardization(net: &mut Mlp, mean: &Vector, std: &Vector) {
    let first = &mut net.layers_mut()[0];
    for (c, s) in std.iter().enumerate() {
        let mut col = first.weights.column_mut(c);
        col /= *s;
    }
    first.biases -= &first.weights * mean;
}

/// Top-1 accuracy.
pub fn evaluate(model: &Mlp, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let d = data.feature_dim().expect("non-empty");
    check_dim("model input", model.input_dim(), d)?;
    let mut correct = 0usize;
    for chunk in data.samples.chunks(512) {
        let x = Matrix::from_columns(&chunk.iter().map(|s| s.features.clone()).collect::<Vec<_>>());
        let out = model.predict_batch(&x)?;
        for (j, s) in chunk.iter().enumerate() {
            let col = out.column(j);
            let mut best = 0;
            for i in 1..col.len() {
                if col[i] > col[best] {
                    best = i;
                }
            }
            if best == s.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Drives the plant with the classifier's masked argmax at every step.
pub fn supervised_rollout(
    x0: &Vector,
    steps: usize,
    model: &Mlp,
    spec: FeatureSpec,
    emu: &Emulation,
    policy: &DropoutPolicy,
) -> Result<Rollout> {
    check_dim("classifier input", spec.dim(emu.dim()), model.input_dim())?;
    check_dim("classifier output", emu.alphabet.len(), model.output_dim())?;
    let phi = emu.flow()?;
    let h = emu.h();
    let mut prev: Option<Vector> = None;
    drive(emu, x0, steps, policy, |_, xq, xr, mask| {
        let next_ref = &*phi * xr;
        let features = extract_features(xq, xr, &next_ref, Some(prev.as_ref().unwrap_or(xq)), spec, h)?;
        prev = Some(xq.clone());
        let logits = model.predict(&features)?;
        let available = emu.available(mask)?;
        let index = available.argmax(&logits)?;
        let rep = available
            .representative_for(index)
            .expect("argmax returns an available index")
            .clone();
        Ok((index, rep, f64::NAN))
    })
}
