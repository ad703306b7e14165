//! A desk-scale synthetic training demo.
//!
//! The task: given random query/key vectors and token coordinates, match a
//! target logit tensor whose entries depend only on pairwise coordinate
//! differences — `target[h][i][j] = (q_i·k_j) · cos(ω · wᵀ(x_i − x_j))`, a
//! dot product modulated by a relative-position cosine. Because the target
//! is a pure function of coordinate differences, a commuting encoding that
//! fits it keeps fitting it when every coordinate is shifted by a constant,
//! while a non-commuting one need not.
//!
//! Training is plain gradient descent on the squared logit error, driven
//! by the exact Fréchet-derivative gradients of
//! [`crate::attention::logit_grad_params`]. Per-sample accumulation order
//! is fixed, so traces are bitwise reproducible for a given seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{logit_grad_params, logits, rotate_qk, AttentionBatch, LogitTensor};
use crate::error::{Error, Result};
use crate::ropefamily::{AngleMatrixSet, Coordinate, ModelDims, Variant, DEFAULT_INIT_SCALE};

/// Angular frequency of the relative-position cosine in the default
/// target template.
pub const TEMPLATE_OMEGA: f64 = 3.0;

/// Learning rate that reliably descends on the default toy task.
pub const DEFAULT_TOY_LR: f64 = 0.05;

/// How the target logits were generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTemplate {
    /// Template identifier; currently always `dot-cos`.
    pub name: String,
    pub omega: f64,
    /// Unit vector projecting coordinate differences to a scalar phase.
    pub weights: Vec<f64>,
}

/// One training sample: coordinates, a q/k batch, and the target logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub coords: Vec<Coordinate>,
    pub batch: AttentionBatch,
    pub target: LogitTensor,
}

/// A generated dataset together with the metadata needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub dims: ModelDims,
    pub n_tokens: usize,
    pub seed: u64,
    pub template: TargetTemplate,
    pub samples: Vec<ToySample>,
}

/// Generates `n_samples` independent samples of `n_tokens` tokens each.
/// Coordinates are uniform in the unit cube; q/k entries are standard
/// normal; targets follow the dot-cos template, which depends only on
/// coordinate differences.
pub fn gen_synthetic(n_tokens: usize, dims: &ModelDims, n_samples: usize, seed: u64) -> ToyDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axes = dims.axes();

    let raw: Vec<f64> = (0..axes).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let weights: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let template = TargetTemplate {
        name: "dot-cos".into(),
        omega: TEMPLATE_OMEGA,
        weights,
    };

    let samples = (0..n_samples)
        .map(|_| {
            let coords: Vec<Coordinate> = (0..n_tokens)
                .map(|_| {
                    Coordinate::new((0..axes).map(|_| rng.random_range(0.0..1.0)).collect())
                        .expect("finite draw")
                })
                .collect();
            let batch = AttentionBatch::random(n_tokens, dims.heads(), dims.head_dim(), &mut rng);
            let target = target_logits(&batch, &coords, &template);
            ToySample {
                coords,
                batch,
                target,
            }
        })
        .collect();

    ToyDataset {
        dims: *dims,
        n_tokens,
        seed,
        template,
        samples,
    }
}

fn target_logits(
    batch: &AttentionBatch,
    coords: &[Coordinate],
    template: &TargetTemplate,
) -> LogitTensor {
    let plain = logits(batch);
    let n = batch.n();
    let mut out = LogitTensor::zeros(batch.heads(), n);
    for i in 0..n {
        for j in 0..n {
            let phase: f64 = template
                .weights
                .iter()
                .enumerate()
                .map(|(k, w)| w * (coords[i][k] - coords[j][k]))
                .sum();
            let modulation = (template.omega * phase).cos();
            for head in 0..batch.heads() {
                out.set(head, i, j, plain.get(head, i, j) * modulation);
            }
        }
    }
    out
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Step-indexed loss and gradient-norm history. Row `s` holds the values
/// measured at the parameters *before* the s-th update.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    /// CSV with header `step,loss,grad_norm`; zero steps yield the header
    /// only.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,grad_norm\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{}\n", row.step, row.loss, row.grad_norm));
        }
        out
    }
}

/// Mean squared logit error over the dataset, optionally with every
/// coordinate shifted by a constant offset before rotation.
pub fn eval_loss(
    dataset: &ToyDataset,
    set: &AngleMatrixSet,
    shift: Option<&Coordinate>,
) -> Result<f64> {
    let mut total = 0.0;
    for sample in &dataset.samples {
        let coords: Vec<Coordinate> = match shift {
            Some(t) => sample
                .coords
                .iter()
                .map(|c| c.add(t))
                .collect::<Result<_>>()?,
            None => sample.coords.clone(),
        };
        let pred = logits(&rotate_qk(&sample.batch, set, &coords)?);
        let entries = pred.data().len() as f64;
        let sq: f64 = pred
            .data()
            .iter()
            .zip(sample.target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += sq / entries;
    }
    Ok(total / dataset.samples.len().max(1) as f64)
}

/// Plain gradient descent on the squared logit error. Records the loss and
/// gradient norm before each update; a non-finite loss aborts with the
/// offending step index.
pub fn train(
    dataset: &ToyDataset,
    set: &mut AngleMatrixSet,
    steps: usize,
    lr: f64,
) -> Result<TrainTrace> {
    if !set.is_trainable() {
        return Err(Error::NotTrainable(set.variant().name()));
    }
    if dataset.samples.is_empty() && steps > 0 {
        return Err(Error::InvalidArgument(
            "cannot train on an empty dataset".into(),
        ));
    }
    let mut trace = TrainTrace::default();
    let n_samples = dataset.samples.len() as f64;
    for step in 0..steps {
        // Loss pass first: divergence must abort before any gradient work
        // sees non-finite cotangents.
        let mut loss = 0.0;
        let mut upstreams = Vec::with_capacity(dataset.samples.len());
        for sample in &dataset.samples {
            let pred = logits(&rotate_qk(&sample.batch, set, &sample.coords)?);
            let entries = pred.data().len() as f64;
            let mut upstream = LogitTensor::zeros(pred.heads(), pred.n());
            let mut sq = 0.0;
            for head in 0..pred.heads() {
                for i in 0..pred.n() {
                    for j in 0..pred.n() {
                        let diff = pred.get(head, i, j) - sample.target.get(head, i, j);
                        sq += diff * diff;
                        upstream.set(head, i, j, 2.0 * diff / (entries * n_samples));
                    }
                }
            }
            loss += sq / entries;
            upstreams.push(upstream);
        }
        loss /= n_samples;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }

        let mut grad_acc: Vec<f64> = vec![0.0; set.trainable_params().len()];
        for (sample, upstream) in dataset.samples.iter().zip(&upstreams) {
            let grads = logit_grad_params(&sample.batch, set, &sample.coords, upstream)?;
            for (acc, g) in grad_acc.iter_mut().zip(grads.to_flat()) {
                *acc += g;
            }
        }
        let grad_norm = grad_acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        trace.rows.push(TraceRow {
            step,
            loss,
            grad_norm,
        });
        if lr != 0.0 {
            let mut params = set.trainable_params();
            for (p, g) in params.iter_mut().zip(&grad_acc) {
                *p -= lr * g;
            }
            set.set_trainable_params(&params)?;
        }
    }
    Ok(trace)
}

/// Builds a randomly initialized set for `variant` and trains it on the
/// dataset. Returns the trace together with the trained set.
pub fn train_variant(
    dataset: &ToyDataset,
    variant: Variant,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(TrainTrace, AngleMatrixSet)> {
    let mut set = AngleMatrixSet::from_seed(variant, dataset.dims, seed, DEFAULT_INIT_SCALE)?;
    let trace = train(dataset, &mut set, steps, lr)?;
    Ok((trace, set))
}
