//! MLP probing heads and the shared fine-tuning recipe.
//!
//! Heads are fully connected stacks (ReLU between layers, logits out).
//! Training follows the same recipe everywhere an attacker or challenger
//! fine-tunes a head: adaptive-moment optimizer, plateau learning-rate
//! scheduling, early stopping with the configured patience, best state
//! kept.

use super::classify::{accuracy, softmax_cross_entropy};
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{relu_backward_inplace, relu_inplace, Dense};

/// Architecture descriptor for a probing head.
///
/// `depth` counts dense layers (1–4); single-layer heads have no hidden
/// dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub depth: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hidden_dim: Option<usize>,
}

impl HeadSpec {
    pub fn linear() -> Self {
        HeadSpec {
            depth: 1,
            hidden_dim: None,
        }
    }

    pub fn mlp(depth: usize, hidden_dim: usize) -> Self {
        HeadSpec {
            depth,
            hidden_dim: Some(hidden_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.depth) {
            return Err(Error::validation(format!(
                "head depth must be 1..=4, got {}",
                self.depth
            )));
        }
        match (self.depth, self.hidden_dim) {
            (1, Some(_)) => Err(Error::validation("depth-1 head must not set hidden_dim")),
            (1, None) => Ok(()),
            (_, None) => Err(Error::validation("multi-layer head needs hidden_dim")),
            (_, Some(0)) => Err(Error::validation("hidden_dim must be positive")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpHead<F> {
    layers: Vec<Dense<F>>,
}

pub struct HeadTape<F> {
    /// Input to each dense layer.
    inputs: Vec<Array2<F>>,
    /// Post-ReLU activations (between layers).
    activations: Vec<Array2<F>>,
}

impl<F: Scalar> MlpHead<F> {
    pub fn init<R: Rng>(spec: HeadSpec, in_dim: usize, n_classes: usize, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.depth);
        if spec.depth == 1 {
            layers.push(Dense::init(n_classes, in_dim, rng));
        } else {
            let h = spec.hidden_dim.unwrap();
            layers.push(Dense::init(h, in_dim, rng));
            for _ in 1..spec.depth - 1 {
                layers.push(Dense::init(h, h, rng));
            }
            layers.push(Dense::init(n_classes, h, rng));
        }
        Ok(MlpHead { layers })
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(cur.view());
            if i + 1 < self.layers.len() {
                relu_inplace(&mut cur);
            }
        }
        cur
    }

    pub fn forward_train(&self, x: &Array2<F>) -> (Array2<F>, HeadTape<F>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut activations = Vec::new();
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            cur = layer.forward(cur.view());
            if i + 1 < self.layers.len() {
                relu_inplace(&mut cur);
                activations.push(cur.clone());
            }
        }
        (cur, HeadTape { inputs, activations })
    }

    /// Returns `(param grads ordinal-aligned with params(), grad wrt input)`.
    pub fn backward(&self, tape: &HeadTape<F>, grad_logits: &Array2<F>) -> (Vec<ArrayD<F>>, Array2<F>) {
        let mut grads: Vec<ArrayD<F>> = vec![ArrayD::zeros(ndarray::IxDyn(&[0])); 2 * self.layers.len()];
        let mut g = grad_logits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (gw, gb, gx) = layer.backward(tape.inputs[i].view(), g.view());
            grads[2 * i] = gw.into_dyn();
            grads[2 * i + 1] = gb.into_dyn();
            g = gx;
            if i > 0 {
                relu_backward_inplace(&mut g, &tape.activations[i - 1]);
            }
        }
        (grads, g)
    }

    pub fn params(&self) -> Vec<ArrayD<F>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.to_owned().into_dyn());
            out.push(l.bias.to_owned().into_dyn());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.view_mut().into_dyn());
            out.push(l.bias.view_mut().into_dyn());
        }
        out
    }

    /// Overwrite parameters from an ordinal-aligned tensor list.
    pub fn set_params(&mut self, params: &[ArrayD<F>]) -> Result<()> {
        if params.len() != 2 * self.layers.len() {
            return Err(Error::shape("parameter count mismatch for head"));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            let w = &params[2 * i];
            let b = &params[2 * i + 1];
            if w.shape() != l.weight.shape() || b.shape() != l.bias.shape() {
                return Err(Error::shape("parameter shape mismatch for head"));
            }
            l.weight.assign(
                &w.view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .map_err(|e| Error::shape(e.to_string()))?,
            );
            l.bias.assign(
                &b.view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .map_err(|e| Error::shape(e.to_string()))?,
            );
        }
        Ok(())
    }

    pub fn param_count_scalars(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Fold a per-dimension input standardization `(x - mu) / sigma` into
    /// the first dense layer, so the head consumes raw features while
    /// behaving as if its input were standardized.
    pub fn absorb_input_standardization(&mut self, mu: &Array1<F>, sigma: &Array1<F>) -> Result<()> {
        let first = &mut self.layers[0];
        let in_dim = first.weight.shape()[1];
        if mu.len() != in_dim || sigma.len() != in_dim {
            return Err(Error::shape("standardization stats do not match head input"));
        }
        for j in 0..in_dim {
            let inv = F::one() / sigma[j];
            for i in 0..first.weight.shape()[0] {
                first.weight[[i, j]] = first.weight[[i, j]] * inv;
            }
        }
        let shift = first.weight.dot(mu);
        first.bias = &first.bias - &shift;
        Ok(())
    }

    /// Bitwise-stable digest of the head parameters.
    pub fn checksum(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for l in &self.layers {
            for v in l.weight.iter().chain(l.bias.iter()) {
                h.write_u64(v.as_f64().to_bits());
            }
        }
        h.finish()
    }
}

/// Fine-tuning recipe shared by challengers and the probing bench.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stopping is armed only after this many epochs, so tiny
    /// training sets (few optimizer steps per epoch) still get off the
    /// ground.
    #[serde(default = "default_min_epochs")]
    pub min_epochs: usize,
    /// Stop as soon as eval accuracy reaches this level (used when a
    /// deliberately imperfect fit is wanted, e.g. victim pre-training).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_accuracy: Option<f64>,
    /// Early-stopping patience in epochs without eval-accuracy improvement.
    pub patience: usize,
    /// Plateau scheduler: epochs without improvement before halving the LR.
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub min_lr: f64,
}

fn default_min_epochs() -> usize {
    12
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig {
            learning_rate: 1e-2,
            batch_size: 64,
            max_epochs: 120,
            min_epochs: default_min_epochs(),
            stop_accuracy: None,
            patience: 10,
            lr_patience: 4,
            lr_factor: 0.5,
            min_lr: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadTrainOutcome<F> {
    pub head: MlpHead<F>,
    pub best_eval_accuracy: f64,
    pub epochs_trained: usize,
    /// Eval accuracy after each epoch (enables accuracy-vs-epoch curves).
    pub eval_trace: Vec<f64>,
}

/// Train a head from fresh random init on fixed (frozen-encoder) features.
///
/// `train` and `eval` are `(embeddings [n, d], labels)`. Features are
/// standardized per dimension on the training statistics (the attacker's
/// usual preprocessing, and what keeps fresh heads scale-robust); the
/// standardization is absorbed into the returned head so it consumes raw
/// features. Returns the best early-stopped state.
pub fn train_head<F: Scalar>(
    spec: HeadSpec,
    train: (&Array2<F>, &[usize]),
    eval: (&Array2<F>, &[usize]),
    n_classes: usize,
    cfg: &HeadTrainConfig,
    seed: u64,
) -> Result<HeadTrainOutcome<F>> {
    let (tx_raw, ty) = train;
    let (ex_raw, ey) = eval;
    if tx_raw.shape()[0] != ty.len() || ex_raw.shape()[0] != ey.len() {
        return Err(Error::shape("embeddings/labels length mismatch"));
    }
    if tx_raw.shape()[0] == 0 {
        return Err(Error::validation("empty training set"));
    }
    let (mu, sigma) = feature_stats(tx_raw);
    let tx = &standardize(tx_raw, &mu, &sigma);
    let ex = &standardize(ex_raw, &mu, &sigma);
    let mut rng = crate::seeds::stream(seed, "head/init", 0);
    let mut head = MlpHead::init(spec, tx.shape()[1], n_classes, &mut rng)?;
    let mut opt = Adam::for_params(F::from_f64(cfg.learning_rate), &head.params());

    let mut best_acc = f64::NEG_INFINITY;
    let mut best_head = head.clone();
    let mut since_best = 0usize;
    let mut since_lr = 0usize;
    let mut trace = Vec::new();
    let mut epochs = 0usize;

    let n = tx.shape()[0];
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.max_epochs {
        epochs = epoch + 1;
        let mut shuffle_rng = crate::seeds::stream(seed, "head/shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let xb = tx.select(Axis(0), batch);
            let yb: Vec<usize> = batch.iter().map(|&i| ty[i]).collect();
            let (logits, tape) = head.forward_train(&xb);
            let (_, dlogits) = softmax_cross_entropy(&logits, &yb)?;
            let (grads, _) = head.backward(&tape, &dlogits);
            opt.step(head.params_mut(), &grads);
        }
        let eval_logits = head.forward(&ex.to_owned());
        let acc = accuracy(&eval_logits, ey);
        trace.push(acc);
        if acc > best_acc {
            best_acc = acc;
            best_head = head.clone();
            since_best = 0;
            since_lr = 0;
            if cfg.stop_accuracy.map(|t| acc >= t).unwrap_or(false) {
                break;
            }
        } else {
            since_best += 1;
            since_lr += 1;
            if since_lr >= cfg.lr_patience {
                let lr = (opt.lr().as_f64() * cfg.lr_factor).max(cfg.min_lr);
                opt.set_lr(F::from_f64(lr));
                since_lr = 0;
            }
            if since_best >= cfg.patience && epoch + 1 >= cfg.min_epochs {
                break;
            }
        }
    }
    best_head.absorb_input_standardization(&mu, &sigma)?;
    Ok(HeadTrainOutcome {
        head: best_head,
        best_eval_accuracy: best_acc,
        epochs_trained: epochs,
        eval_trace: trace,
    })
}

/// Per-dimension mean and deviation (floored) over rows.
fn feature_stats<F: Scalar>(x: &Array2<F>) -> (Array1<F>, Array1<F>) {
    let n = F::from_f64(x.shape()[0] as f64);
    let mu = x.sum_axis(Axis(0)) / n;
    let mut var = Array1::<F>::zeros(x.shape()[1]);
    for row in x.outer_iter() {
        for (j, &v) in row.iter().enumerate() {
            let d = v - mu[j];
            var[j] = var[j] + d * d;
        }
    }
    let floor = F::from_f64(1e-6);
    let sigma = var.mapv(|v| (v / n).sqrt().max(floor));
    (mu, sigma)
}

fn standardize<F: Scalar>(x: &Array2<F>, mu: &Array1<F>, sigma: &Array1<F>) -> Array2<F> {
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mu[j]) / sigma[j];
        }
    }
    out
}
