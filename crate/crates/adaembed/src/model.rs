//! Encoder, momentum encoder, and cosine-prototype classifier.
//!
//! The encoder is a small tanh MLP producing `d`-dimensional features. The
//! classifier is a bias-free weight matrix `W[d x c]` whose columns act as
//! class prototypes; logits are cosine similarities divided by a temperature.
//! The momentum encoder is an EMA copy of the encoder and never receives
//! gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor, // [fan_in x fan_out]
    pub bias: Tensor,   // [fan_out]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
    fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        for win in dims.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight: Vec<f64> =
                (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            let bias: Vec<f64> = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            layers.push(Layer {
                weight: Tensor::new(weight, vec![fan_in, fan_out]).unwrap().with_requires_grad(),
                bias: Tensor::new(bias, vec![fan_out]).unwrap().with_requires_grad(),
            });
        }
        Mlp { layers }
    }

    fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    /// Plain (graph-free) forward: linear layers with tanh between them,
    /// final projection linear.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "encoder expects [n x {}], got {:?}",
                self.input_dim(),
                x.shape()
            )));
        }
        let n = x.rows();
        let mut cur = x.data().to_vec();
        let mut cur_dim = x.cols();
        for (li, layer) in self.layers.iter().enumerate() {
            let dout = layer.weight.shape()[1];
            let mut next = vec![0.0; n * dout];
            for i in 0..n {
                let row = &cur[i * cur_dim..(i + 1) * cur_dim];
                let orow = &mut next[i * dout..(i + 1) * dout];
                orow.copy_from_slice(layer.bias.data());
                for (k, &xv) in row.iter().enumerate() {
                    let wrow = &layer.weight.data()[k * dout..(k + 1) * dout];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
            if li + 1 < self.layers.len() {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            cur = next;
            cur_dim = dout;
        }
        Tensor::new(cur, vec![n, cur_dim])
    }
}

/// Per-graph handles to the trainable parameters.
pub struct ModelVars {
    pub encoder: Vec<(Var, Var)>, // (weight, bias) per layer
    pub classifier_w: Var,
}

/// Encoder parameters, their momentum copy, and the prototype matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelState {
    pub encoder: Mlp,
    pub momentum_encoder: Mlp,
    pub classifier_w: Tensor, // [d x c], columns are class prototypes
    pub classifier_temperature: f64,
}

impl ModelState {
    /// Fresh model; the momentum encoder starts as an exact copy of the encoder.
    pub fn init(
        input_dim: usize,
        hidden_widths: &[usize],
        feature_dim: usize,
        classes: usize,
        classifier_temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_dim == 0 || feature_dim == 0 || classes < 2 {
            return Err(Error::Config(format!(
                "model dims: input_dim={input_dim}, feature_dim={feature_dim}, classes={classes}"
            )));
        }
        if !(classifier_temperature > 0.0) {
            return Err(Error::Config(format!(
                "classifier_temperature must be positive, got {classifier_temperature}"
            )));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden_widths);
        dims.push(feature_dim);
        let encoder = Mlp::init(&dims, rng);
        let momentum_encoder = encoder.clone();
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let wdata: Vec<f64> =
            (0..feature_dim * classes).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(ModelState {
            encoder,
            momentum_encoder,
            classifier_w: Tensor::new(wdata, vec![feature_dim, classes])?.with_requires_grad(),
            classifier_temperature,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier_w.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.classifier_w.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Raw (un-normalized) features of `x` through the encoder or, when
    /// `use_momentum` is set, through the gradient-free momentum encoder.
    pub fn encode(&self, x: &Tensor, use_momentum: bool) -> Result<Tensor> {
        if use_momentum {
            self.momentum_encoder.forward(x)
        } else {
            self.encoder.forward(x)
        }
    }

    /// Cosine logits and probabilities for raw features `f[n x d]`.
    pub fn classify(&self, f: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = self.feature_dim();
        let c = self.num_classes();
        if f.shape().len() != 2 || f.cols() != d {
            return Err(Error::Dimension(format!(
                "classify expects [n x {d}], got {:?}",
                f.shape()
            )));
        }
        let n = f.rows();
        let mut logits = vec![0.0; n * c];
        for i in 0..n {
            let row = f.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateInput(format!(
                    "classify: feature row {i} has norm {norm:.3e} < 1e-12"
                )));
            }
            for j in 0..c {
                let mut dot = 0.0;
                for (k, &fv) in row.iter().enumerate() {
                    dot += (fv / norm) * self.classifier_w.data()[k * c + j];
                }
                logits[i * c + j] = dot / self.classifier_temperature;
            }
        }
        let probs = softmax_rows(&logits, n, c);
        Ok((Tensor::new(logits, vec![n, c])?, Tensor::new(probs, vec![n, c])?))
    }

    /// Registers encoder weights and the classifier matrix as graph leaves.
    pub fn register_graph(&self, g: &mut Graph) -> ModelVars {
        let encoder = self
            .encoder
            .layers
            .iter()
            .map(|l| (g.leaf(&l.weight), g.leaf(&l.bias)))
            .collect();
        ModelVars { encoder, classifier_w: g.leaf(&self.classifier_w) }
    }

    /// Differentiable encoder forward.
    pub fn encode_graph(&self, g: &mut Graph, vars: &ModelVars, x: Var) -> Result<Var> {
        let mut cur = x;
        let last = vars.encoder.len() - 1;
        for (li, &(w, b)) in vars.encoder.iter().enumerate() {
            cur = g.linear(cur, w, Some(b))?;
            if li < last {
                cur = g.tanh(cur);
            }
        }
        Ok(cur)
    }

    /// Differentiable classifier: normalize, project on prototypes, divide by
    /// temperature, softmax. Returns `(logits, probs)`.
    pub fn classify_graph(&self, g: &mut Graph, vars: &ModelVars, f: Var) -> Result<(Var, Var)> {
        let fhat = g.l2_normalize_rows(f)?;
        let raw = g.linear(fhat, vars.classifier_w, None)?;
        let logits = g.scale(raw, 1.0 / self.classifier_temperature);
        let probs = g.softmax_rows(logits)?;
        Ok((logits, probs))
    }

    /// EMA update of the momentum encoder: `theta' <- m*theta' + (1-m)*theta`.
    pub fn ema_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::Config(format!("ema momentum must be in [0, 1], got {m}")));
        }
        for (dst, src) in self.momentum_encoder.layers.iter_mut().zip(&self.encoder.layers) {
            for (a, &b) in dst.weight.data_mut().iter_mut().zip(src.weight.data()) {
                *a = m * *a + (1.0 - m) * b;
            }
            for (a, &b) in dst.bias.data_mut().iter_mut().zip(src.bias.data()) {
                *a = m * *a + (1.0 - m) * b;
            }
        }
        Ok(())
    }

    /// Hard copy `theta' <- theta` (used once, when warmup ends).
    pub fn sync_momentum(&mut self) {
        self.momentum_encoder = self.encoder.clone();
    }

    /// Rows are the l2-normalized prototype columns of `W`, shape `[c x d]`.
    pub fn prototypes(&self) -> Result<Tensor> {
        let d = self.feature_dim();
        let c = self.num_classes();
        let mut rows = vec![0.0; c * d];
        for j in 0..c {
            let mut norm = 0.0;
            for k in 0..d {
                let v = self.classifier_w.data()[k * c + j];
                norm += v * v;
            }
            let norm = norm.sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateInput(format!(
                    "prototype column {j} has norm {norm:.3e} < 1e-12"
                )));
            }
            for k in 0..d {
                rows[j * d + k] = self.classifier_w.data()[k * c + j] / norm;
            }
        }
        Tensor::new(rows, vec![c, d])
    }

    /// Trainable parameters in a fixed order: encoder (weight, bias) pairs,
    /// then the classifier matrix.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.encoder.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.classifier_w);
        out
    }

    pub fn trainable_params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for layer in &self.encoder.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.classifier_w);
        out
    }

    /// Harvests graph gradients into the parameter gradient slots, in the
    /// same order as [`ModelState::trainable_params_mut`] and
    /// [`ModelState::register_graph`].
    pub fn accumulate_grads_from(&mut self, g: &Graph, vars: &ModelVars) -> Result<()> {
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for &(w, b) in &vars.encoder {
            grads.push(g.grad(w).to_vec());
            grads.push(g.grad(b).to_vec());
        }
        grads.push(g.grad(vars.classifier_w).to_vec());
        for (param, grad) in self.trainable_params_mut().into_iter().zip(grads) {
            param.accumulate_grad(&grad)?;
        }
        Ok(())
    }
}

fn softmax_rows(logits: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for (o, &z) in orow.iter_mut().zip(row) {
            *o = (z - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

// ── checkpointing ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config_hash: String,
    model: ModelState,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Writes the full parameter state as JSON. f64 values round-trip exactly.
pub fn save_checkpoint(path: &std::path::Path, model: &ModelState, config_hash: &str) -> Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_string(),
        model: model.clone(),
    };
    let text = serde_json::to_string(&ckpt)
        .map_err(|e| Error::Contract(format!("checkpoint serialization: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads a checkpoint, returning the model and the config hash it was saved under.
pub fn load_checkpoint(path: &std::path::Path) -> Result<(ModelState, String)> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Contract(format!("checkpoint parse: {e}")))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Contract(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    Ok((ckpt.model, ckpt.config_hash))
}
