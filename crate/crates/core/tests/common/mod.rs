//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use std::path::Path;

use pqvae::data::{gen_synthetic_corpus, Manifest, SynthConfig};
use pqvae::model::{Model, ModelConfig};
use pqvae::quantize::{Quantizer, QuantizerConfig, QuantizerKind};
use pqvae::tensor::{Graph, Tensor};
use pqvae::train::{loss_dual, LossOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// A small model, a quantizer seeded from its own encodings and a batch.
pub struct GradCase {
    pub model: Model,
    pub quantizer: Quantizer,
    pub x: Tensor,
    pub frame_mask: Vec<f64>,
    pub token_mask: Vec<f64>,
    pub dual: bool,
    pub alpha: f64,
    pub lambda: f64,
}

pub fn grad_case(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let k = [1, 2, 3][r.random_range(0..3)];
    let bottleneck = r.random_bool(0.3);
    let n_sub = if bottleneck { 2 } else { 1 };
    let cfg = ModelConfig {
        feature_dim: r.random_range(2..5),
        hidden_dim: r.random_range(4..10),
        embed_dim: r.random_range(3..7),
        downsample: k,
        n_residual_units: r.random_range(0..3),
        bottleneck_dim: bottleneck.then_some(2),
        n_subspaces: n_sub,
    };
    let model = Model::new(cfg.clone(), &mut r).unwrap();
    assert!(model.num_scalars() < 5000);
    let tokens = r.random_range(4..9);
    let x = random_tensor(tokens * k, cfg.feature_dim, 1.5, &mut r);
    let mut frame_mask = vec![1.0; tokens * k];
    // Mask the tail of the last token now and then.
    if k > 1 && r.random_bool(0.5) {
        frame_mask[tokens * k - 1] = 0.0;
    }
    let token_mask = frame_mask.chunks(k).map(|c| if c.iter().any(|&m| m != 0.0) { 1.0 } else { 0.0 }).collect();

    let code_dim = cfg.code_dim();
    let kind = [QuantizerKind::None, QuantizerKind::Vq, QuantizerKind::Pq, QuantizerKind::Rvq, QuantizerKind::Fsq]
        [(seed % 5) as usize];
    let sizes = match kind {
        QuantizerKind::None => vec![],
        QuantizerKind::Vq => vec![5],
        QuantizerKind::Pq => vec![3, 4],
        QuantizerKind::Rvq => vec![3, 3],
        QuantizerKind::Fsq => (0..code_dim).map(|i| [3, 5, 4][i % 3]).collect(),
    };
    let qcfg = QuantizerConfig {
        kind,
        sizes,
        ..QuantizerConfig::default()
    };
    let mut g = Graph::new();
    let bm = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let e = bm.encode(&mut g, xv).unwrap();
    let quantizer = Quantizer::init(&qcfg, g.value(e), &mut r).unwrap();
    GradCase {
        model,
        quantizer,
        x,
        frame_mask,
        token_mask,
        dual: r.random_bool(0.7),
        alpha: r.random_range(0.0..2.0),
        lambda: r.random_range(0.0..1.5),
    }
}

impl GradCase {
    fn commit_grad(&self) -> bool {
        self.quantizer.kind() != QuantizerKind::Fsq
    }

    /// Gradient of the full dual-decoding loss through the library's backward pass.
    pub fn analytic(&self) -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let bm = self.model.bind(&mut g, true);
        let x = g.constant(self.x.clone());
        let out = bm.forward(&mut g, x, &self.quantizer, None, self.dual).unwrap();
        let opts = LossOptions {
            alpha: self.alpha,
            beta: 1.0,
            lambda: self.lambda,
            codebook_grad: false,
            commit_grad: self.commit_grad(),
        };
        let (loss, terms) = loss_dual(&mut g, x, &out, &self.frame_mask, &self.token_mask, &opts).unwrap();
        g.backward(loss).unwrap();
        let grads = bm.vars().iter().map(|&v| g.grad_or_zeros(v)).collect();
        (terms.total, grads)
    }

    /// Loss of the frozen straight-through surrogate, evaluated with plain
    /// arithmetic on forward values: `Z = T(E) + (Q0 - T(E0))` with the codes
    /// `Q0` and shift fixed at the unperturbed model.
    pub fn surrogate(&self, model: &Model, frozen: &Frozen) -> f64 {
        let mut g = Graph::new();
        let bm = model.bind(&mut g, false);
        let x = g.constant(self.x.clone());
        let e = bm.encode(&mut g, x).unwrap();
        let ev = g.value(e).clone();
        let t: Vec<f64> = if self.quantizer.kind() == QuantizerKind::Fsq {
            ev.data().iter().map(|v| v.tanh()).collect()
        } else {
            ev.data().to_vec()
        };
        let z: Vec<f64> = t.iter().zip(&frozen.shift).map(|(a, b)| a + b).collect();
        let zc = g.constant(Tensor::matrix(ev.rows(), ev.cols(), z).unwrap());
        let x_hat = bm.decode(&mut g, zc).unwrap();
        let mut loss = masked_mean_sq(g.value(x_hat), &self.x, &self.frame_mask);
        if self.dual {
            let x_tilde = bm.decode(&mut g, e).unwrap();
            loss += self.lambda * masked_mean_sq(g.value(x_tilde), &self.x, &self.frame_mask);
        }
        if let (Some(q0), true) = (&frozen.codes, self.commit_grad()) {
            let tt = Tensor::matrix(ev.rows(), ev.cols(), t).unwrap();
            loss += self.alpha * masked_mean_sq(&tt, q0, &self.token_mask);
        }
        loss
    }

    pub fn freeze(&self) -> Frozen {
        let mut g = Graph::new();
        let bm = self.model.bind(&mut g, false);
        let x = g.constant(self.x.clone());
        let e = bm.encode(&mut g, x).unwrap();
        let ev = g.value(e).clone();
        match self.quantizer.quantize(&ev).unwrap() {
            None => Frozen {
                shift: vec![0.0; ev.len()],
                codes: None,
            },
            Some(r) => {
                let t: Vec<f64> = if self.quantizer.kind() == QuantizerKind::Fsq {
                    ev.data().iter().map(|v| v.tanh()).collect()
                } else {
                    ev.data().to_vec()
                };
                Frozen {
                    shift: r.quantized.data().iter().zip(&t).map(|(q, t)| q - t).collect(),
                    codes: Some(r.quantized),
                }
            }
        }
    }

    /// Central differences of the surrogate over every model parameter.
    pub fn finite_difference(&self, h: f64) -> Vec<Tensor> {
        let frozen = self.freeze();
        let mut work = self.model.clone();
        let mut out = Vec::new();
        for p in 0..work.params().len() {
            let mut grad = Tensor::zeros(work.params()[p].shape());
            for i in 0..grad.len() {
                let orig = work.params()[p].data()[i];
                work.params_mut()[p].data_mut()[i] = orig + h;
                let up = self.surrogate(&work, &frozen);
                work.params_mut()[p].data_mut()[i] = orig - h;
                let down = self.surrogate(&work, &frozen);
                work.params_mut()[p].data_mut()[i] = orig;
                grad.data_mut()[i] = (up - down) / (2.0 * h);
            }
            out.push(grad);
        }
        out
    }
}

pub struct Frozen {
    pub shift: Vec<f64>,
    pub codes: Option<Tensor>,
}

/// Mean of squared differences over rows with nonzero mask, all columns.
pub fn masked_mean_sq(a: &Tensor, b: &Tensor, mask: &[f64]) -> f64 {
    let cols = a.cols();
    let mut s = 0.0;
    let mut n = 0usize;
    for (r, &m) in mask.iter().enumerate().take(a.rows()) {
        if m != 0.0 {
            s += a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            n += cols;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Small corpus for end-to-end tests.
pub fn small_corpus(dir: &Path, seed: u64) -> Manifest {
    let cfg = SynthConfig {
        n_states: 12,
        feature_dim: 4,
        frames_per_state: 4.0,
        n_sequences: 24,
        seq_len_min: 40,
        seq_len_max: 120,
        noise_std: 0.2,
        seed,
    };
    gen_synthetic_corpus(&cfg, dir).unwrap()
}

/// A fast training config over a `small_corpus` manifest.
pub fn small_train_config(manifest: &Path, kind: QuantizerKind, sizes: Vec<usize>) -> pqvae::train::TrainConfig {
    use pqvae::train::{ScheduleConfig, TrainConfig};
    let total_steps = 40;
    let mut cfg = TrainConfig {
        model: ModelConfig {
            feature_dim: 4,
            hidden_dim: 16,
            embed_dim: 6,
            downsample: 2,
            n_residual_units: 1,
            bottleneck_dim: None,
            n_subspaces: 1,
        },
        quantizer: QuantizerConfig { kind, sizes, ..QuantizerConfig::default() },
        total_steps,
        batch_frames: 64,
        window_frames: 16,
        eval_every: 10,
        manifest: manifest.to_path_buf(),
        ..TrainConfig::default()
    };
    cfg.loss.lambda = ScheduleConfig::scaled(total_steps);
    cfg.optimizer.lr = 3e-3;
    cfg
}
