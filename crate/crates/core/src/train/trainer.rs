//! Training state, a single optimization step, evaluation and the
//! named-tensor layout used for checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::loss::{lambda_schedule, loss_dual, LossOptions, LossTerms};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{pad_frames, token_mask, Model, ModelConfig};
use crate::quantize::{
    codebook_perplexity, codebook_usage, Codebook, MetricsReport, PQConfig, QuantizeResult, Quantizer,
    QuantizerKind,
};
use crate::tensor::{adamw_step, AdamWState, Graph, Tensor, Var};

/// Stream reserved for parameter and codebook initialization.
const INIT_STREAM: u64 = u64::MAX;
/// Stream reserved for dead-codeword restarts.
const RESTART_STREAM: u64 = u64::MAX - 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub terms: LossTerms,
    pub batch_usage: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub quantizer: Quantizer,
    pub opt: AdamWState,
    /// Optimizer state for gradient-trained codebooks (EMA off).
    pub book_opt: Option<AdamWState>,
    /// Number of completed steps.
    pub step: u64,
}

fn as_weights(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

fn masked_rows(t: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let rows: Vec<f64> = (0..t.rows())
        .filter(|&r| mask[r])
        .flat_map(|r| t.row(r).iter().copied())
        .collect();
    Tensor::matrix(rows.len() / t.cols().max(1), t.cols(), rows)
}

fn masked_stream(result: &QuantizeResult, mask: &[bool]) -> Vec<u64> {
    result
        .composed_index
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&i, _)| i)
        .collect()
}

fn book_params(q: &Quantizer) -> Vec<Tensor> {
    q.books().iter().map(Codebook::codewords_tensor).collect()
}

impl Trainer {
    /// Fresh state: parameters from `cfg.seed`, codebooks seeded from the
    /// encoder outputs of `first_batch`.
    pub fn new(cfg: TrainConfig, first_batch: &Batch) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(INIT_STREAM);
        let model = Model::new(cfg.model.clone(), &mut rng)?;
        let mut g = Graph::new();
        let bm = model.bind(&mut g, false);
        let x = g.constant(first_batch.frames.clone());
        let e = bm.encode(&mut g, x)?;
        let mask = token_mask(&first_batch.frame_mask, cfg.model.downsample);
        let samples = masked_rows(g.value(e), &mask)?;
        let quantizer = Quantizer::init(&cfg.quantizer, &samples, &mut rng)?;
        let opt = AdamWState::new(model.params());
        let book_opt = (!cfg.quantizer.ema && !quantizer.books().is_empty())
            .then(|| AdamWState::new(&book_params(&quantizer)));
        Ok(Self {
            cfg,
            model,
            quantizer,
            opt,
            book_opt,
            step: 0,
        })
    }

    /// Runs step `self.step + 1` on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let step = self.step + 1;
        let cfg = &self.cfg;
        let k = cfg.model.downsample;
        let tmask = token_mask(&batch.frame_mask, k);
        let fw = as_weights(&batch.frame_mask);
        let tw = as_weights(&tmask);

        let mut g = Graph::new();
        let bm = self.model.bind(&mut g, true);
        let model_vars = bm.vars().to_vec();
        let book_vars: Option<Vec<Var>> = self
            .book_opt
            .as_ref()
            .map(|_| book_params(&self.quantizer).into_iter().map(|t| g.param(t)).collect());
        let x = g.constant(batch.frames.clone());
        let out = bm.forward(&mut g, x, &self.quantizer, book_vars.as_deref(), cfg.dual)?;
        let opts = LossOptions {
            alpha: cfg.loss.alpha,
            beta: cfg.loss.beta,
            lambda: lambda_schedule(step, &cfg.loss.lambda),
            codebook_grad: book_vars.is_some(),
            commit_grad: self.quantizer.kind() != QuantizerKind::Fsq,
        };
        let (loss, terms) = loss_dual(&mut g, x, &out, &fw, &tw, &opts)?;
        if !terms.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("{terms:?}"),
            });
        }
        g.backward(loss)?;

        let grads: Vec<Tensor> = model_vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
        adamw_step(self.model.params_mut(), &grads, &mut self.opt, &self.cfg.optimizer)?;
        if let (Some(vars), Some(state)) = (&book_vars, self.book_opt.as_mut()) {
            let grads: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
            let mut params = book_params(&self.quantizer);
            adamw_step(&mut params, &grads, state, &self.cfg.optimizer)?;
            for (book, p) in self.quantizer.books_mut().iter_mut().zip(&params) {
                book.set_codewords(p.data())?;
            }
        }

        let e = g.value(out.e);
        let mut batch_usage = None;
        if let Some(result) = &out.quant.result {
            if self.book_opt.is_none() {
                self.quantizer.ema_update(e, result, &tmask)?;
            }
            let n = self.quantizer.composed_size().unwrap_or(u64::MAX);
            batch_usage = Some(codebook_usage(&masked_stream(result, &tmask), n)?);
        }
        if self.cfg.quantizer.dead_restart {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ step);
            rng.set_stream(RESTART_STREAM);
            self.quantizer.restart_dead(e, &tmask, &mut rng)?;
        }
        self.step = step;
        Ok(StepMetrics {
            step,
            terms,
            batch_usage,
        })
    }

    pub fn evaluate(&self, seqs: &[Tensor]) -> Result<MetricsReport> {
        evaluate(&self.model, &self.quantizer, seqs)
    }

    /// Named tensors describing the full training state.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = state_tensors(&self.model, &self.quantizer, self.step);
        let names = self.model.param_names();
        out.push(("optim/step".into(), Tensor::vector(vec![self.opt.step as f64])));
        for (i, n) in names.iter().enumerate() {
            out.push((format!("optim/m/{n}"), self.opt.m[i].clone()));
            out.push((format!("optim/v/{n}"), self.opt.v[i].clone()));
        }
        if let Some(s) = &self.book_opt {
            out.push(("book_optim/step".into(), Tensor::vector(vec![s.step as f64])));
            for j in 0..s.m.len() {
                out.push((format!("book_optim/m/{j}"), s.m[j].clone()));
                out.push((format!("book_optim/v/{j}"), s.v[j].clone()));
            }
        }
        out
    }

    /// Restores a training state; the stored architecture must match `cfg`.
    pub fn from_tensors(cfg: TrainConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        cfg.validate()?;
        let state = load_state(tensors, Some(cfg.quantizer.ema_decay))?;
        if state.model.config() != &cfg.model {
            return Err(Error::InvalidConfig(format!(
                "checkpoint model {:?} does not match config {:?}",
                state.model.config(),
                cfg.model
            )));
        }
        if state.quantizer.kind() != cfg.quantizer.kind || state.quantizer.sub_sizes() != cfg.quantizer.sizes {
            return Err(Error::InvalidConfig(format!(
                "checkpoint quantizer {} {:?} does not match config {} {:?}",
                state.quantizer.kind(),
                state.quantizer.sub_sizes(),
                cfg.quantizer.kind,
                cfg.quantizer.sizes
            )));
        }
        let get = |name: &str| find(tensors, name).cloned();
        let restore = |prefix: &str, names: &[String], params: &[Tensor]| -> Result<AdamWState> {
            let mut s = AdamWState::new(params);
            s.step = get(&format!("{prefix}/step"))?.item() as u64;
            for (i, n) in names.iter().enumerate() {
                s.m[i] = get(&format!("{prefix}/m/{n}"))?;
                s.v[i] = get(&format!("{prefix}/v/{n}"))?;
                if s.m[i].shape() != params[i].shape() || s.v[i].shape() != params[i].shape() {
                    return Err(Error::shape("checkpoint", format!("optimizer state for {n}")));
                }
            }
            Ok(s)
        };
        let opt = restore("optim", state.model.param_names(), state.model.params())?;
        let book_opt = if !cfg.quantizer.ema && !state.quantizer.books().is_empty() {
            let params = book_params(&state.quantizer);
            let names: Vec<String> = (0..params.len()).map(|j| j.to_string()).collect();
            Some(restore("book_optim", &names, &params)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            model: state.model,
            quantizer: state.quantizer,
            opt,
            book_opt,
            step: state.step,
        })
    }
}

/// Per-sequence encoder/quantizer pass used by evaluation and token export.
pub struct SequenceCodes {
    /// Padding only ever fills the last token, which still holds a real frame,
    /// so every token here is valid.
    pub result: Option<QuantizeResult>,
    pub tokens: usize,
    pub sq_err: f64,
    pub valid_values: usize,
}

pub fn encode_sequence(model: &Model, quantizer: &Quantizer, seq: &Tensor) -> Result<SequenceCodes> {
    let cfg = model.config();
    let (_, f) = seq.require_matrix("evaluate")?;
    if f != cfg.feature_dim {
        return Err(Error::shape(
            "evaluate",
            format!("data has {f} features, model expects {}", cfg.feature_dim),
        ));
    }
    if seq.rows() == 0 {
        return Ok(SequenceCodes {
            result: None,
            tokens: 0,
            sq_err: 0.0,
            valid_values: 0,
        });
    }
    let (padded, fmask) = pad_frames(seq, cfg.downsample)?;
    let tmask = token_mask(&fmask, cfg.downsample);
    let mut g = Graph::new();
    let bm = model.bind(&mut g, false);
    let x = g.constant(padded);
    let out = bm.forward(&mut g, x, quantizer, None, false)?;
    let x_hat = g.value(out.x_hat);
    let mut sq_err = 0.0;
    for t in 0..seq.rows() {
        for (a, b) in x_hat.row(t).iter().zip(seq.row(t)) {
            sq_err += (a - b) * (a - b);
        }
    }
    let tokens = tmask.iter().filter(|&&m| m).count();
    Ok(SequenceCodes {
        result: out.quant.result,
        tokens,
        sq_err,
        valid_values: seq.rows() * f,
    })
}

/// Usage, perplexity and reconstruction RMSE over every frame of `seqs`.
pub fn evaluate(model: &Model, quantizer: &Quantizer, seqs: &[Tensor]) -> Result<MetricsReport> {
    let mut stream = Vec::new();
    let subs = quantizer.sub_sizes();
    let mut sub_streams: Vec<Vec<u64>> = vec![Vec::new(); subs.len()];
    let (mut sq_err, mut count, mut tokens) = (0.0, 0usize, 0usize);
    for seq in seqs {
        let codes = encode_sequence(model, quantizer, seq)?;
        sq_err += codes.sq_err;
        count += codes.valid_values;
        tokens += codes.tokens;
        if let Some(r) = codes.result {
            stream.extend_from_slice(&r.composed_index);
            for (b, s) in sub_streams.iter_mut().enumerate() {
                s.extend(r.sub_stream(b));
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidConfig("evaluation set has no frames".into()));
    }
    let rmse = (sq_err / count as f64).sqrt();
    let Some(n) = quantizer.composed_size() else {
        return Ok(MetricsReport {
            usage: None,
            perplexity: None,
            rmse,
            tokens,
            per_subbook_usage: None,
            per_subbook_perplexity: None,
        });
    };
    let multi = quantizer.kind() != QuantizerKind::Vq;
    let per_usage = multi
        .then(|| sub_streams.iter().zip(&subs).map(|(s, &n)| codebook_usage(s, n as u64)).collect())
        .transpose()?;
    let per_ppl = multi
        .then(|| sub_streams.iter().zip(&subs).map(|(s, &n)| codebook_perplexity(s, n as u64)).collect())
        .transpose()?;
    Ok(MetricsReport {
        usage: Some(codebook_usage(&stream, n)?),
        perplexity: Some(codebook_perplexity(&stream, n)?),
        rmse,
        tokens,
        per_subbook_usage: per_usage,
        per_subbook_perplexity: per_ppl,
    })
}

fn find<'a>(tensors: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks tensor {name}")))
}

fn kind_code(k: QuantizerKind) -> f64 {
    match k {
        QuantizerKind::None => 0.0,
        QuantizerKind::Vq => 1.0,
        QuantizerKind::Pq => 2.0,
        QuantizerKind::Rvq => 3.0,
        QuantizerKind::Fsq => 4.0,
    }
}

fn kind_from_code(c: f64) -> Result<QuantizerKind> {
    Ok(match c as i64 {
        0 => QuantizerKind::None,
        1 => QuantizerKind::Vq,
        2 => QuantizerKind::Pq,
        3 => QuantizerKind::Rvq,
        4 => QuantizerKind::Fsq,
        other => return Err(Error::InvalidConfig(format!("unknown quantizer code {other}"))),
    })
}

/// Model parameters, quantizer state and step counter as named tensors.
pub fn state_tensors(model: &Model, quantizer: &Quantizer, step: u64) -> Vec<(String, Tensor)> {
    let m = model.config();
    let mut out = vec![
        ("meta/step".to_string(), Tensor::vector(vec![step as f64])),
        (
            "meta/model".to_string(),
            Tensor::vector(
                [
                    m.feature_dim,
                    m.hidden_dim,
                    m.embed_dim,
                    m.downsample,
                    m.n_residual_units,
                    m.bottleneck_dim.unwrap_or(0),
                    m.n_subspaces,
                ]
                .iter()
                .map(|&v| v as f64)
                .collect(),
            ),
        ),
        (
            "meta/quantizer".to_string(),
            Tensor::vector(vec![
                kind_code(quantizer.kind()),
                quantizer.books().first().map_or(0.0, Codebook::decay),
            ]),
        ),
        (
            "quant/sizes".to_string(),
            Tensor::vector(quantizer.sub_sizes().iter().map(|&v| v as f64).collect()),
        ),
    ];
    for (name, p) in model.param_names().iter().zip(model.params()) {
        out.push((format!("model/{name}"), p.clone()));
    }
    for (j, b) in quantizer.books().iter().enumerate() {
        out.push((format!("quant/{j}/codewords"), b.codewords_tensor()));
        out.push((format!("quant/{j}/ema_count"), Tensor::vector(b.ema_count().to_vec())));
        out.push((
            format!("quant/{j}/ema_sum"),
            Tensor::matrix(b.size(), b.dim(), b.ema_sum().to_vec()).expect("sum shape"),
        ));
    }
    out
}

/// Model and quantizer restored from a checkpoint.
#[derive(Clone, Debug)]
pub struct CheckpointState {
    pub model: Model,
    pub quantizer: Quantizer,
    pub step: u64,
}

/// Rebuilds model and quantizer. `decay` overrides the stored EMA decay,
/// which is only kept at float32 precision.
pub fn load_state(tensors: &[(String, Tensor)], decay: Option<f64>) -> Result<CheckpointState> {
    let m = find(tensors, "meta/model")?.data();
    if m.len() != 7 {
        return Err(Error::InvalidConfig("meta/model must have 7 entries".into()));
    }
    let u = |i: usize| m[i] as usize;
    let cfg = ModelConfig {
        feature_dim: u(0),
        hidden_dim: u(1),
        embed_dim: u(2),
        downsample: u(3),
        n_residual_units: u(4),
        bottleneck_dim: (u(5) > 0).then(|| u(5)),
        n_subspaces: u(6),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(cfg, &mut rng)?;
    let named: Vec<(String, Tensor)> = tensors
        .iter()
        .filter_map(|(n, t)| n.strip_prefix("model/").map(|s| (s.to_string(), t.clone())))
        .collect();
    model.load_params(&named)?;

    let q = find(tensors, "meta/quantizer")?.data();
    let kind = kind_from_code(*q.first().unwrap_or(&-1.0))?;
    let decay = decay.unwrap_or_else(|| q.get(1).copied().unwrap_or(0.9));
    let sizes: Vec<usize> = find(tensors, "quant/sizes")?.data().iter().map(|&v| v as usize).collect();
    let load_books = || -> Result<Vec<Codebook>> {
        (0..sizes.len())
            .map(|j| {
                let cw = find(tensors, &format!("quant/{j}/codewords"))?.clone();
                let count = find(tensors, &format!("quant/{j}/ema_count"))?.data().to_vec();
                let sum = find(tensors, &format!("quant/{j}/ema_sum"))?.data().to_vec();
                let book = Codebook::with_state(cw, count, sum, decay)?;
                if book.size() != sizes[j] {
                    return Err(Error::shape("checkpoint", format!("codebook {j} size")));
                }
                Ok(book)
            })
            .collect()
    };
    let code_dim = model.config().code_dim();
    let quantizer = match kind {
        QuantizerKind::None => Quantizer::Identity,
        QuantizerKind::Fsq => Quantizer::Fsq(sizes.clone()),
        QuantizerKind::Vq => {
            let mut books = load_books()?;
            if books.len() != 1 {
                return Err(Error::InvalidConfig("vq checkpoint must hold one codebook".into()));
            }
            Quantizer::Vq(books.remove(0))
        }
        QuantizerKind::Pq => {
            let books = load_books()?;
            let cfg = PQConfig::new(sizes.clone(), books.iter().map(Codebook::dim).collect())?;
            Quantizer::Pq { books, cfg }
        }
        QuantizerKind::Rvq => Quantizer::Rvq(load_books()?),
    };
    let width = match &quantizer {
        Quantizer::Identity => code_dim,
        Quantizer::Fsq(l) => l.len(),
        Quantizer::Pq { cfg, .. } => cfg.dim(),
        Quantizer::Vq(b) => b.dim(),
        Quantizer::Rvq(books) => books.iter().map(Codebook::dim).max().unwrap_or(0),
    };
    if width != code_dim {
        return Err(Error::shape(
            "checkpoint",
            format!("quantizer width {width} does not match model code width {code_dim}"),
        ));
    }
    Ok(CheckpointState {
        model,
        quantizer,
        step: find(tensors, "meta/step")?.item() as u64,
    })
}
