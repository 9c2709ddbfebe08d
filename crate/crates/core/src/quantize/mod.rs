//! Vector, product, residual and finite-scalar quantizers with EMA codebooks.
//!
//! Every quantizer produces a [`QuantizeResult`]; the composed index of a
//! multi-codebook quantizer uses the mixed-radix layout in [`compose`].

mod codebook;
mod compose;
mod fsq;
mod metrics;
mod pq;
mod rvq;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use codebook::{ema_update, vq_lookup, Codebook, EMA_EPS};
pub use compose::{
    compose_codebook, compose_index, composed_size, decompose_index, DEFAULT_COMPOSE_CAP,
};
pub use fsq::{fsq_grid, fsq_level_value, fsq_quantize, fsq_scalar};
pub use metrics::{codebook_perplexity, codebook_usage, MetricsReport};
pub use pq::{pq_quantize, split_dims, PQConfig};
pub use rvq::rvq_quantize;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult {
    /// Per frame, one index per sub-codebook (or stage, or scalar dimension).
    pub sub_indices: Vec<Vec<usize>>,
    pub composed_index: Vec<u64>,
    pub quantized: Tensor,
    /// Mean of `(e - sg(z))^2`.
    pub commit_term: f64,
    /// Mean of `(sg(e) - z)^2`; same value as `commit_term`, different gradient path.
    pub codebook_term: f64,
}

impl QuantizeResult {
    /// Index stream of sub-codebook `b`.
    pub fn sub_stream(&self, b: usize) -> Vec<u64> {
        self.sub_indices.iter().map(|ix| ix[b] as u64).collect()
    }
}

pub(crate) fn mean_sq_diff(a: &Tensor, b: &Tensor) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    s / a.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantizerKind {
    /// Pass-through; turns the model into a plain autoencoder.
    None,
    Vq,
    Pq,
    Rvq,
    Fsq,
}

impl QuantizerKind {
    /// EMA decay used when a config leaves it on `auto`: a single large
    /// codebook gets the slower average, multi-codebook quantizers the faster one.
    pub fn default_ema_decay(self) -> f64 {
        match self {
            QuantizerKind::Vq => 0.999,
            _ => 0.9,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QuantizerKind::None => "none",
            QuantizerKind::Vq => "vq",
            QuantizerKind::Pq => "pq",
            QuantizerKind::Rvq => "rvq",
            QuantizerKind::Fsq => "fsq",
        }
    }
}

impl fmt::Display for QuantizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuantizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "none" => QuantizerKind::None,
            "vq" => QuantizerKind::Vq,
            "pq" => QuantizerKind::Pq,
            "rvq" => QuantizerKind::Rvq,
            "fsq" => QuantizerKind::Fsq,
            other => return Err(format!("unknown quantizer kind `{other}`")),
        })
    }
}

/// Everything needed to build a quantizer for a given code width.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerConfig {
    pub kind: QuantizerKind,
    /// Codebook size (vq), sub-codebook sizes (pq), stage sizes (rvq) or level counts (fsq).
    pub sizes: Vec<usize>,
    /// Explicit PQ sub-dims; near-equal split when `None`.
    pub dims: Option<Vec<usize>>,
    pub ema: bool,
    pub ema_decay: f64,
    /// Random-restart of dead codewords (vq only).
    pub dead_restart: bool,
    pub compose_cap: u64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            kind: QuantizerKind::Pq,
            sizes: vec![16, 16],
            dims: None,
            ema: true,
            ema_decay: 0.9,
            dead_restart: false,
            compose_cap: DEFAULT_COMPOSE_CAP,
        }
    }
}

impl QuantizerConfig {
    /// Checks the config against the width of the encoder output.
    pub fn validate(&self, code_dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay must lie in (0,1), got {}", self.ema_decay));
        }
        match self.kind {
            QuantizerKind::None => Ok(()),
            QuantizerKind::Vq => {
                if self.sizes.len() != 1 || self.sizes[0] < 2 {
                    return bad(format!("vq needs one codebook size >= 2, got {:?}", self.sizes));
                }
                Ok(())
            }
            QuantizerKind::Pq => self.pq_config(code_dim).map(|_| ()),
            QuantizerKind::Rvq => {
                if self.sizes.is_empty() || self.sizes.iter().any(|&n| n < 2) {
                    return bad(format!("rvq stage sizes must be >= 2, got {:?}", self.sizes));
                }
                composed_size(&self.sizes).map(|_| ())
            }
            QuantizerKind::Fsq => {
                fsq::check_levels(&self.sizes)?;
                if self.sizes.len() != code_dim {
                    return bad(format!(
                        "fsq has {} level counts but the code width is {code_dim}",
                        self.sizes.len()
                    ));
                }
                composed_size(&self.sizes).map(|_| ())
            }
        }
    }

    pub fn pq_config(&self, code_dim: usize) -> Result<PQConfig> {
        let cfg = match &self.dims {
            Some(d) => PQConfig::new(self.sizes.clone(), d.clone())?,
            None => PQConfig::near_equal(self.sizes.clone(), code_dim)?,
        };
        if cfg.dim() != code_dim {
            return Err(Error::InvalidConfig(format!(
                "pq sub-dims {:?} sum to {}, code width is {code_dim}",
                cfg.sub_dims,
                cfg.dim()
            )));
        }
        Ok(cfg)
    }

    /// Total number of addressable codes, `None` for the pass-through.
    pub fn composed_size(&self) -> Option<u64> {
        match self.kind {
            QuantizerKind::None => None,
            _ => composed_size(&self.sizes).ok(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Quantizer {
    Identity,
    Vq(Codebook),
    Pq { books: Vec<Codebook>, cfg: PQConfig },
    Rvq(Vec<Codebook>),
    Fsq(Vec<usize>),
}

/// Nodes produced by [`Quantizer::apply`].
#[derive(Clone, Debug)]
pub struct Applied {
    /// Straight-through output fed to the decoder.
    pub z: Var,
    /// What the quantizer approximates: `E`, or `tanh(E)` for FSQ.
    pub target: Var,
    /// Selected codewords; differentiable w.r.t. the codebooks when they are graph params.
    pub codes: Option<Var>,
    pub result: Option<QuantizeResult>,
}

impl Quantizer {
    /// Builds a quantizer, seeding codebooks from `samples` (encoder outputs
    /// of the first training batch).
    pub fn init<R: Rng + ?Sized>(
        cfg: &QuantizerConfig,
        samples: &Tensor,
        rng: &mut R,
    ) -> Result<Self> {
        let (_, code_dim) = samples.require_matrix("quantizer init")?;
        cfg.validate(code_dim)?;
        let decay = cfg.ema_decay;
        Ok(match cfg.kind {
            QuantizerKind::None => Quantizer::Identity,
            QuantizerKind::Fsq => Quantizer::Fsq(cfg.sizes.clone()),
            QuantizerKind::Vq => {
                Quantizer::Vq(Codebook::seed_from_samples(samples, cfg.sizes[0], decay, rng)?)
            }
            QuantizerKind::Pq => {
                let pq = cfg.pq_config(code_dim)?;
                let mut books = Vec::with_capacity(pq.num_books());
                for ((&n, &off), &d) in pq.sub_sizes.iter().zip(&pq.offsets()).zip(&pq.sub_dims) {
                    let chunk = column_block(samples, off, d);
                    books.push(Codebook::seed_from_samples(&chunk, n, decay, rng)?);
                }
                Quantizer::Pq { books, cfg: pq }
            }
            QuantizerKind::Rvq => {
                let mut books: Vec<Codebook> = Vec::with_capacity(cfg.sizes.len());
                let mut residual = samples.clone();
                for &n in &cfg.sizes {
                    let book = Codebook::seed_from_samples(&residual, n, decay, rng)?;
                    for t in 0..residual.rows() {
                        let i = book.nearest(residual.row(t));
                        let c = book.codeword(i).to_vec();
                        let d = residual.cols();
                        for (r, cv) in residual.data_mut()[t * d..(t + 1) * d].iter_mut().zip(&c) {
                            *r -= cv;
                        }
                    }
                    books.push(book);
                }
                Quantizer::Rvq(books)
            }
        })
    }

    pub fn kind(&self) -> QuantizerKind {
        match self {
            Quantizer::Identity => QuantizerKind::None,
            Quantizer::Vq(_) => QuantizerKind::Vq,
            Quantizer::Pq { .. } => QuantizerKind::Pq,
            Quantizer::Rvq(_) => QuantizerKind::Rvq,
            Quantizer::Fsq(_) => QuantizerKind::Fsq,
        }
    }

    pub fn books(&self) -> &[Codebook] {
        match self {
            Quantizer::Vq(b) => std::slice::from_ref(b),
            Quantizer::Pq { books, .. } | Quantizer::Rvq(books) => books,
            Quantizer::Identity | Quantizer::Fsq(_) => &[],
        }
    }

    pub fn books_mut(&mut self) -> &mut [Codebook] {
        match self {
            Quantizer::Vq(b) => std::slice::from_mut(b),
            Quantizer::Pq { books, .. } | Quantizer::Rvq(books) => books,
            Quantizer::Identity | Quantizer::Fsq(_) => &mut [],
        }
    }

    /// Size of each sub-codebook, stage or scalar grid.
    pub fn sub_sizes(&self) -> Vec<usize> {
        match self {
            Quantizer::Fsq(levels) => levels.clone(),
            _ => self.books().iter().map(Codebook::size).collect(),
        }
    }

    pub fn composed_size(&self) -> Option<u64> {
        match self {
            Quantizer::Identity => None,
            _ => composed_size(&self.sub_sizes()).ok(),
        }
    }

    pub fn quantize(&self, e: &Tensor) -> Result<Option<QuantizeResult>> {
        Ok(match self {
            Quantizer::Identity => None,
            Quantizer::Vq(book) => {
                let cfg = PQConfig::new(vec![book.size()], vec![book.dim()])?;
                Some(pq_quantize(e, std::slice::from_ref(book), &cfg)?)
            }
            Quantizer::Pq { books, cfg } => Some(pq_quantize(e, books, cfg)?),
            Quantizer::Rvq(books) => Some(rvq_quantize(e, books)?),
            Quantizer::Fsq(levels) => Some(fsq_quantize(e, levels)?),
        })
    }

    /// Quantizes graph node `e` and wires the straight-through estimator.
    ///
    /// With `book_vars` (one graph param per codebook) the selected codewords
    /// are gathered from those params so the codebook loss term can train
    /// them; otherwise they enter the graph as constants.
    pub fn apply(&self, g: &mut Graph, e: Var, book_vars: Option<&[Var]>) -> Result<Applied> {
        if let Quantizer::Identity = self {
            return Ok(Applied {
                z: e,
                target: e,
                codes: None,
                result: None,
            });
        }
        let result = self.quantize(g.value(e))?.expect("non-identity");
        let target = match self {
            Quantizer::Fsq(_) => g.tanh(e),
            _ => e,
        };
        let codes = match (self, book_vars) {
            (Quantizer::Vq(_) | Quantizer::Pq { .. }, Some(vars)) => {
                let mut parts = Vec::with_capacity(vars.len());
                for (b, &v) in vars.iter().enumerate() {
                    parts.push(g.gather_rows(v, &column(&result.sub_indices, b))?);
                }
                g.concat_cols(&parts)?
            }
            (Quantizer::Rvq(_), Some(vars)) => {
                let mut acc = g.gather_rows(vars[0], &column(&result.sub_indices, 0))?;
                for (b, &v) in vars.iter().enumerate().skip(1) {
                    let part = g.gather_rows(v, &column(&result.sub_indices, b))?;
                    acc = g.add(acc, part)?;
                }
                acc
            }
            _ => g.constant(result.quantized.clone()),
        };
        let z = g.straight_through(target, codes)?;
        Ok(Applied {
            z,
            target,
            codes: Some(codes),
            result: Some(result),
        })
    }

    /// EMA step on every codebook using the rows of `e` whose mask is set.
    /// `result` must come from quantizing `e` with the current codebooks.
    pub fn ema_update(&mut self, e: &Tensor, result: &QuantizeResult, mask: &[bool]) -> Result<()> {
        let rows: Vec<usize> = (0..e.rows()).filter(|&t| mask[t]).collect();
        match self {
            Quantizer::Identity | Quantizer::Fsq(_) => Ok(()),
            Quantizer::Vq(book) => {
                book.ema_update(rows.iter().map(|&t| (result.sub_indices[t][0], e.row(t))))
            }
            Quantizer::Pq { books, cfg } => {
                let offsets = cfg.offsets();
                for (b, book) in books.iter_mut().enumerate() {
                    let (off, d) = (offsets[b], cfg.sub_dims[b]);
                    book.ema_update(
                        rows.iter()
                            .map(|&t| (result.sub_indices[t][b], &e.row(t)[off..off + d])),
                    )?;
                }
                Ok(())
            }
            Quantizer::Rvq(books) => {
                let (_, inputs) = rvq::rvq_with_residuals(e, books)?;
                let d = e.cols();
                for (j, book) in books.iter_mut().enumerate() {
                    let stage = &inputs[j];
                    book.ema_update(
                        rows.iter()
                            .map(|&t| (result.sub_indices[t][j], &stage[t * d..(t + 1) * d])),
                    )?;
                }
                Ok(())
            }
        }
    }

    /// Random restart of dead VQ codewords. A codeword is dead when its
    /// smoothed count drops below a tenth of the uniform-usage expectation.
    pub fn restart_dead<R: Rng + ?Sized>(
        &mut self,
        e: &Tensor,
        mask: &[bool],
        rng: &mut R,
    ) -> Result<usize> {
        let Quantizer::Vq(book) = self else {
            return Ok(0);
        };
        let rows: Vec<f64> = (0..e.rows())
            .filter(|&t| mask[t])
            .flat_map(|t| e.row(t).iter().copied())
            .collect();
        let n = rows.len() / e.cols().max(1);
        let samples = Tensor::matrix(n, e.cols(), rows)?;
        let threshold = 0.1 * n as f64 / book.size() as f64;
        book.restart_dead(threshold, &samples, rng)
    }
}

fn column(sub_indices: &[Vec<usize>], b: usize) -> Vec<usize> {
    sub_indices.iter().map(|ix| ix[b]).collect()
}

fn column_block(t: &Tensor, off: usize, d: usize) -> Tensor {
    let data = (0..t.rows())
        .flat_map(|r| t.row(r)[off..off + d].iter().copied())
        .collect();
    Tensor::matrix(t.rows(), d, data).expect("block shape")
}
