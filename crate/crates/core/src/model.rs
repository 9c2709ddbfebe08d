//! Frame-stacking MLP autoencoder.
//!
//! The encoder concatenates every `downsample` consecutive frames into one
//! token, lifts it to `hidden_dim`, runs residual units, projects to
//! `embed_dim` and optionally bottlenecks each quantizer subspace. The
//! decoder mirrors it and unstacks back to frames. Both directions are
//! per-token, so sequences can be concatenated freely into one batch matrix.

use rand::Rng;

use crate::error::{Error, Result};
use crate::quantize::{split_dims, Applied, Quantizer};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    /// Encoder output width before any bottleneck.
    pub embed_dim: usize,
    /// Frames per token.
    pub downsample: usize,
    pub n_residual_units: usize,
    /// Per-subspace projection width.
    pub bottleneck_dim: Option<usize>,
    /// Number of quantizer subspaces the bottleneck is applied to.
    pub n_subspaces: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            hidden_dim: 32,
            embed_dim: 24,
            downsample: 4,
            n_residual_units: 1,
            bottleneck_dim: None,
            n_subspaces: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("downsample", self.downsample),
            ("n_subspaces", self.n_subspaces),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("model {name} must be >= 1")));
        }
        if self.bottleneck_dim == Some(0) {
            return Err(Error::InvalidConfig("bottleneck_dim must be >= 1".into()));
        }
        if self.n_subspaces > self.embed_dim {
            return Err(Error::InvalidConfig(format!(
                "cannot split embed_dim {} into {} subspaces",
                self.embed_dim, self.n_subspaces
            )));
        }
        Ok(())
    }

    /// Width of the quantizer input.
    pub fn code_dim(&self) -> usize {
        match self.bottleneck_dim {
            Some(b) => b * self.n_subspaces,
            None => self.embed_dim,
        }
    }

    /// Bottleneck width used for `auto`: a quarter of each subspace.
    pub fn default_bottleneck_dim(&self) -> usize {
        (self.embed_dim / self.n_subspaces.max(1) / 4).max(1)
    }

    pub fn token_width(&self) -> usize {
        self.feature_dim * self.downsample
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct ResidualUnit {
    proj: Linear,
    inner_a: Linear,
    inner_b: Linear,
}

#[derive(Clone, Debug)]
struct Stack {
    input: Linear,
    units: Vec<ResidualUnit>,
    output: Linear,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Stack,
    bottleneck: Vec<Linear>,
    decoder: Stack,
}

struct Builder<'r, R: Rng + ?Sized> {
    names: Vec<String>,
    params: Vec<Tensor>,
    rng: &'r mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.names.push(format!("{name}.w"));
        self.params
            .push(Tensor::matrix(fan_in, fan_out, w).expect("weight shape"));
        self.names.push(format!("{name}.b"));
        self.params.push(Tensor::zeros(&[fan_out]));
        Linear {
            w: self.params.len() - 2,
            b: self.params.len() - 1,
        }
    }

    fn stack(&mut self, prefix: &str, fan_in: usize, hidden: usize, fan_out: usize, units: usize) -> Stack {
        let input = self.linear(&format!("{prefix}.in"), fan_in, hidden);
        let units = (0..units)
            .map(|u| ResidualUnit {
                proj: self.linear(&format!("{prefix}.res{u}.proj"), hidden, hidden),
                inner_a: self.linear(&format!("{prefix}.res{u}.a"), hidden, hidden),
                inner_b: self.linear(&format!("{prefix}.res{u}.b"), hidden, hidden),
            })
            .collect();
        let output = self.linear(&format!("{prefix}.out"), hidden, fan_out);
        Stack {
            input,
            units,
            output,
        }
    }
}

impl Model {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            rng,
        };
        let h = cfg.hidden_dim;
        let encoder = b.stack("enc", cfg.token_width(), h, cfg.embed_dim, cfg.n_residual_units);
        let bottleneck = match cfg.bottleneck_dim {
            Some(bd) => split_dims(cfg.embed_dim, cfg.n_subspaces)
                .into_iter()
                .enumerate()
                .map(|(i, d)| b.linear(&format!("bottleneck{i}"), d, bd))
                .collect(),
            None => Vec::new(),
        };
        let decoder = b.stack("dec", cfg.code_dim(), h, cfg.token_width(), cfg.n_residual_units);
        Ok(Self {
            cfg,
            names: b.names,
            params: b.params,
            layout: Layout {
                encoder,
                bottleneck,
                decoder,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces parameters by name; every parameter must be supplied with its exact shape.
    pub fn load_params(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.params.iter_mut()) {
            let (_, t) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!("{name}: {:?} vs {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Inserts every parameter as a graph leaf.
    pub fn bind<'m>(&'m self, g: &mut Graph, trainable: bool) -> BoundModel<'m> {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect();
        BoundModel { model: self, vars }
    }
}

/// Right-pads `x: [T, F]` with copies of its last frame up to a multiple of
/// `k` frames. Returns the padded frames and a per-frame validity mask.
pub fn pad_frames(x: &Tensor, k: usize) -> Result<(Tensor, Vec<bool>)> {
    let (t, f) = x.require_matrix("pad_frames")?;
    let padded_len = t.div_ceil(k) * k;
    let mut data = x.data().to_vec();
    if t == 0 && padded_len > 0 {
        return Err(Error::shape("pad_frames", "cannot pad an empty sequence"));
    }
    for _ in t..padded_len {
        data.extend_from_slice(x.row(t - 1));
    }
    let mut mask = vec![true; t];
    mask.resize(padded_len, false);
    Ok((Tensor::matrix(padded_len, f, data)?, mask))
}

/// A token is valid when at least one of its frames is.
pub fn token_mask(frame_mask: &[bool], k: usize) -> Vec<bool> {
    frame_mask.chunks(k).map(|c| c.iter().any(|&m| m)).collect()
}

/// Outputs of a dual-decoding forward pass.
#[derive(Clone, Debug)]
pub struct DualOutput {
    pub e: Var,
    pub quant: Applied,
    pub x_hat: Var,
    /// Reconstruction from the unquantized encoding, if requested.
    pub x_tilde: Option<Var>,
}

impl DualOutput {
    pub fn z(&self) -> Var {
        self.quant.z
    }
}

/// Model parameters bound to a graph.
pub struct BoundModel<'m> {
    model: &'m Model,
    vars: Vec<Var>,
}

impl BoundModel<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn linear(&self, g: &mut Graph, l: Linear, x: Var) -> Result<Var> {
        g.affine(x, self.vars[l.w], self.vars[l.b])
    }

    fn stack_body(&self, g: &mut Graph, s: &Stack, x: Var) -> Result<Var> {
        let mut h = self.linear(g, s.input, x)?;
        for u in &s.units {
            let p = self.linear(g, u.proj, h)?;
            let a = g.elu(p);
            let r = self.linear(g, u.inner_a, a)?;
            let r = g.elu(r);
            let r = self.linear(g, u.inner_b, r)?;
            h = g.add(a, r)?;
        }
        let h = g.elu(h);
        self.linear(g, s.output, h)
    }

    /// `X: [T, feature_dim]` with `T` a multiple of `downsample` to `E: [T/downsample, code_dim]`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let cfg = &self.model.cfg;
        let (t, f) = g.value(x).require_matrix("encode")?;
        if f != cfg.feature_dim || t % cfg.downsample != 0 {
            return Err(Error::shape(
                "encode",
                format!(
                    "input [{t},{f}] needs width {} and a frame count divisible by {}",
                    cfg.feature_dim, cfg.downsample
                ),
            ));
        }
        let stacked = g.reshape(x, &[t / cfg.downsample, cfg.token_width()])?;
        let e = self.stack_body(g, &self.model.layout.encoder, stacked)?;
        if self.model.layout.bottleneck.is_empty() {
            return Ok(e);
        }
        let widths = split_dims(cfg.embed_dim, cfg.n_subspaces);
        let mut parts = Vec::with_capacity(widths.len());
        let mut off = 0;
        for (&l, &w) in self.model.layout.bottleneck.iter().zip(&widths) {
            let chunk = g.slice_cols(e, off, w)?;
            parts.push(self.linear(g, l, chunk)?);
            off += w;
        }
        g.concat_cols(&parts)
    }

    /// `Z: [T', code_dim]` to `X_hat: [T' * downsample, feature_dim]`.
    pub fn decode(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let cfg = &self.model.cfg;
        let (t, w) = g.value(z).require_matrix("decode")?;
        if w != cfg.code_dim() {
            return Err(Error::shape(
                "decode",
                format!("code width {w}, model expects {}", cfg.code_dim()),
            ));
        }
        let y = self.stack_body(g, &self.model.layout.decoder, z)?;
        g.reshape(y, &[t * cfg.downsample, cfg.feature_dim])
    }

    /// Encodes, quantizes with a straight-through estimator and decodes `Z`.
    /// When `dual` is set, `E` is also decoded through the same decoder weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        quantizer: &Quantizer,
        book_vars: Option<&[Var]>,
        dual: bool,
    ) -> Result<DualOutput> {
        let e = self.encode(g, x)?;
        let quant = quantizer.apply(g, e, book_vars)?;
        let x_hat = self.decode(g, quant.z)?;
        let x_tilde = if dual { Some(self.decode(g, e)?) } else { None };
        Ok(DualOutput {
            e,
            quant,
            x_hat,
            x_tilde,
        })
    }

    /// [`BoundModel::forward`] with both reconstructions.
    pub fn forward_dual(
        &self,
        g: &mut Graph,
        x: Var,
        quantizer: &Quantizer,
        book_vars: Option<&[Var]>,
    ) -> Result<DualOutput> {
        self.forward(g, x, quantizer, book_vars, true)
    }
}
