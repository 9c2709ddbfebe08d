use super::{compose_index, composed_size, mean_sq_diff, Codebook, QuantizeResult};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layout of a product quantizer: one sub-codebook per contiguous chunk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PQConfig {
    pub sub_sizes: Vec<usize>,
    pub sub_dims: Vec<usize>,
    /// Per-subspace projection width applied by the encoder, if any.
    pub bottleneck_dim: Option<usize>,
}

/// Splits `dim` into `parts` widths differing by at most one, larger first.
pub fn split_dims(dim: usize, parts: usize) -> Vec<usize> {
    let base = dim / parts;
    let extra = dim % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

impl PQConfig {
    pub fn new(sub_sizes: Vec<usize>, sub_dims: Vec<usize>) -> Result<Self> {
        let cfg = Self {
            sub_sizes,
            sub_dims,
            bottleneck_dim: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn near_equal(sub_sizes: Vec<usize>, dim: usize) -> Result<Self> {
        if sub_sizes.is_empty() || dim < sub_sizes.len() {
            return Err(Error::InvalidConfig(format!(
                "cannot split {dim} dims across {} sub-codebooks",
                sub_sizes.len()
            )));
        }
        let dims = split_dims(dim, sub_sizes.len());
        Self::new(sub_sizes, dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sub_sizes.is_empty() {
            return Err(Error::InvalidConfig("PQ needs at least one sub-codebook".into()));
        }
        if self.sub_sizes.len() != self.sub_dims.len() {
            return Err(Error::InvalidConfig(format!(
                "{} sub-codebook sizes but {} sub-dims",
                self.sub_sizes.len(),
                self.sub_dims.len()
            )));
        }
        if let Some(&n) = self.sub_sizes.iter().find(|&&n| n < 2) {
            return Err(Error::InvalidConfig(format!("sub-codebook size {n} < 2")));
        }
        if self.sub_dims.contains(&0) {
            return Err(Error::InvalidConfig("sub-dim of zero".into()));
        }
        composed_size(&self.sub_sizes)?;
        Ok(())
    }

    pub fn num_books(&self) -> usize {
        self.sub_sizes.len()
    }

    pub fn dim(&self) -> usize {
        self.sub_dims.iter().sum()
    }

    pub fn total_size(&self) -> u64 {
        composed_size(&self.sub_sizes).expect("validated")
    }

    /// Column offset of each chunk.
    pub fn offsets(&self) -> Vec<usize> {
        self.sub_dims
            .iter()
            .scan(0, |acc, &d| {
                let o = *acc;
                *acc += d;
                Some(o)
            })
            .collect()
    }

    pub(crate) fn check_books(&self, books: &[Codebook]) -> Result<()> {
        if books.len() != self.sub_sizes.len() {
            return Err(Error::InvalidConfig(format!(
                "{} codebooks for {} subspaces",
                books.len(),
                self.sub_sizes.len()
            )));
        }
        for (i, b) in books.iter().enumerate() {
            if b.size() != self.sub_sizes[i] || b.dim() != self.sub_dims[i] {
                return Err(Error::InvalidConfig(format!(
                    "codebook {i} is {}x{}, config expects {}x{}",
                    b.size(),
                    b.dim(),
                    self.sub_sizes[i],
                    self.sub_dims[i]
                )));
            }
        }
        Ok(())
    }
}

/// Quantizes each chunk of every frame with its own codebook and concatenates
/// the selected sub-codewords.
pub fn pq_quantize(e: &Tensor, books: &[Codebook], cfg: &PQConfig) -> Result<QuantizeResult> {
    cfg.validate()?;
    cfg.check_books(books)?;
    let (frames, dim) = e.require_matrix("pq_quantize")?;
    if dim != cfg.dim() {
        return Err(Error::shape(
            "pq_quantize",
            format!("input width {dim}, sub-dims sum to {}", cfg.dim()),
        ));
    }
    let offsets = cfg.offsets();
    let mut sub_indices = Vec::with_capacity(frames);
    let mut composed = Vec::with_capacity(frames);
    let mut quantized = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        let row = e.row(t);
        let mut idx = Vec::with_capacity(books.len());
        for ((book, &off), &d) in books.iter().zip(&offsets).zip(&cfg.sub_dims) {
            let (i, z) = book.lookup(&row[off..off + d])?;
            quantized.extend_from_slice(z);
            idx.push(i);
        }
        composed.push(compose_index(&idx, &cfg.sub_sizes)?);
        sub_indices.push(idx);
    }
    let quantized = Tensor::matrix(frames, dim, quantized)?;
    let term = mean_sq_diff(e, &quantized);
    Ok(QuantizeResult {
        sub_indices,
        composed_index: composed,
        quantized,
        commit_term: term,
        codebook_term: term,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary() -> Codebook {
        Codebook::from_rows(&[vec![0.0], vec![1.0]], 0.9).unwrap()
    }

    #[test]
    fn two_binary_books() {
        let cfg = PQConfig::new(vec![2, 2], vec![1, 1]).unwrap();
        let e = Tensor::from_rows(&[vec![0.9, 0.1]]).unwrap();
        let r = pq_quantize(&e, &[binary(), binary()], &cfg).unwrap();
        assert_eq!(r.sub_indices, vec![vec![1, 0]]);
        assert_eq!(r.quantized.data(), &[1.0, 0.0]);
        assert_eq!(r.composed_index, vec![1]);
        assert!((r.commit_term - 0.01).abs() < 1e-12);
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let cfg = PQConfig::new(vec![2, 2], vec![1, 1]).unwrap();
        let e = Tensor::from_rows(&[vec![0.9, 0.1]]).unwrap();
        assert!(pq_quantize(&e, &[binary()], &cfg).is_err());
        let wide = Tensor::from_rows(&[vec![0.9, 0.1, 0.0]]).unwrap();
        assert!(pq_quantize(&wide, &[binary(), binary()], &cfg).is_err());
        assert!(PQConfig::new(vec![1, 2], vec![1, 1]).is_err());
        assert!(PQConfig::new(vec![2], vec![1, 1]).is_err());
    }

    #[test]
    fn near_equal_split() {
        assert_eq!(split_dims(10, 3), vec![4, 3, 3]);
        assert_eq!(split_dims(24, 3), vec![8, 8, 8]);
        let cfg = PQConfig::near_equal(vec![16, 16, 16], 10).unwrap();
        assert_eq!(cfg.offsets(), vec![0, 4, 7]);
        assert_eq!(cfg.total_size(), 4096);
    }
}
