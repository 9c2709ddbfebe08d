use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on smoothed counts when forming codewords from EMA statistics.
pub const EMA_EPS: f64 = 1e-5;

/// `N x d` codewords plus the exponential-moving-average statistics that drive them.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    codewords: Vec<f64>,
    ema_count: Vec<f64>,
    ema_sum: Vec<f64>,
    decay: f64,
}

fn check_decay(decay: f64) -> Result<()> {
    if decay > 0.0 && decay < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "EMA decay must lie in (0,1), got {decay}"
        )))
    }
}

impl Codebook {
    /// Codewords from an `[N, d]` tensor; counts start at 1 so that
    /// `codewords = ema_sum / ema_count` holds from the outset.
    pub fn new(codewords: Tensor, decay: f64) -> Result<Self> {
        let (size, _) = codewords.require_matrix("codebook")?;
        let ema_sum = codewords.data().to_vec();
        Self::with_state(codewords, vec![1.0; size], ema_sum, decay)
    }

    pub fn from_rows(rows: &[Vec<f64>], decay: f64) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?, decay)
    }

    /// Restores a codebook with explicit EMA state (checkpoint loading).
    pub fn with_state(
        codewords: Tensor,
        ema_count: Vec<f64>,
        ema_sum: Vec<f64>,
        decay: f64,
    ) -> Result<Self> {
        let (size, dim) = codewords.require_matrix("codebook")?;
        if size < 2 || dim < 1 {
            return Err(Error::InvalidConfig(format!(
                "codebook needs N >= 2 and d >= 1, got N={size}, d={dim}"
            )));
        }
        check_decay(decay)?;
        if ema_count.len() != size || ema_sum.len() != size * dim {
            return Err(Error::shape(
                "codebook",
                format!(
                    "EMA state sizes {}/{} do not match {size}x{dim}",
                    ema_count.len(),
                    ema_sum.len()
                ),
            ));
        }
        if ema_count.iter().any(|&c| c.is_nan() || c < 0.0) {
            return Err(Error::InvalidConfig("negative EMA count".into()));
        }
        Ok(Self {
            size,
            dim,
            codewords: codewords.into_data(),
            ema_count,
            ema_sum,
            decay,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn codeword(&self, i: usize) -> &[f64] {
        &self.codewords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn codewords(&self) -> &[f64] {
        &self.codewords
    }

    pub fn codewords_tensor(&self) -> Tensor {
        Tensor::matrix(self.size, self.dim, self.codewords.clone()).expect("codebook shape")
    }

    pub fn ema_count(&self) -> &[f64] {
        &self.ema_count
    }

    pub fn ema_sum(&self) -> &[f64] {
        &self.ema_sum
    }

    /// Overwrites codewords directly (gradient-trained mode). EMA statistics
    /// are re-anchored so that the ratio invariant keeps holding.
    pub fn set_codewords(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.codewords.len() {
            return Err(Error::shape(
                "set_codewords",
                format!("{} values for {}x{}", data.len(), self.size, self.dim),
            ));
        }
        self.codewords.copy_from_slice(data);
        for i in 0..self.size {
            let c = self.ema_count[i].max(EMA_EPS);
            for k in 0..self.dim {
                self.ema_sum[i * self.dim + k] = self.codewords[i * self.dim + k] * c;
            }
        }
        Ok(())
    }

    /// Index of the nearest codeword by squared Euclidean distance; ties go to
    /// the lowest index. No validation.
    pub fn nearest(&self, e: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.codewords.chunks_exact(self.dim).enumerate() {
            let d: f64 = e.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn lookup(&self, e: &[f64]) -> Result<(usize, &[f64])> {
        if e.len() != self.dim {
            return Err(Error::shape(
                "vq_lookup",
                format!("vector of dim {} for codebook dim {}", e.len(), self.dim),
            ));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vq_lookup input".into()));
        }
        let i = self.nearest(e);
        Ok((i, self.codeword(i)))
    }

    /// Applies one EMA step from a batch of `(index, vector)` assignments.
    ///
    /// Codewords that receive nothing keep their position: count and sum both
    /// decay by the same factor.
    pub fn ema_update<'a, I>(&mut self, assignments: I) -> Result<()>
    where
        I: IntoIterator<Item = (usize, &'a [f64])>,
    {
        let mut counts = vec![0.0; self.size];
        let mut sums = vec![0.0; self.size * self.dim];
        for (i, v) in assignments {
            if i >= self.size {
                return Err(Error::IndexOutOfRange {
                    index: i as u64,
                    size: self.size as u64,
                });
            }
            if v.len() != self.dim {
                return Err(Error::shape(
                    "ema_update",
                    format!("vector of dim {} for codebook dim {}", v.len(), self.dim),
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("ema_update vector".into()));
            }
            counts[i] += 1.0;
            for (s, &x) in sums[i * self.dim..(i + 1) * self.dim].iter_mut().zip(v) {
                *s += x;
            }
        }
        let g = self.decay;
        let d = self.dim;
        let rows = self.ema_sum.chunks_mut(d).zip(self.codewords.chunks_mut(d)).zip(sums.chunks(d));
        for ((count, &hits), ((ema_sum, codeword), batch_sum)) in self.ema_count.iter_mut().zip(&counts).zip(rows) {
            *count = g * *count + (1.0 - g) * hits;
            let denom = count.max(EMA_EPS);
            for ((e, c), &x) in ema_sum.iter_mut().zip(codeword.iter_mut()).zip(batch_sum) {
                *e = g * *e + (1.0 - g) * x;
                *c = *e / denom;
            }
        }
        Ok(())
    }

    /// k-means++ style seeding (no Lloyd iterations) from `samples: [n, d]`.
    ///
    /// Once every sample is already a codeword, further codewords are copies
    /// of uniformly drawn samples with a small Gaussian jitter (1% of the
    /// sample spread) so that duplicates are not exact ties.
    pub fn seed_from_samples<R: Rng + ?Sized>(
        samples: &Tensor,
        size: usize,
        decay: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (n, dim) = samples.require_matrix("seed_from_samples")?;
        if n == 0 {
            return Err(Error::InvalidConfig("cannot seed a codebook from zero samples".into()));
        }
        if !samples.is_finite() {
            return Err(Error::NonFinite("codebook seed samples".into()));
        }
        let data = samples.data();
        let row = |j: usize| &data[j * dim..(j + 1) * dim];
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        };

        let mut mean = vec![0.0; dim];
        for j in 0..n {
            for (m, &v) in mean.iter_mut().zip(row(j)) {
                *m += v / n as f64;
            }
        }
        let spread = ((0..n).map(|j| dist(row(j), &mean)).sum::<f64>() / (n * dim) as f64).sqrt();
        let jitter = Normal::new(0.0, if spread > 0.0 { 0.01 * spread } else { 1e-3 })
            .expect("positive std");

        let mut codewords = Vec::with_capacity(size * dim);
        let first = rng.random_range(0..n);
        codewords.extend_from_slice(row(first));
        let mut d2: Vec<f64> = (0..n).map(|j| dist(row(j), row(first))).collect();
        for _ in 1..size {
            let total: f64 = d2.iter().sum();
            let start = codewords.len();
            if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (j, &w) in d2.iter().enumerate() {
                    if target < w {
                        pick = j;
                        break;
                    }
                    target -= w;
                }
                codewords.extend_from_slice(row(pick));
            } else {
                let pick = rng.random_range(0..n);
                codewords.extend(row(pick).iter().map(|&v| v + jitter.sample(rng)));
            }
            let added = &codewords[start..];
            for (j, w) in d2.iter_mut().enumerate() {
                *w = w.min(dist(row(j), added));
            }
        }
        Self::new(Tensor::matrix(size, dim, codewords)?, decay)
    }

    /// Re-seeds codewords whose smoothed count fell below `min_count` with
    /// randomly drawn rows of `samples`. Returns how many were replaced.
    pub fn restart_dead<R: Rng + ?Sized>(
        &mut self,
        min_count: f64,
        samples: &Tensor,
        rng: &mut R,
    ) -> Result<usize> {
        let (n, dim) = samples.require_matrix("restart_dead")?;
        if dim != self.dim {
            return Err(Error::shape(
                "restart_dead",
                format!("sample dim {dim} for codebook dim {}", self.dim),
            ));
        }
        if n == 0 {
            return Ok(0);
        }
        let mut replaced = 0;
        for i in 0..self.size {
            if self.ema_count[i] < min_count {
                let j = rng.random_range(0..n);
                let src = samples.row(j);
                self.codewords[i * dim..(i + 1) * dim].copy_from_slice(src);
                self.ema_sum[i * dim..(i + 1) * dim].copy_from_slice(src);
                self.ema_count[i] = 1.0;
                replaced += 1;
            }
        }
        Ok(replaced)
    }
}

/// Nearest codeword of `book` to `e`, returning the index and an owned copy of it.
pub fn vq_lookup(e: &[f64], book: &Codebook) -> Result<(usize, Vec<f64>)> {
    book.lookup(e).map(|(i, z)| (i, z.to_vec()))
}

pub fn ema_update<'a, I>(book: &mut Codebook, assignments: I) -> Result<()>
where
    I: IntoIterator<Item = (usize, &'a [f64])>,
{
    book.ema_update(assignments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn binary() -> Codebook {
        Codebook::from_rows(&[vec![0.0], vec![1.0]], 0.9).unwrap()
    }

    #[test]
    fn lookup_nearest_and_tie() {
        let b = binary();
        assert_eq!(vq_lookup(&[0.4], &b).unwrap(), (0, vec![0.0]));
        assert_eq!(vq_lookup(&[0.5], &b).unwrap(), (0, vec![0.0]));
        assert_eq!(vq_lookup(&[0.6], &b).unwrap(), (1, vec![1.0]));
    }

    #[test]
    fn lookup_errors() {
        let b = binary();
        assert!(matches!(vq_lookup(&[f64::NAN], &b), Err(Error::NonFinite(_))));
        assert!(matches!(vq_lookup(&[0.0, 1.0], &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn construction_invariants() {
        assert!(Codebook::from_rows(&[vec![0.0]], 0.9).is_err());
        assert!(Codebook::from_rows(&[vec![0.0], vec![1.0]], 1.0).is_err());
        assert!(Codebook::from_rows(&[vec![0.0], vec![1.0]], 0.0).is_err());
    }

    #[test]
    fn ema_hand_example() {
        let mut b = Codebook::with_state(
            Tensor::from_rows(&[vec![1.0], vec![5.0]]).unwrap(),
            vec![1.0, 1.0],
            vec![1.0, 5.0],
            0.9,
        )
        .unwrap();
        let v = [2.0];
        b.ema_update([(0usize, &v[..])]).unwrap();
        assert!((b.ema_count()[0] - 1.0).abs() < 1e-15);
        assert!((b.ema_sum()[0] - 1.1).abs() < 1e-15);
        assert!((b.codeword(0)[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn ema_empty_batch_keeps_ratio() {
        let mut b = Codebook::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]], 0.9).unwrap();
        let before = b.codewords().to_vec();
        b.ema_update(std::iter::empty()).unwrap();
        assert_eq!(b.ema_count(), &[0.9, 0.9]);
        for (x, y) in before.iter().zip(b.codewords()) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }

    #[test]
    fn ema_rejects_bad_index() {
        let mut b = binary();
        let v = [0.0];
        let err = b.ema_update([(2usize, &v[..])]);
        assert!(matches!(err, Err(Error::IndexOutOfRange { index: 2, size: 2 })));
        assert_eq!(b.ema_count(), &[1.0, 1.0]);
    }

    #[test]
    fn seeding_covers_distinct_points_first() {
        let samples = Tensor::from_rows(&[vec![0.0], vec![10.0], vec![20.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Codebook::seed_from_samples(&samples, 3, 0.99, &mut rng).unwrap();
        let mut got: Vec<f64> = b.codewords().to_vec();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![0.0, 10.0, 20.0]);

        let big = Codebook::seed_from_samples(&samples, 8, 0.99, &mut rng).unwrap();
        let mut cw = big.codewords().to_vec();
        cw.sort_by(f64::total_cmp);
        cw.dedup();
        assert_eq!(cw.len(), 8, "jittered copies must not tie exactly");
    }

    #[test]
    fn restart_replaces_only_dead() {
        let mut b = Codebook::with_state(
            Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap(),
            vec![1.0, 0.0],
            vec![0.0, 0.0],
            0.9,
        )
        .unwrap();
        let samples = Tensor::from_rows(&[vec![7.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(b.restart_dead(0.5, &samples, &mut rng).unwrap(), 1);
        assert_eq!(b.codewords(), &[0.0, 7.0]);
    }
}
