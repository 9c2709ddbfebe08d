//! Codebook usage and perplexity over index streams.

use crate::error::{Error, Result};

/// Evaluation summary for one pass over a token stream.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Distinct codewords observed; `None` when there is no quantizer.
    pub usage: Option<usize>,
    pub perplexity: Option<f64>,
    pub rmse: f64,
    /// Number of tokens the index metrics were computed over.
    pub tokens: usize,
    pub per_subbook_usage: Option<Vec<usize>>,
    pub per_subbook_perplexity: Option<Vec<f64>>,
}

/// `(index, count)` pairs in ascending index order.
fn histogram(stream: &[u64], n: u64) -> Result<Vec<(u64, usize)>> {
    if let Some(&bad) = stream.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, size: n });
    }
    let mut sorted = stream.to_vec();
    sorted.sort_unstable();
    let mut out: Vec<(u64, usize)> = Vec::new();
    for i in sorted {
        match out.last_mut() {
            Some((last, c)) if *last == i => *c += 1,
            _ => out.push((i, 1)),
        }
    }
    Ok(out)
}

/// Number of distinct indices in the stream.
pub fn codebook_usage(stream: &[u64], n: u64) -> Result<usize> {
    histogram(stream, n).map(|h| h.len())
}

/// `2^H` of the empirical index distribution.
///
/// Entropy terms are summed in ascending index order so the result is
/// reproducible bit for bit. The value is clamped to `[1, usage]`, the
/// range the exact quantity always lies in, so rounding in `log2` cannot push
/// it outside.
pub fn codebook_perplexity(stream: &[u64], n: u64) -> Result<f64> {
    if stream.is_empty() {
        return Err(Error::InvalidConfig("perplexity of an empty stream".into()));
    }
    let hist = histogram(stream, n)?;
    let total = stream.len() as f64;
    let entropy: f64 = hist
        .iter()
        .map(|&(_, c)| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    Ok(entropy.exp2().clamp(1.0, hist.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_examples() {
        assert_eq!(codebook_usage(&[0, 0, 0], 4).unwrap(), 1);
        assert_eq!(codebook_usage(&[0, 1, 2, 3], 4).unwrap(), 4);
        assert_eq!(codebook_usage(&[], 4).unwrap(), 0);
        assert!(codebook_usage(&[4], 4).is_err());
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(codebook_perplexity(&[0, 1, 2, 3], 4).unwrap(), 4.0);
        assert_eq!(codebook_perplexity(&[2, 2, 2], 4).unwrap(), 1.0);
        assert_eq!(codebook_perplexity(&[0, 1, 0, 1], 4).unwrap(), 2.0);
        assert!(codebook_perplexity(&[], 4).is_err());
    }

    #[test]
    fn perplexity_never_exceeds_usage() {
        let p = codebook_perplexity(&[0, 1, 2], 3).unwrap();
        assert!(p <= 3.0 && (p - 3.0).abs() < 1e-12);
    }
}
