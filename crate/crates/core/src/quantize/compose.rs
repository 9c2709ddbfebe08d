//! Mixed-radix index arithmetic and composed-codebook materialization.
//!
//! Sub-index `i_0` is the fastest-varying digit:
//! `i* = i_0 + N_0 * i_1 + N_0 * N_1 * i_2 + ...`.

use super::Codebook;
use crate::error::{Error, Result};

/// Default row limit for [`compose_codebook`].
pub const DEFAULT_COMPOSE_CAP: u64 = 1 << 20;

/// Product of the sub-codebook sizes, failing on overflow.
pub fn composed_size(sub_sizes: &[usize]) -> Result<u64> {
    if sub_sizes.is_empty() {
        return Err(Error::InvalidConfig("no sub-codebooks".into()));
    }
    sub_sizes.iter().try_fold(1u64, |acc, &n| {
        acc.checked_mul(n as u64)
            .ok_or_else(|| Error::InvalidConfig(format!("composed size of {sub_sizes:?} overflows")))
    })
}

pub fn compose_index(sub_indices: &[usize], sub_sizes: &[usize]) -> Result<u64> {
    if sub_indices.len() != sub_sizes.len() {
        return Err(Error::shape(
            "compose_index",
            format!("{} indices for {} codebooks", sub_indices.len(), sub_sizes.len()),
        ));
    }
    let mut index = 0u64;
    let mut radix = 1u64;
    for (&i, &n) in sub_indices.iter().zip(sub_sizes) {
        if i >= n {
            return Err(Error::IndexOutOfRange {
                index: i as u64,
                size: n as u64,
            });
        }
        index += radix * i as u64;
        radix = radix.checked_mul(n as u64).ok_or_else(|| {
            Error::InvalidConfig(format!("composed size of {sub_sizes:?} overflows"))
        })?;
    }
    Ok(index)
}

pub fn decompose_index(index: u64, sub_sizes: &[usize]) -> Result<Vec<usize>> {
    let total = composed_size(sub_sizes)?;
    if index >= total {
        return Err(Error::IndexOutOfRange { index, size: total });
    }
    let mut rest = index;
    Ok(sub_sizes
        .iter()
        .map(|&n| {
            let digit = (rest % n as u64) as usize;
            rest /= n as u64;
            digit
        })
        .collect())
}

/// Builds `C*`: row `i*` is the concatenation of the selected sub-codewords.
pub fn compose_codebook(books: &[Codebook], cap: u64) -> Result<Codebook> {
    let sizes: Vec<usize> = books.iter().map(Codebook::size).collect();
    let total = composed_size(&sizes)?;
    if total > cap {
        return Err(Error::CapExceeded { size: total, cap });
    }
    let dim: usize = books.iter().map(Codebook::dim).sum();
    let mut rows = Vec::with_capacity(total as usize * dim);
    let mut digits = vec![0usize; books.len()];
    for _ in 0..total {
        for (b, &i) in books.iter().zip(&digits) {
            rows.extend_from_slice(b.codeword(i));
        }
        for (d, &n) in digits.iter_mut().zip(&sizes) {
            *d += 1;
            if *d < n {
                break;
            }
            *d = 0;
        }
    }
    Codebook::new(
        crate::tensor::Tensor::matrix(total as usize, dim, rows)?,
        books[0].decay(),
    )
}
