use super::{compose_index, mean_sq_diff, Codebook, QuantizeResult};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Greedy residual quantization: stage `j` quantizes what stages `< j` left over.
pub fn rvq_quantize(e: &Tensor, books: &[Codebook]) -> Result<QuantizeResult> {
    rvq_with_residuals(e, books).map(|(r, _)| r)
}

/// Like [`rvq_quantize`], also returning each stage's input (`[stages][frames*d]`).
pub(crate) fn rvq_with_residuals(
    e: &Tensor,
    books: &[Codebook],
) -> Result<(QuantizeResult, Vec<Vec<f64>>)> {
    if books.is_empty() {
        return Err(Error::InvalidConfig("RVQ needs at least one stage".into()));
    }
    let (frames, dim) = e.require_matrix("rvq_quantize")?;
    if let Some((j, b)) = books.iter().enumerate().find(|(_, b)| b.dim() != dim) {
        return Err(Error::shape(
            "rvq_quantize",
            format!("stage {j} has dim {}, input width {dim}", b.dim()),
        ));
    }
    let sizes: Vec<usize> = books.iter().map(Codebook::size).collect();
    let mut stage_inputs = vec![Vec::with_capacity(frames * dim); books.len()];
    let mut sub_indices = Vec::with_capacity(frames);
    let mut composed = Vec::with_capacity(frames);
    let mut quantized = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        let mut residual = e.row(t).to_vec();
        let mut z = vec![0.0; dim];
        let mut idx = Vec::with_capacity(books.len());
        for (j, book) in books.iter().enumerate() {
            stage_inputs[j].extend_from_slice(&residual);
            let (i, c) = book.lookup(&residual)?;
            for k in 0..dim {
                z[k] += c[k];
                residual[k] -= c[k];
            }
            idx.push(i);
        }
        composed.push(compose_index(&idx, &sizes)?);
        sub_indices.push(idx);
        quantized.extend_from_slice(&z);
    }
    let quantized = Tensor::matrix(frames, dim, quantized)?;
    let term = mean_sq_diff(e, &quantized);
    Ok((
        QuantizeResult {
            sub_indices,
            composed_index: composed,
            quantized,
            commit_term: term,
            codebook_term: term,
        },
        stage_inputs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_residual_by_hand() {
        let b0 = Codebook::from_rows(&[vec![0.0], vec![2.0]], 0.9).unwrap();
        let b1 = Codebook::from_rows(&[vec![-0.5], vec![0.5]], 0.9).unwrap();
        let e = Tensor::from_rows(&[vec![1.6]]).unwrap();
        let r = rvq_quantize(&e, &[b0, b1]).unwrap();
        assert_eq!(r.sub_indices, vec![vec![1, 0]]);
        assert_eq!(r.quantized.data(), &[1.5]);
        assert_eq!(r.composed_index, vec![1]);
    }

    #[test]
    fn exact_representation() {
        let b0 = Codebook::from_rows(&[vec![0.25, 1.0], vec![3.0, -1.0]], 0.9).unwrap();
        let b1 = Codebook::from_rows(&[vec![0.7, 0.7], vec![0.0, 0.0]], 0.9).unwrap();
        let e = Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap();
        let r = rvq_quantize(&e, &[b0, b1]).unwrap();
        assert_eq!(r.sub_indices, vec![vec![1, 1]]);
        assert_eq!(r.quantized.data(), e.data());
        assert_eq!(r.commit_term, 0.0);
    }

    #[test]
    fn dim_mismatch() {
        let b0 = Codebook::from_rows(&[vec![0.0], vec![2.0]], 0.9).unwrap();
        let e = Tensor::from_rows(&[vec![1.6, 0.0]]).unwrap();
        assert!(rvq_quantize(&e, &[b0]).is_err());
        assert!(rvq_quantize(&e, &[]).is_err());
    }
}
