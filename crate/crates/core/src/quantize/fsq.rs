use super::{compose_index, mean_sq_diff, QuantizeResult};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grid value of level `index` among `levels` uniform points on `[-1, 1]`.
pub fn fsq_level_value(index: usize, levels: usize) -> f64 {
    2.0 * index as f64 / (levels - 1) as f64 - 1.0
}

pub fn fsq_grid(levels: usize) -> Vec<f64> {
    (0..levels).map(|i| fsq_level_value(i, levels)).collect()
}

/// Bounds `e` with tanh and rounds it to the nearest of `levels` grid points.
pub fn fsq_scalar(e: f64, levels: usize) -> (usize, f64) {
    let v = e.tanh();
    let top = (levels - 1) as f64;
    let index = ((v + 1.0) / 2.0 * top).round().clamp(0.0, top) as usize;
    (index, fsq_level_value(index, levels))
}

pub(crate) fn check_levels(levels: &[usize]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::InvalidConfig("FSQ needs at least one level count".into()));
    }
    if let Some(&l) = levels.iter().find(|&&l| l < 2) {
        return Err(Error::InvalidConfig(format!("FSQ level count {l} < 2")));
    }
    Ok(())
}

/// Per-dimension scalar quantization; `e` must have one column per entry of `levels`.
///
/// The loss terms compare the tanh-bounded input with the grid values.
pub fn fsq_quantize(e: &Tensor, levels: &[usize]) -> Result<QuantizeResult> {
    check_levels(levels)?;
    let (frames, dim) = e.require_matrix("fsq_quantize")?;
    if dim != levels.len() {
        return Err(Error::shape(
            "fsq_quantize",
            format!("input width {dim} for {} level counts", levels.len()),
        ));
    }
    if !e.is_finite() {
        return Err(Error::NonFinite("fsq_quantize input".into()));
    }
    let mut sub_indices = Vec::with_capacity(frames);
    let mut composed = Vec::with_capacity(frames);
    let mut quantized = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        let idx: Vec<usize> = e
            .row(t)
            .iter()
            .zip(levels)
            .map(|(&x, &l)| {
                let (i, v) = fsq_scalar(x, l);
                quantized.push(v);
                i
            })
            .collect();
        composed.push(compose_index(&idx, levels)?);
        sub_indices.push(idx);
    }
    let quantized = Tensor::matrix(frames, dim, quantized)?;
    let bounded = Tensor::matrix(frames, dim, e.data().iter().map(|v| v.tanh()).collect())?;
    let term = mean_sq_diff(&bounded, &quantized);
    Ok(QuantizeResult {
        sub_indices,
        composed_index: composed,
        quantized,
        commit_term: term,
        codebook_term: term,
    })
}
