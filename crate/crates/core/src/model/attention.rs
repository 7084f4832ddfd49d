use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Post-softmax cross-attention weights of one layer, `n_image x n_text`,
/// row-major. Rows sum to one before re-weighting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionState {
    pub layer: usize,
    pub n_image: usize,
    pub n_text: usize,
    pub weights: Vec<f64>,
}

impl CrossAttentionState {
    pub fn new(layer: usize, n_image: usize, n_text: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != n_image * n_text {
            return Err(Error::ShapeMismatch {
                expected: vec![n_image, n_text],
                actual: vec![weights.len()],
            });
        }
        Ok(Self {
            layer,
            n_image,
            n_text,
            weights,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n_text..(i + 1) * self.n_text]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_image).map(move |i| self.weights[i * self.n_text + j])
    }

    /// Mean attention each text token receives over all image positions.
    pub fn token_mass(&self) -> Vec<f64> {
        (0..self.n_text)
            .map(|j| self.column(j).sum::<f64>() / self.n_image as f64)
            .collect()
    }
}

/// Multiplies column `j` by `scales[j]`. Rows are not renormalized, so
/// negative scales and row sums below one are allowed.
pub fn reweight_attention(maps: &CrossAttentionState, scales: &[f64]) -> Result<CrossAttentionState> {
    if scales.len() != maps.n_text {
        return Err(Error::InvalidPrompt(format!(
            "{} scales for {} text tokens",
            scales.len(),
            maps.n_text
        )));
    }
    let mut out = maps.clone();
    scale_columns(&mut out.weights, scales);
    Ok(out)
}

/// In-place column scaling of a row-major matrix with `scales.len()` columns.
/// Unit scales leave their column untouched.
pub(crate) fn scale_columns<T>(weights: &mut [T], scales: &[T])
where
    T: Copy + PartialEq + std::ops::MulAssign + From<i8>,
{
    let one = T::from(1);
    for row in weights.chunks_mut(scales.len()) {
        for (w, &s) in row.iter_mut().zip(scales) {
            if s != one {
                *w *= s;
            }
        }
    }
}
