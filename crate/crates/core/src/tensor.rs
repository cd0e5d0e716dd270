//! Dense feature maps in channel-major `(C, H, W)` layout.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return input_err(format!("feature map must be non-empty, got {c}x{h}x{w}"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::Numeric("feature map contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    /// Wraps without validation; for values produced by this crate's kernels.
    pub(crate) fn from_raw(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { data: Array3::zeros((channels, height, width)) }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn positions(&self) -> usize {
        self.height() * self.width()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[[c, y, x]]
    }

    /// `(H*W, C)` matrix; row `y * W + x` holds the channel vector at `(y, x)`.
    pub fn to_rows(&self) -> Array2<f64> {
        let (c, h, w) = self.data.dim();
        let flat = self.data.view().into_shape_with_order((c, h * w)).expect("contiguous");
        flat.t().as_standard_layout().into_owned()
    }

    /// Inverse of [`FeatureMap::to_rows`].
    pub fn from_rows(rows: ArrayView2<f64>, height: usize, width: usize) -> Self {
        let c = rows.ncols();
        assert_eq!(rows.nrows(), height * width, "row count must equal H*W");
        let data = rows.t().as_standard_layout().into_owned().into_shape_with_order((c, height, width)).expect("shape");
        Self { data }
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn channel_sum(&self) -> Array2<f64> {
        self.data.sum_axis(Axis(0))
    }
}
