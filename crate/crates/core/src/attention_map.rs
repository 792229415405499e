//! Normalized nonnegative spatial maps over the `H × W` feature grid.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Values sum to one.
    Distribution,
    /// Maximum value is one, or the map is identically zero.
    UnitMax,
}

const TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    normalization: Normalization,
}

impl AttentionMap {
    /// Wraps already-normalized values, checking the declared normalization.
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f64>,
        normalization: Normalization,
    ) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return dim_err(format!(
                "{} values for a {height}×{width} map",
                values.len()
            ));
        }
        if values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return contract_err("attention map entries must be finite and nonnegative");
        }
        match normalization {
            Normalization::Distribution => {
                let total: f64 = values.iter().sum();
                if (total - 1.0).abs() > TOL {
                    return contract_err(format!("distribution map sums to {total}"));
                }
            }
            Normalization::UnitMax => {
                let max = values.iter().copied().fold(0.0, f64::max);
                if max != 0.0 && (max - 1.0).abs() > TOL {
                    return contract_err(format!("unit-max map has max {max}"));
                }
            }
        }
        Ok(AttentionMap {
            height,
            width,
            values,
            normalization,
        })
    }

    /// Rescales nonnegative values to sum to one. An all-zero input is an error.
    pub fn to_distribution(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let total: f64 = values.iter().sum();
        if !(total > 0.0) {
            return contract_err("cannot normalize a map with zero mass");
        }
        Self::new(
            height,
            width,
            values.iter().map(|v| v / total).collect(),
            Normalization::Distribution,
        )
    }

    /// Rescales nonnegative values so the maximum is one; all-zero stays zero.
    pub fn to_unit_max(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let max = values.iter().copied().fold(0.0, f64::max);
        let scaled = if max > 0.0 {
            values.iter().map(|v| v / max).collect()
        } else {
            values.to_vec()
        };
        Self::new(height, width, scaled, Normalization::UnitMax)
    }

    /// Reads a `1×H×W` or `H×W` tensor.
    pub fn from_tensor(t: &Tensor, normalization: Normalization) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, h, w] | [h, w] => (*h, *w),
            s => return dim_err(format!("map tensor of shape {s:?}")),
        };
        Self::new(h, w, t.data().to_vec(), normalization)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn as_unit_max(&self) -> AttentionMap {
        Self::to_unit_max(self.height, self.width, &self.values).expect("valid map")
    }

    pub fn as_distribution(&self) -> Result<AttentionMap> {
        Self::to_distribution(self.height, self.width, &self.values)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.values.clone()).expect("valid map")
    }

    /// Bilinear resampling to a new grid (align-corners convention), keeping
    /// the declared normalization.
    pub fn resize(&self, height: usize, width: usize) -> Result<AttentionMap> {
        if height == 0 || width == 0 {
            return dim_err("resize to an empty grid");
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let coord = |i: usize, out: usize, src: usize| -> f64 {
            if out == 1 {
                (src as f64 - 1.0) / 2.0
            } else {
                i as f64 * (src - 1) as f64 / (out - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(height * width);
        for r in 0..height {
            let y = coord(r, height, self.height);
            let (y0, fy) = (y.floor() as usize, y - y.floor());
            let y1 = (y0 + 1).min(self.height - 1);
            for c in 0..width {
                let x = coord(c, width, self.width);
                let (x0, fx) = (x.floor() as usize, x - x.floor());
                let x1 = (x0 + 1).min(self.width - 1);
                let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
                let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy).max(0.0));
            }
        }
        match self.normalization {
            Normalization::Distribution => Self::to_distribution(height, width, &out),
            Normalization::UnitMax => Self::to_unit_max(height, width, &out),
        }
    }

    /// 16-bit binary PGM (`P5`, maxval 65535, big-endian samples) of the unit-max view.
    pub fn to_pgm(&self) -> Vec<u8> {
        let unit = self.as_unit_max();
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for &v in &unit.values {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
        out
    }
}
