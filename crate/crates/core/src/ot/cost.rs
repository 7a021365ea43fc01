use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};

/// Pairwise squared Euclidean distances between source and target features.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
}

impl CostMatrix {
    /// Wraps an existing matrix. Entries must be nonnegative (or NaN/inf, which
    /// the solver rejects later).
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::Input("cost entries must be nonnegative".into()));
        }
        Ok(CostMatrix {
            values: values.as_standard_layout().into_owned(),
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub(crate) fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("standard layout")
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    /// Divides every entry by the largest one and returns that divisor.
    /// An all-zero matrix is left as is and reports 1.
    pub fn normalize_by_max(&mut self) -> f64 {
        let max = self.max();
        if max > 0.0 && max.is_finite() {
            self.values.mapv_inplace(|v| v / max);
            max
        } else {
            1.0
        }
    }

    /// Multiplies every entry by `s`.
    pub fn scaled(&self, s: f64) -> CostMatrix {
        CostMatrix {
            values: self.values.mapv(|v| v * s),
        }
    }
}

const ROWS_PER_TASK: usize = 32;

/// `C[i][j] = sum_c (source[i][c] - target[j][c])^2`, accumulated in f64.
pub fn compute_cost_matrix(
    source: ArrayView2<'_, f32>,
    target: ArrayView2<'_, f32>,
    exec: Execution,
) -> Result<CostMatrix> {
    let dim = source.ncols();
    if target.ncols() != dim {
        return Err(Error::Dimension(format!(
            "source has {dim} channels, target has {}",
            target.ncols()
        )));
    }
    let (n, m) = (source.nrows(), target.nrows());
    let src: Vec<f64> = source.iter().map(|&v| f64::from(v)).collect();
    let tgt: Vec<f64> = target.iter().map(|&v| f64::from(v)).collect();

    let mut values = vec![0.0f64; n * m];
    if m > 0 {
        exec::for_each_chunk_mut(exec, &mut values, ROWS_PER_TASK * m, |offset, block| {
            let first = offset / m;
            for (r, out_row) in block.chunks_mut(m).enumerate() {
                let s = &src[(first + r) * dim..(first + r + 1) * dim];
                for (out, t) in out_row.iter_mut().zip(tgt.chunks_exact(dim)) {
                    let mut acc = 0.0;
                    for (x, y) in s.iter().zip(t) {
                        let d = x - y;
                        acc += d * d;
                    }
                    *out = acc.max(0.0);
                }
            }
        });
    }
    Ok(CostMatrix {
        values: Array2::from_shape_vec((n, m), values).expect("sized above"),
    })
}
