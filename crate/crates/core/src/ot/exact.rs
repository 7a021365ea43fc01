//! Exact (unregularized) transport for desk-scale instances.
//!
//! Transportation simplex: a north-west-corner basis of `n + m - 1` cells,
//! duals from the basis tree, and pivots on the lowest-index cell with
//! negative reduced cost. Leaving-cell ties are broken by lowest index as
//! well, so degenerate instances cannot cycle.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView1};

use super::cost::CostMatrix;
use super::sinkhorn::CouplingMatrix;
use crate::error::{Error, Result};

/// Largest `n * m` the oracle accepts.
pub const EXACT_MAX_CELLS: usize = 64;
const REDUCED_COST_TOL: f64 = 1e-12;
const MAX_PIVOTS: usize = 100_000;

pub fn exact_ot_oracle(
    cost: &CostMatrix,
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
) -> Result<CouplingMatrix> {
    let (n, m) = cost.shape();
    if n * m > EXACT_MAX_CELLS {
        return Err(Error::Size(format!(
            "exact oracle handles at most {EXACT_MAX_CELLS} cells, got {n}x{m}"
        )));
    }
    if n == 0 || m == 0 {
        return Err(Error::EmptySet("cost matrix has no rows or columns".into()));
    }
    if a.len() != n || b.len() != m {
        return Err(Error::Dimension(
            "marginal lengths do not match the cost matrix".into(),
        ));
    }
    if cost.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("cost matrix has non-finite entries".into()));
    }
    let (sa, sb) = (a.sum(), b.sum());
    if (sa - sb).abs() > 1e-9 || a.iter().chain(b.iter()).any(|v| v.is_nan() || *v < 0.0) {
        return Err(Error::Input(
            "marginals must be nonnegative with equal mass".into(),
        ));
    }

    let c = cost.values();
    let mut flow = vec![0.0f64; n * m];
    let mut basic = vec![false; n * m];

    // north-west corner: the staircase path has exactly n + m - 1 cells
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let (mut i, mut j) = (0, 0);
    loop {
        let x = supply[i].min(demand[j]);
        flow[i * m + j] = x;
        basic[i * m + j] = true;
        supply[i] -= x;
        demand[j] -= x;
        if i == n - 1 && j == m - 1 {
            break;
        }
        if j == m - 1 || (i < n - 1 && supply[i] <= demand[j]) {
            i += 1;
        } else {
            j += 1;
        }
    }

    for _ in 0..MAX_PIVOTS {
        let (u, v) = duals(c, &basic, n, m);
        let entering = (0..n * m).find(|&cell| {
            !basic[cell] && c[[cell / m, cell % m]] - u[cell / m] - v[cell % m] < -REDUCED_COST_TOL
        });
        let Some(enter) = entering else {
            let values = Array2::from_shape_vec((n, m), flow).expect("sized above");
            return Ok(CouplingMatrix {
                values: values.mapv(|x| x.max(0.0)),
                row_marginal: a.to_owned(),
                col_marginal: b.to_owned(),
            });
        };

        let cycle = tree_path(&basic, n, m, enter / m, enter % m);
        // cycle[0] is the entering cell (+), then cells alternate -, +, ...
        let leave = cycle
            .iter()
            .skip(1)
            .step_by(2)
            .copied()
            .min_by(|&x, &y| flow[x].total_cmp(&flow[y]).then(x.cmp(&y)))
            .expect("pivot cycle has a donor cell");
        let theta = flow[leave];
        for (k, &cell) in cycle.iter().enumerate() {
            if k % 2 == 0 {
                flow[cell] += theta;
            } else {
                flow[cell] -= theta;
            }
        }
        flow[leave] = 0.0;
        basic[leave] = false;
        basic[enter] = true;
    }
    Err(Error::Run(
        "transportation simplex did not terminate".into(),
    ))
}

/// Row duals `u` and column duals `v` with `u_i + v_j = c_ij` on basic cells.
fn duals(c: &Array2<f64>, basic: &[bool], n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![f64::NAN; n];
    let mut v = vec![f64::NAN; m];
    u[0] = 0.0;
    let mut queue = VecDeque::from([(true, 0usize)]);
    while let Some((is_row, k)) = queue.pop_front() {
        if is_row {
            for j in 0..m {
                if basic[k * m + j] && v[j].is_nan() {
                    v[j] = c[[k, j]] - u[k];
                    queue.push_back((false, j));
                }
            }
        } else {
            for i in 0..n {
                if basic[i * m + k] && u[i].is_nan() {
                    u[i] = c[[i, k]] - v[k];
                    queue.push_back((true, i));
                }
            }
        }
    }
    (u, v)
}

/// Cells of the cycle closed by adding `(row, col)` to the basis tree, starting
/// with the entering cell and alternating row/column moves.
fn tree_path(basic: &[bool], n: usize, m: usize, row: usize, col: usize) -> Vec<usize> {
    // nodes 0..n are rows, n..n+m are columns; search from `col` to `row`
    let mut parent = vec![usize::MAX; n + m];
    let start = n + col;
    parent[start] = start;
    let mut queue = VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        if node == row {
            break;
        }
        if node < n {
            for j in 0..m {
                if basic[node * m + j] && parent[n + j] == usize::MAX {
                    parent[n + j] = node;
                    queue.push_back(n + j);
                }
            }
        } else {
            let j = node - n;
            for i in 0..n {
                if basic[i * m + j] && parent[i] == usize::MAX {
                    parent[i] = node;
                    queue.push_back(i);
                }
            }
        }
    }

    let mut cycle = vec![row * m + col];
    let mut node = row;
    while node != start {
        let prev = parent[node];
        let cell = if node < n {
            node * m + (prev - n)
        } else {
            prev * m + (node - n)
        };
        cycle.push(cell);
        node = prev;
    }
    cycle
}
