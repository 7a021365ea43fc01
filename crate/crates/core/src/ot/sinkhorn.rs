//! Sinkhorn scaling in the log domain (default) or the kernel domain.
//!
//! The objective is `sum_ij C_ij P_ij + eps * sum_ij P_ij ln P_ij`, i.e. the
//! transport cost minus `eps` times the Shannon entropy of the plan, so larger
//! `eps` spreads mass more evenly.
//!
//! Log-domain iterations keep dual potentials `alpha = f / eps`, `beta = g / eps`
//! and never form `exp(-C / eps)`, which underflows for raw squared distances.
//! The plan is `P_ij = u_i exp(alpha_i + beta_j - C_ij / eps) v_j`, where the
//! scalings `u`, `v` are folded into the potentials before they grow large.
//! Exact rounds recompute the potentials with log-sum-exp reductions
//! accumulated in 2^-62 fixed point, whose integer sums do not depend on
//! order.
//!
//! Column sums always run over rows in one canonical order and over fixed
//! row blocks, so results do not depend on the thread count and reordering
//! the source rows reorders the plan rows without changing any value.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::cost::CostMatrix;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};

/// 2^62: fixed-point scale for terms in `[0, 1]`.
const FIXED_ONE: f64 = 4_611_686_018_427_387_904.0;
/// `exp(d) * 2^62 < 1` below this, so such terms are exactly zero in fixed point.
const FIXED_CUTOFF: f64 = -43.0;
/// Rows handed to one task in column reductions.
const ROW_BLOCK: usize = 64;
/// Scalings are folded into the log potentials once any leaves
/// `[1 / ABSORB_LIMIT, ABSORB_LIMIT]`.
const ABSORB_LIMIT: f64 = 1e30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Weight of the entropic regularizer.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Stop once the L-infinity marginal violation drops to this.
    pub tolerance: f64,
    pub log_domain: bool,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.1,
            max_iterations: 1000,
            tolerance: 1e-6,
            log_domain: true,
            execution: Execution::default(),
        }
    }
}

impl SinkhornConfig {
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Validation(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::Validation(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Validation(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A transport plan together with the marginals it was solved for.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    pub values: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
}

impl CouplingMatrix {
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.values.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let m = self.values.ncols();
        let mut sums = vec![0.0; m];
        for row in self.values.rows() {
            for (s, &v) in sums.iter_mut().zip(row.iter()) {
                *s += v;
            }
        }
        sums
    }

    pub fn total_mass(&self) -> f64 {
        self.row_sums().iter().sum()
    }

    /// `max(|P 1 - a|_inf, |P^T 1 - b|_inf)`.
    pub fn marginal_violation(&self) -> f64 {
        let rows = self
            .row_sums()
            .iter()
            .zip(self.row_marginal.iter())
            .map(|(s, a)| (s - a).abs())
            .fold(0.0, f64::max);
        let cols = self
            .col_sums()
            .iter()
            .zip(self.col_marginal.iter())
            .map(|(s, b)| (s - b).abs())
            .fold(0.0, f64::max);
        rows.max(cols)
    }

    /// Nonnegativity, marginal (within `marginal_tol`) and unit-mass
    /// (within `mass_tol`) checks.
    pub fn check_invariants(&self, marginal_tol: f64, mass_tol: f64) -> Result<()> {
        if let Some(v) = self.values.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(Error::Validation(format!(
                "coupling entry {v} is negative or NaN"
            )));
        }
        let violation = self.marginal_violation();
        if violation > marginal_tol {
            return Err(Error::Validation(format!(
                "marginal violation {violation:e} exceeds {marginal_tol:e}"
            )));
        }
        let mass = self.total_mass();
        if (mass - 1.0).abs() > mass_tol {
            return Err(Error::Validation(format!("total mass {mass} is not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornSolution {
    pub coupling: CouplingMatrix,
    pub converged: bool,
    /// Completed row+column update rounds.
    pub iterations: usize,
    /// L-infinity marginal violation of the returned plan.
    pub marginal_violation: f64,
    /// L1 row-marginal violation after each round. Column marginals are exact
    /// after every round, and this sequence is non-increasing.
    pub violation_history: Vec<f64>,
}

pub fn uniform_marginal(len: usize) -> Array1<f64> {
    Array1::from_elem(len, 1.0 / len as f64)
}

fn check_marginal(name: &str, p: ArrayView1<'_, f64>, len: usize) -> Result<()> {
    if p.len() != len {
        return Err(Error::Dimension(format!(
            "marginal {name} has length {} but the cost matrix needs {len}",
            p.len()
        )));
    }
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Input(format!(
            "marginal {name} has negative or non-finite mass"
        )));
    }
    let total: f64 = p.sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!(
            "marginal {name} sums to {total}, not 1"
        )));
    }
    Ok(())
}

/// Solves the entropic transport problem between marginals `a` and `b`.
///
/// Runs until the marginal violation is within `config.tolerance` or
/// `config.max_iterations` rounds have run; in the latter case the last
/// iterate is returned with `converged = false`.
pub fn sinkhorn(
    cost: &CostMatrix,
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    config: &SinkhornConfig,
) -> Result<SinkhornSolution> {
    config.validate()?;
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Err(Error::EmptySet("cost matrix has no rows or columns".into()));
    }
    check_marginal("a", a, n)?;
    check_marginal("b", b, m)?;
    if cost.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("cost matrix has non-finite entries".into()));
    }

    let problem = Problem {
        cost: cost.as_slice(),
        n,
        m,
        inv_eps: 1.0 / config.epsilon,
        exec: config.execution,
    };
    let mut scaling = if config.log_domain {
        problem.solve_log(a, b, config)
    } else {
        problem.solve_kernel(a, b, config)?
    };
    let values = problem.plan(&mut scaling);
    let coupling = CouplingMatrix {
        values,
        row_marginal: a.to_owned(),
        col_marginal: b.to_owned(),
    };
    let marginal_violation = coupling.marginal_violation();
    Ok(SinkhornSolution {
        coupling,
        converged: scaling.converged,
        iterations: scaling.iterations,
        marginal_violation,
        violation_history: scaling.history,
    })
}

/// `sum_ij C_ij P_ij`, the transport cost of a plan without the entropy term.
pub fn transport_cost(cost: &CostMatrix, coupling: &CouplingMatrix) -> Result<f64> {
    if cost.shape() != coupling.shape() {
        return Err(Error::Dimension(format!(
            "cost is {:?} but coupling is {:?}",
            cost.shape(),
            coupling.shape()
        )));
    }
    let plan = coupling.values.as_standard_layout();
    let plan = plan.as_slice().expect("standard layout");
    Ok(cost.as_slice().iter().zip(plan).map(|(c, p)| c * p).sum())
}

struct Scaling {
    kernel: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    converged: bool,
    iterations: usize,
    history: Vec<f64>,
}

struct Problem<'a> {
    cost: &'a [f64],
    n: usize,
    m: usize,
    inv_eps: f64,
    exec: Execution,
}

#[inline]
fn fixed_term(d: f64) -> u64 {
    if d < FIXED_CUTOFF {
        0
    } else {
        (d.exp() * FIXED_ONE) as u64
    }
}

#[inline]
fn fixed_log(max: f64, sum: u128) -> f64 {
    max + (sum as f64 / FIXED_ONE).ln()
}

/// Four-lane dot product; the lane split keeps the loop vectorizable while
/// fixing the summation order.
#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (cx, cy) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = cx
        .remainder()
        .iter()
        .zip(cy.remainder())
        .map(|(p, q)| p * q)
        .sum();
    for (p, q) in cx.zip(cy) {
        for k in 0..4 {
            acc[k] += p[k] * q[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(acc: &mut [f64], x: &[f64], s: f64) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += v * s;
    }
}

fn out_of_range(scaling: &[f64]) -> bool {
    scaling
        .iter()
        .any(|&s| s != 0.0 && !(s > 1.0 / ABSORB_LIMIT && s < ABSORB_LIMIT))
}

/// One fused pass: the row violation of the current plan, the new row
/// scaling, and the column sums it induces.
struct Sweep {
    u: Vec<f64>,
    col_sums: Vec<f64>,
    inf: f64,
    l1: f64,
    healthy: bool,
}

impl Problem<'_> {
    fn row(&self, i: usize) -> &[f64] {
        &self.cost[i * self.m..(i + 1) * self.m]
    }

    /// `out_i = ln sum_j exp(beta_j - C_ij / eps)`.
    fn row_lse(&self, beta: &[f64], out: &mut [f64]) {
        let inv = self.inv_eps;
        exec::for_each_chunk_mut(self.exec, out, ROW_BLOCK, |first, block| {
            for (k, slot) in block.iter_mut().enumerate() {
                let row = self.row(first + k);
                let max = row
                    .iter()
                    .zip(beta)
                    .map(|(c, b)| b - c * inv)
                    .fold(f64::NEG_INFINITY, f64::max);
                *slot = if max == f64::NEG_INFINITY {
                    max
                } else {
                    let sum: u128 = row
                        .iter()
                        .zip(beta)
                        .map(|(c, b)| u128::from(fixed_term(b - c * inv - max)))
                        .sum();
                    fixed_log(max, sum)
                };
            }
        });
    }

    /// `out_j = ln sum_i exp(alpha_i - C_ij / eps)`.
    fn col_lse(&self, alpha: &[f64], out: &mut [f64]) {
        let (m, inv) = (self.m, self.inv_eps);
        let block_len = ROW_BLOCK * m;
        let partial_max = exec::map_chunks(self.exec, self.cost, block_len, |offset, block| {
            let first = offset / m;
            let mut mx = vec![f64::NEG_INFINITY; m];
            for (r, row) in block.chunks_exact(m).enumerate() {
                let a = alpha[first + r];
                for (slot, c) in mx.iter_mut().zip(row) {
                    *slot = slot.max(a - c * inv);
                }
            }
            mx
        });
        let mut max = vec![f64::NEG_INFINITY; m];
        for part in &partial_max {
            for (g, p) in max.iter_mut().zip(part) {
                *g = g.max(*p);
            }
        }
        drop(partial_max);

        let partial_sum = exec::map_chunks(self.exec, self.cost, block_len, |offset, block| {
            let first = offset / m;
            let mut acc = vec![0u128; m];
            for (r, row) in block.chunks_exact(m).enumerate() {
                let a = alpha[first + r];
                if a == f64::NEG_INFINITY {
                    continue;
                }
                for ((slot, c), mx) in acc.iter_mut().zip(row).zip(&max) {
                    *slot += u128::from(fixed_term(a - c * inv - mx));
                }
            }
            acc
        });
        for (j, slot) in out.iter_mut().enumerate() {
            let sum: u128 = partial_sum.iter().map(|p| p[j]).sum();
            *slot = if max[j] == f64::NEG_INFINITY {
                max[j]
            } else {
                fixed_log(max[j], sum)
            };
        }
    }

    /// One exact log-domain round: `alpha` from `beta`, then `beta` from `alpha`.
    fn log_round(&self, log_a: &[f64], log_b: &[f64], alpha: &mut [f64], beta: &mut [f64]) {
        let mut lse = vec![0.0; self.n];
        self.row_lse(beta, &mut lse);
        for ((al, la), s) in alpha.iter_mut().zip(log_a).zip(&lse) {
            *al = la - s;
        }
        let mut lse = vec![0.0; self.m];
        self.col_lse(alpha, &mut lse);
        for ((be, lb), t) in beta.iter_mut().zip(log_b).zip(&lse) {
            *be = lb - t;
        }
    }

    /// `K_ij = exp(alpha_i + beta_j - C_ij / eps)`.
    fn stabilized_kernel(&self, alpha: &[f64], beta: &[f64], kernel: &mut [f64]) {
        let (m, inv) = (self.m, self.inv_eps);
        exec::for_each_chunk_mut(self.exec, kernel, ROW_BLOCK * m, |offset, block| {
            let first = offset / m;
            for (r, out) in block.chunks_mut(m).enumerate() {
                let al = alpha[first + r];
                for ((k, c), be) in out.iter_mut().zip(self.row(first + r)).zip(beta) {
                    *k = (al + be - c * inv).exp();
                }
            }
        });
    }

    /// Rows sorted by marginal weight and cost contents. Column sums run in
    /// this order, so reordering the source rows cannot change any rounding.
    fn canonical_rows(&self, a: ArrayView1<'_, f64>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.sort_unstable_by(|&i, &k| {
            a[i].total_cmp(&a[k]).then_with(|| {
                self.row(i)
                    .iter()
                    .zip(self.row(k))
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        order
    }

    fn sweep(
        &self,
        kernel: &[f64],
        order: &[usize],
        u: &[f64],
        v: &[f64],
        a: ArrayView1<'_, f64>,
    ) -> Sweep {
        let m = self.m;
        let parts = exec::map_chunks(self.exec, order, ROW_BLOCK, |_, rows| {
            let mut acc = vec![0.0; m];
            let mut new_u = Vec::with_capacity(rows.len());
            let (mut inf, mut l1, mut healthy) = (0.0f64, 0.0f64, true);
            for &i in rows {
                let ai = a[i];
                if ai == 0.0 {
                    new_u.push(0.0);
                    continue;
                }
                let row = &kernel[i * m..(i + 1) * m];
                let s = dot(row, v);
                let d = (u[i] * s - ai).abs();
                inf = inf.max(d);
                l1 += d;
                if !(s > 0.0 && s.is_finite()) {
                    healthy = false;
                    new_u.push(0.0);
                    continue;
                }
                let ui = ai / s;
                new_u.push(ui);
                axpy(&mut acc, row, ui);
            }
            (new_u, acc, inf, l1, healthy)
        });
        let mut sweep = Sweep {
            u: vec![0.0; self.n],
            col_sums: vec![0.0; m],
            inf: 0.0,
            l1: 0.0,
            healthy: true,
        };
        for ((new_u, acc, inf, l1, healthy), rows) in parts.iter().zip(order.chunks(ROW_BLOCK)) {
            for (&i, &ui) in rows.iter().zip(new_u) {
                sweep.u[i] = ui;
            }
            for (o, p) in sweep.col_sums.iter_mut().zip(acc) {
                *o += p;
            }
            sweep.inf = sweep.inf.max(*inf);
            sweep.l1 += l1;
            sweep.healthy &= healthy;
        }
        sweep
    }

    /// Sinkhorn on a kernel that is re-centered on the log potentials
    /// whenever the scalings drift past [`ABSORB_LIMIT`]. Each round costs one
    /// multiply-add pass over the kernel instead of two exponential passes.
    fn solve_log(
        &self,
        a: ArrayView1<'_, f64>,
        b: ArrayView1<'_, f64>,
        config: &SinkhornConfig,
    ) -> Scaling {
        let (n, m) = (self.n, self.m);
        let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
        let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
        let reset_u: Vec<f64> = a
            .iter()
            .map(|&x| if x == 0.0 { 0.0 } else { 1.0 })
            .collect();
        let reset_v: Vec<f64> = b
            .iter()
            .map(|&x| if x == 0.0 { 0.0 } else { 1.0 })
            .collect();
        let order = self.canonical_rows(a);

        let mut alpha = vec![0.0; n];
        let mut beta = vec![0.0; m];
        self.log_round(&log_a, &log_b, &mut alpha, &mut beta);
        let mut kernel = vec![0.0; n * m];
        self.stabilized_kernel(&alpha, &beta, &mut kernel);
        let mut u = reset_u.clone();
        let mut v = reset_v.clone();
        let mut history = Vec::new();
        let mut iterations = 1;
        let mut converged = false;

        loop {
            let sweep = self.sweep(&kernel, &order, &u, &v, a);
            if sweep.healthy {
                history.push(sweep.l1);
                if sweep.inf <= config.tolerance {
                    converged = true;
                    break;
                }
            }
            if iterations >= config.max_iterations {
                break;
            }
            iterations += 1;
            let new_v: Vec<f64> = sweep
                .col_sums
                .iter()
                .zip(b.iter())
                .map(|(s, bj)| if *bj == 0.0 { 0.0 } else { bj / s })
                .collect();
            let finite = new_v
                .iter()
                .all(|x| x.is_finite() && (*x > 0.0 || x == &0.0));
            if sweep.healthy && finite {
                u = sweep.u;
                v = new_v;
                if !(out_of_range(&u) || out_of_range(&v)) {
                    continue;
                }
                for (al, ui) in alpha.iter_mut().zip(&u) {
                    *al += ui.ln();
                }
                for (be, vj) in beta.iter_mut().zip(&v) {
                    *be += vj.ln();
                }
            } else {
                // part of the kernel underflowed: fold in what is usable and
                // redo this round exactly
                for (al, ui) in alpha.iter_mut().zip(&u) {
                    *al += ui.ln();
                }
                for (be, vj) in beta.iter_mut().zip(&v) {
                    *be += vj.ln();
                }
                self.log_round(&log_a, &log_b, &mut alpha, &mut beta);
            }
            self.stabilized_kernel(&alpha, &beta, &mut kernel);
            u.clone_from(&reset_u);
            v.clone_from(&reset_v);
        }
        if !converged {
            log::warn!(
                "sinkhorn stopped after {iterations} iterations without reaching tolerance {:e}",
                config.tolerance
            );
        }
        Scaling {
            kernel,
            u,
            v,
            converged,
            iterations,
            history,
        }
    }

    /// `K v` for each row.
    fn kernel_rows(&self, kernel: &[f64], v: &[f64], out: &mut [f64]) {
        let m = self.m;
        exec::for_each_chunk_mut(self.exec, out, ROW_BLOCK, |first, block| {
            for (k, slot) in block.iter_mut().enumerate() {
                let i = first + k;
                *slot = dot(&kernel[i * m..(i + 1) * m], v);
            }
        });
    }

    /// `K^T u`, reduced over fixed row blocks in block order.
    fn kernel_cols(&self, kernel: &[f64], u: &[f64], out: &mut [f64]) {
        let m = self.m;
        let partial = exec::map_chunks(self.exec, kernel, ROW_BLOCK * m, |offset, block| {
            let first = offset / m;
            let mut acc = vec![0.0; m];
            for (r, row) in block.chunks_exact(m).enumerate() {
                axpy(&mut acc, row, u[first + r]);
            }
            acc
        });
        out.fill(0.0);
        for part in &partial {
            for (o, p) in out.iter_mut().zip(part) {
                *o += p;
            }
        }
    }

    fn solve_kernel(
        &self,
        a: ArrayView1<'_, f64>,
        b: ArrayView1<'_, f64>,
        config: &SinkhornConfig,
    ) -> Result<Scaling> {
        let inv = self.inv_eps;
        let kernel: Vec<f64> = self.cost.iter().map(|c| (-c * inv).exp()).collect();
        let mut u = vec![1.0; self.n];
        let mut v = vec![1.0; self.m];
        let mut kv = vec![0.0; self.n];
        let mut ktu = vec![0.0; self.m];
        let mut history = Vec::new();
        let mut iterations = 0;
        let mut converged = false;

        loop {
            self.kernel_rows(&kernel, &v, &mut kv);
            if iterations > 0 {
                let sums: Vec<f64> = u.iter().zip(&kv).map(|(ui, s)| ui * s).collect();
                let (inf, l1) = violation(&sums, a);
                history.push(l1);
                if inf <= config.tolerance {
                    converged = true;
                    break;
                }
                if iterations >= config.max_iterations {
                    break;
                }
            }
            for ((ui, ai), s) in u.iter_mut().zip(a.iter()).zip(&kv) {
                *ui = if *ai == 0.0 { 0.0 } else { ai / s };
                if !ui.is_finite() {
                    return Err(Error::Overflow(format!(
                        "row scaling became {ui} at iteration {iterations}"
                    )));
                }
            }
            self.kernel_cols(&kernel, &u, &mut ktu);
            for ((vj, bj), s) in v.iter_mut().zip(b.iter()).zip(&ktu) {
                *vj = if *bj == 0.0 { 0.0 } else { bj / s };
                if !vj.is_finite() {
                    return Err(Error::Overflow(format!(
                        "column scaling became {vj} at iteration {iterations}"
                    )));
                }
            }
            iterations += 1;
        }
        if !converged {
            log::warn!(
                "sinkhorn stopped after {iterations} iterations without reaching tolerance {:e}",
                config.tolerance
            );
        }
        Ok(Scaling {
            kernel,
            u,
            v,
            converged,
            iterations,
            history,
        })
    }

    /// `P_ij = u_i K_ij v_j`, written over the kernel.
    fn plan(&self, scaling: &mut Scaling) -> Array2<f64> {
        let m = self.m;
        let (u, v) = (&scaling.u, &scaling.v);
        let mut values = std::mem::take(&mut scaling.kernel);
        exec::for_each_chunk_mut(self.exec, &mut values, ROW_BLOCK * m, |offset, block| {
            let first = offset / m;
            for (r, row) in block.chunks_mut(m).enumerate() {
                let ui = u[first + r];
                for (k, vj) in row.iter_mut().zip(v) {
                    *k = ui * *k * vj;
                }
            }
        });
        Array2::from_shape_vec((self.n, m), values).expect("sized above")
    }
}

/// `(L-inf, L1)` distance between achieved and target marginals.
fn violation(achieved: &[f64], target: ArrayView1<'_, f64>) -> (f64, f64) {
    achieved
        .iter()
        .zip(target.iter())
        .fold((0.0f64, 0.0f64), |(inf, l1), (r, t)| {
            let d = (r - t).abs();
            (inf.max(d), l1 + d)
        })
}
