//! Mapping solvers. Masked regression decomposes into one small
//! symmetric positive-definite system per output pixel, each over that
//! pixel's receptive-field taps plus its bias. Ridge, LASSO and OMP serve
//! as globally-connected baselines. The gradient/Hessian transcriptions at
//! the bottom exist to verify the fast path against the underlying
//! objective, not to solve anything at scale.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::dataset::DesignSet;
use crate::error::{LrfError, Result};
use crate::model::{ModelMetadata, SparseRow, SparseRowModel};
use crate::topology::Topology;

/// Refuse dense ridge systems above this many weights (D·K) by default;
/// globally-connected solves grow quadratically with pixel count and stop
/// being practical long before memory runs out.
pub const DEFAULT_RIDGE_CAP: usize = 1 << 24;

/// Regularization settings for all four solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    /// Masked-regression ridge penalty; must be positive.
    pub lambda_m: f64,
    /// Dense ridge penalty; must be positive.
    pub lambda_2: f64,
    /// LASSO L1 penalty; nonnegative.
    pub lambda_1: f64,
    /// OMP sparsity bound (max atoms per row, bias counted).
    pub lambda_0: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambda_m: 1.0,
            lambda_2: 1.0,
            lambda_1: 0.1,
            lambda_0: 9,
        }
    }
}

impl Hyperparams {
    /// Validates the positivity constraints; `input_dim` bounds `lambda_0`
    /// (at most D+1 atoms exist, bias included).
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        check_lambda_positive(self.lambda_m, "lambda_m")?;
        check_lambda_positive(self.lambda_2, "lambda_2")?;
        if !self.lambda_1.is_finite() || self.lambda_1 < 0.0 {
            return Err(LrfError::Data(format!(
                "lambda_1 must be >= 0, got {}",
                self.lambda_1
            )));
        }
        if self.lambda_0 == 0 || self.lambda_0 > input_dim + 1 {
            return Err(LrfError::Data(format!(
                "lambda_0 must be in 1..={} (D+1), got {}",
                input_dim + 1,
                self.lambda_0
            )));
        }
        Ok(())
    }
}

fn check_lambda_positive(lambda: f64, name: &str) -> Result<()> {
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(LrfError::Data(format!(
            "{name} must be a positive finite number, got {lambda}"
        )));
    }
    Ok(())
}

fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LrfError::Numeric(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn check_design_topology(x: &DMatrix<f64>, t: &DMatrix<f64>, topology: &Topology) -> Result<()> {
    if x.ncols() != topology.geometry().input_dim() {
        return Err(LrfError::DimensionMismatch(format!(
            "design has {} columns, topology expects {} input pixels",
            x.ncols(),
            topology.geometry().input_dim()
        )));
    }
    if t.ncols() != topology.output_pixels() {
        return Err(LrfError::DimensionMismatch(format!(
            "response has {} columns, topology expects {} output pixels",
            t.ncols(),
            topology.output_pixels()
        )));
    }
    if x.nrows() != t.nrows() {
        return Err(LrfError::DimensionMismatch(format!(
            "design has {} rows, response has {}",
            x.nrows(),
            t.nrows()
        )));
    }
    Ok(())
}

/// Appends an all-ones bias column.
pub fn augment_ones(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let mut out = DMatrix::zeros(n, d + 1);
    out.view_mut((0, 0), (n, d)).copy_from(x);
    out.column_mut(d).fill(1.0);
    out
}

/// Gathers the topology columns of `x` for one output pixel and appends a
/// ones column for the bias.
fn gather_with_bias(x: &DMatrix<f64>, indices: &[u32]) -> DMatrix<f64> {
    let n = x.nrows();
    let m = indices.len() + 1;
    let mut xs = DMatrix::zeros(n, m);
    for (c, &j) in indices.iter().enumerate() {
        xs.column_mut(c).copy_from(&x.column(j as usize));
    }
    xs.column_mut(m - 1).fill(1.0);
    xs
}

/// Solves the per-output-pixel reduced systems for one mapping: for each
/// output pixel k with tap set S_k, solve
/// (X_Sᵀ X_S + λ_M I) w = X_Sᵀ t_k where X_S carries the gathered tap
/// columns plus a ones column, and the bias is regularized like any other
/// masked weight.
///
/// Rows are independent, so they are solved in parallel; each row's
/// arithmetic has a fixed order, making results identical for any worker
/// count.
pub fn masked_rows(
    x: &DMatrix<f64>,
    t: &DMatrix<f64>,
    topology: &Topology,
    lambda_m: f64,
) -> Result<Vec<SparseRow>> {
    check_lambda_positive(lambda_m, "lambda_m")?;
    check_design_topology(x, t, topology)?;
    ensure_finite(x, "design matrix")?;
    ensure_finite(t, "response matrix")?;
    (0..topology.output_pixels())
        .into_par_iter()
        .map(|k| {
            let indices = topology.row(k);
            let xs = gather_with_bias(x, indices);
            let m = xs.ncols();
            let mut gram = xs.tr_mul(&xs);
            for a in 0..m {
                gram[(a, a)] += lambda_m;
            }
            let rhs: DVector<f64> = xs.tr_mul(&t.column(k));
            let chol = Cholesky::new(gram).ok_or_else(|| {
                LrfError::Numeric(format!(
                    "reduced system for output pixel {k} is not positive definite"
                ))
            })?;
            let w = chol.solve(&rhs);
            Ok(SparseRow {
                indices: indices.to_vec(),
                weights: w.as_slice()[..m - 1].to_vec(),
                bias: w[m - 1],
            })
        })
        .collect()
}

/// Masked regression over a single-mapping design set, packaged as a
/// model. Per-channel training fits each channel's design separately via
/// [`masked_rows`] and merges the maps.
pub fn solve_masked(
    design: &DesignSet,
    topology: &Topology,
    lambda_m: f64,
) -> Result<SparseRowModel> {
    if design.strategy().mapping_count() != 1 {
        return Err(LrfError::Data(format!(
            "{} designs carry one channel each; fit them individually and merge",
            design.strategy()
        )));
    }
    let rows = masked_rows(design.x(), design.t(), topology, lambda_m)?;
    SparseRowModel::new(
        *topology.geometry(),
        design.strategy(),
        vec![rows],
        ModelMetadata::for_training("mr", lambda_m),
    )
}

/// Dense ridge on a ones-augmented design:
/// W = ((X_augᵀ X_aug + λ₂ I)⁻¹ X_augᵀ T)ᵀ, returned as K×(D+1) with the
/// bias in the last column. The bias is regularized, mirroring masked
/// regression. Refuses instances with more than `cap` weights (D·K).
pub fn solve_ridge_capped(
    design: &DesignSet,
    lambda_2: f64,
    cap: usize,
) -> Result<DMatrix<f64>> {
    check_lambda_positive(lambda_2, "lambda_2")?;
    let (d, k) = (design.input_dim(), design.output_dim());
    if d.saturating_mul(k) > cap {
        return Err(LrfError::Numeric(format!(
            "dense ridge needs D*K = {} weights, above the cap of {cap}; \
             use masked regression or raise the cap",
            d * k
        )));
    }
    ensure_finite(design.x(), "design matrix")?;
    ensure_finite(design.t(), "response matrix")?;
    let x_aug = augment_ones(design.x());
    let mut gram = x_aug.tr_mul(&x_aug);
    for a in 0..d + 1 {
        gram[(a, a)] += lambda_2;
    }
    let rhs = x_aug.tr_mul(design.t());
    let chol = Cholesky::new(gram)
        .ok_or_else(|| LrfError::Numeric("ridge normal equations not positive definite".into()))?;
    Ok(chol.solve(&rhs).transpose())
}

/// [`solve_ridge_capped`] with the default cap.
pub fn solve_ridge(design: &DesignSet, lambda_2: f64) -> Result<DMatrix<f64>> {
    solve_ridge_capped(design, lambda_2, DEFAULT_RIDGE_CAP)
}

/// Stopping rule for the cyclic coordinate-descent LASSO solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    /// Converged when the largest coordinate update in a sweep is below
    /// this.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            tol: 1e-7,
            max_sweeps: 10_000,
        }
    }
}

/// Minimizes ½‖X_aug w − t‖² + λ₁‖w₀..D₋₁‖₁ over w ∈ R^{D+1} by cyclic
/// coordinate descent with soft-thresholding. The appended bias column is
/// excluded from the penalty and updated first in every sweep. Inactive
/// coordinates are exactly zero in the returned vector.
pub fn solve_lasso_row(
    x: &DMatrix<f64>,
    t: &DVector<f64>,
    lambda_1: f64,
    opts: &LassoOptions,
) -> Result<DVector<f64>> {
    if !lambda_1.is_finite() || lambda_1 < 0.0 {
        return Err(LrfError::Data(format!(
            "lambda_1 must be >= 0, got {lambda_1}"
        )));
    }
    if x.nrows() != t.len() {
        return Err(LrfError::DimensionMismatch(format!(
            "design has {} rows, target has {}",
            x.nrows(),
            t.len()
        )));
    }
    ensure_finite(x, "design matrix")?;
    if t.iter().any(|v| !v.is_finite()) {
        return Err(LrfError::Numeric("target contains non-finite values".into()));
    }
    let (n, d) = x.shape();
    let sq_norms: Vec<f64> = (0..d).map(|j| x.column(j).norm_squared()).collect();
    let mut w: DVector<f64> = DVector::zeros(d + 1);
    let mut residual = t.clone();
    for _ in 0..opts.max_sweeps {
        let mut max_update = 0.0f64;

        // Bias: plain least-squares coordinate step on the ones column.
        let old = w[d];
        let new = residual.sum() / n as f64 + old;
        let delta = new - old;
        if delta != 0.0 {
            w[d] = new;
            residual.add_scalar_mut(-delta);
            max_update = max_update.max(delta.abs());
        }

        for j in 0..d {
            if sq_norms[j] == 0.0 {
                continue;
            }
            let old = w[j];
            let rho = x.column(j).dot(&residual) + sq_norms[j] * old;
            let new = soft_threshold(rho, lambda_1) / sq_norms[j];
            let delta = new - old;
            if delta != 0.0 {
                w[j] = new;
                residual.axpy(-delta, &x.column(j), 1.0);
                max_update = max_update.max(delta.abs());
            }
        }
        if max_update < opts.tol {
            break;
        }
    }
    Ok(w)
}

fn soft_threshold(value: f64, threshold: f64) -> f64 {
    if value > threshold {
        value - threshold
    } else if value < -threshold {
        value + threshold
    } else {
        0.0
    }
}

/// Greedy orthogonal matching pursuit over the ones-augmented columns
/// (the bias is a selectable atom): pick the column most correlated with
/// the residual under unit-normalized columns, refit least squares on the
/// active set, stop at `lambda_0` atoms, zero residual, or zero
/// correlation. At most `lambda_0` entries of the result are nonzero.
pub fn solve_omp_row(x: &DMatrix<f64>, t: &DVector<f64>, lambda_0: usize) -> Result<DVector<f64>> {
    let (n, d) = x.shape();
    if lambda_0 == 0 || lambda_0 > d + 1 {
        return Err(LrfError::Data(format!(
            "lambda_0 must be in 1..={} (D+1), got {lambda_0}",
            d + 1
        )));
    }
    if n != t.len() {
        return Err(LrfError::DimensionMismatch(format!(
            "design has {n} rows, target has {}",
            t.len()
        )));
    }
    ensure_finite(x, "design matrix")?;
    if t.iter().any(|v| !v.is_finite()) {
        return Err(LrfError::Numeric("target contains non-finite values".into()));
    }
    let x_aug = augment_ones(x);
    let mut normalized = x_aug.clone();
    let mut selectable = vec![false; d + 1];
    for j in 0..d + 1 {
        let norm = normalized.column(j).norm();
        if norm > 0.0 {
            normalized.column_mut(j).scale_mut(1.0 / norm);
            selectable[j] = true;
        }
    }
    let t_norm = t.norm();
    let mut residual = t.clone();
    let mut active: Vec<usize> = Vec::new();
    let mut coeffs = DVector::zeros(0);
    while active.len() < lambda_0 {
        if residual.norm() <= 1e-12 * t_norm.max(1.0) {
            break;
        }
        let correlations: DVector<f64> = normalized.tr_mul(&residual);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..d + 1 {
            if !selectable[j] || active.contains(&j) {
                continue;
            }
            let c = correlations[j].abs();
            if best.map_or(true, |(_, b)| c > b) {
                best = Some((j, c));
            }
        }
        let Some((j, c)) = best else { break };
        if c <= 1e-12 * t_norm.max(1.0) {
            break;
        }
        active.push(j);

        let mut xa = DMatrix::zeros(n, active.len());
        for (c, &col) in active.iter().enumerate() {
            xa.column_mut(c).copy_from(&x_aug.column(col));
        }
        coeffs = xa
            .clone()
            .svd(true, true)
            .solve(t, 1e-12)
            .map_err(|e| LrfError::Numeric(format!("OMP least-squares refit failed: {e}")))?;
        residual = t - &xa * &coeffs;
    }
    let mut w = DVector::zeros(d + 1);
    for (c, &j) in active.iter().enumerate() {
        w[j] = coeffs[c];
    }
    Ok(w)
}

/// Fits one mapping's rows with [`solve_lasso_row`] per output pixel, in
/// parallel, keeping only nonzero weights.
pub fn lasso_rows(
    x: &DMatrix<f64>,
    t: &DMatrix<f64>,
    lambda_1: f64,
    opts: &LassoOptions,
) -> Result<Vec<SparseRow>> {
    if x.nrows() != t.nrows() {
        return Err(LrfError::DimensionMismatch(format!(
            "design has {} rows, response has {}",
            x.nrows(),
            t.nrows()
        )));
    }
    (0..t.ncols())
        .into_par_iter()
        .map(|k| {
            let w = solve_lasso_row(x, &t.column(k).into_owned(), lambda_1, opts)?;
            Ok(sparse_from_dense_row(&w))
        })
        .collect()
}

/// Fits one mapping's rows with [`solve_omp_row`] per output pixel, in
/// parallel.
pub fn omp_rows(x: &DMatrix<f64>, t: &DMatrix<f64>, lambda_0: usize) -> Result<Vec<SparseRow>> {
    if x.nrows() != t.nrows() {
        return Err(LrfError::DimensionMismatch(format!(
            "design has {} rows, response has {}",
            x.nrows(),
            t.nrows()
        )));
    }
    (0..t.ncols())
        .into_par_iter()
        .map(|k| {
            let w = solve_omp_row(x, &t.column(k).into_owned(), lambda_0)?;
            Ok(sparse_from_dense_row(&w))
        })
        .collect()
}

/// Compresses a dense D+1 coefficient vector (bias last) into a sparse
/// row, dropping exact zeros among the weights.
fn sparse_from_dense_row(w: &DVector<f64>) -> SparseRow {
    let d = w.len() - 1;
    let mut indices = Vec::new();
    let mut weights = Vec::new();
    for j in 0..d {
        if w[j] != 0.0 {
            indices.push(j as u32);
            weights.push(w[j]);
        }
    }
    SparseRow {
        indices,
        weights,
        bias: w[d],
    }
}

// ---------------------------------------------------------------------
// Objective, gradient and Hessian transcriptions for verification.
//
// W is a dense K×(D+1) matrix with the bias in the last column; the mask
// has ones at each row's topology taps plus the bias column. The
// flattened gradient concatenates rows of W (row-major).
// ---------------------------------------------------------------------

fn mask_matrix(topology: &Topology) -> DMatrix<f64> {
    let d = topology.geometry().input_dim();
    let k = topology.output_pixels();
    let mut m = DMatrix::zeros(k, d + 1);
    for (row, indices) in topology.rows().iter().enumerate() {
        for &j in indices {
            m[(row, j as usize)] = 1.0;
        }
        m[(row, d)] = 1.0;
    }
    m
}

/// The masked objective
/// E(W) = ½‖X_aug (W∘M)ᵀ − T‖_F² + (λ_M/2)‖W∘M‖_F².
pub fn masked_objective(
    w: &DMatrix<f64>,
    design: &DesignSet,
    topology: &Topology,
    lambda_m: f64,
) -> Result<f64> {
    check_lambda_positive(lambda_m, "lambda_m")?;
    check_design_topology(design.x(), design.t(), topology)?;
    let d = design.input_dim();
    if w.nrows() != topology.output_pixels() || w.ncols() != d + 1 {
        return Err(LrfError::DimensionMismatch(format!(
            "W is {}x{}, expected {}x{}",
            w.nrows(),
            w.ncols(),
            topology.output_pixels(),
            d + 1
        )));
    }
    let masked = w.component_mul(&mask_matrix(topology));
    let x_aug = augment_ones(design.x());
    let residual = &x_aug * masked.transpose() - design.t();
    Ok(0.5 * residual.norm_squared() + 0.5 * lambda_m * masked.norm_squared())
}

/// Gradient of [`masked_objective`] at W, flattened row-major into a
/// K·(D+1) vector. Entries outside the mask are zero.
pub fn gradient_masked(
    w: &DMatrix<f64>,
    design: &DesignSet,
    topology: &Topology,
    lambda_m: f64,
) -> Result<DVector<f64>> {
    check_lambda_positive(lambda_m, "lambda_m")?;
    check_design_topology(design.x(), design.t(), topology)?;
    let d = design.input_dim();
    let k = topology.output_pixels();
    if w.nrows() != k || w.ncols() != d + 1 {
        return Err(LrfError::DimensionMismatch(format!(
            "W is {}x{}, expected {}x{}",
            w.nrows(),
            w.ncols(),
            k,
            d + 1
        )));
    }
    let mask = mask_matrix(topology);
    let masked = w.component_mul(&mask);
    let x_aug = augment_ones(design.x());
    let residual = &x_aug * masked.transpose() - design.t();
    let raw = residual.tr_mul(&x_aug) + lambda_m * &masked;
    let grad_matrix = raw.component_mul(&mask);
    let mut flat = DVector::zeros(k * (d + 1));
    for i in 0..k {
        for j in 0..d + 1 {
            flat[i * (d + 1) + j] = grad_matrix[(i, j)];
        }
    }
    Ok(flat)
}

/// A single second derivative ∂²E/∂W_ij∂W_lm: zero across rows (i ≠ l),
/// masked column products within a row, plus λ_M on masked diagonal
/// entries.
pub fn hessian_entry(
    i: usize,
    j: usize,
    l: usize,
    m: usize,
    design: &DesignSet,
    topology: &Topology,
    lambda_m: f64,
) -> f64 {
    if i != l {
        return 0.0;
    }
    let x_aug = augment_ones(design.x());
    let d = design.input_dim();
    let mask_at = |row: usize, col: usize| -> f64 {
        if col == d || topology.row(row).binary_search(&(col as u32)).is_ok() {
            1.0
        } else {
            0.0
        }
    };
    let products: f64 = x_aug.column(j).dot(&x_aug.column(m));
    if j == m {
        mask_at(i, j) * mask_at(i, j) * products + lambda_m * mask_at(i, j)
    } else {
        mask_at(i, j) * mask_at(l, m) * products
    }
}

/// The reduced Hessian block for output pixel k over its tap set plus
/// bias: X_Sᵀ X_S + λ_M I, assembled entry by entry from
/// [`hessian_entry`].
pub fn hessian_block(
    k: usize,
    design: &DesignSet,
    topology: &Topology,
    lambda_m: f64,
) -> Result<DMatrix<f64>> {
    check_lambda_positive(lambda_m, "lambda_m")?;
    check_design_topology(design.x(), design.t(), topology)?;
    if k >= topology.output_pixels() {
        return Err(LrfError::Data(format!(
            "output pixel {k} out of range for {} pixels",
            topology.output_pixels()
        )));
    }
    let d = design.input_dim();
    let mut coords: Vec<usize> = topology.row(k).iter().map(|&j| j as usize).collect();
    coords.push(d);
    let m = coords.len();
    let mut block = DMatrix::zeros(m, m);
    for (a, &ja) in coords.iter().enumerate() {
        for (b, &jb) in coords.iter().enumerate() {
            block[(a, b)] = hessian_entry(k, ja, k, jb, design, topology, lambda_m);
        }
    }
    Ok(block)
}
