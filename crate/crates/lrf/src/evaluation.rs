//! Metrics, hyperparameter grids and the cross-validation protocol:
//! fit on train for every grid value, pick the best validation score,
//! then refit on train ∪ val.

use std::fmt;
use std::str::FromStr;

use crate::dataset::{build_design_set, ChannelStrategy, DesignSet, ImageBuffer, ImagePair};
use crate::error::{LrfError, Result};
use crate::model::{dense_rows, ModelMetadata, SparseRow, SparseRowModel};
use crate::solvers::{self, LassoOptions};
use crate::topology::{RfGeometry, Topology};

/// Which fitting algorithm to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Masked,
    Ridge,
    Lasso,
    Omp,
}

impl SolverKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverKind::Masked => "mr",
            SolverKind::Ridge => "ridge",
            SolverKind::Lasso => "lasso",
            SolverKind::Omp => "omp",
        }
    }
}

impl FromStr for SolverKind {
    type Err = LrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mr" => Ok(SolverKind::Masked),
            "ridge" => Ok(SolverKind::Ridge),
            "lasso" => Ok(SolverKind::Lasso),
            "omp" => Ok(SolverKind::Omp),
            other => Err(LrfError::Data(format!(
                "unknown solver '{other}', expected mr|ridge|lasso|omp"
            ))),
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An ordered grid of candidate regularizer values for one solver.
#[derive(Debug, Clone, PartialEq)]
pub struct CvGrid {
    solver: SolverKind,
    values: Vec<f64>,
}

impl CvGrid {
    pub fn new(solver: SolverKind, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(LrfError::Data("grid must be nonempty".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(LrfError::Data("grid values must be positive".into()));
        }
        if !values.windows(2).all(|w| w[0] < w[1]) {
            return Err(LrfError::Data("grid values must be strictly increasing".into()));
        }
        if solver == SolverKind::Omp && values.iter().any(|v| v.fract() != 0.0) {
            return Err(LrfError::Data(
                "omp grid values must be positive integers (atom budgets)".into(),
            ));
        }
        Ok(CvGrid { solver, values })
    }

    /// Ten equally spaced penalties from 0.1 to 10 inclusive.
    pub fn default_masked() -> Self {
        CvGrid {
            solver: SolverKind::Masked,
            values: (0..10).map(|i| (1 + 11 * i) as f64 / 10.0).collect(),
        }
    }

    /// The masked grid reused for ridge.
    pub fn default_ridge() -> Self {
        CvGrid {
            solver: SolverKind::Ridge,
            values: CvGrid::default_masked().values,
        }
    }

    /// One hundred log-spaced penalties from 1e−3 to 1e2 inclusive.
    pub fn default_lasso() -> Self {
        CvGrid {
            solver: SolverKind::Lasso,
            values: (0..100)
                .map(|i| 10f64.powf(-3.0 + 5.0 * i as f64 / 99.0))
                .collect(),
        }
    }

    /// Every atom budget from 1 to the number of training examples.
    pub fn default_omp(n_train: usize) -> Result<Self> {
        CvGrid::new(
            SolverKind::Omp,
            (1..=n_train.max(1)).map(|v| v as f64).collect(),
        )
    }

    /// OMP budgets capped at r²+1 (an r×r receptive field plus bias), so
    /// learned sparsity stays comparable to masked regression at the
    /// same receptive-field size.
    pub fn default_omp_comparable(n_train: usize, taps_per_side: usize) -> Result<Self> {
        let cap = n_train.min(taps_per_side * taps_per_side + 1).max(1);
        CvGrid::new(SolverKind::Omp, (1..=cap).map(|v| v as f64).collect())
    }

    pub fn solver(&self) -> SolverKind {
        self.solver
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Everything needed to fit a model except the regularizer value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSpec {
    pub solver: SolverKind,
    pub strategy: ChannelStrategy,
    /// Receptive-field side r for masked regression; ignored by the
    /// globally-connected solvers.
    pub taps_per_side: usize,
    pub dilation: usize,
    pub lasso: LassoOptions,
    pub ridge_cap: usize,
}

impl FitSpec {
    pub fn new(solver: SolverKind, strategy: ChannelStrategy) -> Self {
        FitSpec {
            solver,
            strategy,
            taps_per_side: 3,
            dilation: 1,
            lasso: LassoOptions::default(),
            ridge_cap: solvers::DEFAULT_RIDGE_CAP,
        }
    }

    pub fn with_rf(mut self, taps_per_side: usize, dilation: usize) -> Self {
        self.taps_per_side = taps_per_side;
        self.dilation = dilation;
        self
    }
}

fn fit_map(spec: &FitSpec, design: &DesignSet, topology: Option<&Topology>, lambda: f64) -> Result<Vec<SparseRow>> {
    match spec.solver {
        SolverKind::Masked => solvers::masked_rows(
            design.x(),
            design.t(),
            topology.expect("masked fits carry a topology"),
            lambda,
        ),
        SolverKind::Ridge => {
            let dense = solvers::solve_ridge_capped(design, lambda, spec.ridge_cap)?;
            Ok(dense_rows(&dense))
        }
        SolverKind::Lasso => solvers::lasso_rows(design.x(), design.t(), lambda, &spec.lasso),
        SolverKind::Omp => {
            if lambda.fract() != 0.0 || lambda < 1.0 {
                return Err(LrfError::Data(format!(
                    "omp lambda must be a positive integer atom budget, got {lambda}"
                )));
            }
            solvers::omp_rows(design.x(), design.t(), lambda as usize)
        }
    }
}

/// Fits a model on aligned pairs: assembles design sets per the channel
/// strategy, dispatches to the solver, and merges per-channel maps.
pub fn fit_from_pairs(pairs: &[ImagePair], spec: &FitSpec, lambda: f64) -> Result<SparseRowModel> {
    let designs = build_design_set(pairs, spec.strategy)?;
    let (h, w) = (pairs[0].input.height(), pairs[0].input.width());
    let (geometry, topology) = match spec.solver {
        SolverKind::Masked => {
            let geometry = RfGeometry {
                in_height: h,
                in_width: w,
                out_height: h,
                out_width: w,
                taps_per_side: spec.taps_per_side,
                dilation: spec.dilation,
            };
            let topology = Topology::build(geometry)?;
            (geometry, Some(topology))
        }
        _ => (RfGeometry::full_coverage(h, w), None),
    };
    let maps = designs
        .iter()
        .map(|design| fit_map(spec, design, topology.as_ref(), lambda))
        .collect::<Result<Vec<_>>>()?;
    SparseRowModel::new(
        geometry,
        spec.strategy,
        maps,
        ModelMetadata::for_training(spec.solver.as_str(), lambda),
    )
}

/// Mean squared error over images, channels and pixels, scaled by 100.
pub fn mse_x100(predicted: &[ImageBuffer], targets: &[ImageBuffer]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != targets.len() {
        return Err(LrfError::DimensionMismatch(format!(
            "predicted {} images, targets {}",
            predicted.len(),
            targets.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in predicted.iter().zip(targets) {
        if p.height() != t.height() || p.width() != t.width() || p.channels() != t.channels() {
            return Err(LrfError::DimensionMismatch(
                "prediction/target dimensions differ".into(),
            ));
        }
        sum += p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += p.data().len();
    }
    Ok(sum / count as f64 * 100.0)
}

/// mse_x100 of a model over aligned pairs, computed on raw (pre-clamp)
/// synthesis values.
pub fn model_mse_x100(model: &SparseRowModel, pairs: &[ImagePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(LrfError::Data("evaluation needs at least one pair".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for pair in pairs {
        let raw = model.synthesize_raw(&pair.input)?;
        if raw.len() != pair.target.channels() {
            return Err(LrfError::DimensionMismatch(format!(
                "model emits {} channels, target has {}",
                raw.len(),
                pair.target.channels()
            )));
        }
        for (c, plane) in raw.iter().enumerate() {
            sum += plane
                .iter()
                .zip(pair.target.plane(c))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            count += plane.len();
        }
    }
    Ok(sum / count as f64 * 100.0)
}

/// Result of a cross-validation run.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub best_lambda: f64,
    /// (lambda, validation mse_x100) per grid value, in grid order.
    pub scores: Vec<(f64, f64)>,
    /// Refit on train ∪ val at the best lambda.
    pub model: SparseRowModel,
}

/// Fits on `train` for every grid value, scores on `val`, picks the
/// lowest validation mse_x100 (ties go to the smallest value), then
/// refits on train ∪ val at the winner.
pub fn cross_validate(
    train: &[ImagePair],
    val: &[ImagePair],
    spec: &FitSpec,
    grid: &CvGrid,
) -> Result<CvOutcome> {
    if grid.solver != spec.solver {
        return Err(LrfError::Data(format!(
            "grid is for {}, fit spec uses {}",
            grid.solver, spec.solver
        )));
    }
    if train.is_empty() || val.is_empty() {
        return Err(LrfError::Data(
            "cross-validation needs nonempty train and validation sets".into(),
        ));
    }
    let mut scores = Vec::with_capacity(grid.values.len());
    for &lambda in &grid.values {
        let model = fit_from_pairs(train, spec, lambda)?;
        let score = model_mse_x100(&model, val)?;
        if !score.is_finite() {
            return Err(LrfError::Numeric(format!(
                "validation mse is not finite at lambda {lambda}"
            )));
        }
        scores.push((lambda, score));
    }
    let best_lambda = scores
        .iter()
        .fold((f64::NAN, f64::INFINITY), |best, &(l, s)| {
            if s < best.1 {
                (l, s)
            } else {
                best
            }
        })
        .0;
    let combined: Vec<ImagePair> = train.iter().chain(val).cloned().collect();
    let model = fit_from_pairs(&combined, spec, best_lambda)?;
    Ok(CvOutcome {
        best_lambda,
        scores,
        model,
    })
}

/// nonzeros(a) / nonzeros(b) at the given magnitude tolerance.
pub fn sparsity_ratio(a: &SparseRowModel, b: &SparseRowModel, tolerance: f64) -> Result<f64> {
    let na = a.count_nonzeros(tolerance)?;
    let nb = b.count_nonzeros(tolerance)?;
    if nb == 0 {
        return Err(LrfError::Numeric(
            "sparsity ratio undefined: second model has no nonzeros".into(),
        ));
    }
    Ok(na as f64 / nb as f64)
}

/// Fits one model per receptive-field size and scores each on
/// `eval_pairs`; returns (r, mse_x100) in the given order.
pub fn sweep_rf_sizes(
    train: &[ImagePair],
    eval_pairs: &[ImagePair],
    spec: &FitSpec,
    lambda: f64,
    sizes: &[usize],
) -> Result<Vec<(usize, f64)>> {
    sizes
        .iter()
        .map(|&r| {
            let sized = spec.with_rf(r, spec.dilation);
            let model = fit_from_pairs(train, &sized, lambda)?;
            Ok((r, model_mse_x100(&model, eval_pairs)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_masked_grid_is_the_published_ten_values() {
        let grid = CvGrid::default_masked();
        assert_eq!(
            grid.values(),
            &[0.1, 1.2, 2.3, 3.4, 4.5, 5.6, 6.7, 7.8, 8.9, 10.0]
        );
        assert_eq!(CvGrid::default_ridge().values(), grid.values());
    }

    #[test]
    fn default_lasso_grid_spans_log_space() {
        let grid = CvGrid::default_lasso();
        assert_eq!(grid.values().len(), 100);
        assert_relative_eq!(grid.values()[0], 1e-3, max_relative = 1e-12);
        assert_relative_eq!(grid.values()[99], 1e2, max_relative = 1e-12);
        assert!(grid.values().windows(2).all(|w| w[0] < w[1]));
        let ratio0 = grid.values()[1] / grid.values()[0];
        let ratio50 = grid.values()[51] / grid.values()[50];
        assert_relative_eq!(ratio0, ratio50, max_relative = 1e-9);
    }

    #[test]
    fn omp_grids() {
        assert_eq!(
            CvGrid::default_omp(5).unwrap().values(),
            &[1.0, 2.0, 3.0, 4.0, 5.0]
        );
        assert_eq!(
            CvGrid::default_omp_comparable(100, 3).unwrap().values().len(),
            10
        );
        assert_eq!(
            CvGrid::default_omp_comparable(4, 3).unwrap().values().len(),
            4
        );
    }

    #[test]
    fn grid_validation_rejects_bad_inputs() {
        assert!(CvGrid::new(SolverKind::Masked, vec![]).is_err());
        assert!(CvGrid::new(SolverKind::Masked, vec![0.0, 1.0]).is_err());
        assert!(CvGrid::new(SolverKind::Masked, vec![2.0, 1.0]).is_err());
        assert!(CvGrid::new(SolverKind::Masked, vec![1.0, 1.0]).is_err());
        assert!(CvGrid::new(SolverKind::Omp, vec![1.5]).is_err());
        assert!(CvGrid::new(SolverKind::Omp, vec![1.0, 2.0]).is_ok());
    }

    fn flat_image(side: usize, value: f64) -> ImageBuffer {
        ImageBuffer::new(side, side, 1, vec![value; side * side]).unwrap()
    }

    #[test]
    fn mse_trivial_values() {
        let a = vec![flat_image(3, 1.0)];
        let b = vec![flat_image(3, 0.0)];
        assert_eq!(mse_x100(&a, &a).unwrap(), 0.0);
        assert_relative_eq!(mse_x100(&a, &b).unwrap(), 100.0);
        let c = vec![flat_image(3, 0.5)];
        let d = vec![flat_image(3, 0.4)];
        assert_relative_eq!(mse_x100(&c, &d).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(
            mse_x100(&c, &d).unwrap().to_bits(),
            mse_x100(&d, &c).unwrap().to_bits()
        );
    }

    #[test]
    fn mse_rejects_mismatches() {
        let a = vec![flat_image(3, 0.5)];
        let b = vec![flat_image(4, 0.5)];
        assert!(mse_x100(&a, &b).is_err());
        assert!(mse_x100(&a, &[]).is_err());
    }

    /// Pairs whose target is a fixed local linear map of the input, with
    /// optional noise. Values stay inside [0, 1].
    fn local_task(
        rng: &mut ChaCha8Rng,
        n: usize,
        side: usize,
        support: usize,
        noise: f64,
    ) -> Vec<ImagePair> {
        let geometry = RfGeometry::square(side, support, 1);
        let topology = Topology::build(geometry).unwrap();
        let true_rows: Vec<Vec<f64>> = topology
            .rows()
            .iter()
            .map(|idx| idx.iter().map(|_| rng.gen_range(-0.05..0.05)).collect())
            .collect();
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..side * side)
                    .map(|_| rng.gen_range(0.25..0.75))
                    .collect();
                let y: Vec<f64> = topology
                    .rows()
                    .iter()
                    .zip(&true_rows)
                    .map(|(idx, weights)| {
                        let lin: f64 = idx
                            .iter()
                            .zip(weights)
                            .map(|(&j, w)| w * (x[j as usize] - 0.5))
                            .sum();
                        let eps = if noise > 0.0 {
                            rng.gen_range(-noise..noise)
                        } else {
                            0.0
                        };
                        (0.5 + lin + eps).clamp(0.0, 1.0)
                    })
                    .collect();
                ImagePair::new(
                    ImageBuffer::new(side, side, 1, x).unwrap(),
                    ImageBuffer::new(side, side, 1, y).unwrap(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn single_value_grid_is_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = local_task(&mut rng, 8, 6, 3, 0.01);
        let (train, val) = pairs.split_at(6);
        let spec = FitSpec::new(SolverKind::Masked, ChannelStrategy::Grayscale);
        let grid = CvGrid::new(SolverKind::Masked, vec![2.5]).unwrap();
        let outcome = cross_validate(train, val, &spec, &grid).unwrap();
        assert_eq!(outcome.best_lambda, 2.5);
        assert_eq!(outcome.scores.len(), 1);
    }

    #[test]
    fn noise_free_local_task_prefers_least_shrinkage() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs = local_task(&mut rng, 16, 8, 3, 0.0);
        let (train, val) = pairs.split_at(12);
        let spec = FitSpec::new(SolverKind::Masked, ChannelStrategy::Grayscale);
        let outcome = cross_validate(train, val, &spec, &CvGrid::default_masked()).unwrap();
        assert_eq!(outcome.best_lambda, 0.1);
        for window in outcome.scores.windows(2) {
            assert!(window[0].1 <= window[1].1, "scores not increasing: {:?}", outcome.scores);
        }
    }

    #[test]
    fn cross_validation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs = local_task(&mut rng, 10, 6, 3, 0.02);
        let (train, val) = pairs.split_at(8);
        let spec = FitSpec::new(SolverKind::Masked, ChannelStrategy::Grayscale);
        let grid = CvGrid::new(SolverKind::Masked, vec![0.5, 1.0, 2.0]).unwrap();
        let a = cross_validate(train, val, &spec, &grid).unwrap();
        let b = cross_validate(train, val, &spec, &grid).unwrap();
        assert_eq!(a.best_lambda, b.best_lambda);
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert_eq!(x.1.to_bits(), y.1.to_bits());
        }
        assert_eq!(
            a.model.to_bytes().unwrap(),
            b.model.to_bytes().unwrap()
        );
    }

    #[test]
    fn grid_and_spec_solver_must_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs = local_task(&mut rng, 6, 4, 3, 0.0);
        let (train, val) = pairs.split_at(4);
        let spec = FitSpec::new(SolverKind::Ridge, ChannelStrategy::Grayscale);
        let err = cross_validate(train, val, &spec, &CvGrid::default_masked()).unwrap_err();
        assert!(err.to_string().contains("grid"), "{err}");
    }

    /// True 5×5-support mapping: the receptive-field sweep must bottom
    /// out at an interior size, not shrink monotonically with r.
    #[test]
    fn rf_sweep_has_interior_minimum_on_5x5_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs = local_task(&mut rng, 60, 12, 5, 0.02);
        let (train, rest) = pairs.split_at(40);
        let spec = FitSpec::new(SolverKind::Masked, ChannelStrategy::Grayscale);
        // Light regularisation: the planted weights are small, and a heavy
        // ridge penalty would shrink every size towards the same constant map.
        let sweep = sweep_rf_sizes(train, rest, &spec, 0.01, &[1, 3, 5, 7]).unwrap();
        let best = sweep
            .iter()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(best.0, 5, "sweep: {sweep:?}");
        let r7 = sweep.iter().find(|(r, _)| *r == 7).unwrap().1;
        let r5 = sweep.iter().find(|(r, _)| *r == 5).unwrap().1;
        assert!(r7 > r5, "enlarging past the true support did not hurt");
    }

    #[test]
    fn sparsity_ratio_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pairs = local_task(&mut rng, 8, 5, 3, 0.01);
        let spec = FitSpec::new(SolverKind::Masked, ChannelStrategy::Grayscale);
        let model = fit_from_pairs(&pairs, &spec, 1.0).unwrap();
        assert_relative_eq!(sparsity_ratio(&model, &model, 1e-12).unwrap(), 1.0);
    }

    #[test]
    fn per_channel_fit_produces_three_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let make = |rng: &mut ChaCha8Rng| {
            let data: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
            ImageBuffer::new(4, 4, 3, data).unwrap()
        };
        let pairs: Vec<ImagePair> = (0..6)
            .map(|_| ImagePair::new(make(&mut rng), make(&mut rng)).unwrap())
            .collect();
        let spec = FitSpec::new(SolverKind::Masked, ChannelStrategy::PerChannel);
        let model = fit_from_pairs(&pairs, &spec, 1.0).unwrap();
        assert_eq!(model.channel_maps().len(), 3);
        let out = model.synthesize(&pairs[0].input).unwrap();
        assert_eq!(out.channels(), 3);
    }
}
