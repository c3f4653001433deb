//! Squared-loss fits: volume-rescaled ridge regression and the diagonal
//! label-constrained encoder.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par;
use crate::targets::{rescale_for_loss, Loss, TargetMatrix};
use crate::text_features::{normalize_phrase, FeatureMatrix, Vocabulary};
use crate::volume_space::{Partition, PartitionKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RidgeConfig {
    /// Largest `d` solved through a Cholesky factorization; above it CG is used.
    pub direct_max_d: usize,
    /// Relative residual tolerance of the iterative solver.
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        RidgeConfig {
            direct_max_d: 4096,
            cg_tol: 1e-10,
            cg_max_iter: 10_000,
        }
    }
}

/// A fitted squared-loss model.
#[derive(Debug, Clone)]
pub struct RidgeModel {
    pub lambda: f64,
    /// d×m row-major, standardized design, rescaled target basis (`β′`).
    pub coef_rescaled: Vec<f64>,
    /// Per-column factor applied to the targets before fitting (`1/√v_k` or 1).
    pub column_factor: Vec<f64>,
    /// d×m row-major coefficients on raw frequencies, original target units.
    pub coef: Vec<f64>,
    /// Original target units.
    pub intercept: Vec<f64>,
    /// Problems that did not stop the fit (e.g. labels missing from the vocabulary).
    pub warnings: Vec<String>,
}

impl RidgeModel {
    pub fn d(&self) -> usize {
        self.coef.len() / self.intercept.len().max(1)
    }

    pub fn m(&self) -> usize {
        self.intercept.len()
    }

    /// Prediction in the rescaled basis, `ȳ′ + (x − x̄)/s · β′`.
    pub fn predict_rescaled(&self, features: &FeatureMatrix, x: &crate::text_features::SparseRow, target_means: &[f64]) -> Vec<f64> {
        let m = self.m();
        let (mean, scale, zero) = (features.mean(), features.scale(), features.zero_variance());
        let mut out: Vec<f64> = target_means.iter().zip(&self.column_factor).map(|(a, f)| a * f).collect();
        for t in 0..features.d() {
            if zero[t] {
                continue;
            }
            let z = (x.get(t) - mean[t]) / scale[t];
            if z == 0.0 {
                continue;
            }
            for k in 0..m {
                out[k] += z * self.coef_rescaled[t * m + k];
            }
        }
        out
    }

    /// Prediction on raw frequencies in original target units.
    pub fn predict(&self, x: &crate::text_features::SparseRow) -> Vec<f64> {
        let m = self.m();
        let mut out = self.intercept.clone();
        for (&t, &v) in x.indices.iter().zip(&x.values) {
            for k in 0..m {
                out[k] += v * self.coef[t * m + k];
            }
        }
        out
    }
}

fn validate(features: &FeatureMatrix, targets: &TargetMatrix, lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda", format!("must be positive, got {lambda}")));
    }
    if features.n() != targets.n() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows but {} target rows",
            features.n(),
            targets.n()
        )));
    }
    Ok(())
}

/// Ridge on the centered standardized design against already-rescaled targets `Y′`.
///
/// Returns `β′` (d×m row-major, standardized basis).
pub fn solve_ridge(features: &FeatureMatrix, rescaled: &TargetMatrix, lambda: f64, cfg: &RidgeConfig) -> Result<Vec<f64>> {
    validate(features, rescaled, lambda)?;
    let d = features.d();
    let m = rescaled.m();
    let rhs: Vec<Vec<f64>> = par::map_range(m, |k| features.centered_t_mul(&rescaled.centered_column(k)));
    let cols: Vec<Vec<f64>> = if d <= cfg.direct_max_d {
        let mut a = DMatrix::from_row_slice(d, d, &features.centered_gram());
        for t in 0..d {
            a[(t, t)] += lambda;
        }
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Incompatible("ridge system is not positive definite".into()))?;
        par::map(&rhs, |b| chol.solve(&DVector::from_column_slice(b)).as_slice().to_vec())
    } else {
        par::map(&rhs, |b| conjugate_gradient(features, b, lambda, cfg))
    };
    let mut out = vec![0.0; d * m];
    for (k, c) in cols.iter().enumerate() {
        for t in 0..d {
            out[t * m + k] = c[t];
        }
    }
    Ok(out)
}

/// Solves `(X_cᵀX_c + λI) β = b` matrix-free.
fn conjugate_gradient(features: &FeatureMatrix, b: &[f64], lambda: f64, cfg: &RidgeConfig) -> Vec<f64> {
    let apply = |v: &[f64]| -> Vec<f64> {
        let xv = features.centered_mul(v);
        let mut out = features.centered_t_mul(&xv);
        for (o, vi) in out.iter_mut().zip(v) {
            *o += lambda * vi;
        }
        out
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let bn = dot(b, b).sqrt();
    let mut x = vec![0.0; b.len()];
    if bn == 0.0 {
        return x;
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for _ in 0..cfg.cg_max_iter {
        if rr.sqrt() <= cfg.cg_tol * bn {
            break;
        }
        let ap = apply(&p);
        let alpha = rr / dot(&p, &ap);
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
    }
    x
}

/// Volume-rescaled ridge: targets are divided by `√v_k`, fitted, and mapped back.
pub fn fit_ridge(
    features: &FeatureMatrix,
    targets: &TargetMatrix,
    partition: &Partition,
    lambda: f64,
    cfg: &RidgeConfig,
) -> Result<RidgeModel> {
    if targets.m() != partition.m() {
        return Err(Error::ShapeMismatch(format!(
            "targets have {} columns, partition has {} regions",
            targets.m(),
            partition.m()
        )));
    }
    let r = rescale_for_loss(targets, Loss::L2, partition);
    let coef_rescaled = solve_ridge(features, &r.targets, lambda, cfg)?;
    Ok(finish(features, targets, lambda, coef_rescaled, r.column_factor, Vec::new()))
}

/// Maps `β′` in the standardized basis to raw coefficients and intercepts.
pub(crate) fn finish(
    features: &FeatureMatrix,
    targets: &TargetMatrix,
    lambda: f64,
    coef_rescaled: Vec<f64>,
    column_factor: Vec<f64>,
    warnings: Vec<String>,
) -> RidgeModel {
    let d = features.d();
    let m = targets.m();
    let (mean, scale, zero) = (features.mean(), features.scale(), features.zero_variance());
    let mut coef = vec![0.0; d * m];
    for t in 0..d {
        if zero[t] {
            continue;
        }
        for k in 0..m {
            coef[t * m + k] = coef_rescaled[t * m + k] / scale[t] / column_factor[k];
        }
    }
    let intercept = (0..m)
        .map(|k| targets.means()[k] - (0..d).map(|t| mean[t] * coef[t * m + k]).sum::<f64>())
        .collect();
    RidgeModel {
        lambda,
        coef_rescaled,
        column_factor,
        coef,
        intercept,
        warnings,
    }
}

/// One univariate ridge per region on the frequency of that region's label.
///
/// Uses raw centered frequencies and raw targets, so each coefficient equals
/// `Σ(x−x̄)(y−ȳ) / (Σ(x−x̄)² + λ)`.
pub fn fit_label_constrained(
    features: &FeatureMatrix,
    vocab: &Vocabulary,
    targets: &TargetMatrix,
    partition: &Partition,
    lambda: f64,
) -> Result<RidgeModel> {
    validate(features, targets, lambda)?;
    if partition.kind == PartitionKind::VoxelGrid {
        return Err(Error::Incompatible(
            "the label-constrained encoder needs an atlas with region labels, not a voxel grid".into(),
        ));
    }
    let labels = partition
        .labels()
        .ok_or_else(|| Error::Incompatible("partition has no region labels".into()))?;
    if targets.m() != partition.m() || features.d() != vocab.len() {
        return Err(Error::ShapeMismatch("features, vocabulary, targets and partition disagree".into()));
    }
    let d = features.d();
    let m = targets.m();
    let mut coef = vec![0.0; d * m];
    let mut warnings = Vec::new();
    for (k, label) in labels.iter().enumerate() {
        let Some(t) = vocab.get(&normalize_phrase(label)) else {
            warnings.push(format!("label `{label}` of region {} is not in the vocabulary; coefficient set to 0", k + 1));
            continue;
        };
        let x = features.raw_column(t);
        let y = targets.column(k);
        let xm = x.iter().sum::<f64>() / x.len() as f64;
        let ym = targets.means()[k];
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - xm) * (b - ym)).sum();
        let sxx: f64 = x.iter().map(|a| (a - xm) * (a - xm)).sum();
        coef[t * m + k] = sxy / (sxx + lambda);
    }
    let mean = features.mean();
    let intercept = (0..m)
        .map(|k| targets.means()[k] - (0..d).map(|t| mean[t] * coef[t * m + k]).sum::<f64>())
        .collect();
    Ok(RidgeModel {
        lambda,
        coef_rescaled: coef.clone(),
        column_factor: vec![1.0; m],
        coef,
        intercept,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_features::{Scaling, SparseRow};
    use crate::volume_space::{build_voxel_partition, load_atlas_partition, Affine, DensityVolume, Grid};
    use rand::{Rng, SeedableRng};

    fn instance(seed: u64, n: usize, d: usize, m: usize) -> (FeatureMatrix, TargetMatrix) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<SparseRow> = (0..n)
            .map(|_| {
                let mut r = SparseRow::default();
                for t in 0..d {
                    if rng.random_bool(0.4) {
                        r.indices.push(t);
                        r.values.push(rng.random_range(0.0..1.0));
                    }
                }
                r
            })
            .collect();
        let fm = FeatureMatrix::from_rows(&rows, d, vec![String::new(); n], Scaling::NVariance).unwrap();
        let y = (0..n * m).map(|_| rng.random_range(0.0..1.0)).collect();
        (fm, TargetMatrix::from_flat(n, m, y))
    }

    fn closed_form(fm: &FeatureMatrix, y: &TargetMatrix, lambda: f64) -> Vec<f64> {
        let (n, d, m) = (fm.n(), fm.d(), y.m());
        let x = DMatrix::from_row_slice(n, d, &fm.dense_centered());
        let yc = DMatrix::from_fn(n, m, |i, k| y.row(i)[k] - y.means()[k]);
        let a = x.transpose() * &x + DMatrix::identity(d, d) * lambda;
        let b = a.try_inverse().unwrap() * x.transpose() * yc;
        (0..d * m).map(|j| b[(j / m, j % m)]).collect()
    }

    #[test]
    fn direct_and_iterative_match_closed_form() {
        let (fm, y) = instance(1, 20, 5, 3);
        let oracle = closed_form(&fm, &y, 0.5);
        let direct = solve_ridge(&fm, &y, 0.5, &RidgeConfig::default()).unwrap();
        let cg = solve_ridge(&fm, &y, 0.5, &RidgeConfig { direct_max_d: 0, ..Default::default() }).unwrap();
        for ((a, b), c) in direct.iter().zip(&cg).zip(&oracle) {
            assert!((a - c).abs() < 1e-8 && (b - c).abs() < 1e-8);
        }
    }

    #[test]
    fn huge_lambda_predicts_means() {
        let (fm, y) = instance(2, 15, 4, 2);
        let b = solve_ridge(&fm, &y, 1e12, &RidgeConfig::default()).unwrap();
        assert!(b.iter().all(|v| v.abs() < 1e-9));
        assert!(solve_ridge(&fm, &y, 0.0, &RidgeConfig::default()).is_err());
    }

    #[test]
    fn raw_prediction_equals_rescaled_prediction() {
        let (fm, _) = instance(3, 25, 6, 1);
        let p = build_voxel_partition([0.0; 3], [8.0, 4.0, 4.0], 4.0, None).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let y = TargetMatrix::from_flat(25, 2, (0..50).map(|_| rng.random_range(0.0..1.0)).collect());
        let model = fit_ridge(&fm, &y, &p, 0.3, &RidgeConfig::default()).unwrap();
        let means: Vec<f64> = y.means().to_vec();
        for i in 0..25 {
            let x = fm.row(i);
            let raw = model.predict(&x);
            let res = model.predict_rescaled(&fm, &x, &means);
            for k in 0..2 {
                assert!((raw[k] - res[k] / model.column_factor[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn columns_decouple_bitwise() {
        let (fm, y) = instance(4, 30, 7, 3);
        let joint = solve_ridge(&fm, &y, 0.2, &RidgeConfig::default()).unwrap();
        for k in 0..3 {
            let one = solve_ridge(&fm, &TargetMatrix::from_flat(30, 1, y.column(k)), 0.2, &RidgeConfig::default()).unwrap();
            for t in 0..7 {
                assert_eq!(one[t], joint[t * 3 + k]);
            }
        }
    }

    fn two_region_atlas(labels: [&str; 2]) -> Partition {
        let g = Grid::new([4, 1, 1], Affine::diagonal([1.0; 3], [0.0; 3])).unwrap();
        let vol = DensityVolume::new(g, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        load_atlas_partition(&vol, &[labels[0].to_string(), labels[1].to_string()]).unwrap()
    }

    #[test]
    fn label_constrained_is_diagonal_and_scalar() {
        let vocab = Vocabulary::new((0..9).map(|i| format!("w{i}"))).unwrap();
        let (fm, y) = instance(5, 40, 9, 2);
        let p = two_region_atlas(["w3", "w7"]);
        let model = fit_label_constrained(&fm, &vocab, &y, &p, 0.1).unwrap();
        for t in 0..9 {
            for k in 0..2 {
                let on = (t, k) == (3, 0) || (t, k) == (7, 1);
                assert_eq!(model.coef[t * 2 + k] != 0.0, on);
            }
        }
        let x = fm.raw_column(3);
        let yc = y.column(0);
        let xm = x.iter().sum::<f64>() / 40.0;
        let ym = yc.iter().sum::<f64>() / 40.0;
        let num: f64 = x.iter().zip(&yc).map(|(a, b)| (a - xm) * (b - ym)).sum();
        let den: f64 = x.iter().map(|a| (a - xm).powi(2)).sum::<f64>() + 0.1;
        assert!((model.coef[6] - num / den).abs() < 1e-12);
    }

    #[test]
    fn label_constrained_warnings_and_errors() {
        let vocab = Vocabulary::new((0..4).map(|i| format!("w{i}"))).unwrap();
        let (fm, y) = instance(6, 10, 4, 2);
        let model = fit_label_constrained(&fm, &vocab, &y, &two_region_atlas(["w1", "absent"]), 1.0).unwrap();
        assert_eq!(model.warnings.len(), 1);
        assert!(model.coef.iter().skip(1).step_by(2).all(|&b| b == 0.0));
        let voxels = build_voxel_partition([0.0; 3], [8.0, 4.0, 4.0], 4.0, None).unwrap();
        assert!(fit_label_constrained(&fm, &vocab, &y, &voxels, 1.0).is_err());
    }
}
