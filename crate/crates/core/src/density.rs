//! Per-document target distributions: region counting for atlases and
//! FFT-accelerated Gaussian KDE for voxel grids.
//!
//! The KDE follows the binned scheme: coordinates are assigned whole to the
//! voxel containing them, the bin counts are zero-padded to power-of-two
//! sizes and convolved with a truncated Gaussian block laid out with
//! wrap-around symmetry, and the upper corner of the circular convolution is
//! the estimate at every voxel.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::volume_space::{DensityVolume, Grid, Partition, PartitionKind};

/// Gaussian KDE settings. Kernel std along each axis is `h × voxel size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeConfig {
    pub h: f64,
    /// Offsets beyond `truncation × h` voxels are dropped from the kernel.
    pub truncation: f64,
}

impl Default for KdeConfig {
    fn default() -> Self {
        KdeConfig { h: 1.0, truncation: 5.0 }
    }
}

impl KdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(invalid("h", "bandwidth multiplier must be positive"));
        }
        if !(self.truncation >= 3.0) {
            return Err(invalid("truncation", "truncation radius must be at least 3"));
        }
        Ok(())
    }
}

/// Full width at half maximum (mm) of the isotropic kernel on voxels of size `delta`.
pub fn fwhm(h: f64, delta: f64) -> f64 {
    2.0 * delta * h * (2.0 * 2f64.ln()).sqrt()
}

/// Bin counts on the grid plus the total coordinate weight `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedSample {
    pub grid: Grid,
    pub counts: Vec<f64>,
    pub total: f64,
}

/// Simple binning: each coordinate's whole weight goes to its containing voxel.
/// Points outside the grid count toward `total` only.
pub fn bin_samples(grid: &Grid, coords: &[[f64; 3]], weights: Option<&[f64]>) -> Result<BinnedSample> {
    if let Some(w) = weights {
        if w.len() != coords.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} coordinates",
                w.len(),
                coords.len()
            )));
        }
        if w.iter().any(|&x| !(x >= 0.0)) {
            return Err(invalid("weights", "weights must be nonnegative"));
        }
    }
    let mut counts = vec![0.0; grid.n_voxels()];
    for (a, &p) in coords.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[a]);
        if let Some(ijk) = grid.locate_voxel(p) {
            counts[grid.linear_index(ijk)] += w;
        }
    }
    Ok(BinnedSample {
        grid: grid.clone(),
        counts,
        total: coords.len() as f64,
    })
}

/// Zero-padded, wrap-symmetric truncated Gaussian block.
#[derive(Debug, Clone)]
pub struct KernelBlock {
    /// Padded dimensions (powers of two).
    pub theta: [usize; 3],
    /// Largest kept offset along each axis.
    pub lambda: [usize; 3],
    /// `θx·θy·θz` values, x-fastest.
    pub values: Vec<f64>,
}

impl KernelBlock {
    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[i + self.theta[0] * (j + self.theta[1] * k)]
    }
}

/// Largest kept offset `min(n - 1, ⌊truncation · σ / δ⌋)` where `σ = h δ`.
pub fn kernel_cutoff(n: usize, config: &KdeConfig) -> usize {
    let cut = (config.truncation * config.h).floor() as usize;
    cut.min(n - 1)
}

pub fn build_kernel_block(shape: [usize; 3], voxel_size: [f64; 3], config: &KdeConfig) -> KernelBlock {
    let mut lambda = [0; 3];
    let mut theta = [0; 3];
    let mut axes: [Vec<f64>; 3] = Default::default();
    for a in 0..3 {
        lambda[a] = kernel_cutoff(shape[a], config);
        theta[a] = (shape[a] + lambda[a] + 1).next_power_of_two();
        let sigma = config.h * voxel_size[a];
        let norm = 1.0 / ((2.0 * PI).sqrt() * sigma);
        let mut line = vec![0.0; theta[a]];
        for o in 0..=lambda[a] {
            let u = o as f64 * voxel_size[a] / sigma;
            let v = norm * (-0.5 * u * u).exp();
            line[o] = v;
            if o > 0 {
                line[theta[a] - o] = v;
            }
        }
        axes[a] = line;
    }
    let [tx, ty, tz] = theta;
    let mut values = vec![0.0; tx * ty * tz];
    for k in 0..tz {
        let vz = axes[2][k];
        if vz == 0.0 {
            continue;
        }
        for j in 0..ty {
            let vyz = axes[1][j] * vz;
            if vyz == 0.0 {
                continue;
            }
            let row = &mut values[tx * (j + ty * k)..tx * (j + ty * k) + tx];
            for (i, r) in row.iter_mut().enumerate() {
                *r = axes[0][i] * vyz;
            }
        }
    }
    KernelBlock { theta, lambda, values }
}

/// Reusable KDE on one grid: the kernel spectrum and FFT plans are computed once.
pub struct KdeEngine {
    grid: Grid,
    config: KdeConfig,
    kernel: KernelBlock,
    kernel_hat: Vec<Complex<f64>>,
    plans: [(Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>); 3],
}

impl std::fmt::Debug for KdeEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KdeEngine")
            .field("shape", &self.grid.shape)
            .field("config", &self.config)
            .field("theta", &self.kernel.theta)
            .finish()
    }
}

impl KdeEngine {
    pub fn new(grid: &Grid, config: KdeConfig) -> Result<Self> {
        config.validate()?;
        let kernel = build_kernel_block(grid.shape, grid.affine.voxel_sizes(), &config);
        let mut planner = FftPlanner::new();
        let plans = kernel
            .theta
            .map(|t| (planner.plan_fft_forward(t), planner.plan_fft_inverse(t)));
        let mut kernel_hat: Vec<Complex<f64>> =
            kernel.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft3(&mut kernel_hat, kernel.theta, &plans, true);
        Ok(KdeEngine {
            grid: grid.clone(),
            config,
            kernel,
            kernel_hat,
            plans,
        })
    }

    pub fn kernel(&self) -> &KernelBlock {
        &self.kernel
    }

    pub fn config(&self) -> KdeConfig {
        self.config
    }

    /// `p̂ = (K ∗ W)[:nx, :ny, :nz] / c`, clamped at zero.
    pub fn density(&self, binned: &BinnedSample) -> Result<DensityVolume> {
        if binned.grid.shape != self.grid.shape {
            return Err(Error::ShapeMismatch("binned sample is on a different grid".into()));
        }
        if !(binned.total > 0.0) {
            return Err(Error::Empty("no coordinates to estimate a density from".into()));
        }
        let [tx, ty, tz] = self.kernel.theta;
        let [nx, ny, nz] = self.grid.shape;
        let mut buf = vec![Complex::new(0.0, 0.0); tx * ty * tz];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    buf[i + tx * (j + ty * k)].re = binned.counts[i + nx * (j + ny * k)];
                }
            }
        }
        fft3(&mut buf, self.kernel.theta, &self.plans, true);
        for (b, kh) in buf.iter_mut().zip(&self.kernel_hat) {
            *b *= kh;
        }
        fft3(&mut buf, self.kernel.theta, &self.plans, false);
        let scale = 1.0 / ((tx * ty * tz) as f64 * binned.total);
        let mut values = vec![0.0; nx * ny * nz];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let v = buf[i + tx * (j + ty * k)].re * scale;
                    values[i + nx * (j + ny * k)] = v.max(0.0);
                }
            }
        }
        DensityVolume::new(self.grid.clone(), values)
    }
}

/// One-shot KDE density; prefer [`KdeEngine`] when estimating many documents.
pub fn kde_density(binned: &BinnedSample, config: &KdeConfig) -> Result<DensityVolume> {
    KdeEngine::new(&binned.grid, *config)?.density(binned)
}

fn fft3(
    buf: &mut [Complex<f64>],
    dims: [usize; 3],
    plans: &[(Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>); 3],
    forward: bool,
) {
    let [tx, ty, tz] = dims;
    let pick = |a: usize| if forward { &plans[a].0 } else { &plans[a].1 };
    // x lines are contiguous
    pick(0).process(buf);
    let mut line = vec![Complex::new(0.0, 0.0); ty.max(tz)];
    for k in 0..tz {
        for i in 0..tx {
            let l = &mut line[..ty];
            for j in 0..ty {
                l[j] = buf[i + tx * (j + ty * k)];
            }
            pick(1).process(l);
            for j in 0..ty {
                buf[i + tx * (j + ty * k)] = l[j];
            }
        }
    }
    let plane = tx * ty;
    for p in 0..plane {
        let l = &mut line[..tz];
        for k in 0..tz {
            l[k] = buf[p + plane * k];
        }
        pick(2).process(l);
        for k in 0..tz {
            buf[p + plane * k] = l[k];
        }
    }
}

/// Per-document target estimator bound to a partition.
#[derive(Debug)]
pub enum TargetEstimator<'a> {
    Atlas(&'a Partition),
    Voxel { partition: &'a Partition, engine: KdeEngine },
}

impl<'a> TargetEstimator<'a> {
    pub fn new(partition: &'a Partition, config: &KdeConfig) -> Result<Self> {
        Ok(match partition.kind {
            PartitionKind::Atlas => TargetEstimator::Atlas(partition),
            PartitionKind::VoxelGrid => TargetEstimator::Voxel {
                partition,
                engine: KdeEngine::new(&partition.grid, *config)?,
            },
        })
    }

    /// Plugin coefficients `ŷ` for one document: region counts over `c` for
    /// atlases, KDE probability mass per voxel for grids.
    pub fn estimate(&self, coords: &[[f64; 3]]) -> Result<Vec<f64>> {
        if coords.is_empty() {
            return Err(Error::Empty("document has no coordinates".into()));
        }
        match self {
            TargetEstimator::Atlas(p) => {
                let mut y = vec![0.0; p.m()];
                for &c in coords {
                    let k = p.locate(c);
                    if k > 0 {
                        y[k - 1] += 1.0;
                    }
                }
                let c = coords.len() as f64;
                y.iter_mut().for_each(|v| *v /= c);
                Ok(y)
            }
            TargetEstimator::Voxel { partition, engine } => {
                let binned = bin_samples(&partition.grid, coords, None)?;
                let pdf = engine.density(&binned)?;
                let vv = partition.grid.affine.voxel_volume();
                Ok((1..=partition.m())
                    .map(|k| pdf.values[partition.voxels_of(k)[0]] * vv)
                    .collect())
            }
        }
    }
}

pub fn estimate_targets(partition: &Partition, coords: &[[f64; 3]], config: &KdeConfig) -> Result<Vec<f64>> {
    TargetEstimator::new(partition, config)?.estimate(coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_space::{build_voxel_partition, load_atlas_partition, Affine};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Direct sum over bins with the same truncated kernel.
    fn naive_kde(binned: &BinnedSample, config: &KdeConfig) -> Vec<f64> {
        let g = &binned.grid;
        let sizes = g.affine.voxel_sizes();
        let lam: Vec<i64> = (0..3).map(|a| kernel_cutoff(g.shape[a], config) as i64).collect();
        let mut out = vec![0.0; g.n_voxels()];
        for (dst, o) in out.iter_mut().enumerate() {
            let p = g.unravel(dst);
            for (src, &w) in binned.counts.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let q = g.unravel(src);
                let mut val = 1.0;
                for a in 0..3 {
                    let off = p[a] as i64 - q[a] as i64;
                    if off.abs() > lam[a] {
                        val = 0.0;
                        break;
                    }
                    let sigma = config.h * sizes[a];
                    let u = off as f64 * sizes[a] / sigma;
                    val *= (-0.5 * u * u).exp() / ((2.0 * PI).sqrt() * sigma);
                }
                *o += w * val;
            }
            *o /= binned.total;
        }
        out
    }

    fn grid(n: usize, delta: f64) -> Grid {
        Grid::new([n; 3], Affine::diagonal([delta; 3], [0.0; 3])).unwrap()
    }

    #[test]
    fn binning_counts() {
        let g = grid(4, 1.0);
        let b = bin_samples(&g, &[[0.5; 3], [0.2, 0.3, 0.9], [0.0; 3]], None).unwrap();
        assert_eq!(b.counts[0], 3.0);
        assert_eq!(b.total, 3.0);
        let b = bin_samples(&g, &[[-1.0, 0.0, 0.0]], None).unwrap();
        assert!(b.counts.iter().all(|&w| w == 0.0));
        assert_eq!(b.total, 1.0);
        // boundary x = 1 falls in voxel 1: 1·δ ≤ x < 2·δ
        let b = bin_samples(&g, &[[1.0, 0.5, 0.5]], None).unwrap();
        assert_eq!(b.counts[1], 1.0);
        assert!(bin_samples(&g, &[[0.5; 3]], Some(&[-1.0])).is_err());
    }

    #[test]
    fn kernel_block_layout() {
        let cfg = KdeConfig::default();
        let kb = build_kernel_block([8, 8, 8], [1.0; 3], &cfg);
        assert_eq!(kb.lambda, [5, 5, 5]);
        assert_eq!(kb.theta, [16, 16, 16]);
        let k0 = (2.0 * PI).powf(-1.5);
        assert!((kb.at(0, 0, 0) - k0).abs() < 1e-15);
        assert!((kb.at(0, 0, 0) - 0.063_493_635).abs() < 1e-8);
        assert_eq!(kb.at(15, 0, 0), kb.at(1, 0, 0));
        assert_eq!(kb.at(3, 14, 11), kb.at(3, 2, 5));
        assert_eq!(kb.at(6, 0, 0), 0.0);
        assert_eq!(kb.at(10, 0, 0), 0.0);
        let small = build_kernel_block([3, 4, 20], [4.0; 3], &cfg);
        assert_eq!(small.lambda, [2, 3, 5]);
        assert_eq!(small.theta, [8, 8, 32]);
        let wide = build_kernel_block([4, 4, 4], [2.0; 3], &cfg);
        assert!((wide.at(0, 0, 0) - k0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn single_point_peak() {
        let g = grid(9, 1.0);
        let b = bin_samples(&g, &[[4.5, 4.5, 4.5]], None).unwrap();
        let v = kde_density(&b, &KdeConfig::default()).unwrap();
        let c = g.linear_index([4, 4, 4]);
        assert!((v.values[c] - (2.0 * PI).powf(-1.5)).abs() < 1e-12);
    }

    #[test]
    fn empty_sample_rejected() {
        let g = grid(4, 1.0);
        let b = bin_samples(&g, &[], None).unwrap();
        assert!(kde_density(&b, &KdeConfig::default()).is_err());
        assert!(KdeEngine::new(&g, KdeConfig { h: 0.0, truncation: 5.0 }).is_err());
        assert!(KdeEngine::new(&g, KdeConfig { h: 1.0, truncation: 2.0 }).is_err());
    }

    #[test]
    fn fwhm_default_grid() {
        assert!((fwhm(1.0, 4.0) - 9.4193).abs() < 1e-3);
    }

    #[test]
    fn fft_matches_naive_various_bandwidths() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(n, delta, h) in &[(7usize, 1.0, 1.0), (10, 4.0, 0.5), (6, 2.0, 2.0), (12, 3.0, 1.0)] {
            let g = grid(n, delta);
            let ext = n as f64 * delta;
            let pts: Vec<[f64; 3]> = (0..20)
                .map(|_| [rng.random_range(-1.0..ext + 1.0), rng.random_range(0.0..ext), rng.random_range(0.0..ext)])
                .collect();
            let w: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..2.0)).collect();
            let cfg = KdeConfig { h, truncation: 5.0 };
            let b = bin_samples(&g, &pts, Some(&w)).unwrap();
            let fast = kde_density(&b, &cfg).unwrap();
            let slow = naive_kde(&b, &cfg);
            for (a, b) in fast.values.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn atlas_targets_count_regions() {
        let g = Grid::new([4, 1, 1], Affine::diagonal([1.0; 3], [0.0; 3])).unwrap();
        let labels = DensityVolume::new(g, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let p = load_atlas_partition(&labels, &["a".into(), "b".into()]).unwrap();
        let cfg = KdeConfig::default();
        let y = estimate_targets(&p, &[[0.5, 0.5, 0.5], [1.5, 0.2, 0.2], [2.5, 0.5, 0.5]], &cfg).unwrap();
        assert!((y[0] - 2.0 / 3.0).abs() < 1e-15 && (y[1] - 1.0 / 3.0).abs() < 1e-15);
        let y = estimate_targets(&p, &[[9.0, 0.0, 0.0], [-3.0, 0.0, 0.0]], &cfg).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        assert!(estimate_targets(&p, &[], &cfg).is_err());
    }

    #[test]
    fn voxel_targets_mass_matches_naive() {
        let p = build_voxel_partition([0.0; 3], [64.0; 3], 4.0, None).unwrap();
        let cfg = KdeConfig::default();
        // at least 5hδ = 20 mm from every edge
        let pts = [[30.0, 31.0, 33.0], [25.0, 40.0, 22.5], [36.0, 28.0, 41.0]];
        let y = estimate_targets(&p, &pts, &cfg).unwrap();
        let b = bin_samples(&p.grid, &pts, None).unwrap();
        let naive_mass: f64 = naive_kde(&b, &cfg).iter().sum::<f64>() * 64.0;
        let total: f64 = y.iter().sum();
        assert!((total - naive_mass).abs() < 1e-3);
        assert!((total - 1.0).abs() < 1e-3);
    }

    fn random_points(seed: u64, k: usize, ext: f64) -> Vec<[f64; 3]> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| [rng.random_range(0.0..ext), rng.random_range(0.0..ext), rng.random_range(0.0..ext)])
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn concatenation_is_weighted_average(seed in any::<u64>(), k1 in 1usize..10, k2 in 1usize..10) {
            let g = grid(8, 2.0);
            let cfg = KdeConfig::default();
            let a = random_points(seed, k1, 16.0);
            let b = random_points(seed ^ 0xdead, k2, 16.0);
            let both: Vec<_> = a.iter().chain(&b).copied().collect();
            let eng = KdeEngine::new(&g, cfg).unwrap();
            let da = eng.density(&bin_samples(&g, &a, None).unwrap()).unwrap();
            let db = eng.density(&bin_samples(&g, &b, None).unwrap()).unwrap();
            let dab = eng.density(&bin_samples(&g, &both, None).unwrap()).unwrap();
            let (w1, w2) = (k1 as f64 / (k1 + k2) as f64, k2 as f64 / (k1 + k2) as f64);
            for i in 0..g.n_voxels() {
                prop_assert!((dab.values[i] - (w1 * da.values[i] + w2 * db.values[i])).abs() < 1e-10);
            }
        }

        #[test]
        fn shift_by_one_voxel(seed in any::<u64>()) {
            let g = grid(16, 1.0);
            let cfg = KdeConfig::default();
            let pts: Vec<[f64; 3]> = random_points(seed, 5, 4.0).iter().map(|p| [p[0] + 6.0, p[1] + 6.0, p[2] + 6.0]).collect();
            let shifted: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + 1.0, p[1], p[2]]).collect();
            let eng = KdeEngine::new(&g, cfg).unwrap();
            let d0 = eng.density(&bin_samples(&g, &pts, None).unwrap()).unwrap();
            let d1 = eng.density(&bin_samples(&g, &shifted, None).unwrap()).unwrap();
            for k in 0..16 {
                for j in 0..16 {
                    for i in 0..15 {
                        let a = d0.values[g.linear_index([i, j, k])];
                        let b = d1.values[g.linear_index([i + 1, j, k])];
                        prop_assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn padding_is_power_of_two(nx in 1usize..40, ny in 1usize..40, nz in 1usize..40, h in 0.3f64..3.0) {
            let cfg = KdeConfig { h, truncation: 5.0 };
            let kb = build_kernel_block([nx, ny, nz], [1.0, 2.0, 3.0], &cfg);
            for (a, n) in [nx, ny, nz].into_iter().enumerate() {
                prop_assert!(kb.theta[a].is_power_of_two());
                prop_assert!(kb.theta[a] >= n + kb.lambda[a] + 1);
                prop_assert!(kb.theta[a] / 2 < n + kb.lambda[a] + 1);
            }
        }
    }
}
