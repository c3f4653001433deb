//! Target matrix assembly and the loss-dependent volume rescaling.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::density::{KdeConfig, TargetEstimator};
use crate::error::{Error, Result};
use crate::par;
use crate::text_features::{Cursor, Document};
use crate::volume_space::Partition;

/// Pointwise discrepancy used by the data-fit term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Absolute difference.
    L1,
    /// Squared difference.
    L2,
}

impl Loss {
    #[inline]
    pub fn apply(self, r: f64) -> f64 {
        match self {
            Loss::L1 => r.abs(),
            Loss::L2 => r * r,
        }
    }
}

/// Dense n×m plugin coefficients `Ŷ` (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    n: usize,
    m: usize,
    values: Vec<f64>,
    means: Vec<f64>,
}

impl TargetMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Empty("no target rows".into()));
        }
        let m = rows[0].len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::ShapeMismatch("target rows have different lengths".into()));
        }
        Ok(Self::from_flat(n, m, rows.into_iter().flatten().collect()))
    }

    pub fn from_flat(n: usize, m: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n * m);
        let mut means = vec![0.0; m];
        for row in values.chunks_exact(m) {
            for (acc, v) in means.iter_mut().zip(row) {
                *acc += v;
            }
        }
        means.iter_mut().for_each(|v| *v /= n as f64);
        TargetMatrix { n, m, values, means }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    /// Column means `ȳ`.
    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.values[i * self.m + k]).collect()
    }

    /// Column `k` minus its mean (the intercept-free dual works on these).
    pub fn centered_column(&self, k: usize) -> Vec<f64> {
        let mu = self.means[k];
        (0..self.n).map(|i| self.values[i * self.m + k] - mu).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> TargetMatrix {
        let values = rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self::from_flat(rows.len(), self.m, values)
    }

    /// Multiply column `k` by `factors[k]`.
    pub fn scale_columns(&self, factors: &[f64]) -> TargetMatrix {
        assert_eq!(factors.len(), self.m);
        let values = self
            .values
            .chunks_exact(self.m)
            .flat_map(|row| row.iter().zip(factors).map(|(v, f)| v * f))
            .collect();
        Self::from_flat(self.n, self.m, values)
    }
}

/// Row `i` = plugin estimate of document `i`. Documents without coordinates are rejected.
pub fn build_targets(docs: &[Document], partition: &Partition, kde: &KdeConfig) -> Result<TargetMatrix> {
    if let Some(d) = docs.iter().find(|d| d.coordinates.is_empty()) {
        return Err(Error::Empty(format!(
            "document `{}` has no coordinates and cannot be used for training",
            d.id
        )));
    }
    let est = TargetEstimator::new(partition, kde)?;
    let rows = par::map(docs, |d| est.estimate(&d.coordinates));
    TargetMatrix::from_rows(rows.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Targets in the basis each solver works in, with the per-column factor that
/// maps fitted coefficients back (`β_{:,k} = β'_{:,k} / factor_k`).
#[derive(Debug, Clone)]
pub struct RescaledTargets {
    pub targets: TargetMatrix,
    pub column_factor: Vec<f64>,
}

/// ℓ2: `Y'_{:,k} = Ŷ_{:,k} / √v_k`. ℓ1: volumes cancel, targets unchanged.
pub fn rescale_for_loss(targets: &TargetMatrix, loss: Loss, partition: &Partition) -> RescaledTargets {
    assert_eq!(targets.m(), partition.m());
    match loss {
        Loss::L1 => RescaledTargets {
            targets: targets.clone(),
            column_factor: vec![1.0; targets.m()],
        },
        Loss::L2 => {
            let f: Vec<f64> = partition.volumes().iter().map(|v| 1.0 / v.sqrt()).collect();
            RescaledTargets {
                targets: targets.scale_columns(&f),
                column_factor: f,
            }
        }
    }
}

/// `∫ δ(p̂(z) − q(z)) dz` evaluated voxel by voxel on the partition's grid.
pub fn integral_loss(partition: &Partition, y_true: &[f64], y_pred: &[f64], loss: Loss) -> f64 {
    let v = partition.volumes();
    let p = partition.paint(&y_true.iter().zip(v).map(|(y, v)| y / v).collect::<Vec<_>>());
    let q = partition.paint(&y_pred.iter().zip(v).map(|(y, v)| y / v).collect::<Vec<_>>());
    let vv = partition.grid.affine.voxel_volume();
    p.values
        .iter()
        .zip(&q.values)
        .map(|(a, b)| loss.apply(a - b) * vv)
        .sum()
}

/// `Σ_k v_k δ(ŷ_k / v_k − ŷ_pred,k / v_k)`.
pub fn factorized_loss(volumes: &[f64], y_true: &[f64], y_pred: &[f64], loss: Loss) -> f64 {
    volumes
        .iter()
        .zip(y_true.iter().zip(y_pred))
        .map(|(v, (a, b))| v * loss.apply(a / v - b / v))
        .sum()
}

/// Data-fit term in the solver basis: `Σ|ŷ − ŷ_pred|` for ℓ1 and
/// `Σ (ŷ/√v − ŷ_pred/√v)²` for ℓ2.
pub fn solver_loss(volumes: &[f64], y_true: &[f64], y_pred: &[f64], loss: Loss) -> f64 {
    match loss {
        Loss::L1 => y_true.iter().zip(y_pred).map(|(a, b)| (a - b).abs()).sum(),
        Loss::L2 => volumes
            .iter()
            .zip(y_true.iter().zip(y_pred))
            .map(|(v, (a, b))| {
                let s = v.sqrt();
                (a / s - b / s).powi(2)
            })
            .sum(),
    }
}

/// Key binding a target cache to its corpus, partition, and KDE settings.
pub fn target_cache_key(docs: &[Document], partition: &Partition, kde: &KdeConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    for d in docs {
        h.update(d.id.as_bytes());
        h.update([0u8]);
        for c in &d.coordinates {
            for x in c {
                h.update(x.to_le_bytes());
            }
        }
    }
    h.update(partition.content_hash());
    h.update(kde.h.to_le_bytes());
    h.update(kde.truncation.to_le_bytes());
    h.finalize().into()
}

const TARGET_MAGIC: &[u8; 8] = b"LXTARGT1";

/// Cache layout: magic, 32-byte key, u64 n, u64 m, then n×m LE f32 rows.
pub fn write_target_cache(t: &TargetMatrix, key: &[u8; 32], path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(56 + t.values.len() * 4);
    out.extend_from_slice(TARGET_MAGIC);
    out.extend_from_slice(key);
    out.extend_from_slice(&(t.n as u64).to_le_bytes());
    out.extend_from_slice(&(t.m as u64).to_le_bytes());
    for v in &t.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a cache; `None` when the key does not match.
pub fn read_target_cache(path: &Path, key: &[u8; 32]) -> Result<Option<TargetMatrix>> {
    let buf = std::fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(8)? != TARGET_MAGIC {
        return Err(Error::Malformed("bad target cache magic".into()));
    }
    if cur.take(32)? != key {
        return Ok(None);
    }
    let n = cur.u64()? as usize;
    let m = cur.u64()? as usize;
    let payload = cur.take(n * m * 4)?;
    if cur.pos != buf.len() {
        return Err(Error::Malformed("trailing bytes in target cache".into()));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Some(TargetMatrix::from_flat(n, m, values)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_space::{build_voxel_partition, load_atlas_partition, Affine, DensityVolume, Grid};

    fn atlas(v: [usize; 2]) -> Partition {
        let n = v[0] + v[1];
        let g = Grid::new([n, 1, 1], Affine::diagonal([1.0; 3], [0.0; 3])).unwrap();
        let labels = (0..n).map(|i| if i < v[0] { 1.0 } else { 2.0 }).collect();
        load_atlas_partition(&DensityVolume::new(g, labels).unwrap(), &["a".into(), "b".into()]).unwrap()
    }

    fn doc(id: &str, coords: Vec<[f64; 3]>) -> Document {
        Document { id: id.into(), text: String::new(), coordinates: coords }
    }

    #[test]
    fn rows_from_counts() {
        let p = atlas([2, 2]);
        let d = doc("a", vec![[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [3.5, 0.5, 0.5]]);
        let t = build_targets(&[d.clone(), d], &p, &KdeConfig::default()).unwrap();
        assert!((t.row(0)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(t.row(0), t.row(1));
        assert!(build_targets(&[doc("e", vec![])], &p, &KdeConfig::default()).is_err());
    }

    #[test]
    fn l1_identity_l2_divides_by_sqrt_volume() {
        let p = atlas([4, 1]);
        let t = TargetMatrix::from_rows(vec![vec![0.8, 0.2]]).unwrap();
        assert_eq!(rescale_for_loss(&t, Loss::L1, &p).targets, t);
        let r = rescale_for_loss(&t, Loss::L2, &p);
        assert!((r.targets.row(0)[0] - 0.4).abs() < 1e-15);
        assert!((r.targets.row(0)[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn voxel_rows_sum_to_one_for_interior_points() {
        let p = build_voxel_partition([0.0; 3], [64.0; 3], 4.0, None).unwrap();
        let d = doc("a", vec![[30.0, 30.0, 30.0], [34.0, 26.0, 31.0]]);
        let t = build_targets(&[d], &p, &KdeConfig::default()).unwrap();
        let s: f64 = t.row(0).iter().sum();
        assert!(s <= 1.0 + 1e-12 && s >= 1.0 - 1e-3);
    }

    #[test]
    fn cache_round_trip_and_key_mismatch() {
        let t = TargetMatrix::from_rows(vec![vec![0.5, 0.25], vec![0.125, 1.0]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_target_cache(&t, &[7; 32], &path).unwrap();
        assert_eq!(read_target_cache(&path, &[7; 32]).unwrap(), Some(t));
        assert_eq!(read_target_cache(&path, &[8; 32]).unwrap(), None);
    }
}
