//! Text-to-density predictor assembled from fitted coefficients, plus the
//! background mixing used for scoring and the text-independent baseline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::density::KdeConfig;
use crate::error::{Error, Result};
use crate::lad_solver::LadFit;
use crate::ridge_solver::RidgeModel;
use crate::targets::TargetMatrix;
use crate::text_features::{vectorize, Cursor, SparseRow, Vocabulary};
use crate::volume_space::{DensityVolume, Partition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// ℓ1 loss, solved in the dual.
    Lad,
    /// ℓ2 loss with volume rescaling.
    Ridge,
    /// Diagonal ℓ2 model on region labels.
    Label,
    /// Mean training map, independent of the text.
    Baseline,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Lad => 1,
            ModelKind::Ridge => 2,
            ModelKind::Label => 3,
            ModelKind::Baseline => 4,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            1 => ModelKind::Lad,
            2 => ModelKind::Ridge,
            3 => ModelKind::Label,
            4 => ModelKind::Baseline,
            _ => return Err(Error::Malformed(format!("unknown model kind tag {t}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lad => "lad",
            ModelKind::Ridge => "ridge",
            ModelKind::Label => "label",
            ModelKind::Baseline => "baseline",
        }
    }
}

/// Linear encoder: `ŷ = intercept + x β`, density `ŷ_k / v_k` on region `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub kind: ModelKind,
    pub lambda: f64,
    pub d: usize,
    pub m: usize,
    /// d×m row-major, raw term frequencies to target units.
    pub coef: Vec<f64>,
    pub intercept: Vec<f64>,
    pub vocab_hash: [u8; 32],
    pub partition_hash: [u8; 32],
    pub kde: Option<KdeConfig>,
    /// Free-form JSON describing how the model was produced.
    pub provenance: String,
}

impl EncoderModel {
    fn build(kind: ModelKind, lambda: f64, coef: Vec<f64>, intercept: Vec<f64>, vocab: &Vocabulary, partition: &Partition, kde: Option<KdeConfig>) -> Self {
        let m = intercept.len();
        EncoderModel {
            kind,
            lambda,
            d: vocab.len(),
            m,
            coef,
            intercept,
            vocab_hash: vocab.content_hash(),
            partition_hash: partition.content_hash(),
            kde,
            provenance: String::new(),
        }
    }

    pub fn from_lad(fit: &LadFit, vocab: &Vocabulary, partition: &Partition, kde: Option<KdeConfig>) -> Self {
        Self::build(ModelKind::Lad, fit.lambda, fit.coef.clone(), fit.intercept.clone(), vocab, partition, kde)
    }

    pub fn from_ridge(kind: ModelKind, fit: &RidgeModel, vocab: &Vocabulary, partition: &Partition, kde: Option<KdeConfig>) -> Self {
        Self::build(kind, fit.lambda, fit.coef.clone(), fit.intercept.clone(), vocab, partition, kde)
    }

    /// Errors unless the model was trained with this vocabulary and partition.
    pub fn check_compatible(&self, vocab: &Vocabulary, partition: &Partition) -> Result<()> {
        if self.vocab_hash != vocab.content_hash() || self.d != vocab.len() {
            return Err(Error::Incompatible("model was trained with a different vocabulary".into()));
        }
        if self.partition_hash != partition.content_hash() || self.m != partition.m() {
            return Err(Error::Incompatible("model was trained on a different partition".into()));
        }
        Ok(())
    }

    /// `ŷ_pred = intercept + x β` in target units (region probability masses).
    pub fn predict_targets(&self, x: &SparseRow) -> Vec<f64> {
        let mut out = self.intercept.clone();
        for (&t, &v) in x.indices.iter().zip(&x.values) {
            let row = &self.coef[t * self.m..(t + 1) * self.m];
            for (o, b) in out.iter_mut().zip(row) {
                *o += v * b;
            }
        }
        out
    }

    /// Per-region densities `ŷ_pred,k / v_k` (mm⁻³).
    pub fn predict_region_density(&self, x: &SparseRow, partition: &Partition) -> Vec<f64> {
        self.predict_targets(x)
            .iter()
            .zip(partition.volumes())
            .map(|(y, v)| y / v)
            .collect()
    }

    /// The encoded density `q` on the partition grid; background voxels are 0.
    pub fn predict_density(&self, text: &str, vocab: &Vocabulary, partition: &Partition) -> DensityVolume {
        partition.paint(&self.predict_region_density(&vectorize(text, vocab), partition))
    }
}

/// Text-independent model predicting the mean training target row.
pub fn baseline_mean_map(targets: &TargetMatrix, vocab: &Vocabulary, partition: &Partition, kde: Option<KdeConfig>) -> Result<EncoderModel> {
    if targets.n() == 0 {
        return Err(Error::Empty("no training targets".into()));
    }
    let intercept = targets.means().to_vec();
    let coef = vec![0.0; vocab.len() * intercept.len()];
    Ok(EncoderModel::build(ModelKind::Baseline, 0.0, coef, intercept, vocab, partition, kde))
}

/// Background mixing on per-region densities: rectify, renormalize to unit
/// mass over the brain (uniform if the mass is ≤ 1e-6), then average with the
/// uniform density `1/V`.
pub fn with_background_regions(q: &[f64], volumes: &[f64]) -> Vec<f64> {
    let total: f64 = volumes.iter().sum();
    let uniform = 1.0 / total;
    let mass: f64 = q.iter().zip(volumes).map(|(v, w)| v.max(0.0) * w).sum();
    if mass <= 1e-6 {
        return vec![uniform; q.len()];
    }
    q.iter().map(|v| 0.5 * (uniform + v.max(0.0) / mass)).collect()
}

/// Voxel-level background mixing over the partition's brain voxels. Voxels
/// outside the brain are 0.
pub fn with_background(q: &DensityVolume, partition: &Partition) -> Result<DensityVolume> {
    if q.grid != partition.grid {
        return Err(Error::ShapeMismatch("density and partition grids differ".into()));
    }
    let vv = partition.grid.affine.voxel_volume();
    let brain = partition.region_of_voxel();
    let uniform = 1.0 / partition.total_volume();
    let mass: f64 = q
        .values
        .iter()
        .zip(brain)
        .filter(|(_, &r)| r != 0)
        .map(|(v, _)| v.max(0.0) * vv)
        .sum();
    let values = q
        .values
        .iter()
        .zip(brain)
        .map(|(v, &r)| match (r, mass > 1e-6) {
            (0, _) => 0.0,
            (_, true) => 0.5 * (uniform + v.max(0.0) / mass),
            (_, false) => uniform,
        })
        .collect();
    DensityVolume::new(q.grid.clone(), values)
}

const MODEL_MAGIC: &[u8; 8] = b"LXMODEL1";
const MODEL_VERSION: u32 = 1;

/// Byte layout (little-endian):
///
/// | field | size |
/// |---|---|
/// | magic `LXMODEL1` | 8 |
/// | version (u32) | 4 |
/// | kind tag (u8: 1 lad, 2 ridge, 3 label, 4 baseline) | 1 |
/// | λ (f64) | 8 |
/// | d, m (u64 each) | 16 |
/// | vocabulary hash, partition hash | 64 |
/// | KDE present (u8), h (f64), truncation (f64) | 17 |
/// | provenance length (u64) + UTF-8 JSON | 8 + len |
/// | β, d×m row-major f32 | 4dm |
/// | intercept, m f32 | 4m |
pub fn encode_model(model: &EncoderModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(128 + model.provenance.len() + 4 * (model.coef.len() + model.m));
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.push(model.kind.tag());
    out.extend_from_slice(&model.lambda.to_le_bytes());
    out.extend_from_slice(&(model.d as u64).to_le_bytes());
    out.extend_from_slice(&(model.m as u64).to_le_bytes());
    out.extend_from_slice(&model.vocab_hash);
    out.extend_from_slice(&model.partition_hash);
    let kde = model.kde.unwrap_or_default();
    out.push(model.kde.is_some() as u8);
    out.extend_from_slice(&kde.h.to_le_bytes());
    out.extend_from_slice(&kde.truncation.to_le_bytes());
    out.extend_from_slice(&(model.provenance.len() as u64).to_le_bytes());
    out.extend_from_slice(model.provenance.as_bytes());
    for v in model.coef.iter().chain(&model.intercept) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_model(buf: &[u8]) -> Result<EncoderModel> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(8)? != MODEL_MAGIC {
        return Err(Error::Malformed("not a model file (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Malformed(format!("unsupported model version {version}")));
    }
    let kind = ModelKind::from_tag(cur.take(1)?[0])?;
    let lambda = cur.f64()?;
    let d = cur.u64()? as usize;
    let m = cur.u64()? as usize;
    let vocab_hash: [u8; 32] = cur.take(32)?.try_into().unwrap();
    let partition_hash: [u8; 32] = cur.take(32)?.try_into().unwrap();
    let has_kde = cur.take(1)?[0] != 0;
    let h = cur.f64()?;
    let truncation = cur.f64()?;
    let plen = cur.u64()? as usize;
    let provenance = String::from_utf8(cur.take(plen)?.to_vec())
        .map_err(|_| Error::Malformed("provenance is not UTF-8".into()))?;
    let count = d
        .checked_mul(m)
        .and_then(|v| v.checked_add(m))
        .ok_or_else(|| Error::Malformed("model dimensions overflow".into()))?;
    let floats: Vec<f64> = cur
        .take(count * 4)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if cur.pos != buf.len() {
        return Err(Error::Malformed("trailing bytes after model payload".into()));
    }
    let (coef, intercept) = floats.split_at(d * m);
    Ok(EncoderModel {
        kind,
        lambda,
        d,
        m,
        coef: coef.to_vec(),
        intercept: intercept.to_vec(),
        vocab_hash,
        partition_hash,
        kde: has_kde.then_some(KdeConfig { h, truncation }),
        provenance,
    })
}

pub fn write_model(model: &EncoderModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<EncoderModel> {
    decode_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_space::{load_atlas_partition, Affine, Grid};

    fn toy() -> (Vocabulary, Partition) {
        let vocab = Vocabulary::new(["amygdala", "insula"]).unwrap();
        let g = Grid::new([4, 1, 1], Affine::diagonal([1.0; 3], [0.0; 3])).unwrap();
        let vol = DensityVolume::new(g, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let p = load_atlas_partition(&vol, &["amygdala".into(), "insula".into()]).unwrap();
        (vocab, p)
    }

    fn identity_model(vocab: &Vocabulary, p: &Partition) -> EncoderModel {
        EncoderModel::build(ModelKind::Label, 1.0, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], vocab, p, None)
    }

    #[test]
    fn diagonal_identity_by_hand() {
        let (vocab, p) = toy();
        let q = identity_model(&vocab, &p).predict_density("amygdala amygdala insula", &vocab, &p);
        let expect = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0];
        for (a, b) in q.values.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_text_gives_intercept_map() {
        let (vocab, p) = toy();
        let t = TargetMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let base = baseline_mean_map(&t, &vocab, &p, None).unwrap();
        assert_eq!(base.intercept, vec![0.5, 0.5]);
        let a = base.predict_density("", &vocab, &p);
        let b = base.predict_density("amygdala", &vocab, &p);
        assert_eq!(a, b);
        assert!(a.values.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn prediction_is_affine_in_features() {
        let (vocab, p) = toy();
        let mut model = identity_model(&vocab, &p);
        model.intercept = vec![0.1, -0.2];
        model.coef = vec![0.3, 0.7, -0.4, 1.1];
        let a = vectorize("amygdala insula insula", &vocab);
        let b = vectorize("insula", &vocab);
        let ya = model.predict_targets(&a);
        let yb = model.predict_targets(&b);
        let yab = model.predict_targets(&a.add(&b));
        for k in 0..2 {
            assert!((yab[k] - (ya[k] + yb[k] - model.intercept[k])).abs() < 1e-14);
        }
    }

    #[test]
    fn background_mixing() {
        let (_, p) = toy();
        let v = p.volumes();
        let uni = with_background_regions(&[0.25, 0.25], v);
        assert!(uni.iter().all(|x| (x - 0.25).abs() < 1e-15));
        assert_eq!(with_background_regions(&[0.0, 0.0], v), vec![0.25, 0.25]);
        let neg = with_background_regions(&[-1.0, 0.1], v);
        assert!(neg.iter().all(|&x| x >= 1.0 / 8.0 - 1e-15));
        let mass: f64 = neg.iter().zip(v).map(|(a, b)| a * b).sum();
        assert!((mass - 1.0).abs() < 1e-12);

        let q = p.paint(&[-1.0, 0.1]);
        let qv = with_background(&q, &p).unwrap();
        let painted = p.paint(&neg);
        assert_eq!(qv, painted);
    }

    #[test]
    fn serialization_round_trip() {
        let (vocab, p) = toy();
        let mut model = identity_model(&vocab, &p);
        model.kde = Some(KdeConfig::default());
        model.provenance = "{\"seed\":1}".into();
        let bytes = encode_model(&model);
        assert_eq!(decode_model(&bytes).unwrap(), model);
        assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_model(&bad).is_err());
        model.check_compatible(&vocab, &p).unwrap();
        let other = Vocabulary::new(["insula"]).unwrap();
        assert!(model.check_compatible(&other, &p).is_err());
    }
}
