//! Held-out coordinate log-likelihood, shuffle-split cross-validation,
//! total-variation distance, and term contrasts.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::density::KdeConfig;
use crate::encoder::{baseline_mean_map, with_background_regions, EncoderModel, ModelKind};
use crate::error::{invalid, Error, Result};
use crate::lad_solver::{default_lambda_grid, fit_lad, fit_path, log_grid, LadConfig};
use crate::par;
use crate::ridge_solver::{fit_label_constrained, fit_ridge, RidgeConfig};
use crate::targets::{build_targets, TargetMatrix};
use crate::text_features::{assemble_features, normalize_phrase, vectorize, Document, FeatureMatrix, Scaling, SparseRow, Vocabulary};
use crate::volume_space::{DensityVolume, Partition, PartitionKind};

/// Score of the uniform density over the brain, `−log V`.
pub fn chance_score(partition: &Partition) -> f64 {
    -partition.total_volume().ln()
}

fn floor_log(partition: &Partition) -> f64 {
    (1.0 / (2.0 * partition.total_volume())).ln()
}

/// Mean log-likelihood of `coords` under a background-mixed voxel density.
/// Coordinates outside the brain score `log(1/2V)`.
pub fn score_document(qprime: &DensityVolume, partition: &Partition, coords: &[[f64; 3]]) -> Result<f64> {
    if coords.is_empty() {
        return Err(Error::Empty("document has no coordinates to score".into()));
    }
    if qprime.grid != partition.grid {
        return Err(Error::ShapeMismatch("density and partition grids differ".into()));
    }
    let floor = floor_log(partition);
    let brain = partition.region_of_voxel();
    let mut total = 0.0;
    for &c in coords {
        total += match partition.grid.locate_voxel(c) {
            Some(ijk) => {
                let idx = partition.grid.linear_index(ijk);
                if brain[idx] == 0 {
                    floor
                } else {
                    checked_log(qprime.values[idx])?
                }
            }
            None => floor,
        };
    }
    Ok(total / coords.len() as f64)
}

/// Same score from per-region densities (the piecewise-constant fast path).
pub fn score_regions(qprime: &[f64], partition: &Partition, coords: &[[f64; 3]]) -> Result<f64> {
    if coords.is_empty() {
        return Err(Error::Empty("document has no coordinates to score".into()));
    }
    let floor = floor_log(partition);
    let mut total = 0.0;
    for &c in coords {
        total += match partition.locate(c) {
            0 => floor,
            k => checked_log(qprime[k - 1])?,
        };
    }
    Ok(total / coords.len() as f64)
}

fn checked_log(v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v.ln())
    } else {
        Err(invalid("density", format!("in-brain density must be positive, got {v}")))
    }
}

fn check_normalized(mass: f64, what: &str) -> Result<()> {
    if (mass - 1.0).abs() > 1e-6 {
        return Err(invalid("density", format!("{what} integrates to {mass}, not 1")));
    }
    Ok(())
}

/// `½ Σ |p − q| δ³` over voxels. Both inputs must be nonnegative unit-mass densities.
pub fn tv_distance(p: &DensityVolume, q: &DensityVolume) -> Result<f64> {
    if p.grid != q.grid {
        return Err(Error::ShapeMismatch("densities live on different grids".into()));
    }
    if p.values.iter().chain(&q.values).any(|&v| v < 0.0) {
        return Err(invalid("density", "negative values"));
    }
    check_normalized(p.mass(), "first density")?;
    check_normalized(q.mass(), "second density")?;
    let vv = p.grid.affine.voxel_volume();
    Ok(0.5 * p.values.iter().zip(&q.values).map(|(a, b)| (a - b).abs()).sum::<f64>() * vv)
}

/// `½ Σ_k |P(R_k) − Q(R_k)|` for region measures.
pub fn tv_distance_regions(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch("region measures differ in length".into()));
    }
    if p.iter().chain(q).any(|&v| v < 0.0) {
        return Err(invalid("measure", "negative mass"));
    }
    check_normalized(p.iter().sum(), "first measure")?;
    check_normalized(q.iter().sum(), "second measure")?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Solver settings shared by every fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub lad: LadConfig,
    pub ridge: RidgeConfig,
    pub kde: KdeConfig,
}

/// Fits one model kind at a fixed λ. `features` must hold exactly the
/// training rows.
pub fn fit_model(
    kind: ModelKind,
    features: &FeatureMatrix,
    vocab: &Vocabulary,
    targets: &TargetMatrix,
    partition: &Partition,
    lambda: f64,
    cfg: &FitConfig,
) -> Result<EncoderModel> {
    let kde = (partition.kind == PartitionKind::VoxelGrid).then_some(cfg.kde);
    match kind {
        ModelKind::Lad => {
            let fit = fit_lad(features, targets, lambda, None, &cfg.lad)?;
            Ok(EncoderModel::from_lad(&fit, vocab, partition, kde))
        }
        ModelKind::Ridge => {
            let fit = fit_ridge(features, targets, partition, lambda, &cfg.ridge)?;
            Ok(EncoderModel::from_ridge(kind, &fit, vocab, partition, kde))
        }
        ModelKind::Label => {
            let fit = fit_label_constrained(features, vocab, targets, partition, lambda)?;
            Ok(EncoderModel::from_ridge(kind, &fit, vocab, partition, kde))
        }
        ModelKind::Baseline => baseline_mean_map(targets, vocab, partition, kde),
    }
}

/// Mean log-likelihood of each document's coordinates under the model's
/// background-mixed prediction.
pub fn score_model(model: &EncoderModel, partition: &Partition, rows: &[SparseRow], coords: &[&[[f64; 3]]]) -> Result<Vec<f64>> {
    rows.iter()
        .zip(coords)
        .map(|(x, c)| {
            let q = with_background_regions(&model.predict_region_density(x, partition), partition.volumes());
            score_regions(&q, partition, c)
        })
        .collect()
}

/// λ values to try for a model kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaChoice {
    Fixed(f64),
    Grid(Vec<f64>),
    /// 9 log-spaced values scaled by the training design.
    Auto,
}

impl LambdaChoice {
    pub fn grid(&self, kind: ModelKind, features: &FeatureMatrix, targets: &TargetMatrix) -> Vec<f64> {
        match self {
            LambdaChoice::Fixed(l) => vec![*l],
            LambdaChoice::Grid(g) => g.clone(),
            LambdaChoice::Auto => auto_lambda_grid(kind, features, targets),
        }
    }
}

/// Default λ grid for a model kind, scaled to the training data.
pub fn auto_lambda_grid(kind: ModelKind, features: &FeatureMatrix, targets: &TargetMatrix) -> Vec<f64> {
    match kind {
        ModelKind::Lad => default_lambda_grid(features, targets),
        ModelKind::Ridge => {
            let g = features.centered_gram();
            let d = features.d();
            log_grid((0..d).map(|t| g[t * d + t]).sum(), 9)
        }
        // univariate fits on raw frequencies: scale by a typical Σ(x − x̄)²
        ModelKind::Label => {
            let d = features.d().max(1);
            let ss: f64 = (0..features.d())
                .map(|t| {
                    let x = features.raw_column(t);
                    let m = x.iter().sum::<f64>() / x.len() as f64;
                    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                })
                .sum();
            log_grid(ss / d as f64, 9)
        }
        ModelKind::Baseline => vec![1.0],
    }
}

/// Chooses λ from `grid` by `k_folds`-fold CV on the given training rows,
/// maximizing mean validation log-likelihood. Ties go to the larger λ.
///
/// Fold `j` validates on rows `i` with `i % k_folds == j`. Returns λ* and the
/// mean score of every grid value (in descending-λ order).
#[allow(clippy::too_many_arguments)]
pub fn select_lambda(
    kind: ModelKind,
    features: &FeatureMatrix,
    vocab: &Vocabulary,
    targets: &TargetMatrix,
    coords: &[&[[f64; 3]]],
    partition: &Partition,
    grid: &[f64],
    k_folds: usize,
    cfg: &FitConfig,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::Empty("λ grid is empty".into()));
    }
    if grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(invalid("lambda", "grid values must be positive"));
    }
    let mut lambdas = grid.to_vec();
    lambdas.sort_by(|a, b| b.total_cmp(a));
    lambdas.dedup();
    if lambdas.len() == 1 || kind == ModelKind::Baseline {
        return Ok((lambdas[0], vec![(lambdas[0], f64::NAN)]));
    }
    if k_folds < 2 {
        return Err(invalid("k_folds", "need at least 2 folds"));
    }
    let n = features.n();
    if n < 2 * k_folds {
        return Err(invalid("n", format!("{n} documents are too few for {k_folds}-fold λ selection")));
    }
    let rows = features.rows();
    let mut totals = vec![0.0; lambdas.len()];
    for fold in 0..k_folds {
        let train: Vec<usize> = (0..n).filter(|i| i % k_folds != fold).collect();
        let valid: Vec<usize> = (0..n).filter(|i| i % k_folds == fold).collect();
        let f_train = features.select_rows(&train)?;
        let t_train = targets.select_rows(&train);
        let v_rows: Vec<SparseRow> = valid.iter().map(|&i| rows[i].clone()).collect();
        let v_coords: Vec<&[[f64; 3]]> = valid.iter().map(|&i| coords[i]).collect();
        let models: Vec<EncoderModel> = if kind == ModelKind::Lad {
            let kde = (partition.kind == PartitionKind::VoxelGrid).then_some(cfg.kde);
            fit_path(&f_train, &t_train, &lambdas, &cfg.lad)?
                .iter()
                .map(|f| EncoderModel::from_lad(f, vocab, partition, kde))
                .collect()
        } else {
            lambdas
                .iter()
                .map(|&l| fit_model(kind, &f_train, vocab, &t_train, partition, l, cfg))
                .collect::<Result<_>>()?
        };
        for (tot, model) in totals.iter_mut().zip(&models) {
            let s = score_model(model, partition, &v_rows, &v_coords)?;
            *tot += s.iter().sum::<f64>() / s.len() as f64;
        }
    }
    let means: Vec<f64> = totals.iter().map(|t| t / k_folds as f64).collect();
    let mut best = 0;
    for (j, &s) in means.iter().enumerate() {
        if s > means[best] {
            best = j;
        }
    }
    Ok((lambdas[best], lambdas.into_iter().zip(means).collect()))
}

/// One model configuration to cross-validate.
#[derive(Debug, Clone)]
pub struct ModelSpec<'a> {
    pub name: String,
    pub kind: ModelKind,
    pub partition: &'a Partition,
    pub lambda: LambdaChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub n_folds: usize,
    pub test_fraction: f64,
    pub seed: u64,
    pub inner_folds: usize,
    pub scaling: Scaling,
    pub fit: FitConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            n_folds: 100,
            test_fraction: 0.1,
            seed: 0,
            inner_folds: 3,
            scaling: Scaling::NVariance,
            fit: FitConfig::default(),
        }
    }
}

/// Train/test indices of one shuffle split, both sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `n_folds` random splits; fold `f` uses ChaCha stream `f` of `seed`.
pub fn shuffle_splits(n: usize, n_folds: usize, test_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if n_folds == 0 {
        return Err(invalid("n_folds", "need at least one fold"));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(invalid("test_fraction", "must lie strictly between 0 and 1"));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).max(1);
    if n < 3 || n_test + 2 > n {
        return Err(Error::Empty(format!("corpus of {n} documents is too small to split")));
    }
    Ok((0..n_folds)
        .map(|f| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(f as u64);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut test = idx[..n_test].to_vec();
            let mut train = idx[n_test..].to_vec();
            test.sort_unstable();
            train.sort_unstable();
            Split { train, test }
        })
        .collect())
}

fn split_hash(ids: &[String]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub name: String,
    pub loss: ModelKind,
    pub partition: PartitionKind,
    pub regions: usize,
    pub partition_hash: String,
    pub lambda: LambdaChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub split_hash: String,
    pub lambda: f64,
    pub mean_score: f64,
    pub test_ids: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        // linear interpolation between order statistics
        let q = |p: f64| {
            let pos = p * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Summary {
            count: n,
            mean,
            std: var.sqrt(),
            min: v[0],
            q25: q(0.25),
            median: q(0.5),
            q75: q(0.75),
            max: v[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelDescriptor,
    pub chance_score: f64,
    pub folds: Vec<FoldResult>,
    pub fold_means: Summary,
    pub document_scores: Summary,
}

impl EvalReport {
    pub fn mean(&self) -> f64 {
        self.fold_means.mean
    }
}

/// All reports of one cross-validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config: CvConfig,
    pub n_documents: usize,
    /// Effective settings of the invoking tool, echoed verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
    pub reports: Vec<EvalReport>,
}

impl EvalSummary {
    /// Number of folds where report `a` has a strictly higher mean than `b`.
    pub fn wins(&self, a: usize, b: usize) -> usize {
        self.reports[a]
            .folds
            .iter()
            .zip(&self.reports[b].folds)
            .filter(|(x, y)| x.mean_score > y.mean_score)
            .count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// `model,fold,document,score` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,fold,document,score\n");
        for r in &self.reports {
            for f in &r.folds {
                for (id, s) in f.test_ids.iter().zip(&f.scores) {
                    out.push_str(&format!("{},{},{},{}\n", csv_field(&r.model.name), f.fold, csv_field(id), s));
                }
            }
        }
        out
    }

    pub fn write(&self, json: &Path, csv: Option<&Path>) -> Result<()> {
        std::fs::write(json, self.to_json()?)?;
        if let Some(p) = csv {
            std::fs::write(p, self.to_csv())?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Paired shuffle-split cross-validation of several model specs.
///
/// Every spec sees the same splits. Within a training split each spec picks
/// λ by inner CV, is refit on the whole split, and scores the held-out
/// documents. Folds run in parallel; results are assembled in fold order.
pub fn shuffle_split_cv(docs: &[Document], vocab: &Vocabulary, specs: &[ModelSpec<'_>], cfg: &CvConfig) -> Result<EvalSummary> {
    if specs.is_empty() {
        return Err(Error::Empty("no model specs to evaluate".into()));
    }
    let splits = shuffle_splits(docs.len(), cfg.n_folds, cfg.test_fraction, cfg.seed)?;
    let features = assemble_features(docs, vocab, cfg.scaling)?;
    let rows = features.rows();
    let coords: Vec<&[[f64; 3]]> = docs.iter().map(|d| d.coordinates.as_slice()).collect();

    // targets depend only on (document, partition), so build them once
    let mut partitions: Vec<&Partition> = Vec::new();
    let mut slot = Vec::with_capacity(specs.len());
    for s in specs {
        let h = s.partition.content_hash();
        match partitions.iter().position(|p| p.content_hash() == h) {
            Some(j) => slot.push(j),
            None => {
                slot.push(partitions.len());
                partitions.push(s.partition);
            }
        }
    }
    let targets: Vec<TargetMatrix> = partitions
        .iter()
        .map(|p| build_targets(docs, p, &cfg.fit.kde))
        .collect::<Result<_>>()?;

    let per_fold: Vec<Result<Vec<FoldResult>>> = par::map_range(splits.len(), |f| {
        let split = &splits[f];
        let f_train = features.select_rows(&split.train)?;
        let tr_coords: Vec<&[[f64; 3]]> = split.train.iter().map(|&i| coords[i]).collect();
        let te_rows: Vec<SparseRow> = split.test.iter().map(|&i| rows[i].clone()).collect();
        let te_coords: Vec<&[[f64; 3]]> = split.test.iter().map(|&i| coords[i]).collect();
        let test_ids: Vec<String> = split.test.iter().map(|&i| docs[i].id.clone()).collect();
        let hash = split_hash(&test_ids);
        specs
            .iter()
            .zip(&slot)
            .map(|(spec, &j)| {
                let t_train = targets[j].select_rows(&split.train);
                let grid = spec.lambda.grid(spec.kind, &f_train, &t_train);
                let (lambda, _) = select_lambda(
                    spec.kind,
                    &f_train,
                    vocab,
                    &t_train,
                    &tr_coords,
                    spec.partition,
                    &grid,
                    cfg.inner_folds,
                    &cfg.fit,
                )?;
                let model = fit_model(spec.kind, &f_train, vocab, &t_train, spec.partition, lambda, &cfg.fit)?;
                let scores = score_model(&model, spec.partition, &te_rows, &te_coords)?;
                Ok(FoldResult {
                    fold: f,
                    split_hash: hash.clone(),
                    lambda: if spec.kind == ModelKind::Baseline { 0.0 } else { lambda },
                    mean_score: scores.iter().sum::<f64>() / scores.len() as f64,
                    test_ids: test_ids.clone(),
                    scores,
                })
            })
            .collect()
    });
    let per_fold: Vec<Vec<FoldResult>> = per_fold.into_iter().collect::<Result<_>>()?;

    let reports = specs
        .iter()
        .enumerate()
        .map(|(s, spec)| {
            let folds: Vec<FoldResult> = per_fold.iter().map(|f| f[s].clone()).collect();
            let means: Vec<f64> = folds.iter().map(|f| f.mean_score).collect();
            let all: Vec<f64> = folds.iter().flat_map(|f| f.scores.iter().copied()).collect();
            EvalReport {
                model: ModelDescriptor {
                    name: spec.name.clone(),
                    loss: spec.kind,
                    partition: spec.partition.kind,
                    regions: spec.partition.m(),
                    partition_hash: hex(&spec.partition.content_hash()),
                    lambda: spec.lambda.clone(),
                },
                chance_score: chance_score(spec.partition),
                fold_means: Summary::of(&means),
                document_scores: Summary::of(&all),
                folds,
            }
        })
        .collect();
    Ok(EvalSummary {
        config: cfg.clone(),
        n_documents: docs.len(),
        provenance: None,
        reports,
    })
}

/// Voxel-wise `log A − log B`, where `A` is the mean background-mixed
/// prediction over texts mentioning `term` and `B` the mean over all texts.
/// Background voxels are 0.
pub fn term_contrast<S: AsRef<str> + Sync>(
    model: &EncoderModel,
    partition: &Partition,
    vocab: &Vocabulary,
    texts: &[S],
    term: &str,
) -> Result<DensityVolume> {
    model.check_compatible(vocab, partition)?;
    let t = vocab
        .get(&normalize_phrase(term))
        .ok_or_else(|| invalid("term", format!("`{term}` is not in the vocabulary")))?;
    if texts.is_empty() {
        return Err(Error::Empty("no texts".into()));
    }
    let preds: Vec<(bool, Vec<f64>)> = par::map(texts, |s| {
        let x = vectorize(s.as_ref(), vocab);
        let hit = x.get(t) > 0.0;
        (hit, with_background_regions(&model.predict_region_density(&x, partition), partition.volumes()))
    });
    let m = partition.m();
    let mut a = vec![0.0; m];
    let mut b = vec![0.0; m];
    let mut hits = 0usize;
    for (hit, q) in &preds {
        for k in 0..m {
            b[k] += q[k];
            if *hit {
                a[k] += q[k];
            }
        }
        hits += *hit as usize;
    }
    if hits == 0 {
        return Err(Error::Empty(format!("no document mentions `{term}`")));
    }
    let n = texts.len() as f64;
    let contrast: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x / hits as f64).ln() - (y / n).ln())
        .collect();
    Ok(partition.paint(&contrast))
}

/// Linear index of the largest in-brain value.
pub fn brain_argmax(vol: &DensityVolume, partition: &Partition) -> Option<usize> {
    vol.values
        .iter()
        .zip(partition.region_of_voxel())
        .enumerate()
        .filter(|(_, (_, &r))| r != 0)
        .fold(None, |best: Option<(usize, f64)>, (i, (&v, _))| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_world, generate_corpus, SynthSpec};
    use crate::volume_space::{build_voxel_partition, Affine, Grid};

    fn cube() -> Partition {
        build_voxel_partition([0.0; 3], [4.0; 3], 1.0, None).unwrap()
    }

    #[test]
    fn uniform_scores_chance() {
        let p = cube();
        assert!((chance_score(&p) + 64f64.ln()).abs() < 1e-15);
        assert!((chance_score(&p) + 4.1589).abs() < 1e-4);
        let q = p.paint(&vec![1.0 / 64.0; 64]);
        let coords = [[0.5, 0.5, 0.5], [3.9, 2.0, 1.0]];
        assert!((score_document(&q, &p, &coords).unwrap() - chance_score(&p)).abs() < 1e-15);
        assert!((score_regions(&vec![1.0 / 64.0; 64], &p, &coords).unwrap() - chance_score(&p)).abs() < 1e-15);
        let outside = score_document(&q, &p, &[[10.0, 0.0, 0.0]]).unwrap();
        assert!((outside - (1.0 / 128.0f64).ln()).abs() < 1e-15);
        assert!(score_document(&q, &p, &[]).is_err());
    }

    #[test]
    fn more_mass_at_visited_voxel_scores_higher() {
        let p = cube();
        let mut q = p.paint(&vec![1.0 / 64.0; 64]);
        let c = [[1.5, 1.5, 1.5]];
        let before = score_document(&q, &p, &c).unwrap();
        q.values[p.grid.linear_index([1, 1, 1])] *= 2.0;
        assert!(score_document(&q, &p, &c).unwrap() > before);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance_regions(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(tv_distance_regions(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((tv_distance_regions(&[2.0 / 3.0, 1.0 / 3.0], &[1.0 / 3.0, 2.0 / 3.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(tv_distance_regions(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        let g = Grid::new([2, 1, 1], Affine::diagonal([2.0; 3], [0.0; 3])).unwrap();
        let a = DensityVolume::new(g.clone(), vec![1.0 / 8.0, 0.0]).unwrap();
        let b = DensityVolume::new(g, vec![0.0, 1.0 / 8.0]).unwrap();
        assert!((tv_distance(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn split_arithmetic_and_determinism() {
        let s = shuffle_splits(4, 1, 0.5, 7).unwrap();
        assert_eq!((s[0].train.len(), s[0].test.len()), (2, 2));
        assert_eq!(s, shuffle_splits(4, 1, 0.5, 7).unwrap());
        let many = shuffle_splits(50, 5, 0.1, 1).unwrap();
        assert!(many.iter().all(|s| s.test.len() == 5 && s.train.len() == 45));
        assert_ne!(many[0], many[1]);
        assert!(shuffle_splits(2, 1, 0.5, 0).is_err());
        assert!(shuffle_splits(10, 1, 1.0, 0).is_err());
    }

    #[test]
    fn summary_quantiles() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!((s.min, s.q25, s.median, s.q75, s.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        assert_eq!(s.mean, 3.0);
    }

    fn small_world(n: usize) -> (crate::synth::SynthWorld, Vec<Document>) {
        let w = build_world(&SynthSpec::planted(n, 4)).unwrap();
        let docs = generate_corpus(&w);
        (w, docs)
    }

    #[test]
    fn select_lambda_rules() {
        let (w, docs) = small_world(60);
        let fm = assemble_features(&docs, &w.vocabulary, Scaling::NVariance).unwrap();
        let t = build_targets(&docs, &w.partition, &KdeConfig::default()).unwrap();
        let coords: Vec<&[[f64; 3]]> = docs.iter().map(|d| d.coordinates.as_slice()).collect();
        let cfg = FitConfig::default();
        let one = select_lambda(ModelKind::Ridge, &fm, &w.vocabulary, &t, &coords, &w.partition, &[0.7], 3, &cfg).unwrap();
        assert_eq!(one.0, 0.7);
        assert!(select_lambda(ModelKind::Ridge, &fm, &w.vocabulary, &t, &coords, &w.partition, &[], 3, &cfg).is_err());

        let empty: Vec<Document> = docs.iter().map(|d| Document { text: "nothing here".into(), ..d.clone() }).collect();
        let fz = assemble_features(&empty, &w.vocabulary, Scaling::NVariance).unwrap();
        for kind in [ModelKind::Ridge, ModelKind::Lad] {
            let (l, _) = select_lambda(kind, &fz, &w.vocabulary, &t, &coords, &w.partition, &[0.01, 1.0, 10.0], 3, &cfg).unwrap();
            assert_eq!(l, 10.0);
        }
    }

    #[test]
    fn selected_lambda_near_exhaustive_optimum() {
        let (w, docs) = small_world(120);
        let fm = assemble_features(&docs, &w.vocabulary, Scaling::NVariance).unwrap();
        let t = build_targets(&docs, &w.partition, &KdeConfig::default()).unwrap();
        let coords: Vec<&[[f64; 3]]> = docs.iter().map(|d| d.coordinates.as_slice()).collect();
        let grid = default_lambda_grid(&fm, &t);
        let cfg = FitConfig::default();
        let (l, table) = select_lambda(ModelKind::Lad, &fm, &w.vocabulary, &t, &coords, &w.partition, &grid, 3, &cfg).unwrap();
        // exhaustive oracle: every grid value scored separately with cold fits
        let n = fm.n();
        let rows = fm.rows();
        let mut oracle = Vec::new();
        for &lam in &grid {
            let mut tot = 0.0;
            for fold in 0..3 {
                let tr: Vec<usize> = (0..n).filter(|i| i % 3 != fold).collect();
                let va: Vec<usize> = (0..n).filter(|i| i % 3 == fold).collect();
                let model = fit_model(ModelKind::Lad, &fm.select_rows(&tr).unwrap(), &w.vocabulary, &t.select_rows(&tr), &w.partition, lam, &cfg).unwrap();
                let vr: Vec<SparseRow> = va.iter().map(|&i| rows[i].clone()).collect();
                let vc: Vec<&[[f64; 3]]> = va.iter().map(|&i| coords[i]).collect();
                let s = score_model(&model, &w.partition, &vr, &vc).unwrap();
                tot += s.iter().sum::<f64>() / s.len() as f64;
            }
            oracle.push(tot / 3.0);
        }
        let best = oracle.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let chosen = oracle[grid.iter().position(|&g| g == l).unwrap()];
        assert!((best - chosen).abs() <= 0.02 * best.abs());
        assert_eq!(table.len(), grid.len());
    }

    #[test]
    fn cv_is_paired_and_reproducible() {
        let (w, docs) = small_world(40);
        let specs = [
            ModelSpec { name: "ridge".into(), kind: ModelKind::Ridge, partition: &w.partition, lambda: LambdaChoice::Fixed(1.0) },
            ModelSpec { name: "base".into(), kind: ModelKind::Baseline, partition: &w.partition, lambda: LambdaChoice::Auto },
        ];
        let cfg = CvConfig { n_folds: 3, test_fraction: 0.25, seed: 5, ..Default::default() };
        let a = shuffle_split_cv(&docs, &w.vocabulary, &specs, &cfg).unwrap();
        let b = shuffle_split_cv(&docs, &w.vocabulary, &specs, &cfg).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        for (x, y) in a.reports[0].folds.iter().zip(&a.reports[1].folds) {
            assert_eq!(x.split_hash, y.split_hash);
            assert!(x.scores.iter().all(|s| s.is_finite()));
        }
        assert_eq!(a.reports[0].chance_score, chance_score(&w.partition));
        assert!(a.to_csv().lines().count() == 1 + 2 * 3 * 10);
    }

    #[test]
    fn contrast_is_zero_when_every_text_mentions_the_term() {
        let (w, docs) = small_world(50);
        let fm = assemble_features(&docs, &w.vocabulary, Scaling::NVariance).unwrap();
        let t = build_targets(&docs, &w.partition, &KdeConfig::default()).unwrap();
        let model = fit_model(ModelKind::Ridge, &fm, &w.vocabulary, &t, &w.partition, 1.0, &FitConfig::default()).unwrap();
        let texts: Vec<String> = docs.iter().map(|d| format!("{} term3", d.text)).collect();
        let c = term_contrast(&model, &w.partition, &w.vocabulary, &texts, "term3").unwrap();
        assert!(c.values.iter().all(|v| v.abs() < 1e-12));
        let single = ["term3 study", "study"];
        let c = term_contrast(&model, &w.partition, &w.vocabulary, &single, "term3").unwrap();
        let q: Vec<Vec<f64>> = single
            .iter()
            .map(|s| with_background_regions(&model.predict_region_density(&vectorize(s, &w.vocabulary), &w.partition), w.partition.volumes()))
            .collect();
        for k in 0..8 {
            let expect = q[0][k].ln() - ((q[0][k] + q[1][k]) / 2.0).ln();
            assert!((c.values[w.partition.voxels_of(k + 1)[0]] - expect).abs() < 1e-12);
        }
        assert!(term_contrast(&model, &w.partition, &w.vocabulary, &["study"], "term3").is_err());
        assert!(term_contrast(&model, &w.partition, &w.vocabulary, &texts, "nope").is_err());
    }
}
