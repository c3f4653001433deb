//! Synthetic corpora with planted term → region associations.
//!
//! Documents mention a few vocabulary terms among filler words. Each term
//! carries a probability row over atlas regions; a document's coordinates are
//! drawn from the count-weighted mixture of its terms' rows (uniformly inside
//! the chosen region, then jittered), and a fraction of them are replaced by
//! uniform scatter over the whole brain.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par;
use crate::text_features::{Document, Vocabulary};
use crate::volume_space::{load_atlas_partition, Affine, DensityVolume, Grid, Partition};

const FILLER: [&str; 12] = [
    "study", "results", "patients", "task", "analysis", "activation", "significant", "data", "subjects",
    "effect", "response", "network",
];

/// Per-coordinate jitter applied after uniform sampling inside a region (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Noise {
    None,
    Gaussian { sigma: f64 },
    Laplace { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Grid size in voxels; the atlas covers the whole grid.
    pub grid_shape: [usize; 3],
    /// mm
    pub voxel_size: f64,
    /// Number of blocks along each axis; region count is their product.
    pub atlas_blocks: [usize; 3],
    pub n_docs: usize,
    /// Vocabulary size `d`.
    pub n_terms: usize,
    pub coords_per_doc: usize,
    /// Inclusive range of distinct terms per document.
    pub terms_per_doc: [usize; 2],
    /// Inclusive range of repetitions of each chosen term.
    pub term_repeats: [usize; 2],
    /// Inclusive range of filler tokens per document.
    pub filler_tokens: [usize; 2],
    /// Mass of a term's row on its planted region when `beta_star` is not given.
    pub primary_weight: f64,
    /// Explicit d×m probability rows; overrides the generated table.
    #[serde(default)]
    pub beta_star: Option<Vec<Vec<f64>>>,
    pub noise: Noise,
    /// Fraction ρ of coordinates scattered uniformly over the brain.
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// 12³ grid of 4-mm voxels split into octants, 20 terms.
    pub fn planted(n_docs: usize, seed: u64) -> Self {
        SynthSpec {
            grid_shape: [12; 3],
            voxel_size: 4.0,
            atlas_blocks: [2; 3],
            n_docs,
            n_terms: 20,
            coords_per_doc: 30,
            terms_per_doc: [1, 3],
            term_repeats: [1, 3],
            filler_tokens: [5, 15],
            primary_weight: 0.85,
            beta_star: None,
            noise: Noise::Gaussian { sigma: 2.0 },
            outlier_fraction: 0.0,
            seed,
        }
    }

    pub fn m(&self) -> usize {
        self.atlas_blocks.iter().product()
    }

    fn validate(&self) -> Result<()> {
        if self.n_terms == 0 {
            return Err(invalid("n_terms", "vocabulary must not be empty"));
        }
        if self.m() == 0 || self.grid_shape.iter().any(|&s| s == 0) {
            return Err(invalid("atlas_blocks", "partition must not be empty"));
        }
        if self.grid_shape.iter().zip(&self.atlas_blocks).any(|(s, b)| b > s) {
            return Err(invalid("atlas_blocks", "more blocks than voxels along an axis"));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(invalid("outlier_fraction", "must lie in [0, 1)"));
        }
        if !(self.voxel_size > 0.0) {
            return Err(invalid("voxel_size", "must be positive"));
        }
        if self.coords_per_doc == 0 {
            return Err(invalid("coords_per_doc", "must be positive"));
        }
        let [lo, hi] = self.terms_per_doc;
        if lo == 0 || lo > hi || hi > self.n_terms {
            return Err(invalid("terms_per_doc", "need 1 ≤ min ≤ max ≤ n_terms"));
        }
        if self.term_repeats[0] == 0 || self.term_repeats[0] > self.term_repeats[1] {
            return Err(invalid("term_repeats", "need 1 ≤ min ≤ max"));
        }
        if self.filler_tokens[0] > self.filler_tokens[1] {
            return Err(invalid("filler_tokens", "need min ≤ max"));
        }
        if self.beta_star.is_none() && !(0.0..=1.0).contains(&self.primary_weight) {
            return Err(invalid("primary_weight", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Everything a generated corpus is drawn from.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub spec: SynthSpec,
    pub vocabulary: Vocabulary,
    /// Region label volume (values 1..=m).
    pub atlas_volume: DensityVolume,
    pub labels: Vec<String>,
    pub partition: Partition,
    /// d×m row-major, rows are probability vectors.
    pub beta_star: Vec<f64>,
    /// 1-based region where each term's row peaks.
    pub planted_region: Vec<usize>,
}

pub fn term_name(t: usize) -> String {
    format!("term{t}")
}

/// Builds the atlas, vocabulary, and planted table for a spec.
pub fn build_world(spec: &SynthSpec) -> Result<SynthWorld> {
    spec.validate()?;
    let m = spec.m();
    let d = spec.n_terms;
    let grid = Grid::new(spec.grid_shape, Affine::diagonal([spec.voxel_size; 3], [0.0; 3]))?;
    let mut values = vec![0.0; grid.n_voxels()];
    for (idx, v) in values.iter_mut().enumerate() {
        let ijk = grid.unravel(idx);
        let mut label = 0;
        for a in (0..3).rev() {
            let block = ijk[a] * spec.atlas_blocks[a] / spec.grid_shape[a];
            label = label * spec.atlas_blocks[a] + block;
        }
        *v = (label + 1) as f64;
    }
    let atlas_volume = DensityVolume::new(grid, values)?;
    let labels: Vec<String> = (0..m).map(|k| term_name(k % d)).collect();
    let partition = load_atlas_partition(&atlas_volume, &labels)?;
    let vocabulary = Vocabulary::new((0..d).map(term_name))?;

    let beta_star = match &spec.beta_star {
        Some(rows) => {
            if rows.len() != d || rows.iter().any(|r| r.len() != m) {
                return Err(Error::ShapeMismatch(format!("beta_star must be {d}×{m}")));
            }
            for r in rows {
                let s: f64 = r.iter().sum();
                if r.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-9 {
                    return Err(invalid("beta_star", "rows must be probability vectors"));
                }
            }
            rows.concat()
        }
        None => {
            let rest = if m > 1 { (1.0 - spec.primary_weight) / (m - 1) as f64 } else { 0.0 };
            let mut b = vec![rest; d * m];
            for t in 0..d {
                b[t * m + t % m] = if m > 1 { spec.primary_weight } else { 1.0 };
            }
            b
        }
    };
    let planted_region = (0..d)
        .map(|t| {
            let row = &beta_star[t * m..(t + 1) * m];
            1 + (0..m).fold(0, |best, k| if row[k] > row[best] { k } else { best })
        })
        .collect();
    Ok(SynthWorld {
        spec: spec.clone(),
        vocabulary,
        atlas_volume,
        labels,
        partition,
        beta_star,
        planted_region,
    })
}

fn jitter(rng: &mut ChaCha8Rng, noise: Noise) -> f64 {
    match noise {
        Noise::None => 0.0,
        Noise::Gaussian { sigma } => sigma * rng.sample::<f64, _>(StandardNormal),
        Noise::Laplace { scale } => {
            let e: f64 = rng.sample(Exp1);
            if rng.random_bool(0.5) {
                scale * e
            } else {
                -scale * e
            }
        }
    }
}

fn point_in_voxel(rng: &mut ChaCha8Rng, grid: &Grid, idx: usize) -> [f64; 3] {
    let ijk = grid.unravel(idx);
    let f = [
        ijk[0] as f64 + rng.random::<f64>(),
        ijk[1] as f64 + rng.random::<f64>(),
        ijk[2] as f64 + rng.random::<f64>(),
    ];
    grid.affine.voxel_to_mm(f)
}

/// Region mixture `π ∝ Σ_t count_t β*_t` of one document.
pub fn mixture(world: &SynthWorld, counts: &[(usize, usize)]) -> Vec<f64> {
    let m = world.partition.m();
    let mut pi = vec![0.0; m];
    for &(t, c) in counts {
        for k in 0..m {
            pi[k] += c as f64 * world.beta_star[t * m + k];
        }
    }
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|v| *v /= s);
    pi
}

fn generate_document(world: &SynthWorld, i: usize) -> Document {
    let spec = &world.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(i as u64);
    let k = rng.random_range(spec.terms_per_doc[0]..=spec.terms_per_doc[1]);
    let mut chosen = rand::seq::index::sample(&mut rng, spec.n_terms, k).into_vec();
    chosen.sort_unstable();
    let counts: Vec<(usize, usize)> = chosen
        .iter()
        .map(|&t| (t, rng.random_range(spec.term_repeats[0]..=spec.term_repeats[1])))
        .collect();
    let mut tokens: Vec<String> = Vec::new();
    for &(t, c) in &counts {
        tokens.extend(std::iter::repeat_n(term_name(t), c));
    }
    let n_filler = rng.random_range(spec.filler_tokens[0]..=spec.filler_tokens[1]);
    for _ in 0..n_filler {
        tokens.push(FILLER[rng.random_range(0..FILLER.len())].to_string());
    }
    tokens.shuffle(&mut rng);

    let pi = mixture(world, &counts);
    let regions = WeightedIndex::new(&pi).expect("mixture has positive mass");
    let c = spec.coords_per_doc;
    let n_out = (spec.outlier_fraction * c as f64).round() as usize;
    let grid = &world.partition.grid;
    let brain = grid.n_voxels();
    let mut coordinates = Vec::with_capacity(c);
    for _ in 0..c - n_out {
        let r = regions.sample(&mut rng) + 1;
        let vox = world.partition.voxels_of(r);
        let v = vox[rng.random_range(0..vox.len())];
        let p = point_in_voxel(&mut rng, grid, v);
        coordinates.push([
            p[0] + jitter(&mut rng, spec.noise),
            p[1] + jitter(&mut rng, spec.noise),
            p[2] + jitter(&mut rng, spec.noise),
        ]);
    }
    for _ in 0..n_out {
        let v = rng.random_range(0..brain);
        coordinates.push(point_in_voxel(&mut rng, grid, v));
    }
    Document {
        id: format!("doc{i:05}"),
        text: tokens.join(" "),
        coordinates,
    }
}

/// Deterministic under `spec.seed`; each document uses its own ChaCha stream.
pub fn generate_corpus(world: &SynthWorld) -> Vec<Document> {
    par::map_range(world.spec.n_docs, |i| generate_document(world, i))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub vocabulary: Vec<String>,
    pub labels: Vec<String>,
    pub beta_star: Vec<Vec<f64>>,
    pub planted_region: Vec<usize>,
}

pub fn ground_truth(world: &SynthWorld) -> GroundTruth {
    let m = world.partition.m();
    GroundTruth {
        spec: world.spec.clone(),
        vocabulary: world.vocabulary.phrases().to_vec(),
        labels: world.labels.clone(),
        beta_star: world.beta_star.chunks(m).map(|r| r.to_vec()).collect(),
        planted_region: world.planted_region.clone(),
    }
}

pub fn write_ground_truth(world: &SynthWorld, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&ground_truth(world))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}
