//! Command-line front end.
//!
//! Settings resolve as flag, then `--config` TOML, then built-in default. The
//! resolved settings are written into every artifact so a file can be traced
//! back to the run that made it. The thread count is left out on purpose since
//! outputs do not depend on it.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::density::KdeConfig;
use crate::encoder::{read_model, write_model, ModelKind};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{fit_model, select_lambda, shuffle_split_cv, term_contrast, CvConfig, FitConfig, LambdaChoice, ModelSpec};
use crate::par;
use crate::synth::{build_world, generate_corpus, write_ground_truth, SynthSpec};
use crate::targets::build_targets;
use crate::text_features::{assemble_features, load_vocabulary, read_corpus, read_feature_cache, write_corpus, write_feature_cache, FeatureMatrix, Scaling};
use crate::volume_space::{
    build_voxel_partition, load_atlas_partition, read_any_volume, voxel_partition_from_mask, write_nifti, write_volume_with,
    DensityVolume, Dtype, Partition,
};

/// MNI152 bounding box (mm), used when neither `--bbox` nor `--mask` is given.
pub const DEFAULT_BBOX: [f64; 6] = [-90.0, -126.0, -72.0, 90.0, 90.0, 108.0];

pub const THREADS_ENV: &str = "LEXMAP_THREADS";

#[derive(Parser, Debug)]
#[command(name = "lexmap", version, about = "Learn linear maps from text to spatial densities over a 3D volume")]
pub struct Cli {
    /// TOML file of default settings [path]; flags take precedence
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads [count, 0 = all cores]; default from LEXMAP_THREADS
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Seed for all randomness [integer, default 0]
    #[arg(long, global = true, value_name = "SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a cached term-frequency matrix from a corpus
    Features(FeaturesArgs),
    /// Fit an encoder and write the model file
    Fit(FitArgs),
    /// Predict a density volume for a text
    Predict(PredictArgs),
    /// Cross-validate models by held-out coordinate log-likelihood
    Evaluate(EvaluateArgs),
    /// Voxel-wise log-ratio map for one term
    Contrast(ContrastArgs),
    /// Generate a synthetic corpus with planted term-region links
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossArg {
    Lad,
    Ridge,
    Label,
    Baseline,
}

impl From<LossArg> for ModelKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Lad => ModelKind::Lad,
            LossArg::Ridge => ModelKind::Ridge,
            LossArg::Label => ModelKind::Label,
            LossArg::Baseline => ModelKind::Baseline,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionArg {
    /// One region per in-brain voxel
    Voxel,
    /// Labeled atlas regions
    Atlas,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ScalingArg {
    NVariance,
    StdDev,
    None,
}

impl From<ScalingArg> for Scaling {
    fn from(s: ScalingArg) -> Self {
        match s {
            ScalingArg::NVariance => Scaling::NVariance,
            ScalingArg::StdDev => Scaling::StdDev,
            ScalingArg::None => Scaling::None,
        }
    }
}

/// Geometry and smoothing flags shared by every command that needs a partition.
#[derive(Args, Debug, Default)]
pub struct SpaceArgs {
    /// Edge of the cubic voxels [mm, default 4]
    #[arg(long, value_name = "MM", allow_negative_numbers = true)]
    pub voxel_size: Option<f64>,
    /// Bounding box corners xmin,ymin,zmin,xmax,ymax,zmax [mm, default MNI152]
    #[arg(long, value_name = "XMIN,YMIN,ZMIN,XMAX,YMAX,ZMAX", value_delimiter = ',', allow_negative_numbers = true)]
    pub bbox: Option<Vec<f64>>,
    /// Brain mask volume [path]; nonzero voxels are in-brain
    #[arg(long, value_name = "FILE")]
    pub mask: Option<PathBuf>,
    /// Integer atlas label volume [path]
    #[arg(long, value_name = "FILE")]
    pub atlas: Option<PathBuf>,
    /// Region names, line k naming label k [path]
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,
    /// KDE bandwidth [voxels, default 1]
    #[arg(long, value_name = "VOXELS", allow_negative_numbers = true)]
    pub h: Option<f64>,
    /// Region partition [default voxel; label models always use the atlas]
    #[arg(long, value_enum)]
    pub partition: Option<PartitionArg>,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    /// Corpus JSONL, one {id, text, coordinates [mm]} record per line [path]
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// Vocabulary, one phrase per line [path]
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Column scaling of the centered design [default n_variance]
    #[arg(long, value_enum)]
    pub scaling: Option<ScalingArg>,
    /// Feature cache to write [path]; settings go to FILE.json
    #[arg(long, short, value_name = "FILE")]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Corpus JSONL [path]
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// Vocabulary, one phrase per line [path]
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Precomputed feature cache for the same corpus [path]
    #[arg(long, value_name = "FILE")]
    pub features: Option<PathBuf>,
    /// Loss / model kind [default lad]
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Penalty: a value, a comma list chosen by inner CV, or `auto` [unitless, default auto]
    #[arg(long, value_name = "LAMBDA")]
    pub lambda: Option<String>,
    /// Inner CV folds for choosing λ [count, default 3]
    #[arg(long, value_name = "K")]
    pub inner_folds: Option<usize>,
    /// Column scaling of the centered design [default n_variance]
    #[arg(long, value_enum)]
    pub scaling: Option<ScalingArg>,
    #[command(flatten)]
    pub space: SpaceArgs,
    /// Model file to write [path]
    #[arg(long, short, value_name = "FILE")]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Fitted model [path]
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Vocabulary the model was trained with [path]
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Plain-text input [path]
    #[arg(long, value_name = "FILE")]
    pub text: PathBuf,
    #[command(flatten)]
    pub space: SpaceArgs,
    /// Density volume to write, pdf in mm⁻³ [path; `.nii` selects NIfTI]
    #[arg(long, short, value_name = "FILE")]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Corpus JSONL [path]
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// Vocabulary, one phrase per line [path]
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Model to compare as KIND[:PARTITION], repeatable
    /// [default lad:voxel ridge:voxel baseline:voxel, plus label:atlas with --atlas]
    #[arg(long = "model", value_name = "SPEC")]
    pub models: Vec<String>,
    /// Shuffle-split folds [count, default 100]
    #[arg(long, value_name = "N")]
    pub folds: Option<usize>,
    /// Held-out share of each split [fraction in (0, 1), default 0.1]
    #[arg(long, value_name = "FRAC")]
    pub test_fraction: Option<f64>,
    /// Inner CV folds for choosing λ [count, default 3]
    #[arg(long, value_name = "K")]
    pub inner_folds: Option<usize>,
    /// Penalty for every model: value, comma list, or `auto` [unitless, default auto]
    #[arg(long, value_name = "LAMBDA")]
    pub lambda: Option<String>,
    /// Column scaling of the centered design [default n_variance]
    #[arg(long, value_enum)]
    pub scaling: Option<ScalingArg>,
    #[command(flatten)]
    pub space: SpaceArgs,
    /// JSON report [path, default stdout]
    #[arg(long, short, value_name = "FILE")]
    pub output: Option<PathBuf>,
    /// Per-document scores as CSV [path]
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ContrastArgs {
    /// Fitted model [path]
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Corpus JSONL supplying the texts [path]
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// Vocabulary the model was trained with [path]
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Vocabulary phrase to contrast
    #[arg(long)]
    pub term: String,
    #[command(flatten)]
    pub space: SpaceArgs,
    /// Log-ratio volume to write [path; `.nii` selects NIfTI]
    #[arg(long, short, value_name = "FILE")]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Generator spec, JSON or TOML [path, default planted 12³ grid of 4-mm voxels]
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Number of documents [count, default 500]
    #[arg(long, value_name = "N")]
    pub docs: Option<usize>,
    /// Share of coordinates scattered uniformly [fraction in [0, 1]]
    #[arg(long, value_name = "RHO")]
    pub outlier_fraction: Option<f64>,
    /// Directory receiving corpus.jsonl, vocab.txt, atlas.lxv, labels.txt, truth.json [path]
    #[arg(long, short, value_name = "DIR")]
    pub output: PathBuf,
}

/// Optional settings file. Keys mirror the long flags with `_` for `-`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub voxel_size: Option<f64>,
    pub bbox: Option<Vec<f64>>,
    pub mask: Option<PathBuf>,
    pub atlas: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub h: Option<f64>,
    pub partition: Option<PartitionArg>,
    pub loss: Option<LossArg>,
    pub lambda: Option<LambdaValue>,
    pub inner_folds: Option<usize>,
    pub folds: Option<usize>,
    pub test_fraction: Option<f64>,
    pub scaling: Option<ScalingArg>,
    pub models: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub docs: Option<usize>,
    pub outlier_fraction: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LambdaValue {
    Value(f64),
    List(Vec<f64>),
    Text(String),
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunConfig {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub space: Option<Space>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossArg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<LambdaChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_folds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingArg>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub term: Option<String>,
    pub seed: u64,
    #[serde(skip)]
    pub threads: usize,
}

/// Resolved partition geometry.
#[derive(Debug, Clone, Serialize)]
pub struct Space {
    /// mm
    pub voxel_size: f64,
    /// mm, min corner then max corner
    pub bbox: Option<[f64; 6]>,
    pub mask: Option<PathBuf>,
    pub atlas: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// voxels
    pub h: f64,
    pub partition: PartitionArg,
}

impl Space {
    fn resolve(a: &SpaceArgs, f: &FileConfig) -> Result<Space> {
        let bbox = match a.bbox.clone().or_else(|| f.bbox.clone()) {
            None => None,
            Some(b) => Some(<[f64; 6]>::try_from(b.as_slice()).map_err(|_| invalid("bbox", "expected six values"))?),
        };
        let voxel_size = a.voxel_size.or(f.voxel_size).unwrap_or(4.0);
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(invalid("voxel_size", "must be a positive length in mm"));
        }
        let h = a.h.or(f.h).unwrap_or(1.0);
        KdeConfig { h, ..KdeConfig::default() }.validate()?;
        Ok(Space {
            voxel_size,
            bbox,
            mask: a.mask.clone().or_else(|| f.mask.clone()),
            atlas: a.atlas.clone().or_else(|| f.atlas.clone()),
            labels: a.labels.clone().or_else(|| f.labels.clone()),
            h,
            partition: a.partition.or(f.partition).unwrap_or(PartitionArg::Voxel),
        })
    }

    fn kde(&self) -> KdeConfig {
        KdeConfig { h: self.h, ..KdeConfig::default() }
    }

    fn build(&self, kind: PartitionArg) -> Result<Partition> {
        match kind {
            PartitionArg::Atlas => {
                let atlas = self.atlas.as_ref().ok_or_else(|| invalid("atlas", "an atlas partition needs --atlas"))?;
                let labels = self.labels.as_ref().ok_or_else(|| invalid("labels", "an atlas partition needs --labels"))?;
                let names: Vec<String> = std::fs::read_to_string(labels)
                    .map_err(|e| io_field("labels", labels, e))?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect();
                load_atlas_partition(&read_volume_field("atlas", atlas)?, &names)
            }
            PartitionArg::Voxel => {
                let mask = self.mask.as_ref().map(|p| read_volume_field("mask", p)).transpose()?;
                match (self.bbox, &mask) {
                    (None, Some(m)) => voxel_partition_from_mask(m),
                    (b, _) => {
                        let b = b.unwrap_or(DEFAULT_BBOX);
                        build_voxel_partition([b[0], b[1], b[2]], [b[3], b[4], b[5]], self.voxel_size, mask.as_ref())
                    }
                }
            }
        }
    }
}

fn io_field(field: &'static str, path: &Path, e: std::io::Error) -> Error {
    invalid(field, format!("cannot read {}: {e}", path.display()))
}

fn read_volume_field(field: &'static str, path: &Path) -> Result<DensityVolume> {
    if !path.exists() {
        return Err(invalid(field, format!("{} does not exist", path.display())));
    }
    read_any_volume(path)
}

fn required(field: &'static str, flag: Option<PathBuf>, file: Option<PathBuf>, command: &str) -> Result<PathBuf> {
    let p = flag
        .or(file)
        .ok_or_else(|| invalid(field, format!("`{command}` needs --{field} or `{field}` in the config file")))?;
    if !p.exists() {
        return Err(invalid(field, format!("{} does not exist", p.display())));
    }
    Ok(p)
}

fn existing(field: &'static str, p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(invalid(field, format!("{} does not exist", p.display())))
    }
}

/// Parses `auto`, a single value, or a comma-separated list.
pub fn parse_lambda(s: &str) -> Result<LambdaChoice> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("auto") {
        return Ok(LambdaChoice::Auto);
    }
    let vals: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| invalid("lambda", format!("`{v}` is not a number"))))
        .collect::<Result<_>>()?;
    lambda_from(vals)
}

fn lambda_from(vals: Vec<f64>) -> Result<LambdaChoice> {
    if vals.is_empty() || vals.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(invalid("lambda", "values must be positive and finite"));
    }
    Ok(if vals.len() == 1 { LambdaChoice::Fixed(vals[0]) } else { LambdaChoice::Grid(vals) })
}

fn resolve_lambda(flag: Option<&str>, file: Option<&LambdaValue>) -> Result<LambdaChoice> {
    match (flag, file) {
        (Some(s), _) => parse_lambda(s),
        (None, Some(LambdaValue::Text(s))) => parse_lambda(s),
        (None, Some(LambdaValue::Value(v))) => lambda_from(vec![*v]),
        (None, Some(LambdaValue::List(v))) => lambda_from(v.clone()),
        (None, None) => Ok(LambdaChoice::Auto),
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| io_field("config", path, e))?;
    toml::from_str(&text).map_err(|e| invalid("config", format!("{}: {}", path.display(), e.message())))
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| invalid("threads", format!("{THREADS_ENV}=`{v}` is not a count"))),
        _ => Ok(None),
    }
}

fn provenance(cfg: &RunConfig) -> String {
    serde_json::to_string(cfg).expect("settings serialize")
}

fn write_output_volume(vol: &DensityVolume, path: &Path, cfg: &RunConfig) -> Result<()> {
    if path.extension().is_some_and(|e| e == "nii") {
        write_nifti(vol, path)
    } else {
        write_volume_with(vol, path, Dtype::F32, Some(&provenance(cfg)))
    }
}

fn features_for(docs: &[crate::text_features::Document], vocab: &crate::text_features::Vocabulary, cache: Option<&Path>, scaling: Scaling) -> Result<FeatureMatrix> {
    match cache {
        None => assemble_features(docs, vocab, scaling),
        Some(p) => {
            let fm = read_feature_cache(p, vocab)?.with_scaling(scaling);
            if fm.n() != docs.len() || fm.ids.iter().zip(docs).any(|(a, d)| *a != d.id) {
                return Err(invalid("features", "cache does not match the corpus documents"));
            }
            Ok(fm)
        }
    }
}

/// Parses `KIND[:PARTITION]`, e.g. `lad:voxel` or `label`.
pub fn parse_model_spec(s: &str) -> Result<(LossArg, PartitionArg)> {
    let (k, p) = s.split_once(':').unwrap_or((s, ""));
    let kind = LossArg::from_str(k.trim(), true).map_err(|_| invalid("model", format!("unknown model kind `{k}` in `{s}`")))?;
    let part = if p.is_empty() {
        if kind == LossArg::Label { PartitionArg::Atlas } else { PartitionArg::Voxel }
    } else {
        PartitionArg::from_str(p.trim(), true).map_err(|_| invalid("model", format!("unknown partition `{p}` in `{s}`")))?
    };
    if kind == LossArg::Label && part != PartitionArg::Atlas {
        return Err(invalid("model", "label models need the atlas partition"));
    }
    Ok((kind, part))
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("lexmap: {e}");
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = load_config(cli.config.as_deref())?;
    let threads = match cli.threads.or(file.threads) {
        Some(t) => t,
        None => threads_from_env()?.unwrap_or(0),
    };
    if threads > 0 {
        par::set_threads(threads);
    }
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let base = RunConfig { seed, threads, ..RunConfig::default() };
    match cli.command {
        Command::Features(a) => features(a, &file, base),
        Command::Fit(a) => fit(a, &file, base),
        Command::Predict(a) => predict(a, &file, base),
        Command::Evaluate(a) => evaluate(a, &file, base),
        Command::Contrast(a) => contrast(a, &file, base),
        Command::Synth(a) => synth(a, &file, base),
    }
}

fn features(a: FeaturesArgs, f: &FileConfig, base: RunConfig) -> Result<()> {
    let cfg = RunConfig {
        command: "features".into(),
        corpus: Some(required("corpus", a.corpus, f.corpus.clone(), "features")?),
        vocab: Some(required("vocab", a.vocab, f.vocab.clone(), "features")?),
        scaling: Some(a.scaling.or(f.scaling).unwrap_or(ScalingArg::NVariance)),
        output: Some(a.output.clone()),
        ..base
    };
    let docs = read_corpus(cfg.corpus.as_ref().unwrap())?;
    let vocab = load_vocabulary(cfg.vocab.as_ref().unwrap())?;
    let fm = assemble_features(&docs, &vocab, cfg.scaling.unwrap().into())?;
    write_feature_cache(&fm, &vocab, &a.output)?;
    let mut side = a.output.into_os_string();
    side.push(".json");
    std::fs::write(PathBuf::from(side), serde_json::to_string_pretty(&cfg)? + "\n")?;
    Ok(())
}

fn fit(a: FitArgs, f: &FileConfig, base: RunConfig) -> Result<()> {
    let loss = a.loss.or(f.loss).unwrap_or(LossArg::Lad);
    let mut space = Space::resolve(&a.space, f)?;
    if loss == LossArg::Label {
        space.partition = PartitionArg::Atlas;
    }
    if let Some(p) = &a.features {
        existing("features", p)?;
    }
    let cfg = RunConfig {
        command: "fit".into(),
        corpus: Some(required("corpus", a.corpus, f.corpus.clone(), "fit")?),
        vocab: Some(required("vocab", a.vocab, f.vocab.clone(), "fit")?),
        features: a.features,
        output: Some(a.output.clone()),
        loss: Some(loss),
        lambda: Some(resolve_lambda(a.lambda.as_deref(), f.lambda.as_ref())?),
        inner_folds: Some(a.inner_folds.or(f.inner_folds).unwrap_or(3)),
        scaling: Some(a.scaling.or(f.scaling).unwrap_or(ScalingArg::NVariance)),
        space: Some(space),
        ..base
    };
    let space = cfg.space.as_ref().unwrap();
    let partition = space.build(space.partition)?;
    let docs = read_corpus(cfg.corpus.as_ref().unwrap())?;
    let vocab = load_vocabulary(cfg.vocab.as_ref().unwrap())?;
    let fm = features_for(&docs, &vocab, cfg.features.as_deref(), cfg.scaling.unwrap().into())?;
    let fit_cfg = FitConfig { kde: space.kde(), ..FitConfig::default() };
    let targets = build_targets(&docs, &partition, &fit_cfg.kde)?;
    let kind: ModelKind = loss.into();
    let grid = cfg.lambda.as_ref().unwrap().grid(kind, &fm, &targets);
    let coords: Vec<&[[f64; 3]]> = docs.iter().map(|d| d.coordinates.as_slice()).collect();
    let (lambda, _) = select_lambda(kind, &fm, &vocab, &targets, &coords, &partition, &grid, cfg.inner_folds.unwrap(), &fit_cfg)?;
    let mut model = fit_model(kind, &fm, &vocab, &targets, &partition, lambda, &fit_cfg)?;
    model.provenance = provenance(&cfg);
    write_model(&model, &a.output)
}

fn predict(a: PredictArgs, f: &FileConfig, base: RunConfig) -> Result<()> {
    existing("model", &a.model)?;
    existing("text", &a.text)?;
    let model = read_model(&a.model)?;
    let mut space = Space::resolve(&a.space, f)?;
    if a.space.partition.is_none() && f.partition.is_none() && model.kind == ModelKind::Label {
        space.partition = PartitionArg::Atlas;
    }
    let cfg = RunConfig {
        command: "predict".into(),
        vocab: Some(required("vocab", a.vocab, f.vocab.clone(), "predict")?),
        model: Some(a.model),
        output: Some(a.output.clone()),
        space: Some(space),
        ..base
    };
    let space = cfg.space.as_ref().unwrap();
    let partition = space.build(space.partition)?;
    let vocab = load_vocabulary(cfg.vocab.as_ref().unwrap())?;
    model.check_compatible(&vocab, &partition)?;
    let text = std::fs::read_to_string(&a.text).map_err(|e| io_field("text", &a.text, e))?;
    let vol = model.predict_density(&text, &vocab, &partition);
    write_output_volume(&vol, &a.output, &cfg)
}

fn evaluate(a: EvaluateArgs, f: &FileConfig, base: RunConfig) -> Result<()> {
    let mut models = if a.models.is_empty() { f.models.clone().unwrap_or_default() } else { a.models };
    let space = Space::resolve(&a.space, f)?;
    if models.is_empty() {
        models = vec!["lad:voxel".into(), "ridge:voxel".into(), "baseline:voxel".into()];
        if space.atlas.is_some() {
            models.push("label:atlas".into());
        }
    }
    let parsed: Vec<(LossArg, PartitionArg)> = models.iter().map(|s| parse_model_spec(s)).collect::<Result<_>>()?;
    let folds = a.folds.or(f.folds).unwrap_or(100);
    if folds == 0 {
        return Err(invalid("folds", "need at least one fold"));
    }
    let cfg = RunConfig {
        command: "evaluate".into(),
        corpus: Some(required("corpus", a.corpus, f.corpus.clone(), "evaluate")?),
        vocab: Some(required("vocab", a.vocab, f.vocab.clone(), "evaluate")?),
        output: a.output.clone(),
        lambda: Some(resolve_lambda(a.lambda.as_deref(), f.lambda.as_ref())?),
        inner_folds: Some(a.inner_folds.or(f.inner_folds).unwrap_or(3)),
        folds: Some(folds),
        test_fraction: Some(a.test_fraction.or(f.test_fraction).unwrap_or(0.1)),
        scaling: Some(a.scaling.or(f.scaling).unwrap_or(ScalingArg::NVariance)),
        models: models.clone(),
        space: Some(space),
        ..base
    };
    let space = cfg.space.as_ref().unwrap();
    let voxel = parsed.iter().any(|p| p.1 == PartitionArg::Voxel).then(|| space.build(PartitionArg::Voxel)).transpose()?;
    let atlas = parsed.iter().any(|p| p.1 == PartitionArg::Atlas).then(|| space.build(PartitionArg::Atlas)).transpose()?;
    let docs = read_corpus(cfg.corpus.as_ref().unwrap())?;
    let vocab = load_vocabulary(cfg.vocab.as_ref().unwrap())?;
    let specs: Vec<ModelSpec<'_>> = models
        .iter()
        .zip(&parsed)
        .map(|(name, &(kind, part))| ModelSpec {
            name: name.clone(),
            kind: kind.into(),
            partition: match part {
                PartitionArg::Voxel => voxel.as_ref().unwrap(),
                PartitionArg::Atlas => atlas.as_ref().unwrap(),
            },
            lambda: cfg.lambda.clone().unwrap(),
        })
        .collect();
    let cv = CvConfig {
        n_folds: folds,
        test_fraction: cfg.test_fraction.unwrap(),
        seed: cfg.seed,
        inner_folds: cfg.inner_folds.unwrap(),
        scaling: cfg.scaling.unwrap().into(),
        fit: FitConfig { kde: space.kde(), ..FitConfig::default() },
    };
    let mut summary = shuffle_split_cv(&docs, &vocab, &specs, &cv)?;
    summary.provenance = Some(serde_json::to_value(&cfg)?);
    match &a.output {
        Some(p) => summary.write(p, a.csv.as_deref()),
        None => {
            if let Some(c) = &a.csv {
                std::fs::write(c, summary.to_csv())?;
            }
            print!("{}", summary.to_json()?);
            Ok(())
        }
    }
}

fn contrast(a: ContrastArgs, f: &FileConfig, base: RunConfig) -> Result<()> {
    existing("model", &a.model)?;
    let model = read_model(&a.model)?;
    let mut space = Space::resolve(&a.space, f)?;
    if a.space.partition.is_none() && f.partition.is_none() && model.kind == ModelKind::Label {
        space.partition = PartitionArg::Atlas;
    }
    let cfg = RunConfig {
        command: "contrast".into(),
        corpus: Some(required("corpus", a.corpus, f.corpus.clone(), "contrast")?),
        vocab: Some(required("vocab", a.vocab, f.vocab.clone(), "contrast")?),
        model: Some(a.model),
        output: Some(a.output.clone()),
        term: Some(a.term.clone()),
        space: Some(space),
        ..base
    };
    let space = cfg.space.as_ref().unwrap();
    let partition = space.build(space.partition)?;
    let vocab = load_vocabulary(cfg.vocab.as_ref().unwrap())?;
    let docs = read_corpus(cfg.corpus.as_ref().unwrap())?;
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let vol = term_contrast(&model, &partition, &vocab, &texts, &a.term)?;
    write_output_volume(&vol, &a.output, &cfg)
}

fn synth(a: SynthArgs, f: &FileConfig, base: RunConfig) -> Result<()> {
    let mut spec = match &a.spec {
        None => SynthSpec::planted(500, 0),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_field("spec", p, e))?;
            if p.extension().is_some_and(|e| e == "toml") {
                toml::from_str(&text).map_err(|e| invalid("spec", e.message().to_string()))?
            } else {
                serde_json::from_str(&text).map_err(|e| invalid("spec", e.to_string()))?
            }
        }
    };
    if let Some(n) = a.docs.or(f.docs) {
        spec.n_docs = n;
    }
    if let Some(r) = a.outlier_fraction.or(f.outlier_fraction) {
        if !(0.0..=1.0).contains(&r) {
            return Err(invalid("outlier_fraction", "must lie in [0, 1]"));
        }
        spec.outlier_fraction = r;
    }
    if a.spec.is_none() || base.seed != 0 {
        spec.seed = base.seed;
    }
    let world = build_world(&spec)?;
    let docs = generate_corpus(&world);
    let dir = &a.output;
    std::fs::create_dir_all(dir)?;
    write_corpus(&docs, &dir.join("corpus.jsonl"))?;
    std::fs::write(dir.join("vocab.txt"), world.vocabulary.phrases().join("\n") + "\n")?;
    std::fs::write(dir.join("labels.txt"), world.labels.join("\n") + "\n")?;
    let cfg = RunConfig { command: "synth".into(), output: Some(dir.clone()), seed: spec.seed, ..base };
    write_volume_with(&world.atlas_volume, &dir.join("atlas.lxv"), Dtype::F32, Some(&provenance(&cfg)))?;
    write_ground_truth(&world, &dir.join("truth.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_forms() {
        assert_eq!(parse_lambda("auto").unwrap(), LambdaChoice::Auto);
        assert_eq!(parse_lambda("0.5").unwrap(), LambdaChoice::Fixed(0.5));
        assert_eq!(parse_lambda("1, 0.1").unwrap(), LambdaChoice::Grid(vec![1.0, 0.1]));
        assert!(matches!(parse_lambda("-1"), Err(Error::InvalidArgument { field: "lambda", .. })));
        assert!(parse_lambda("x").is_err());
    }

    #[test]
    fn model_specs() {
        assert_eq!(parse_model_spec("lad").unwrap(), (LossArg::Lad, PartitionArg::Voxel));
        assert_eq!(parse_model_spec("label").unwrap(), (LossArg::Label, PartitionArg::Atlas));
        assert_eq!(parse_model_spec("ridge:atlas").unwrap(), (LossArg::Ridge, PartitionArg::Atlas));
        assert!(parse_model_spec("label:voxel").is_err());
        assert!(parse_model_spec("svm").is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(toml::from_str::<FileConfig>("voxel_sise = 2").is_err());
        let c: FileConfig = toml::from_str("lambda = [1.0, 0.1]\nloss = \"ridge\"").unwrap();
        assert_eq!(c.loss, Some(LossArg::Ridge));
        assert!(matches!(c.lambda, Some(LambdaValue::List(_))));
    }

    #[test]
    fn help_lists_units() {
        use clap::CommandFactory;
        let mut cmd = Cli::command();
        for sub in ["fit", "evaluate", "predict", "contrast", "synth", "features"] {
            let help = cmd.find_subcommand_mut(sub).unwrap().render_long_help().to_string();
            assert!(help.contains('['), "{sub}");
        }
        let fit = cmd.find_subcommand_mut("fit").unwrap().render_long_help().to_string();
        assert!(fit.contains("mm") && fit.contains("voxels"));
    }
}
