//! Spatial partitions of a 3D volume, point lookup, and volume file I/O.
//!
//! Voxel `(i, j, k)` covers the half-open box whose lower corner is
//! `affine * (i, j, k, 1)`; a point belongs to voxel `i` along an axis when
//! `i δ ≤ x - origin < (i + 1) δ`. Voxel data is stored x-fastest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::text_features::normalize_phrase;

/// Row-major 4×4 matrix mapping voxel indices `(i, j, k, 1)` to millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine(pub [[f64; 4]; 4]);

impl Affine {
    pub fn diagonal(voxel_size: [f64; 3], origin: [f64; 3]) -> Self {
        let mut m = [[0.0; 4]; 4];
        for a in 0..3 {
            m[a][a] = voxel_size[a];
            m[a][3] = origin[a];
        }
        m[3][3] = 1.0;
        Affine(m)
    }

    fn linear(&self) -> Matrix3<f64> {
        let m = &self.0;
        Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        )
    }

    fn is_axis_aligned(&self) -> bool {
        let m = &self.0;
        (0..3).all(|r| (0..3).all(|c| r == c || m[r][c] == 0.0))
    }

    pub fn is_invertible(&self) -> bool {
        let det = self.linear().determinant();
        det.is_finite() && det != 0.0
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.linear().determinant().abs()
    }

    /// Side lengths of a voxel (column norms of the linear block).
    pub fn voxel_sizes(&self) -> [f64; 3] {
        let l = self.linear();
        [l.column(0).norm(), l.column(1).norm(), l.column(2).norm()]
    }

    pub fn voxel_to_mm(&self, ijk: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = m[r][0] * ijk[0] + m[r][1] * ijk[1] + m[r][2] * ijk[2] + m[r][3];
        }
        out
    }

    /// Continuous voxel coordinates of a point in mm.
    pub fn mm_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        if self.is_axis_aligned() {
            return [
                (p[0] - m[0][3]) / m[0][0],
                (p[1] - m[1][3]) / m[1][1],
                (p[2] - m[2][3]) / m[2][2],
            ];
        }
        let inv = self
            .linear()
            .try_inverse()
            .unwrap_or_else(|| Matrix3::from_element(f64::NAN));
        let v = inv * Vector3::new(p[0] - m[0][3], p[1] - m[1][3], p[2] - m[2][3]);
        [v[0], v[1], v[2]]
    }
}

/// Grid shape and geometry shared by partitions and volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub shape: [usize; 3],
    pub affine: Affine,
}

impl Grid {
    pub fn new(shape: [usize; 3], affine: Affine) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(invalid("shape", "grid dimensions must be positive"));
        }
        if !affine.is_invertible() {
            return Err(invalid("affine", "linear block is singular"));
        }
        Ok(Grid { shape, affine })
    }

    pub fn n_voxels(&self) -> usize {
        self.shape.iter().product()
    }

    #[inline]
    pub fn linear_index(&self, ijk: [usize; 3]) -> usize {
        ijk[0] + self.shape[0] * (ijk[1] + self.shape[1] * ijk[2])
    }

    #[inline]
    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let nx = self.shape[0];
        let ny = self.shape[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Voxel containing `p` under half-open binning, or `None` outside the grid.
    pub fn locate_voxel(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let v = self.affine.mm_to_voxel(p);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = v[a].floor();
            if !f.is_finite() || f < 0.0 || f >= self.shape[a] as f64 {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    pub fn voxel_center(&self, idx: usize) -> [f64; 3] {
        let [i, j, k] = self.unravel(idx);
        self.affine
            .voxel_to_mm([i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    VoxelGrid,
    Atlas,
}

/// Disjoint decomposition of the grid into `m` regions plus background (label 0).
#[derive(Debug, Clone)]
pub struct Partition {
    pub kind: PartitionKind,
    pub grid: Grid,
    region_of_voxel: Vec<u32>,
    region_voxels: Vec<Vec<usize>>,
    volumes: Vec<f64>,
    labels: Option<Vec<String>>,
}

impl Partition {
    fn from_labels(
        kind: PartitionKind,
        grid: Grid,
        region_of_voxel: Vec<u32>,
        m: usize,
        labels: Option<Vec<String>>,
    ) -> Result<Self> {
        let mut region_voxels = vec![Vec::new(); m];
        for (idx, &r) in region_of_voxel.iter().enumerate() {
            if r > 0 {
                region_voxels[r as usize - 1].push(idx);
            }
        }
        if let Some(k) = region_voxels.iter().position(|v| v.is_empty()) {
            return Err(invalid("labels", format!("region {} has no voxels", k + 1)));
        }
        let vv = grid.affine.voxel_volume();
        let volumes = region_voxels.iter().map(|v| v.len() as f64 * vv).collect();
        Ok(Partition {
            kind,
            grid,
            region_of_voxel,
            region_voxels,
            volumes,
            labels,
        })
    }

    /// Number of regions `m` (background excluded).
    pub fn m(&self) -> usize {
        self.volumes.len()
    }

    /// Region volumes `v_k` in mm³, indexed `k - 1`.
    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn total_volume(&self) -> f64 {
        self.volumes.iter().sum()
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn region_of_voxel(&self) -> &[u32] {
        &self.region_of_voxel
    }

    /// Linear voxel indices of region `k` (1-based).
    pub fn voxels_of(&self, k: usize) -> &[usize] {
        &self.region_voxels[k - 1]
    }

    /// Region index in `0..=m` of the voxel containing `p`.
    pub fn locate(&self, p: [f64; 3]) -> usize {
        match self.grid.locate_voxel(p) {
            Some(ijk) => self.region_of_voxel[self.grid.linear_index(ijk)] as usize,
            None => 0,
        }
    }

    /// Paint a per-region value table onto the grid; background is 0.
    pub fn paint(&self, per_region: &[f64]) -> DensityVolume {
        assert_eq!(per_region.len(), self.m());
        let values = self
            .region_of_voxel
            .iter()
            .map(|&r| if r == 0 { 0.0 } else { per_region[r as usize - 1] })
            .collect();
        DensityVolume {
            grid: self.grid.clone(),
            values,
        }
    }

    /// Stable content hash used to bind models and caches to a partition.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(match self.kind {
            PartitionKind::VoxelGrid => b"voxel".as_slice(),
            PartitionKind::Atlas => b"atlas".as_slice(),
        });
        for n in self.grid.shape {
            h.update((n as u64).to_le_bytes());
        }
        for row in self.grid.affine.0 {
            for x in row {
                h.update(x.to_le_bytes());
            }
        }
        for r in &self.region_of_voxel {
            h.update(r.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for l in labels {
                h.update(l.as_bytes());
                h.update([0u8]);
            }
        }
        h.finalize().into()
    }
}

/// Regular voxel grid over a bounding box; each non-masked voxel is its own region.
pub fn build_voxel_partition(
    bbox_min: [f64; 3],
    bbox_max: [f64; 3],
    voxel_size: f64,
    mask: Option<&DensityVolume>,
) -> Result<Partition> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(invalid("voxel_size", "must be a positive finite number"));
    }
    let mut shape = [0usize; 3];
    for a in 0..3 {
        let extent = bbox_max[a] - bbox_min[a];
        if !(extent > 0.0) {
            return Err(invalid("bbox", "corners must be strictly ordered"));
        }
        shape[a] = ((extent / voxel_size) - 1e-9).ceil().max(1.0) as usize;
    }
    let grid = Grid::new(shape, Affine::diagonal([voxel_size; 3], bbox_min))?;
    if let Some(mask) = mask {
        if mask.grid.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "mask shape {:?} does not match grid shape {:?}",
                mask.grid.shape, shape
            )));
        }
    }
    voxel_partition_on_grid(grid, mask.map(|m| m.values.as_slice()))
}

/// Voxel partition on the geometry of an existing mask volume (nonzero = in-brain).
pub fn voxel_partition_from_mask(mask: &DensityVolume) -> Result<Partition> {
    voxel_partition_on_grid(mask.grid.clone(), Some(&mask.values))
}

fn voxel_partition_on_grid(grid: Grid, mask: Option<&[f64]>) -> Result<Partition> {
    let mut region_of_voxel = vec![0u32; grid.n_voxels()];
    let mut m = 0usize;
    for (idx, r) in region_of_voxel.iter_mut().enumerate() {
        if mask.map_or(true, |mk| mk[idx] != 0.0) {
            m += 1;
            *r = m as u32;
        }
    }
    if m == 0 {
        return Err(Error::Empty("mask selects no voxels".into()));
    }
    Partition::from_labels(PartitionKind::VoxelGrid, grid, region_of_voxel, m, None)
}

/// Atlas partition from an integer label volume and one name per label `1..=m`.
pub fn load_atlas_partition(label_volume: &DensityVolume, label_names: &[String]) -> Result<Partition> {
    let m = label_names.len();
    let mut region_of_voxel = Vec::with_capacity(label_volume.values.len());
    for &v in &label_volume.values {
        if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
            return Err(invalid("labels", format!("label {v} is not a nonnegative integer")));
        }
        if v as usize > m {
            return Err(invalid(
                "labels",
                format!("label {} exceeds the {} provided names", v as usize, m),
            ));
        }
        region_of_voxel.push(v as u32);
    }
    if m == 0 || region_of_voxel.iter().all(|&r| r == 0) {
        return Err(Error::Empty("atlas has no labeled regions".into()));
    }
    let names = label_names.iter().map(|s| normalize_phrase(s)).collect();
    Partition::from_labels(
        PartitionKind::Atlas,
        label_volume.grid.clone(),
        region_of_voxel,
        m,
        Some(names),
    )
}

/// Scalar field over a grid (pdf values in mm⁻³, labels, or masks).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityVolume {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl DensityVolume {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_voxels() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a grid of {} voxels",
                values.len(),
                grid.n_voxels()
            )));
        }
        Ok(DensityVolume { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.n_voxels();
        DensityVolume {
            grid,
            values: vec![0.0; n],
        }
    }

    /// Integral of the field: Σ values × voxel volume.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.affine.voxel_volume()
    }

    pub fn value_at(&self, p: [f64; 3]) -> Option<f64> {
        self.grid
            .locate_voxel(p)
            .map(|ijk| self.values[self.grid.linear_index(ijk)])
    }
}

const VOLUME_MAGIC: &[u8; 8] = b"LXVOLUME";
const VOLUME_VERSION: u32 = 1;
const HEADER_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Write in the internal container with 32-bit float payload.
pub fn write_volume(vol: &DensityVolume, path: &Path) -> Result<()> {
    write_volume_with(vol, path, Dtype::F32, None)
}

/// Write in the internal container.
///
/// Layout: 64-byte header (`LXVOLUME`, u32 LE version, zero padding), u64 LE
/// metadata length, UTF-8 metadata lines (`shape`, `affine` row-major, `dtype`,
/// optional `provenance`), then little-endian samples in x-fastest order.
pub fn write_volume_with(
    vol: &DensityVolume,
    path: &Path,
    dtype: Dtype,
    provenance: Option<&str>,
) -> Result<()> {
    if let Some(bad) = vol.values.iter().find(|v| !v.is_finite()) {
        return Err(invalid("values", format!("non-finite value {bad}")));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_volume(vol, dtype, provenance))?;
    w.flush()?;
    Ok(())
}

pub fn encode_volume(vol: &DensityVolume, dtype: Dtype, provenance: Option<&str>) -> Vec<u8> {
    let mut meta = String::new();
    let [nx, ny, nz] = vol.grid.shape;
    meta.push_str(&format!("shape = {nx} {ny} {nz}\n"));
    let aff: Vec<String> = vol
        .grid
        .affine
        .0
        .iter()
        .flat_map(|r| r.iter().map(|x| format!("{x:?}")))
        .collect();
    meta.push_str(&format!("affine = {}\n", aff.join(" ")));
    meta.push_str(&format!("dtype = {}\n", dtype.tag()));
    if let Some(p) = provenance {
        meta.push_str(&format!("provenance = {}\n", p.replace('\n', " ")));
    }

    let mut out = Vec::with_capacity(HEADER_LEN + 8 + meta.len() + vol.values.len() * 8);
    let mut header = [0u8; HEADER_LEN];
    header[..8].copy_from_slice(VOLUME_MAGIC);
    header[8..12].copy_from_slice(&VOLUME_VERSION.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    match dtype {
        Dtype::F32 => vol
            .values
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => vol
            .values
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn read_volume(path: &Path) -> Result<DensityVolume> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    decode_volume(&buf).map(|(v, _)| v)
}

/// Decode a container, returning the volume and its provenance line if any.
pub fn decode_volume(buf: &[u8]) -> Result<(DensityVolume, Option<String>)> {
    if buf.len() < HEADER_LEN + 8 {
        return Err(Error::Malformed("volume file shorter than its header".into()));
    }
    if &buf[..8] != VOLUME_MAGIC {
        return Err(Error::Malformed("bad volume magic".into()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != VOLUME_VERSION {
        return Err(Error::Malformed(format!("unsupported volume version {version}")));
    }
    let meta_len = u64::from_le_bytes(buf[HEADER_LEN..HEADER_LEN + 8].try_into().unwrap()) as usize;
    let meta_start = HEADER_LEN + 8;
    let meta_end = meta_start
        .checked_add(meta_len)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| Error::Malformed("truncated metadata block".into()))?;
    let meta = std::str::from_utf8(&buf[meta_start..meta_end])
        .map_err(|_| Error::Malformed("metadata is not UTF-8".into()))?;

    let mut shape = None;
    let mut affine = None;
    let mut dtype = None;
    let mut provenance = None;
    for line in meta.lines() {
        let Some((key, value)) = line.split_once(" = ") else {
            return Err(Error::Malformed(format!("bad metadata line `{line}`")));
        };
        match key {
            "shape" => {
                let dims: Vec<usize> = value
                    .split_whitespace()
                    .map(|s| s.parse().map_err(|_| Error::Malformed(format!("bad shape `{value}`"))))
                    .collect::<Result<_>>()?;
                let dims: [usize; 3] = dims
                    .try_into()
                    .map_err(|_| Error::Malformed("shape needs three dimensions".into()))?;
                shape = Some(dims);
            }
            "affine" => {
                let vals: Vec<f64> = value
                    .split_whitespace()
                    .map(|s| s.parse().map_err(|_| Error::Malformed(format!("bad affine `{value}`"))))
                    .collect::<Result<_>>()?;
                if vals.len() != 16 {
                    return Err(Error::Malformed("affine needs 16 entries".into()));
                }
                let mut m = [[0.0; 4]; 4];
                for (i, v) in vals.into_iter().enumerate() {
                    m[i / 4][i % 4] = v;
                }
                affine = Some(Affine(m));
            }
            "dtype" => {
                dtype = Some(match value {
                    "f32" => Dtype::F32,
                    "f64" => Dtype::F64,
                    other => return Err(Error::Malformed(format!("unsupported dtype `{other}`"))),
                })
            }
            "provenance" => provenance = Some(value.to_string()),
            _ => {}
        }
    }
    let shape = shape.ok_or_else(|| Error::Malformed("missing shape".into()))?;
    let affine = affine.ok_or_else(|| Error::Malformed("missing affine".into()))?;
    let dtype = dtype.ok_or_else(|| Error::Malformed("missing dtype".into()))?;
    let grid = Grid::new(shape, affine).map_err(|e| Error::Malformed(e.to_string()))?;

    let n = grid.n_voxels();
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let payload = &buf[meta_end..];
    if payload.len() != n * width {
        return Err(Error::Malformed(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            n * width
        )));
    }
    let values = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((DensityVolume { grid, values }, provenance))
}

const NIFTI_HEADER: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;

/// Single-file NIfTI-1 (`.nii`) bytes: float32, little-endian, sform set.
///
/// NIfTI places voxel centres at integer indices, so the sform is shifted by
/// half a voxel relative to the internal corner convention.
pub fn encode_nifti(vol: &DensityVolume) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(NIFTI_HEADER as i32).to_le_bytes());
    let [nx, ny, nz] = vol.grid.shape;
    let dims = [3i16, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *d);
    }
    put_i16(&mut h, 70, 16); // DT_FLOAT32
    put_i16(&mut h, 72, 32);
    let sizes = vol.grid.affine.voxel_sizes();
    let pixdim = [1.0f32, sizes[0] as f32, sizes[1] as f32, sizes[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *p);
    }
    put_f32(&mut h, 108, NIFTI_VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // NIFTI_UNITS_MM
    put_i16(&mut h, 254, 1); // sform_code = scanner
    let a = &vol.grid.affine.0;
    for r in 0..3 {
        let shift = 0.5 * (a[r][0] + a[r][1] + a[r][2]);
        for c in 0..4 {
            let v = if c == 3 { a[r][3] + shift } else { a[r][c] };
            put_f32(&mut h, 280 + 16 * r + 4 * c, v as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    for v in &vol.values {
        h.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    h
}

pub fn write_nifti(vol: &DensityVolume, path: &Path) -> Result<()> {
    std::fs::write(path, encode_nifti(vol))?;
    Ok(())
}

/// Minimal little-endian NIfTI-1 reader (uint8, int16, int32, float32, float64).
pub fn decode_nifti(buf: &[u8]) -> Result<DensityVolume> {
    if buf.len() < NIFTI_HEADER {
        return Err(Error::Malformed("NIfTI header truncated".into()));
    }
    let i16_at = |o: usize| i16::from_le_bytes([buf[o], buf[o + 1]]);
    let f32_at = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    if i32::from_le_bytes(buf[0..4].try_into().unwrap()) != NIFTI_HEADER as i32 {
        return Err(Error::Malformed("not a little-endian NIfTI-1 file".into()));
    }
    if &buf[344..347] != b"n+1" {
        return Err(Error::Malformed("only single-file NIfTI-1 is supported".into()));
    }
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Malformed(format!("bad dim[0] = {ndim}")));
    }
    let mut shape = [1usize; 3];
    for (a, s) in shape.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let d = i16_at(42 + 2 * a);
        if d <= 0 {
            return Err(Error::Malformed(format!("bad dimension {d}")));
        }
        *s = d as usize;
    }
    let datatype = i16_at(70);
    let vox_offset = f32_at(108) as usize;
    let mut slope = f32_at(112) as f64;
    let inter = f32_at(116) as f64;
    if slope == 0.0 {
        slope = 1.0;
    }
    let affine = if i16_at(254) > 0 {
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().enumerate().take(3) {
            for (c, x) in row.iter_mut().enumerate() {
                *x = f32_at(280 + 16 * r + 4 * c) as f64;
            }
            let shift = 0.5 * (row[0] + row[1] + row[2]);
            row[3] -= shift;
        }
        m[3][3] = 1.0;
        Affine(m)
    } else {
        let p = [f32_at(80) as f64, f32_at(84) as f64, f32_at(88) as f64];
        Affine::diagonal(p.map(|x| if x > 0.0 { x } else { 1.0 }), [0.0; 3])
    };
    let grid = Grid::new(shape, affine).map_err(|e| Error::Malformed(e.to_string()))?;
    let n = grid.n_voxels();
    let width = match datatype {
        2 => 1,
        4 => 2,
        8 | 16 => 4,
        64 => 8,
        other => return Err(Error::Malformed(format!("unsupported NIfTI datatype {other}"))),
    };
    let data = buf
        .get(vox_offset..vox_offset + n * width)
        .ok_or_else(|| Error::Malformed("NIfTI payload truncated".into()))?;
    let values = data
        .chunks_exact(width)
        .map(|c| {
            let raw = match datatype {
                2 => c[0] as f64,
                4 => i16::from_le_bytes([c[0], c[1]]) as f64,
                8 => i32::from_le_bytes(c.try_into().unwrap()) as f64,
                16 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                _ => f64::from_le_bytes(c.try_into().unwrap()),
            };
            raw * slope + inter
        })
        .collect();
    Ok(DensityVolume { grid, values })
}

/// Read either container format, chosen by file extension (`.nii` → NIfTI).
pub fn read_any_volume(path: &Path) -> Result<DensityVolume> {
    let buf = std::fs::read(path)?;
    if path.extension().is_some_and(|e| e == "nii") {
        decode_nifti(&buf)
    } else {
        decode_volume(&buf).map(|(v, _)| v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_atlas() -> Partition {
        let grid = Grid::new([4, 1, 1], Affine::diagonal([1.0; 3], [0.0; 3])).unwrap();
        let labels = DensityVolume::new(grid, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        load_atlas_partition(&labels, &["Amygdala".into(), "insula".into()]).unwrap()
    }

    #[test]
    fn voxel_partition_counts() {
        let p = build_voxel_partition([0.0; 3], [16.0; 3], 4.0, None).unwrap();
        assert_eq!(p.grid.shape, [4, 4, 4]);
        assert_eq!(p.m(), 64);
        assert!(p.volumes().iter().all(|&v| v == 64.0));

        let grid = p.grid.clone();
        let mut mask = DensityVolume::zeros(grid);
        for i in 0..10 {
            mask.values[i * 6] = 1.0;
        }
        let p = build_voxel_partition([0.0; 3], [16.0; 3], 4.0, Some(&mask)).unwrap();
        assert_eq!(p.m(), 10);
        assert_eq!(p.total_volume(), 640.0);
    }

    #[test]
    fn voxel_partition_rejects_bad_input() {
        assert!(build_voxel_partition([0.0; 3], [16.0; 3], 0.0, None).is_err());
        assert!(build_voxel_partition([0.0; 3], [16.0; 3], -1.0, None).is_err());
        let grid = Grid::new([3, 3, 3], Affine::diagonal([4.0; 3], [0.0; 3])).unwrap();
        let mask = DensityVolume::zeros(grid);
        assert!(matches!(
            build_voxel_partition([0.0; 3], [16.0; 3], 4.0, Some(&mask)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn atlas_from_labels() {
        let p = toy_atlas();
        assert_eq!(p.m(), 2);
        assert_eq!(p.volumes(), &[2.0, 2.0]);
        assert_eq!(p.labels().unwrap()[0], "amygdala");
    }

    #[test]
    fn atlas_errors() {
        let grid = Grid::new([4, 1, 1], Affine::diagonal([1.0; 3], [0.0; 3])).unwrap();
        let names: Vec<String> = vec!["a".into(), "b".into()];
        let over = DensityVolume::new(grid.clone(), vec![1.0, 3.0, 2.0, 2.0]).unwrap();
        assert!(load_atlas_partition(&over, &names).is_err());
        let zero = DensityVolume::zeros(grid.clone());
        assert!(load_atlas_partition(&zero, &names).is_err());
        let gap = DensityVolume::new(grid, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(load_atlas_partition(&gap, &names).is_err());
    }

    #[test]
    fn locate_centers_outside_and_boundaries() {
        let p = build_voxel_partition([0.0; 3], [16.0; 3], 4.0, None).unwrap();
        let c = p.grid.voxel_center(4);
        assert_eq!(p.locate(c), 5);
        assert_eq!(p.locate([-1.0, 2.0, 2.0]), 0);
        assert_eq!(p.locate([17.0, 2.0, 2.0]), 0);
        // x = 4 satisfies 1·δ ≤ x < 2·δ
        assert_eq!(p.locate([4.0, 0.0, 0.0]), 2);
        assert_eq!(p.locate([3.999_999, 0.0, 0.0]), 1);
        assert_eq!(p.locate([16.0, 0.0, 0.0]), 0);
    }

    #[test]
    fn round_trip_and_bad_magic() {
        let grid = Grid::new([4, 4, 4], Affine::diagonal([2.0; 3], [-3.0, 1.5, 0.25])).unwrap();
        let values: Vec<f64> = (0..64).map(|i| ((i * 37 % 11) as f32 * 0.137f32) as f64).collect();
        let vol = DensityVolume::new(grid, values).unwrap();
        let bytes = encode_volume(&vol, Dtype::F32, Some("{\"a\":1}"));
        let (back, prov) = decode_volume(&bytes).unwrap();
        assert_eq!(back, vol);
        assert_eq!(prov.as_deref(), Some("{\"a\":1}"));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_volume(&bad), Err(Error::Malformed(_))));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_volume(truncated), Err(Error::Malformed(_))));
    }

    #[test]
    fn nifti_export_header() {
        let p = build_voxel_partition([-8.0; 3], [8.0; 3], 4.0, None).unwrap();
        let vol = p.paint(&(0..64).map(|k| k as f64).collect::<Vec<_>>());
        let bytes = encode_nifti(&vol);
        assert_eq!(bytes.len(), 352 + 64 * 4);
        let pix: Vec<f32> = (0..3)
            .map(|i| f32::from_le_bytes(bytes[80 + 4 * i..84 + 4 * i].try_into().unwrap()))
            .collect();
        assert_eq!(pix, vec![4.0, 4.0, 4.0]);
        let back = decode_nifti(&bytes).unwrap();
        assert_eq!(back.grid, vol.grid);
        assert_eq!(back.values, vol.values);
    }

    proptest! {
        #[test]
        fn volumes_sum_and_locate_consistent(
            nx in 1usize..6, ny in 1usize..6, nz in 1usize..6,
            seed in any::<u64>(),
        ) {
            let grid = Grid::new([nx, ny, nz], Affine::diagonal([2.0, 1.5, 4.0], [-3.0, 0.5, 7.0])).unwrap();
            let labels: Vec<f64> = (0..grid.n_voxels())
                .map(|i| ((seed.wrapping_mul(i as u64 + 7) >> 13) % 4) as f64)
                .collect();
            let present: std::collections::BTreeSet<u32> =
                labels.iter().filter(|&&l| l > 0.0).map(|&l| l as u32).collect();
            prop_assume!(!present.is_empty());
            // relabel to a dense 1..=m range
            let remap: std::collections::BTreeMap<u32, f64> =
                present.iter().enumerate().map(|(i, &l)| (l, (i + 1) as f64)).collect();
            let dense: Vec<f64> = labels.iter().map(|&l| if l == 0.0 { 0.0 } else { remap[&(l as u32)] }).collect();
            let names: Vec<String> = (0..present.len()).map(|i| format!("r{i}")).collect();
            let vol = DensityVolume::new(grid.clone(), dense.clone()).unwrap();
            let p = load_atlas_partition(&vol, &names).unwrap();
            let nonbg = dense.iter().filter(|&&l| l > 0.0).count() as f64;
            prop_assert_eq!(p.total_volume(), nonbg * grid.affine.voxel_volume());
            for idx in 0..grid.n_voxels() {
                prop_assert_eq!(p.locate(grid.voxel_center(idx)) as f64, dense[idx]);
            }
        }

        #[test]
        fn half_open_binning_on_boundaries(
            i in 0usize..8, j in 0usize..8, k in 0usize..8,
            size_pick in 0usize..4, ox in -20i32..20,
            jitter in 0.0f64..0.999,
        ) {
            let delta = [0.5, 1.0, 1.5, 4.0][size_pick];
            let origin = [ox as f64, -(ox as f64), 3.0];
            let grid = Grid::new([8, 8, 8], Affine::diagonal([delta; 3], origin)).unwrap();
            let on_edge = [origin[0] + i as f64 * delta, origin[1] + j as f64 * delta, origin[2] + k as f64 * delta];
            prop_assert_eq!(grid.locate_voxel(on_edge), Some([i, j, k]));
            let inside = [on_edge[0] + jitter * delta, on_edge[1], on_edge[2]];
            prop_assert_eq!(grid.locate_voxel(inside), Some([i, j, k]));
        }
    }
}
