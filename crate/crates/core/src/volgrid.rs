//! Volumes on a regular grid with a voxel-to-world affine.
//!
//! Voxel `(i, j, k)` has its center at `affine * (i, j, k, 1)`; there is no
//! half-voxel offset. Data are stored x-fastest and channel-slowest, so voxel
//! `(x, y, z, c)` lives at `x + nx * (y + ny * (z + nz * c))`.
//!
//! Volumes persist in the MVOL container:
//!
//! ```text
//! "MVL1" | u32 LE header length | UTF-8 JSON header | little-endian payload
//! ```
//!
//! with header fields `dims`, `channels`, `voxel_size_mm`, `affine` (16
//! numbers, row-major) and `dtype` (`"float32"` or `"uint8"`).

use std::fs;
use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

pub const MVOL_MAGIC: &[u8; 4] = b"MVL1";

pub type Affine = [[f64; 4]; 4];

fn diag_affine(s: [f64; 3]) -> Affine {
    [
        [s[0], 0.0, 0.0, 0.0],
        [0.0, s[1], 0.0, 0.0],
        [0.0, 0.0, s[2], 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn apply_affine(m: &Affine, p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (r, o) in out.iter_mut().enumerate() {
        *o = m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3];
    }
    out
}

/// Grid geometry shared by every volume on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    affine: Affine,
    inverse: Affine,
}

impl Grid {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], affine: Affine) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Geometry(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if voxel_size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Geometry(format!(
                "voxel size must be positive, got {voxel_size:?}"
            )));
        }
        let m = Matrix4::from_fn(|r, c| affine[r][c]);
        let det3 = m.fixed_view::<3, 3>(0, 0).determinant();
        if !(det3.abs() > 1e-9) {
            return Err(Error::Geometry(format!(
                "affine is singular (det {det3:e})"
            )));
        }
        let inv = m
            .try_inverse()
            .ok_or_else(|| Error::Geometry("affine is not invertible".into()))?;
        let mut inverse = [[0.0; 4]; 4];
        for (r, row) in inverse.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = inv[(r, c)];
            }
        }
        Ok(Self {
            dims,
            voxel_size,
            affine,
            inverse,
        })
    }

    /// Axis-aligned grid with its first voxel at the world origin.
    pub fn isotropic(dims: [usize; 3], spacing: f64) -> Self {
        Self::new(dims, [spacing; 3], diag_affine([spacing; 3])).expect("valid isotropic grid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn inverse_affine(&self) -> &Affine {
        &self.inverse
    }

    /// Number of voxels in one channel.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn contains(&self, v: [i64; 3]) -> bool {
        (0..3).all(|a| v[a] >= 0 && (v[a] as usize) < self.dims[a])
    }

    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.affine, v)
    }

    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.inverse, p)
    }

    pub fn voxel_center(&self, index: usize) -> [f64; 3] {
        let [x, y, z] = self.coords(index);
        self.voxel_to_world([x as f64, y as f64, z as f64])
    }

    /// Nearest voxel to a world point, possibly outside the grid.
    pub fn nearest_voxel(&self, p: [f64; 3]) -> [i64; 3] {
        let v = self.world_to_voxel(p);
        [
            v[0].round() as i64,
            v[1].round() as i64,
            v[2].round() as i64,
        ]
    }

    /// Euclidean norm of each row of the inverse 3x3 block: a world
    /// displacement of length `r` moves voxel coordinate `a` by at most
    /// `r * row_norms[a]`.
    pub(crate) fn inverse_row_norms(&self) -> [f64; 3] {
        let mut n = [0.0; 3];
        for (a, v) in n.iter_mut().enumerate() {
            *v = (0..3)
                .map(|c| self.inverse[a][c].powi(2))
                .sum::<f64>()
                .sqrt();
        }
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Float32,
    Uint8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Uint8 => 1,
        }
    }

    fn parse(s: &str) -> Result<Self, FormatError> {
        match s {
            "float32" => Ok(Dtype::Float32),
            "uint8" => Ok(Dtype::Uint8),
            other => Err(FormatError::UnknownDtype(other.to_string())),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::Float32 => "float32",
            Dtype::Uint8 => "uint8",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl VoxelData {
    fn len(&self) -> usize {
        match self {
            VoxelData::F32(v) => v.len(),
            VoxelData::U8(v) => v.len(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self {
            VoxelData::F32(_) => Dtype::Float32,
            VoxelData::U8(_) => Dtype::Uint8,
        }
    }
}

/// A (possibly multi-channel) scalar volume. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    channels: usize,
    data: VoxelData,
}

#[derive(Serialize, Deserialize)]
struct MvolHeader {
    dims: [usize; 3],
    channels: usize,
    voxel_size_mm: [f64; 3],
    affine: Vec<f64>,
    dtype: String,
}

impl Volume {
    pub fn new(grid: Grid, channels: usize, data: VoxelData) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("volume needs at least one channel".into()));
        }
        let expected = grid.len() * channels;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match {:?} x {} channels = {}",
                data.len(),
                grid.dims(),
                channels,
                expected
            )));
        }
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    pub fn from_f32(grid: Grid, channels: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(grid, channels, VoxelData::F32(data))
    }

    pub fn from_u8(grid: Grid, channels: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(grid, channels, VoxelData::U8(data))
    }

    pub fn zeros(grid: Grid, channels: usize) -> Self {
        let n = grid.len() * channels;
        Self {
            grid,
            channels,
            data: VoxelData::F32(vec![0.0; n]),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn into_data(self) -> VoxelData {
        self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            VoxelData::F32(v) => Some(v),
            VoxelData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            VoxelData::U8(v) => Some(v),
            VoxelData::F32(_) => None,
        }
    }

    /// Value at a flat index (channel included), widened to f64.
    #[inline]
    pub fn value(&self, flat: usize) -> f64 {
        match &self.data {
            VoxelData::F32(v) => v[flat] as f64,
            VoxelData::U8(v) => v[flat] as f64,
        }
    }

    pub fn flat_index(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        self.grid.index(x, y, z) + self.grid.len() * c
    }

    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f64 {
        self.value(self.flat_index(x, y, z, c))
    }

    /// Channel values as f64, in storage order.
    pub fn channel_values(&self, c: usize) -> Vec<f64> {
        let n = self.grid.len();
        (c * n..(c + 1) * n).map(|i| self.value(i)).collect()
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        self.grid.dims == other.grid.dims
    }

    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        self.grid.world_to_voxel(p)
    }

    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        self.grid.voxel_to_world(v)
    }

    /// Trilinear interpolation at a world point with zero padding: corners
    /// that fall outside the grid contribute 0.
    pub fn trilinear_sample(&self, p: [f64; 3], channel: usize) -> f64 {
        assert!(channel < self.channels, "channel {channel} out of range");
        let v = self.grid.world_to_voxel(p);
        self.trilinear_at_voxel(v, channel)
    }

    pub(crate) fn trilinear_at_voxel(&self, v: [f64; 3], channel: usize) -> f64 {
        let dims = self.grid.dims;
        let mut base = [0i64; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            if !v[a].is_finite() || v[a] <= -1.0 || v[a] >= dims[a] as f64 {
                return 0.0;
            }
            let mut f = v[a].floor();
            let mut t = v[a] - f;
            // snap round-off so node lookups are exact
            if t > 1.0 - 1e-9 {
                f += 1.0;
                t = 0.0;
            } else if t < 1e-9 {
                t = 0.0;
            }
            base[a] = f as i64;
            frac[a] = t;
        }
        let offset = self.grid.len() * channel;
        let mut acc = 0.0;
        for corner in 0..8usize {
            let mut w = 1.0;
            let mut idx = [0i64; 3];
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                idx[a] = base[a] + bit as i64;
            }
            if w == 0.0 || !self.grid.contains(idx) {
                continue;
            }
            let flat = self
                .grid
                .index(idx[0] as usize, idx[1] as usize, idx[2] as usize);
            acc += w * self.value(offset + flat);
        }
        acc
    }

    /// Nearest-neighbour lookup at a world point; 0 outside the grid.
    pub fn nearest_sample(&self, p: [f64; 3], channel: usize) -> f64 {
        let v = self.grid.nearest_voxel(p);
        if !self.grid.contains(v) {
            return 0.0;
        }
        self.get(v[0] as usize, v[1] as usize, v[2] as usize, channel)
    }

    /// Per-channel z-score. Statistics come from voxels where `mask` is
    /// nonzero (all voxels without a mask) and are applied everywhere. A
    /// channel whose standard deviation is below 1e-12 becomes all zeros.
    pub fn z_normalize(&self, mask: Option<&Volume>) -> Result<Volume> {
        if let Some(m) = mask {
            if !self.same_shape(m) {
                return Err(Error::Shape(format!(
                    "mask dims {:?} differ from volume dims {:?}",
                    m.dims(),
                    self.dims()
                )));
            }
        }
        let n = self.grid.len();
        let mut out = Vec::with_capacity(n * self.channels);
        for c in 0..self.channels {
            let vals = self.channel_values(c);
            let selected = |i: usize| mask.is_none_or(|m| m.value(i) != 0.0);
            let (mut sum, mut count) = (0.0, 0usize);
            for (i, v) in vals.iter().enumerate() {
                if selected(i) {
                    sum += v;
                    count += 1;
                }
            }
            let mean = if count > 0 { sum / count as f64 } else { 0.0 };
            let var = if count > 0 {
                vals.iter()
                    .enumerate()
                    .filter(|(i, _)| selected(*i))
                    .map(|(_, v)| (v - mean).powi(2))
                    .sum::<f64>()
                    / count as f64
            } else {
                0.0
            };
            let std = var.sqrt();
            if std < 1e-12 {
                out.extend(std::iter::repeat_n(0.0f32, n));
            } else {
                out.extend(vals.iter().map(|v| ((v - mean) / std) as f32));
            }
        }
        Volume::from_f32(self.grid.clone(), self.channels, out)
    }

    pub fn to_mvol_bytes(&self) -> Vec<u8> {
        let header = MvolHeader {
            dims: self.grid.dims,
            channels: self.channels,
            voxel_size_mm: self.grid.voxel_size,
            affine: self.grid.affine.iter().flatten().copied().collect(),
            dtype: self.dtype().name().to_string(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let payload_len = self.data.len() * self.dtype().size();
        let mut out = Vec::with_capacity(8 + header.len() + payload_len);
        out.extend_from_slice(MVOL_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        match &self.data {
            VoxelData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            VoxelData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_mvol_bytes(bytes: &[u8]) -> Result<Volume> {
        if bytes.len() < 8 {
            return Err(FormatError::Truncated(format!("{} bytes", bytes.len())).into());
        }
        if &bytes[..4] != MVOL_MAGIC {
            return Err(FormatError::BadMagic {
                expected: "MVL1".into(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            }
            .into());
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() < hlen {
            return Err(
                FormatError::Truncated(format!("header length {hlen} exceeds file")).into(),
            );
        }
        let header: MvolHeader = serde_json::from_slice(&body[..hlen])
            .map_err(|e| FormatError::Header(e.to_string()))?;
        let dtype = Dtype::parse(&header.dtype)?;
        if header.affine.len() != 16 {
            return Err(FormatError::Header(format!(
                "affine has {} entries, expected 16",
                header.affine.len()
            ))
            .into());
        }
        let mut affine = [[0.0; 4]; 4];
        for (i, v) in header.affine.iter().enumerate() {
            affine[i / 4][i % 4] = *v;
        }
        let grid = Grid::new(header.dims, header.voxel_size_mm, affine)
            .map_err(|e| FormatError::Header(e.to_string()))?;
        let payload = &body[hlen..];
        let count = grid.len() * header.channels;
        let expected = count * dtype.size();
        if payload.len() != expected {
            return Err(FormatError::SizeMismatch {
                expected,
                found: payload.len(),
            }
            .into());
        }
        let data = match dtype {
            Dtype::Float32 => VoxelData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::Uint8 => VoxelData::U8(payload.to_vec()),
        };
        Volume::new(grid, header.channels, data)
            .map_err(|e| FormatError::Header(e.to_string()).into())
    }

    pub fn write_mvol(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_mvol_bytes())?;
        Ok(())
    }

    pub fn read_mvol(path: impl AsRef<Path>) -> Result<Volume> {
        let bytes = fs::read(path)?;
        Self::from_mvol_bytes(&bytes)
    }
}
