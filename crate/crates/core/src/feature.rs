//! Dense feature maps, subpixel sampling and hypercolumns.
//!
//! Texel `(x, y)` of a map with stride `s` sits at full-resolution pixel
//! `(x * s, y * s)`, so one pixel coordinate indexes every level of a
//! pyramid. Sampling works in grid coordinates `g = p / s` with clamped
//! borders; the sampleable region is `[-0.5, W - 0.5] x [-0.5, H - 0.5]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid feature map: {0}")]
    Invalid(String),
    #[error("sample point ({x:.3}, {y:.3}) lies outside the feature grid")]
    OutOfBounds { x: f64, y: f64 },
    #[error("target stride {target} does not divide stride {stride}")]
    BadStride { stride: u32, target: u32 },
    #[error("no input maps")]
    EmptyInput,
    #[error("maps do not cover a common image extent: {0}")]
    ExtentMismatch(String),
    #[error("depth mismatch: expected {expected}, found {found}")]
    DepthMismatch { expected: usize, found: usize },
    #[error("pyramid parse error: {0}")]
    Parse(String),
    #[error("bad magic, expected FPYR")]
    BadMagic,
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `H x W x D` feature tensor, row-major, one texel every `stride` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    depth: usize,
    stride: u32,
    data: Vec<f32>,
}

/// Bilinear cell lookup: corner indices and interpolation weights.
#[derive(Debug, Clone, Copy)]
struct Cell {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    // zero when the coordinate was clamped at the border
    dx_live: bool,
    dy_live: bool,
}

fn axis_cell(g: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    let live = (0.0..=max).contains(&g);
    let gc = g.clamp(0.0, max);
    let i0 = (gc.floor() as usize).min(n - 2);
    (i0, i0 + 1, gc - i0 as f64, live)
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, depth: usize, stride: u32, data: Vec<f32>) -> Result<Self, FeatureError> {
        if width == 0 || height == 0 || depth == 0 {
            return Err(FeatureError::Invalid(format!("empty shape {width}x{height}x{depth}")));
        }
        if stride == 0 {
            return Err(FeatureError::Invalid("stride must be >= 1".into()));
        }
        if data.len() != width * height * depth {
            return Err(FeatureError::Invalid(format!("data length {} != {}x{}x{}", data.len(), width, height, depth)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::Invalid("non-finite feature value".into()));
        }
        Ok(Self { width, height, depth, stride, data })
    }

    pub fn filled(width: usize, height: usize, depth: usize, stride: u32, value: f32) -> Result<Self, FeatureError> {
        Self::new(width, height, depth, stride, vec![value; width * height * depth])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn texel(&self, x: usize, y: usize) -> &[f32] {
        let o = (y * self.width + x) * self.depth;
        &self.data[o..o + self.depth]
    }

    pub fn texel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let o = (y * self.width + x) * self.depth;
        &mut self.data[o..o + self.depth]
    }

    /// Full-resolution extent covered by the texel lattice, `(W-1)*s` by `(H-1)*s`.
    pub fn extent(&self) -> (f64, f64) {
        let s = self.stride as f64;
        ((self.width - 1) as f64 * s, (self.height - 1) as f64 * s)
    }

    pub fn to_grid(&self, p: &Vector2<f64>) -> Vector2<f64> {
        p / self.stride as f64
    }

    pub fn in_bounds(&self, p: &Vector2<f64>) -> bool {
        let g = self.to_grid(p);
        g.x >= -0.5 && g.y >= -0.5 && g.x <= self.width as f64 - 0.5 && g.y <= self.height as f64 - 0.5
    }

    fn cell(&self, p: &Vector2<f64>) -> Result<Cell, FeatureError> {
        if !self.in_bounds(p) || !p.x.is_finite() || !p.y.is_finite() {
            return Err(FeatureError::OutOfBounds { x: p.x, y: p.y });
        }
        Ok(self.cell_clamped(p))
    }

    fn cell_clamped(&self, p: &Vector2<f64>) -> Cell {
        let g = self.to_grid(p);
        let (x0, x1, fx, dx_live) = axis_cell(g.x, self.width);
        let (y0, y1, fy, dy_live) = axis_cell(g.y, self.height);
        Cell { x0, x1, y0, y1, fx, fy, dx_live, dy_live }
    }

    fn interpolate_into(&self, c: &Cell, out: &mut [f64]) {
        let (a, b) = (self.texel(c.x0, c.y0), self.texel(c.x1, c.y0));
        let (cc, d) = (self.texel(c.x0, c.y1), self.texel(c.x1, c.y1));
        let w00 = (1.0 - c.fx) * (1.0 - c.fy);
        let w10 = c.fx * (1.0 - c.fy);
        let w01 = (1.0 - c.fx) * c.fy;
        let w11 = c.fx * c.fy;
        for k in 0..self.depth {
            out[k] = w00 * a[k] as f64 + w10 * b[k] as f64 + w01 * cc[k] as f64 + w11 * d[k] as f64;
        }
    }

    /// Bilinear sample at a full-resolution pixel.
    pub fn bilinear_sample(&self, p: &Vector2<f64>) -> Result<Vec<f64>, FeatureError> {
        let mut out = vec![0.0; self.depth];
        self.sample_into(p, &mut out)?;
        Ok(out)
    }

    pub fn sample_into(&self, p: &Vector2<f64>, out: &mut [f64]) -> Result<(), FeatureError> {
        let c = self.cell(p)?;
        self.interpolate_into(&c, out);
        Ok(())
    }

    /// Sample with coordinates clamped to the lattice; never fails.
    pub fn sample_clamped_into(&self, p: &Vector2<f64>, out: &mut [f64]) {
        let c = self.cell_clamped(p);
        self.interpolate_into(&c, out);
    }

    /// Derivative of [`FeatureMap::bilinear_sample`] with respect to the
    /// full-resolution pixel, one `[d/dx, d/dy]` row per channel.
    pub fn bilinear_sample_gradient(&self, p: &Vector2<f64>) -> Result<Vec<[f64; 2]>, FeatureError> {
        let mut values = vec![0.0; self.depth];
        let mut grad = vec![[0.0; 2]; self.depth];
        self.sample_with_gradient(p, &mut values, &mut grad)?;
        Ok(grad)
    }

    /// Value and pixel gradient in one pass.
    pub fn sample_with_gradient(
        &self,
        p: &Vector2<f64>,
        values: &mut [f64],
        grad: &mut [[f64; 2]],
    ) -> Result<(), FeatureError> {
        let c = self.cell(p)?;
        self.interpolate_into(&c, values);
        let inv_s = 1.0 / self.stride as f64;
        let (a, b) = (self.texel(c.x0, c.y0), self.texel(c.x1, c.y0));
        let (cc, d) = (self.texel(c.x0, c.y1), self.texel(c.x1, c.y1));
        for k in 0..self.depth {
            let (a, b, cc, d) = (a[k] as f64, b[k] as f64, cc[k] as f64, d[k] as f64);
            let top = a + c.fx * (b - a);
            let bottom = cc + c.fx * (d - cc);
            let gx = if c.dx_live { (b - a) + c.fy * ((d - cc) - (b - a)) } else { 0.0 };
            let gy = if c.dy_live { bottom - top } else { 0.0 };
            grad[k] = [gx * inv_s, gy * inv_s];
        }
        Ok(())
    }

    /// Resample onto a finer lattice of stride `target_stride`.
    pub fn upsample_bilinear(&self, target_stride: u32) -> Result<FeatureMap, FeatureError> {
        if target_stride == 0 || !self.stride.is_multiple_of(target_stride) {
            return Err(FeatureError::BadStride { stride: self.stride, target: target_stride });
        }
        let factor = (self.stride / target_stride) as usize;
        if factor == 1 {
            return Ok(self.clone());
        }
        let w = (self.width - 1) * factor + 1;
        let h = (self.height - 1) * factor + 1;
        Ok(self.resample(w, h, target_stride))
    }

    /// Clamped bilinear resampling onto a `w x h` lattice with the given stride.
    fn resample(&self, w: usize, h: usize, stride: u32) -> FeatureMap {
        let mut data = vec![0.0f32; w * h * self.depth];
        let mut buf = vec![0.0; self.depth];
        for y in 0..h {
            for x in 0..w {
                let p = Vector2::new((x as u32 * stride) as f64, (y as u32 * stride) as f64);
                self.sample_clamped_into(&p, &mut buf);
                let o = (y * w + x) * self.depth;
                for (dst, v) in data[o..o + self.depth].iter_mut().zip(&buf) {
                    *dst = *v as f32;
                }
            }
        }
        FeatureMap { width: w, height: h, depth: self.depth, stride, data }
    }

    /// Subtracts the spatial mean of every channel.
    pub fn center_channels(&self) -> FeatureMap {
        let n = (self.width * self.height) as f64;
        let mut mean = vec![0.0f64; self.depth];
        for t in self.data.chunks_exact(self.depth) {
            for (m, v) in mean.iter_mut().zip(t) {
                *m += *v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut out = self.clone();
        for t in out.data.chunks_exact_mut(self.depth) {
            for (v, m) in t.iter_mut().zip(&mean) {
                *v = (*v as f64 - m) as f32;
            }
        }
        out
    }
}

/// Per-texel uncertainty, same lattice as its feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    map: FeatureMap,
}

impl UncertaintyMap {
    pub fn new(width: usize, height: usize, stride: u32, data: Vec<f32>) -> Result<Self, FeatureError> {
        if data.iter().any(|v| *v < 0.0) {
            return Err(FeatureError::Invalid("uncertainty must be >= 0".into()));
        }
        Ok(Self { map: FeatureMap::new(width, height, 1, stride, data)? })
    }

    pub fn zeros(width: usize, height: usize, stride: u32) -> Self {
        Self { map: FeatureMap { width, height, depth: 1, stride, data: vec![0.0; width * height] } }
    }

    pub fn data(&self) -> &[f32] {
        &self.map.data
    }

    pub fn stride(&self) -> u32 {
        self.map.stride
    }

    pub fn sample(&self, p: &Vector2<f64>) -> Result<f64, FeatureError> {
        let mut v = [0.0];
        self.map.sample_into(p, &mut v)?;
        Ok(v[0].max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub features: FeatureMap,
    /// `None` means zero uncertainty everywhere.
    pub uncertainty: Option<UncertaintyMap>,
}

impl PyramidLevel {
    pub fn uncertainty_at(&self, p: &Vector2<f64>) -> Result<f64, FeatureError> {
        match &self.uncertainty {
            None => Ok(0.0),
            Some(u) => u.sample(p),
        }
    }
}

/// Multi-level features of one image, strides strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<PyramidLevel>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<PyramidLevel>) -> Result<Self, FeatureError> {
        if levels.is_empty() {
            return Err(FeatureError::EmptyInput);
        }
        for pair in levels.windows(2) {
            if pair[1].features.stride <= pair[0].features.stride {
                return Err(FeatureError::Invalid("pyramid strides must be strictly increasing".into()));
            }
        }
        let (ex, ey) = levels[0].features.extent();
        for level in &levels {
            let f = &level.features;
            if let Some(u) = &level.uncertainty {
                if u.map.width != f.width || u.map.height != f.height || u.map.stride != f.stride {
                    return Err(FeatureError::Invalid("uncertainty lattice differs from features".into()));
                }
            }
            let (lx, ly) = f.extent();
            let s = f.stride as f64;
            if (lx - ex).abs() > s || (ly - ey).abs() > s {
                return Err(FeatureError::ExtentMismatch(format!(
                    "stride {} covers {lx}x{ly}, finest level covers {ex}x{ey}",
                    f.stride
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn strides(&self) -> Vec<u32> {
        self.levels.iter().map(|l| l.features.stride).collect()
    }

    pub fn level(&self, stride: u32) -> Option<&PyramidLevel> {
        self.levels.iter().find(|l| l.features.stride == stride)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PYRAMID_MAGIC);
        out.extend_from_slice(&PYRAMID_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.levels.len() as u32).to_le_bytes());
        let payload_start = out.len();
        for level in &self.levels {
            let f = &level.features;
            for v in [f.width as u32, f.height as u32, f.depth as u32, f.stride] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(level.uncertainty.is_some() as u8);
            for v in &f.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            if let Some(u) = &level.uncertainty {
                for v in &u.map.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out[payload_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != PYRAMID_MAGIC {
            return Err(FeatureError::BadMagic);
        }
        let version = r.u32()?;
        if version != PYRAMID_VERSION {
            return Err(FeatureError::Parse(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let payload_start = r.pos;
        let mut levels = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let (w, h, d, stride) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()?);
            let has_unc = match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(FeatureError::Parse(format!("bad uncertainty flag {other}"))),
            };
            let n = w
                .checked_mul(h)
                .and_then(|v| v.checked_mul(d))
                .ok_or_else(|| FeatureError::Parse("level size overflow".into()))?;
            let features = FeatureMap::new(w, h, d, stride, r.f32s(n)?)?;
            let uncertainty = if has_unc { Some(UncertaintyMap::new(w, h, stride, r.f32s(w * h)?)?) } else { None };
            levels.push(PyramidLevel { features, uncertainty });
        }
        let payload_end = r.pos;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(FeatureError::Parse(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let computed = crc32fast::hash(&bytes[payload_start..payload_end]);
        if stored != computed {
            return Err(FeatureError::Checksum { stored, computed });
        }
        FeaturePyramid::new(levels)
    }
}

const PYRAMID_MAGIC: &[u8; 4] = b"FPYR";
const PYRAMID_VERSION: u32 = 1;

pub fn save_pyramid(pyramid: &FeaturePyramid, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&pyramid.to_bytes())?;
    Ok(())
}

pub fn load_pyramid(path: impl AsRef<Path>) -> Result<FeaturePyramid, FeatureError> {
    FeaturePyramid::from_bytes(&fs::read(path)?)
}

/// Little-endian cursor over a byte slice; running off the end is a parse error.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FeatureError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FeatureError::Parse(format!("truncated: wanted {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FeatureError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FeatureError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FeatureError> {
        let len = n.checked_mul(4).ok_or_else(|| FeatureError::Parse("size overflow".into()))?;
        Ok(self.take(len)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Upsampled, per-block normalized concatenation of feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypercolumn {
    map: FeatureMap,
    blocks: Vec<usize>,
}

impl Hypercolumn {
    pub fn map(&self) -> &FeatureMap {
        &self.map
    }

    /// Channel count of each concatenated block.
    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn depth(&self) -> usize {
        self.map.depth
    }

    pub fn stride(&self) -> u32 {
        self.map.stride
    }

    /// Rescales every block of `desc` to unit norm; zero blocks stay zero.
    pub fn normalize_blocks(&self, desc: &mut [f32]) {
        normalize_blocks(desc, &self.blocks);
    }
}

pub(crate) fn normalize_blocks(desc: &mut [f32], blocks: &[usize]) {
    let mut o = 0;
    for &n in blocks {
        let block = &mut desc[o..o + n];
        let norm = block.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            block.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
        }
        o += n;
    }
}

/// Upsamples every map to the smallest stride present, L2-normalizes each
/// map's channels per texel and concatenates them in input order.
pub fn build_hypercolumn(maps: &[&FeatureMap]) -> Result<Hypercolumn, FeatureError> {
    let finest = maps.iter().min_by_key(|m| m.stride).ok_or(FeatureError::EmptyInput)?;
    let (w, h, stride) = (finest.width, finest.height, finest.stride);
    let (ex, ey) = finest.extent();
    let mut resampled = Vec::with_capacity(maps.len());
    for m in maps {
        if m.stride % stride != 0 {
            return Err(FeatureError::BadStride { stride: m.stride, target: stride });
        }
        let (mx, my) = m.extent();
        let s = m.stride as f64;
        if (mx - ex).abs() > s || (my - ey).abs() > s {
            return Err(FeatureError::ExtentMismatch(format!(
                "stride {} map covers {mx}x{my}, stride {stride} map covers {ex}x{ey}",
                m.stride
            )));
        }
        resampled.push(if m.stride == stride && m.width == w && m.height == h {
            (*m).clone()
        } else {
            m.resample(w, h, stride)
        });
    }
    let blocks: Vec<usize> = resampled.iter().map(|m| m.depth).collect();
    let depth: usize = blocks.iter().sum();
    let mut data = Vec::with_capacity(w * h * depth);
    for t in 0..w * h {
        let start = data.len();
        for m in &resampled {
            data.extend_from_slice(&m.data[t * m.depth..(t + 1) * m.depth]);
        }
        normalize_blocks(&mut data[start..], &blocks);
    }
    Ok(Hypercolumn { map: FeatureMap { width: w, height: h, depth, stride, data }, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> FeatureMap {
        FeatureMap::new(2, 2, 1, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, d: usize, stride: u32) -> FeatureMap {
        let data = (0..w * h * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        FeatureMap::new(w, h, d, stride, data).unwrap()
    }

    #[test]
    fn sample_ramp_center_and_lattice() {
        let m = ramp();
        assert_eq!(m.bilinear_sample(&Vector2::new(0.5, 0.5)).unwrap(), vec![1.5]);
        assert_eq!(m.bilinear_sample(&Vector2::new(0.0, 0.0)).unwrap(), vec![0.0]);
        assert_eq!(m.bilinear_sample(&Vector2::new(1.0, 1.0)).unwrap(), vec![3.0]);
    }

    #[test]
    fn sample_constant_map() {
        let m = FeatureMap::filled(5, 4, 3, 4, 2.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = Vector2::new(rng.random_range(-2.0..18.0), rng.random_range(-2.0..14.0));
            let v = m.bilinear_sample(&p).unwrap();
            assert!(v.iter().all(|x| (*x - 2.5).abs() < 1e-12));
            assert!(m.bilinear_sample_gradient(&p).unwrap().iter().all(|g| g == &[0.0, 0.0]));
        }
    }

    #[test]
    fn sample_out_of_bounds() {
        let m = ramp();
        assert!(matches!(m.bilinear_sample(&Vector2::new(-0.6, 0.0)), Err(FeatureError::OutOfBounds { .. })));
        assert!(m.bilinear_sample(&Vector2::new(1.5, 1.5)).is_ok());
        assert!(m.bilinear_sample(&Vector2::new(1.51, 0.0)).is_err());
        // clamped border region returns the edge texel
        assert_eq!(m.bilinear_sample(&Vector2::new(-0.4, 0.0)).unwrap(), vec![0.0]);
    }

    #[test]
    fn lattice_points_return_stored_texels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_map(&mut rng, 7, 5, 4, 4);
        for y in 0..5 {
            for x in 0..7 {
                let v = m.bilinear_sample(&Vector2::new(x as f64 * 4.0, y as f64 * 4.0)).unwrap();
                let stored: Vec<f64> = m.texel(x, y).iter().map(|v| *v as f64).collect();
                assert_eq!(v, stored);
            }
        }
    }

    #[test]
    fn ramp_gradient() {
        let g = ramp().bilinear_sample_gradient(&Vector2::new(0.3, 0.6)).unwrap();
        assert_relative_eq!(g[0][0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(g[0][1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_map(&mut rng, 9, 7, 3, 4);
        let h = 1e-4;
        for _ in 0..1000 {
            // interior points away from cell borders so the central difference stays in one cell
            let gx = rng.random_range(0..8) as f64 + rng.random_range(0.01..0.99);
            let gy = rng.random_range(0..6) as f64 + rng.random_range(0.01..0.99);
            let p = Vector2::new(gx * 4.0, gy * 4.0);
            let grad = m.bilinear_sample_gradient(&p).unwrap();
            let px = m.bilinear_sample(&(p + Vector2::new(h, 0.0))).unwrap();
            let mx = m.bilinear_sample(&(p - Vector2::new(h, 0.0))).unwrap();
            let py = m.bilinear_sample(&(p + Vector2::new(0.0, h))).unwrap();
            let my = m.bilinear_sample(&(p - Vector2::new(0.0, h))).unwrap();
            for k in 0..3 {
                assert!((grad[k][0] - (px[k] - mx[k]) / (2.0 * h)).abs() < 1e-3);
                assert!((grad[k][1] - (py[k] - my[k]) / (2.0 * h)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn sampling_is_lipschitz_across_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_map(&mut rng, 6, 6, 2, 1);
        let max_grad = m.data().iter().map(|v| v.abs() as f64).fold(0.0, f64::max) * 2.0;
        let eps = 1e-6;
        for x in 1..5 {
            let p = Vector2::new(x as f64, 2.37);
            let a = m.bilinear_sample(&(p - Vector2::new(eps, 0.0))).unwrap();
            let b = m.bilinear_sample(&(p + Vector2::new(eps, 0.0))).unwrap();
            for k in 0..2 {
                assert!((a[k] - b[k]).abs() <= 2.0 * eps * max_grad + 1e-12);
            }
        }
    }

    #[test]
    fn upsample_cases() {
        let m = ramp();
        assert_eq!(m.upsample_bilinear(1).unwrap(), m);
        let mut coarse = ramp();
        coarse.stride = 2;
        let up = coarse.upsample_bilinear(1).unwrap();
        assert_eq!((up.width(), up.height()), (3, 3));
        assert_eq!(up.texel(1, 1), &[1.5]);
        assert_eq!(up.texel(1, 0), &[0.5]);
        assert_eq!(up.texel(0, 1), &[1.0]);
        assert_eq!(up.texel(2, 2), &[3.0]);
        let c = FeatureMap::filled(3, 2, 2, 16, 0.75).unwrap();
        let up = c.upsample_bilinear(4).unwrap();
        assert_eq!((up.width(), up.height(), up.stride()), (9, 5, 4));
        assert!(up.data().iter().all(|v| *v == 0.75));
        assert!(matches!(c.upsample_bilinear(3), Err(FeatureError::BadStride { .. })));
    }

    #[test]
    fn hypercolumn_single_normalized_map_is_identity() {
        let mut data = vec![0.6f32, 0.8, 1.0, 0.0, 0.0, 0.0];
        data.truncate(6);
        let m = FeatureMap::new(3, 1, 2, 4, data).unwrap();
        let h = build_hypercolumn(&[&m]).unwrap();
        assert_eq!(h.map(), &m);
        assert_eq!(h.blocks(), &[2]);
    }

    #[test]
    fn hypercolumn_of_identical_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_map(&mut rng, 4, 3, 5, 4);
        let h = build_hypercolumn(&[&m, &m]).unwrap();
        assert_eq!(h.depth(), 10);
        for y in 0..3 {
            for x in 0..4 {
                let t = h.map().texel(x, y);
                assert_eq!(&t[..5], &t[5..]);
            }
        }
    }

    #[test]
    fn hypercolumn_of_layer_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let maps = [
            random_map(&mut rng, 41, 31, 8, 4),
            random_map(&mut rng, 41, 31, 16, 4),
            random_map(&mut rng, 21, 16, 16, 8),
            random_map(&mut rng, 11, 8, 32, 16),
            random_map(&mut rng, 11, 8, 12, 16),
        ];
        let refs: Vec<&FeatureMap> = maps.iter().collect();
        let h = build_hypercolumn(&refs).unwrap();
        assert_eq!(h.depth(), 8 + 16 + 16 + 32 + 12);
        assert_eq!((h.map().width(), h.map().height(), h.stride()), (41, 31, 4));
        for t in h.map().data().chunks_exact(h.depth()) {
            let mut o = 0;
            for &n in h.blocks() {
                let norm: f64 = t[o..o + n].iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-5, "block norm {norm}");
                o += n;
            }
            let total: f64 = t.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!(total <= (h.blocks().len() as f64).sqrt() + 1e-6);
        }
    }

    #[test]
    fn hypercolumn_zero_texels_stay_zero() {
        let m = FeatureMap::filled(2, 2, 3, 4, 0.0).unwrap();
        let h = build_hypercolumn(&[&m]).unwrap();
        assert!(h.map().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hypercolumn_is_block_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_map(&mut rng, 9, 7, 3, 4);
        let b = random_map(&mut rng, 3, 2, 5, 16);
        let ab = build_hypercolumn(&[&a, &b]).unwrap();
        let ba = build_hypercolumn(&[&b, &a]).unwrap();
        for (x, y) in ab.map().data().chunks_exact(8).zip(ba.map().data().chunks_exact(8)) {
            assert_eq!(&x[..3], &y[5..]);
            assert_eq!(&x[3..], &y[..5]);
        }
    }

    #[test]
    fn hypercolumn_errors() {
        assert!(matches!(build_hypercolumn(&[]), Err(FeatureError::EmptyInput)));
        let a = FeatureMap::filled(41, 31, 2, 4, 1.0).unwrap();
        let b = FeatureMap::filled(5, 4, 2, 16, 1.0).unwrap();
        assert!(matches!(build_hypercolumn(&[&a, &b]), Err(FeatureError::ExtentMismatch(_))));
    }

    fn sample_pyramid(rng: &mut ChaCha8Rng) -> FeaturePyramid {
        let f1 = random_map(rng, 33, 25, 4, 1);
        let f4 = random_map(rng, 9, 7, 6, 4);
        let f16 = random_map(rng, 3, 2, 8, 16);
        let u1 = UncertaintyMap::new(33, 25, 1, (0..33 * 25).map(|i| (i % 7) as f32 * 0.1).collect()).unwrap();
        FeaturePyramid::new(vec![
            PyramidLevel { features: f1, uncertainty: Some(u1) },
            PyramidLevel { features: f4, uncertainty: None },
            PyramidLevel { features: f16, uncertainty: Some(UncertaintyMap::zeros(3, 2, 16)) },
        ])
        .unwrap()
    }

    #[test]
    fn pyramid_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let tiny = FeaturePyramid::new(vec![PyramidLevel {
            features: FeatureMap::filled(1, 1, 1, 1, 0.5).unwrap(),
            uncertainty: None,
        }])
        .unwrap();
        let path = dir.path().join("tiny.fpyr");
        save_pyramid(&tiny, &path).unwrap();
        assert_eq!(load_pyramid(&path).unwrap(), tiny);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pyr = sample_pyramid(&mut rng);
        let path = dir.path().join("p.fpyr");
        save_pyramid(&pyr, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let back = load_pyramid(&path).unwrap();
        assert_eq!(back, pyr);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn pyramid_corruption_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bytes = sample_pyramid(&mut rng).to_bytes();
        assert!(matches!(FeaturePyramid::from_bytes(&bytes[..bytes.len() - 9]), Err(FeatureError::Parse(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FeaturePyramid::from_bytes(&bad), Err(FeatureError::BadMagic)));
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x01;
        assert!(matches!(
            FeaturePyramid::from_bytes(&flipped),
            Err(FeatureError::Checksum { .. }) | Err(FeatureError::Invalid(_))
        ));
    }

    #[test]
    fn pyramid_rejects_bad_strides() {
        let a = PyramidLevel { features: FeatureMap::filled(9, 7, 1, 4, 0.0).unwrap(), uncertainty: None };
        let b = PyramidLevel { features: FeatureMap::filled(33, 25, 1, 1, 0.0).unwrap(), uncertainty: None };
        assert!(FeaturePyramid::new(vec![a, b]).is_err());
    }

    #[test]
    fn uncertainty_defaults_to_zero() {
        let lvl = PyramidLevel { features: FeatureMap::filled(3, 3, 1, 1, 0.0).unwrap(), uncertainty: None };
        assert_eq!(lvl.uncertainty_at(&Vector2::new(1.0, 1.0)).unwrap(), 0.0);
        let u = UncertaintyMap::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_relative_eq!(u.sample(&Vector2::new(0.5, 0.5)).unwrap(), 1.5);
    }
}
