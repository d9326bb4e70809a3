//! Volumes, in-plane degradation, resampling and slicing.
//!
//! Volumes are stored `(D, H, W)` with `W` varying fastest. Axis 0 (depth)
//! is treated as the sagittal axis throughout the pipeline: slicing,
//! per-slice metrics and the 2.5D model all walk along it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intensity domain of a volume's voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    /// Scanner intensities, unbounded.
    Raw,
    /// Percentile-normalized to `[0, 255]`.
    Byte255,
    /// Network range `[-1, 1]`.
    Unit,
}

impl Domain {
    fn admits(self, v: f64) -> bool {
        match self {
            Domain::Raw => true,
            Domain::Byte255 => (0.0..=255.0).contains(&v),
            Domain::Unit => (-1.0..=1.0).contains(&v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Dims { d, h, w }
    }

    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

/// A `(D, H, W)` grid of finite intensities tagged with its domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    voxels: Vec<f64>,
    domain: Domain,
}

impl Volume {
    pub fn new(dims: Dims, voxels: Vec<f64>, domain: Domain) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Dims(format!("zero-sized volume {dims}")));
        }
        if voxels.len() != dims.len() {
            return Err(Error::Dims(format!(
                "voxel count {} does not match dims {dims}",
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {i} of volume {dims}")));
        }
        if let Some(v) = voxels.iter().find(|v| !domain.admits(**v)) {
            return Err(Error::Invalid(format!("voxel value {v} outside the {domain:?} range")));
        }
        Ok(Volume { dims, voxels, domain })
    }

    pub fn filled(dims: Dims, value: f64, domain: Domain) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()], domain)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.voxels[self.dims.index(z, y, x)]
    }

    /// Retags the volume, checking the new domain's range.
    pub fn with_domain(self, domain: Domain) -> Result<Self> {
        Self::new(self.dims, self.voxels, domain)
    }

    /// Clamps every voxel to `[-1, 1]` and tags the result as unit range.
    pub fn clamp_unit(&self) -> Volume {
        Volume {
            dims: self.dims,
            voxels: self.voxels.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            domain: Domain::Unit,
        }
    }

    pub fn slice(&self, z: usize) -> Image {
        let n = self.dims.h * self.dims.w;
        Image {
            h: self.dims.h,
            w: self.dims.w,
            data: self.voxels[z * n..(z + 1) * n].to_vec(),
        }
    }

    /// Copies out the sub-block starting at `corner` with extent `size`.
    pub fn crop(&self, corner: [usize; 3], size: Dims) -> Result<Volume> {
        let d = self.dims;
        if corner[0] + size.d > d.d || corner[1] + size.h > d.h || corner[2] + size.w > d.w {
            return Err(Error::Dims(format!("crop {size} at {corner:?} exceeds volume {d}")));
        }
        let mut out = Vec::with_capacity(size.len());
        for z in 0..size.d {
            for y in 0..size.h {
                let start = d.index(corner[0] + z, corner[1] + y, corner[2]);
                out.extend_from_slice(&self.voxels[start..start + size.w]);
            }
        }
        Ok(Volume {
            dims: size,
            voxels: out,
            domain: self.domain,
        })
    }

    fn derived(&self, dims: Dims, voxels: Vec<f64>) -> Volume {
        Volume {
            dims,
            voxels,
            domain: self.domain,
        }
    }
}

/// A single `(H, W)` slice, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Dims(format!(
                "image data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        Ok(Image { h, w, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

/// Low/high resolution pair sharing depth, with in-plane factor `scale`.
#[derive(Debug, Clone)]
pub struct VolumePair {
    pub lr: Volume,
    pub hr: Volume,
    pub scale: usize,
}

impl VolumePair {
    pub fn new(lr: Volume, hr: Volume, scale: usize) -> Result<Self> {
        let (l, h) = (lr.dims(), hr.dims());
        if scale == 0 || l.d != h.d || h.h != scale * l.h || h.w != scale * l.w {
            return Err(Error::Dims(format!(
                "LR {l} and HR {h} are not an in-plane x{scale} pair"
            )));
        }
        if lr.domain() != hr.domain() {
            return Err(Error::WrongDomain {
                expected: hr.domain(),
                found: lr.domain(),
            });
        }
        Ok(VolumePair { lr, hr, scale })
    }
}

fn expect_domain(vol: &Volume, expected: Domain) -> Result<()> {
    if vol.domain() != expected {
        return Err(Error::WrongDomain {
            expected,
            found: vol.domain(),
        });
    }
    Ok(())
}

/// Nearest-rank percentile of an ascending-sorted sample.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64 - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Maps the 1st..99th percentile range of a raw volume onto `[0, 255]`,
/// clipping values outside it.
pub fn percentile_normalize(vol: &Volume) -> Result<Volume> {
    expect_domain(vol, Domain::Raw)?;
    let mut sorted = vol.voxels().to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = nearest_rank(&sorted, 1.0);
    let hi = nearest_rank(&sorted, 99.0);
    if hi <= lo {
        return Err(Error::DegenerateRange(lo));
    }
    let span = hi - lo;
    let voxels = vol
        .voxels()
        .iter()
        .map(|v| ((v - lo) / span).clamp(0.0, 1.0) * 255.0)
        .collect();
    Ok(Volume {
        dims: vol.dims(),
        voxels,
        domain: Domain::Byte255,
    })
}

pub fn to_unit(vol: &Volume) -> Result<Volume> {
    expect_domain(vol, Domain::Byte255)?;
    let voxels = vol
        .voxels()
        .iter()
        .map(|v| (v / 127.5 - 1.0).clamp(-1.0, 1.0))
        .collect();
    Ok(Volume {
        dims: vol.dims(),
        voxels,
        domain: Domain::Unit,
    })
}

pub fn from_unit(vol: &Volume) -> Result<Volume> {
    expect_domain(vol, Domain::Unit)?;
    let voxels = vol
        .voxels()
        .iter()
        .map(|v| ((v + 1.0) * 127.5).clamp(0.0, 255.0))
        .collect();
    Ok(Volume {
        dims: vol.dims(),
        voxels,
        domain: Domain::Byte255,
    })
}

/// In-plane `s x s` block mean; depth is untouched.
pub fn block_average_downsample(vol: &Volume, s: usize) -> Result<Volume> {
    let d = vol.dims();
    if s == 0 || !d.h.is_multiple_of(s) || !d.w.is_multiple_of(s) {
        return Err(Error::Dims(format!(
            "in-plane dims {}x{} not divisible by {s}",
            d.h, d.w
        )));
    }
    let out_dims = Dims::new(d.d, d.h / s, d.w / s);
    let inv = 1.0 / (s * s) as f64;
    let mut out = vec![0.0; out_dims.len()];
    for z in 0..d.d {
        for oy in 0..out_dims.h {
            for ox in 0..out_dims.w {
                let mut acc = 0.0;
                for dy in 0..s {
                    let row = d.index(z, oy * s + dy, ox * s);
                    acc += vol.voxels()[row..row + s].iter().sum::<f64>();
                }
                out[out_dims.index(z, oy, ox)] = acc * inv;
            }
        }
    }
    Ok(vol.derived(out_dims, out))
}

/// Whether trilinear upsampling also scales the depth axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleMode {
    InPlane,
    Full,
}

/// Source coordinate of output sample `i` under the half-pixel-centre
/// (align-corners = false) convention.
#[inline]
pub fn source_coord(i: usize, s: usize) -> f64 {
    (i as f64 + 0.5) / s as f64 - 0.5
}

/// Linear interpolation taps `(i0, i1, t)` for output `i`, clamped to the axis.
fn linear_taps(n_in: usize, s: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * s)
        .map(|i| {
            let c = source_coord(i, s).clamp(0.0, (n_in - 1) as f64);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, c - i0 as f64)
        })
        .collect()
}

/// Separable linear resampling along one axis of a `(a, n, b)` view.
fn resample_axis(data: &[f64], outer: usize, n: usize, inner: usize, s: usize) -> Vec<f64> {
    let taps = linear_taps(n, s);
    let m = n * s;
    let mut out = vec![0.0; outer * m * inner];
    for o in 0..outer {
        for (j, &(i0, i1, t)) in taps.iter().enumerate() {
            let src0 = (o * n + i0) * inner;
            let src1 = (o * n + i1) * inner;
            let dst = (o * m + j) * inner;
            for k in 0..inner {
                out[dst + k] = (1.0 - t) * data[src0 + k] + t * data[src1 + k];
            }
        }
    }
    out
}

/// Trilinear upsampling by `s` (in-plane only, or all three axes).
pub fn trilinear_upsample(vol: &Volume, s: usize, mode: UpsampleMode) -> Result<Volume> {
    if s == 0 {
        return Err(Error::Dims("upsampling factor must be >= 1".into()));
    }
    let d = vol.dims();
    let mut data = resample_axis(vol.voxels(), d.d * d.h, d.w, 1, s);
    data = resample_axis(&data, d.d, d.h, d.w * s, s);
    let mut out = Dims::new(d.d, d.h * s, d.w * s);
    if mode == UpsampleMode::Full {
        data = resample_axis(&data, 1, d.d, out.h * out.w, s);
        out.d *= s;
    }
    Ok(vol.derived(out, data))
}

/// Catmull-Rom cubic kernel (`a = -0.5`).
#[inline]
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

fn cubic_taps(n_in: usize, s: usize) -> Vec<([usize; 4], [f64; 4])> {
    let last = n_in as isize - 1;
    (0..n_in * s)
        .map(|i| {
            let c = source_coord(i, s);
            let base = c.floor();
            let t = c - base;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let off = k as isize - 1;
                idx[k] = (base as isize + off).clamp(0, last) as usize;
                w[k] = cubic_weight(t - off as f64);
            }
            (idx, w)
        })
        .collect()
}

/// Bicubic upsampling of one slice, edge-replicated borders.
pub fn bicubic_upsample_slice(img: &Image, s: usize) -> Result<Image> {
    if img.h < 4 || img.w < 4 {
        return Err(Error::Dims(format!(
            "bicubic needs at least 4x4, got {}x{}",
            img.h, img.w
        )));
    }
    if s == 0 {
        return Err(Error::Dims("upsampling factor must be >= 1".into()));
    }
    let (oh, ow) = (img.h * s, img.w * s);
    let xt = cubic_taps(img.w, s);
    let mut rows = vec![0.0; img.h * ow];
    for y in 0..img.h {
        for (x, (idx, w)) in xt.iter().enumerate() {
            rows[y * ow + x] = (0..4).map(|k| w[k] * img.get(y, idx[k])).sum();
        }
    }
    let yt = cubic_taps(img.h, s);
    let mut out = vec![0.0; oh * ow];
    for (y, (idx, w)) in yt.iter().enumerate() {
        for x in 0..ow {
            out[y * ow + x] = (0..4).map(|k| w[k] * rows[idx[k] * ow + x]).sum();
        }
    }
    Ok(Image {
        h: oh,
        w: ow,
        data: out,
    })
}

/// Splits a volume into its `D` depth planes.
pub fn extract_slices(vol: &Volume) -> Vec<Image> {
    (0..vol.dims().d).map(|z| vol.slice(z)).collect()
}

/// Stacks equally sized slices back into a volume.
pub fn restack(slices: &[Image], domain: Domain) -> Result<Volume> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Dims("cannot stack zero slices".into()))?;
    if slices.iter().any(|s| s.h != first.h || s.w != first.w) {
        return Err(Error::Dims("slices differ in shape".into()));
    }
    let voxels = slices.iter().flat_map(|s| s.data.iter().copied()).collect();
    Volume::new(Dims::new(slices.len(), first.h, first.w), voxels, domain)
}
