//! Volumetric super-resolution with overlapping patches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{ParameterStore, Tensor};
use crate::edm::{denoise_tensor, Batch, Preconditioner, TrainingSource};
use crate::error::{Error, Result};
use crate::sampler::{euler_sample, NoiseSchedule};
use crate::unet::Denoiser;
use crate::volume::{trilinear_upsample, Dims, Domain, UpsampleMode, Volume, VolumePair};

/// Sliding-window layout over an HR volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPlan {
    pub volume: Dims,
    pub patch: Dims,
    pub positions: Vec<[usize; 3]>,
    /// Blending weight of each voxel of one patch, `W` fastest.
    pub window: Vec<f64>,
}

/// Corners along one axis: stride `patch * (1 - overlap)`, last one clamped
/// to the far edge.
fn axis_positions(n: usize, patch: usize, overlap: f64) -> Vec<usize> {
    let stride = ((patch as f64) * (1.0 - overlap)).floor().max(1.0) as usize;
    let mut out = vec![0];
    while out.last().expect("non-empty") + patch < n {
        let next = (out.last().expect("non-empty") + stride).min(n - patch);
        out.push(next);
    }
    out
}

/// `floor + (1 - floor) * sin^2(pi (i + 0.5) / n)`: symmetric, positive.
fn window_1d(n: usize, floor: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let s = (std::f64::consts::PI * (i as f64 + 0.5) / n as f64).sin();
            floor + (1.0 - floor) * s * s
        })
        .collect()
}

pub fn plan_patches(volume: Dims, patch: Dims, overlap: f64, window_floor: f64) -> Result<PatchPlan> {
    if volume.is_empty() {
        return Err(Error::Dims(format!("zero-sized volume {volume}")));
    }
    if patch.is_empty() {
        return Err(Error::Dims(format!("zero-sized patch {patch}")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap must be in [0, 1), got {overlap}")));
    }
    if !(window_floor > 0.0 && window_floor <= 1.0) {
        return Err(Error::Config(format!(
            "window floor must be in (0, 1], got {window_floor}"
        )));
    }
    let patch = Dims::new(patch.d.min(volume.d), patch.h.min(volume.h), patch.w.min(volume.w));
    let pd = axis_positions(volume.d, patch.d, overlap);
    let ph = axis_positions(volume.h, patch.h, overlap);
    let pw = axis_positions(volume.w, patch.w, overlap);
    let mut positions = Vec::with_capacity(pd.len() * ph.len() * pw.len());
    for &z in &pd {
        for &y in &ph {
            for &x in &pw {
                positions.push([z, y, x]);
            }
        }
    }
    let (wd, wh, ww) = (
        window_1d(patch.d, window_floor),
        window_1d(patch.h, window_floor),
        window_1d(patch.w, window_floor),
    );
    let mut window = Vec::with_capacity(patch.len());
    for a in &wd {
        for b in &wh {
            for c in &ww {
                window.push(a * b * c);
            }
        }
    }
    Ok(PatchPlan {
        volume,
        patch,
        positions,
        window,
    })
}

/// Weighted average of overlapping patch outputs.
pub fn blend_patches(plan: &PatchPlan, outputs: &[Vec<f64>], domain: Domain) -> Result<Volume> {
    if outputs.len() != plan.positions.len() {
        return Err(Error::Invalid(format!(
            "{} patch outputs for {} planned positions",
            outputs.len(),
            plan.positions.len()
        )));
    }
    let (v, p) = (plan.volume, plan.patch);
    let mut acc = vec![0.0; v.len()];
    let mut weight = vec![0.0; v.len()];
    for (corner, out) in plan.positions.iter().zip(outputs) {
        if out.len() != p.len() {
            return Err(Error::Shape(format!(
                "patch output has {} voxels, expected {}",
                out.len(),
                p.len()
            )));
        }
        for z in 0..p.d {
            for y in 0..p.h {
                let dst = v.index(corner[0] + z, corner[1] + y, corner[2]);
                let src = p.index(z, y, 0);
                for x in 0..p.w {
                    let w = plan.window[src + x];
                    acc[dst + x] += w * out[src + x];
                    weight[dst + x] += w;
                }
            }
        }
    }
    if let Some(i) = weight.iter().position(|w| *w <= 0.0) {
        return Err(Error::Invalid(format!("voxel {i} not covered by any patch")));
    }
    let voxels = acc.iter().zip(&weight).map(|(a, w)| a / w).collect();
    Volume::new(v, voxels, domain)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    /// HR patch extent `(d, h, w)`.
    pub patch: [usize; 3],
    pub overlap: f64,
    pub window_floor: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch: [32, 64, 64],
            overlap: 0.5,
            window_floor: 0.05,
        }
    }
}

impl PatchConfig {
    pub fn patch_dims(&self) -> Dims {
        Dims::new(self.patch[0], self.patch[1], self.patch[2])
    }
}

fn expect_unit(vol: &Volume) -> Result<()> {
    if vol.domain() != Domain::Unit {
        return Err(Error::WrongDomain {
            expected: Domain::Unit,
            found: vol.domain(),
        });
    }
    Ok(())
}

fn as_tensor(vol: &Volume) -> Tensor {
    let d = vol.dims();
    Tensor::new(vec![1, 1, d.d, d.h, d.w], vol.voxels().to_vec()).expect("dims match")
}

/// In-plane trilinear conditioning volume at HR resolution.
pub fn condition_volume(lr: &Volume, s: usize) -> Result<Volume> {
    trilinear_upsample(lr, s, UpsampleMode::InPlane)
}

/// Per-patch generator derived from the run seed and the patch index.
pub fn patch_rng(seed: u64, index: usize) -> ChaCha8Rng {
    crate::edm::update_rng(seed, index as u64)
}

/// Euler-samples every planned patch against the trilinear condition and
/// blends the results. The output is clamped to `[-1, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn super_resolve_3d(
    den: &Denoiser,
    params: &ParameterStore,
    pc: &Preconditioner,
    schedule: &NoiseSchedule,
    lr: &Volume,
    s: usize,
    patches: &PatchConfig,
    seed: u64,
) -> Result<Volume> {
    expect_unit(lr)?;
    let cond = condition_volume(lr, s)?;
    let plan = plan_patches(cond.dims(), patches.patch_dims(), patches.overlap, patches.window_floor)?;
    let outputs: Vec<Vec<f64>> = plan
        .positions
        .par_iter()
        .enumerate()
        .map(|(i, &corner)| {
            let c = as_tensor(&cond.crop(corner, plan.patch)?);
            let mut rng = patch_rng(seed, i);
            let x = euler_sample(
                |x, sigma, c| denoise_tensor(den, params, pc, x, sigma, c),
                schedule,
                &c,
                c.shape(),
                &mut rng,
            )?;
            Ok(x.into_data())
        })
        .collect::<Result<_>>()?;
    Ok(blend_patches(&plan, &outputs, Domain::Raw)?.clamp_unit())
}

/// In-plane trilinear upsampling clamped to the unit range.
pub fn trilinear_baseline(lr: &Volume, s: usize) -> Result<Volume> {
    Ok(trilinear_upsample(lr, s, UpsampleMode::InPlane)?.clamp_unit())
}

/// Random HR patches with their trilinear conditioning crops.
pub struct PatchSource {
    subjects: Vec<(Volume, Volume)>,
    patch: Dims,
    patches_per_volume: usize,
}

impl PatchSource {
    pub fn new(pairs: &[VolumePair], patch: Dims, patches_per_volume: usize) -> Result<Self> {
        let mut subjects = Vec::with_capacity(pairs.len());
        for p in pairs {
            expect_unit(&p.hr)?;
            let hd = p.hr.dims();
            if patch.d > hd.d || patch.h > hd.h || patch.w > hd.w {
                return Err(Error::Dims(format!("patch {patch} larger than volume {hd}")));
            }
            subjects.push((condition_volume(&p.lr, p.scale)?, p.hr.clone()));
        }
        Ok(PatchSource {
            subjects,
            patch,
            patches_per_volume: patches_per_volume.max(1),
        })
    }
}

impl TrainingSource for PatchSource {
    fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Consecutive groups of `patches_per_volume` items share a volume.
    fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let mut targets = Vec::with_capacity(n);
        let mut conds = Vec::with_capacity(n);
        let mut subject = 0;
        for j in 0..n {
            if j % self.patches_per_volume == 0 {
                subject = rng.random_range(0..self.subjects.len());
            }
            let (cond, hr) = &self.subjects[subject];
            let d = hr.dims();
            let corner = [
                rng.random_range(0..=d.d - self.patch.d),
                rng.random_range(0..=d.h - self.patch.h),
                rng.random_range(0..=d.w - self.patch.w),
            ];
            targets.push(as_tensor(&hr.crop(corner, self.patch)?));
            conds.push(as_tensor(&cond.crop(corner, self.patch)?));
        }
        Ok(Batch {
            target: Tensor::stack(&targets)?,
            condition: Tensor::stack(&conds)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_arithmetic_example() {
        let plan = plan_patches(Dims::new(64, 64, 64), Dims::new(32, 64, 64), 0.5, 0.05).unwrap();
        let depths: Vec<usize> = plan.positions.iter().map(|p| p[0]).collect();
        assert_eq!(depths, vec![0, 16, 32]);
        assert!(plan.positions.iter().all(|p| p[1] == 0 && p[2] == 0));
    }

    #[test]
    fn patch_equal_to_volume_is_single_position() {
        let plan = plan_patches(Dims::new(8, 16, 16), Dims::new(8, 16, 16), 0.5, 0.05).unwrap();
        assert_eq!(plan.positions, vec![[0, 0, 0]]);
    }

    #[test]
    fn oversized_patch_shrinks_to_volume() {
        let plan = plan_patches(Dims::new(4, 6, 5), Dims::new(8, 8, 8), 0.5, 0.05).unwrap();
        assert_eq!(plan.patch, Dims::new(4, 6, 5));
        assert_eq!(plan.positions.len(), 1);
    }

    #[test]
    fn half_overlap_midpoint_is_half() {
        let plan = plan_patches(Dims::new(1, 1, 7), Dims::new(1, 1, 5), 0.5, 0.05).unwrap();
        assert_eq!(plan.positions, vec![[0, 0, 0], [0, 0, 2]]);
        let out = blend_patches(&plan, &[vec![0.0; 5], vec![1.0; 5]], Domain::Raw).unwrap();
        assert!((out.get(0, 0, 3) - 0.5).abs() < 1e-15);
        assert_eq!(out.get(0, 0, 0), 0.0);
        assert_eq!(out.get(0, 0, 6), 1.0);
    }

    #[test]
    fn constant_patches_blend_to_constant() {
        let plan = plan_patches(Dims::new(5, 9, 7), Dims::new(3, 4, 4), 0.5, 0.05).unwrap();
        let outs = vec![vec![0.3; plan.patch.len()]; plan.positions.len()];
        let v = blend_patches(&plan, &outs, Domain::Unit).unwrap();
        assert!(v.voxels().iter().all(|x| (x - 0.3).abs() < 1e-12));
    }

    #[test]
    fn missing_output_is_an_error() {
        let plan = plan_patches(Dims::new(4, 8, 8), Dims::new(2, 4, 4), 0.5, 0.05).unwrap();
        assert!(blend_patches(&plan, &[], Domain::Raw).is_err());
    }

    #[test]
    fn invalid_plans_rejected() {
        assert!(plan_patches(Dims::new(0, 4, 4), Dims::new(1, 1, 1), 0.5, 0.05).is_err());
        assert!(plan_patches(Dims::new(4, 4, 4), Dims::new(1, 1, 1), 1.0, 0.05).is_err());
        assert!(plan_patches(Dims::new(4, 4, 4), Dims::new(1, 1, 1), 0.5, 0.0).is_err());
    }

    #[test]
    fn window_is_positive_and_symmetric() {
        let w = window_1d(6, 0.05);
        assert!(w.iter().all(|v| *v >= 0.05));
        for i in 0..6 {
            assert!((w[i] - w[5 - i]).abs() < 1e-15);
        }
    }
}
