//! Slice-wise super-resolution conditioned on the target LR slice and its
//! previous neighbour along the depth (sagittal) axis.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffgraph::{ParameterStore, Tensor};
use crate::edm::{denoise_tensor, update_rng, Batch, Preconditioner, TrainingSource};
use crate::error::{Error, Result};
use crate::sampler::{heun_sample, NoiseSchedule};
use crate::unet::Denoiser;
use crate::volume::{bicubic_upsample_slice, restack, Domain, Image, Volume, VolumePair};

/// Upsampled conditioning channels for one target slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceCondition {
    pub target_lr_up: Image,
    pub neighbor_lr_up: Image,
    pub slice_index: usize,
}

impl SliceCondition {
    /// `(1, 2, H, W)` tensor: neighbour first, then target.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.target_lr_up.h, self.target_lr_up.w);
        let mut data = self.neighbor_lr_up.data.clone();
        data.extend_from_slice(&self.target_lr_up.data);
        Tensor::new(vec![1, 2, h, w], data).expect("two equally sized slices")
    }
}

/// Index of the conditioning neighbour; slice 0 is its own neighbour.
pub fn neighbor_index(i: usize) -> usize {
    i.saturating_sub(1)
}

pub fn build_slice_condition(lr: &Volume, i: usize, s: usize) -> Result<SliceCondition> {
    let d = lr.dims().d;
    if i >= d {
        return Err(Error::Dims(format!("slice index {i} out of range for depth {d}")));
    }
    Ok(SliceCondition {
        target_lr_up: bicubic_upsample_slice(&lr.slice(i), s)?,
        neighbor_lr_up: bicubic_upsample_slice(&lr.slice(neighbor_index(i)), s)?,
        slice_index: i,
    })
}

fn check_scale(lr: &Volume, s: usize) -> Result<()> {
    if s == 0 {
        return Err(Error::Dims("scale factor must be >= 1".into()));
    }
    if lr.domain() != Domain::Unit {
        return Err(Error::WrongDomain {
            expected: Domain::Unit,
            found: lr.domain(),
        });
    }
    Ok(())
}

/// Samples one HR slice with Heun's method. Uses only LR slices `i` and
/// `i - 1`; the generator is seeded from `(seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn super_resolve_slice(
    den: &Denoiser,
    params: &ParameterStore,
    pc: &Preconditioner,
    schedule: &NoiseSchedule,
    lr: &Volume,
    s: usize,
    i: usize,
    seed: u64,
) -> Result<Image> {
    check_scale(lr, s)?;
    let cond = build_slice_condition(lr, i, s)?;
    let (h, w) = (cond.target_lr_up.h, cond.target_lr_up.w);
    let c = cond.to_tensor();
    let mut rng = update_rng(seed, i as u64);
    let x = heun_sample(
        |x, sigma, c| denoise_tensor(den, params, pc, x, sigma, c),
        schedule,
        &c,
        &[1, 1, h, w],
        &mut rng,
    )?;
    let data = x.into_data().into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    Image::new(h, w, data)
}

/// Super-resolves every slice independently and restacks them.
pub fn super_resolve_25d(
    den: &Denoiser,
    params: &ParameterStore,
    pc: &Preconditioner,
    schedule: &NoiseSchedule,
    lr: &Volume,
    s: usize,
    seed: u64,
) -> Result<Volume> {
    check_scale(lr, s)?;
    let slices: Vec<Image> = (0..lr.dims().d)
        .into_par_iter()
        .map(|i| super_resolve_slice(den, params, pc, schedule, lr, s, i, seed))
        .collect::<Result<_>>()?;
    restack(&slices, Domain::Unit)
}

/// Per-slice bicubic upsampling clamped to the unit range.
pub fn bicubic_baseline(lr: &Volume, s: usize) -> Result<Volume> {
    let slices: Vec<Image> = (0..lr.dims().d)
        .map(|z| {
            let mut up = bicubic_upsample_slice(&lr.slice(z), s)?;
            up.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            Ok(up)
        })
        .collect::<Result<_>>()?;
    restack(&slices, Domain::Unit)
}

/// Uniformly random `(subject, slice)` training triples.
pub struct SliceSource {
    subjects: Vec<(Vec<Image>, Volume)>,
}

impl SliceSource {
    pub fn new(pairs: &[VolumePair]) -> Result<Self> {
        let subjects = pairs
            .iter()
            .map(|p| {
                let ups = (0..p.lr.dims().d)
                    .map(|z| bicubic_upsample_slice(&p.lr.slice(z), p.scale))
                    .collect::<Result<Vec<_>>>()?;
                Ok((ups, p.hr.clone()))
            })
            .collect::<Result<_>>()?;
        Ok(SliceSource { subjects })
    }
}

impl TrainingSource for SliceSource {
    fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let mut targets = Vec::with_capacity(n);
        let mut conds = Vec::with_capacity(n);
        for _ in 0..n {
            let (ups, hr) = &self.subjects[rng.random_range(0..self.subjects.len())];
            let i = rng.random_range(0..ups.len());
            let cond = SliceCondition {
                target_lr_up: ups[i].clone(),
                neighbor_lr_up: ups[neighbor_index(i)].clone(),
                slice_index: i,
            };
            let d = hr.dims();
            targets.push(Tensor::new(vec![1, 1, d.h, d.w], hr.slice(i).data)?);
            conds.push(cond.to_tensor());
        }
        Ok(Batch {
            target: Tensor::stack(&targets)?,
            condition: Tensor::stack(&conds)?,
        })
    }
}
