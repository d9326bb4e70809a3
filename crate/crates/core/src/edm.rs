//! EDM preconditioning, noise-level sampling, loss and the AdamW training
//! loop with gradient accumulation.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffgraph::{Gradients, Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::unet::Denoiser;

/// EDM scaling functions around the raw network, parameterized by the
/// assumed standard deviation of clean data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preconditioner {
    pub sigma_data: f64,
}

impl Default for Preconditioner {
    fn default() -> Self {
        Preconditioner { sigma_data: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
    pub c_noise: f64,
}

impl Preconditioner {
    pub fn new(sigma_data: f64) -> Result<Self> {
        if !(sigma_data.is_finite() && sigma_data > 0.0) {
            return Err(Error::Config(format!("sigma_data must be positive, got {sigma_data}")));
        }
        Ok(Preconditioner { sigma_data })
    }

    /// `(c_in, c_skip, c_out)`; defined at `sigma == 0` for limit checks.
    pub fn scalings(&self, sigma: f64) -> Result<(f64, f64, f64)> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::Invalid(format!("noise level must be >= 0, got {sigma}")));
        }
        let sd2 = self.sigma_data * self.sigma_data;
        let total = sigma * sigma + sd2;
        let c_skip = sd2 / total;
        Ok((1.0 / total.sqrt(), c_skip, sigma * c_skip.sqrt()))
    }

    /// `c_noise = ln(sigma) / 4`, undefined at zero.
    pub fn c_noise(sigma: f64) -> Result<f64> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Invalid(format!("c_noise is undefined for sigma = {sigma}")));
        }
        Ok(0.25 * sigma.ln())
    }

    pub fn coeffs(&self, sigma: f64) -> Result<Coeffs> {
        let c_noise = Self::c_noise(sigma)?;
        let (c_in, c_skip, c_out) = self.scalings(sigma)?;
        Ok(Coeffs {
            c_in,
            c_skip,
            c_out,
            c_noise,
        })
    }
}

/// Log-normal training distribution of noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaDistribution {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for SigmaDistribution {
    fn default() -> Self {
        SigmaDistribution {
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl SigmaDistribution {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_mean.is_finite() && self.p_std.is_finite() && self.p_std > 0.0) {
            return Err(Error::Config(format!("invalid sigma distribution {self:?}")));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        (self.p_mean + self.p_std * z).exp()
    }
}

pub fn sample_sigma<R: Rng + ?Sized>(dist: &SigmaDistribution, rng: &mut R) -> f64 {
    dist.sample(rng)
}

/// `x + sigma * eps` with fresh standard-normal `eps`.
pub fn perturb<R: Rng + ?Sized>(x_hr: &Tensor, sigma: f64, rng: &mut R) -> Tensor {
    let noise = Tensor::randn(x_hr.shape(), 1.0, rng);
    add_scaled(x_hr, &noise, sigma)
}

fn add_scaled(x: &Tensor, noise: &Tensor, sigma: f64) -> Tensor {
    let data = x.data().iter().zip(noise.data()).map(|(a, e)| a + sigma * e).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Raw network `F` as seen by the preconditioned wrapper.
pub trait Backbone {
    fn forward(
        &self,
        g: &mut Graph,
        params: &ParameterStore,
        x_in: Var,
        c_noise: &[f64],
        condition: Var,
    ) -> Result<Var>;
}

impl Backbone for Denoiser {
    fn forward(
        &self,
        g: &mut Graph,
        params: &ParameterStore,
        x_in: Var,
        c_noise: &[f64],
        condition: Var,
    ) -> Result<Var> {
        Denoiser::forward(self, g, params, x_in, c_noise, condition)
    }
}

/// `F == 0`; turns the wrapper into the optimal denoiser for Gaussian data.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroBackbone;

impl Backbone for ZeroBackbone {
    fn forward(
        &self,
        g: &mut Graph,
        _params: &ParameterStore,
        x_in: Var,
        _c_noise: &[f64],
        _condition: Var,
    ) -> Result<Var> {
        g.scale(x_in, 0.0)
    }
}

/// `D(x; sigma) = c_skip x + c_out F(c_in x, c_noise, condition)` with one
/// noise level per batch item. `x_sigma` and `condition` are graph inputs.
pub fn denoise<B: Backbone + ?Sized>(
    g: &mut Graph,
    backbone: &B,
    params: &ParameterStore,
    pc: &Preconditioner,
    x_sigma: Var,
    sigmas: &[f64],
    condition: Var,
) -> Result<Var> {
    let cs: Vec<Coeffs> = sigmas.iter().map(|&s| pc.coeffs(s)).collect::<Result<_>>()?;
    let pick = |f: fn(&Coeffs) -> f64| cs.iter().map(f).collect::<Vec<f64>>();
    let x_in = g.scale_per_sample(x_sigma, &pick(|c| c.c_in))?;
    let f = backbone.forward(g, params, x_in, &pick(|c| c.c_noise), condition)?;
    if g.shape(f) != g.shape(x_sigma) {
        return Err(Error::Shape(format!(
            "backbone output {:?} vs input {:?}",
            g.shape(f),
            g.shape(x_sigma)
        )));
    }
    let skip = g.scale_per_sample(x_sigma, &pick(|c| c.c_skip))?;
    let out = g.scale_per_sample(f, &pick(|c| c.c_out))?;
    g.add(skip, out)
}

/// Evaluates the preconditioned denoiser outside of training.
pub fn denoise_tensor<B: Backbone + ?Sized>(
    backbone: &B,
    params: &ParameterStore,
    pc: &Preconditioner,
    x_sigma: &Tensor,
    sigma: f64,
    condition: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(x_sigma.clone())?;
    let c = g.input(condition.clone())?;
    let sigmas = vec![sigma; x_sigma.shape()[0]];
    let d = denoise(&mut g, backbone, params, pc, x, &sigmas, c)?;
    Ok(g.value(d).clone())
}

/// Clean targets `(N, 1, ...)` with their conditioning `(N, Cc, ...)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub target: Tensor,
    pub condition: Tensor,
}

/// A batch with its noise levels and noise already drawn.
#[derive(Debug, Clone)]
pub struct NoisyBatch {
    pub target: Tensor,
    pub condition: Tensor,
    pub sigmas: Vec<f64>,
    pub noise: Tensor,
}

impl NoisyBatch {
    /// Draws one noise level per batch item, then the noise.
    pub fn draw<R: Rng + ?Sized>(batch: Batch, dist: &SigmaDistribution, rng: &mut R) -> Self {
        let n = batch.target.shape()[0];
        let sigmas = (0..n).map(|_| dist.sample(rng)).collect();
        let noise = Tensor::randn(batch.target.shape(), 1.0, rng);
        NoisyBatch {
            target: batch.target,
            condition: batch.condition,
            sigmas,
            noise,
        }
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// `x + sigma_n * eps` per batch item.
    pub fn noisy(&self) -> Tensor {
        let m = self.target.per_sample();
        let data = self
            .target
            .data()
            .iter()
            .zip(self.noise.data())
            .enumerate()
            .map(|(i, (x, e))| x + self.sigmas[i / m] * e)
            .collect();
        Tensor::new(self.target.shape().to_vec(), data).expect("same shape")
    }

    /// Splits into single-item batches.
    pub fn split(&self) -> Vec<NoisyBatch> {
        (0..self.len())
            .map(|i| NoisyBatch {
                target: self.target.sample(i),
                condition: self.condition.sample(i),
                sigmas: vec![self.sigmas[i]],
                noise: self.noise.sample(i),
            })
            .collect()
    }
}

/// Mean squared error `mean ||D(x_sigma; sigma) - x||^2` over batch and voxels.
pub fn edm_loss<B: Backbone + ?Sized>(
    g: &mut Graph,
    backbone: &B,
    params: &ParameterStore,
    pc: &Preconditioner,
    batch: &NoisyBatch,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let x = g.input(batch.noisy())?;
    let c = g.input(batch.condition.clone())?;
    let target = g.input(batch.target.clone())?;
    let d = denoise(g, backbone, params, pc, x, &batch.sigmas, c)?;
    let diff = g.sub(d, target)?;
    let sq = g.square(diff)?;
    g.mean(sq)
}

/// Loss value and parameter gradients averaged over equally sized
/// micro-batches.
pub fn accumulate_gradients<B: Backbone + ?Sized>(
    backbone: &B,
    params: &ParameterStore,
    pc: &Preconditioner,
    micro_batches: &[NoisyBatch],
) -> Result<(f64, Gradients)> {
    if micro_batches.is_empty() {
        return Err(Error::Invalid("no micro-batches".into()));
    }
    let k = micro_batches.len() as f64;
    let mut total = 0.0;
    let mut acc: Option<Gradients> = None;
    for mb in micro_batches {
        let mut g = Graph::new();
        let loss = edm_loss(&mut g, backbone, params, pc, mb)?;
        g.backward(loss)?;
        total += g.value(loss).item();
        let grads = g.param_grads(params)?;
        match acc.as_mut() {
            None => acc = Some(grads),
            Some(a) => {
                for (name, gv) in grads {
                    let dst = a.get_mut(&name).expect("same parameter set");
                    dst.iter_mut().zip(&gv).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let mut grads = acc.expect("at least one micro-batch");
    for g in grads.values_mut() {
        g.iter_mut().for_each(|v| *v /= k);
    }
    Ok((total / k, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub updates_per_epoch: usize,
    pub epochs: usize,
    /// Random patches drawn from each volume per pass (3D pipeline).
    pub patches_per_volume: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            grad_accum_steps: 8,
            updates_per_epoch: 400,
            epochs: 10,
            patches_per_volume: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    pub fn total_updates(&self) -> usize {
        self.epochs * self.updates_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.eps].iter().all(|v| v.is_finite() && *v > 0.0);
        let betas = [self.beta1, self.beta2].iter().all(|b| (0.0..1.0).contains(b));
        let counts = [
            self.batch_size,
            self.grad_accum_steps,
            self.updates_per_epoch,
            self.epochs,
            self.patches_per_volume,
        ]
        .iter()
        .all(|&n| n > 0);
        if !positive || !betas || !counts || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// AdamW moments and step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
pub fn adamw_step(
    params: &mut ParameterStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    for name in params.names() {
        if !grads.contains_key(name) {
            return Err(Error::Invalid(format!("missing gradient for {name}")));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        if g.len() != p.len() {
            return Err(Error::Shape(format!("gradient for {name} has wrong length")));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
        for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w -= cfg.lr * cfg.weight_decay * *w;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Source of clean training batches for one architecture.
pub trait TrainingSource {
    fn is_empty(&self) -> bool;
    fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Batch>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub update: u64,
    pub epoch: usize,
    pub sigma_mean: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "update_index,epoch,sigma_mean,loss";

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss over the first and over the last `window` updates.
    pub fn smoothed_endpoints(&self, window: usize) -> Option<(f64, f64)> {
        let l = self.losses();
        if window == 0 || l.len() < window {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&l[..window]), mean(&l[l.len() - window..])))
    }

    pub fn csv_line(r: &LogRecord) -> String {
        format!("{},{},{},{}", r.update, r.epoch, r.sigma_mean, r.loss)
    }

    /// Appends records to a CSV log, writing the header if the file is new.
    pub fn append_csv(records: &[LogRecord], path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str(TRAIN_LOG_HEADER);
            text.push('\n');
        }
        for r in records {
            text.push_str(&Self::csv_line(r));
            text.push('\n');
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<TrainLog> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if i == 0 {
                if line != TRAIN_LOG_HEADER {
                    return Err(Error::Invalid(format!("unexpected log header {line:?}")));
                }
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || Error::Invalid(format!("malformed log line {}: {line:?}", i + 1));
            if cols.len() != 4 {
                return Err(bad());
            }
            records.push(LogRecord {
                update: cols[0].parse().map_err(|_| bad())?,
                epoch: cols[1].parse().map_err(|_| bad())?,
                sigma_mean: cols[2].parse().map_err(|_| bad())?,
                loss: cols[3].parse().map_err(|_| bad())?,
            });
        }
        Ok(TrainLog { records })
    }
}

/// Per-update generator: a fixed seed with the update index as stream, so
/// resuming from a checkpoint replays exactly what an uninterrupted run
/// would have drawn.
pub fn update_rng(seed: u64, update: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(update);
    rng
}

/// Runs `epochs x updates_per_epoch` optimizer updates, continuing from
/// `state.t`. Each update averages `grad_accum_steps` micro-batches of
/// `batch_size` samples. `on_epoch_end` is called after each finished
/// epoch with the epoch index and the records produced during it.
#[allow(clippy::too_many_arguments)]
pub fn train<B, S, F>(
    backbone: &B,
    params: &mut ParameterStore,
    state: &mut OptimizerState,
    source: &S,
    pc: &Preconditioner,
    dist: &SigmaDistribution,
    cfg: &TrainConfig,
    mut on_epoch_end: F,
) -> Result<TrainLog>
where
    B: Backbone + ?Sized,
    S: TrainingSource + ?Sized,
    F: FnMut(usize, &ParameterStore, &OptimizerState, &[LogRecord]) -> Result<()>,
{
    cfg.validate()?;
    dist.validate()?;
    if source.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    let total = cfg.total_updates() as u64;
    let mut log = TrainLog::default();
    let mut epoch_start = 0;
    while state.t < total {
        let update = state.t;
        let epoch = (update as usize) / cfg.updates_per_epoch;
        let mut rng = update_rng(cfg.seed, update);
        let mut micro = Vec::with_capacity(cfg.grad_accum_steps);
        for _ in 0..cfg.grad_accum_steps {
            let batch = source.sample_batch(cfg.batch_size, &mut rng)?;
            micro.push(NoisyBatch::draw(batch, dist, &mut rng));
        }
        let (loss, grads) = accumulate_gradients(backbone, params, pc, &micro)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at update {update}")));
        }
        adamw_step(params, &grads, state, cfg)?;
        let n_sig: usize = micro.iter().map(NoisyBatch::len).sum();
        let sigma_mean = micro.iter().flat_map(|m| m.sigmas.iter()).sum::<f64>() / n_sig as f64;
        log.records.push(LogRecord {
            update,
            epoch,
            sigma_mean,
            loss,
        });
        if (state.t as usize).is_multiple_of(cfg.updates_per_epoch) {
            on_epoch_end(epoch, params, state, &log.records[epoch_start..])?;
            epoch_start = log.records.len();
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetry_point_and_unit_sigma() {
        let pc = Preconditioner::default();
        let (_, c_skip, _) = pc.scalings(0.5).unwrap();
        assert_eq!(c_skip, 0.5);
        assert_eq!(Preconditioner::c_noise(1.0).unwrap(), 0.0);
        let c = pc.coeffs(0.5).unwrap();
        assert!((c.c_in - std::f64::consts::SQRT_2).abs() < 1e-8);
        assert!((c.c_out - 0.35355339).abs() < 1e-8);
    }

    #[test]
    fn c_noise_undefined_at_zero() {
        let pc = Preconditioner::default();
        assert!(pc.coeffs(0.0).is_err());
        assert_eq!(pc.scalings(0.0).unwrap(), (2.0, 1.0, 0.0));
        assert!(pc.scalings(-1.0).is_err());
        assert!(Preconditioner::new(0.0).is_err());
    }

    #[test]
    fn zero_spread_sigma_is_exp_mean() {
        let dist = SigmaDistribution {
            p_mean: -1.2,
            p_std: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(dist.sample(&mut rng), (-1.2f64).exp());
        }
        assert!(dist.validate().is_err());
    }

    #[test]
    fn perturb_zero_sigma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng);
        assert_eq!(perturb(&x, 0.0, &mut rng), x);
        let a = perturb(&x, 1.0, &mut rng);
        let b = perturb(&x, 1.0, &mut rng);
        assert_ne!(a, b);
    }

    fn scalar_store(v: f64) -> ParameterStore {
        let mut p = ParameterStore::new();
        p.insert("w", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_noop() {
        let mut p = scalar_store(0.7);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::default();
        let grads: Gradients = [("w".to_string(), vec![0.0])].into();
        adamw_step(&mut p, &grads, &mut st, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.7);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adamw_first_step_matches_hand_evaluation() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            lr: 1e-3,
            ..Default::default()
        };
        for g in [0.3, -2.0, 1e-6] {
            let mut p = scalar_store(1.0);
            let mut st = OptimizerState::default();
            let grads: Gradients = [("w".to_string(), vec![g])].into();
            adamw_step(&mut p, &grads, &mut st, &cfg).unwrap();
            // t = 1: m_hat = g, v_hat = g^2.
            let want = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p.get("w").unwrap().item() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_decay_only_scales() {
        let cfg = TrainConfig::default();
        let mut p = scalar_store(2.0);
        let mut st = OptimizerState::default();
        let grads: Gradients = [("w".to_string(), vec![0.0])].into();
        for k in 1..=3 {
            adamw_step(&mut p, &grads, &mut st, &cfg).unwrap();
            let want = 2.0 * (1.0 - cfg.lr * cfg.weight_decay).powi(k);
            assert!((p.get("w").unwrap().item() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_missing_grad_errors() {
        let mut p = scalar_store(1.0);
        let mut st = OptimizerState::default();
        let err = adamw_step(&mut p, &Gradients::new(), &mut st, &TrainConfig::default());
        assert!(err.is_err());
        assert_eq!(st.t, 0);
    }

    #[test]
    fn loss_is_non_negative_and_vanishes_at_small_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = Tensor::randn(&[2, 1, 4, 4], 0.5, &mut rng);
        let batch = NoisyBatch {
            condition: target.clone(),
            noise: Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng),
            sigmas: vec![1e-9, 1e-9],
            target,
        };
        let mut g = Graph::new();
        let l = edm_loss(
            &mut g,
            &ZeroBackbone,
            &ParameterStore::new(),
            &Preconditioner::default(),
            &batch,
        )
        .unwrap();
        let v = g.value(l).item();
        assert!((0.0..1e-15).contains(&v));
    }

    #[test]
    fn log_smoothing_endpoints() {
        let log = TrainLog {
            records: (0..40)
                .map(|i| LogRecord {
                    update: i,
                    epoch: 0,
                    sigma_mean: 1.0,
                    loss: if i < 20 { 2.0 } else { 1.0 },
                })
                .collect(),
        };
        assert_eq!(log.smoothed_endpoints(20), Some((2.0, 1.0)));
        assert_eq!(log.smoothed_endpoints(41), None);
    }
}
