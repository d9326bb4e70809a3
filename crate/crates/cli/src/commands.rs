//! The `synth`, `preprocess`, `train`, `infer` and `eval` verbs as library
//! calls; `main.rs` only parses arguments and reports errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use edmsr::diffgraph::{Checkpoint, ParameterStore, Tensor};
use edmsr::edm::{train, OptimizerState, TrainLog, TrainingSource};
use edmsr::metrics::{error_heatmap, evaluate_volume, slice_curve_csv, write_report, MetricReport, ReportFormat};
use edmsr::nifti::{read_volume, write_volume};
use edmsr::sr25d::{bicubic_baseline, super_resolve_25d, SliceSource};
use edmsr::sr3d::{super_resolve_3d, trilinear_baseline, PatchSource};
use edmsr::unet::{Denoiser, UNetConfig};
use edmsr::volume::{block_average_downsample, percentile_normalize, to_unit, Domain, Volume, VolumePair};
use edmsr::{Error, Result};

use crate::config::{Arch, RunConfig};
use crate::synth::{synthesize, Manifest};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_FILE: &str = "loss.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn volume_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.nii"))
}

/// Writes `cfg.data.n_subjects` synthetic HR volumes and the split manifest.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let (manifest, volumes) = synthesize(cfg.data.n_subjects, cfg.data.dims(), cfg.seed)?;
    create_dir(out)?;
    for (id, vol) in &volumes {
        write_volume(vol, volume_file(out, id))?;
    }
    manifest.save(out)?;
    cfg.echo(out, "synth")?;
    Ok(manifest)
}

/// Raw HR volume to a unit-range HR/LR pair.
pub fn preprocess_volume(raw: &Volume, scale: usize) -> Result<VolumePair> {
    let hr = to_unit(&percentile_normalize(&raw.clone().with_domain(Domain::Raw)?)?)?;
    let lr = block_average_downsample(&hr, scale)?;
    VolumePair::new(lr, hr, scale)
}

/// Normalizes every manifest subject and writes `hr/` and `lr/` volumes.
pub fn cmd_preprocess(cfg: &RunConfig, input: &Path, out: &Path) -> Result<Manifest> {
    let manifest = Manifest::load(input)?;
    let (hr_dir, lr_dir) = (out.join("hr"), out.join("lr"));
    create_dir(&hr_dir)?;
    create_dir(&lr_dir)?;
    for id in manifest.subjects() {
        let raw = read_volume(volume_file(input, id))?;
        let pair = preprocess_volume(&raw, cfg.data.scale)?;
        write_volume(&pair.hr, volume_file(&hr_dir, id))?;
        write_volume(&pair.lr, volume_file(&lr_dir, id))?;
    }
    manifest.save(out)?;
    cfg.echo(out, "preprocess")?;
    Ok(manifest)
}

fn read_unit(path: &Path) -> Result<Volume> {
    read_volume(path)?.with_domain(Domain::Unit)
}

/// Loads the preprocessed pair of one subject.
pub fn load_pair(data: &Path, id: &str, scale: usize) -> Result<VolumePair> {
    let hr = read_unit(&volume_file(&data.join("hr"), id))?;
    let lr = read_unit(&volume_file(&data.join("lr"), id))?;
    VolumePair::new(lr, hr, scale)
}

/// A trained (or resumable) model with its optimizer state.
pub struct TrainedModel {
    pub arch: Arch,
    pub denoiser: Denoiser,
    pub params: ParameterStore,
    pub state: OptimizerState,
}

const PARAM_PREFIX: &str = "param/";
const M_PREFIX: &str = "adam_m/";
const V_PREFIX: &str = "adam_v/";
const FREQS: &str = "fourier_freqs";

impl TrainedModel {
    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Result<Checkpoint> {
        let mut metadata = BTreeMap::new();
        metadata.insert("arch".to_string(), self.arch.to_string());
        metadata.insert(
            "unet".to_string(),
            serde_json::to_string(self.denoiser.config()).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        metadata.insert("updates".to_string(), self.state.t.to_string());
        metadata.insert("seed".to_string(), cfg.seed.to_string());
        metadata.insert("config".to_string(), cfg.to_toml()?);
        let mut tensors = BTreeMap::new();
        let freqs = self.denoiser.fourier_freqs().to_vec();
        tensors.insert(FREQS.to_string(), Tensor::new(vec![freqs.len()], freqs)?);
        for (name, t) in self.params.iter() {
            tensors.insert(format!("{PARAM_PREFIX}{name}"), t.clone());
            for (prefix, moments) in [(M_PREFIX, &self.state.m), (V_PREFIX, &self.state.v)] {
                if let Some(m) = moments.get(name) {
                    tensors.insert(format!("{prefix}{name}"), Tensor::new(t.shape().to_vec(), m.clone())?);
                }
            }
        }
        Ok(Checkpoint { metadata, tensors })
    }

    /// Restores a model, refusing checkpoints trained for another arch.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Arch) -> Result<Self> {
        let meta = |k: &str| {
            ckpt.metadata
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {k:?}")))
        };
        let arch: Arch = meta("arch")?.parse()?;
        if arch != expected {
            return Err(Error::Config(format!(
                "checkpoint was trained for {arch}, but {expected} was requested"
            )));
        }
        let ucfg: UNetConfig = serde_json::from_str(meta("unet")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let t: u64 = meta("updates")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad update counter".into()))?;
        let freqs = ckpt
            .tensors
            .get(FREQS)
            .ok_or_else(|| Error::Checkpoint("missing Fourier frequencies".into()))?;
        let denoiser = Denoiser::from_parts(ucfg.clone(), freqs.data().to_vec())?;
        let (_, fresh) = Denoiser::build(&ucfg, 0)?;
        let mut params = ParameterStore::new();
        let mut state = OptimizerState {
            t,
            ..OptimizerState::default()
        };
        for (name, template) in fresh.iter() {
            let t = ckpt
                .tensors
                .get(&format!("{PARAM_PREFIX}{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != template.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    template.shape()
                )));
            }
            params.insert(name.clone(), t.clone())?;
            for (prefix, moments) in [(M_PREFIX, &mut state.m), (V_PREFIX, &mut state.v)] {
                if let Some(m) = ckpt.tensors.get(&format!("{prefix}{name}")) {
                    moments.insert(name.clone(), m.data().to_vec());
                }
            }
        }
        Ok(TrainedModel {
            arch,
            denoiser,
            params,
            state,
        })
    }

    pub fn load(path: &Path, expected: Arch) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, expected)
    }
}

fn training_source(cfg: &RunConfig, arch: Arch, pairs: &[VolumePair]) -> Result<Box<dyn TrainingSource>> {
    Ok(match arch {
        Arch::Volumetric => Box::new(PatchSource::new(
            pairs,
            cfg.pipeline.train_patch(),
            cfg.train.arch3d.patches_per_volume,
        )?),
        Arch::SliceWise => Box::new(SliceSource::new(pairs)?),
    })
}

/// Trains on the manifest's training subjects. Writes `loss.csv` and
/// `checkpoint.ckpt` into `out` after every epoch; with `resume` the run
/// continues from the checkpoint's update counter.
pub fn cmd_train(
    cfg: &RunConfig,
    arch: Arch,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<(TrainedModel, TrainLog)> {
    let manifest = Manifest::load(data)?;
    let pairs: Vec<VolumePair> = manifest
        .train
        .iter()
        .map(|id| load_pair(data, id, cfg.data.scale))
        .collect::<Result<_>>()?;
    let source = training_source(cfg, arch, &pairs)?;
    let mut model = match resume {
        Some(path) => TrainedModel::load(path, arch)?,
        None => {
            let (denoiser, params) = Denoiser::build(cfg.unet(arch), cfg.seed)?;
            TrainedModel {
                arch,
                denoiser,
                params,
                state: OptimizerState::default(),
            }
        }
    };
    create_dir(out)?;
    cfg.echo(out, "train")?;
    let log_path = out.join(LOSS_FILE);
    let ckpt_path = out.join(CHECKPOINT_FILE);
    if resume.is_none() && log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    let pc = cfg.edm.preconditioner()?;
    let dist = cfg.edm.sigma_distribution()?;
    let tcfg = cfg.train_config(arch);
    let TrainedModel {
        denoiser,
        params,
        state,
        ..
    } = &mut model;
    let log = train(
        &*denoiser,
        params,
        state,
        source.as_ref(),
        &pc,
        &dist,
        &tcfg,
        |_, p, s, records| {
            TrainLog::append_csv(records, &log_path)?;
            let snapshot = TrainedModel {
                arch,
                denoiser: denoiser.clone(),
                params: p.clone(),
                state: s.clone(),
            };
            snapshot.to_checkpoint(cfg)?.save(&ckpt_path)
        },
    )?;
    Ok((model, log))
}

/// Super-resolves one LR volume with a trained model.
pub fn infer(cfg: &RunConfig, model: &TrainedModel, lr: &Volume) -> Result<Volume> {
    let pc = cfg.edm.preconditioner()?;
    let schedule = cfg.schedule(model.arch).build()?;
    let s = cfg.data.scale;
    match model.arch {
        Arch::Volumetric => super_resolve_3d(
            &model.denoiser,
            &model.params,
            &pc,
            &schedule,
            lr,
            s,
            &cfg.pipeline.inference,
            cfg.seed,
        ),
        Arch::SliceWise => super_resolve_25d(&model.denoiser, &model.params, &pc, &schedule, lr, s, cfg.seed),
    }
}

pub fn cmd_infer(cfg: &RunConfig, arch: Arch, checkpoint: &Path, input: &Path, output: &Path) -> Result<Volume> {
    let model = TrainedModel::load(checkpoint, arch)?;
    let lr = read_unit(input)?;
    let d = lr.dims();
    let m = model.denoiser.config().spatial_multiple();
    let s = cfg.data.scale;
    if arch == Arch::SliceWise && (!(s * d.h).is_multiple_of(m) || !(s * d.w).is_multiple_of(m)) {
        return Err(Error::Dims(format!(
            "HR slices {}x{} not divisible by {m}",
            s * d.h,
            s * d.w
        )));
    }
    let pred = infer(cfg, &model, &lr)?;
    if let Some(dir) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
        cfg.echo(dir, "infer")?;
    }
    write_volume(&pred, output)?;
    Ok(pred)
}

pub fn baseline(name: &str, lr: &Volume, scale: usize) -> Result<Volume> {
    match name {
        "bicubic" => bicubic_baseline(lr, scale),
        "trilinear" => trilinear_baseline(lr, scale),
        other => Err(Error::Config(format!("unknown baseline {other:?}"))),
    }
}

/// Evaluation inputs for one subject.
pub struct EvalInputs<'a> {
    pub subject: &'a str,
    pub truth: &'a Path,
    /// LR input for the configured baselines; `None` skips them.
    pub lr: Option<&'a Path>,
    /// `(method, prediction path)` pairs.
    pub predictions: &'a [(String, PathBuf)],
}

/// Scores every prediction and baseline against the same truth and writes
/// `report.csv`, `report.json`, `slice_psnr_<subject>.csv` and one PGM
/// heatmap per method.
pub fn cmd_eval(cfg: &RunConfig, inputs: &EvalInputs<'_>, out: &Path) -> Result<MetricReport> {
    let truth = read_unit(inputs.truth)?;
    let mut methods: Vec<(String, Volume)> = Vec::new();
    for (method, path) in inputs.predictions {
        methods.push((method.clone(), read_unit(path)?));
    }
    if let Some(lr_path) = inputs.lr {
        let lr = read_unit(lr_path)?;
        for b in &cfg.eval.baselines {
            methods.push((b.clone(), baseline(b, &lr, cfg.data.scale)?));
        }
    }
    if methods.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    create_dir(out)?;
    cfg.echo(out, "eval")?;
    let z = cfg.eval.heatmap_slice.unwrap_or(truth.dims().d / 2);
    let mut report = MetricReport::new(cfg.eval.aggregation);
    for (method, pred) in &methods {
        report.rows.extend(evaluate_volume(
            pred,
            &truth,
            inputs.subject,
            method,
            cfg.eval.aggregation,
        )?);
        error_heatmap(pred, &truth, z)?.write(&out.join(format!("heatmap_{}_{method}.pgm", inputs.subject)))?;
    }
    write_report(&report, &out.join("report.csv"), ReportFormat::Csv)?;
    write_report(&report, &out.join("report.json"), ReportFormat::Json)?;
    let curve = out.join(format!("slice_psnr_{}.csv", inputs.subject));
    fs::write(&curve, slice_curve_csv(&report, inputs.subject)).map_err(|e| Error::io(&curve, e))?;
    Ok(report)
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Invalid(_) => 2,
        Error::Io { .. } => 3,
        Error::Nifti(_) | Error::UnsupportedDatatype(_) | Error::Truncated { .. } | Error::RawVolume(_) => 4,
        Error::Dims(_) | Error::Shape(_) | Error::WrongDomain { .. } | Error::DegenerateRange(_) => 5,
        Error::NonFinite(_) | Error::Graph(_) => 6,
        Error::Checkpoint(_) => 7,
    }
}

/// Short machine-readable name of an error kind.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Invalid(_) => "invalid",
        Error::Io { .. } => "io",
        Error::Nifti(_) | Error::UnsupportedDatatype(_) | Error::Truncated { .. } | Error::RawVolume(_) => {
            "volume-format"
        }
        Error::Dims(_) | Error::Shape(_) => "shape",
        Error::WrongDomain { .. } => "domain",
        Error::DegenerateRange(_) => "degenerate-range",
        Error::NonFinite(_) => "non-finite",
        Error::Graph(_) => "graph",
        Error::Checkpoint(_) => "checkpoint",
    }
}
