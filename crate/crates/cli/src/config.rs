//! Run configuration: one TOML file with sectioned keys, overridable from
//! the command line with `section.key=value` assignments.

use std::path::{Path, PathBuf};

use edmsr::edm::{Preconditioner, SigmaDistribution, TrainConfig};
use edmsr::metrics::Aggregation;
use edmsr::sampler::ScheduleConfig;
use edmsr::sr3d::PatchConfig;
use edmsr::unet::UNetConfig;
use edmsr::volume::Dims;
use edmsr::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable that relocates relative output paths.
pub const OUTPUT_ROOT_ENV: &str = "EDMSR_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "3d")]
    Volumetric,
    #[serde(rename = "2.5d")]
    SliceWise,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Volumetric => "3d",
            Arch::SliceWise => "2.5d",
        }
    }

    /// Method label used in reports.
    pub fn method(self) -> &'static str {
        match self {
            Arch::Volumetric => "edm3d",
            Arch::SliceWise => "edm25d",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3d" => Ok(Arch::Volumetric),
            "2.5d" | "25d" => Ok(Arch::SliceWise),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?}; expected 3d or 2.5d"
            ))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_subjects: usize,
    /// HR volume extent `(d, h, w)`; `d` is the slicing axis.
    pub dims: [usize; 3],
    pub scale: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_subjects: 8,
            dims: [16, 32, 32],
            scale: 2,
        }
    }
}

impl DataConfig {
    pub fn dims(&self) -> Dims {
        Dims::new(self.dims[0], self.dims[1], self.dims[2])
    }
}

fn desk_model(mut cfg: UNetConfig) -> UNetConfig {
    cfg.fourier_scale = 1.0;
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch3d: UNetConfig,
    pub arch25d: UNetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch3d: desk_model(UNetConfig::desk_3d()),
            arch25d: desk_model(UNetConfig::desk_2d()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdmConfig {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for EdmConfig {
    fn default() -> Self {
        let d = SigmaDistribution::default();
        EdmConfig {
            sigma_data: Preconditioner::default().sigma_data,
            p_mean: d.p_mean,
            p_std: d.p_std,
        }
    }
}

impl EdmConfig {
    pub fn preconditioner(&self) -> Result<Preconditioner> {
        Preconditioner::new(self.sigma_data)
    }

    pub fn sigma_distribution(&self) -> Result<SigmaDistribution> {
        let d = SigmaDistribution {
            p_mean: self.p_mean,
            p_std: self.p_std,
        };
        d.validate()?;
        Ok(d)
    }
}

/// Optimizer settings per architecture; the two desk models train at
/// different stable learning rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub arch3d: TrainConfig,
    pub arch25d: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let desk = TrainConfig {
            updates_per_epoch: 100,
            epochs: 3,
            patches_per_volume: 2,
            ..TrainConfig::default()
        };
        TrainSection {
            arch3d: TrainConfig {
                lr: 2e-3,
                grad_accum_steps: 4,
                ..desk.clone()
            },
            arch25d: TrainConfig {
                lr: 5e-3,
                grad_accum_steps: 8,
                ..desk
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub arch3d: ScheduleConfig,
    pub arch25d: ScheduleConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            arch3d: ScheduleConfig::default(),
            // A single step is one denoiser evaluation, so it has to start
            // where training put its noise levels: exp(P_mean + 2 P_std).
            // At sigma = 80 the noise embedding is far outside that range.
            arch25d: ScheduleConfig {
                sigma_max: {
                    let d = SigmaDistribution::default();
                    (d.p_mean + 2.0 * d.p_std).exp()
                },
                steps: 1,
                ..ScheduleConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Random HR patch extent used for 3D training.
    pub train_patch: [usize; 3],
    /// Sliding-window inference for the 3D pipeline.
    pub inference: PatchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train_patch: [8, 16, 16],
            inference: PatchConfig {
                patch: [8, 16, 16],
                // Each voxel averages more independent patch samples.
                overlap: 0.75,
                ..PatchConfig::default()
            },
        }
    }
}

impl PipelineConfig {
    pub fn train_patch(&self) -> Dims {
        Dims::new(self.train_patch[0], self.train_patch[1], self.train_patch[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub aggregation: Aggregation,
    /// Baselines computed from the LR input alongside the predictions.
    pub baselines: Vec<String>,
    /// Slice for the error heatmaps; `None` picks the middle slice.
    pub heatmap_slice: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            aggregation: Aggregation::SliceMean,
            baselines: vec!["bicubic".into(), "trilinear".into()],
            heatmap_slice: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub edm: EdmConfig,
    pub train: TrainSection,
    pub sampler: SamplerConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    // Anything that is not a TOML literal is taken as a bare string.
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Recursively overlays `top` onto `base`; tables merge, anything else replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override key {path:?}")));
    }
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {k} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses a config document; missing keys take defaults, unknown keys
    /// are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::resolve(text, &[])
    }

    /// Defaults, then the config text, then `section.key=value` overrides
    /// in order.
    pub fn resolve(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&RunConfig::default().to_toml()?)
            .map_err(|e| Error::Config(format!("default config: {e}")))?;
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        merge(&mut table, file);
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::resolve(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.arch3d.validate()?;
        self.model.arch25d.validate()?;
        self.edm.preconditioner()?;
        self.edm.sigma_distribution()?;
        self.train.arch3d.validate()?;
        self.train.arch25d.validate()?;
        self.sampler.arch3d.build()?;
        self.sampler.arch25d.build()?;
        let d = self.data.dims();
        if self.data.scale == 0 || !d.h.is_multiple_of(self.data.scale) || !d.w.is_multiple_of(self.data.scale) {
            return Err(Error::Config(format!(
                "HR dims {d} not divisible by scale {}",
                self.data.scale
            )));
        }
        for b in &self.eval.baselines {
            if b != "bicubic" && b != "trilinear" {
                return Err(Error::Config(format!("unknown baseline {b:?}")));
            }
        }
        let p = &self.pipeline.inference;
        if !(0.0..1.0).contains(&p.overlap) || !(p.window_floor > 0.0 && p.window_floor <= 1.0) {
            return Err(Error::Config(format!("invalid patch settings {p:?}")));
        }
        Ok(())
    }

    pub fn unet(&self, arch: Arch) -> &UNetConfig {
        match arch {
            Arch::Volumetric => &self.model.arch3d,
            Arch::SliceWise => &self.model.arch25d,
        }
    }

    pub fn schedule(&self, arch: Arch) -> &ScheduleConfig {
        match arch {
            Arch::Volumetric => &self.sampler.arch3d,
            Arch::SliceWise => &self.sampler.arch25d,
        }
    }

    /// Training settings for `arch` with the run seed applied.
    pub fn train_config(&self, arch: Arch) -> TrainConfig {
        let base = match arch {
            Arch::Volumetric => &self.train.arch3d,
            Arch::SliceWise => &self.train.arch25d,
        };
        TrainConfig {
            seed: self.seed,
            ..base.clone()
        }
    }

    /// Writes the resolved config as `config.<command>.toml` in `dir`.
    pub fn echo(&self, dir: &Path, command: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("config.{command}.toml"));
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Resolves relative output paths against `$EDMSR_OUTPUT_ROOT` when set.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}
