//! Noise-conditioned U-Net backbone `F(c_in * x, c_noise, condition)` for
//! both the volumetric (3D) and slice (2D) pipelines.
//!
//! The network is described once as an ordered list of [`Stage`]s; both
//! parameter construction and the forward pass walk that list, so names and
//! shapes cannot drift apart.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dimensionality {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

impl Dimensionality {
    fn kernel(self, k: usize) -> Vec<usize> {
        match self {
            Dimensionality::TwoD => vec![k, k],
            Dimensionality::ThreeD => vec![k, k, k],
        }
    }

    fn spatial_rank(self) -> usize {
        match self {
            Dimensionality::TwoD => 2,
            Dimensionality::ThreeD => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub dimensionality: Dimensionality,
    /// Channel width of each resolution level, shallowest first.
    pub channels: Vec<usize>,
    pub res_blocks: usize,
    /// Self-attention in the bottleneck.
    pub attention: bool,
    pub attention_heads: usize,
    /// Noisy target plus conditioning channels (2 for 3D, 3 for 2.5D).
    pub in_channels: usize,
    /// Width of the Fourier features and of the embedding MLP.
    pub noise_embed_dim: usize,
    /// Standard deviation of the random Fourier frequencies.
    pub fourier_scale: f64,
    pub norm_groups: usize,
}

impl UNetConfig {
    pub fn desk_3d() -> Self {
        UNetConfig {
            dimensionality: Dimensionality::ThreeD,
            channels: vec![8, 16],
            res_blocks: 1,
            attention: true,
            attention_heads: 4,
            in_channels: 2,
            noise_embed_dim: 32,
            fourier_scale: 16.0,
            norm_groups: 4,
        }
    }

    pub fn desk_2d() -> Self {
        UNetConfig {
            dimensionality: Dimensionality::TwoD,
            channels: vec![8, 8, 16],
            in_channels: 3,
            ..Self::desk_3d()
        }
    }

    pub fn full_3d() -> Self {
        UNetConfig {
            dimensionality: Dimensionality::ThreeD,
            channels: vec![32, 64, 128, 256],
            res_blocks: 2,
            attention: true,
            attention_heads: 4,
            in_channels: 2,
            noise_embed_dim: 256,
            fourier_scale: 16.0,
            norm_groups: 32,
        }
    }

    pub fn full_2d() -> Self {
        UNetConfig {
            dimensionality: Dimensionality::TwoD,
            channels: vec![64, 64, 128, 256],
            in_channels: 3,
            ..Self::full_3d()
        }
    }

    /// Spatial dims must be divisible by this for shapes to round-trip.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.channels.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("invalid channel list {:?}", self.channels));
        }
        if self.res_blocks == 0 {
            return bad("res_blocks must be >= 1".into());
        }
        if self.in_channels < 2 {
            return bad("in_channels must include the noisy target and a condition".into());
        }
        if self.noise_embed_dim < 2 || !self.noise_embed_dim.is_multiple_of(2) {
            return bad("noise_embed_dim must be even and >= 2".into());
        }
        if !(self.fourier_scale.is_finite() && self.fourier_scale > 0.0) {
            return bad("fourier_scale must be positive".into());
        }
        if self.norm_groups == 0 {
            return bad("norm_groups must be >= 1".into());
        }
        for stage in stages(self) {
            let normalized = match &stage {
                Stage::Res { cin, cout, .. } => vec![*cin, *cout],
                Stage::Attn { c, .. } => vec![*c],
                _ => vec![],
            };
            for c in normalized {
                if c % self.norm_groups != 0 {
                    return bad(format!(
                        "{} group-norm groups do not divide {c} channels",
                        self.norm_groups
                    ));
                }
            }
            if let Stage::Attn { c, .. } = stage {
                if self.attention_heads == 0 || c % self.attention_heads != 0 {
                    return bad(format!(
                        "{} attention heads do not divide {c} channels",
                        self.attention_heads
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Stage {
    ConvIn { cin: usize, cout: usize },
    Res { name: String, cin: usize, cout: usize },
    Down { name: String, c: usize },
    Attn { name: String, c: usize },
    Up { name: String, cin: usize, cout: usize },
    PushSkip,
    PopSkip,
    ConvOut { cin: usize },
}

fn stages(cfg: &UNetConfig) -> Vec<Stage> {
    let ch = &cfg.channels;
    let levels = ch.len();
    let mut out = vec![Stage::ConvIn {
        cin: cfg.in_channels,
        cout: ch[0],
    }];
    let mut c = ch[0];
    for (l, &cl) in ch.iter().enumerate() {
        for r in 0..cfg.res_blocks {
            out.push(Stage::Res {
                name: format!("enc.{l}.{r}"),
                cin: c,
                cout: cl,
            });
            c = cl;
        }
        out.push(Stage::PushSkip);
        if l + 1 < levels {
            out.push(Stage::Down {
                name: format!("enc.{l}.down"),
                c,
            });
        }
    }
    if cfg.attention {
        out.push(Stage::Attn {
            name: "mid.attn".into(),
            c,
        });
    }
    out.push(Stage::Res {
        name: "mid.res".into(),
        cin: c,
        cout: c,
    });
    for l in (0..levels).rev() {
        out.push(Stage::PopSkip);
        c += ch[l];
        for r in 0..cfg.res_blocks {
            out.push(Stage::Res {
                name: format!("dec.{l}.{r}"),
                cin: c,
                cout: ch[l],
            });
            c = ch[l];
        }
        if l > 0 {
            out.push(Stage::Up {
                name: format!("dec.{l}.up"),
                cin: c,
                cout: ch[l - 1],
            });
            c = ch[l - 1];
        }
    }
    out.push(Stage::ConvOut { cin: c });
    out
}

struct Init<'a> {
    store: &'a mut ParameterStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    /// Weight with entries `N(0, gain^2 / fan_in)`.
    fn weight(&mut self, name: String, shape: Vec<usize>, gain: f64) -> Result<()> {
        let fan_in: usize = shape[1..].iter().product();
        let t = Tensor::randn(&shape, gain / (fan_in as f64).sqrt(), &mut self.rng);
        self.store.insert(name, t)
    }

    fn bias(&mut self, name: String, n: usize) -> Result<()> {
        self.store.insert(name, Tensor::zeros(&[n]))
    }

    fn conv(&mut self, dim: Dimensionality, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        self.conv_gain(dim, name, cin, cout, k, 1.0)
    }

    fn conv_gain(
        &mut self,
        dim: Dimensionality,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        gain: f64,
    ) -> Result<()> {
        let mut shape = vec![cout, cin];
        shape.extend(dim.kernel(k));
        self.weight(format!("{name}.w"), shape, gain)?;
        self.bias(format!("{name}.b"), cout)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, gain: f64) -> Result<()> {
        self.weight(format!("{name}.w"), vec![dout, din], gain)?;
        self.bias(format!("{name}.b"), dout)
    }
}

/// Gain of the embedding-to-(scale, shift) projections; small so adaptive
/// normalization starts close to plain group norm.
const EMB_PROJ_GAIN: f64 = 0.1;

/// Gain of the last conv in every residual branch and of the output conv.
/// Near zero, so a fresh network is close to identity blocks and `F ~ 0`,
/// i.e. the wrapper starts as the Gaussian-optimal `c_skip * x`.
const RESIDUAL_OUT_GAIN: f64 = 1e-3;

/// Constructed network: configuration plus the fixed Fourier frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    cfg: UNetConfig,
    freqs: Vec<f64>,
    ablated_skip: Option<usize>,
}

impl Denoiser {
    /// Builds the network and its freshly initialized parameters.
    pub fn build(cfg: &UNetConfig, seed: u64) -> Result<(Denoiser, ParameterStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = cfg.noise_embed_dim / 2;
        let freqs = Tensor::randn(&[half], cfg.fourier_scale, &mut rng).into_data();

        let mut store = ParameterStore::new();
        let mut init = Init { store: &mut store, rng };
        let dim = cfg.dimensionality;
        let e = cfg.noise_embed_dim;
        init.linear("emb.lin1", e, e, 1.0)?;
        init.linear("emb.lin2", e, e, 1.0)?;
        for stage in stages(cfg) {
            match stage {
                Stage::ConvIn { cin, cout } => init.conv(dim, "conv_in", cin, cout, 3)?,
                Stage::Res { name, cin, cout } => {
                    init.linear(&format!("{name}.emb1"), e, 2 * cin, EMB_PROJ_GAIN)?;
                    init.conv(dim, &format!("{name}.conv1"), cin, cout, 3)?;
                    init.linear(&format!("{name}.emb2"), e, 2 * cout, EMB_PROJ_GAIN)?;
                    init.conv_gain(dim, &format!("{name}.conv2"), cout, cout, 3, RESIDUAL_OUT_GAIN)?;
                    if cin != cout {
                        init.conv(dim, &format!("{name}.skip"), cin, cout, 1)?;
                    }
                }
                Stage::Down { name, c } => init.conv(dim, &name, c, c, 3)?,
                Stage::Attn { name, c } => {
                    init.conv(dim, &format!("{name}.qkv"), c, 3 * c, 1)?;
                    init.conv_gain(dim, &format!("{name}.proj"), c, c, 1, RESIDUAL_OUT_GAIN)?;
                }
                Stage::Up { name, cin, cout } => init.conv(dim, &name, cin, cout, 3)?,
                Stage::ConvOut { cin } => init.conv_gain(dim, "conv_out", cin, 1, 3, RESIDUAL_OUT_GAIN)?,
                Stage::PushSkip | Stage::PopSkip => {}
            }
        }
        Ok((
            Denoiser {
                cfg: cfg.clone(),
                freqs,
                ablated_skip: None,
            },
            store,
        ))
    }

    /// Rebuilds a denoiser around stored frequencies (e.g. from a checkpoint).
    pub fn from_parts(cfg: UNetConfig, freqs: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if freqs.len() != cfg.noise_embed_dim / 2 {
            return Err(Error::Config(format!(
                "expected {} Fourier frequencies, got {}",
                cfg.noise_embed_dim / 2,
                freqs.len()
            )));
        }
        Ok(Denoiser {
            cfg,
            freqs,
            ablated_skip: None,
        })
    }

    /// Zeroes the skip connection leaving encoder `level` (diagnostics).
    pub fn with_skip_ablated(mut self, level: usize) -> Self {
        self.ablated_skip = Some(level);
        self
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn fourier_freqs(&self) -> &[f64] {
        &self.freqs
    }

    /// `[cos(2 pi f c), sin(2 pi f c)]` features for each sample's `c_noise`.
    pub fn fourier_features(&self, c_noise: &[f64]) -> Tensor {
        let mut data = Vec::with_capacity(c_noise.len() * self.cfg.noise_embed_dim);
        for &c in c_noise {
            data.extend(self.freqs.iter().map(|f| (2.0 * PI * f * c).cos()));
            data.extend(self.freqs.iter().map(|f| (2.0 * PI * f * c).sin()));
        }
        Tensor::new(vec![c_noise.len(), self.cfg.noise_embed_dim], data).expect("feature layout matches")
    }

    fn check_input(&self, g: &Graph, x_in: Var, condition: Var, c_noise: &[f64]) -> Result<()> {
        let (xs, cs) = (g.shape(x_in), g.shape(condition));
        let rank = 2 + self.cfg.dimensionality.spatial_rank();
        if xs.len() != rank || cs.len() != rank {
            return Err(Error::Shape(format!(
                "expected rank-{rank} inputs, got {xs:?} and {cs:?}"
            )));
        }
        if xs[1] != 1 || xs[1] + cs[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "noisy input {xs:?} + condition {cs:?} must give {} channels",
                self.cfg.in_channels
            )));
        }
        if xs[0] != cs[0] || xs[2..] != cs[2..] {
            return Err(Error::Shape(format!("input {xs:?} vs condition {cs:?}")));
        }
        if c_noise.len() != xs[0] {
            return Err(Error::Shape(format!(
                "{} noise levels for batch {}",
                c_noise.len(),
                xs[0]
            )));
        }
        let m = self.cfg.spatial_multiple();
        if xs[2..].iter().any(|d| d % m != 0) {
            return Err(Error::Shape(format!(
                "spatial dims {:?} must be divisible by {m}",
                &xs[2..]
            )));
        }
        Ok(())
    }

    /// Raw network output `F(x_in, c_noise, condition)`, one channel.
    ///
    /// `x_in` is the already `c_in`-scaled noisy target `(N, 1, ...)`;
    /// `condition` carries the un-noised conditioning channels.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParameterStore,
        x_in: Var,
        c_noise: &[f64],
        condition: Var,
    ) -> Result<Var> {
        self.check_input(g, x_in, condition, c_noise)?;
        let feats = g.input(self.fourier_features(c_noise))?;
        let emb = self.linear(g, params, "emb.lin1", feats)?;
        let emb = g.silu(emb)?;
        let emb = self.linear(g, params, "emb.lin2", emb)?;
        let emb = g.silu(emb)?;

        let mut h = g.concat(&[x_in, condition])?;
        let mut skips = Vec::new();
        for stage in stages(&self.cfg) {
            h = match stage {
                Stage::ConvIn { .. } => self.conv(g, params, "conv_in", h, 1)?,
                Stage::Res { name, cin, cout } => self.res_block(g, params, &name, h, emb, cin, cout)?,
                Stage::Down { name, .. } => self.conv(g, params, &name, h, 2)?,
                Stage::Attn { name, c } => self.attn_block(g, params, &name, h, c)?,
                Stage::Up { name, .. } => {
                    let u = g.upsample2(h)?;
                    self.conv(g, params, &name, u, 1)?
                }
                Stage::PushSkip => {
                    skips.push(h);
                    h
                }
                Stage::PopSkip => {
                    let s = skips.pop().ok_or_else(|| Error::Graph("skip stack underflow".into()))?;
                    let s = if self.ablated_skip == Some(skips.len()) {
                        g.scale(s, 0.0)?
                    } else {
                        s
                    };
                    g.concat(&[h, s])?
                }
                Stage::ConvOut { .. } => self.conv(g, params, "conv_out", h, 1)?,
            };
        }
        Ok(h)
    }

    fn linear(&self, g: &mut Graph, p: &ParameterStore, name: &str, x: Var) -> Result<Var> {
        let w = g.param(p, &format!("{name}.w"))?;
        let b = g.param(p, &format!("{name}.b"))?;
        g.linear(x, w, Some(b))
    }

    fn conv(&self, g: &mut Graph, p: &ParameterStore, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = g.param(p, &format!("{name}.w"))?;
        let b = g.param(p, &format!("{name}.b"))?;
        g.conv(x, w, Some(b), stride)
    }

    /// `normalize(x) * (1 + scale(emb)) + shift(emb)`.
    fn adaptive_norm(&self, g: &mut Graph, p: &ParameterStore, name: &str, x: Var, emb: Var, c: usize) -> Result<Var> {
        let n = g.group_norm(x, self.cfg.norm_groups)?;
        let ss = self.linear(g, p, name, emb)?;
        let scale = g.narrow(ss, 0, c)?;
        let shift = g.narrow(ss, c, c)?;
        g.scale_shift(n, scale, shift)
    }

    #[allow(clippy::too_many_arguments)]
    fn res_block(
        &self,
        g: &mut Graph,
        p: &ParameterStore,
        name: &str,
        x: Var,
        emb: Var,
        cin: usize,
        cout: usize,
    ) -> Result<Var> {
        let h = self.adaptive_norm(g, p, &format!("{name}.emb1"), x, emb, cin)?;
        let h = g.silu(h)?;
        let h = self.conv(g, p, &format!("{name}.conv1"), h, 1)?;
        let h = self.adaptive_norm(g, p, &format!("{name}.emb2"), h, emb, cout)?;
        let h = g.silu(h)?;
        let h = self.conv(g, p, &format!("{name}.conv2"), h, 1)?;
        let skip = if cin != cout {
            self.conv(g, p, &format!("{name}.skip"), x, 1)?
        } else {
            x
        };
        g.add(skip, h)
    }

    fn attn_block(&self, g: &mut Graph, p: &ParameterStore, name: &str, x: Var, c: usize) -> Result<Var> {
        let h = g.group_norm(x, self.cfg.norm_groups)?;
        let qkv = self.conv(g, p, &format!("{name}.qkv"), h, 1)?;
        let q = g.narrow(qkv, 0, c)?;
        let k = g.narrow(qkv, c, c)?;
        let v = g.narrow(qkv, 2 * c, c)?;
        let a = g.attention(q, k, v, self.cfg.attention_heads)?;
        let o = self.conv(g, p, &format!("{name}.proj"), a, 1)?;
        g.add(x, o)
    }
}

/// Exact number of scalar parameters.
pub fn param_count(params: &ParameterStore) -> usize {
    params.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(den: &Denoiser, p: &ParameterStore, shape: &[usize], c_noise: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let mut xs = shape.to_vec();
        xs[1] = 1;
        let mut cs = shape.to_vec();
        cs[1] -= 1;
        let x = g.input(Tensor::randn(&xs, 1.0, &mut rng)).unwrap();
        let c = g.input(Tensor::randn(&cs, 0.5, &mut rng)).unwrap();
        let y = den.forward(&mut g, p, x, &vec![c_noise; shape[0]], c).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn desk_2d_shape_contract() {
        let (den, p) = Denoiser::build(&UNetConfig::desk_2d(), 1).unwrap();
        let y = run(&den, &p, &[1, 3, 16, 16], 0.0, 2);
        assert_eq!(y.shape(), &[1, 1, 16, 16]);
    }

    #[test]
    fn desk_3d_shape_contract() {
        let (den, p) = Denoiser::build(&UNetConfig::desk_3d(), 1).unwrap();
        let y = run(&den, &p, &[1, 2, 8, 16, 16], 0.0, 2);
        assert_eq!(y.shape(), &[1, 1, 8, 16, 16]);
    }

    #[test]
    fn equal_seeds_give_equal_parameters() {
        let (a, pa) = Denoiser::build(&UNetConfig::desk_3d(), 42).unwrap();
        let (b, pb) = Denoiser::build(&UNetConfig::desk_3d(), 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        let (_, pc) = Denoiser::build(&UNetConfig::desk_3d(), 43).unwrap();
        assert_ne!(pa, pc);
    }

    #[test]
    fn zero_output_conv_gives_zero_output() {
        let (den, mut p) = Denoiser::build(&UNetConfig::desk_2d(), 3).unwrap();
        p.get_mut("conv_out.w").unwrap().data_mut().fill(0.0);
        p.get_mut("conv_out.b").unwrap().data_mut().fill(0.0);
        let y = run(&den, &p, &[2, 3, 8, 8], 0.3, 4);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn noise_level_changes_output() {
        let (den, p) = Denoiser::build(&UNetConfig::desk_2d(), 5).unwrap();
        let lo = run(&den, &p, &[1, 3, 8, 8], 0.25 * 0.1f64.ln(), 6);
        let hi = run(&den, &p, &[1, 3, 8, 8], 0.25 * 10f64.ln(), 6);
        let diff: f64 = lo.data().iter().zip(hi.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn rejects_bad_groups_and_heads() {
        let mut cfg = UNetConfig::desk_2d();
        cfg.norm_groups = 3;
        assert!(matches!(Denoiser::build(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = UNetConfig::desk_3d();
        cfg.attention_heads = 3;
        assert!(Denoiser::build(&cfg, 0).is_err());
    }

    #[test]
    fn rejects_indivisible_spatial_dims() {
        let (den, p) = Denoiser::build(&UNetConfig::desk_2d(), 0).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 1, 6, 8])).unwrap();
        let c = g.input(Tensor::zeros(&[1, 2, 6, 8])).unwrap();
        assert!(matches!(den.forward(&mut g, &p, x, &[0.0], c), Err(Error::Shape(_))));
    }

    #[test]
    fn full_configs_validate() {
        UNetConfig::full_3d().validate().unwrap();
        UNetConfig::full_2d().validate().unwrap();
    }
}
