//! Feature extraction: multiscale residual features from HSI patches, CNN
//! features from LiDAR patches, and their fusion into the mixed feature map.
//!
//! All three outputs share one (feature_channels, p, p) shape so they can be
//! wired interchangeably into the attention branches.

use crate::error::{Error, Result};
use crate::params::{ParamId, Params};
use crate::tape::{FeatureMap, Phase, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Architecture of the extractor stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub hsi_bands: usize,
    pub patch_size: usize,
    pub feature_channels: usize,
    pub residual_blocks: usize,
    pub lidar_layers: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            hsi_bands: 144,
            patch_size: 11,
            feature_channels: 64,
            residual_blocks: 2,
            lidar_layers: 3,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_channels == 0 || self.feature_channels % 4 != 0 {
            return Err(Error::Config(format!(
                "feature_channels must be a positive multiple of 4, got {}",
                self.feature_channels
            )));
        }
        if self.patch_size % 2 == 0 || self.patch_size < 3 {
            return Err(Error::Config(format!(
                "patch_size must be odd and >= 3, got {}",
                self.patch_size
            )));
        }
        if self.hsi_bands == 0 || self.residual_blocks == 0 || self.lidar_layers == 0 {
            return Err(Error::Config(
                "hsi_bands, residual_blocks and lidar_layers must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Per-channel batch normalization with running statistics kept as
/// non-trainable parameter entries (so they checkpoint with the model).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn build(prefix: &str, channels: usize, params: &mut Params) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: params.insert(format!("{prefix}.gamma"), Tensor::filled(&[channels], 1.0), true)?,
            beta: params.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: params.insert(
                format!("{prefix}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            )?,
            running_var: params.insert(
                format!("{prefix}.running_var"),
                Tensor::filled(&[channels], 1.0),
                false,
            )?,
        })
    }

    /// Train phase normalizes with the map's own statistics and folds them
    /// into the running estimates with momentum 0.9; eval phase normalizes
    /// with the running estimates (mean 0 / var 1 before any train step).
    pub fn forward(&self, tape: &mut Tape, params: &mut Params, x: Var, phase: Phase) -> Result<Var> {
        let gamma = tape.bind(params, self.gamma);
        let beta = tape.bind(params, self.beta);
        let rm = params.value(self.running_mean).data().to_vec();
        let rv = params.value(self.running_var).data().to_vec();
        let (y, mean, var) = tape.batchnorm(x, gamma, beta, &rm, &rv, BN_EPS, phase)?;
        if phase == Phase::Train {
            let rm = params.value_mut(self.running_mean).data_mut();
            for (r, b) in rm.iter_mut().zip(&mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            let rv = params.value_mut(self.running_var).data_mut();
            for (r, b) in rv.iter_mut().zip(&var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
        Ok(y)
    }
}

/// The four depthwise kernel banks (1x1, 3x3, 5x5, 7x7), one per channel
/// quarter.
#[derive(Clone, Debug)]
pub struct MultiscaleConv {
    pub weights: [ParamId; 4],
}

impl MultiscaleConv {
    pub fn build(prefix: &str, channels: usize, params: &mut Params, rng: &mut impl Rng) -> Result<Self> {
        if channels % 4 != 0 {
            return Err(Error::Config(format!(
                "multiscale depthwise mixing needs channels divisible by 4, got {}",
                channels
            )));
        }
        let group = channels / 4;
        let mut weights = Vec::with_capacity(4);
        for k in [1usize, 3, 5, 7] {
            weights.push(params.insert(
                format!("{prefix}.k{k}"),
                Tensor::randn(&[group, k, k], he_std(k * k), rng),
                true,
            )?);
        }
        Ok(MultiscaleConv {
            weights: [weights[0], weights[1], weights[2], weights[3]],
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Result<Var> {
        let w = self.weights.map(|id| tape.bind(params, id));
        tape.depthwise_multiscale(x, w)
    }
}

/// Residual unit: relu(f(x) + x) where f is multiscale depthwise mixing
/// followed by a 1x1 projection and batch normalization, and the shortcut is
/// the identity.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub multiscale: MultiscaleConv,
    pub proj: ParamId,
    pub bn: BatchNorm2d,
}

impl ResidualBlock {
    pub fn build(prefix: &str, channels: usize, params: &mut Params, rng: &mut impl Rng) -> Result<Self> {
        Ok(ResidualBlock {
            multiscale: MultiscaleConv::build(&format!("{prefix}.ms"), channels, params, rng)?,
            proj: params.insert(
                format!("{prefix}.proj"),
                Tensor::randn(&[channels, channels, 1, 1], he_std(channels), rng),
                true,
            )?,
            bn: BatchNorm2d::build(&format!("{prefix}.bn"), channels, params)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &mut Params, x: Var, phase: Phase) -> Result<Var> {
        let mixed = self.multiscale.forward(tape, params, x)?;
        let proj = tape.bind(params, self.proj);
        let projected = tape.conv2d(mixed, proj, None, 1, 0)?;
        let f = self.bn.forward(tape, params, projected, phase)?;
        let sum = tape.add(f, x)?;
        Ok(tape.relu(sum))
    }
}

/// Spectral projection (1x1 conv, bands -> feature channels) followed by a
/// stack of residual blocks.
#[derive(Clone, Debug)]
pub struct HsiExtractor {
    pub bands: usize,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub blocks: Vec<ResidualBlock>,
}

impl HsiExtractor {
    pub fn build(cfg: &ExtractorConfig, params: &mut Params, rng: &mut impl Rng) -> Result<Self> {
        let fc = cfg.feature_channels;
        let proj_w = params.insert(
            "hsi.proj.weight",
            Tensor::randn(&[fc, cfg.hsi_bands, 1, 1], he_std(cfg.hsi_bands), rng),
            true,
        )?;
        let proj_b = params.insert("hsi.proj.bias", Tensor::zeros(&[fc]), true)?;
        let blocks = (0..cfg.residual_blocks)
            .map(|i| ResidualBlock::build(&format!("hsi.block{i}"), fc, params, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(HsiExtractor { bands: cfg.hsi_bands, proj_w, proj_b, blocks })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &mut Params,
        patch: Var,
        phase: Phase,
    ) -> Result<FeatureMap> {
        let shape = tape.shape(patch).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("extract_hsi", "rank-3 (bands, p, p)", format!("{:?}", shape)));
        }
        if shape[0] != self.bands {
            return Err(Error::BandMismatch { expected: self.bands, actual: shape[0] });
        }
        let w = tape.bind(params, self.proj_w);
        let b = tape.bind(params, self.proj_b);
        let mut x = tape.conv2d(patch, w, Some(b), 1, 0)?;
        for block in &self.blocks {
            x = block.forward(tape, params, x, phase)?;
        }
        FeatureMap::new(tape, x)
    }
}

/// One conv3x3 -> batchnorm -> relu stage of the LiDAR CNN.
#[derive(Clone, Debug)]
struct ConvBnRelu {
    w: ParamId,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn build(prefix: &str, c_in: usize, c_out: usize, params: &mut Params, rng: &mut impl Rng) -> Result<Self> {
        Ok(ConvBnRelu {
            w: params.insert(
                format!("{prefix}.weight"),
                Tensor::randn(&[c_out, c_in, 3, 3], he_std(c_in * 9), rng),
                true,
            )?,
            bn: BatchNorm2d::build(&format!("{prefix}.bn"), c_out, params)?,
        })
    }

    fn forward(&self, tape: &mut Tape, params: &mut Params, x: Var, phase: Phase) -> Result<Var> {
        let w = tape.bind(params, self.w);
        let conv = tape.conv2d(x, w, None, 1, 1)?;
        let normed = self.bn.forward(tape, params, conv, phase)?;
        Ok(tape.relu(normed))
    }
}

/// Elevation feature CNN: stacked conv3x3/batchnorm/relu stages, single-band
/// input, feature_channels output, spatial size preserved.
#[derive(Clone, Debug)]
pub struct LidarExtractor {
    layers: Vec<ConvBnRelu>,
}

impl LidarExtractor {
    pub fn build(cfg: &ExtractorConfig, params: &mut Params, rng: &mut impl Rng) -> Result<Self> {
        let fc = cfg.feature_channels;
        let layers = (0..cfg.lidar_layers)
            .map(|i| {
                let c_in = if i == 0 { 1 } else { fc };
                ConvBnRelu::build(&format!("lidar.layer{i}"), c_in, fc, params, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LidarExtractor { layers })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &mut Params,
        patch: Var,
        phase: Phase,
    ) -> Result<FeatureMap> {
        let shape = tape.shape(patch).to_vec();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::shape(
                "extract_lidar",
                "rank-3 single-channel (1, p, p)",
                format!("{:?}", shape),
            ));
        }
        let mut x = patch;
        for layer in &self.layers {
            x = layer.forward(tape, params, x, phase)?;
        }
        FeatureMap::new(tape, x)
    }
}

/// Fusion of the HSI and LiDAR feature maps into the mixed feature F.
///
/// The two maps are added, passed through one pool(2)/nearest-upsample pair
/// that coarsens and restores scale, then through conv3x3 -> batchnorm ->
/// relu -> conv3x3. Output shape equals the input shape.
#[derive(Clone, Debug)]
pub struct FuseModule {
    conv1: ParamId,
    bn: BatchNorm2d,
    conv2_w: ParamId,
    conv2_b: ParamId,
}

impl FuseModule {
    pub fn build(cfg: &ExtractorConfig, params: &mut Params, rng: &mut impl Rng) -> Result<Self> {
        let fc = cfg.feature_channels;
        Ok(FuseModule {
            conv1: params.insert(
                "fuse.conv1.weight",
                Tensor::randn(&[fc, fc, 3, 3], he_std(fc * 9), rng),
                true,
            )?,
            bn: BatchNorm2d::build("fuse.bn", fc, params)?,
            conv2_w: params.insert(
                "fuse.conv2.weight",
                Tensor::randn(&[fc, fc, 3, 3], he_std(fc * 9), rng),
                true,
            )?,
            conv2_b: params.insert("fuse.conv2.bias", Tensor::zeros(&[fc]), true)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &mut Params,
        h: &FeatureMap,
        l: &FeatureMap,
        phase: Phase,
    ) -> Result<FeatureMap> {
        if !h.same_shape(l) {
            return Err(Error::shape(
                "fuse",
                format!("{}x{}x{}", h.channels, h.height, h.width),
                format!("{}x{}x{}", l.channels, l.height, l.width),
            ));
        }
        let sum = tape.add(h.var, l.var)?;
        let pooled = tape.avgpool2d(sum, 2, 2)?;
        let restored = tape.upsample_nearest(pooled, h.height, h.width)?;
        let w1 = tape.bind(params, self.conv1);
        let c1 = tape.conv2d(restored, w1, None, 1, 1)?;
        let normed = self.bn.forward(tape, params, c1, phase)?;
        let activated = tape.relu(normed);
        let w2 = tape.bind(params, self.conv2_w);
        let b2 = tape.bind(params, self.conv2_b);
        let fused = tape.conv2d(activated, w2, Some(b2), 1, 1)?;
        FeatureMap::new(tape, fused)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn small_cfg() -> ExtractorConfig {
        ExtractorConfig {
            hsi_bands: 6,
            patch_size: 7,
            feature_channels: 8,
            residual_blocks: 1,
            lidar_layers: 2,
        }
    }

    #[test]
    fn config_rejects_bad_channel_count() {
        let cfg = ExtractorConfig { feature_channels: 6, ..small_cfg() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn residual_block_with_dead_branch_is_relu() {
        // Zero the projection: f(x) collapses to batchnorm of zeros = beta = 0,
        // so P(x) = relu(x).
        let mut params = Params::new();
        let mut r = rng();
        let block = ResidualBlock::build("b", 8, &mut params, &mut r).unwrap();
        let zeros = Tensor::zeros(params.value(block.proj).shape());
        *params.value_mut(block.proj) = zeros;

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[8, 5, 5], 1.0, &mut r));
        let y = block.forward(&mut tape, &mut params, x, Phase::Train).unwrap();
        let expect: Vec<f64> = tape.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        for (a, b) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_block_identity_on_non_negative_input() {
        let mut params = Params::new();
        let mut r = rng();
        let block = ResidualBlock::build("b", 8, &mut params, &mut r).unwrap();
        *params.value_mut(block.proj) = Tensor::zeros(params.value(block.proj).shape());

        let mut tape = Tape::new();
        let data: Vec<f64> = (0..8 * 25).map(|i| (i % 9) as f64 * 0.5).collect();
        let x = tape.leaf(Tensor::new(vec![8, 5, 5], data.clone()).unwrap());
        let y = block.forward(&mut tape, &mut params, x, Phase::Train).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn hsi_extractor_shapes_and_zero_input() {
        let cfg = small_cfg();
        let mut params = Params::new();
        let mut r = rng();
        let ext = HsiExtractor::build(&cfg, &mut params, &mut r).unwrap();

        let mut tape = Tape::new();
        let patch = tape.leaf(Tensor::zeros(&[6, 11, 11]));
        let fm = ext.forward(&mut tape, &mut params, patch, Phase::Train).unwrap();
        assert_eq!((fm.channels, fm.height, fm.width), (8, 11, 11));
        // zero patch, zero biases, zero beta -> all-zero output
        assert!(tape.value(fm.var).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hsi_extractor_rejects_wrong_band_count() {
        let cfg = small_cfg();
        let mut params = Params::new();
        let mut r = rng();
        let ext = HsiExtractor::build(&cfg, &mut params, &mut r).unwrap();
        let mut tape = Tape::new();
        let patch = tape.leaf(Tensor::zeros(&[5, 7, 7]));
        let err = ext.forward(&mut tape, &mut params, patch, Phase::Eval).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 6") && msg.contains("got 5"), "{msg}");
    }

    #[test]
    fn lidar_extractor_rejects_multichannel_input() {
        let cfg = small_cfg();
        let mut params = Params::new();
        let mut r = rng();
        let ext = LidarExtractor::build(&cfg, &mut params, &mut r).unwrap();
        let mut tape = Tape::new();
        let patch = tape.leaf(Tensor::zeros(&[3, 7, 7]));
        assert!(ext.forward(&mut tape, &mut params, patch, Phase::Eval).is_err());
    }

    #[test]
    fn lidar_constant_patch_gives_constant_interior() {
        let cfg = small_cfg();
        let mut params = Params::new();
        let mut r = rng();
        let ext = LidarExtractor::build(&cfg, &mut params, &mut r).unwrap();
        let mut tape = Tape::new();
        let patch = tape.leaf(Tensor::filled(&[1, 9, 9], 2.5));
        let fm = ext.forward(&mut tape, &mut params, patch, Phase::Train).unwrap();
        assert_eq!((fm.channels, fm.height, fm.width), (8, 9, 9));
        // Two pad-1 conv layers corrupt a 2-pixel border ring; the interior
        // 5x5 region of each channel must be spatially constant.
        let out = tape.value(fm.var);
        for c in 0..8 {
            let reference = out.at(&[c, 4, 4]);
            for y in 2..7 {
                for x in 2..7 {
                    assert!(
                        (out.at(&[c, y, x]) - reference).abs() < 1e-12,
                        "channel {c} not constant at ({y},{x})"
                    );
                }
            }
        }
    }

    #[test]
    fn fuse_is_symmetric_in_its_inputs() {
        let cfg = small_cfg();
        let mut params = Params::new();
        let mut r = rng();
        let fuse = FuseModule::build(&cfg, &mut params, &mut r).unwrap();

        let ta = Tensor::randn(&[8, 7, 7], 1.0, &mut r);
        let tb = Tensor::randn(&[8, 7, 7], 1.0, &mut r);

        let mut run = |a: &Tensor, b: &Tensor| {
            let mut tape = Tape::new();
            let va = tape.leaf(a.clone());
            let vb = tape.leaf(b.clone());
            let fa = FeatureMap::new(&tape, va).unwrap();
            let fb = FeatureMap::new(&tape, vb).unwrap();
            let f = fuse.forward(&mut tape, &mut params, &fa, &fb, Phase::Eval).unwrap();
            tape.value(f.var).clone()
        };
        assert_eq!(run(&ta, &tb), run(&tb, &ta));
    }

    #[test]
    fn fuse_depends_on_hsi_when_lidar_is_zero() {
        let cfg = small_cfg();
        let mut params = Params::new();
        let mut r = rng();
        let fuse = FuseModule::build(&cfg, &mut params, &mut r).unwrap();

        let h1 = Tensor::randn(&[8, 7, 7], 1.0, &mut r);
        let h2 = Tensor::randn(&[8, 7, 7], 1.0, &mut r);
        let zero = Tensor::zeros(&[8, 7, 7]);

        let mut run = |a: &Tensor| {
            let mut tape = Tape::new();
            let va = tape.leaf(a.clone());
            let vz = tape.leaf(zero.clone());
            let fa = FeatureMap::new(&tape, va).unwrap();
            let fz = FeatureMap::new(&tape, vz).unwrap();
            let f = fuse.forward(&mut tape, &mut params, &fa, &fz, Phase::Eval).unwrap();
            tape.value(f.var).clone()
        };
        // same H -> same F; different H -> different F
        assert_eq!(run(&h1), run(&h1));
        assert_ne!(run(&h1), run(&h2));
    }

    #[test]
    fn fuse_rejects_shape_mismatch() {
        let cfg = small_cfg();
        let mut params = Params::new();
        let mut r = rng();
        let fuse = FuseModule::build(&cfg, &mut params, &mut r).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[8, 7, 7]));
        let b = tape.leaf(Tensor::zeros(&[8, 9, 9]));
        let fa = FeatureMap::new(&tape, a).unwrap();
        let fb = FeatureMap::new(&tape, b).unwrap();
        assert!(fuse.forward(&mut tape, &mut params, &fa, &fb, Phase::Eval).is_err());
    }

    #[test]
    fn fuse_gradient_reaches_both_inputs() {
        let cfg = small_cfg();
        let mut params = Params::new();
        let mut r = rng();
        let fuse = FuseModule::build(&cfg, &mut params, &mut r).unwrap();

        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::randn(&[8, 7, 7], 1.0, &mut r));
        let l = tape.leaf(Tensor::randn(&[8, 7, 7], 1.0, &mut r));
        let fh = FeatureMap::new(&tape, h).unwrap();
        let fl = FeatureMap::new(&tape, l).unwrap();
        let f = fuse.forward(&mut tape, &mut params, &fh, &fl, Phase::Train).unwrap();
        let loss = tape.sum_all(f.var);
        tape.backward(loss).unwrap();
        let gh = tape.grad(h).expect("gradient must reach H");
        let gl = tape.grad(l).expect("gradient must reach L");
        assert!(gh.iter().any(|&v| v != 0.0));
        assert!(gl.iter().any(|&v| v != 0.0));
    }
}
