use crate::attention::{
    dnl_forward, nl_forward, AttentionKind, AttentionParams, WiringConfig,
};
use crate::error::{Error, Result};
use crate::extract::{ExtractorConfig, FuseModule, HsiExtractor, LidarExtractor};
use crate::params::{ParamId, Params};
use crate::tape::{Phase, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Everything needed to build the classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub embed_channels: usize,
    pub attention: AttentionKind,
    pub wiring: WiringConfig,
    pub classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        if self.embed_channels == 0 {
            return Err(Error::Config("embed_channels must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }

    /// Default embedding width: half the feature channels.
    pub fn default_embed_channels(feature_channels: usize) -> usize {
        (feature_channels / 2).max(1)
    }
}

/// Extractors, attention block and classification head
/// (global average pool -> linear -> class logits).
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub hsi: HsiExtractor,
    pub lidar: LidarExtractor,
    pub fuse: FuseModule,
    pub attn: AttentionParams,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl Model {
    /// Build layer structs and register all parameters in a fixed order, so
    /// a given seed always produces the same initialization. NL and DNL
    /// models allocate the identical parameter set (NL simply never reads
    /// W_m), which keeps paired-seed comparisons aligned.
    pub fn build(cfg: ModelConfig, params: &mut Params, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let fc = cfg.extractor.feature_channels;
        let hsi = HsiExtractor::build(&cfg.extractor, params, rng)?;
        let lidar = LidarExtractor::build(&cfg.extractor, params, rng)?;
        let fuse = FuseModule::build(&cfg.extractor, params, rng)?;
        let attn = AttentionParams::build(fc, cfg.embed_channels, params, rng)?;
        let std = (1.0 / fc as f64).sqrt();
        let head_w = params.insert(
            "head.weight",
            Tensor::randn(&[cfg.classes, fc], std, rng),
            true,
        )?;
        let head_b = params.insert("head.bias", Tensor::zeros(&[cfg.classes]), true)?;
        Ok(Model { cfg, hsi, lidar, fuse, attn, head_w, head_b })
    }

    /// Forward one sample to class logits.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &mut Params,
        hsi_patch: &Tensor,
        lidar_patch: &Tensor,
        phase: Phase,
    ) -> Result<Var> {
        let hsi_in = tape.leaf(hsi_patch.clone());
        let lidar_in = tape.leaf(lidar_patch.clone());

        let h = self.hsi.forward(tape, params, hsi_in, phase)?;
        let l = self.lidar.forward(tape, params, lidar_in, phase)?;
        let f = self.fuse.forward(tape, params, &h, &l, phase)?;

        let attended = match self.cfg.attention {
            AttentionKind::Dnl => dnl_forward(tape, params, &h, &l, &f, &self.cfg.wiring, &self.attn)?,
            AttentionKind::Nl => nl_forward(tape, params, &h, &l, &f, &self.cfg.wiring, &self.attn)?,
        };

        let pooled = tape.global_avg_pool(attended.var)?;
        let w = tape.bind(params, self.head_w);
        let b = tape.bind(params, self.head_b);
        tape.linear(pooled, w, b)
    }

    /// Predicted class index (0-based) in eval phase. Ties break to the
    /// lowest class index.
    pub fn predict(&self, params: &mut Params, hsi_patch: &Tensor, lidar_patch: &Tensor) -> Result<usize> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, params, hsi_patch, lidar_patch, Phase::Eval)?;
        Ok(argmax(tape.value(logits).data()))
    }
}

/// Index of the strict maximum; earlier index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            extractor: ExtractorConfig {
                hsi_bands: 6,
                patch_size: 7,
                feature_channels: 8,
                residual_blocks: 1,
                lidar_layers: 2,
            },
            embed_channels: 4,
            attention: AttentionKind::Dnl,
            wiring: WiringConfig::canonical(),
            classes: 3,
        }
    }

    #[test]
    fn argmax_breaks_ties_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0, 5.0]), 0);
    }

    #[test]
    fn forward_emits_class_logits() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut params = Params::new();
        let model = Model::build(tiny_config(), &mut params, &mut r).unwrap();
        let hsi = Tensor::randn(&[6, 7, 7], 1.0, &mut r);
        let lidar = Tensor::randn(&[1, 7, 7], 1.0, &mut r);
        let mut tape = Tape::new();
        let logits = model
            .forward(&mut tape, &mut params, &hsi, &lidar, Phase::Train)
            .unwrap();
        assert_eq!(tape.shape(logits), &[3]);
        assert!(tape.value(logits).all_finite());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut params = Params::new();
        let model = Model::build(tiny_config(), &mut params, &mut r).unwrap();
        let hsi = Tensor::randn(&[6, 7, 7], 1.0, &mut r);
        let lidar = Tensor::randn(&[1, 7, 7], 1.0, &mut r);
        let mut run = |params: &mut Params| {
            let mut tape = Tape::new();
            let logits = model
                .forward(&mut tape, params, &hsi, &lidar, Phase::Eval)
                .unwrap();
            tape.value(logits).clone()
        };
        let a = run(&mut params);
        let b = run(&mut params);
        assert_eq!(a, b);
    }

    #[test]
    fn nl_and_dnl_share_the_parameter_layout() {
        let build = |kind| {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            let mut params = Params::new();
            let cfg = ModelConfig { attention: kind, ..tiny_config() };
            Model::build(cfg, &mut params, &mut r).unwrap();
            params
        };
        let nl = build(AttentionKind::Nl);
        let dnl = build(AttentionKind::Dnl);
        assert_eq!(nl.len(), dnl.len());
        for ((_, a), (_, b)) in nl.iter().zip(dnl.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }
}
