//! The named finite-difference checks behind the `gradcheck` subcommand:
//! one check per tape operation, composite checks for the extractor and
//! attention blocks, and a whole-model check on a tiny configuration.

use super::{check_params, GradCheckResult, GradCheckSettings};
use crate::attention::{dnl_forward, nl_forward, AttentionKind, AttentionParams, WiringConfig};
use crate::error::Result;
use crate::extract::{ExtractorConfig, FuseModule, HsiExtractor, LidarExtractor, ResidualBlock};
use crate::params::Params;
use crate::pipeline::{Model, ModelConfig};
use crate::tape::{FeatureMap, Phase, Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random values bounded away from zero, so relu kinks never sit within the
/// finite-difference step of an input.
fn randn_off_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * (0.1 + rng.random::<f64>())
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Scalar loss that weights every output element with fixed coefficients,
/// so no gradient component can hide behind a symmetric sum.
fn weighted_sum(tape: &mut Tape, out: Var, coeffs: &Tensor) -> Result<Var> {
    let c = tape.leaf(coeffs.clone());
    let prod = tape.mul(out, c)?;
    Ok(tape.sum_all(prod))
}

fn coeffs_for(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| 0.5 + rng.random::<f64>()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

type LossBuilder<'p> = Box<dyn FnMut(&mut Tape, &mut Params) -> Result<Var> + 'p>;

fn run_check(
    name: &str,
    params: &mut Params,
    settings: GradCheckSettings,
    build: LossBuilder,
) -> Result<GradCheckResult> {
    check_params(name, params, settings, build)
}

/// Per-operation gradient checks on small random tensors.
pub fn op_suite(settings: GradCheckSettings) -> Result<Vec<GradCheckResult>> {
    let mut results = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0xD1CE);

    // conv2d, pad 1 stride 1
    {
        let mut p = Params::new();
        p.insert("x", Tensor::randn(&[2, 4, 4], 1.0, &mut rng), true)?;
        p.insert("w", Tensor::randn(&[2, 2, 3, 3], 0.5, &mut rng), true)?;
        p.insert("b", Tensor::randn(&[2], 0.5, &mut rng), true)?;
        let coeffs = coeffs_for(&[2, 4, 4], &mut rng);
        results.push(run_check(
            "conv2d",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let x = tape.bind(p, p.id("x").unwrap());
                let w = tape.bind(p, p.id("w").unwrap());
                let b = tape.bind(p, p.id("b").unwrap());
                let y = tape.conv2d(x, w, Some(b), 1, 1)?;
                weighted_sum(tape, y, &coeffs)
            }),
        )?);
    }

    // conv2d, stride 2, no padding, no bias
    {
        let mut p = Params::new();
        p.insert("x", Tensor::randn(&[2, 5, 5], 1.0, &mut rng), true)?;
        p.insert("w", Tensor::randn(&[1, 2, 3, 3], 0.5, &mut rng), true)?;
        let coeffs = coeffs_for(&[1, 2, 2], &mut rng);
        results.push(run_check(
            "conv2d_stride2",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let x = tape.bind(p, p.id("x").unwrap());
                let w = tape.bind(p, p.id("w").unwrap());
                let y = tape.conv2d(x, w, None, 2, 0)?;
                weighted_sum(tape, y, &coeffs)
            }),
        )?);
    }

    // depthwise multiscale mixing
    {
        let mut p = Params::new();
        p.insert("x", Tensor::randn(&[4, 3, 3], 1.0, &mut rng), true)?;
        p.insert("k1", Tensor::randn(&[1, 1, 1], 0.5, &mut rng), true)?;
        p.insert("k3", Tensor::randn(&[1, 3, 3], 0.5, &mut rng), true)?;
        p.insert("k5", Tensor::randn(&[1, 5, 5], 0.5, &mut rng), true)?;
        p.insert("k7", Tensor::randn(&[1, 7, 7], 0.5, &mut rng), true)?;
        let coeffs = coeffs_for(&[4, 3, 3], &mut rng);
        results.push(run_check(
            "depthwise_multiscale",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let x = tape.bind(p, p.id("x").unwrap());
                let w = ["k1", "k3", "k5", "k7"].map(|n| tape.bind(p, p.id(n).unwrap()));
                let y = tape.depthwise_multiscale(x, w)?;
                weighted_sum(tape, y, &coeffs)
            }),
        )?);
    }

    // relu, inputs bounded away from the kink
    {
        let mut p = Params::new();
        p.insert("x", randn_off_zero(&[24], &mut rng), true)?;
        let coeffs = coeffs_for(&[24], &mut rng);
        results.push(run_check(
            "relu",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let x = tape.bind(p, p.id("x").unwrap());
                let y = tape.relu(x);
                weighted_sum(tape, y, &coeffs)
            }),
        )?);
    }

    // softmax over rows
    {
        let mut p = Params::new();
        p.insert("x", Tensor::randn(&[4, 6], 1.0, &mut rng), true)?;
        let coeffs = coeffs_for(&[4, 6], &mut rng);
        results.push(run_check(
            "softmax_rows",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let x = tape.bind(p, p.id("x").unwrap());
                let y = tape.softmax_rows(x)?;
                weighted_sum(tape, y, &coeffs)
            }),
        )?);
    }

    // batchnorm with batch statistics
    {
        let mut p = Params::new();
        p.insert("x", Tensor::randn(&[2, 3, 3], 1.0, &mut rng), true)?;
        p.insert("gamma", randn_off_zero(&[2], &mut rng), true)?;
        p.insert("beta", Tensor::randn(&[2], 0.5, &mut rng), true)?;
        let coeffs = coeffs_for(&[2, 3, 3], &mut rng);
        results.push(run_check(
            "batchnorm_train",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let x = tape.bind(p, p.id("x").unwrap());
                let g = tape.bind(p, p.id("gamma").unwrap());
                let b = tape.bind(p, p.id("beta").unwrap());
                let (y, _, _) = tape.batchnorm(x, g, b, &[0.0; 2], &[1.0; 2], 1e-5, Phase::Train)?;
                weighted_sum(tape, y, &coeffs)
            }),
        )?);
    }

    // batchnorm with fixed running statistics
    {
        let mut p = Params::new();
        p.insert("x", Tensor::randn(&[2, 3, 3], 1.0, &mut rng), true)?;
        p.insert("gamma", randn_off_zero(&[2], &mut rng), true)?;
        p.insert("beta", Tensor::randn(&[2], 0.5, &mut rng), true)?;
        let coeffs = coeffs_for(&[2, 3, 3], &mut rng);
        results.push(run_check(
            "batchnorm_eval",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let x = tape.bind(p, p.id("x").unwrap());
                let g = tape.bind(p, p.id("gamma").unwrap());
                let b = tape.bind(p, p.id("beta").unwrap());
                let (y, _, _) =
                    tape.batchnorm(x, g, b, &[0.3, -0.2], &[1.7, 0.9], 1e-5, Phase::Eval)?;
                weighted_sum(tape, y, &coeffs)
            }),
        )?);
    }

    // average pooling
    {
        let mut p = Params::new();
        p.insert("x", Tensor::randn(&[2, 4, 4], 1.0, &mut rng), true)?;
        let coeffs = coeffs_for(&[2, 2, 2], &mut rng);
        results.push(run_check(
            "avgpool2d",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let x = tape.bind(p, p.id("x").unwrap());
                let y = tape.avgpool2d(x, 2, 2)?;
                weighted_sum(tape, y, &coeffs)
            }),
        )?);
    }

    // nearest upsampling, non-integer ratio
    {
        let mut p = Params::new();
        p.insert("x", Tensor::randn(&[2, 3, 3], 1.0, &mut rng), true)?;
        let coeffs = coeffs_for(&[2, 7, 7], &mut rng);
        results.push(run_check(
            "upsample_nearest",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let x = tape.bind(p, p.id("x").unwrap());
                let y = tape.upsample_nearest(x, 7, 7)?;
                weighted_sum(tape, y, &coeffs)
            }),
        )?);
    }

    // global average pooling
    {
        let mut p = Params::new();
        p.insert("x", Tensor::randn(&[3, 4, 4], 1.0, &mut rng), true)?;
        let coeffs = coeffs_for(&[3], &mut rng);
        results.push(run_check(
            "global_avg_pool",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let x = tape.bind(p, p.id("x").unwrap());
                let y = tape.global_avg_pool(x)?;
                weighted_sum(tape, y, &coeffs)
            }),
        )?);
    }

    // matmul
    {
        let mut p = Params::new();
        p.insert("a", Tensor::randn(&[3, 4], 1.0, &mut rng), true)?;
        p.insert("b", Tensor::randn(&[4, 5], 1.0, &mut rng), true)?;
        let coeffs = coeffs_for(&[3, 5], &mut rng);
        results.push(run_check(
            "matmul",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let a = tape.bind(p, p.id("a").unwrap());
                let b = tape.bind(p, p.id("b").unwrap());
                let y = tape.matmul(a, b)?;
                weighted_sum(tape, y, &coeffs)
            }),
        )?);
    }

    // matmul with transposed right factor
    {
        let mut p = Params::new();
        p.insert("a", Tensor::randn(&[3, 4], 1.0, &mut rng), true)?;
        p.insert("b", Tensor::randn(&[5, 4], 1.0, &mut rng), true)?;
        let coeffs = coeffs_for(&[3, 5], &mut rng);
        results.push(run_check(
            "matmul_bt",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let a = tape.bind(p, p.id("a").unwrap());
                let b = tape.bind(p, p.id("b").unwrap());
                let y = tape.matmul_bt(a, b)?;
                weighted_sum(tape, y, &coeffs)
            }),
        )?);
    }

    // transpose + flatten/unflatten round trip
    {
        let mut p = Params::new();
        p.insert("x", Tensor::randn(&[2, 3, 4], 1.0, &mut rng), true)?;
        let coeffs = coeffs_for(&[2, 3, 4], &mut rng);
        results.push(run_check(
            "reshape_ops",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let x = tape.bind(p, p.id("x").unwrap());
                let flat = tape.flatten_spatial(x)?;
                let t = tape.transpose(flat)?;
                let back = tape.transpose(t)?;
                let y = tape.unflatten_spatial(back, 2, 3, 4)?;
                weighted_sum(tape, y, &coeffs)
            }),
        )?);
    }

    // row mean and row broadcasts
    {
        let mut p = Params::new();
        p.insert("x", Tensor::randn(&[5, 3], 1.0, &mut rng), true)?;
        p.insert("r", Tensor::randn(&[1, 3], 1.0, &mut rng), true)?;
        let coeffs = coeffs_for(&[5, 3], &mut rng);
        results.push(run_check(
            "row_ops",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let x = tape.bind(p, p.id("x").unwrap());
                let r = tape.bind(p, p.id("r").unwrap());
                let mean = tape.row_mean(x)?;
                let centered = tape.sub_row(x, mean)?;
                let shifted = tape.add_row(centered, r)?;
                weighted_sum(tape, shifted, &coeffs)
            }),
        )?);
    }

    // elementwise add / mul / scale
    {
        let mut p = Params::new();
        p.insert("a", Tensor::randn(&[12], 1.0, &mut rng), true)?;
        p.insert("b", Tensor::randn(&[12], 1.0, &mut rng), true)?;
        let coeffs = coeffs_for(&[12], &mut rng);
        results.push(run_check(
            "elementwise",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let a = tape.bind(p, p.id("a").unwrap());
                let b = tape.bind(p, p.id("b").unwrap());
                let s = tape.add(a, b)?;
                let m = tape.mul(s, a)?;
                let sc = tape.scale(m, -0.75);
                weighted_sum(tape, sc, &coeffs)
            }),
        )?);
    }

    // linear head
    {
        let mut p = Params::new();
        p.insert("x", Tensor::randn(&[6], 1.0, &mut rng), true)?;
        p.insert("w", Tensor::randn(&[4, 6], 0.5, &mut rng), true)?;
        p.insert("b", Tensor::randn(&[4], 0.5, &mut rng), true)?;
        let coeffs = coeffs_for(&[4], &mut rng);
        results.push(run_check(
            "linear",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let x = tape.bind(p, p.id("x").unwrap());
                let w = tape.bind(p, p.id("w").unwrap());
                let b = tape.bind(p, p.id("b").unwrap());
                let y = tape.linear(x, w, b)?;
                weighted_sum(tape, y, &coeffs)
            }),
        )?);
    }

    // cross entropy and loss averaging
    {
        let mut p = Params::new();
        p.insert("l1", Tensor::randn(&[5], 1.0, &mut rng), true)?;
        p.insert("l2", Tensor::randn(&[5], 1.0, &mut rng), true)?;
        results.push(run_check(
            "cross_entropy_mean",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let l1 = tape.bind(p, p.id("l1").unwrap());
                let l2 = tape.bind(p, p.id("l2").unwrap());
                let a = tape.cross_entropy(l1, 2)?;
                let b = tape.cross_entropy(l2, 0)?;
                tape.mean_many(&[a, b])
            }),
        )?);
    }

    Ok(results)
}

fn feature_maps(
    tape: &mut Tape,
    params: &Params,
    names: [&str; 3],
) -> Result<(FeatureMap, FeatureMap, FeatureMap)> {
    let mut out = Vec::new();
    for n in names {
        let v = tape.bind(params, params.id(n).unwrap());
        out.push(FeatureMap::new(tape, v)?);
    }
    Ok((out[0], out[1], out[2]))
}

/// Composite checks through the extractor and attention blocks, plus the
/// full model in its tiny acceptance configuration.
pub fn model_suite(settings: GradCheckSettings) -> Result<Vec<GradCheckResult>> {
    let mut results = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0xFADE);

    // residual block (input treated as trainable so d/dx is checked too)
    {
        let mut p = Params::new();
        p.insert("x", Tensor::randn(&[4, 3, 3], 1.0, &mut rng), true)?;
        let block = ResidualBlock::build("rb", 4, &mut p, &mut rng)?;
        let coeffs = coeffs_for(&[4, 3, 3], &mut rng);
        results.push(run_check(
            "residual_block",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let x = tape.bind(p, p.id("x").unwrap());
                let y = block.forward(tape, p, x, Phase::Train)?;
                weighted_sum(tape, y, &coeffs)
            }),
        )?);
    }

    // attention: dnl and nl on shared maps
    for kind in [AttentionKind::Dnl, AttentionKind::Nl] {
        let mut p = Params::new();
        p.insert("h", Tensor::randn(&[4, 3, 3], 1.0, &mut rng), true)?;
        p.insert("l", Tensor::randn(&[4, 3, 3], 1.0, &mut rng), true)?;
        p.insert("f", Tensor::randn(&[4, 3, 3], 1.0, &mut rng), true)?;
        let attn = AttentionParams::build(4, 2, &mut p, &mut rng)?;
        let coeffs = coeffs_for(&[4, 3, 3], &mut rng);
        let wiring = WiringConfig::canonical();
        results.push(run_check(
            if kind == AttentionKind::Dnl { "dnl_forward" } else { "nl_forward" },
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let (h, l, f) = feature_maps(tape, p, ["h", "l", "f"])?;
                let out = match kind {
                    AttentionKind::Dnl => dnl_forward(tape, p, &h, &l, &f, &wiring, &attn)?,
                    AttentionKind::Nl => nl_forward(tape, p, &h, &l, &f, &wiring, &attn)?,
                };
                weighted_sum(tape, out.var, &coeffs)
            }),
        )?);
    }

    let tiny = ExtractorConfig {
        hsi_bands: 4,
        patch_size: 5,
        feature_channels: 4,
        residual_blocks: 1,
        lidar_layers: 2,
    };

    // hsi extractor end to end
    {
        let mut p = Params::new();
        p.insert("patch", Tensor::randn(&[4, 5, 5], 1.0, &mut rng), true)?;
        let ext = HsiExtractor::build(&tiny, &mut p, &mut rng)?;
        let coeffs = coeffs_for(&[4, 5, 5], &mut rng);
        results.push(run_check(
            "extract_hsi",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let x = tape.bind(p, p.id("patch").unwrap());
                let fm = ext.forward(tape, p, x, Phase::Train)?;
                weighted_sum(tape, fm.var, &coeffs)
            }),
        )?);
    }

    // lidar extractor end to end
    {
        let mut p = Params::new();
        p.insert("patch", Tensor::randn(&[1, 5, 5], 1.0, &mut rng), true)?;
        let ext = LidarExtractor::build(&tiny, &mut p, &mut rng)?;
        let coeffs = coeffs_for(&[4, 5, 5], &mut rng);
        results.push(run_check(
            "extract_lidar",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let x = tape.bind(p, p.id("patch").unwrap());
                let fm = ext.forward(tape, p, x, Phase::Train)?;
                weighted_sum(tape, fm.var, &coeffs)
            }),
        )?);
    }

    // fusion end to end
    {
        let mut p = Params::new();
        p.insert("h", Tensor::randn(&[4, 5, 5], 1.0, &mut rng), true)?;
        p.insert("l", Tensor::randn(&[4, 5, 5], 1.0, &mut rng), true)?;
        let fuse = FuseModule::build(&tiny, &mut p, &mut rng)?;
        let coeffs = coeffs_for(&[4, 5, 5], &mut rng);
        results.push(run_check(
            "fuse",
            &mut p,
            settings,
            Box::new(move |tape, p| {
                let h = tape.bind(p, p.id("h").unwrap());
                let l = tape.bind(p, p.id("l").unwrap());
                let fh = FeatureMap::new(tape, h)?;
                let fl = FeatureMap::new(tape, l)?;
                let out = fuse.forward(tape, p, &fh, &fl, Phase::Train)?;
                weighted_sum(tape, out.var, &coeffs)
            }),
        )?);
    }

    Ok(results)
}

/// Cross-entropy loss of the full model (feature_channels 8, 7x7 patches,
/// 3 classes) against finite differences over every trainable parameter.
///
/// Relu is non-differentiable at 0, so the check point must keep every
/// pre-relu activation well clear of the finite-difference step: seeds are
/// scanned until one forward pass has min |pre-relu| > 500 * h, then that
/// seed is checked.
pub fn full_model_check(settings: GradCheckSettings) -> Result<GradCheckResult> {
    let cfg = ModelConfig {
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
    };
    let kink_margin = 500.0 * settings.h;

    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let model = Model::build(cfg.clone(), &mut params, &mut rng)?;
        let hsi = Tensor::randn(&[6, 7, 7], 1.0, &mut rng);
        let lidar = Tensor::randn(&[1, 7, 7], 1.0, &mut rng);

        let mut probe = Tape::new();
        model.forward(&mut probe, &mut params, &hsi, &lidar, Phase::Train)?;
        let clearance = probe.min_abs_relu_input().unwrap_or(f64::INFINITY);
        drop(probe);
        if clearance <= kink_margin {
            continue;
        }

        return check_params("full_model", &mut params, settings, move |tape, p| {
            let logits = model.forward(tape, p, &hsi, &lidar, Phase::Train)?;
            tape.cross_entropy(logits, 1)
        });
    }
    Err(crate::error::Error::Config(
        "no seed in 0..200 gave a relu-kink-free evaluation point".into(),
    ))
}

/// Every check the `gradcheck` subcommand runs.
pub fn full_suite(settings: GradCheckSettings) -> Result<Vec<GradCheckResult>> {
    let mut results = op_suite(settings)?;
    results.extend(model_suite(settings)?);
    results.push(full_model_check(settings)?);
    Ok(results)
}
