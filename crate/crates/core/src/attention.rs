//! Disentangled non-local attention with configurable branch wiring, plus
//! the coupled non-local baseline.
//!
//! Three feature maps (HSI features H, LiDAR features L, mixed features F)
//! feed four branches: value, key, query, and unary saliency. The
//! disentangled form normalizes the whitened pairwise term and the unary
//! term with separate softmaxes and sums their outputs; the coupled baseline
//! uses one softmax over raw query-key dot products. Both add the value
//! source map back residually.

use crate::error::{Error, Result};
use crate::params::{ParamId, Params};
use crate::tape::{FeatureMap, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Feature source for one attention branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Hsi,
    Lidar,
    Fused,
}

impl Source {
    pub fn token(&self) -> &'static str {
        match self {
            Source::Hsi => "H",
            Source::Lidar => "L",
            Source::Fused => "F",
        }
    }

    pub fn parse(token: &str) -> Result<Self> {
        match token {
            "H" | "h" => Ok(Source::Hsi),
            "L" | "l" => Ok(Source::Lidar),
            "F" | "f" => Ok(Source::Fused),
            other => Err(Error::Config(format!(
                "unknown feature source `{other}` (expected H, L or F)"
            ))),
        }
    }
}

/// Assignment of a feature source to each branch, in value/key/query/unary
/// order (the W_v, W_k, W_q, W_m columns of the wiring ablation).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WiringConfig {
    pub value: Source,
    pub key: Source,
    pub query: Source,
    pub unary: Source,
}

impl WiringConfig {
    pub fn new(value: Source, key: Source, query: Source, unary: Source) -> Self {
        WiringConfig { value, key, query, unary }
    }

    /// The best-performing wiring: fused values, HSI keys, LiDAR queries,
    /// HSI unary saliency.
    pub fn canonical() -> Self {
        use Source::*;
        WiringConfig::new(Fused, Hsi, Lidar, Hsi)
    }

    /// All branches read the same source.
    pub fn single(source: Source) -> Self {
        WiringConfig::new(source, source, source, source)
    }

    /// The eight distinct wirings of the ablation grid, canonical last.
    pub fn ablation_grid() -> Vec<WiringConfig> {
        use Source::*;
        vec![
            WiringConfig::new(Fused, Hsi, Hsi, Hsi),
            WiringConfig::new(Fused, Hsi, Lidar, Lidar),
            WiringConfig::new(Fused, Lidar, Lidar, Lidar),
            WiringConfig::new(Hsi, Hsi, Lidar, Hsi),
            WiringConfig::new(Lidar, Hsi, Lidar, Hsi),
            WiringConfig::new(Lidar, Lidar, Lidar, Lidar),
            WiringConfig::new(Hsi, Hsi, Hsi, Hsi),
            WiringConfig::canonical(),
        ]
    }

    /// Parse four whitespace-separated tokens, e.g. `F H L H`.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.len() != 4 {
            return Err(Error::Config(format!(
                "wiring needs 4 tokens (value key query unary), got `{text}`"
            )));
        }
        Ok(WiringConfig {
            value: Source::parse(tokens[0])?,
            key: Source::parse(tokens[1])?,
            query: Source::parse(tokens[2])?,
            unary: Source::parse(tokens[3])?,
        })
    }
}

impl std::fmt::Display for WiringConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} {} {}",
            self.value.token(),
            self.key.token(),
            self.query.token(),
            self.unary.token()
        )
    }
}

/// Attention type selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Coupled non-local baseline.
    Nl,
    /// Disentangled non-local.
    Dnl,
}

impl AttentionKind {
    pub fn token(&self) -> &'static str {
        match self {
            AttentionKind::Nl => "nl",
            AttentionKind::Dnl => "dnl",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "nl" => Ok(AttentionKind::Nl),
            "dnl" => Ok(AttentionKind::Dnl),
            other => Err(Error::Config(format!(
                "unknown attention type `{other}` (expected nl or dnl)"
            ))),
        }
    }
}

/// The four 1x1 branch transforms. W_v keeps feature_channels; W_k and W_q
/// embed into `embed_channels`; W_m projects to one saliency channel.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_v: ParamId,
    pub w_k: ParamId,
    pub w_q: ParamId,
    pub w_m: ParamId,
    pub embed_channels: usize,
}

impl AttentionParams {
    pub fn build(
        feature_channels: usize,
        embed_channels: usize,
        params: &mut Params,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if embed_channels == 0 {
            return Err(Error::Config("embed_channels must be >= 1".into()));
        }
        let std = (1.0 / feature_channels as f64).sqrt();
        let fc = feature_channels;
        Ok(AttentionParams {
            w_v: params.insert("attn.w_v", Tensor::randn(&[fc, fc, 1, 1], std, rng), true)?,
            w_k: params.insert(
                "attn.w_k",
                Tensor::randn(&[embed_channels, fc, 1, 1], std, rng),
                true,
            )?,
            w_q: params.insert(
                "attn.w_q",
                Tensor::randn(&[embed_channels, fc, 1, 1], std, rng),
                true,
            )?,
            w_m: params.insert("attn.w_m", Tensor::randn(&[1, fc, 1, 1], std, rng), true)?,
            embed_channels,
        })
    }
}

/// 1x1-transform a feature map and flatten it to one row per pixel:
/// (C, h, w) -> (h*w, out_channels).
pub fn embed(tape: &mut Tape, source: &FeatureMap, weight: Var) -> Result<Var> {
    let projected = tape.conv2d(source.var, weight, None, 1, 0)?;
    tape.flatten_spatial(projected)
}

/// Whitened pairwise logits: center queries and keys by their spatial means
/// and take all pairwise dot products. logits[m][n] = (q_m - u_q).(k_n - u_k).
pub fn whitened_pairwise_logits(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let u_q = tape.row_mean(q)?;
    let u_k = tape.row_mean(k)?;
    let qc = tape.sub_row(q, u_q)?;
    let kc = tape.sub_row(k, u_k)?;
    tape.matmul_bt(qc, kc)
}

/// Per-key saliency logits from the unary source: 1x1-project to a single
/// channel and lay the map out as one (1, h*w) row, ready for a softmax over
/// keys. Every query position receives the same unary attention.
pub fn unary_logits(tape: &mut Tape, source: &FeatureMap, w_m: Var) -> Result<Var> {
    let projected = tape.conv2d(source.var, w_m, None, 1, 0)?;
    let column = tape.flatten_spatial(projected)?;
    tape.transpose(column)
}

fn pick<'m>(wiring: Source, h: &'m FeatureMap, l: &'m FeatureMap, f: &'m FeatureMap) -> &'m FeatureMap {
    match wiring {
        Source::Hsi => h,
        Source::Lidar => l,
        Source::Fused => f,
    }
}

fn check_same_shape(h: &FeatureMap, l: &FeatureMap, f: &FeatureMap) -> Result<()> {
    if !h.same_shape(l) || !h.same_shape(f) {
        return Err(Error::shape(
            "attention inputs",
            format!("identical shapes, H is {}x{}x{}", h.channels, h.height, h.width),
            format!(
                "L {}x{}x{}, F {}x{}x{}",
                l.channels, l.height, l.width, f.channels, f.height, f.width
            ),
        ));
    }
    Ok(())
}

/// Disentangled non-local forward pass.
///
/// The whitened pairwise term and the unary term are normalized by separate
/// softmaxes over the key index, each applied to the value rows, summed, and
/// added residually to the value source map.
pub fn dnl_forward(
    tape: &mut Tape,
    params: &Params,
    h: &FeatureMap,
    l: &FeatureMap,
    f: &FeatureMap,
    wiring: &WiringConfig,
    attn: &AttentionParams,
) -> Result<FeatureMap> {
    check_same_shape(h, l, f)?;
    let value_map = pick(wiring.value, h, l, f);

    let w_v = tape.bind(params, attn.w_v);
    let w_k = tape.bind(params, attn.w_k);
    let w_q = tape.bind(params, attn.w_q);
    let w_m = tape.bind(params, attn.w_m);

    let v = embed(tape, value_map, w_v)?;
    let q = embed(tape, pick(wiring.query, h, l, f), w_q)?;
    let k = embed(tape, pick(wiring.key, h, l, f), w_k)?;

    let pair_logits = whitened_pairwise_logits(tape, q, k)?;
    let pair_attn = tape.softmax_rows(pair_logits)?;
    let pair_out = tape.matmul(pair_attn, v)?;

    let un_logits = unary_logits(tape, pick(wiring.unary, h, l, f), w_m)?;
    let un_attn = tape.softmax_rows(un_logits)?;
    let un_context = tape.matmul(un_attn, v)?;

    let combined = tape.add_row(pair_out, un_context)?;
    let map = tape.unflatten_spatial(combined, value_map.channels, value_map.height, value_map.width)?;
    let out = tape.add(map, value_map.var)?;
    FeatureMap::new(tape, out)
}

/// Coupled non-local forward pass: one softmax over raw query-key dot
/// products, applied to the values, residual add. The unary branch is
/// unused; wiring otherwise behaves as in [`dnl_forward`].
pub fn nl_forward(
    tape: &mut Tape,
    params: &Params,
    h: &FeatureMap,
    l: &FeatureMap,
    f: &FeatureMap,
    wiring: &WiringConfig,
    attn: &AttentionParams,
) -> Result<FeatureMap> {
    check_same_shape(h, l, f)?;
    let value_map = pick(wiring.value, h, l, f);

    let w_v = tape.bind(params, attn.w_v);
    let w_k = tape.bind(params, attn.w_k);
    let w_q = tape.bind(params, attn.w_q);

    let v = embed(tape, value_map, w_v)?;
    let q = embed(tape, pick(wiring.query, h, l, f), w_q)?;
    let k = embed(tape, pick(wiring.key, h, l, f), w_k)?;

    let logits = tape.matmul_bt(q, k)?;
    let attn_rows = tape.softmax_rows(logits)?;
    let out_rows = tape.matmul(attn_rows, v)?;

    let map = tape.unflatten_spatial(out_rows, value_map.channels, value_map.height, value_map.width)?;
    let out = tape.add(map, value_map.var)?;
    FeatureMap::new(tape, out)
}

/// Normalized attention distributions of a DNL pass, for inspection and
/// invariant checks: the (M, M) pairwise rows and the length-M unary vector.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub pairwise: Tensor,
    pub unary: Tensor,
}

impl AttentionWeights {
    /// Every pairwise row and the unary vector must be a probability vector.
    pub fn validate(&self) -> Result<()> {
        let m = self.unary.len();
        for (r, row) in self.pairwise.data().chunks(m).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "pairwise attention row {r} sums to {sum}, expected 1"
                )));
            }
        }
        let sum: f64 = self.unary.data().iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("unary attention sums to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Compute the DNL attention distributions without running the value path.
pub fn dnl_attention_weights(
    params: &Params,
    h: &FeatureMap,
    l: &FeatureMap,
    f: &FeatureMap,
    wiring: &WiringConfig,
    attn: &AttentionParams,
    tape: &mut Tape,
) -> Result<AttentionWeights> {
    check_same_shape(h, l, f)?;
    let w_k = tape.bind(params, attn.w_k);
    let w_q = tape.bind(params, attn.w_q);
    let w_m = tape.bind(params, attn.w_m);

    let q = embed(tape, pick(wiring.query, h, l, f), w_q)?;
    let k = embed(tape, pick(wiring.key, h, l, f), w_k)?;
    let pair_logits = whitened_pairwise_logits(tape, q, k)?;
    let pair_attn = tape.softmax_rows(pair_logits)?;

    let un_logits = unary_logits(tape, pick(wiring.unary, h, l, f), w_m)?;
    let un_attn = tape.softmax_rows(un_logits)?;

    let m = h.positions();
    Ok(AttentionWeights {
        pairwise: tape.value(pair_attn).clone(),
        unary: Tensor::new(vec![m], tape.value(un_attn).data().to_vec())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn maps(tape: &mut Tape, c: usize, p: usize, r: &mut ChaCha8Rng) -> (FeatureMap, FeatureMap, FeatureMap) {
        let h = tape.leaf(Tensor::randn(&[c, p, p], 1.0, r));
        let l = tape.leaf(Tensor::randn(&[c, p, p], 1.0, r));
        let f = tape.leaf(Tensor::randn(&[c, p, p], 1.0, r));
        (
            FeatureMap::new(tape, h).unwrap(),
            FeatureMap::new(tape, l).unwrap(),
            FeatureMap::new(tape, f).unwrap(),
        )
    }

    #[test]
    fn wiring_parses_and_prints() {
        let w = WiringConfig::parse("F H L H").unwrap();
        assert_eq!(w, WiringConfig::canonical());
        assert_eq!(w.to_string(), "F H L H");
        assert!(WiringConfig::parse("F H L").is_err());
        assert!(WiringConfig::parse("F H L X").is_err());
    }

    #[test]
    fn ablation_grid_has_eight_distinct_rows() {
        let grid = WiringConfig::ablation_grid();
        assert_eq!(grid.len(), 8);
        for (i, a) in grid.iter().enumerate() {
            for b in grid.iter().skip(i + 1) {
                assert_ne!(a, b);
            }
        }
        assert_eq!(grid.last().copied().unwrap(), WiringConfig::canonical());
    }

    #[test]
    fn embed_with_identity_weights_flattens_input() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 9).map(|v| v as f64 * 0.25).collect();
        let x = tape.leaf(Tensor::new(vec![2, 3, 3], data).unwrap());
        let fm = FeatureMap::new(&tape, x).unwrap();
        // identity 1x1: w[o][i] = (o == i)
        let w = tape.leaf(Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let e = embed(&mut tape, &fm, w).unwrap();
        assert_eq!(tape.shape(e), &[9, 2]);
        let flat = tape.flatten_spatial(x).unwrap();
        assert_eq!(tape.value(e).data(), tape.value(flat).data());
    }

    #[test]
    fn whitened_logits_of_constant_queries_are_zero() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::new(vec![4, 3], vec![2.0; 12]).unwrap());
        let k = tape.leaf(Tensor::randn(&[4, 3], 1.0, &mut rng()));
        let logits = whitened_pairwise_logits(&mut tape, q, k).unwrap();
        assert!(tape.value(logits).data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn whitened_logits_center_over_queries() {
        // mean over m of logits[m][n] must vanish for every n
        let mut r = rng();
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::randn(&[5, 4], 1.0, &mut r));
        let k = tape.leaf(Tensor::randn(&[5, 4], 1.0, &mut r));
        let logits = whitened_pairwise_logits(&mut tape, q, k).unwrap();
        let data = tape.value(logits).data();
        for n in 0..5 {
            let mean: f64 = (0..5).map(|m| data[m * 5 + n]).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-12, "column {n} mean {mean}");
        }
    }

    #[test]
    fn unary_attention_on_constant_source_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[2, 3, 3], 1.5));
        let fm = FeatureMap::new(&tape, x).unwrap();
        let w_m = tape.leaf(Tensor::randn(&[1, 2, 1, 1], 1.0, &mut rng()));
        let logits = unary_logits(&mut tape, &fm, w_m).unwrap();
        let attn = tape.softmax_rows(logits).unwrap();
        let data = tape.value(attn).data();
        assert_eq!(data.len(), 9);
        for &v in data {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }
        let sum: f64 = data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dnl_single_pixel_collapses_to_three_v() {
        // M = 1: both softmaxes are the scalar 1, so out = v + v + residual.
        let mut r = rng();
        let mut params = Params::new();
        let attn = AttentionParams::build(4, 2, &mut params, &mut r).unwrap();
        let mut tape = Tape::new();
        let (h, l, f) = maps(&mut tape, 4, 1, &mut r);
        let wiring = WiringConfig::canonical();
        let out = dnl_forward(&mut tape, &params, &h, &l, &f, &wiring, &attn).unwrap();

        // expected: 2 * (W_v f) + f
        let w_v = tape.bind(&params, attn.w_v);
        let v = embed(&mut tape, &f, w_v).unwrap();
        let expect: Vec<f64> = tape
            .value(v)
            .data()
            .iter()
            .zip(tape.value(f.var).data())
            .map(|(v, r)| 2.0 * v + r)
            .collect();
        for (a, b) in tape.value(out.var).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_mismatched_inputs() {
        let mut r = rng();
        let mut params = Params::new();
        let attn = AttentionParams::build(4, 2, &mut params, &mut r).unwrap();
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::zeros(&[4, 3, 3]));
        let l = tape.leaf(Tensor::zeros(&[4, 3, 3]));
        let f = tape.leaf(Tensor::zeros(&[4, 5, 5]));
        let h = FeatureMap::new(&tape, h).unwrap();
        let l = FeatureMap::new(&tape, l).unwrap();
        let f = FeatureMap::new(&tape, f).unwrap();
        let wiring = WiringConfig::canonical();
        assert!(dnl_forward(&mut tape, &params, &h, &l, &f, &wiring, &attn).is_err());
        assert!(nl_forward(&mut tape, &params, &h, &l, &f, &wiring, &attn).is_err());
    }

    #[test]
    fn nl_rows_are_probability_vectors() {
        let mut r = rng();
        let mut params = Params::new();
        let attn = AttentionParams::build(4, 2, &mut params, &mut r).unwrap();
        let mut tape = Tape::new();
        let (h, l, f) = maps(&mut tape, 4, 3, &mut r);
        let wiring = WiringConfig::canonical();
        let w_q = tape.bind(&params, attn.w_q);
        let w_k = tape.bind(&params, attn.w_k);
        let q = embed(&mut tape, pick(wiring.query, &h, &l, &f), w_q).unwrap();
        let k = embed(&mut tape, pick(wiring.key, &h, &l, &f), w_k).unwrap();
        let logits = tape.matmul_bt(q, k).unwrap();
        let attn_rows = tape.softmax_rows(logits).unwrap();
        for row in tape.value(attn_rows).data().chunks(9) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn dnl_attention_weights_validate() {
        let mut r = rng();
        let mut params = Params::new();
        let attn = AttentionParams::build(8, 4, &mut params, &mut r).unwrap();
        let mut tape = Tape::new();
        let (h, l, f) = maps(&mut tape, 8, 3, &mut r);
        let wiring = WiringConfig::canonical();
        let weights =
            dnl_attention_weights(&params, &h, &l, &f, &wiring, &attn, &mut tape).unwrap();
        weights.validate().unwrap();
        assert_eq!(weights.pairwise.shape(), &[9, 9]);
        assert_eq!(weights.unary.shape(), &[9]);
    }
}
