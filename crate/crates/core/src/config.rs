//! Experiment configuration: a flat `key = value` text format with dotted
//! section prefixes, parsed without dependencies. Command-line overrides use
//! the same `section.key=value` form and win over the file.
//!
//! Exactly one data source must be configured: either the three raster
//! header paths (`data.hsi`, `data.lidar`, `data.labels`) or a synthetic
//! scene (`scene.*`). Per-class sample counts take one value (applied to
//! every class) or one value per class.

use crate::attention::{AttentionKind, WiringConfig};
use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::pipeline::TrainConfig;
use std::path::PathBuf;

/// Where the rasters come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Paths {
        hsi: PathBuf,
        lidar: PathBuf,
        labels: PathBuf,
    },
    Scene(SceneSpec),
}

/// Per-class counts: a single value broadcasts to every class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountSpec(pub Vec<usize>);

impl CountSpec {
    pub fn resolve(&self, classes: usize) -> Result<Vec<usize>> {
        if self.0.len() == 1 {
            Ok(vec![self.0[0]; classes])
        } else if self.0.len() == classes {
            Ok(self.0.clone())
        } else {
            Err(Error::Config(format!(
                "per-class counts list {} values for {} classes",
                self.0.len(),
                classes
            )))
        }
    }

    fn to_value(&self) -> String {
        self.0
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Model-architecture settings (band count and class count come from the
/// data source).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub feature_channels: usize,
    pub residual_blocks: usize,
    pub lidar_layers: usize,
    /// Defaults to feature_channels / 2 when absent.
    pub embed_channels: Option<usize>,
    pub attention: AttentionKind,
    pub wiring: WiringConfig,
}

impl ModelSpec {
    pub fn embed_channels_or_default(&self) -> usize {
        self.embed_channels
            .unwrap_or((self.feature_channels / 2).max(1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub patch_size: usize,
    pub train_per_class: CountSpec,
    pub test_per_class: CountSpec,
    pub split_seed: u64,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Wirings for the ablation grid; `None` means the default 8-row grid.
    pub ablate_wirings: Option<Vec<WiringConfig>>,
}

const KNOWN_KEYS: &[&str] = &[
    "data.hsi",
    "data.lidar",
    "data.labels",
    "data.patch_size",
    "data.train_per_class",
    "data.test_per_class",
    "data.split_seed",
    "scene.classes",
    "scene.height",
    "scene.width",
    "scene.bands",
    "scene.noise_sigma",
    "scene.seed",
    "model.feature_channels",
    "model.residual_blocks",
    "model.lidar_layers",
    "model.embed_channels",
    "model.attention",
    "wiring",
    "train.lr",
    "train.epochs",
    "train.batch_size",
    "train.seed",
    "train.repetitions",
    "ablate.wirings",
];

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1];
        for (j, &cb) in b.iter().enumerate() {
            let cost = if ca == cb { 0 } else { 1 };
            cur.push((prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}

fn nearest_key(key: &str) -> &'static str {
    KNOWN_KEYS
        .iter()
        .min_by_key(|k| edit_distance(key, k))
        .copied()
        .unwrap_or("wiring")
}

#[derive(Default)]
struct RawConfig {
    entries: Vec<(String, String)>,
}

impl RawConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::UnknownKey {
                key: key.to_string(),
                suggestion: nearest_key(key).to_string(),
            });
        }
        // later assignments (overrides) win
        self.entries.retain(|(k, _)| k != key);
        self.entries.push((key.to_string(), value.to_string()));
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn parse_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Format {
                    what: "config".into(),
                    detail: format!("line {}: expected key = value, got `{line}`", lineno + 1),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(raw: &RawConfig, key: &str, default: T) -> Result<T> {
    match raw.get(key) {
        None => Ok(default),
        Some(v) => v.parse::<T>().map_err(|_| {
            Error::Config(format!("config key `{key}`: cannot parse `{v}`"))
        }),
    }
}

fn parse_counts(raw: &RawConfig, key: &str, default: usize) -> Result<CountSpec> {
    match raw.get(key) {
        None => Ok(CountSpec(vec![default])),
        Some(v) => {
            let values = v
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>().map_err(|_| {
                        Error::Config(format!("config key `{key}`: cannot parse `{t}`"))
                    })
                })
                .collect::<Result<Vec<usize>>>()?;
            if values.is_empty() {
                return Err(Error::Config(format!("config key `{key}` is empty")));
            }
            Ok(CountSpec(values))
        }
    }
}

impl ExperimentConfig {
    /// Parse config text plus `section.key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut raw = RawConfig::default();
        raw.parse_text(text)?;
        for item in overrides {
            let Some((key, value)) = item.split_once('=') else {
                return Err(Error::Config(format!(
                    "override `{item}` must have the form section.key=value"
                )));
            };
            raw.set(key.trim(), value.trim())?;
        }
        Self::from_raw(&raw)
    }

    fn from_raw(raw: &RawConfig) -> Result<Self> {
        let has_paths = ["data.hsi", "data.lidar", "data.labels"]
            .iter()
            .any(|k| raw.get(k).is_some());
        let has_scene = [
            "scene.classes",
            "scene.height",
            "scene.width",
            "scene.bands",
            "scene.noise_sigma",
            "scene.seed",
        ]
        .iter()
        .any(|k| raw.get(k).is_some());
        let data = match (has_paths, has_scene) {
            (true, true) => {
                return Err(Error::Config(
                    "config sets both data.* paths and scene.*; exactly one data source is allowed"
                        .into(),
                ))
            }
            (false, false) => {
                return Err(Error::Config(
                    "config needs a data source: either data.hsi/data.lidar/data.labels or scene.*"
                        .into(),
                ))
            }
            (true, false) => {
                let need = |k: &str| {
                    raw.get(k)
                        .map(PathBuf::from)
                        .ok_or_else(|| Error::Config(format!("data source incomplete: missing `{k}`")))
                };
                DataSource::Paths {
                    hsi: need("data.hsi")?,
                    lidar: need("data.lidar")?,
                    labels: need("data.labels")?,
                }
            }
            (false, true) => {
                let defaults = SceneSpec::default();
                DataSource::Scene(SceneSpec {
                    classes: parse_num(raw, "scene.classes", defaults.classes)?,
                    height: parse_num(raw, "scene.height", defaults.height)?,
                    width: parse_num(raw, "scene.width", defaults.width)?,
                    bands: parse_num(raw, "scene.bands", defaults.bands)?,
                    noise_sigma: parse_num(raw, "scene.noise_sigma", defaults.noise_sigma)?,
                    seed: parse_num(raw, "scene.seed", defaults.seed)?,
                })
            }
        };

        let feature_channels = parse_num(raw, "model.feature_channels", 64)?;
        let model = ModelSpec {
            feature_channels,
            residual_blocks: parse_num(raw, "model.residual_blocks", 2)?,
            lidar_layers: parse_num(raw, "model.lidar_layers", 3)?,
            embed_channels: match raw.get("model.embed_channels") {
                None => None,
                Some(v) => Some(v.parse::<usize>().map_err(|_| {
                    Error::Config(format!("config key `model.embed_channels`: cannot parse `{v}`"))
                })?),
            },
            attention: match raw.get("model.attention") {
                None => AttentionKind::Dnl,
                Some(v) => AttentionKind::parse(v)?,
            },
            wiring: match raw.get("wiring") {
                None => WiringConfig::canonical(),
                Some(v) => WiringConfig::parse(v)?,
            },
        };

        let train = TrainConfig {
            learning_rate: parse_num(raw, "train.lr", 1e-3)?,
            epochs: parse_num(raw, "train.epochs", 100)?,
            batch_size: parse_num(raw, "train.batch_size", 32)?,
            seed: parse_num(raw, "train.seed", 0)?,
            repetitions: parse_num(raw, "train.repetitions", 5)?,
        };
        train.validate()?;

        let ablate_wirings = match raw.get("ablate.wirings") {
            None => None,
            Some(v) => {
                let wirings = v
                    .split(';')
                    .map(|w| WiringConfig::parse(w.trim()))
                    .collect::<Result<Vec<_>>>()?;
                if wirings.is_empty() {
                    return Err(Error::Config("ablate.wirings is empty".into()));
                }
                Some(wirings)
            }
        };

        Ok(ExperimentConfig {
            data,
            patch_size: parse_num(raw, "data.patch_size", 11)?,
            train_per_class: parse_counts(raw, "data.train_per_class", 30)?,
            test_per_class: parse_counts(raw, "data.test_per_class", 80)?,
            split_seed: parse_num(raw, "data.split_seed", 1)?,
            model,
            train,
            ablate_wirings,
        })
    }

    /// Canonical serialization; `parse(to_config_string())` reproduces the
    /// config exactly.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        match &self.data {
            DataSource::Paths { hsi, lidar, labels } => {
                out.push_str(&format!("data.hsi = {}\n", hsi.display()));
                out.push_str(&format!("data.lidar = {}\n", lidar.display()));
                out.push_str(&format!("data.labels = {}\n", labels.display()));
            }
            DataSource::Scene(scene) => {
                out.push_str(&format!("scene.classes = {}\n", scene.classes));
                out.push_str(&format!("scene.height = {}\n", scene.height));
                out.push_str(&format!("scene.width = {}\n", scene.width));
                out.push_str(&format!("scene.bands = {}\n", scene.bands));
                out.push_str(&format!("scene.noise_sigma = {}\n", scene.noise_sigma));
                out.push_str(&format!("scene.seed = {}\n", scene.seed));
            }
        }
        out.push_str(&format!("data.patch_size = {}\n", self.patch_size));
        out.push_str(&format!(
            "data.train_per_class = {}\n",
            self.train_per_class.to_value()
        ));
        out.push_str(&format!(
            "data.test_per_class = {}\n",
            self.test_per_class.to_value()
        ));
        out.push_str(&format!("data.split_seed = {}\n", self.split_seed));
        out.push_str(&format!(
            "model.feature_channels = {}\n",
            self.model.feature_channels
        ));
        out.push_str(&format!(
            "model.residual_blocks = {}\n",
            self.model.residual_blocks
        ));
        out.push_str(&format!("model.lidar_layers = {}\n", self.model.lidar_layers));
        if let Some(e) = self.model.embed_channels {
            out.push_str(&format!("model.embed_channels = {e}\n"));
        }
        out.push_str(&format!("model.attention = {}\n", self.model.attention.token()));
        out.push_str(&format!("wiring = {}\n", self.model.wiring));
        out.push_str(&format!("train.lr = {}\n", self.train.learning_rate));
        out.push_str(&format!("train.epochs = {}\n", self.train.epochs));
        out.push_str(&format!("train.batch_size = {}\n", self.train.batch_size));
        out.push_str(&format!("train.seed = {}\n", self.train.seed));
        out.push_str(&format!("train.repetitions = {}\n", self.train.repetitions));
        if let Some(wirings) = &self.ablate_wirings {
            let items: Vec<String> = wirings.iter().map(|w| w.to_string()).collect();
            out.push_str(&format!("ablate.wirings = {}\n", items.join("; ")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCENE_CONFIG: &str = "\
# desk-scale scene
scene.classes = 6
scene.bands = 16
scene.noise_sigma = 0.25
data.patch_size = 7
model.feature_channels = 8
model.attention = dnl
wiring = F H L H
train.lr = 0.001
train.epochs = 40
";

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::parse(SCENE_CONFIG, &[]).unwrap();
        match &cfg.data {
            DataSource::Scene(s) => {
                assert_eq!(s.classes, 6);
                assert_eq!(s.height, 64); // default
                assert_eq!(s.noise_sigma, 0.25);
            }
            _ => panic!("expected scene source"),
        }
        assert_eq!(cfg.patch_size, 7);
        assert_eq!(cfg.model.feature_channels, 8);
        assert_eq!(cfg.model.embed_channels_or_default(), 4);
        assert_eq!(cfg.train.epochs, 40);
        assert_eq!(cfg.train.batch_size, 32); // default
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let err = ExperimentConfig::parse("scene.classes = 4\ntrain.lrr = 0.1\n", &[]).unwrap_err();
        match err {
            Error::UnknownKey { key, suggestion } => {
                assert_eq!(key, "train.lrr");
                assert_eq!(suggestion, "train.lr");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn overrides_win_over_file() {
        let cfg = ExperimentConfig::parse(
            SCENE_CONFIG,
            &["train.epochs=7".to_string(), "wiring=L L L L".to_string()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.wiring, WiringConfig::single(crate::attention::Source::Lidar));
    }

    #[test]
    fn both_sources_rejected() {
        let text = format!("{SCENE_CONFIG}data.hsi = x.hdr\n");
        let err = ExperimentConfig::parse(&text, &[]).unwrap_err();
        assert!(err.to_string().contains("exactly one data source"));
    }

    #[test]
    fn no_source_rejected() {
        assert!(ExperimentConfig::parse("train.lr = 0.1\n", &[]).is_err());
    }

    #[test]
    fn round_trips_through_serialization() {
        for text in [
            SCENE_CONFIG.to_string(),
            format!("{SCENE_CONFIG}data.train_per_class = 10 20 30 40 50 60\n"),
            format!("{SCENE_CONFIG}ablate.wirings = F H L H; L L L L\n"),
            format!("{SCENE_CONFIG}model.embed_channels = 2\n"),
            "data.hsi = a.hdr\ndata.lidar = b.hdr\ndata.labels = c.hdr\n".to_string(),
        ] {
            let cfg = ExperimentConfig::parse(&text, &[]).unwrap();
            let cycled = ExperimentConfig::parse(&cfg.to_config_string(), &[]).unwrap();
            assert_eq!(cfg, cycled, "round trip changed config for:\n{text}");
        }
    }

    #[test]
    fn per_class_counts_resolve() {
        let c = CountSpec(vec![5]);
        assert_eq!(c.resolve(3).unwrap(), vec![5, 5, 5]);
        let c = CountSpec(vec![1, 2, 3]);
        assert_eq!(c.resolve(3).unwrap(), vec![1, 2, 3]);
        assert!(c.resolve(4).is_err());
    }
}
