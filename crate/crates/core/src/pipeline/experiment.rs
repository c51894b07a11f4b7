//! Seeded experiment runners: single and repeated train/eval cycles, the
//! wiring ablation grid, and the paired NL/DNL comparison.
//!
//! Repetition r trains a fresh model initialized and shuffled from
//! `seed + r` on the same dataset split; reports aggregate the runs into
//! mean/std statistics.

use crate::attention::{AttentionKind, WiringConfig};
use crate::data::{PatchDataset, Split};
use crate::error::Result;
use crate::params::Params;
use crate::pipeline::metrics::{Evaluation, MetricsReport, Stat};
use crate::pipeline::model::{Model, ModelConfig};
use crate::pipeline::train::{train, TrainConfig, TrainOutcome};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Evaluate a trained model on one split of the dataset.
pub fn evaluate(model: &Model, params: &mut Params, data: &PatchDataset, split: Split) -> Result<Evaluation> {
    let idx = data.indices_of(split);
    let mut truth = Vec::with_capacity(idx.len());
    let mut pred = Vec::with_capacity(idx.len());
    for &i in &idx {
        let (hsi, lidar, class) = data.patches(i);
        truth.push(class);
        pred.push(model.predict(params, &hsi, &lidar)?);
    }
    crate::pipeline::metrics::confusion_from_pairs(&truth, &pred, data.classes)
}

/// Build, train and evaluate one model with the given seed.
pub fn run_single(
    data: &PatchDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(Evaluation, TrainOutcome, Model, Params)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    let model = Model::build(model_cfg.clone(), &mut params, &mut rng)?;
    let cfg = TrainConfig { seed, ..train_cfg.clone() };
    let outcome = train(&model, &mut params, data, &cfg)?;
    let eval = evaluate(&model, &mut params, data, Split::Test)?;
    Ok((eval, outcome, model, params))
}

fn default_class_names(classes: usize) -> Vec<String> {
    (1..=classes).map(|c| format!("class {c}")).collect()
}

/// Train/evaluate `train_cfg.repetitions` seeded runs and aggregate.
pub fn run_repeated(
    data: &PatchDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<MetricsReport> {
    let mut runs = Vec::with_capacity(train_cfg.repetitions);
    for rep in 0..train_cfg.repetitions {
        let (eval, _, _, _) = run_single(data, model_cfg, train_cfg, train_cfg.seed + rep as u64)?;
        runs.push(eval);
    }
    MetricsReport::from_runs(default_class_names(data.classes), &runs)
}

/// One row of the wiring ablation: either an aggregated OA or the error that
/// sank that row. Failures never abort the remaining rows.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub wiring: WiringConfig,
    pub oa: std::result::Result<Stat, String>,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Aligned text table, one row per wiring.
    pub fn to_table(&self) -> String {
        let mut out = String::from("no.  wiring (v k q u)          OA (%)\n");
        for (i, row) in self.rows.iter().enumerate() {
            let cell = match &row.oa {
                Ok(stat) => format!("{:.2} +/- {:.2}", stat.mean, stat.std),
                Err(e) => format!("failed: {e}"),
            };
            out.push_str(&format!("{:<4} {:<16} {:>16}\n", i + 1, row.wiring.to_string(), cell));
        }
        out
    }

    /// CSV rows `wiring,oa_mean,oa_std` (or `wiring,error,<message>`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("wiring,oa_mean,oa_std\n");
        for row in &self.rows {
            match &row.oa {
                Ok(stat) => out.push_str(&format!("{},{:.6},{:.6}\n", row.wiring, stat.mean, stat.std)),
                Err(e) => out.push_str(&format!("{},error,{}\n", row.wiring, e.replace(',', ";"))),
            }
        }
        out
    }
}

/// Train one model per wiring per repetition; aggregate OA per wiring.
pub fn ablate(
    data: &PatchDataset,
    wirings: &[WiringConfig],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> AblationTable {
    let rows = wirings
        .iter()
        .map(|&wiring| {
            let cfg = ModelConfig { wiring, ..model_cfg.clone() };
            let oa = (0..train_cfg.repetitions)
                .map(|rep| {
                    run_single(data, &cfg, train_cfg, train_cfg.seed + rep as u64)
                        .map(|(eval, _, _, _)| eval.oa())
                })
                .collect::<Result<Vec<f64>>>()
                .map(|oas| Stat::from_values(&oas))
                .map_err(|e| e.to_string());
            AblationRow { wiring, oa }
        })
        .collect();
    AblationTable { rows }
}

/// Paired NL/DNL comparison: identical configs, data and seeds; only the
/// attention type differs. Returns (nl_report, dnl_report).
pub fn compare_nl_dnl(
    data: &PatchDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(MetricsReport, MetricsReport)> {
    let nl_cfg = ModelConfig { attention: AttentionKind::Nl, ..model_cfg.clone() };
    let dnl_cfg = ModelConfig { attention: AttentionKind::Dnl, ..model_cfg.clone() };
    let nl = run_repeated(data, &nl_cfg, train_cfg)?;
    let dnl = run_repeated(data, &dnl_cfg, train_cfg)?;
    Ok((nl, dnl))
}

/// Side-by-side text table for the NL/DNL comparison.
pub fn comparison_table(nl: &MetricsReport, dnl: &MetricsReport) -> String {
    let mut out = String::from("method      OA (%)            AA (%)            Kappa\n");
    for (name, r) in [("NL", nl), ("DNL", dnl)] {
        out.push_str(&format!(
            "{:<8} {:>16} {:>17} {:>17}\n",
            name,
            format!("{:.2} +/- {:.2}", r.oa.mean, r.oa.std),
            format!("{:.2} +/- {:.2}", r.aa.mean, r.aa.std),
            format!("{:.4} +/- {:.4}", r.kappa.mean, r.kappa.std),
        ));
    }
    out
}

/// CSV for the NL/DNL comparison with a documented header.
pub fn comparison_csv(nl: &MetricsReport, dnl: &MetricsReport) -> String {
    let mut out =
        String::from("method,oa_mean,oa_std,aa_mean,aa_std,kappa_mean,kappa_std\n");
    for (name, r) in [("nl", nl), ("dnl", dnl)] {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            name, r.oa.mean, r.oa.std, r.aa.mean, r.aa.std, r.kappa.mean, r.kappa.std
        ));
    }
    out
}
