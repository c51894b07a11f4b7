//! Model assembly, training, evaluation, and the experiment runners
//! (wiring ablation grid, NL/DNL comparison).

mod experiment;
mod metrics;
mod model;
mod train;

pub use experiment::{
    ablate, compare_nl_dnl, comparison_csv, comparison_table, evaluate, run_repeated, run_single,
    AblationRow, AblationTable,
};
pub use metrics::{confusion_from_pairs, Evaluation, MetricsReport, Stat};
pub use model::{argmax, Model, ModelConfig};
pub use train::{mean_loss, shuffle_schedule, train, train_accuracy, TrainConfig, TrainOutcome};
