use crate::data::{PatchDataset, Split};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::Params;
use crate::pipeline::model::Model;
use crate::tape::{Phase, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Optimization settings. `repetitions` controls how many seeded runs the
/// experiment helpers aggregate into mean/std reports.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub repetitions: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            repetitions: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.repetitions == 0 {
            return Err(Error::Config(
                "epochs, batch_size and repetitions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Loss history and the exact batch order consumed, for paired-run checks.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Mean cross-entropy per epoch over the training split.
    pub loss_history: Vec<f64>,
    /// Shuffled train-sample indices per epoch.
    pub schedule: Vec<Vec<usize>>,
}

/// The per-epoch shuffle order for a given seed, independent of the model:
/// paired runs on the same data and seed consume identical batch sequences.
pub fn shuffle_schedule(seed: u64, n: usize, epochs: usize) -> Vec<Vec<usize>> {
    // decorrelated from the init stream, which seeds ChaCha with `seed` directly
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    (0..epochs)
        .map(|_| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect()
}

/// Minimize softmax cross-entropy over the train split with Adam.
/// Deterministic given (seed, config, data); aborts with a diagnostic on the
/// first non-finite loss.
pub fn train(
    model: &Model,
    params: &mut Params,
    data: &PatchDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = data.indices_of(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }

    let schedule = shuffle_schedule(cfg.seed, train_idx.len(), cfg.epochs);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut loss_history = Vec::with_capacity(cfg.epochs);

    for (epoch, order) in schedule.iter().enumerate() {
        let mut epoch_loss = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &pos in chunk {
                let (hsi, lidar, class) = data.patches(train_idx[pos]);
                let logits = model.forward(&mut tape, params, &hsi, &lidar, Phase::Train)?;
                losses.push(tape.cross_entropy(logits, class)?);
            }
            let batch_loss = tape.mean_many(&losses)?;
            let loss_value = tape.value(batch_loss).item();
            if !loss_value.is_finite() {
                return Err(Error::NanLoss { epoch, step, loss: loss_value });
            }
            tape.backward(batch_loss)?;
            let grads = tape.param_grads(params);
            drop(tape);
            adam.step(params, &grads);
            epoch_loss += loss_value * chunk.len() as f64;
        }
        loss_history.push(epoch_loss / train_idx.len() as f64);
    }

    Ok(TrainOutcome { loss_history, schedule })
}

/// Mean eval-phase cross-entropy over a split; the "loss did not get worse"
/// check in the smoke tests uses this.
pub fn mean_loss(model: &Model, params: &mut Params, data: &PatchDataset, split: Split) -> Result<f64> {
    let idx = data.indices_of(split);
    if idx.is_empty() {
        return Err(Error::Config("split is empty".into()));
    }
    let mut total = 0.0;
    for &i in &idx {
        let (hsi, lidar, class) = data.patches(i);
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, params, &hsi, &lidar, Phase::Eval)?;
        let loss = tape.cross_entropy(logits, class)?;
        total += tape.value(loss).item();
    }
    Ok(total / idx.len() as f64)
}

/// Training-split accuracy in percent, eval phase.
pub fn train_accuracy(model: &Model, params: &mut Params, data: &PatchDataset) -> Result<f64> {
    let idx = data.indices_of(Split::Train);
    let mut correct = 0usize;
    for &i in &idx {
        let (hsi, lidar, class) = data.patches(i);
        if model.predict(params, &hsi, &lidar)? == class {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / idx.len() as f64)
}
