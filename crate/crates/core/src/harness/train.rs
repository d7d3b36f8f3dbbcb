use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tape;

use super::dataset::SyntheticVideoDataset;
use super::eval::{evaluate_report, EvalReport};
use super::optim::{Optimizer, OptimizerConfig};

/// Evaluation taken after `step` optimizer updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Completed epochs; a trailing partial epoch counts as one.
    pub epoch: usize,
    pub step: usize,
    pub train: EvalReport,
    pub eval: Option<EvalReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mini-batch loss of each step, before that step's update.
    pub step_losses: Vec<f64>,
    /// Evaluations at step 0, after every epoch, and after the last step.
    pub epochs: Vec<EpochRecord>,
    pub trainable_count: u64,
    pub wall_seconds: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    steps: usize,
    trainable_count: u64,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    final_train_top1: Option<f64>,
    final_eval_top1: Option<f64>,
    wall_seconds: f64,
    epochs: &'a [EpochRecord],
}

impl TrainHistory {
    pub fn steps(&self) -> usize {
        self.step_losses.len()
    }

    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn final_train_top1(&self) -> Option<f64> {
        self.final_record().map(|r| r.train.top1)
    }

    pub fn final_eval_top1(&self) -> Option<f64> {
        self.final_record().and_then(|r| r.eval.map(|e| e.top1))
    }

    /// Equality of everything except wall time.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.step_losses) == bits(&other.step_losses)
            && self.epochs == other.epochs
            && self.trainable_count == other.trainable_count
    }

    /// `step,loss` rows, steps counted from 1.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["step", "loss"])?;
        for (i, loss) in self.step_losses.iter().enumerate() {
            w.write_record([(i + 1).to_string(), loss.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        let summary = Summary {
            steps: self.steps(),
            trainable_count: self.trainable_count,
            initial_loss: self.step_losses.first().copied(),
            final_loss: self.step_losses.last().copied(),
            final_train_top1: self.final_train_top1(),
            final_eval_top1: self.final_eval_top1(),
            wall_seconds: self.wall_seconds,
            epochs: &self.epochs,
        };
        Ok(serde_json::to_string_pretty(&summary)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("history.csv");
        let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(std::io::BufWriter::new(file))?;
        let json_path = dir.join("summary.json");
        std::fs::write(&json_path, self.summary_json()? + "\n").map_err(|e| Error::io(&json_path, e))?;
        Ok(())
    }
}

pub fn train<M: Network + ?Sized>(
    model: &mut M,
    dataset: &SyntheticVideoDataset,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<TrainHistory> {
    train_with_eval(model, dataset, None, opt, seed)
}

/// Mini-batch training over reshuffled epochs. The last batch of an epoch
/// may be short. Only unfrozen parameters move.
pub fn train_with_eval<M: Network + ?Sized>(
    model: &mut M,
    dataset: &SyntheticVideoDataset,
    eval_set: Option<&SyntheticVideoDataset>,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<TrainHistory> {
    let started = Instant::now();
    let trainable_count = model.registry().trainable_count();
    if trainable_count == 0 {
        return Err(Error::config("model has no trainable parameters"));
    }
    if dataset.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if dataset.n_classes > model.num_classes() {
        return Err(Error::config(format!(
            "dataset has {} classes but the model predicts {}",
            dataset.n_classes,
            model.num_classes()
        )));
    }
    let mut optimizer = Optimizer::new(opt.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let record = |model: &M, epoch: usize, step: usize| -> Result<EpochRecord> {
        Ok(EpochRecord {
            epoch,
            step,
            train: evaluate_report(model, dataset)?,
            eval: eval_set.map(|e| evaluate_report(model, e)).transpose()?,
        })
    };

    let mut history = TrainHistory {
        step_losses: Vec::with_capacity(opt.steps),
        epochs: vec![record(model, 0, 0)?],
        trainable_count,
        wall_seconds: 0.0,
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch = 0;
    let mut step = 0;
    while step < opt.steps {
        order.shuffle(&mut rng);
        for batch in order.chunks(opt.batch_size) {
            if step == opt.steps {
                break;
            }
            let (x, y) = dataset.batch(batch)?;
            let tape = Tape::new();
            let bound = model.registry().bind(&tape);
            let loss = model.forward(&tape, &bound, &x)?.cross_entropy(&y)?;
            history.step_losses.push(loss.item());
            tape.backward(loss)?;
            let registry = model.registry_mut();
            registry.collect_grads(&tape, &bound);
            optimizer.step(registry);
            registry.zero_grads();
            step += 1;
            if opt.eval_every > 0 && step % opt.eval_every == 0 && step < opt.steps {
                history.epochs.push(record(model, epoch, step)?);
            }
        }
        epoch += 1;
        if history.epochs.last().map(|r| r.step) != Some(step) {
            history.epochs.push(record(model, epoch, step)?);
        } else if let Some(last) = history.epochs.last_mut() {
            last.epoch = epoch;
        }
    }
    history.wall_seconds = started.elapsed().as_secs_f64();
    Ok(history)
}
