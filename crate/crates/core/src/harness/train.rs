use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{OptimizerState, ParamGrads, ParamStore, Tape};
use crate::blocks::DmpsModel;
use crate::error::{DmpsError, Result};
use crate::rng::{domain, stream_rng};
use crate::tasks::{count_decision, counting_batch, GaussianSampler, SetExample, Task};

use super::config::RunConfig;

/// One line of `metrics.jsonl`. Wall-clock time is kept out so the file is
/// byte-identical across runs with the same seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub train_loss: f64,
    pub monitor_loss: f64,
    pub monitor_accuracy: f64,
    pub learning_rate: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gamma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetPrediction {
    pub label: u32,
    /// Probability of label 1 (Gaussian) or Poisson rate (counting).
    pub output: f64,
    pub decision: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub predictions: Vec<SetPrediction>,
}

pub struct TrainOutcome {
    pub model: DmpsModel,
    pub params: ParamStore,
    pub metrics: Vec<MetricsRecord>,
    pub evaluation: Evaluation,
    pub elapsed_secs: f64,
}

/// Draws `count` labelled sets for the configured task. Gaussian draws are
/// balanced: the first half from `N(0, I)`, the rest from `N(0, Σ)`.
pub fn sample_sets(config: &RunConfig, count: usize, seed: u64, stream: u64, index: u64) -> Result<Vec<SetExample>> {
    let mut rng = stream_rng(seed, stream, index);
    Ok(match config.task {
        Task::Gaussian => GaussianSampler::new(config.gaussian.rho)?.batch(count, &mut rng),
        Task::Counting => counting_batch(&config.counting, count, &mut rng),
    })
}

/// Held-out sets used for the final accuracy of a run.
pub fn evaluation_sets(config: &RunConfig) -> Result<Vec<SetExample>> {
    sample_sets(config, config.training.eval_sets, config.seed, domain::EVAL, 0)
}

fn decide(task: Task, output: f64) -> u32 {
    match task {
        Task::Gaussian => u32::from(output >= 0.5),
        Task::Counting => count_decision(output).min(u32::MAX as u64) as u32,
    }
}

fn set_loss(task: Task, tape: &mut Tape<'_>, raw: crate::autodiff::NodeId, label: u32) -> Result<crate::autodiff::NodeId> {
    match task {
        Task::Gaussian => tape.bce_with_logit(raw, f64::from(label)),
        Task::Counting => tape.poisson_nll_log_rate(raw, u64::from(label)),
    }
}

/// Scores `sets` with frozen parameters.
pub fn evaluate(model: &DmpsModel, params: &ParamStore, task: Task, sets: &[SetExample]) -> Result<Evaluation> {
    if sets.is_empty() {
        return Err(DmpsError::config("evaluation needs at least one set"));
    }
    let mut correct = 0usize;
    let mut total_loss = 0.0;
    let mut predictions = Vec::with_capacity(sets.len());
    for example in sets {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let nodes = model.forward(&mut tape, &bound, &example.elements)?;
        let loss = set_loss(task, &mut tape, nodes.raw, example.label)?;
        total_loss += tape.value(loss).item();
        let output = tape.value(nodes.output).item();
        let decision = decide(task, output);
        correct += usize::from(decision == example.label);
        predictions.push(SetPrediction {
            label: example.label,
            output,
            decision,
        });
    }
    Ok(Evaluation {
        accuracy: correct as f64 / sets.len() as f64,
        mean_loss: total_loss / sets.len() as f64,
        predictions,
    })
}

/// Mean loss over `batch` and its gradient, accumulated set by set.
pub fn batch_gradient(
    model: &DmpsModel,
    params: &ParamStore,
    task: Task,
    batch: &[SetExample],
) -> Result<(f64, ParamGrads)> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = ParamGrads::zeros_like(params);
    let mut loss_sum = 0.0;
    for example in batch {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let nodes = model.forward(&mut tape, &bound, &example.elements)?;
        let loss = set_loss(task, &mut tape, nodes.raw, example.label)?;
        loss_sum += tape.value(loss).item();
        let grads = params.collect_grads(&bound, tape.backward(loss)?);
        total.accumulate(&grads, scale)?;
    }
    Ok((loss_sum * scale, total))
}

/// Parameters must stay finite and the kernel bandwidth must not underflow.
fn check_parameters(model: &DmpsModel, params: &ParamStore, step: usize) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, t)| !t.is_finite()) {
        return Err(DmpsError::NonFinite {
            step,
            detail: format!("parameter {name} is not finite"),
        });
    }
    if let Some(learner) = model.learner() {
        let sigma = learner.bandwidth(params);
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(DmpsError::NonFinite {
                step,
                detail: format!("kernel bandwidth left (0, inf): {sigma}"),
            });
        }
    }
    Ok(())
}

fn gammas(model: &DmpsModel, params: &ParamStore) -> Vec<f64> {
    let blocks = model.config().blocks.count;
    (0..blocks).filter_map(|t| model.gamma(params, t)).collect()
}

/// Trains from a fresh initialization. `observer` sees every metrics record
/// as it is produced.
pub fn train(config: &RunConfig, observer: &mut dyn FnMut(&MetricsRecord)) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let task = config.task;
    let mut init_rng = stream_rng(config.seed, domain::INIT, 0);
    let (model, mut params) = DmpsModel::init(&config.model, &mut init_rng)?;

    let adam = config.optimizer.adam();
    let plateau = config.optimizer.plateau();
    let mut state = OptimizerState::new(&params, config.optimizer.learning_rate)?;

    let all_eval = evaluation_sets(config)?;
    let monitor = &all_eval[..config.training.monitor_sets.min(all_eval.len())];
    let validation = if config.training.validation_sets > 0 {
        sample_sets(config, config.training.validation_sets, config.seed, domain::VALIDATION, 0)?
    } else {
        Vec::new()
    };

    let mut metrics = Vec::new();
    let mut log_loss = 0.0;
    let mut log_count = 0usize;
    let mut sched_loss = 0.0;
    let mut sched_count = 0usize;

    for step in 0..config.training.batches {
        let batch = sample_sets(config, config.training.batch_size, config.seed, domain::TRAIN, step as u64)?;
        let (loss, grads) = batch_gradient(&model, &params, task, &batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(DmpsError::NonFinite {
                step: step + 1,
                detail: format!("batch loss {loss}"),
            });
        }
        adam.step(&mut params, &grads, &mut state)?;
        check_parameters(&model, &params, step + 1)?;
        log_loss += loss;
        log_count += 1;
        sched_loss += loss;
        sched_count += 1;

        let done = step + 1;
        if let Some(rule) = &plateau {
            if done % config.optimizer.scheduler_interval == 0 {
                let metric = if validation.is_empty() {
                    sched_loss / sched_count as f64
                } else {
                    evaluate(&model, &params, task, &validation)?.mean_loss
                };
                rule.observe(&mut state, metric);
                sched_loss = 0.0;
                sched_count = 0;
            }
        }

        if done % config.training.log_interval == 0 || done == config.training.batches {
            let (monitor_loss, monitor_accuracy) = if monitor.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let e = evaluate(&model, &params, task, monitor)?;
                (e.mean_loss, e.accuracy)
            };
            let record = MetricsRecord {
                step: done,
                train_loss: log_loss / log_count as f64,
                monitor_loss,
                monitor_accuracy,
                learning_rate: state.learning_rate(),
                gamma: gammas(&model, &params),
            };
            observer(&record);
            metrics.push(record);
            log_loss = 0.0;
            log_count = 0;
        }
    }

    let evaluation = evaluate(&model, &params, task, &all_eval)?;
    Ok(TrainOutcome {
        model,
        params,
        metrics,
        evaluation,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: Task) -> RunConfig {
        let mut c = RunConfig::defaults(task);
        c.training.batches = 6;
        c.training.batch_size = 8;
        c.training.log_interval = 3;
        c.training.monitor_sets = 8;
        c.training.eval_sets = 16;
        c.optimizer.scheduler_interval = 2;
        c
    }

    #[test]
    fn training_is_deterministic() {
        for task in [Task::Gaussian, Task::Counting] {
            let a = train(&tiny(task), &mut |_| {}).unwrap();
            let b = train(&tiny(task), &mut |_| {}).unwrap();
            assert_eq!(a.metrics, b.metrics);
            assert_eq!(a.evaluation, b.evaluation);
            assert_eq!(a.metrics.len(), 2);
            assert!((0.0..=1.0).contains(&a.evaluation.accuracy));
        }
    }

    #[test]
    fn seeds_change_the_run() {
        let a = train(&tiny(Task::Gaussian), &mut |_| {}).unwrap();
        let mut c = tiny(Task::Gaussian);
        c.seed = 1;
        let b = train(&c, &mut |_| {}).unwrap();
        assert_ne!(a.metrics, b.metrics);
    }

    #[test]
    fn diverging_run_reports_non_finite() {
        let mut c = tiny(Task::Counting);
        c.optimizer.learning_rate = 1e12;
        c.training.batches = 50;
        match train(&c, &mut |_| {}) {
            Err(DmpsError::NonFinite { step, .. }) => assert!(step >= 1),
            other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.evaluation.accuracy)),
        }
    }
}
