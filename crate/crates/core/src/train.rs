//! The training loop: batch-size-1 Adam over shuffled epochs, validation per epoch,
//! periodic checkpoints and a line-oriented report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{evaluate, MetricReport, DEFAULT_THRESHOLDS};
use crate::model::Model;
use crate::optim::{clip_grad_norm, Adam};
use crate::synth::GroundedSample;

pub const REPORT_HEADER: &str = "epoch,step,lr,loss,val_mIoU,val_R@0.3,val_R@0.5,val_R@0.7";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoints go here every `checkpoint_every` steps when both are set.
    pub checkpoint_dir: Option<PathBuf>,
    /// Print one line per report record to stderr.
    pub verbose: bool,
}

/// One report line. Epoch 0 describes the untrained model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's steps (over the whole training set for epoch 0).
    pub loss: f64,
    pub val: Option<MetricReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingReport {
    pub records: Vec<TrainingRecord>,
    /// Loss of every individual step, in order.
    pub step_losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainingReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.records {
            let _ = write!(out, "{},{},{:.6e},{:.6}", r.epoch, r.step, r.lr, r.loss);
            match &r.val {
                Some(v) => {
                    let _ = write!(out, ",{:.6}", v.miou);
                    for &mu in &DEFAULT_THRESHOLDS {
                        let _ = write!(out, ",{:.6}", v.recall_at(mu).unwrap_or(f64::NAN));
                    }
                }
                None => out.push_str(",-,-,-,-"),
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Forward + backward on one sample; gradients are added into the model's store.
/// Returns the loss value. A non-finite loss or gradient aborts with the name of the
/// first non-finite tensor in the graph.
pub fn accumulate_gradients(model: &mut Model, sample: &GroundedSample) -> Result<f64> {
    let mut g = Graph::new();
    let parts = model.loss(&mut g, sample)?;
    let loss = g.value(parts.total).item();
    if !loss.is_finite() {
        return Err(non_finite(&g, model, format!("loss is {loss}")));
    }
    g.backward(parts.total)?;
    g.accumulate_param_grads(&mut model.params);
    if !model.params.grad_norm().is_finite() {
        return Err(non_finite(&g, model, "gradient norm is not finite".into()));
    }
    Ok(loss)
}

fn non_finite(g: &Graph, model: &Model, what: String) -> Error {
    let culprit = g
        .first_non_finite(Some(&model.params))
        .unwrap_or_else(|| "no individual tensor".into());
    Error::NonFinite(format!("{what}; first non-finite tensor: {culprit}"))
}

pub fn sample_loss(model: &Model, sample: &GroundedSample) -> Result<f64> {
    let mut g = Graph::new();
    let parts = model.loss(&mut g, sample)?;
    Ok(g.value(parts.total).item())
}

/// Visit order for one epoch: a permutation drawn from a stream keyed by (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7368_7566_0000_0000 | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains for `model.config.steps` optimizer steps. An epoch is one pass over
/// `train`; a trailing partial epoch still gets a record.
pub fn train(model: &mut Model, train: &[GroundedSample], val: &[GroundedSample], opts: &TrainOptions) -> Result<TrainingReport> {
    model.config.validate()?;
    let cfg = model.config.clone();
    if train.is_empty() && cfg.steps > 0 {
        return Err(Error::Input("training set is empty".into()));
    }
    let validate = |m: &Model| -> Result<Option<MetricReport>> {
        if val.is_empty() {
            Ok(None)
        } else {
            Ok(Some(evaluate(m, val, &DEFAULT_THRESHOLDS)?.report))
        }
    };
    let mut report = TrainingReport::default();
    let initial = if train.is_empty() {
        f64::NAN
    } else {
        train.iter().map(|s| sample_loss(model, s)).sum::<Result<f64>>()? / train.len() as f64
    };
    let mut adam = Adam::new(&model.params, cfg.lr, cfg.steps);
    report.records.push(TrainingRecord {
        epoch: 0,
        step: 0,
        lr: adam.current_lr(),
        loss: initial,
        val: validate(model)?,
    });
    log(opts, report.records.last());

    model.params.zero_grad();
    let mut step = 0;
    let mut epoch = 0;
    while step < cfg.steps {
        epoch += 1;
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for &i in &order {
            if step == cfg.steps {
                break;
            }
            let loss = accumulate_gradients(model, &train[i])
                .map_err(|e| annotate(e, epoch, step + 1))?;
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut model.params, cfg.grad_clip);
            }
            adam.step(&mut model.params);
            step += 1;
            epoch_loss += loss;
            epoch_steps += 1;
            report.step_losses.push(loss);
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                if let Some(dir) = &opts.checkpoint_dir {
                    let path = dir.join(format!("step{step:06}.ckpt"));
                    save_checkpoint(&path, model)?;
                    report.checkpoints.push(path);
                }
            }
        }
        report.records.push(TrainingRecord {
            epoch,
            step,
            lr: adam.current_lr(),
            loss: epoch_loss / epoch_steps as f64,
            val: validate(model)?,
        });
        log(opts, report.records.last());
    }
    Ok(report)
}

fn annotate(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, step {step}: {m}")),
        other => other,
    }
}

fn log(opts: &TrainOptions, record: Option<&TrainingRecord>) {
    if let (true, Some(r)) = (opts.verbose, record) {
        let val = r.val.as_ref().map(|v| v.to_string()).unwrap_or_default();
        eprintln!("epoch {:>3} step {:>6} lr {:.2e} loss {:.4} {val}", r.epoch, r.step, r.lr, r.loss);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::query::Lexicon;
    use crate::synth::{generate_split, Split};

    fn small(steps: usize) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.d = 12;
        cfg.d_word = 8;
        cfg.heads = 2;
        cfg.late_blocks = 1;
        cfg.steps = steps;
        cfg.t_min = 12;
        cfg.t_max = 16;
        cfg.span_max = 6;
        cfg
    }

    fn data(cfg: &RunConfig, n: usize) -> Vec<GroundedSample> {
        generate_split(&cfg.gen_config(), &Lexicon::shipped(), Split::Train, n).unwrap()
    }

    #[test]
    fn zero_steps_gives_initial_record_only() {
        let cfg = small(0);
        let mut model = Model::new(&cfg).unwrap();
        let train_set = data(&cfg, 3);
        let report = train(&mut model, &train_set, &train_set[..1], &TrainOptions::default()).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.records[0].epoch, 0);
        assert!(report.records[0].val.is_some());
        assert_eq!(report.to_csv().lines().count(), 2);
    }

    #[test]
    fn epochs_and_partial_epochs() {
        let cfg = small(5);
        let mut model = Model::new(&cfg).unwrap();
        let report = train(&mut model, &data(&cfg, 2), &[], &TrainOptions::default()).unwrap();
        let steps: Vec<_> = report.records.iter().map(|r| (r.epoch, r.step)).collect();
        assert_eq!(steps, vec![(0, 0), (1, 2), (2, 4), (3, 5)]);
        assert_eq!(report.step_losses.len(), 5);
        assert!(report.to_csv().lines().nth(1).unwrap().ends_with(",-,-,-,-"));
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(10, 3, 1);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(10, 3, 1));
        assert_ne!(a, epoch_order(10, 3, 2));
    }

    #[test]
    fn non_finite_input_names_a_tensor() {
        let cfg = small(1);
        let mut model = Model::new(&cfg).unwrap();
        let mut bad = data(&cfg, 1);
        bad[0].video.data_mut()[0] = f64::NAN;
        let err = train(&mut model, &bad, &[], &TrainOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::NonFinite(_)), "{msg}");
        assert!(msg.contains("first non-finite tensor"), "{msg}");
    }

    #[test]
    fn checkpoints_at_cadence() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(4);
        cfg.checkpoint_every = 2;
        let mut model = Model::new(&cfg).unwrap();
        let opts = TrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            verbose: false,
        };
        let report = train(&mut model, &data(&cfg, 3), &[], &opts).unwrap();
        assert_eq!(report.checkpoints.len(), 2);
        assert!(report.checkpoints.iter().all(|p| p.exists()));
    }
}
