//! The training loop: per step, image forward, navigation, part forward,
//! total loss, backward, one main-optimizer step and one auxiliary step.
//! Auxiliary re-initialization is consulted at the top of every epoch, and
//! metrics append per step. Everything is a pure function of the seed.

use std::path::PathBuf;

use crate::error::{CsqaError, Result};
use crate::harness::checkpoint;
use crate::harness::config::{DataKind, RunConfig};
use crate::harness::data::{augment, generate_synthetic, load_directory, shuffle_order, LabeledSet};
use crate::harness::metrics::MetricsWriter;
use crate::harness::optimizer::{learning_rate, Sgd};
use crate::model::CsqaModel;
use crate::navigator::write_proposals;
use crate::tensor::{Graph, ParamKind};

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub per_epoch_loss: Vec<f64>,
    pub per_epoch_accuracy: Vec<f64>,
    pub final_train_accuracy: f64,
    pub reinit_epochs: Vec<usize>,
    /// Held-out split carried alongside synthetic training data.
    pub test_set: Option<LabeledSet>,
}

pub fn train(cfg: &RunConfig) -> Result<(TrainOutcome, CsqaModel)> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CsqaError::io(cfg.out_dir.display().to_string(), e))?;

    let (train_set, test_set) = match cfg.data.kind {
        DataKind::Synthetic => {
            let d = generate_synthetic(&cfg.data, cfg.seed)?;
            (d.train, Some(d.test))
        }
        DataKind::Directory => {
            let path = cfg.data.path.as_ref().expect("validated");
            let set = load_directory(path)?;
            if set.resolution != cfg.data.resolution {
                return Err(CsqaError::Usage(format!(
                    "dataset resolution {} does not match configured {}",
                    set.resolution, cfg.data.resolution
                )));
            }
            if set.classes != cfg.model.classes {
                return Err(CsqaError::Usage(format!(
                    "dataset has {} classes, model expects {}",
                    set.classes, cfg.model.classes
                )));
            }
            (set, None)
        }
    };

    let mut model = CsqaModel::new(cfg.model.clone(), cfg.seed)?;
    let mut main_opt = Sgd::new(ParamKind::Main);
    let mut aux_opt = Sgd::new(ParamKind::Aux);
    let mut metrics = MetricsWriter::create(&cfg.out_dir.join("metrics.txt"))?;
    let mut proposals_file = if cfg.model.navigator.dump_proposals {
        let p = cfg.out_dir.join("proposals.txt");
        Some(std::fs::File::create(&p).map_err(|e| CsqaError::io(p.display().to_string(), e))?)
    } else {
        None
    };

    let r = cfg.data.resolution;
    let n_samples = train_set.samples.len();
    let mut per_epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut per_epoch_accuracy = Vec::with_capacity(cfg.epochs);
    let mut reinit_epochs = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg.optimizer.lr, epoch, cfg.epochs, cfg.optimizer.warmup_epochs);
        let touched = model.maybe_reinit_aux(epoch);
        if !touched.is_empty() {
            aux_opt.clear(&touched);
            reinit_epochs.push(epoch);
            metrics.record(epoch, 0, "train", "-", "aux_reinit", 1)?;
        }
        metrics.record(epoch, 0, "train", "-", "lr", lr)?;

        let order = shuffle_order(n_samples, cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (step, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = batch_idx.len();
            let mut pixels = Vec::with_capacity(batch * 3 * r * r);
            let mut labels = Vec::with_capacity(batch);
            for &i in batch_idx {
                let s = &train_set.samples[i];
                if cfg.data.augment {
                    pixels.extend(augment(s, r, cfg.seed, epoch, i));
                } else {
                    pixels.extend_from_slice(&s.pixels);
                }
                labels.push(s.label);
            }
            let mut g = Graph::new();
            let images = g.leaf(pixels, &[batch, 3, r, r])?;
            let out = model
                .forward_train(&mut g, images, &labels)
                .map_err(nan_diagnostic)?;
            g.backward(out.loss).map_err(nan_diagnostic)?;
            main_opt.step(&mut model.store, &g, lr, cfg.optimizer.momentum, cfg.optimizer.weight_decay);
            aux_opt.step(&mut model.store, &g, cfg.optimizer.aux_lr, cfg.optimizer.aux_momentum, 0.0);

            epoch_loss += out.loss_value * batch as f64;
            let preds = model.top1(&out.ensemble);
            correct += preds.iter().zip(labels.iter()).filter(|(p, l)| p == l).count();
            seen += batch;

            metrics.record(epoch, step, "train", "-", "loss", out.loss_value)?;
            metrics.record(epoch, step, "train", "-", "loss_im", out.l_im)?;
            if let Some(lp) = out.l_part {
                metrics.record(epoch, step, "train", "-", "loss_part", lp)?;
            }
            if let Some(lr_) = out.l_rank {
                metrics.record(epoch, step, "train", "-", "loss_rank", lr_)?;
            }
            if cfg.qp_stream {
                for (scope, outcomes) in [("qp_im", &out.outcomes_im), ("qp_part", &out.outcomes_part)] {
                    for (h, head) in outcomes.iter().enumerate() {
                        let stage = model.qps[h].stage_index.to_string();
                        for o in head {
                            metrics.record(epoch, step, scope, &stage, "p", o.p)?;
                            metrics.record(epoch, step, scope, &stage, "q", o.q)?;
                            metrics.record(epoch, step, scope, &stage, "phi", o.phi)?;
                            metrics.record(epoch, step, scope, &stage, "region", o.region)?;
                        }
                    }
                }
            }
            if let (Some(f), Some(props)) = (&mut proposals_file, &out.proposals) {
                write_proposals(f, batch_idx, props).map_err(|e| CsqaError::io("proposals.txt", e))?;
            }
        }
        let steps = order.chunks(cfg.batch_size).count();
        let mean_loss = epoch_loss / seen as f64;
        let acc = correct as f64 / seen as f64;
        per_epoch_loss.push(mean_loss);
        per_epoch_accuracy.push(acc);
        metrics.record(epoch, steps, "train", "-", "epoch_loss", mean_loss)?;
        metrics.record(epoch, steps, "train", "-", "train_acc", acc)?;
        log::info!("epoch {epoch}: loss {mean_loss:.4} acc {acc:.4} lr {lr:.5}");
    }
    metrics.flush()?;

    let checkpoint_path = cfg.out_dir.join("checkpoint.bin");
    checkpoint::save(&checkpoint_path, cfg, &model, &main_opt, &aux_opt, cfg.epochs)?;

    let final_train_accuracy = per_epoch_accuracy.last().copied().unwrap_or(0.0);
    Ok((
        TrainOutcome {
            checkpoint_path,
            per_epoch_loss,
            per_epoch_accuracy,
            final_train_accuracy,
            reinit_epochs,
            test_set,
        },
        model,
    ))
}

fn nan_diagnostic(e: CsqaError) -> CsqaError {
    match e {
        CsqaError::NonFinite { op, node, shape } => CsqaError::Train(format!(
            "non-finite loss: first non-finite tensor produced by `{op}` (node {node}, shape {shape:?})"
        )),
        other => other,
    }
}
