//! Evaluation and activation dumps. Inference is the image branch with main
//! heads only; the prediction sums every main head's logits.

use std::path::Path;

use crate::error::{CsqaError, Result};
use crate::harness::checkpoint;
use crate::harness::data::{load_directory, LabeledSet};
use crate::model::CsqaModel;
use crate::tensor::Graph;

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Top-1 accuracy of each main head on its own (A stages then fusion).
    pub per_head_accuracy: Vec<f64>,
    pub samples: usize,
}

pub fn evaluate(model: &mut CsqaModel, set: &LabeledSet, batch_size: usize) -> Result<EvalReport> {
    if set.resolution != model.cfg.backbone.resolution {
        return Err(CsqaError::Usage(format!(
            "dataset resolution {} does not match checkpoint resolution {}",
            set.resolution,
            model.cfg.backbone.resolution
        )));
    }
    if set.classes != model.cfg.classes {
        return Err(CsqaError::Usage(format!(
            "dataset has {} classes, checkpoint expects {}",
            set.classes, model.cfg.classes
        )));
    }
    let r = set.resolution;
    let mut correct = 0usize;
    let mut head_correct: Vec<usize> = Vec::new();
    let mut seen = 0usize;
    for chunk in set.samples.chunks(batch_size.max(1)) {
        let batch = chunk.len();
        let mut pixels = Vec::with_capacity(batch * 3 * r * r);
        let mut labels = Vec::with_capacity(batch);
        for s in chunk {
            pixels.extend_from_slice(&s.pixels);
            labels.push(s.label);
        }
        let mut g = Graph::new();
        let images = g.leaf(pixels, &[batch, 3, r, r])?;
        let out = model.forward_eval(&mut g, images)?;
        if head_correct.is_empty() {
            head_correct = vec![0; out.per_head.len()];
        }
        let preds = model.top1(&out.ensemble);
        correct += preds.iter().zip(labels.iter()).filter(|(p, l)| p == l).count();
        for (h, logits) in out.per_head.iter().enumerate() {
            let hp = model.top1(logits);
            head_correct[h] += hp.iter().zip(labels.iter()).filter(|(p, l)| p == l).count();
        }
        seen += batch;
    }
    Ok(EvalReport {
        accuracy: correct as f64 / seen as f64,
        per_head_accuracy: head_correct.iter().map(|c| *c as f64 / seen as f64).collect(),
        samples: seen,
    })
}

/// Load a checkpoint and evaluate it on a directory dataset.
pub fn evaluate_checkpoint(ckpt: &Path, data_dir: &Path, batch_size: usize) -> Result<EvalReport> {
    let (_cfg, mut model, _, _, _) = checkpoint::restore(ckpt)?;
    let set = load_directory(data_dir)?;
    evaluate(&mut model, &set, batch_size)
}

/// Per-image, per-stage channel-mean activation grids as plain text matrices
/// (row-major, space-separated), one file per (image, stage).
pub fn dump_heatmaps(model: &mut CsqaModel, set: &LabeledSet, out_dir: &Path) -> Result<usize> {
    if set.resolution != model.cfg.backbone.resolution {
        return Err(CsqaError::Usage(format!(
            "dataset resolution {} does not match checkpoint resolution {}",
            set.resolution,
            model.cfg.backbone.resolution
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CsqaError::io(out_dir.display().to_string(), e))?;
    let r = set.resolution;
    let mut written = 0usize;
    for (idx, sample) in set.samples.iter().enumerate() {
        let mut g = Graph::new();
        let image = g.leaf(sample.pixels.clone(), &[1, 3, r, r])?;
        let maps = model.backbone.forward_stages(&mut g, &mut model.store, image, false)?;
        for (s, map) in maps.iter().enumerate() {
            let shape = g.shape(*map).to_vec();
            let (c, h, w) = (shape[1], shape[2], shape[3]);
            let data = g.data(*map);
            let mut text = String::new();
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += data[(ch * h + y) * w + x];
                    }
                    if x > 0 {
                        text.push(' ');
                    }
                    text.push_str(&format!("{}", acc / c as f64));
                }
                text.push('\n');
            }
            let path = out_dir.join(format!("img{idx:04}_stage{}.txt", s + 1));
            std::fs::write(&path, text).map_err(|e| CsqaError::io(path.display().to_string(), e))?;
            written += 1;
        }
    }
    Ok(written)
}

pub fn dump_heatmaps_checkpoint(ckpt: &Path, data_dir: &Path, out_dir: &Path) -> Result<usize> {
    let (_cfg, mut model, _, _, _) = checkpoint::restore(ckpt)?;
    let set = load_directory(data_dir)?;
    dump_heatmaps(&mut model, &set, out_dir)
}
