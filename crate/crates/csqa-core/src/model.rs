//! The assembled network.
//!
//! Training runs the image branch (backbone → MLSQE → QP heads), then the
//! part branch (navigator → shared backbone over crops → tokens → MPMSCA →
//! the same QP heads), and sums the two losses plus an optional ranking
//! loss on the navigator scores. Inference runs the image branch only and
//! predicts with the sum of all main-head logits; the navigator and the
//! attention module are never constructed into the graph, which the
//! instrumentation counters make checkable.
//!
//! The MLSQE, navigator, and attention blocks can each be disabled to form
//! the ablation ladder; with MLSQE off a single plain classifier head on the
//! deepest stage serves both branches.

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{CsqaError, Result};
use crate::mlsqe::{heads_loss, Mlsqe, MlsqeConfig};
use crate::mpmsca::{AttentionConfig, Mpmsca};
use crate::navigator::{NavigatorConfig, PartNavigator, PartProposal};
use crate::qp::{max_softmax_rows, standard_ce_vec, QpClassifier, QpConfig, QpOutcome};
use crate::tensor::init::Init;
use crate::tensor::{Graph, ParamId, ParamKind, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    pub backbone: BackboneConfig,
    pub mlsqe: MlsqeConfig,
    pub qp: QpConfig,
    pub navigator: NavigatorConfig,
    pub attention: AttentionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CsqaError::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        self.backbone.validate()?;
        self.mlsqe.validate(self.backbone.stages)?;
        self.qp.validate()?;
        self.navigator.validate()?;
        if self.navigator.enabled {
            let deep = self.backbone.stage_extent(self.backbone.resolution, self.backbone.stages);
            if self.navigator.grid_resolutions[0] != deep {
                return Err(CsqaError::Config(format!(
                    "first grid resolution {} must match the deepest stage extent {}",
                    self.navigator.grid_resolutions[0], deep
                )));
            }
            let half = self.backbone.resolution / 2;
            if half % (1 << (self.backbone.stages + 1)) != 0 {
                return Err(CsqaError::Config(format!(
                    "part resolution {} does not stride through {} stages",
                    half, self.backbone.stages
                )));
            }
        }
        if self.attention.enabled {
            if !self.navigator.enabled || !self.mlsqe.enabled {
                return Err(CsqaError::Config(
                    "attention requires both the navigator and the multi-level evaluation".into(),
                ));
            }
            self.attention
                .validate(self.mlsqe.proj_channels, self.mlsqe.stages_used * self.navigator.parts)?;
        }
        Ok(())
    }

    /// Small configuration for desk-scale runs and tests.
    pub fn desk_default(classes: usize) -> Self {
        ModelConfig {
            classes,
            backbone: BackboneConfig { stages: 3, channels: vec![16, 32, 64], blocks: 1, resolution: 64 },
            mlsqe: MlsqeConfig {
                enabled: true,
                stages_used: 3,
                proj_channels: 64,
                alpha: vec![0.7, 0.8, 0.9, 1.0],
                eca_kernel: 3,
            },
            qp: QpConfig { lambda: 2.0, reinit_period: 2 },
            navigator: NavigatorConfig {
                enabled: true,
                levels: 3,
                anchor_scales: vec![16, 32, 48],
                grid_resolutions: vec![4, 2, 1],
                parts: 4,
                iou_threshold: 0.25,
                ranking_loss: true,
                dump_proposals: false,
            },
            attention: AttentionConfig {
                enabled: true,
                heads: 16,
                top_v: 3,
                beta_init: 0.5,
                mask_mode: crate::mpmsca::MaskMode::Exclude,
                dwconv_axis: crate::mpmsca::DwConvAxis::Channel,
            },
        }
    }

    /// The full-scale operating point: 448×448 inputs, A = 3 of S = 4
    /// stages, C* = 1024, α ∈ {0.7, 0.8, 0.9, 1.0}, δ = λ = 2, M = 3 with
    /// anchors {48, 96, 192} on grids {14, 7, 4}, N = 4 parts, H = 16 heads,
    /// top-v = 3. Not runnable at desk scale; kept as the reference point.
    pub fn paper_default(classes: usize) -> Self {
        ModelConfig {
            classes,
            backbone: BackboneConfig {
                stages: 4,
                channels: vec![256, 512, 1024, 2048],
                blocks: 1,
                resolution: 448,
            },
            mlsqe: MlsqeConfig {
                enabled: true,
                stages_used: 3,
                proj_channels: 1024,
                alpha: vec![0.7, 0.8, 0.9, 1.0],
                eca_kernel: 3,
            },
            qp: QpConfig { lambda: 2.0, reinit_period: 2 },
            navigator: NavigatorConfig {
                enabled: true,
                levels: 3,
                anchor_scales: vec![48, 96, 192],
                grid_resolutions: vec![14, 7, 4],
                parts: 4,
                iou_threshold: 0.25,
                ranking_loss: true,
                dump_proposals: false,
            },
            attention: AttentionConfig {
                enabled: true,
                heads: 16,
                top_v: 3,
                beta_init: 0.5,
                mask_mode: crate::mpmsca::MaskMode::Exclude,
                dwconv_axis: crate::mpmsca::DwConvAxis::Channel,
            },
        }
    }
}

/// Forward counters for the inference-pruning check.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub navigator_forwards: u64,
    pub mpmsca_forwards: u64,
}

pub struct TrainStepOutput {
    /// Total loss on the tape.
    pub loss: Tensor,
    pub loss_value: f64,
    pub l_im: f64,
    pub l_part: Option<f64>,
    pub l_rank: Option<f64>,
    /// Ensemble (sum of main heads) logits, row-major [B, classes].
    pub ensemble: Vec<f64>,
    pub outcomes_im: Vec<Vec<QpOutcome>>,
    pub outcomes_part: Vec<Vec<QpOutcome>>,
    pub proposals: Option<Vec<Vec<PartProposal>>>,
}

pub struct EvalOutput {
    /// Ensemble logits, row-major [B, classes].
    pub ensemble: Vec<f64>,
    /// Per-head logits, each row-major [B, classes].
    pub per_head: Vec<Vec<f64>>,
}

pub struct CsqaModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub mlsqe: Option<Mlsqe>,
    pub qps: Vec<QpClassifier>,
    pub navigator: Option<PartNavigator>,
    pub mpmsca: Option<Mpmsca>,
    /// Plain classifier head on the deepest stage when MLSQE is disabled.
    baseline_head: Option<(ParamId, ParamId)>,
    pub counters: Counters,
}

impl CsqaModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let backbone = Backbone::new(&mut store, cfg.backbone.clone())?;
        let deep_channels = *cfg.backbone.channels.last().unwrap();

        let (mlsqe, qps, baseline_head) = if cfg.mlsqe.enabled {
            let m = Mlsqe::new(&mut store, cfg.mlsqe.clone(), &cfg.backbone.channels)?;
            let a = cfg.mlsqe.stages_used;
            let mut qps = Vec::with_capacity(a + 1);
            for h in 0..=a {
                let (dim, stage_index) = if h < a {
                    (cfg.mlsqe.proj_channels, cfg.backbone.stages - a + h + 1)
                } else {
                    (a * cfg.mlsqe.proj_channels, cfg.backbone.stages + 1)
                };
                qps.push(QpClassifier::new(
                    &mut store,
                    &format!("qp.s{stage_index}"),
                    stage_index,
                    dim,
                    cfg.classes,
                    cfg.mlsqe.alpha[h],
                )?);
            }
            (Some(m), qps, None)
        } else {
            let w = store.add(
                "baseline.head.w",
                &[deep_channels, cfg.classes],
                Init::FanInUniform { fan_in: deep_channels },
                ParamKind::Main,
            );
            let b = store.add("baseline.head.b", &[cfg.classes], Init::Zeros, ParamKind::Main);
            (None, Vec::new(), Some((w, b)))
        };

        let navigator = if cfg.navigator.enabled {
            Some(PartNavigator::new(
                &mut store,
                cfg.navigator.clone(),
                deep_channels,
                cfg.backbone.resolution,
            )?)
        } else {
            None
        };

        let mpmsca = if cfg.attention.enabled {
            Some(Mpmsca::new(
                &mut store,
                cfg.attention.clone(),
                cfg.mlsqe.stages_used,
                cfg.navigator.parts,
                cfg.mlsqe.proj_channels,
            )?)
        } else {
            None
        };

        Ok(CsqaModel {
            cfg,
            store,
            backbone,
            mlsqe,
            qps,
            navigator,
            mpmsca,
            baseline_head,
            counters: Counters::default(),
        })
    }

    /// Softmax probability of the true class under the fusion (or baseline)
    /// main head, computed outside the graph — the detached confidence the
    /// ranking loss orders parts by.
    fn detached_confidence(&self, feature: &[f64], head_w: ParamId, head_b: ParamId, label: usize) -> f64 {
        let w = self.store.data(head_w);
        let b = self.store.data(head_b);
        let c = self.cfg.classes;
        debug_assert_eq!(feature.len() * c, w.len());
        let mut logits = vec![0.0; c];
        for (j, l) in logits.iter_mut().enumerate() {
            let mut acc = b[j];
            for (i, f) in feature.iter().enumerate() {
                acc += f * w[i * c + j];
            }
            *l = acc;
        }
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps[label] / sum
    }

    /// Mean over parts of each stage's token block, per image: the part
    /// branch without attention.
    fn averaged_part_vectors(
        &self,
        g: &mut Graph,
        stage_tokens: &[Tensor],
        batch: usize,
        parts: usize,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        let mut stage_vectors = Vec::with_capacity(stage_tokens.len());
        for &t in stage_tokens {
            let width = g.shape(t)[1];
            let mut rows = Vec::with_capacity(batch);
            for b in 0..batch {
                let block = g.narrow(t, 0, b * parts, parts)?;
                let sum = g.sum_axis(block, 0)?;
                let mean = g.scale(sum, 1.0 / parts as f64)?;
                rows.push(g.reshape(mean, &[1, width])?);
            }
            stage_vectors.push(g.concat(&rows, 0)?);
        }
        let fusion = g.concat(&stage_vectors, 1)?;
        Ok((stage_vectors, fusion))
    }

    /// One training forward. `images` must be [B, 3, R, R].
    pub fn forward_train(&mut self, g: &mut Graph, images: Tensor, labels: &[usize]) -> Result<TrainStepOutput> {
        let batch = g.shape(images)[0];
        if labels.len() != batch {
            return Err(CsqaError::Usage(format!("{} labels for batch {}", labels.len(), batch)));
        }
        let lambda = self.cfg.qp.lambda;
        let pyramid = self.backbone.forward_stages(g, &mut self.store, images, true)?;
        let deepest = *pyramid.last().unwrap();

        // image branch
        let (im_loss, head_logits, outcomes_im, fusion) = if let Some(mlsqe) = &self.mlsqe {
            let out = mlsqe.image_branch_loss(g, &mut self.store, &pyramid, labels, &self.qps, lambda, true)?;
            (out.loss, out.head_logits, out.outcomes, Some(out.fusion))
        } else {
            let (w, b) = self.baseline_head.expect("baseline head when mlsqe disabled");
            let pooled = g.max_pool_global(deepest)?;
            let wt = g.bind(&self.store, w)?;
            let bt = g.bind(&self.store, b)?;
            let logits = g.linear(pooled, wt, bt)?;
            let ce = standard_ce_vec(g, logits, labels)?;
            let loss = g.mean_all(ce)?;
            (loss, vec![logits], Vec::new(), None)
        };
        let l_im = g.data(im_loss)[0];
        let mut total = im_loss;

        // part branch
        let mut l_part = None;
        let mut l_rank = None;
        let mut outcomes_part = Vec::new();
        let mut proposals = None;
        if let Some(nav) = &self.navigator {
            self.counters.navigator_forwards += 1;
            let nav_out = nav.navigate(g, &self.store, images, deepest)?;
            let part_pyramid = self.backbone.forward_stages(g, &mut self.store, nav_out.part_batch, true)?;
            let parts = self.cfg.navigator.parts;

            // per-part confidences for the ranking loss, detached
            let mut confidences: Vec<Vec<f64>> = Vec::with_capacity(batch);

            if let Some(mlsqe) = &self.mlsqe {
                let mut stage_tokens = Vec::with_capacity(mlsqe.used_stages().len());
                for &st in mlsqe.used_stages() {
                    stage_tokens.push(mlsqe.project_stage_gap(g, &mut self.store, part_pyramid[st], st, true)?);
                }
                let fusion_head = self.qps.last().expect("fusion head");
                let [fw, fb] = fusion_head.main_params();
                let (stage_vectors, part_fusion) = if let Some(mp) = &self.mpmsca {
                    self.counters.mpmsca_forwards += 1;
                    let out = mp.forward(g, &self.store, &stage_tokens, fusion.expect("fusion"), batch)?;
                    for (b, feats) in out.part_features.iter().enumerate() {
                        confidences.push(
                            feats.iter().map(|f| self.detached_confidence(f, fw, fb, labels[b])).collect(),
                        );
                    }
                    (out.stage_vectors, out.fusion)
                } else {
                    // no attention: per-part features are the raw stage tokens
                    let cstar = self.cfg.mlsqe.proj_channels;
                    for b in 0..batch {
                        let mut feats = vec![Vec::with_capacity(stage_tokens.len() * cstar); parts];
                        for &t in &stage_tokens {
                            let data = g.data(t);
                            for (p, feat) in feats.iter_mut().enumerate() {
                                let row = b * parts + p;
                                feat.extend_from_slice(&data[row * cstar..(row + 1) * cstar]);
                            }
                        }
                        confidences
                            .push(feats.iter().map(|f| self.detached_confidence(f, fw, fb, labels[b])).collect());
                    }
                    self.averaged_part_vectors(g, &stage_tokens, batch, parts)?
                };
                let mut features = stage_vectors;
                features.push(part_fusion);
                let part = heads_loss(g, &self.store, &features, labels, &self.qps, lambda)?;
                l_part = Some(g.data(part.loss)[0]);
                outcomes_part = part.outcomes;
                total = g.add(total, part.loss)?;
            } else {
                // baseline classifier over the part crops, shared with the image branch
                let (w, b) = self.baseline_head.expect("baseline head");
                let deepest_parts = *part_pyramid.last().unwrap();
                let pooled = g.max_pool_global(deepest_parts)?;
                let wt = g.bind(&self.store, w)?;
                let bt = g.bind(&self.store, b)?;
                let logits = g.linear(pooled, wt, bt)?;
                let part_labels: Vec<usize> = labels
                    .iter()
                    .flat_map(|&l| std::iter::repeat(l).take(parts))
                    .collect();
                let ce = standard_ce_vec(g, logits, &part_labels)?;
                let loss = g.mean_all(ce)?;
                l_part = Some(g.data(loss)[0]);
                total = g.add(total, loss)?;
                let pooled_data = g.data(pooled).to_vec();
                let width = pooled_data.len() / (batch * parts);
                for bi in 0..batch {
                    let mut conf = Vec::with_capacity(parts);
                    for p in 0..parts {
                        let row = bi * parts + p;
                        conf.push(self.detached_confidence(
                            &pooled_data[row * width..(row + 1) * width],
                            w,
                            b,
                            labels[bi],
                        ));
                    }
                    confidences.push(conf);
                }
            }

            if self.cfg.navigator.ranking_loss && parts >= 2 {
                let mut acc: Option<Tensor> = None;
                for b in 0..batch {
                    let r = nav.ranking_loss(g, nav_out.scores, b, &nav_out.selected_indices[b], &confidences[b])?;
                    acc = Some(match acc {
                        None => r,
                        Some(a) => g.add(a, r)?,
                    });
                }
                let rank = g.scale(acc.expect("batch nonempty"), 1.0 / batch as f64)?;
                l_rank = Some(g.data(rank)[0]);
                total = g.add(total, rank)?;
            }
            proposals = Some(nav_out.proposals);
        }

        // ensemble logits: sum of all main heads
        let classes = self.cfg.classes;
        let mut ensemble = vec![0.0; batch * classes];
        for h in &head_logits {
            for (e, v) in ensemble.iter_mut().zip(g.data(*h).iter()) {
                *e += v;
            }
        }
        Ok(TrainStepOutput {
            loss: total,
            loss_value: g.data(total)[0],
            l_im,
            l_part,
            l_rank,
            ensemble,
            outcomes_im,
            outcomes_part,
            proposals,
        })
    }

    /// Inference: image branch only, main heads only, running statistics.
    pub fn forward_eval(&mut self, g: &mut Graph, images: Tensor) -> Result<EvalOutput> {
        let pyramid = self.backbone.forward_stages(g, &mut self.store, images, false)?;
        let head_logits = if let Some(mlsqe) = &self.mlsqe {
            mlsqe.main_head_logits(g, &mut self.store, &pyramid, &self.qps)?
        } else {
            let (w, b) = self.baseline_head.expect("baseline head");
            let pooled = g.max_pool_global(*pyramid.last().unwrap())?;
            let wt = g.bind(&self.store, w)?;
            let bt = g.bind(&self.store, b)?;
            vec![g.linear(pooled, wt, bt)?]
        };
        let mut per_head = Vec::with_capacity(head_logits.len());
        let n = g.numel(head_logits[0]);
        let mut ensemble = vec![0.0; n];
        for h in head_logits {
            let data = g.data(h).to_vec();
            for (e, v) in ensemble.iter_mut().zip(data.iter()) {
                *e += v;
            }
            per_head.push(data);
        }
        Ok(EvalOutput { ensemble, per_head })
    }

    /// Auxiliary re-initialization sweep at the start of an epoch; returns
    /// the re-drawn parameter ids (empty when the epoch is not a multiple of
    /// δ). The caller clears the auxiliary optimizer state for them.
    pub fn maybe_reinit_aux(&mut self, epoch: usize) -> Vec<ParamId> {
        let period = self.cfg.qp.reinit_period;
        let mut out = Vec::new();
        for qp in &self.qps {
            if let Some(ids) = qp.maybe_reinit(epoch, period, &mut self.store) {
                out.extend_from_slice(&ids);
            }
        }
        out
    }

    /// Probe confidences of the main heads over logits, for metrics.
    pub fn top1(&self, logits: &[f64]) -> Vec<usize> {
        logits
            .chunks(self.cfg.classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect()
    }

    pub fn accuracy(&self, logits: &[f64], labels: &[usize]) -> f64 {
        let preds = self.top1(logits);
        let correct = preds.iter().zip(labels.iter()).filter(|(p, l)| p == l).count();
        correct as f64 / labels.len() as f64
    }

    /// Max softmax probabilities of ensemble rows (metrics only).
    pub fn ensemble_confidence(&self, logits: &[f64]) -> Vec<f64> {
        max_softmax_rows(logits, self.cfg.classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init::derive_rng;
    use rand::Rng;

    fn rand_images(b: usize, r: usize, seed: u64) -> Vec<f64> {
        let mut rng = derive_rng(seed, &[90]);
        (0..b * 3 * r * r).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk_default(4);
        cfg.mlsqe.proj_channels = 16;
        cfg.attention.heads = 4;
        cfg
    }

    #[test]
    fn paper_operating_point_constants() {
        let cfg = ModelConfig::paper_default(200);
        assert_eq!(cfg.backbone.resolution, 448);
        assert_eq!(cfg.mlsqe.stages_used, 3);
        assert_eq!(cfg.mlsqe.proj_channels, 1024);
        assert_eq!(cfg.mlsqe.alpha, vec![0.7, 0.8, 0.9, 1.0]);
        assert_eq!(cfg.qp.lambda, 2.0);
        assert_eq!(cfg.qp.reinit_period, 2);
        assert_eq!(cfg.navigator.levels, 3);
        assert_eq!(cfg.navigator.anchor_scales, vec![48, 96, 192]);
        assert_eq!(cfg.navigator.grid_resolutions, vec![14, 7, 4]);
        assert_eq!(cfg.navigator.parts, 4);
        assert_eq!(cfg.attention.heads, 16);
        assert_eq!(cfg.attention.top_v, 3);
        cfg.validate().unwrap();
    }

    #[test]
    fn train_forward_produces_finite_loss_and_counters() {
        let mut model = CsqaModel::new(small_cfg(), 42).unwrap();
        let mut g = Graph::new();
        let images = g.leaf(rand_images(2, 64, 1), &[2, 3, 64, 64]).unwrap();
        let out = model.forward_train(&mut g, images, &[0, 3]).unwrap();
        assert!(out.loss_value.is_finite());
        assert!(out.l_part.is_some());
        assert!(out.l_rank.is_some());
        assert_eq!(out.ensemble.len(), 2 * 4);
        assert_eq!(model.counters.navigator_forwards, 1);
        assert_eq!(model.counters.mpmsca_forwards, 1);
        assert_eq!(out.outcomes_im.len(), 4, "A + 1 heads");
        assert_eq!(out.outcomes_part.len(), 4);
        let props = out.proposals.unwrap();
        assert_eq!(props.len(), 2);
        assert_eq!(props[0].len(), 4);
    }

    #[test]
    fn eval_forward_never_touches_part_branch() {
        let mut model = CsqaModel::new(small_cfg(), 42).unwrap();
        let mut g = Graph::new();
        let images = g.leaf(rand_images(2, 64, 2), &[2, 3, 64, 64]).unwrap();
        let out = model.forward_eval(&mut g, images).unwrap();
        assert_eq!(model.counters, Counters::default());
        // ensemble equals the explicit per-head sum
        assert_eq!(out.per_head.len(), 4);
        for i in 0..out.ensemble.len() {
            let want: f64 = out.per_head.iter().map(|h| h[i]).sum();
            assert!((out.ensemble[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn train_backward_reaches_shared_backbone_and_pixels() {
        let mut model = CsqaModel::new(small_cfg(), 7).unwrap();
        let mut g = Graph::new();
        let images = g
            .leaf_with_grad(rand_images(2, 64, 3), &[2, 3, 64, 64], true)
            .unwrap();
        let out = model.forward_train(&mut g, images, &[1, 2]).unwrap();
        g.backward(out.loss).unwrap();
        let stem = model.store.id_by_name("backbone.stem.conv.w").unwrap();
        let stem_grad = g.param_grad(stem).expect("backbone must receive gradient");
        assert!(stem_grad.iter().any(|v| *v != 0.0));
        // gradient reaches the input pixels through both branches (crop path included)
        let img_grad = g.grad(images).expect("image pixels must receive gradient");
        assert!(img_grad.iter().any(|v| *v != 0.0));
        // attention blend parameter trains
        let beta = model.store.id_by_name("mpmsca.beta").unwrap();
        assert!(g.param_grad(beta).is_some());
    }

    #[test]
    fn ablation_configs_construct_and_run() {
        let mut cfg = small_cfg();
        cfg.attention.enabled = false;
        let mut model = CsqaModel::new(cfg, 9).unwrap();
        let mut g = Graph::new();
        let images = g.leaf(rand_images(1, 64, 4), &[1, 3, 64, 64]).unwrap();
        let out = model.forward_train(&mut g, images, &[2]).unwrap();
        assert!(out.loss_value.is_finite());
        assert_eq!(model.counters.mpmsca_forwards, 0);
        assert_eq!(model.counters.navigator_forwards, 1);

        let mut cfg = small_cfg();
        cfg.attention.enabled = false;
        cfg.mlsqe.enabled = false;
        let mut model = CsqaModel::new(cfg, 9).unwrap();
        let mut g = Graph::new();
        let images = g.leaf(rand_images(1, 64, 5), &[1, 3, 64, 64]).unwrap();
        let out = model.forward_train(&mut g, images, &[1]).unwrap();
        assert!(out.loss_value.is_finite());
        assert!(out.l_part.is_some(), "navigator-only still classifies parts");

        let mut cfg = small_cfg();
        cfg.attention.enabled = false;
        cfg.navigator.enabled = false;
        cfg.mlsqe.enabled = false;
        let mut model = CsqaModel::new(cfg, 9).unwrap();
        let mut g = Graph::new();
        let images = g.leaf(rand_images(1, 64, 6), &[1, 3, 64, 64]).unwrap();
        let out = model.forward_train(&mut g, images, &[0]).unwrap();
        assert!(out.loss_value.is_finite());
        assert!(out.l_part.is_none());
        assert_eq!(model.counters.navigator_forwards, 0);
    }

    #[test]
    fn attention_without_navigator_is_config_error() {
        let mut cfg = small_cfg();
        cfg.navigator.enabled = false;
        assert!(matches!(CsqaModel::new(cfg, 1), Err(CsqaError::Config(_))));
    }

    #[test]
    fn aux_reinit_sweep_touches_only_aux_heads() {
        let mut model = CsqaModel::new(small_cfg(), 11).unwrap();
        let main_ids: Vec<ParamId> = model.qps.iter().flat_map(|q| q.main_params()).collect();
        let before: Vec<Vec<f64>> = main_ids.iter().map(|id| model.store.data(*id).to_vec()).collect();
        assert!(model.maybe_reinit_aux(1).is_empty());
        let touched = model.maybe_reinit_aux(2);
        assert_eq!(touched.len(), 2 * model.qps.len());
        for (id, b) in main_ids.iter().zip(before.iter()) {
            assert_eq!(model.store.data(*id), &b[..]);
        }
    }

    #[test]
    fn fixed_seed_train_step_is_deterministic() {
        let run = || {
            let mut model = CsqaModel::new(small_cfg(), 123).unwrap();
            let mut g = Graph::new();
            let images = g.leaf(rand_images(2, 64, 7), &[2, 3, 64, 64]).unwrap();
            let out = model.forward_train(&mut g, images, &[0, 1]).unwrap();
            out.loss_value
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
