//! Part navigator: discriminative-region detection.
//!
//! A descending-scale conv pyramid is built from the deepest backbone map.
//! Adjacent levels exchange information through scale-aware enhancement (SAE)
//! gates, a 1×1 conv scores one square anchor per cell per level, greedy NMS
//! keeps the top N boxes, and the selected regions are cropped from the input
//! image and bilinearly resized to half the input resolution. Scores stay on
//! the tape so the pairwise ranking loss can reach the scoring convs; NMS
//! ranks themselves carry no gradient.

use crate::error::{CsqaError, Result};
use crate::tensor::init::Init;
use crate::tensor::{CropSpec, Graph, ParamId, ParamKind, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NavigatorConfig {
    pub enabled: bool,
    /// Pyramid levels M.
    pub levels: usize,
    /// Anchor side length per level, in input-image pixels.
    pub anchor_scales: Vec<usize>,
    /// Spatial extent of each pyramid level.
    pub grid_resolutions: Vec<usize>,
    /// N — parts kept per image.
    pub parts: usize,
    /// IoU threshold θ for suppression.
    pub iou_threshold: f64,
    /// Train the scoring convs with the pairwise ranking loss.
    pub ranking_loss: bool,
    /// Append selected proposals to a text dump during training.
    pub dump_proposals: bool,
}

impl NavigatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.levels == 0 {
            return Err(CsqaError::Config("navigator needs at least one level".into()));
        }
        if self.anchor_scales.len() != self.levels || self.grid_resolutions.len() != self.levels {
            return Err(CsqaError::Config(format!(
                "levels {} but {} anchor scales / {} grid resolutions",
                self.levels,
                self.anchor_scales.len(),
                self.grid_resolutions.len()
            )));
        }
        for w in self.grid_resolutions.windows(2) {
            let expect = (w[0].saturating_sub(1)) / 2 + 1; // stride-2 3x3 pad-1 arithmetic
            if w[1] != expect {
                return Err(CsqaError::Config(format!(
                    "grid {} cannot follow {} under stride-2 3x3 convs (want {})",
                    w[1], w[0], expect
                )));
            }
        }
        if *self.grid_resolutions.last().unwrap() == 0 {
            return Err(CsqaError::Config("pyramid resolution underflow".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(CsqaError::Config(format!("IoU threshold must be in (0,1), got {}", self.iou_threshold)));
        }
        let total = self.total_anchors();
        if self.parts == 0 || self.parts > total {
            return Err(CsqaError::Config(format!(
                "parts {} outside 1..={} (total anchors)",
                self.parts, total
            )));
        }
        Ok(())
    }

    pub fn total_anchors(&self) -> usize {
        self.grid_resolutions.iter().map(|g| g * g).sum()
    }
}

/// Axis-aligned pixel-space box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxF {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxF {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn iou(&self, other: &BoxF) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// A scored anchor box, clipped to the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartProposal {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
    pub anchor_index: usize,
}

impl PartProposal {
    pub fn boxf(&self) -> BoxF {
        BoxF { x0: self.x_min, y0: self.y_min, x1: self.x_max, y1: self.y_max }
    }
}

/// Square anchors, one per cell per level, centered on the cell's image-space
/// center and clipped to the image bounds. Flattening is level-major,
/// row-major within a level, matching the score layout.
pub fn anchor_boxes(cfg: &NavigatorConfig, resolution: usize) -> Vec<BoxF> {
    let r = resolution as f64;
    let mut out = Vec::with_capacity(cfg.total_anchors());
    for (level, &grid) in cfg.grid_resolutions.iter().enumerate() {
        let scale = cfg.anchor_scales[level] as f64;
        let cell = r / grid as f64;
        for row in 0..grid {
            for col in 0..grid {
                let cx = (col as f64 + 0.5) * cell;
                let cy = (row as f64 + 0.5) * cell;
                out.push(BoxF {
                    x0: (cx - scale / 2.0).max(0.0),
                    y0: (cy - scale / 2.0).max(0.0),
                    x1: (cx + scale / 2.0).min(r),
                    y1: (cy + scale / 2.0).min(r),
                });
            }
        }
    }
    out
}

/// Greedy NMS result.
#[derive(Debug, Clone)]
pub struct NmsOutcome {
    /// Selected proposals in descending score order.
    pub selected: Vec<PartProposal>,
    /// When fewer than N anchors survive suppression, the survivor count.
    pub shortfall: Option<usize>,
}

/// Greedy non-maximum suppression: repeatedly keep the highest-scoring
/// unsuppressed box and suppress everything with IoU strictly above θ
/// against it, until N boxes are kept or candidates run out. Score ties
/// break toward the lower anchor index.
pub fn nms_top_n(scores: &[f64], boxes: &[BoxF], theta: f64, n: usize) -> NmsOutcome {
    assert_eq!(scores.len(), boxes.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut suppressed = vec![false; scores.len()];
    let mut selected = Vec::with_capacity(n);
    for &idx in &order {
        if suppressed[idx] {
            continue;
        }
        selected.push(PartProposal {
            x_min: boxes[idx].x0,
            y_min: boxes[idx].y0,
            x_max: boxes[idx].x1,
            y_max: boxes[idx].y1,
            score: scores[idx],
            anchor_index: idx,
        });
        if selected.len() == n {
            return NmsOutcome { selected, shortfall: None };
        }
        for &other in &order {
            if !suppressed[other] && other != idx && boxes[idx].iou(&boxes[other]) > theta {
                suppressed[other] = true;
            }
        }
    }
    let count = selected.len();
    NmsOutcome { selected, shortfall: Some(count) }
}

#[derive(Debug, Clone)]
struct ConvRelu {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl ConvRelu {
    fn new(store: &mut ParamStore, name: &str, c: usize, stride: usize) -> Self {
        let w = store.add(
            format!("{name}.w"),
            &[c, c, 3, 3],
            Init::FanInUniform { fan_in: c * 9 },
            ParamKind::Main,
        );
        let b = store.add(format!("{name}.b"), &[c], Init::Zeros, ParamKind::Main);
        ConvRelu { w, b, stride }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Tensor) -> Result<Tensor> {
        let w = g.bind(store, self.w)?;
        let b = g.bind(store, self.b)?;
        let y = g.conv2d(x, w, Some(b), self.stride, 1, 1)?;
        g.relu(y)
    }
}

/// Scale-aware enhancement between two adjacent levels. One Ω (1×1 conv)
/// produces both the spatial term on f_m and the channel gate from the
/// pooled f_{m+1}; Ψ (stride-2 3×3 conv) carries the gate down a level.
#[derive(Debug, Clone)]
pub struct SaeBlock {
    omega_w: ParamId,
    omega_b: ParamId,
    psi_w: ParamId,
    psi_b: ParamId,
}

impl SaeBlock {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        let omega_w = store.add(
            format!("{name}.omega.w"),
            &[c, c, 1, 1],
            Init::FanInUniform { fan_in: c },
            ParamKind::Main,
        );
        let omega_b = store.add(format!("{name}.omega.b"), &[c], Init::Zeros, ParamKind::Main);
        let psi_w = store.add(
            format!("{name}.psi.w"),
            &[c, c, 3, 3],
            Init::FanInUniform { fan_in: c * 9 },
            ParamKind::Main,
        );
        let psi_b = store.add(format!("{name}.psi.b"), &[c], Init::Zeros, ParamKind::Main);
        SaeBlock { omega_w, omega_b, psi_w, psi_b }
    }

    /// Returns (f'_m, f'_{m+1}, gate) with
    /// gate = Ω(f_m) ⊗ σ(Ω(GAP(f_{m+1}))),
    /// f'_m = f_m ⊖ gate, f'_{m+1} = f_{m+1} ⊕ Ψ(gate).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_m: Tensor,
        f_m1: Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (sm, sm1) = (g.shape(f_m).to_vec(), g.shape(f_m1).to_vec());
        if sm.len() != 4 || sm1.len() != 4 {
            return Err(CsqaError::dim(0, "SAE expects 4-d feature maps".to_string()));
        }
        if sm[1] != sm1[1] {
            return Err(CsqaError::dim(
                1,
                format!("SAE channel mismatch: {} vs {}", sm[1], sm1[1]),
            ));
        }
        if sm1[2] >= sm[2] || sm1[3] >= sm[3] {
            return Err(CsqaError::dim(
                2,
                format!("f_(m+1) must be spatially smaller: {:?} vs {:?}", sm1, sm),
            ));
        }
        let ww = g.bind(store, self.omega_w)?;
        let wb = g.bind(store, self.omega_b)?;
        let spatial = g.conv2d(f_m, ww, Some(wb), 1, 0, 1)?;
        let pooled = g.avg_pool_global(f_m1)?;
        let pooled4 = g.reshape(pooled, &[sm1[0], sm1[1], 1, 1])?;
        let chan = g.conv2d(pooled4, ww, Some(wb), 1, 0, 1)?;
        let chan_gate = g.sigmoid(chan)?;
        let gate = g.mul(spatial, chan_gate)?;
        let f_m_out = g.sub(f_m, gate)?;
        let pw = g.bind(store, self.psi_w)?;
        let pb = g.bind(store, self.psi_b)?;
        let down = g.conv2d(gate, pw, Some(pb), 2, 1, 1)?;
        let f_m1_out = g.add(f_m1, down)?;
        Ok((f_m_out, f_m1_out, gate))
    }
}

/// Everything one batch of navigation produces.
pub struct NavigationOutput {
    /// Selected proposals per image, NMS (descending score) order.
    pub proposals: Vec<Vec<PartProposal>>,
    /// Anchor indices of the selected proposals, per image.
    pub selected_indices: Vec<Vec<usize>>,
    /// Differentiable anchor scores, [B, total_anchors].
    pub scores: Tensor,
    /// Cropped part images, [B·N, 3, R/2, R/2], part index fastest-varying.
    pub part_batch: Tensor,
}

pub struct PartNavigator {
    cfg: NavigatorConfig,
    pyramid_convs: Vec<ConvRelu>,
    sae_blocks: Vec<SaeBlock>,
    score_w: Vec<ParamId>,
    score_b: Vec<ParamId>,
    anchors: Vec<BoxF>,
    resolution: usize,
}

impl PartNavigator {
    pub fn new(
        store: &mut ParamStore,
        cfg: NavigatorConfig,
        channels: usize,
        resolution: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut pyramid_convs = Vec::with_capacity(cfg.levels);
        for m in 0..cfg.levels {
            let stride = if m == 0 { 1 } else { 2 };
            pyramid_convs.push(ConvRelu::new(store, &format!("navigator.pyr{}", m + 1), channels, stride));
        }
        let mut sae_blocks = Vec::new();
        for m in 0..cfg.levels.saturating_sub(1) {
            sae_blocks.push(SaeBlock::new(store, &format!("navigator.sae{}", m + 1), channels));
        }
        let mut score_w = Vec::with_capacity(cfg.levels);
        let mut score_b = Vec::with_capacity(cfg.levels);
        for m in 0..cfg.levels {
            score_w.push(store.add(
                format!("navigator.score{}.w", m + 1),
                &[1, channels, 1, 1],
                Init::FanInUniform { fan_in: channels },
                ParamKind::Main,
            ));
            score_b.push(store.add(format!("navigator.score{}.b", m + 1), &[1], Init::Zeros, ParamKind::Main));
        }
        let anchors = anchor_boxes(&cfg, resolution);
        Ok(PartNavigator { cfg, pyramid_convs, sae_blocks, score_w, score_b, anchors, resolution })
    }

    pub fn config(&self) -> &NavigatorConfig {
        &self.cfg
    }

    pub fn anchors(&self) -> &[BoxF] {
        &self.anchors
    }

    /// SAE block between levels m and m+1 (0-based m).
    pub fn sae_block(&self, m: usize) -> &SaeBlock {
        &self.sae_blocks[m]
    }

    /// Consecutive 3×3 convs over the deepest stage map, extents matching
    /// the configured grid resolutions.
    pub fn build_pyramid(&self, g: &mut Graph, store: &ParamStore, f: Tensor) -> Result<Vec<Tensor>> {
        let s = g.shape(f).to_vec();
        if s.len() != 4 {
            return Err(CsqaError::dim(0, "pyramid input must be [B,C,H,W]".to_string()));
        }
        if s[2] != self.cfg.grid_resolutions[0] || s[3] != self.cfg.grid_resolutions[0] {
            return Err(CsqaError::dim(
                2,
                format!(
                    "pyramid input extent {} does not match first grid resolution {}",
                    s[2], self.cfg.grid_resolutions[0]
                ),
            ));
        }
        let mut maps = Vec::with_capacity(self.cfg.levels);
        let mut x = f;
        for (m, conv) in self.pyramid_convs.iter().enumerate() {
            x = conv.forward(g, store, x)?;
            let got = g.shape(x)[2];
            if got != self.cfg.grid_resolutions[m] {
                return Err(CsqaError::Config(format!(
                    "pyramid level {} produced extent {}, expected {}",
                    m + 1,
                    got,
                    self.cfg.grid_resolutions[m]
                )));
            }
            maps.push(x);
        }
        Ok(maps)
    }

    /// The SAE chain: each adjacent pair is enhanced, propagating the updated
    /// lower level into the next pair.
    pub fn enhance_chain(&self, g: &mut Graph, store: &ParamStore, pyramid: &[Tensor]) -> Result<Vec<Tensor>> {
        if pyramid.len() != self.cfg.levels {
            return Err(CsqaError::Usage(format!(
                "expected {} pyramid maps, got {}",
                self.cfg.levels,
                pyramid.len()
            )));
        }
        if self.cfg.levels == 1 {
            return Ok(vec![pyramid[0]]);
        }
        let mut out = Vec::with_capacity(self.cfg.levels);
        let mut left = pyramid[0];
        for m in 0..self.cfg.levels - 1 {
            let (l, r, _) = self.sae_blocks[m].forward(g, store, left, pyramid[m + 1])?;
            out.push(l);
            if m == self.cfg.levels - 2 {
                out.push(r);
            } else {
                left = r;
            }
        }
        Ok(out)
    }

    /// One score per spatial cell per level, flattened level-major.
    pub fn score_anchors(&self, g: &mut Graph, store: &ParamStore, enhanced: &[Tensor]) -> Result<Tensor> {
        let mut per_level = Vec::with_capacity(self.cfg.levels);
        for (m, &t) in enhanced.iter().enumerate() {
            let w = g.bind(store, self.score_w[m])?;
            let b = g.bind(store, self.score_b[m])?;
            let s = g.conv2d(t, w, Some(b), 1, 0, 1)?; // [B,1,g,g]
            let shape = g.shape(s).to_vec();
            per_level.push(g.reshape(s, &[shape[0], shape[2] * shape[3]])?);
        }
        g.concat(&per_level, 1)
    }

    /// Pyramid → SAE → scores → NMS → crop. `image` is the full-resolution
    /// input batch; `deepest` its stage-S feature map.
    pub fn navigate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Tensor,
        deepest: Tensor,
    ) -> Result<NavigationOutput> {
        let batch = g.shape(image)[0];
        let pyramid = self.build_pyramid(g, store, deepest)?;
        let enhanced = self.enhance_chain(g, store, &pyramid)?;
        let scores = self.score_anchors(g, store, &enhanced)?;
        let n = self.cfg.parts;
        let score_data = g.data(scores).to_vec();
        let total = self.anchors.len();
        let mut proposals = Vec::with_capacity(batch);
        let mut selected_indices = Vec::with_capacity(batch);
        let mut crops = Vec::with_capacity(batch * n);
        for b in 0..batch {
            let row = &score_data[b * total..(b + 1) * total];
            let mut outcome = nms_top_n(row, &self.anchors, self.cfg.iou_threshold, n);
            if let Some(count) = outcome.shortfall {
                // Recover to a full part set deterministically: append the
                // best-scoring suppressed anchors.
                log::warn!("nms shortfall on image {b}: {count} of {n} survivors; padding with suppressed anchors");
                let have: Vec<usize> = outcome.selected.iter().map(|p| p.anchor_index).collect();
                let mut order: Vec<usize> = (0..total).collect();
                order.sort_by(|&a, &c| row[c].partial_cmp(&row[a]).unwrap().then(a.cmp(&c)));
                for idx in order {
                    if outcome.selected.len() == n {
                        break;
                    }
                    if !have.contains(&idx) {
                        let bx = self.anchors[idx];
                        outcome.selected.push(PartProposal {
                            x_min: bx.x0,
                            y_min: bx.y0,
                            x_max: bx.x1,
                            y_max: bx.y1,
                            score: row[idx],
                            anchor_index: idx,
                        });
                    }
                }
            }
            for p in &outcome.selected {
                crops.push(self.crop_spec(b, p));
            }
            selected_indices.push(outcome.selected.iter().map(|p| p.anchor_index).collect());
            proposals.push(outcome.selected);
        }
        let half = self.resolution / 2;
        let part_batch = g.crop_resize(image, &crops, half, half)?;
        Ok(NavigationOutput { proposals, selected_indices, scores, part_batch })
    }

    /// Proposal box as a crop spec, clamping degenerate boxes to a minimum
    /// 2×2 source window.
    fn crop_spec(&self, image: usize, p: &PartProposal) -> CropSpec {
        let r = self.resolution as f64;
        let (mut x0, mut x1, mut y0, mut y1) = (p.x_min, p.x_max, p.y_min, p.y_max);
        if x1 - x0 < 2.0 || y1 - y0 < 2.0 {
            log::warn!("degenerate crop {:?}; clamping to 2x2 minimum window", p);
            let cx = ((x0 + x1) / 2.0).clamp(1.0, r - 1.0);
            let cy = ((y0 + y1) / 2.0).clamp(1.0, r - 1.0);
            x0 = cx - 1.0;
            x1 = cx + 1.0;
            y0 = cy - 1.0;
            y1 = cy + 1.0;
        }
        CropSpec { image, x0, y0, x1, y1 }
    }

    /// Pairwise hinge over one image's selected parts: for parts i, j with
    /// confidence(i) > confidence(j), penalize max(0, 1 − (I_i − I_j)).
    /// Confidences must already be detached (plain numbers).
    pub fn ranking_loss(
        &self,
        g: &mut Graph,
        scores: Tensor,
        image: usize,
        selected: &[usize],
        confidences: &[f64],
    ) -> Result<Tensor> {
        if selected.len() < 2 {
            return Err(CsqaError::Usage("ranking loss needs at least two parts".into()));
        }
        if selected.len() != confidences.len() {
            return Err(CsqaError::Usage(format!(
                "{} parts but {} confidences",
                selected.len(),
                confidences.len()
            )));
        }
        let n = selected.len();
        let mut pair_cols = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && confidences[i] > confidences[j] {
                    pair_cols.push((i, j));
                }
            }
        }
        let row = g.narrow(scores, 0, image, 1)?;
        let picked = g.select_cols(row, selected)?; // [1, n]
        if pair_cols.is_empty() {
            // no ordered pairs: loss is exactly zero but stays on the tape
            let z = g.scale(picked, 0.0)?;
            return g.sum_all(z);
        }
        let mut pmat = vec![0.0; n * pair_cols.len()];
        for (col, &(i, j)) in pair_cols.iter().enumerate() {
            pmat[i * pair_cols.len() + col] = 1.0;
            pmat[j * pair_cols.len() + col] = -1.0;
        }
        let p = g.leaf(pmat, &[n, pair_cols.len()])?;
        let diffs = g.matmul(picked, p)?; // [1, pairs] of I_i - I_j
        let ones = g.ones(&[1, pair_cols.len()])?;
        let margins = g.sub(ones, diffs)?;
        let hinged = g.relu(margins)?;
        g.sum_all(hinged)
    }
}

/// Line-delimited proposal dump: `image_id x_min y_min x_max y_max score`.
pub fn write_proposals(
    w: &mut impl std::io::Write,
    image_ids: &[usize],
    proposals: &[Vec<PartProposal>],
) -> std::io::Result<()> {
    for (id, parts) in image_ids.iter().zip(proposals.iter()) {
        for p in parts {
            writeln!(
                w,
                "{} {} {} {} {} {:.6}",
                id, p.x_min, p.y_min, p.x_max, p.y_max, p.score
            )?;
        }
    }
    Ok(())
}
