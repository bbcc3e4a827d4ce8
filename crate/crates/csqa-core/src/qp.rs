//! Quality-probing classifier.
//!
//! Two linear heads read the same feature vector. The main head is trained
//! with label-smoothing cross entropy; the auxiliary head sees the feature
//! through a stop-gradient and is trained with standard cross entropy by its
//! own constant-rate optimizer, so it probes the feature's linear
//! separability without steering it. The agreement between the two heads'
//! maximum softmax probabilities p and q yields a per-sample factor
//! φ = |p−q|/(p+q), adjusted by region, which rescales the smoothed loss as
//! a detached multiplier. The auxiliary head is re-initialized every δ
//! epochs so it cannot overfit its probe role.

use crate::error::{CsqaError, Result};
use crate::tensor::init::Init;
use crate::tensor::{Graph, ParamId, ParamKind, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct QpConfig {
    /// Intensity adjustment factor λ.
    pub lambda: f64,
    /// Auxiliary re-initialization period δ in epochs.
    pub reinit_period: usize,
}

impl QpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 {
            return Err(CsqaError::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.reinit_period == 0 {
            return Err(CsqaError::Config("re-init period must be >= 1 epoch".into()));
        }
        Ok(())
    }
}

/// Per-sample probe record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOutcome {
    /// Max softmax probability of the main head.
    pub p: f64,
    /// Max softmax probability of the auxiliary head.
    pub q: f64,
    /// Raw factor |p−q|/(p+q), always in [0, 1).
    pub phi: f64,
    /// Region-adjusted factor actually multiplied into the loss.
    pub phi_adjusted: f64,
    /// Region 1..=4 of the (p, q) plane.
    pub region: u8,
}

/// Partition of (0,1]² by the threshold ε: region 1 both high, region 2 only
/// p high, region 4 only q high, region 3 both low.
pub fn region(p: f64, q: f64, epsilon: f64) -> u8 {
    match (p >= epsilon, q >= epsilon) {
        (true, true) => 1,
        (true, false) => 2,
        (false, true) => 4,
        (false, false) => 3,
    }
}

pub fn raw_quality_factor(p: f64, q: f64) -> f64 {
    assert!(p + q > 0.0, "softmax maxima are bounded below by 1/C");
    (p - q).abs() / (p + q)
}

/// Region-adjusted quality factor: region 1 → φ^λ, regions 2/4 → φ·λ/2,
/// region 3 → φ·λ.
pub fn quality_factor(p: f64, q: f64, epsilon: f64, lambda: f64) -> (f64, f64, u8) {
    let phi = raw_quality_factor(p, q);
    let r = region(p, q, epsilon);
    let adjusted = match r {
        1 => phi.powf(lambda),
        2 | 4 => phi * lambda / 2.0,
        _ => phi * lambda,
    };
    (adjusted, phi, r)
}

/// Label-smoothing cross entropy per sample: the target puts α on the true
/// class and (1−α)/C on every other class.
pub fn smoothed_ce_vec(
    g: &mut Graph,
    logits: Tensor,
    labels: &[usize],
    alpha: f64,
) -> Result<Tensor> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(CsqaError::Config(format!("smoothing factor alpha must be in (0,1], got {alpha}")));
    }
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(CsqaError::dim(0, format!("logits {:?} vs {} labels", shape, labels.len())));
    }
    let classes = shape[1];
    let off = (1.0 - alpha) / classes as f64;
    let mut target = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(CsqaError::Usage(format!("label {l} out of range for {classes} classes")));
        }
        for c in 0..classes {
            target[r * classes + c] = if c == l { alpha } else { off };
        }
    }
    let logp = g.log_softmax(logits, 1)?;
    let t = g.leaf(target, &shape)?;
    let weighted = g.mul(logp, t)?;
    let per_sample = g.sum_axis(weighted, 1)?;
    g.scale(per_sample, -1.0)
}

/// Standard cross entropy per sample (one-hot target).
pub fn standard_ce_vec(g: &mut Graph, logits: Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(CsqaError::dim(0, format!("logits {:?} vs {} labels", shape, labels.len())));
    }
    let classes = shape[1];
    let mut target = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(CsqaError::Usage(format!("label {l} out of range for {classes} classes")));
        }
        target[r * classes + l] = 1.0;
    }
    let logp = g.log_softmax(logits, 1)?;
    let t = g.leaf(target, &shape)?;
    let weighted = g.mul(logp, t)?;
    let per_sample = g.sum_axis(weighted, 1)?;
    g.scale(per_sample, -1.0)
}

/// Stable max-softmax probability of each row of a logit matrix.
pub fn max_softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    logits
        .chunks(classes)
        .map(|row| {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            // the max logit's shifted exponent is exactly 1
            1.0 / sum
        })
        .collect()
}

/// The three per-sample loss vectors of one head plus the probe records.
pub struct QpBatchResult {
    pub y1: Tensor,
    pub y2: Tensor,
    pub sce: Tensor,
    pub ce: Tensor,
    pub reg: Tensor,
    pub outcomes: Vec<QpOutcome>,
}

#[derive(Clone)]
pub struct QpClassifier {
    /// Stage index s' this head serves (1-based; S+1 is the fusion head).
    pub stage_index: usize,
    pub alpha: f64,
    /// Region threshold ε = α/2.
    pub epsilon: f64,
    in_dim: usize,
    classes: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl QpClassifier {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        stage_index: usize,
        in_dim: usize,
        classes: usize,
        alpha: f64,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(CsqaError::Config(format!("alpha must be in (0,1], got {alpha}")));
        }
        let epsilon = alpha / 2.0;
        debug_assert!(epsilon > 0.0 && epsilon < alpha);
        let w1 = store.add(
            format!("{name}.main.w"),
            &[in_dim, classes],
            Init::FanInUniform { fan_in: in_dim },
            ParamKind::Main,
        );
        let b1 = store.add(format!("{name}.main.b"), &[classes], Init::Zeros, ParamKind::Main);
        let w2 = store.add(
            format!("{name}.aux.w"),
            &[in_dim, classes],
            Init::FanInUniform { fan_in: in_dim },
            ParamKind::Aux,
        );
        let b2 = store.add(format!("{name}.aux.b"), &[classes], Init::Zeros, ParamKind::Aux);
        Ok(QpClassifier { stage_index, alpha, epsilon, in_dim, classes, w1, b1, w2, b2 })
    }

    pub fn main_params(&self) -> [ParamId; 2] {
        [self.w1, self.b1]
    }

    pub fn aux_params(&self) -> [ParamId; 2] {
        [self.w2, self.b2]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Main-head logits only (inference path; the auxiliary head is absent).
    pub fn main_logits(&self, g: &mut Graph, store: &ParamStore, feature: Tensor) -> Result<Tensor> {
        self.check_feature(g, feature)?;
        let w1 = g.bind(store, self.w1)?;
        let b1 = g.bind(store, self.b1)?;
        g.linear(feature, w1, b1)
    }

    fn check_feature(&self, g: &Graph, feature: Tensor) -> Result<()> {
        let s = g.shape(feature);
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(CsqaError::dim(
                1,
                format!("feature shape {:?}, head expects [B, {}]", s, self.in_dim),
            ));
        }
        Ok(())
    }

    /// Both heads plus the three per-sample loss terms: ℓ_sce on the main
    /// logits, ℓ_ce on the auxiliary logits behind a stop-gradient, and
    /// ℓ_reg = detach(φ_adjusted) · ℓ_sce.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feature: Tensor,
        labels: &[usize],
        lambda: f64,
    ) -> Result<QpBatchResult> {
        self.check_feature(g, feature)?;
        let w1 = g.bind(store, self.w1)?;
        let b1 = g.bind(store, self.b1)?;
        let y1 = g.linear(feature, w1, b1)?;
        let detached = g.stop_gradient(feature)?;
        let w2 = g.bind(store, self.w2)?;
        let b2 = g.bind(store, self.b2)?;
        let y2 = g.linear(detached, w2, b2)?;
        let sce = smoothed_ce_vec(g, y1, labels, self.alpha)?;
        let ce = standard_ce_vec(g, y2, labels)?;

        let outcomes = self.probe(g.data(y1), g.data(y2), lambda);
        let phi: Vec<f64> = outcomes.iter().map(|o| o.phi_adjusted).collect();
        let phi_t = g.leaf(phi, &[labels.len()])?;
        let reg = g.mul(sce, phi_t)?;
        Ok(QpBatchResult { y1, y2, sce, ce, reg, outcomes })
    }

    /// Single-sample convenience wrapper over [`Self::forward_batch`].
    pub fn forward_one(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feature: Tensor,
        label: usize,
        lambda: f64,
    ) -> Result<QpBatchResult> {
        let f2 = if g.shape(feature).len() == 1 {
            let d = g.numel(feature);
            g.reshape(feature, &[1, d])?
        } else {
            feature
        };
        self.forward_batch(g, store, f2, &[label], lambda)
    }

    /// Probe records from raw logits; pure and graph-free, so φ is detached
    /// by construction.
    pub fn probe(&self, y1: &[f64], y2: &[f64], lambda: f64) -> Vec<QpOutcome> {
        let p = max_softmax_rows(y1, self.classes);
        let q = max_softmax_rows(y2, self.classes);
        p.iter()
            .zip(q.iter())
            .map(|(&p, &q)| {
                let (phi_adjusted, phi, region) = quality_factor(p, q, self.epsilon, lambda);
                QpOutcome { p, q, phi, phi_adjusted, region }
            })
            .collect()
    }

    /// Every δ epochs (epoch > 0, epoch ≡ 0 mod δ) the auxiliary head is
    /// redrawn from a fresh stream. Returns the re-initialized parameter ids
    /// so the caller can clear the auxiliary optimizer state; the main head
    /// is untouched.
    pub fn maybe_reinit(
        &self,
        epoch: usize,
        reinit_period: usize,
        store: &mut ParamStore,
    ) -> Option<[ParamId; 2]> {
        if epoch > 0 && epoch % reinit_period == 0 {
            store.reinit(self.w2);
            store.reinit(self.b2);
            Some([self.w2, self.b2])
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init::derive_rng;
    use rand::Rng;

    #[test]
    fn smoothed_ce_alpha_one_on_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.leaf(vec![0.0, 0.0], &[1, 2]).unwrap();
        let l = smoothed_ce_vec(&mut g, logits, &[0], 1.0).unwrap();
        assert!((g.data(l)[0] - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn smoothed_ce_alpha_one_equals_standard_ce() {
        let mut rng = derive_rng(3, &[1]);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let label = rng.gen_range(0..6);
            let mut g = Graph::new();
            let t1 = g.leaf(logits.clone(), &[1, 6]).unwrap();
            let sce = smoothed_ce_vec(&mut g, t1, &[label], 1.0).unwrap();
            let t2 = g.leaf(logits, &[1, 6]).unwrap();
            let ce = standard_ce_vec(&mut g, t2, &[label]).unwrap();
            assert!((g.data(sce)[0] - g.data(ce)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothed_ce_matches_direct_summation_oracle() {
        // alpha = 0.7, C = 200: one target entry 0.7, 199 entries 0.0015
        let alpha = 0.7;
        let classes = 200;
        let mut rng = derive_rng(3, &[2]);
        let logits: Vec<f64> = (0..classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let label = 17usize;

        let off = (1.0 - alpha) / classes as f64;
        assert!((off - 0.0015).abs() < 1e-15);
        // direct summation with a naive log-softmax
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let mut want = 0.0;
        for (i, v) in logits.iter().enumerate() {
            let y = if i == label { alpha } else { off };
            want -= y * (v - lse);
        }

        let mut g = Graph::new();
        let t = g.leaf(logits, &[1, classes]).unwrap();
        let l = smoothed_ce_vec(&mut g, t, &[label], alpha).unwrap();
        assert!((g.data(l)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn smoothed_ce_rejects_alpha_outside_unit_interval() {
        let mut g = Graph::new();
        let t = g.leaf(vec![0.0, 0.0], &[1, 2]).unwrap();
        assert!(matches!(smoothed_ce_vec(&mut g, t, &[0], 0.0), Err(CsqaError::Config(_))));
        assert!(matches!(smoothed_ce_vec(&mut g, t, &[0], 1.5), Err(CsqaError::Config(_))));
    }

    #[test]
    fn standard_ce_uniform_and_confident() {
        let mut g = Graph::new();
        let t = g.leaf(vec![0.0; 4], &[1, 4]).unwrap();
        let l = standard_ce_vec(&mut g, t, &[2]).unwrap();
        assert!((g.data(l)[0] - 4.0f64.ln()).abs() < 1e-15);

        let mut logits = vec![0.0; 4];
        logits[2] = 30.0;
        let t = g.leaf(logits, &[1, 4]).unwrap();
        let l = standard_ce_vec(&mut g, t, &[2]).unwrap();
        assert!(g.data(l)[0] < 1e-12);
    }

    #[test]
    fn quality_factor_vanishes_when_heads_agree() {
        for p in [0.1, 0.3, 0.5, 0.9] {
            let (adj, raw, _) = quality_factor(p, p, 0.35, 2.0);
            assert_eq!(raw, 0.0);
            assert_eq!(adj, 0.0);
        }
    }

    #[test]
    fn quality_factor_hand_evaluated_points() {
        // region 2 (only p high): raw 0.6/1.2 = 0.5, adjusted 0.5 * 2/2 = 0.5
        let (adj, raw, r) = quality_factor(0.9, 0.3, 0.35, 2.0);
        assert_eq!(r, 2);
        assert!((raw - 0.5).abs() < 1e-15);
        assert!((adj - 0.5).abs() < 1e-15);
        // region 1 (both high): raw 0.2/1.4 = 1/7, adjusted (1/7)^2
        let (adj, raw, r) = quality_factor(0.8, 0.6, 0.35, 2.0);
        assert_eq!(r, 1);
        assert!((raw - 1.0 / 7.0).abs() < 1e-15);
        assert!((adj - (1.0f64 / 7.0).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn region_partition_and_swap_symmetry() {
        let eps = 0.35;
        let mut counts = [0usize; 5];
        for i in 1..=19 {
            for j in 1..=19 {
                let (p, q) = (i as f64 * 0.05, j as f64 * 0.05);
                let r = region(p, q, eps);
                assert!((1..=4).contains(&r));
                counts[r as usize] += 1;
                let swapped = region(q, p, eps);
                match r {
                    1 | 3 => assert_eq!(swapped, r, "regions 1/3 invariant under swap"),
                    2 => assert_eq!(swapped, 4),
                    _ => assert_eq!(swapped, 2),
                }
            }
        }
        // every cell mapped to exactly one region
        assert_eq!(counts.iter().sum::<usize>(), 19 * 19);
        assert!(counts[1..].iter().all(|&c| c > 0));
    }

    #[test]
    fn adjusted_phi_monotone_in_gap_at_fixed_sum() {
        let eps = 0.35;
        let lambda = 2.0;
        for &sum in &[0.4f64, 0.8, 1.2] {
            let mut per_region: [Vec<(f64, f64)>; 5] = Default::default();
            for k in 0..200 {
                let gap = k as f64 / 200.0 * sum.min(2.0 - sum) * 0.999;
                let p = (sum + gap) / 2.0;
                let q = (sum - gap) / 2.0;
                if p <= 0.0 || q <= 0.0 || p > 1.0 || q > 1.0 {
                    continue;
                }
                let (adj, _, r) = quality_factor(p, q, eps, lambda);
                per_region[r as usize].push((gap, adj));
            }
            for series in per_region.iter() {
                for w in series.windows(2) {
                    assert!(w[1].1 >= w[0].1 - 1e-12, "adjusted phi not monotone: {:?}", w);
                }
            }
        }
    }

    fn test_head(store: &mut ParamStore) -> QpClassifier {
        QpClassifier::new(store, "qp.test", 1, 8, 4, 0.7).unwrap()
    }

    #[test]
    fn epsilon_is_half_alpha() {
        let mut store = ParamStore::new(1);
        let head = test_head(&mut store);
        assert_eq!(head.epsilon, 0.35);
    }

    #[test]
    fn reg_term_is_zero_when_heads_agree() {
        let mut store = ParamStore::new(2);
        let head = test_head(&mut store);
        // force both heads to produce identical logits: zero weights and biases
        for id in head.main_params().into_iter().chain(head.aux_params()) {
            store.data_mut(id).fill(0.0);
        }
        let mut g = Graph::new();
        let f = g.leaf(vec![0.3; 8], &[1, 8]).unwrap();
        let out = head.forward_batch(&mut g, &store, f, &[1], 2.0).unwrap();
        assert_eq!(out.outcomes[0].phi, 0.0);
        assert_eq!(g.data(out.reg)[0], 0.0);
        assert!(g.data(out.sce)[0] > 0.0);
    }

    #[test]
    fn combined_gradient_scales_by_one_plus_phi() {
        let mut store = ParamStore::new(3);
        let head = test_head(&mut store);
        let mut rng = derive_rng(5, &[1]);
        let feature: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // d(sce + reg)/d y1 must equal (1 + phi_adjusted) * d sce/d y1
        let run = |with_reg: bool| -> (Vec<f64>, f64) {
            let mut g = Graph::new();
            let f = g.leaf(feature.clone(), &[1, 8]).unwrap();
            let out = head.forward_batch(&mut g, &store, f, &[2], 2.0).unwrap();
            let sce_m = g.mean_all(out.sce).unwrap();
            let loss = if with_reg {
                let reg_m = g.mean_all(out.reg).unwrap();
                g.add(sce_m, reg_m).unwrap()
            } else {
                sce_m
            };
            g.backward(loss).unwrap();
            (g.grad(out.y1).unwrap().to_vec(), out.outcomes[0].phi_adjusted)
        };
        let (g_with, phi) = run(true);
        let (g_without, _) = run(false);
        assert!(phi > 0.0, "fixture should have disagreeing heads");
        for (a, b) in g_with.iter().zip(g_without.iter()) {
            assert!((a - (1.0 + phi) * b).abs() < 1e-10, "{a} vs (1+{phi})*{b}");
        }
    }

    #[test]
    fn aux_loss_leaves_feature_gradient_bitwise_unchanged() {
        let mut store = ParamStore::new(4);
        let head = test_head(&mut store);
        let mut rng = derive_rng(5, &[2]);
        let feature: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |with_ce: bool| -> Vec<f64> {
            let mut g = Graph::new();
            let f = g.leaf_with_grad(feature.clone(), &[2, 8], true).unwrap();
            let out = head.forward_batch(&mut g, &store, f, &[0, 3], 2.0).unwrap();
            let sce_m = g.mean_all(out.sce).unwrap();
            let reg_m = g.mean_all(out.reg).unwrap();
            let partial = g.add(sce_m, reg_m).unwrap();
            let loss = if with_ce {
                let ce_m = g.mean_all(out.ce).unwrap();
                g.add(partial, ce_m).unwrap()
            } else {
                partial
            };
            g.backward(loss).unwrap();
            g.grad(f).unwrap().to_vec()
        };
        assert_eq!(run(true), run(false), "stop-gradient must isolate the aux head");
    }

    #[test]
    fn shared_head_gives_identical_outputs_for_identical_features() {
        let mut store = ParamStore::new(6);
        let head = test_head(&mut store);
        let mut g = Graph::new();
        let f1 = g.leaf(vec![0.25; 8], &[1, 8]).unwrap();
        let f2 = g.leaf(vec![0.25; 8], &[1, 8]).unwrap();
        let a = head.forward_batch(&mut g, &store, f1, &[1], 2.0).unwrap();
        let b = head.forward_batch(&mut g, &store, f2, &[1], 2.0).unwrap();
        assert_eq!(g.data(a.y1), g.data(b.y1));
        assert_eq!(g.data(a.y2), g.data(b.y2));
        assert_eq!(g.data(a.sce), g.data(b.sce));
    }

    #[test]
    fn reinit_fires_on_schedule_and_spares_main_head() {
        let mut store = ParamStore::new(7);
        let head = test_head(&mut store);
        let main_before: Vec<Vec<f64>> = head.main_params().iter().map(|id| store.data(*id).to_vec()).collect();
        let mut fired = Vec::new();
        for epoch in 0..6 {
            if head.maybe_reinit(epoch, 2, &mut store).is_some() {
                fired.push(epoch);
            }
        }
        assert_eq!(fired, vec![2, 4]);
        for (id, before) in head.main_params().iter().zip(main_before.iter()) {
            assert_eq!(store.data(*id), &before[..], "main head must be bitwise unchanged");
        }
    }

    #[test]
    fn reinit_raises_aux_loss_on_fitted_toy_set() {
        let mut store = ParamStore::new(8);
        let head = test_head(&mut store);
        let mut rng = derive_rng(5, &[3]);
        let features: Vec<f64> = (0..4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = [0usize, 1, 2, 3];

        let aux_loss = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let f = g.leaf(features.clone(), &[4, 8]).unwrap();
            let out = head.forward_batch(&mut g, store, f, &labels, 2.0).unwrap();
            let m = g.mean_all(out.ce).unwrap();
            g.data(m)[0]
        };

        // fit the auxiliary head with plain gradient steps
        for _ in 0..300 {
            let mut g = Graph::new();
            let f = g.leaf(features.clone(), &[4, 8]).unwrap();
            let out = head.forward_batch(&mut g, &store, f, &labels, 2.0).unwrap();
            let m = g.mean_all(out.ce).unwrap();
            g.backward(m).unwrap();
            for id in head.aux_params() {
                if let Some(grad) = g.param_grad(id) {
                    let grad = grad.to_vec();
                    for (w, gv) in store.data_mut(id).iter_mut().zip(grad.iter()) {
                        *w -= 0.5 * gv;
                    }
                }
            }
        }
        let fitted = aux_loss(&store);
        assert!(fitted < 0.2, "toy set should be fit, loss {fitted}");
        head.maybe_reinit(2, 2, &mut store).unwrap();
        let reset = aux_loss(&store);
        assert!(reset > fitted, "re-init must raise the aux loss: {reset} vs {fitted}");
    }

    #[test]
    fn feature_dimension_mismatch_is_dimension_error() {
        let mut store = ParamStore::new(9);
        let head = test_head(&mut store);
        let mut g = Graph::new();
        let f = g.leaf(vec![0.0; 6], &[1, 6]).unwrap();
        assert!(matches!(
            head.forward_batch(&mut g, &store, f, &[0], 2.0),
            Err(CsqaError::Dimension { axis: 1, .. })
        ));
    }
}
