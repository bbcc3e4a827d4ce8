//! S-stage hierarchical convolutional feature extractor.
//!
//! Stem: 3×3 stride-2 conv. Each stage: a stride-2 conv block followed by
//! stride-1 blocks, every block conv3×3 → batch norm → ReLU. The same
//! parameter set serves the image branch (full resolution R) and the part
//! branch (R/2): [`Backbone`] holds only parameter ids, so a cloned handle
//! aliases the same weights in the store.

use crate::error::{CsqaError, Result};
use crate::tensor::init::Init;
use crate::tensor::{Graph, ParamId, ParamKind, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Number of stages S.
    pub stages: usize,
    /// Output channels per stage, nondecreasing.
    pub channels: Vec<usize>,
    /// Conv blocks per stage (the first one strides).
    pub blocks: usize,
    /// Square input resolution R for the image branch.
    pub resolution: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 3 {
            return Err(CsqaError::Config(format!("backbone needs >= 3 stages, got {}", self.stages)));
        }
        if self.channels.len() != self.stages {
            return Err(CsqaError::Config(format!(
                "channel list length {} != stages {}",
                self.channels.len(),
                self.stages
            )));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(CsqaError::Config(format!("channels must be nondecreasing: {:?}", self.channels)));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(CsqaError::Config("zero channel count".into()));
        }
        if self.blocks == 0 {
            return Err(CsqaError::Config("backbone needs >= 1 block per stage".into()));
        }
        let div = 1usize << (self.stages + 1); // stem stride included
        if self.resolution == 0 || self.resolution % div != 0 {
            return Err(CsqaError::Config(format!(
                "resolution {} must be divisible by 2^{} = {}",
                self.resolution,
                self.stages + 1,
                div
            )));
        }
        Ok(())
    }

    /// Spatial extent of the stage-`s` map (1-based stage) for an input of
    /// extent `r`.
    pub fn stage_extent(&self, r: usize, s: usize) -> usize {
        r >> (s + 1)
    }
}

/// conv3×3 → batch norm → ReLU with running statistics held in the store.
#[derive(Debug, Clone)]
struct ConvBnBlock {
    conv_w: ParamId,
    bn_gamma: ParamId,
    bn_beta: ParamId,
    bn_mean: ParamId,
    bn_var: ParamId,
    stride: usize,
}

/// Momentum for the running batch-norm statistics.
const BN_MOMENTUM: f64 = 0.1;

impl ConvBnBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Self {
        let conv_w = store.add(
            format!("{name}.conv.w"),
            &[c_out, c_in, 3, 3],
            Init::FanInUniform { fan_in: c_in * 9 },
            ParamKind::Main,
        );
        let bn_gamma = store.add(format!("{name}.bn.gamma"), &[c_out], Init::Ones, ParamKind::Main);
        let bn_beta = store.add(format!("{name}.bn.beta"), &[c_out], Init::Zeros, ParamKind::Main);
        let bn_mean = store.add(format!("{name}.bn.mean"), &[c_out], Init::Zeros, ParamKind::Buffer);
        let bn_var = store.add(format!("{name}.bn.var"), &[c_out], Init::Ones, ParamKind::Buffer);
        ConvBnBlock { conv_w, bn_gamma, bn_beta, bn_mean, bn_var, stride }
    }

    fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Tensor, train: bool) -> Result<Tensor> {
        let w = g.bind(store, self.conv_w)?;
        let y = g.conv2d(x, w, None, self.stride, 1, 1)?;
        let gamma = g.bind(store, self.bn_gamma)?;
        let beta = g.bind(store, self.bn_beta)?;
        let (normed, batch_mean, batch_var) = g.batch_norm2d(
            y,
            gamma,
            beta,
            store.data(self.bn_mean),
            store.data(self.bn_var),
            train,
        )?;
        if train {
            let rm = store.data_mut(self.bn_mean);
            for (r, b) in rm.iter_mut().zip(batch_mean.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            let rv = store.data_mut(self.bn_var);
            for (r, b) in rv.iter_mut().zip(batch_var.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
        g.relu(normed)
    }
}

#[derive(Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    stem: ConvBnBlock,
    stages: Vec<Vec<ConvBnBlock>>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = ConvBnBlock::new(store, "backbone.stem", 3, cfg.channels[0], 2);
        let mut stages = Vec::with_capacity(cfg.stages);
        for s in 0..cfg.stages {
            let c_in_stage = if s == 0 { cfg.channels[0] } else { cfg.channels[s - 1] };
            let c_out = cfg.channels[s];
            let mut blocks = Vec::with_capacity(cfg.blocks);
            for b in 0..cfg.blocks {
                let (c_in, stride) = if b == 0 { (c_in_stage, 2) } else { (c_out, 1) };
                blocks.push(ConvBnBlock::new(
                    store,
                    &format!("backbone.s{}.b{}", s + 1, b),
                    c_in,
                    c_out,
                    stride,
                ));
            }
            stages.push(blocks);
        }
        Ok(Backbone { cfg, stem, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// An aliasing handle: the clone holds the same parameter ids, so reads,
    /// updates, and gradient accumulation all land on one parameter set.
    pub fn shared_view(&self) -> Backbone {
        self.clone()
    }

    /// Run all S stages. Accepts the configured resolution R (image branch)
    /// or R/2 (part branch).
    pub fn forward_stages(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        image: Tensor,
        train: bool,
    ) -> Result<Vec<Tensor>> {
        let shape = g.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(CsqaError::dim(1, format!("expected [B,3,R,R] input, got {:?}", shape)));
        }
        let r = self.cfg.resolution;
        if shape[2] != shape[3] {
            return Err(CsqaError::dim(3, format!("input must be square, got {:?}", shape)));
        }
        if shape[2] != r && shape[2] != r / 2 {
            return Err(CsqaError::dim(
                2,
                format!("input resolution {} is neither {} nor {}", shape[2], r, r / 2),
            ));
        }
        if shape[2] == r / 2 && (r / 2) % (1 << (self.cfg.stages + 1)) != 0 {
            return Err(CsqaError::dim(
                2,
                format!("part-branch resolution {} does not stride cleanly through {} stages", r / 2, self.cfg.stages),
            ));
        }
        let mut x = self.stem.forward(g, store, image, train)?;
        let mut maps = Vec::with_capacity(self.cfg.stages);
        for blocks in &self.stages {
            for b in blocks {
                x = b.forward(g, store, x, train)?;
            }
            maps.push(x);
        }
        Ok(maps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init::derive_rng;
    use rand::Rng;

    fn cfg_s4() -> BackboneConfig {
        BackboneConfig { stages: 4, channels: vec![16, 32, 64, 128], blocks: 1, resolution: 64 }
    }

    fn rand_image(b: usize, r: usize, seed: u64) -> Vec<f64> {
        let mut rng = derive_rng(seed, &[100]);
        (0..b * 3 * r * r).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn stage_shapes_follow_stride_arithmetic() {
        let mut store = ParamStore::new(3);
        let bb = Backbone::new(&mut store, cfg_s4()).unwrap();
        let mut g = Graph::new();
        let img = g.leaf(rand_image(2, 64, 1), &[2, 3, 64, 64]).unwrap();
        let maps = bb.forward_stages(&mut g, &mut store, img, false).unwrap();
        let want = [[2, 16, 16, 16], [2, 32, 8, 8], [2, 64, 4, 4], [2, 128, 2, 2]];
        for (m, w) in maps.iter().zip(want.iter()) {
            assert_eq!(g.shape(*m), w);
        }
    }

    #[test]
    fn same_image_same_seed_is_bitwise_identical() {
        let run = || {
            let mut store = ParamStore::new(11);
            let bb = Backbone::new(&mut store, cfg_s4()).unwrap();
            let mut g = Graph::new();
            let img = g.leaf(rand_image(1, 64, 2), &[1, 3, 64, 64]).unwrap();
            let maps = bb.forward_stages(&mut g, &mut store, img, false).unwrap();
            g.data(maps[3]).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn part_input_extents_are_exactly_half() {
        let mut store = ParamStore::new(5);
        let bb = Backbone::new(&mut store, cfg_s4()).unwrap();
        let mut g = Graph::new();
        let img = g.leaf(rand_image(1, 64, 3), &[1, 3, 64, 64]).unwrap();
        let full = bb.forward_stages(&mut g, &mut store, img, false).unwrap();
        let part = g.leaf(rand_image(1, 32, 4), &[1, 3, 32, 32]).unwrap();
        let half = bb.forward_stages(&mut g, &mut store, part, false).unwrap();
        for (f, h) in full.iter().zip(half.iter()) {
            let fs = g.shape(*f).to_vec();
            let hs = g.shape(*h);
            assert_eq!(hs[2], fs[2] / 2);
            assert_eq!(hs[3], fs[3] / 2);
            assert_eq!(hs[1], fs[1]);
        }
    }

    #[test]
    fn wrong_resolution_is_dimension_error() {
        let mut store = ParamStore::new(5);
        let bb = Backbone::new(&mut store, cfg_s4()).unwrap();
        let mut g = Graph::new();
        let img = g.leaf(vec![0.0; 3 * 48 * 48], &[1, 3, 48, 48]).unwrap();
        assert!(matches!(
            bb.forward_stages(&mut g, &mut store, img, false),
            Err(CsqaError::Dimension { axis: 2, .. })
        ));
    }

    #[test]
    fn parameter_count_is_pure_function_of_config() {
        let mut s1 = ParamStore::new(1);
        Backbone::new(&mut s1, cfg_s4()).unwrap();
        let mut s2 = ParamStore::new(999);
        Backbone::new(&mut s2, cfg_s4()).unwrap();
        assert_eq!(s1.trainable_count(), s2.trainable_count());
        assert_eq!(s1.len(), s2.len());
    }

    #[test]
    fn shared_view_aliases_parameters() {
        let mut store = ParamStore::new(8);
        let bb = Backbone::new(&mut store, cfg_s4()).unwrap();
        let view = bb.shared_view();
        // update through one handle, read through the other
        let id = store.id_by_name("backbone.stem.conv.w").unwrap();
        store.data_mut(id)[0] = 123.0;
        assert_eq!(store.data(view.stem.conv_w)[0], 123.0);
        assert_eq!(bb.stem.conv_w, view.stem.conv_w);
        // parameter count unchanged by sharing
        let count = store.trainable_count();
        let _another = bb.shared_view();
        assert_eq!(store.trainable_count(), count);
    }

    #[test]
    fn shared_gradients_accumulate_to_sum_of_separate_passes() {
        let build_grads = |joint: bool| -> Vec<f64> {
            let mut store = ParamStore::new(21);
            let bb = Backbone::new(&mut store, cfg_s4()).unwrap();
            let img_a = rand_image(1, 64, 30);
            let img_b = rand_image(1, 32, 31);
            let wid = store.id_by_name("backbone.s1.b0.conv.w").unwrap();
            if joint {
                let mut g = Graph::new();
                let a = g.leaf(img_a, &[1, 3, 64, 64]).unwrap();
                let b = g.leaf(img_b, &[1, 3, 32, 32]).unwrap();
                let ma = bb.forward_stages(&mut g, &mut store, a, false).unwrap();
                let view = bb.shared_view();
                let mb = view.forward_stages(&mut g, &mut store, b, false).unwrap();
                let sa = g.sum_all(ma[3]).unwrap();
                let sb = g.sum_all(mb[3]).unwrap();
                let tot = g.add(sa, sb).unwrap();
                g.backward(tot).unwrap();
                g.param_grad(wid).unwrap().to_vec()
            } else {
                let mut acc: Option<Vec<f64>> = None;
                for (img, r) in [(img_a, 64usize), (img_b, 32usize)] {
                    let mut g = Graph::new();
                    let t = g.leaf(img, &[1, 3, r, r]).unwrap();
                    let maps = bb.forward_stages(&mut g, &mut store, t, false).unwrap();
                    let s = g.sum_all(maps[3]).unwrap();
                    g.backward(s).unwrap();
                    let grad = g.param_grad(wid).unwrap();
                    match &mut acc {
                        None => acc = Some(grad.to_vec()),
                        Some(a) => {
                            for (x, y) in a.iter_mut().zip(grad.iter()) {
                                *x += y;
                            }
                        }
                    }
                }
                acc.unwrap()
            }
        };
        let joint = build_grads(true);
        let separate = build_grads(false);
        assert_eq!(joint.len(), separate.len());
        for (a, b) in joint.iter().zip(separate.iter()) {
            assert!((a - b).abs() < 1e-9, "joint {a} vs separate {b}");
        }
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let bad = BackboneConfig { stages: 2, channels: vec![8, 16], blocks: 1, resolution: 64 };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig { stages: 3, channels: vec![16, 8, 32], blocks: 1, resolution: 64 };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig { stages: 3, channels: vec![8, 16, 32], blocks: 1, resolution: 60 };
        assert!(bad.validate().is_err());
        let ok = BackboneConfig { stages: 3, channels: vec![8, 16, 32], blocks: 2, resolution: 64 };
        assert!(ok.validate().is_ok());
    }
}
