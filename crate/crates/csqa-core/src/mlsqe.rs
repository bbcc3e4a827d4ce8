//! Multi-level semantic quality evaluation.
//!
//! The last A backbone stages are each channel-enhanced (ECA gate), projected
//! to a common C* width by a 1×1 conv block, and pooled to a stage vector;
//! the A vectors concatenate into a fusion vector. Each of the A+1 vectors
//! feeds its own quality-probing head with a progressively larger smoothing
//! factor, and the per-image loss sums the three QP terms over all heads.

use crate::error::{CsqaError, Result};
use crate::qp::{QpClassifier, QpOutcome};
use crate::tensor::init::Init;
use crate::tensor::{Graph, ParamId, ParamKind, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct MlsqeConfig {
    pub enabled: bool,
    /// A — how many trailing stages are supervised.
    pub stages_used: usize,
    /// C* — the projected channel width.
    pub proj_channels: usize,
    /// Smoothing factors, ascending, one per stage plus the fusion head.
    pub alpha: Vec<f64>,
    /// ECA 1-d kernel size (odd).
    pub eca_kernel: usize,
}

impl MlsqeConfig {
    pub fn validate(&self, backbone_stages: usize) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.stages_used == 0 || self.stages_used > backbone_stages {
            return Err(CsqaError::Config(format!(
                "stages_used {} outside 1..={}",
                self.stages_used, backbone_stages
            )));
        }
        if self.proj_channels == 0 {
            return Err(CsqaError::Config("projection width must be positive".into()));
        }
        if self.alpha.len() != self.stages_used + 1 {
            return Err(CsqaError::Config(format!(
                "alpha schedule needs {} entries (A stages + fusion), got {}",
                self.stages_used + 1,
                self.alpha.len()
            )));
        }
        if self.alpha.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(CsqaError::Config(format!("alpha values must lie in (0,1]: {:?}", self.alpha)));
        }
        if self.alpha.windows(2).any(|w| w[1] < w[0]) {
            return Err(CsqaError::Config(format!("alpha schedule must ascend: {:?}", self.alpha)));
        }
        if self.eca_kernel % 2 == 0 || self.eca_kernel == 0 {
            return Err(CsqaError::Config(format!("ECA kernel must be odd, got {}", self.eca_kernel)));
        }
        Ok(())
    }
}

/// The ECA channel gate: σ(κ(GAP(F))) broadcast over space.
#[derive(Debug, Clone)]
pub struct EcaBlock {
    kernel: ParamId,
}

impl EcaBlock {
    fn new(store: &mut ParamStore, name: &str, kernel: usize) -> Self {
        let kernel = store.add(
            format!("{name}.kappa"),
            &[kernel],
            Init::FanInUniform { fan_in: kernel },
            ParamKind::Main,
        );
        EcaBlock { kernel }
    }

    /// F̂ = σ(κ(GAP(F))) ⊙ F; the gate is per (batch, channel), so the
    /// output/input ratio is constant across spatial positions.
    pub fn enhance(&self, g: &mut Graph, store: &ParamStore, f: Tensor) -> Result<Tensor> {
        let s = g.shape(f).to_vec();
        if s.len() != 4 {
            return Err(CsqaError::dim(0, format!("eca expects [B,C,H,W], got {:?}", s)));
        }
        let pooled = g.avg_pool_global(f)?; // [B, C]
        let k = g.bind(store, self.kernel)?;
        let conv = g.conv1d_channel(pooled, k)?;
        let gate = g.sigmoid(conv)?;
        let gate4 = g.reshape(gate, &[s[0], s[1], 1, 1])?;
        g.mul(f, gate4)
    }
}

/// 1×1 conv → batch norm → ReLU projecting a stage map to C* channels.
#[derive(Debug, Clone)]
pub struct ProjBlock {
    conv_w: ParamId,
    bn_gamma: ParamId,
    bn_beta: ParamId,
    bn_mean: ParamId,
    bn_var: ParamId,
}

const BN_MOMENTUM: f64 = 0.1;

impl ProjBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Self {
        let conv_w = store.add(
            format!("{name}.conv.w"),
            &[c_out, c_in, 1, 1],
            Init::FanInUniform { fan_in: c_in },
            ParamKind::Main,
        );
        let bn_gamma = store.add(format!("{name}.bn.gamma"), &[c_out], Init::Ones, ParamKind::Main);
        let bn_beta = store.add(format!("{name}.bn.beta"), &[c_out], Init::Zeros, ParamKind::Main);
        let bn_mean = store.add(format!("{name}.bn.mean"), &[c_out], Init::Zeros, ParamKind::Buffer);
        let bn_var = store.add(format!("{name}.bn.var"), &[c_out], Init::Ones, ParamKind::Buffer);
        ProjBlock { conv_w, bn_gamma, bn_beta, bn_mean, bn_var }
    }

    /// The projected map before pooling.
    pub fn project_map(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        f: Tensor,
        train: bool,
    ) -> Result<Tensor> {
        let w = g.bind(store, self.conv_w)?;
        let y = g.conv2d(f, w, None, 1, 0, 1)?;
        let gamma = g.bind(store, self.bn_gamma)?;
        let beta = g.bind(store, self.bn_beta)?;
        let (normed, mean, var) = g.batch_norm2d(
            y,
            gamma,
            beta,
            store.data(self.bn_mean),
            store.data(self.bn_var),
            train,
        )?;
        if train {
            let rm = store.data_mut(self.bn_mean);
            for (r, b) in rm.iter_mut().zip(mean.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            let rv = store.data_mut(self.bn_var);
            for (r, b) in rv.iter_mut().zip(var.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
        g.relu(normed)
    }
}

pub struct Mlsqe {
    cfg: MlsqeConfig,
    /// 0-based pyramid indices of the used stages, ascending.
    used_stages: Vec<usize>,
    eca: Vec<EcaBlock>,
    proj: Vec<ProjBlock>,
}

/// One image-branch pass: stage vectors, fusion vector, per-head loss data.
pub struct ImageBranchOutput {
    pub loss: Tensor,
    /// Main-head logits per head (A stages then fusion).
    pub head_logits: Vec<Tensor>,
    /// Probe records per head.
    pub outcomes: Vec<Vec<QpOutcome>>,
    pub stage_vectors: Vec<Tensor>,
    pub fusion: Tensor,
}

/// QP supervision over a full head set (A stage features plus the fusion
/// feature): Σ_heads [mean ℓ_sce + mean ℓ_ce + mean ℓ_reg]. Shared by the
/// image and part branches, which is what makes the heads weight-sharing.
pub struct HeadsLoss {
    pub loss: Tensor,
    pub head_logits: Vec<Tensor>,
    pub outcomes: Vec<Vec<QpOutcome>>,
}

pub fn heads_loss(
    g: &mut Graph,
    store: &ParamStore,
    features: &[Tensor],
    labels: &[usize],
    qps: &[QpClassifier],
    lambda: f64,
) -> Result<HeadsLoss> {
    if qps.len() != features.len() {
        return Err(CsqaError::Usage(format!(
            "{} features for {} QP heads",
            features.len(),
            qps.len()
        )));
    }
    let mut head_logits = Vec::with_capacity(qps.len());
    let mut outcomes = Vec::with_capacity(qps.len());
    let mut loss: Option<Tensor> = None;
    for (feature, qp) in features.iter().zip(qps.iter()) {
        let out = qp.forward_batch(g, store, *feature, labels, lambda)?;
        let sce = g.mean_all(out.sce)?;
        let ce = g.mean_all(out.ce)?;
        let reg = g.mean_all(out.reg)?;
        let head_sum0 = g.add(sce, ce)?;
        let head_sum = g.add(head_sum0, reg)?;
        loss = Some(match loss {
            None => head_sum,
            Some(acc) => g.add(acc, head_sum)?,
        });
        head_logits.push(out.y1);
        outcomes.push(out.outcomes);
    }
    Ok(HeadsLoss { loss: loss.expect("at least one head"), head_logits, outcomes })
}

impl Mlsqe {
    pub fn new(store: &mut ParamStore, cfg: MlsqeConfig, stage_channels: &[usize]) -> Result<Self> {
        cfg.validate(stage_channels.len())?;
        let s = stage_channels.len();
        let a = cfg.stages_used;
        let used_stages: Vec<usize> = (s - a..s).collect();
        let mut eca = Vec::with_capacity(a);
        let mut proj = Vec::with_capacity(a);
        for &st in &used_stages {
            eca.push(EcaBlock::new(store, &format!("mlsqe.s{}.eca", st + 1), cfg.eca_kernel));
            proj.push(ProjBlock::new(
                store,
                &format!("mlsqe.s{}.proj", st + 1),
                stage_channels[st],
                cfg.proj_channels,
            ));
        }
        Ok(Mlsqe { cfg, used_stages, eca, proj })
    }

    pub fn config(&self) -> &MlsqeConfig {
        &self.cfg
    }

    pub fn used_stages(&self) -> &[usize] {
        &self.used_stages
    }

    pub fn proj_blocks(&self) -> &[ProjBlock] {
        &self.proj
    }

    /// Relative index of a 0-based pyramid stage among the used stages.
    fn stage_rel(&self, stage: usize) -> Result<usize> {
        self.used_stages
            .iter()
            .position(|&s| s == stage)
            .ok_or_else(|| {
                CsqaError::Usage(format!(
                    "stage {} is not among the supervised stages {:?}",
                    stage + 1,
                    self.used_stages.iter().map(|s| s + 1).collect::<Vec<_>>()
                ))
            })
    }

    pub fn eca_enhance(&self, g: &mut Graph, store: &ParamStore, f: Tensor, stage: usize) -> Result<Tensor> {
        let rel = self.stage_rel(stage)?;
        self.eca[rel].enhance(g, store, f)
    }

    /// v = GMP(B^s(F̂)): project then global-max pool.
    pub fn project_stage(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        f_hat: Tensor,
        stage: usize,
        train: bool,
    ) -> Result<Tensor> {
        let rel = self.stage_rel(stage)?;
        let map = self.proj[rel].project_map(g, store, f_hat, train)?;
        g.max_pool_global(map)
    }

    /// The part branch shares B^s but pools with GAP instead of GMP.
    pub fn project_stage_gap(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        f: Tensor,
        stage: usize,
        train: bool,
    ) -> Result<Tensor> {
        let rel = self.stage_rel(stage)?;
        let map = self.proj[rel].project_map(g, store, f, train)?;
        g.avg_pool_global(map)
    }

    /// Order-preserving concatenation of the A stage vectors.
    pub fn fuse(&self, g: &mut Graph, vectors: &[Tensor]) -> Result<Tensor> {
        if vectors.len() != self.cfg.stages_used {
            return Err(CsqaError::Usage(format!(
                "fuse expects {} stage vectors, got {}",
                self.cfg.stages_used,
                vectors.len()
            )));
        }
        for &v in vectors {
            let s = g.shape(v);
            if s.len() != 2 || s[1] != self.cfg.proj_channels {
                return Err(CsqaError::dim(1, format!("stage vector shape {:?}, expected [B, {}]", s, self.cfg.proj_channels)));
            }
        }
        g.concat(vectors, 1)
    }

    /// ECA → project → pool for every used stage, then fuse.
    pub fn stage_vectors(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        pyramid: &[Tensor],
        train: bool,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        if pyramid.len() < self.cfg.stages_used {
            return Err(CsqaError::Usage(format!(
                "pyramid has {} maps, need {}",
                pyramid.len(),
                self.cfg.stages_used
            )));
        }
        let mut vs = Vec::with_capacity(self.cfg.stages_used);
        for &st in &self.used_stages {
            let f_hat = self.eca_enhance(g, store, pyramid[st], st)?;
            vs.push(self.project_stage(g, store, f_hat, st, train)?);
        }
        let fusion = self.fuse(g, &vs)?;
        Ok((vs, fusion))
    }

    /// Eq-style total image loss: Σ over the A+1 heads of the batch-mean
    /// smoothed, auxiliary, and regularizer terms.
    pub fn image_branch_loss(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        pyramid: &[Tensor],
        labels: &[usize],
        qps: &[QpClassifier],
        lambda: f64,
        train: bool,
    ) -> Result<ImageBranchOutput> {
        if qps.len() != self.cfg.stages_used + 1 {
            return Err(CsqaError::Usage(format!(
                "need {} QP heads (A stages + fusion), got {}",
                self.cfg.stages_used + 1,
                qps.len()
            )));
        }
        let (vs, fusion) = self.stage_vectors(g, store, pyramid, train)?;
        let mut features = vs.clone();
        features.push(fusion);
        let heads = heads_loss(g, store, &features, labels, qps, lambda)?;
        Ok(ImageBranchOutput {
            loss: heads.loss,
            head_logits: heads.head_logits,
            outcomes: heads.outcomes,
            stage_vectors: vs,
            fusion,
        })
    }

    /// Inference path: main-head logits per head, no losses, no aux heads.
    pub fn main_head_logits(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        pyramid: &[Tensor],
        qps: &[QpClassifier],
    ) -> Result<Vec<Tensor>> {
        if qps.len() != self.cfg.stages_used + 1 {
            return Err(CsqaError::Usage(format!(
                "need {} QP heads, got {}",
                self.cfg.stages_used + 1,
                qps.len()
            )));
        }
        let (vs, fusion) = self.stage_vectors(g, store, pyramid, false)?;
        let mut logits = Vec::with_capacity(qps.len());
        for (h, qp) in qps.iter().enumerate() {
            let feature = if h < vs.len() { vs[h] } else { fusion };
            logits.push(qp.main_logits(g, store, feature)?);
        }
        Ok(logits)
    }
}
