//! Multi-part and multi-scale cross-attention.
//!
//! Part tokens (one C*-vector per part per used stage, L = A·N per image)
//! attend over themselves with queries built from both the replicated global
//! image vector and the layer-normed part tokens. Each attention row is
//! restricted to its top-v logits, every head's output is concatenated and
//! projected, and a learnable scalar β blends the result with the raw part
//! tokens. The output splits back into per-scale blocks, rejoins the
//! original tokens through a residual, and averages over parts to give one
//! vector per scale for the shared quality-probing heads.

use crate::error::{CsqaError, Result};
use crate::tensor::init::Init;
use crate::tensor::{Graph, ParamId, ParamKind, ParamStore, Tensor};

/// How the top-v mask is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Non-top-v logits are excluded from the softmax (set to −∞); rows have
    /// exactly v nonzero weights.
    Exclude,
    /// The literal reading: logits are multiplied by the binary mask before
    /// the softmax, so a masked logit still contributes exp(0) = 1. Kept for
    /// comparison.
    Literal,
}

/// Axis the query-side depthwise convolution runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DwConvAxis {
    /// Per-token 1-d convolution over the channel axis; keeps the module
    /// permutation-equivariant over token positions.
    Channel,
    /// Per-channel 1-d convolution along the token sequence.
    Sequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub enabled: bool,
    /// Head count H; C* must divide evenly.
    pub heads: usize,
    /// Row support v of the attention mask.
    pub top_v: usize,
    /// Initial value of the blend scalar β.
    pub beta_init: f64,
    pub mask_mode: MaskMode,
    pub dwconv_axis: DwConvAxis,
}

impl AttentionConfig {
    pub fn validate(&self, cstar: usize, seq_len: usize) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.heads == 0 || cstar % self.heads != 0 {
            return Err(CsqaError::Config(format!(
                "channel width {} not divisible by {} heads",
                cstar, self.heads
            )));
        }
        if self.top_v == 0 || self.top_v > seq_len {
            return Err(CsqaError::Config(format!(
                "top-v {} outside 1..={} (sequence length)",
                self.top_v, seq_len
            )));
        }
        Ok(())
    }
}

/// Per-head intermediates, exposed for verification.
pub struct HeadTrace {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub attn: Tensor,
    pub u: Tensor,
}

pub struct AttentionOutput {
    /// Blended output Y, [L, C*].
    pub y: Tensor,
    /// Pre-blend projected attention output, [L, C*].
    pub output_proj: Tensor,
    pub heads: Vec<HeadTrace>,
}

/// The split/residual recombination of Y.
pub struct SplitResidual {
    /// Raw per-scale blocks of Y, each [N, C*]; concatenating them in order
    /// reproduces Y.
    pub blocks: Vec<Tensor>,
    /// Blocks after the residual with the original tokens, each [N, C*].
    pub combined: Vec<Tensor>,
    /// Mean over parts of each combined block, each [1, C*].
    pub per_scale: Vec<Tensor>,
}

enum DwParams {
    Channel { kernel: ParamId, bias: ParamId },
    Sequence { kernel: ParamId, bias: ParamId },
}

pub struct Mpmsca {
    cfg: AttentionConfig,
    stages: usize,
    parts: usize,
    cstar: usize,
    reduce_w: ParamId,
    reduce_b: ParamId,
    ln_gamma: ParamId,
    ln_beta: ParamId,
    proj_im_w: ParamId,
    proj_im_b: ParamId,
    proj_p_w: ParamId,
    proj_p_b: ParamId,
    dw: DwParams,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    beta: ParamId,
}

/// One full part-branch attention pass over a batch.
pub struct MpmscaOutput {
    /// Per-scale part vectors stacked over the batch, each [B, C*].
    pub stage_vectors: Vec<Tensor>,
    /// Fusion of the per-scale vectors, [B, A·C*].
    pub fusion: Tensor,
    /// Per image, per part: the concatenated per-scale combined token
    /// (length A·C*), detached. Feeds the navigator's ranking confidences.
    pub part_features: Vec<Vec<Vec<f64>>>,
}

impl Mpmsca {
    pub fn new(
        store: &mut ParamStore,
        cfg: AttentionConfig,
        stages: usize,
        parts: usize,
        cstar: usize,
    ) -> Result<Self> {
        cfg.validate(cstar, stages * parts)?;
        let reduce_w = store.add(
            "mpmsca.reduce.w",
            &[stages * cstar, cstar],
            Init::FanInUniform { fan_in: stages * cstar },
            ParamKind::Main,
        );
        let reduce_b = store.add("mpmsca.reduce.b", &[cstar], Init::Zeros, ParamKind::Main);
        let ln_gamma = store.add("mpmsca.ln.gamma", &[cstar], Init::Ones, ParamKind::Main);
        let ln_beta = store.add("mpmsca.ln.beta", &[cstar], Init::Zeros, ParamKind::Main);
        let proj_im_w = store.add(
            "mpmsca.proj_im.w",
            &[cstar, cstar],
            Init::FanInUniform { fan_in: cstar },
            ParamKind::Main,
        );
        let proj_im_b = store.add("mpmsca.proj_im.b", &[cstar], Init::Zeros, ParamKind::Main);
        let proj_p_w = store.add(
            "mpmsca.proj_p.w",
            &[cstar, cstar],
            Init::FanInUniform { fan_in: cstar },
            ParamKind::Main,
        );
        let proj_p_b = store.add("mpmsca.proj_p.b", &[cstar], Init::Zeros, ParamKind::Main);
        let dw = match cfg.dwconv_axis {
            DwConvAxis::Channel => DwParams::Channel {
                kernel: store.add("mpmsca.dw.kernel", &[3], Init::FanInUniform { fan_in: 3 }, ParamKind::Main),
                bias: store.add("mpmsca.dw.bias", &[2 * cstar], Init::Zeros, ParamKind::Main),
            },
            DwConvAxis::Sequence => DwParams::Sequence {
                kernel: store.add(
                    "mpmsca.dw.kernel",
                    &[2 * cstar, 3],
                    Init::FanInUniform { fan_in: 3 },
                    ParamKind::Main,
                ),
                bias: store.add("mpmsca.dw.bias", &[2 * cstar], Init::Zeros, ParamKind::Main),
            },
        };
        let wq = store.add(
            "mpmsca.wq",
            &[2 * cstar, cstar],
            Init::FanInUniform { fan_in: 2 * cstar },
            ParamKind::Main,
        );
        let wk = store.add("mpmsca.wk", &[cstar, cstar], Init::FanInUniform { fan_in: cstar }, ParamKind::Main);
        let wv = store.add("mpmsca.wv", &[cstar, cstar], Init::FanInUniform { fan_in: cstar }, ParamKind::Main);
        let wo = store.add("mpmsca.wo", &[cstar, cstar], Init::FanInUniform { fan_in: cstar }, ParamKind::Main);
        let beta = store.add("mpmsca.beta", &[1], Init::Const(cfg.beta_init), ParamKind::Main);
        Ok(Mpmsca {
            cfg,
            stages,
            parts,
            cstar,
            reduce_w,
            reduce_b,
            ln_gamma,
            ln_beta,
            proj_im_w,
            proj_im_b,
            proj_p_w,
            proj_p_b,
            dw,
            wq,
            wk,
            wv,
            wo,
            beta,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    pub fn seq_len(&self) -> usize {
        self.stages * self.parts
    }

    pub fn beta_param(&self) -> ParamId {
        self.beta
    }

    /// Per-image part tokens of one stage: rows b·N..(b+1)·N of the
    /// [B·N, C*] stage token matrix (part index fastest-varying).
    pub fn image_stage_tokens(
        &self,
        g: &mut Graph,
        stage_tokens: Tensor,
        image: usize,
    ) -> Result<Tensor> {
        let s = g.shape(stage_tokens);
        if s.len() != 2 || s[0] % self.parts != 0 {
            return Err(CsqaError::Usage(format!(
                "part token batch {:?} not divisible into groups of {}",
                s, self.parts
            )));
        }
        g.narrow(stage_tokens, 0, image * self.parts, self.parts)
    }

    /// t_P for one image: per-scale token blocks concatenated along the
    /// sequence in ascending stage order, [L, C*].
    pub fn part_token_sequence(
        &self,
        g: &mut Graph,
        stage_tokens: &[Tensor],
        image: usize,
    ) -> Result<Tensor> {
        if stage_tokens.len() != self.stages {
            return Err(CsqaError::Usage(format!(
                "expected {} stage token matrices, got {}",
                self.stages,
                stage_tokens.len()
            )));
        }
        let mut blocks = Vec::with_capacity(self.stages);
        for &t in stage_tokens {
            blocks.push(self.image_stage_tokens(g, t, image)?);
        }
        g.concat(&blocks, 0)
    }

    /// Reduce the fusion vector to C* and replicate it L times: t_im.
    pub fn image_token_rows(&self, g: &mut Graph, store: &ParamStore, fusion: Tensor) -> Result<Tensor> {
        let s = g.shape(fusion);
        if s.len() != 2 || s[1] != self.stages * self.cstar {
            return Err(CsqaError::dim(
                1,
                format!("fusion shape {:?}, expected [B, {}]", s, self.stages * self.cstar),
            ));
        }
        let w = g.bind(store, self.reduce_w)?;
        let b = g.bind(store, self.reduce_b)?;
        g.linear(fusion, w, b)
    }

    fn replicate_rows(&self, g: &mut Graph, row: Tensor, l: usize) -> Result<Tensor> {
        let ones = g.ones(&[l, 1])?;
        g.matmul(ones, row)
    }

    /// Masked multi-head cross-attention for one image.
    pub fn attention_one_image(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        t_p: Tensor,
        im_row: Tensor,
    ) -> Result<AttentionOutput> {
        let l = self.seq_len();
        let sp = g.shape(t_p);
        if sp != [l, self.cstar] {
            return Err(CsqaError::dim(0, format!("t_P shape {:?}, expected [{}, {}]", sp, l, self.cstar)));
        }
        let t_im = self.replicate_rows(g, im_row, l)?;
        let lng = g.bind(store, self.ln_gamma)?;
        let lnb = g.bind(store, self.ln_beta)?;
        let ln_p = g.layer_norm(t_p, lng, lnb)?;
        let piw = g.bind(store, self.proj_im_w)?;
        let pib = g.bind(store, self.proj_im_b)?;
        let proj_im = g.linear(t_im, piw, pib)?;
        let ppw = g.bind(store, self.proj_p_w)?;
        let ppb = g.bind(store, self.proj_p_b)?;
        let proj_p = g.linear(ln_p, ppw, ppb)?;
        let q_side = g.concat(&[proj_im, proj_p], 1)?; // [L, 2C*]
        let q_conv = match &self.dw {
            DwParams::Channel { kernel, bias } => {
                let k = g.bind(store, *kernel)?;
                let b = g.bind(store, *bias)?;
                let c = g.conv1d_channel(q_side, k)?;
                g.add(c, b)?
            }
            DwParams::Sequence { kernel, bias } => {
                let k = g.bind(store, *kernel)?;
                let b = g.bind(store, *bias)?;
                g.dwconv_seq(q_side, k, Some(b))?
            }
        };
        let head_dim = self.cstar / self.cfg.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let wq = g.bind(store, self.wq)?;
        let wk = g.bind(store, self.wk)?;
        let wv = g.bind(store, self.wv)?;
        let mut traces = Vec::with_capacity(self.cfg.heads);
        let mut outputs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let wq_h = g.narrow(wq, 1, h * head_dim, head_dim)?;
            let wk_h = g.narrow(wk, 1, h * head_dim, head_dim)?;
            let wv_h = g.narrow(wv, 1, h * head_dim, head_dim)?;
            let q = g.matmul(q_conv, wq_h)?;
            let k = g.matmul(t_p, wk_h)?;
            let v = g.matmul(t_p, wv_h)?;
            let kt = g.transpose2(k)?;
            let logits0 = g.matmul(q, kt)?;
            let logits = g.scale(logits0, scale)?;
            let attn = match self.cfg.mask_mode {
                MaskMode::Exclude => g.topv_softmax(logits, self.cfg.top_v)?,
                MaskMode::Literal => {
                    let mask = top_v_mask(g.data(logits), l, self.cfg.top_v);
                    let m = g.leaf(mask, &[l, l])?;
                    let gated = g.mul(logits, m)?;
                    g.softmax(gated, 1)?
                }
            };
            let u = g.matmul(attn, v)?;
            outputs.push(u);
            traces.push(HeadTrace { q, k, v, attn, u });
        }
        let concat = g.concat(&outputs, 1)?; // [L, C*]
        let wo = g.bind(store, self.wo)?;
        let output_proj = g.matmul(concat, wo)?;
        let beta = g.bind(store, self.beta)?;
        let one = g.scalar(1.0)?;
        let inv = g.sub(one, beta)?;
        let scaled_out = g.mul(output_proj, inv)?;
        let scaled_res = g.mul(t_p, beta)?;
        let y = g.add(scaled_out, scaled_res)?;
        Ok(AttentionOutput { y, output_proj, heads: traces })
    }

    /// Split Y back into per-scale blocks, apply the token residual, and
    /// average over parts.
    pub fn split_residual(
        &self,
        g: &mut Graph,
        y: Tensor,
        stage_blocks: &[Tensor],
    ) -> Result<SplitResidual> {
        if stage_blocks.len() != self.stages {
            return Err(CsqaError::Usage(format!(
                "expected {} stage blocks, got {}",
                self.stages,
                stage_blocks.len()
            )));
        }
        let n = self.parts;
        let mut blocks = Vec::with_capacity(self.stages);
        let mut combined = Vec::with_capacity(self.stages);
        let mut per_scale = Vec::with_capacity(self.stages);
        for (s, &tok) in stage_blocks.iter().enumerate() {
            let block = g.narrow(y, 0, s * n, n)?;
            let joined = g.add(block, tok)?;
            let summed = g.sum_axis(joined, 0)?; // [C*]
            let mean0 = g.scale(summed, 1.0 / n as f64)?;
            let mean = g.reshape(mean0, &[1, self.cstar])?;
            blocks.push(block);
            combined.push(joined);
            per_scale.push(mean);
        }
        Ok(SplitResidual { blocks, combined, per_scale })
    }

    /// Full part branch over the batch: per-image attention, split/residual,
    /// and restacking into per-scale [B, C*] matrices plus the fusion.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stage_tokens: &[Tensor],
        fusion: Tensor,
        batch: usize,
    ) -> Result<MpmscaOutput> {
        for &t in stage_tokens {
            let s = g.shape(t);
            if s[0] != batch * self.parts {
                return Err(CsqaError::Usage(format!(
                    "stage tokens have {} rows, expected {} images x {} parts",
                    s[0], batch, self.parts
                )));
            }
        }
        let reduced = self.image_token_rows(g, store, fusion)?; // [B, C*]
        let mut per_scale_rows: Vec<Vec<Tensor>> = vec![Vec::with_capacity(batch); self.stages];
        let mut part_features = Vec::with_capacity(batch);
        for b in 0..batch {
            let t_p = self.part_token_sequence(g, stage_tokens, b)?;
            let im_row = g.narrow(reduced, 0, b, 1)?;
            let att = self.attention_one_image(g, store, t_p, im_row)?;
            let mut stage_blocks = Vec::with_capacity(self.stages);
            for &t in stage_tokens {
                stage_blocks.push(self.image_stage_tokens(g, t, b)?);
            }
            let split = self.split_residual(g, att.y, &stage_blocks)?;
            for (s, v) in split.per_scale.iter().enumerate() {
                per_scale_rows[s].push(*v);
            }
            // detached per-part features: concat of per-scale combined rows
            let mut feats = vec![Vec::with_capacity(self.stages * self.cstar); self.parts];
            for c in &split.combined {
                let data = g.data(*c);
                for (p, feat) in feats.iter_mut().enumerate() {
                    feat.extend_from_slice(&data[p * self.cstar..(p + 1) * self.cstar]);
                }
            }
            part_features.push(feats);
        }
        let mut stage_vectors = Vec::with_capacity(self.stages);
        for rows in per_scale_rows {
            stage_vectors.push(g.concat(&rows, 0)?);
        }
        let fusion_out = g.concat(&stage_vectors, 1)?;
        Ok(MpmscaOutput { stage_vectors, fusion: fusion_out, part_features })
    }
}

/// Binary top-v mask over the last axis of a row-major [rows, len] matrix,
/// ties resolved toward the smaller index.
fn top_v_mask(data: &[f64], len: usize, v: usize) -> Vec<f64> {
    let rows = data.len() / len;
    let mut mask = vec![0.0; data.len()];
    for r in 0..rows {
        let row = &data[r * len..(r + 1) * len];
        let mut idx: Vec<usize> = (0..len).collect();
        idx.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).unwrap().then(i.cmp(&j)));
        for &i in &idx[..v] {
            mask[r * len + i] = 1.0;
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init::derive_rng;
    use rand::Rng;

    fn cfg(v: usize) -> AttentionConfig {
        AttentionConfig {
            enabled: true,
            heads: 4,
            top_v: v,
            beta_init: 0.5,
            mask_mode: MaskMode::Exclude,
            dwconv_axis: DwConvAxis::Channel,
        }
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = derive_rng(seed, &[80]);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    const A: usize = 3;
    const N: usize = 4;
    const CSTAR: usize = 16;
    const L: usize = A * N;

    fn build(v: usize, seed: u64) -> (ParamStore, Mpmsca) {
        let mut store = ParamStore::new(seed);
        let m = Mpmsca::new(&mut store, cfg(v), A, N, CSTAR).unwrap();
        (store, m)
    }

    #[test]
    fn sequence_length_is_stages_times_parts() {
        let (_, m) = build(3, 1);
        assert_eq!(m.seq_len(), 12);
    }

    #[test]
    fn token_index_map_matches_direct_indexing() {
        let (_, m) = build(3, 2);
        let mut g = Graph::new();
        // batch of 2 images, stage tokens with recognizable values
        let stage_tokens: Vec<Tensor> = (0..A)
            .map(|s| {
                let mut data = vec![0.0; 2 * N * CSTAR];
                for row in 0..2 * N {
                    for c in 0..CSTAR {
                        data[row * CSTAR + c] = (s * 1000 + row * 10) as f64 + c as f64 / 100.0;
                    }
                }
                g.leaf(data, &[2 * N, CSTAR]).unwrap()
            })
            .collect();
        for image in 0..2 {
            let t_p = m.part_token_sequence(&mut g, &stage_tokens, image).unwrap();
            assert_eq!(g.shape(t_p), &[L, CSTAR]);
            let d = g.data(t_p);
            for s in 0..A {
                for n in 0..N {
                    let row = s * N + n;
                    let want = (s * 1000 + (image * N + n) * 10) as f64;
                    assert_eq!(d[row * CSTAR], want, "token ({s},{n}) of image {image}");
                }
            }
        }
    }

    #[test]
    fn single_part_token_sequence_stacks_scales() {
        let mut store = ParamStore::new(3);
        let m = Mpmsca::new(&mut store, cfg(1), A, 1, CSTAR).unwrap();
        let mut g = Graph::new();
        let stage_tokens: Vec<Tensor> = (0..A)
            .map(|s| g.leaf(vec![s as f64; CSTAR], &[1, CSTAR]).unwrap())
            .collect();
        let t_p = m.part_token_sequence(&mut g, &stage_tokens, 0).unwrap();
        assert_eq!(g.shape(t_p), &[3, CSTAR]);
        for s in 0..A {
            assert!(g.data(t_p)[s * CSTAR..(s + 1) * CSTAR].iter().all(|x| *x == s as f64));
        }
    }

    #[test]
    fn image_token_rows_are_identical_and_averaging_weights_give_mean() {
        let (mut store, m) = build(3, 4);
        // averaging reduction: W[a*C+c, c] = 1/A, bias 0
        {
            let w = store.data_mut(m.reduce_w);
            w.fill(0.0);
            for a in 0..A {
                for c in 0..CSTAR {
                    w[(a * CSTAR + c) * CSTAR + c] = 1.0 / A as f64;
                }
            }
            store.data_mut(m.reduce_b).fill(0.0);
        }
        let mut g = Graph::new();
        let fusion_data = rand_vec(2 * A * CSTAR, 4);
        let fusion = g.leaf(fusion_data.clone(), &[2, A * CSTAR]).unwrap();
        let reduced = m.image_token_rows(&mut g, &store, fusion).unwrap();
        assert_eq!(g.shape(reduced), &[2, CSTAR]);
        for b in 0..2 {
            for c in 0..CSTAR {
                let want: f64 = (0..A).map(|a| fusion_data[b * A * CSTAR + a * CSTAR + c]).sum::<f64>() / A as f64;
                assert!((g.data(reduced)[b * CSTAR + c] - want).abs() < 1e-12);
            }
        }
        // replication: all rows of t_im identical
        let row = g.narrow(reduced, 0, 0, 1).unwrap();
        let rep = m.replicate_rows(&mut g, row, L).unwrap();
        assert_eq!(g.shape(rep), &[L, CSTAR]);
        let d = g.data(rep);
        for r in 1..L {
            assert_eq!(&d[r * CSTAR..(r + 1) * CSTAR], &d[0..CSTAR]);
        }
    }

    #[test]
    fn attention_rows_have_exactly_v_nonzeros() {
        let (store, m) = build(3, 5);
        let mut g = Graph::new();
        let t_p = g.leaf(rand_vec(L * CSTAR, 5), &[L, CSTAR]).unwrap();
        let im = g.leaf(rand_vec(CSTAR, 6), &[1, CSTAR]).unwrap();
        let out = m.attention_one_image(&mut g, &store, t_p, im).unwrap();
        assert_eq!(out.heads.len(), 4);
        for trace in &out.heads {
            let a = g.data(trace.attn);
            for r in 0..L {
                let row = &a[r * L..(r + 1) * L];
                assert_eq!(row.iter().filter(|x| **x != 0.0).count(), 3);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn beta_one_returns_part_tokens_exactly() {
        let (mut store, m) = build(3, 6);
        store.data_mut(m.beta)[0] = 1.0;
        let mut g = Graph::new();
        let data = rand_vec(L * CSTAR, 7);
        let t_p = g.leaf(data.clone(), &[L, CSTAR]).unwrap();
        let im = g.leaf(rand_vec(CSTAR, 8), &[1, CSTAR]).unwrap();
        let out = m.attention_one_image(&mut g, &store, t_p, im).unwrap();
        for (y, t) in g.data(out.y).iter().zip(data.iter()) {
            assert_eq!(*y, *t, "β = 1 must reproduce t_P bitwise (0·out + 1·t)");
        }
    }

    #[test]
    fn blend_decomposition_is_exact() {
        let (store, m) = build(3, 16);
        let mut g = Graph::new();
        let data = rand_vec(L * CSTAR, 17);
        let t_p = g.leaf(data.clone(), &[L, CSTAR]).unwrap();
        let im = g.leaf(rand_vec(CSTAR, 18), &[1, CSTAR]).unwrap();
        let out = m.attention_one_image(&mut g, &store, t_p, im).unwrap();
        let beta = store.data(m.beta)[0];
        let proj = g.data(out.output_proj);
        for ((y, o), t) in g.data(out.y).iter().zip(proj.iter()).zip(data.iter()) {
            assert_eq!(*y, o * (1.0 - beta) + t * beta);
        }
    }

    #[test]
    fn dense_limit_matches_direct_attention_oracle() {
        let (store, m) = build(L, 9); // v = L
        let mut g = Graph::new();
        let t_p = g.leaf(rand_vec(L * CSTAR, 9), &[L, CSTAR]).unwrap();
        let im = g.leaf(rand_vec(CSTAR, 10), &[1, CSTAR]).unwrap();
        let out = m.attention_one_image(&mut g, &store, t_p, im).unwrap();
        let dh = CSTAR / 4;
        for trace in &out.heads {
            let q = g.data(trace.q);
            let k = g.data(trace.k);
            let v = g.data(trace.v);
            // dense oracle: softmax(q k^T / sqrt(dh)) v, naive loops
            let mut want_u = vec![0.0; L * dh];
            for i in 0..L {
                let mut logits = vec![0.0; L];
                for j in 0..L {
                    let mut dot = 0.0;
                    for d in 0..dh {
                        dot += q[i * dh + d] * k[j * dh + d];
                    }
                    logits[j] = dot / (dh as f64).sqrt();
                }
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for j in 0..L {
                    let a = exps[j] / sum;
                    for d in 0..dh {
                        want_u[i * dh + d] += a * v[j * dh + d];
                    }
                }
            }
            for (got, want) in g.data(trace.u).iter().zip(want_u.iter()) {
                assert!((got - want).abs() < 1e-10, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn literal_mask_mode_keeps_full_support() {
        let mut store = ParamStore::new(10);
        let mut c = cfg(3);
        c.mask_mode = MaskMode::Literal;
        let m = Mpmsca::new(&mut store, c, A, N, CSTAR).unwrap();
        let mut g = Graph::new();
        let t_p = g.leaf(rand_vec(L * CSTAR, 11), &[L, CSTAR]).unwrap();
        let im = g.leaf(rand_vec(CSTAR, 12), &[1, CSTAR]).unwrap();
        let out = m.attention_one_image(&mut g, &store, t_p, im).unwrap();
        // a zeroed logit still contributes exp(0) = 1: support stays L-wide
        let a = g.data(out.heads[0].attn);
        for r in 0..L {
            let row = &a[r * L..(r + 1) * L];
            assert!(row.iter().all(|x| *x > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn v_above_sequence_length_is_config_error() {
        let mut store = ParamStore::new(11);
        assert!(matches!(
            Mpmsca::new(&mut store, cfg(13), A, N, CSTAR),
            Err(CsqaError::Config(_))
        ));
    }

    #[test]
    fn permutation_equivariant_with_channel_dwconv() {
        let (store, m) = build(3, 12);
        let data = rand_vec(L * CSTAR, 13);
        let im_data = rand_vec(CSTAR, 14);
        let perm: Vec<usize> = vec![7, 0, 11, 3, 9, 1, 5, 10, 2, 8, 4, 6];

        let mut g = Graph::new();
        let t_p = g.leaf(data.clone(), &[L, CSTAR]).unwrap();
        let im = g.leaf(im_data.clone(), &[1, CSTAR]).unwrap();
        let base = m.attention_one_image(&mut g, &store, t_p, im).unwrap();
        let base_y = g.data(base.y).to_vec();

        let mut pdata = vec![0.0; L * CSTAR];
        for (dst, &src) in perm.iter().enumerate() {
            pdata[dst * CSTAR..(dst + 1) * CSTAR].copy_from_slice(&data[src * CSTAR..(src + 1) * CSTAR]);
        }
        let mut g2 = Graph::new();
        let t_p2 = g2.leaf(pdata, &[L, CSTAR]).unwrap();
        let im2 = g2.leaf(im_data, &[1, CSTAR]).unwrap();
        let permuted = m.attention_one_image(&mut g2, &store, t_p2, im2).unwrap();
        let perm_y = g2.data(permuted.y);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..CSTAR {
                let a = perm_y[dst * CSTAR + c];
                let b = base_y[src * CSTAR + c];
                assert!((a - b).abs() < 1e-9, "row {dst} channel {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn split_residual_zero_y_averages_tokens() {
        let (_, m) = build(3, 13);
        let mut g = Graph::new();
        let y = g.leaf(vec![0.0; L * CSTAR], &[L, CSTAR]).unwrap();
        let stage_blocks: Vec<Tensor> = (0..A)
            .map(|s| g.leaf(rand_vec(N * CSTAR, 20 + s as u64), &[N, CSTAR]).unwrap())
            .collect();
        let split = m.split_residual(&mut g, y, &stage_blocks).unwrap();
        for (s, v) in split.per_scale.iter().enumerate() {
            let d = g.data(*v);
            let tok = g.data(stage_blocks[s]);
            for c in 0..CSTAR {
                let want: f64 = (0..N).map(|p| tok[p * CSTAR + c]).sum::<f64>() / N as f64;
                assert!((d[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_residual_single_part_skips_averaging() {
        let mut store = ParamStore::new(14);
        let m = Mpmsca::new(&mut store, cfg(1), A, 1, CSTAR).unwrap();
        let mut g = Graph::new();
        let ydata = rand_vec(A * CSTAR, 25);
        let y = g.leaf(ydata.clone(), &[A, CSTAR]).unwrap();
        let blocks: Vec<Tensor> = (0..A)
            .map(|s| g.leaf(rand_vec(CSTAR, 26 + s as u64), &[1, CSTAR]).unwrap())
            .collect();
        let split = m.split_residual(&mut g, y, &blocks).unwrap();
        for (s, v) in split.per_scale.iter().enumerate() {
            let tok = g.data(blocks[s]);
            for c in 0..CSTAR {
                let want = ydata[s * CSTAR + c] + tok[c];
                assert!((g.data(*v)[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_blocks_concatenate_back_to_y() {
        let (_, m) = build(3, 15);
        let mut g = Graph::new();
        let ydata = rand_vec(L * CSTAR, 27);
        let y = g.leaf(ydata.clone(), &[L, CSTAR]).unwrap();
        let blocks: Vec<Tensor> = (0..A)
            .map(|_| g.leaf(vec![0.0; N * CSTAR], &[N, CSTAR]).unwrap())
            .collect();
        let split = m.split_residual(&mut g, y, &blocks).unwrap();
        let rejoined = g.concat(&split.blocks, 0).unwrap();
        assert_eq!(g.data(rejoined), &ydata[..]);
    }

    #[test]
    fn forward_stacks_batch_and_reports_part_features() {
        let (store, m) = build(3, 17);
        let mut g = Graph::new();
        let batch = 2;
        let stage_tokens: Vec<Tensor> = (0..A)
            .map(|s| g.leaf(rand_vec(batch * N * CSTAR, 30 + s as u64), &[batch * N, CSTAR]).unwrap())
            .collect();
        let fusion = g.leaf(rand_vec(batch * A * CSTAR, 33), &[batch, A * CSTAR]).unwrap();
        let out = m.forward(&mut g, &store, &stage_tokens, fusion, batch).unwrap();
        assert_eq!(out.stage_vectors.len(), A);
        for v in &out.stage_vectors {
            assert_eq!(g.shape(*v), &[batch, CSTAR]);
        }
        assert_eq!(g.shape(out.fusion), &[batch, A * CSTAR]);
        assert_eq!(out.part_features.len(), batch);
        assert_eq!(out.part_features[0].len(), N);
        assert_eq!(out.part_features[0][0].len(), A * CSTAR);
    }

    #[test]
    fn gradients_reach_beta_and_projections() {
        let (store, m) = build(3, 18);
        let mut g = Graph::new();
        let stage_tokens: Vec<Tensor> = (0..A)
            .map(|s| g.leaf_with_grad(rand_vec(N * CSTAR, 40 + s as u64), &[N, CSTAR], true).unwrap())
            .collect();
        let fusion = g.leaf(rand_vec(A * CSTAR, 43), &[1, A * CSTAR]).unwrap();
        let out = m.forward(&mut g, &store, &stage_tokens, fusion, 1).unwrap();
        let s = g.sum_all(out.fusion).unwrap();
        g.backward(s).unwrap();
        assert!(g.param_grad(m.beta).is_some(), "beta must receive gradient");
        assert!(g.param_grad(m.wq).is_some());
        assert!(g.param_grad(m.reduce_w).is_some());
        for t in &stage_tokens {
            assert!(g.grad(*t).is_some(), "part tokens must receive gradient");
        }
    }

    #[test]
    fn attention_gradcheck_small() {
        use crate::tensor::gradcheck::check_gradients;
        let mut store = ParamStore::new(19);
        let small = AttentionConfig {
            enabled: true,
            heads: 2,
            top_v: 2,
            beta_init: 0.4,
            mask_mode: MaskMode::Exclude,
            dwconv_axis: DwConvAxis::Channel,
        };
        let m = Mpmsca::new(&mut store, small, 2, 2, 8).unwrap();
        let tokens = rand_vec(4 * 8, 50);
        let im = rand_vec(8, 51);
        let w = rand_vec(4 * 8, 52);

        let build = |g: &mut Graph, vals: &[Vec<f64>], grad: bool| -> (Tensor, [Tensor; 2]) {
            let t_p = g.leaf_with_grad(vals[0].clone(), &[4, 8], grad).unwrap();
            let imr = g.leaf_with_grad(vals[1].clone(), &[1, 8], grad).unwrap();
            let out = m.attention_one_image(g, &store, t_p, imr).unwrap();
            let wt = g.leaf(w.clone(), &[4, 8]).unwrap();
            let p = g.mul(out.y, wt).unwrap();
            (g.sum_all(p).unwrap(), [t_p, imr])
        };
        let mut g = Graph::new();
        let (loss, leaves) = build(&mut g, &[tokens.clone(), im.clone()], true);
        g.backward(loss).unwrap();
        let analytic = vec![g.grad(leaves[0]).unwrap().to_vec(), g.grad(leaves[1]).unwrap().to_vec()];
        let eval = |vals: &[Vec<f64>]| {
            let mut g = Graph::new();
            let (loss, _) = build(&mut g, vals, false);
            g.data(loss)[0]
        };
        let mut rng = derive_rng(19, &[81]);
        let report = check_gradients(eval, &[tokens, im], &analytic, 1e-4, 30, &mut rng);
        assert!(report.passes(1e-4), "worst: {:?}", report.worst);
    }
}
