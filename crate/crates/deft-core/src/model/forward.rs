//! Forward graph construction. Every method takes the graph plus the node
//! ids returned by [`DefTModel::bind`], so one bound parameter set serves
//! the whole pass and gradients land in one place.

use super::{AttnP, BnBatchStats, ConvP, DefTModel, LinP, BN_EPS, LN_EPS};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

/// Pooled sequence length: Σ ceil(h/r)·ceil(w/r) over the stage's ratios.
pub fn pooled_token_len(h: usize, w: usize, ratios: &[usize]) -> usize {
    ratios
        .iter()
        .map(|&r| h.div_ceil(r) * w.div_ceil(r))
        .sum()
}

/// Pools a feature map at every ratio and concatenates the flattened results
/// along the token axis: [N,c,h,w] → [N, Σ ceil(h/r)·ceil(w/r), c].
pub fn lmps_pool_tokens<T: Element>(
    g: &mut Graph<T>,
    x: NodeId,
    ratios: &[usize],
) -> Result<NodeId> {
    let xs = g.shape(x);
    if xs.len() != 4 {
        return Err(Error::shape(format!("pool_tokens wants rank 4, got {xs:?}")));
    }
    let (h, w) = (xs[2], xs[3]);
    let mut parts = Vec::with_capacity(ratios.len());
    for &r in ratios {
        let (oh, ow) = (h.div_ceil(r), w.div_ceil(r));
        let pooled = g.adaptive_avgpool2d(x, oh, ow)?;
        parts.push(g.img2seq(pooled)?);
    }
    g.concat(&parts, 1)
}

pub struct ModelOutputs<T> {
    pub pred: NodeId,
    /// Pre-sigmoid map behind `pred`. The training loss reads this so its
    /// cross-entropy gradient survives sigmoid saturation.
    pub logit: NodeId,
    /// One per decoder merge, deepest first, all at input resolution.
    pub side: Vec<NodeId>,
    pub side_logits: Vec<NodeId>,
    /// Present only for training-mode passes.
    pub bn_stats: Vec<BnBatchStats<T>>,
}

impl<T: Element> DefTModel<T> {
    /// Inserts every parameter into the graph as a leaf; index i of the
    /// result is registry index i.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| g.leaf(p.tensor.clone()))
            .collect()
    }

    fn conv(&self, g: &mut Graph<T>, pids: &[NodeId], p: &ConvP, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, pids[p.w], p.b.map(|i| pids[i]), p.stride, p.padding, p.groups)
    }

    fn lin(&self, g: &mut Graph<T>, pids: &[NodeId], p: &LinP, x: NodeId) -> Result<NodeId> {
        g.linear(x, pids[p.w], p.b.map(|i| pids[i]))
    }

    /// Token-layout layer norm applied to a 2D map, returning a 2D map.
    fn ln_map(
        &self,
        g: &mut Graph<T>,
        pids: &[NodeId],
        affine: &super::AffineP,
        x: NodeId,
    ) -> Result<NodeId> {
        let xs = g.shape(x);
        let (h, w) = (xs[2], xs[3]);
        let t = g.img2seq(x)?;
        let n = g.layer_norm(t, pids[affine.gamma], pids[affine.beta], LN_EPS)?;
        g.seq2img(n, h, w)
    }

    pub fn stem_forward(
        &self,
        g: &mut Graph<T>,
        pids: &[NodeId],
        x: NodeId,
        train: bool,
    ) -> Result<(NodeId, Vec<BnBatchStats<T>>)> {
        let mut cur = x;
        let mut stats = Vec::new();
        for layer in &self.arch.stem {
            cur = self.conv(g, pids, &layer.conv, cur)?;
            let cs = g.shape(cur);
            let count = cs[0] * cs[2] * cs[3];
            cur = if train {
                let (id, mean, var) = g.batch_norm2d_train(
                    cur,
                    pids[layer.norm.gamma],
                    pids[layer.norm.beta],
                    BN_EPS,
                )?;
                stats.push(BnBatchStats {
                    mean_buf: layer.run.mean,
                    var_buf: layer.run.var,
                    mean,
                    var,
                    count,
                });
                id
            } else {
                g.batch_norm2d_eval(
                    cur,
                    pids[layer.norm.gamma],
                    pids[layer.norm.beta],
                    self.buffers[layer.run.mean].tensor.data(),
                    self.buffers[layer.run.var].tensor.data(),
                    BN_EPS,
                )?
            };
            cur = g.relu(cur);
        }
        Ok((cur, stats))
    }

    /// Strided patch embed at the head of a stage. Stage 1 has none when the
    /// patchify stem already produced its stride.
    pub fn patch_aggregate(
        &self,
        g: &mut Graph<T>,
        pids: &[NodeId],
        stage: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let embed = self.arch.stages[stage]
            .embed
            .as_ref()
            .ok_or_else(|| Error::usage(format!("stage {} has no patch embed", stage + 1)))?;
        self.conv(g, pids, embed, x)
    }

    /// Residual depthwise position conv: x + conv3×3(x).
    pub fn lpb_forward(
        &self,
        g: &mut Graph<T>,
        pids: &[NodeId],
        stage: usize,
        block: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        match &self.arch.stages[stage].blocks[block].lpb {
            Some(conv) => {
                let c = self.conv(g, pids, conv, x)?;
                g.add(x, c)
            }
            None => Ok(x),
        }
    }

    /// Multi-head attention over full-resolution queries and pooled (or
    /// stride-reduced) keys/values. Input is the already-normalized map.
    pub fn attn_forward(
        &self,
        g: &mut Graph<T>,
        pids: &[NodeId],
        stage: usize,
        block: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let attn: &AttnP = &self.arch.stages[stage].blocks[block].attn;
        let xs = g.shape(x).to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let heads = self.config.heads[stage];
        let d = c / heads;

        let q_tokens = g.img2seq(x)?;
        let kv_tokens = if self.config.toggles.use_lmps {
            lmps_pool_tokens(g, x, &self.config.pool_ratios[stage])?
        } else {
            match &attn.sr {
                Some((conv, norm)) => {
                    let reduced = self.conv(g, pids, conv, x)?;
                    let t = g.img2seq(reduced)?;
                    g.layer_norm(t, pids[norm.gamma], pids[norm.beta], LN_EPS)?
                }
                None => q_tokens,
            }
        };
        let l = h * w;
        let lp = g.shape(kv_tokens)[1];

        let q = self.lin(g, pids, &attn.q, q_tokens)?;
        let k = self.lin(g, pids, &attn.k, kv_tokens)?;
        let v = self.lin(g, pids, &attn.v, kv_tokens)?;

        let split = |g: &mut Graph<T>, t: NodeId, len: usize| -> Result<NodeId> {
            let r = g.reshape(t, &[n, len, heads, d])?;
            g.permute(r, &[0, 2, 1, 3])
        };
        let qh = split(g, q, l)?;
        let kh = split(g, k, lp)?;
        let vh = split(g, v, lp)?;

        let scores = g.matmul(qh, kh, true)?;
        let scaled = g.mul_scalar(scores, 1.0 / (d as f64).sqrt());
        let weights = g.softmax(scaled, 3)?;
        let ctx = g.matmul(weights, vh, false)?;
        let merged = g.permute(ctx, &[0, 2, 1, 3])?;
        let flat = g.reshape(merged, &[n, l, c])?;
        let out = self.lin(g, pids, &attn.o, flat)?;
        g.seq2img(out, h, w)
    }

    /// Pointwise expand → GELU → (depthwise 3×3 → GELU) → pointwise shrink.
    pub fn cffn_forward(
        &self,
        g: &mut Graph<T>,
        pids: &[NodeId],
        stage: usize,
        block: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let ffn = &self.arch.stages[stage].blocks[block].ffn;
        let mut cur = self.conv(g, pids, &ffn.expand, x)?;
        cur = g.gelu(cur);
        if let Some(dw) = &ffn.dw {
            cur = self.conv(g, pids, dw, cur)?;
            cur = g.gelu(cur);
        }
        self.conv(g, pids, &ffn.shrink, cur)
    }

    /// One transformer block: position conv, pre-norm attention with
    /// residual, pre-norm feed-forward with residual.
    pub fn block_forward(
        &self,
        g: &mut Graph<T>,
        pids: &[NodeId],
        stage: usize,
        block: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let b = &self.arch.stages[stage].blocks[block];
        let pos = self.lpb_forward(g, pids, stage, block, x)?;
        let n1 = self.ln_map(g, pids, &b.norm1, pos)?;
        let att = self.attn_forward(g, pids, stage, block, n1)?;
        let mid = g.add(att, pos)?;
        let n2 = self.ln_map(g, pids, &b.norm2, mid)?;
        let ff = self.cffn_forward(g, pids, stage, block, n2)?;
        g.add(ff, mid)
    }

    /// Runs stem and all stages, returning the feature pyramid shallow to
    /// deep (5 levels with the conv stem, 4 with the patchify baseline).
    pub fn encoder_forward(
        &self,
        g: &mut Graph<T>,
        pids: &[NodeId],
        x: NodeId,
        train: bool,
    ) -> Result<(Vec<NodeId>, Vec<BnBatchStats<T>>)> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "encoder wants [N,{},H,W], got {xs:?}",
                self.config.in_channels
            )));
        }
        if xs[2] % 32 != 0 || xs[3] % 32 != 0 {
            return Err(Error::shape(format!(
                "input spatial dims must be divisible by 32, got {}x{}",
                xs[2], xs[3]
            )));
        }
        let (stem_out, bn_stats) = self.stem_forward(g, pids, x, train)?;
        let mut features = Vec::new();
        if self.config.toggles.use_csb {
            features.push(stem_out);
        }
        let mut cur = stem_out;
        for stage in 0..4 {
            if self.arch.stages[stage].embed.is_some() {
                cur = self.patch_aggregate(g, pids, stage, cur)?;
            }
            for block in 0..self.arch.stages[stage].blocks.len() {
                cur = self.block_forward(g, pids, stage, block, cur)?;
            }
            features.push(cur);
        }
        Ok((features, bn_stats))
    }

    /// Merges one decoder level: upsample the deep path ×2, concatenate the
    /// skip, 3×3 conv down to the skip's width, ReLU.
    pub fn decoder_merge(
        &self,
        g: &mut Graph<T>,
        pids: &[NodeId],
        merge_idx: usize,
        deep: NodeId,
        skip: NodeId,
    ) -> Result<NodeId> {
        let up = g.bilinear_upsample(deep, 2)?;
        if g.shape(up)[2..] != g.shape(skip)[2..] {
            return Err(Error::shape(format!(
                "decoder merge {merge_idx}: upsampled {:?} vs skip {:?}",
                g.shape(up),
                g.shape(skip)
            )));
        }
        let cat = g.concat(&[up, skip], 1)?;
        let conv = self.conv(g, pids, &self.arch.decoder.merges[merge_idx], cat)?;
        Ok(g.relu(conv))
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        pids: &[NodeId],
        x: NodeId,
        train: bool,
    ) -> Result<ModelOutputs<T>> {
        let (features, bn_stats) = self.encoder_forward(g, pids, x, train)?;
        let n = features.len();
        let strides = self.config.pyramid_strides();
        let mut cur = features[n - 1];
        let mut side = Vec::with_capacity(n - 1);
        let mut side_logits = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            cur = self.decoder_merge(g, pids, i, cur, features[n - 2 - i])?;
            let head = self.conv(g, pids, &self.arch.decoder.sides[i], cur)?;
            let up = g.bilinear_upsample(head, strides[n - 2 - i])?;
            side_logits.push(up);
            side.push(g.sigmoid(up));
        }
        let head = self.conv(g, pids, &self.arch.decoder.head, cur)?;
        let logit = g.bilinear_upsample(head, strides[0])?;
        let pred = g.sigmoid(logit);
        g.assert_finite(pred, "model prediction")?;
        Ok(ModelOutputs {
            pred,
            logit,
            side,
            side_logits,
            bn_stats,
        })
    }
}
