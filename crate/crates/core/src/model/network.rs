use std::ops::Range;

use super::ops::{
    gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward, silu, silu_grad, softmax_rows,
    View, ViewMut,
};
use super::{timestep_embedding, Model, UNCONDITIONED_T};
use crate::error::{Error, Result};
use crate::objective::{negative_log_softmax, LossBreakdown};
use crate::tokenizer::PAD_ID;
use crate::TokenId;

/// Activations kept for the backward pass of one block.
#[derive(Debug, Clone)]
struct BlockCache {
    norm1: Vec<f64>,
    inv_std1: Vec<f64>,
    modulated1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    context: Vec<f64>,
    attn_out: Vec<f64>,
    norm2: Vec<f64>,
    inv_std2: Vec<f64>,
    modulated2: Vec<f64>,
    ffn_pre: Vec<f64>,
    ffn_act: Vec<f64>,
    ffn_out: Vec<f64>,
}

/// Logits plus everything needed to backpropagate through them.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub batch: usize,
    pub len: usize,
    pub vocab: usize,
    /// Row-major `(batch · len) × vocab`.
    pub logits: Vec<f64>,
    tokens: Vec<TokenId>,
    time_embedding: Vec<f64>,
    time_pre1: Vec<f64>,
    time_act1: Vec<f64>,
    cond: Vec<f64>,
    cond_act: Vec<f64>,
    modulations: Vec<Vec<f64>>,
    final_modulation: Vec<f64>,
    blocks: Vec<BlockCache>,
    final_norm: Vec<f64>,
    final_inv_std: Vec<f64>,
    final_modulated: Vec<f64>,
}

impl ForwardPass {
    /// Logits of sequence `b` at position `pos`.
    pub fn row(&self, b: usize, pos: usize) -> &[f64] {
        let r = b * self.len + pos;
        &self.logits[r * self.vocab..(r + 1) * self.vocab]
    }
}

/// A corrupted batch ready for the loss: every sequence has the same
/// (padded) length.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub batch: usize,
    pub len: usize,
    /// Corrupted inputs, `batch × len`.
    pub inputs: Vec<TokenId>,
    /// Uncorrupted targets, `batch × len`.
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
    pub times: Vec<f64>,
    pub weights: Vec<f64>,
    /// Number of non-padding tokens per sequence.
    pub lengths: Vec<usize>,
}

fn two_mut(buf: &mut [f64], a: Range<usize>, b: Range<usize>) -> (&mut [f64], &mut [f64]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (head, tail) = buf.split_at_mut(b.start);
    (&mut head[a], &mut tail[..b.end - b.start])
}

/// `out[r] = n[r] ⊙ (1 + scale_b) + shift_b` where the shift and scale of
/// sequence `b` sit at column offsets of its modulation row.
#[allow(clippy::too_many_arguments)]
fn modulate(n: &[f64], mods: &[f64], stride: usize, shift: usize, scale: usize, len: usize, h: usize, out: &mut [f64]) {
    for (r, (src, dst)) in n.chunks_exact(h).zip(out.chunks_exact_mut(h)).enumerate() {
        let m = &mods[(r / len) * stride..];
        for j in 0..h {
            dst[j] = src[j] * (1.0 + m[scale + j]) + m[shift + j];
        }
    }
}

/// Backward of [`modulate`]: accumulates shift/scale gradients into
/// `dmods` and writes `dn`.
#[allow(clippy::too_many_arguments)]
fn modulate_backward(
    du: &[f64],
    n: &[f64],
    mods: &[f64],
    dmods: &mut [f64],
    stride: usize,
    shift: usize,
    scale: usize,
    len: usize,
    h: usize,
    dn: &mut [f64],
) {
    for (r, ((g, src), dst)) in du
        .chunks_exact(h)
        .zip(n.chunks_exact(h))
        .zip(dn.chunks_exact_mut(h))
        .enumerate()
    {
        let b = r / len;
        let m = &mods[b * stride..];
        let dm = &mut dmods[b * stride..];
        for j in 0..h {
            dm[shift + j] += g[j];
            dm[scale + j] += g[j] * src[j];
            dst[j] = g[j] * (1.0 + m[scale + j]);
        }
    }
}

/// `x += gate_b ⊙ y`.
fn gated_residual(x: &mut [f64], y: &[f64], mods: &[f64], stride: usize, gate: usize, len: usize, h: usize) {
    for (r, (dst, src)) in x.chunks_exact_mut(h).zip(y.chunks_exact(h)).enumerate() {
        let m = &mods[(r / len) * stride + gate..];
        for j in 0..h {
            dst[j] += m[j] * src[j];
        }
    }
}

/// Backward of [`gated_residual`] for the branch: gate gradient into
/// `dmods`, branch gradient into `dy`.
#[allow(clippy::too_many_arguments)]
fn gated_residual_backward(
    dx: &[f64],
    y: &[f64],
    mods: &[f64],
    dmods: &mut [f64],
    stride: usize,
    gate: usize,
    len: usize,
    h: usize,
    dy: &mut [f64],
) {
    for (r, ((g, src), dst)) in dx
        .chunks_exact(h)
        .zip(y.chunks_exact(h))
        .zip(dy.chunks_exact_mut(h))
        .enumerate()
    {
        let off = (r / len) * stride + gate;
        for j in 0..h {
            dmods[off + j] += g[j] * src[j];
            dst[j] = g[j] * mods[off + j];
        }
    }
}

impl Model {
    fn check_inputs(&self, tokens: &[TokenId], batch: usize, times: &[f64]) -> Result<usize> {
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::Shape(format!(
                "{} tokens do not split into {batch} sequences",
                tokens.len()
            )));
        }
        let len = tokens.len() / batch;
        if len > self.config.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence length {len} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} outside vocab {}",
                self.config.vocab_size
            )));
        }
        if times.len() != batch {
            return Err(Error::Shape(format!("{} times for {batch} sequences", times.len())));
        }
        if let Some(&t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!("t must lie in [0,1], got {t}")));
        }
        Ok(len)
    }

    /// Runs the encoder on `batch` sequences of equal length. `PAD` tokens
    /// are excluded as attention keys.
    pub fn forward(&self, tokens: &[TokenId], batch: usize, times: &[f64]) -> Result<ForwardPass> {
        let len = self.check_inputs(tokens, batch, times)?;
        let cfg = &self.config;
        let slots = &self.layout.slots;
        let (h, f, v, td) = (cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size, cfg.timestep_dim);
        let (heads, hd) = (cfg.heads, cfg.head_dim());
        let rows = batch * len;

        // Conditioning path.
        let mut time_embedding = Vec::with_capacity(batch * td);
        for &t in times {
            let t = if cfg.time_conditioning { t } else { UNCONDITIONED_T };
            time_embedding.extend(timestep_embedding(t, td)?);
        }
        let mut time_pre1 = vec![0.0; batch * h];
        linear(
            &time_embedding,
            batch,
            td,
            self.slice(slots.time_w1),
            self.slice(slots.time_b1),
            &mut time_pre1,
        );
        let time_act1: Vec<f64> = time_pre1.iter().map(|&x| silu(x)).collect();
        let mut cond = vec![0.0; batch * h];
        linear(
            &time_act1,
            batch,
            h,
            self.slice(slots.time_w2),
            self.slice(slots.time_b2),
            &mut cond,
        );
        let cond_act: Vec<f64> = cond.iter().map(|&x| silu(x)).collect();
        let modulations: Vec<Vec<f64>> = slots
            .blocks
            .iter()
            .map(|blk| {
                let mut m = vec![0.0; batch * 6 * h];
                linear(
                    &cond_act,
                    batch,
                    h,
                    self.slice(blk.modulation_w),
                    self.slice(blk.modulation_b),
                    &mut m,
                );
                m
            })
            .collect();
        let mut final_modulation = vec![0.0; batch * 2 * h];
        linear(
            &cond_act,
            batch,
            h,
            self.slice(slots.final_modulation_w),
            self.slice(slots.final_modulation_b),
            &mut final_modulation,
        );

        // Embeddings.
        let tok_emb = self.slice(slots.token_embedding);
        let pos_emb = self.slice(slots.position_embedding);
        let mut x = vec![0.0; rows * h];
        for (r, dst) in x.chunks_exact_mut(h).enumerate() {
            let id = tokens[r] as usize;
            let pos = r % len;
            for j in 0..h {
                dst[j] = tok_emb[id * h + j] + pos_emb[pos * h + j];
            }
        }

        let scale = 1.0 / (hd as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.layers);
        for (blk, mods) in slots.blocks.iter().zip(&modulations) {
            let stride = 6 * h;
            let mut norm1 = vec![0.0; rows * h];
            let inv_std1 = layer_norm(&x, h, &mut norm1);
            let mut modulated1 = vec![0.0; rows * h];
            modulate(&norm1, mods, stride, 0, h, len, h, &mut modulated1);
            let mut qkv = vec![0.0; rows * 3 * h];
            linear(
                &modulated1,
                rows,
                h,
                self.slice(blk.qkv_w),
                self.slice(blk.qkv_b),
                &mut qkv,
            );

            let mut probs = vec![0.0; batch * heads * len * len];
            let mut context = vec![0.0; rows * h];
            for b in 0..batch {
                let seq_qkv = &qkv[b * len * 3 * h..(b + 1) * len * 3 * h];
                let keys_pad = &tokens[b * len..(b + 1) * len];
                for head in 0..heads {
                    let q = View::block(seq_qkv, len, 3 * h, head * hd, hd);
                    let k = View::block(seq_qkv, len, 3 * h, h + head * hd, hd);
                    let val = View::block(seq_qkv, len, 3 * h, 2 * h + head * hd, hd);
                    let p = &mut probs[(b * heads + head) * len * len..(b * heads + head + 1) * len * len];
                    gemm(q, k.t(), 0.0, ViewMut::new(p, len, len));
                    for row in p.chunks_exact_mut(len) {
                        for (s, &tok) in row.iter_mut().zip(keys_pad) {
                            *s = if tok == PAD_ID { f64::NEG_INFINITY } else { *s * scale };
                        }
                    }
                    softmax_rows(p, len);
                    let ctx = ViewMut::block(&mut context[b * len * h..(b + 1) * len * h], len, h, head * hd, hd);
                    gemm(View::new(p, len, len), val, 0.0, ctx);
                }
            }
            let mut attn_out = vec![0.0; rows * h];
            linear(
                &context,
                rows,
                h,
                self.slice(blk.out_w),
                self.slice(blk.out_b),
                &mut attn_out,
            );
            gated_residual(&mut x, &attn_out, mods, stride, 2 * h, len, h);

            let mut norm2 = vec![0.0; rows * h];
            let inv_std2 = layer_norm(&x, h, &mut norm2);
            let mut modulated2 = vec![0.0; rows * h];
            modulate(&norm2, mods, stride, 3 * h, 4 * h, len, h, &mut modulated2);
            let mut ffn_pre = vec![0.0; rows * f];
            linear(
                &modulated2,
                rows,
                h,
                self.slice(blk.ffn_in_w),
                self.slice(blk.ffn_in_b),
                &mut ffn_pre,
            );
            let ffn_act: Vec<f64> = ffn_pre.iter().map(|&z| gelu(z)).collect();
            let mut ffn_out = vec![0.0; rows * h];
            linear(
                &ffn_act,
                rows,
                f,
                self.slice(blk.ffn_out_w),
                self.slice(blk.ffn_out_b),
                &mut ffn_out,
            );
            gated_residual(&mut x, &ffn_out, mods, stride, 5 * h, len, h);

            blocks.push(BlockCache {
                norm1,
                inv_std1,
                modulated1,
                qkv,
                probs,
                context,
                attn_out,
                norm2,
                inv_std2,
                modulated2,
                ffn_pre,
                ffn_act,
                ffn_out,
            });
        }

        let mut final_norm = vec![0.0; rows * h];
        let final_inv_std = layer_norm(&x, h, &mut final_norm);
        let mut final_modulated = vec![0.0; rows * h];
        modulate(
            &final_norm,
            &final_modulation,
            2 * h,
            0,
            h,
            len,
            h,
            &mut final_modulated,
        );

        let mut logits = vec![0.0; rows * v];
        match slots.head_w {
            Some(w) => linear(
                &final_modulated,
                rows,
                h,
                self.slice(w),
                self.slice(slots.head_b),
                &mut logits,
            ),
            None => {
                let bias = self.slice(slots.head_b);
                for row in logits.chunks_exact_mut(v) {
                    row.copy_from_slice(bias);
                }
                gemm(
                    View::new(&final_modulated, rows, h),
                    View::new(tok_emb, v, h).t(),
                    1.0,
                    ViewMut::new(&mut logits, rows, v),
                );
            }
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }

        Ok(ForwardPass {
            batch,
            len,
            vocab: v,
            logits,
            tokens: tokens.to_vec(),
            time_embedding,
            time_pre1,
            time_act1,
            cond,
            cond_act,
            modulations,
            final_modulation,
            blocks,
            final_norm,
            final_inv_std,
            final_modulated,
        })
    }

    /// Gradient of `Σ dlogits ⊙ logits` with respect to every parameter.
    pub fn backward(&self, pass: &ForwardPass, dlogits: &[f64]) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let slots = &self.layout.slots;
        let layout = &self.layout;
        let (h, f, v, td) = (cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size, cfg.timestep_dim);
        let (heads, hd) = (cfg.heads, cfg.head_dim());
        let (batch, len) = (pass.batch, pass.len);
        let rows = batch * len;
        if dlogits.len() != rows * v {
            return Err(Error::Shape(format!(
                "dlogits has {} entries, expected {}",
                dlogits.len(),
                rows * v
            )));
        }
        let mut grads = vec![0.0; layout.total()];

        // Head.
        let mut dmodulated = vec![0.0; rows * h];
        match slots.head_w {
            Some(w) => {
                // head.b precedes head.w in the layout.
                let (db, dw) = two_mut(&mut grads, layout.range(slots.head_b), layout.range(w));
                linear_backward(
                    &pass.final_modulated,
                    rows,
                    h,
                    self.slice(w),
                    dlogits,
                    dw,
                    db,
                    Some((&mut dmodulated, false)),
                );
            }
            None => {
                let tok_emb = self.slice(slots.token_embedding);
                gemm(
                    View::new(dlogits, rows, v),
                    View::new(tok_emb, v, h),
                    0.0,
                    ViewMut::new(&mut dmodulated, rows, h),
                );
                let de = &mut grads[layout.range(slots.token_embedding)];
                gemm(
                    View::new(dlogits, rows, v).t(),
                    View::new(&pass.final_modulated, rows, h),
                    1.0,
                    ViewMut::new(de, v, h),
                );
                let db = &mut grads[layout.range(slots.head_b)];
                for row in dlogits.chunks_exact(v) {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
            }
        }

        let mut dfinal_mod = vec![0.0; batch * 2 * h];
        let mut dnorm = vec![0.0; rows * h];
        modulate_backward(
            &dmodulated,
            &pass.final_norm,
            &pass.final_modulation,
            &mut dfinal_mod,
            2 * h,
            0,
            h,
            len,
            h,
            &mut dnorm,
        );
        let mut dx = vec![0.0; rows * h];
        layer_norm_backward(&dnorm, &pass.final_norm, &pass.final_inv_std, h, &mut dx);

        let mut dcond_act = vec![0.0; batch * h];
        {
            let (dw, db) = two_mut(
                &mut grads,
                layout.range(slots.final_modulation_w),
                layout.range(slots.final_modulation_b),
            );
            linear_backward(
                &pass.cond_act,
                batch,
                h,
                self.slice(slots.final_modulation_w),
                &dfinal_mod,
                dw,
                db,
                Some((&mut dcond_act, true)),
            );
        }

        let scale = 1.0 / (hd as f64).sqrt();
        let mut dbranch = vec![0.0; rows * h];
        let mut dffn_act = vec![0.0; rows * f];
        let mut dmod = vec![0.0; rows * h];
        let mut dcontext = vec![0.0; rows * h];
        let mut dqkv = vec![0.0; rows * 3 * h];
        let mut dp = vec![0.0; len * len];
        for (l, (blk, cache)) in slots.blocks.iter().zip(&pass.blocks).enumerate().rev() {
            let mods = &pass.modulations[l];
            let stride = 6 * h;
            let mut dmods = vec![0.0; batch * stride];

            // x ← x + gate2 ⊙ ffn
            gated_residual_backward(
                &dx,
                &cache.ffn_out,
                mods,
                &mut dmods,
                stride,
                5 * h,
                len,
                h,
                &mut dbranch,
            );
            {
                let (dw, db) = two_mut(&mut grads, layout.range(blk.ffn_out_w), layout.range(blk.ffn_out_b));
                linear_backward(
                    &cache.ffn_act,
                    rows,
                    f,
                    self.slice(blk.ffn_out_w),
                    &dbranch,
                    dw,
                    db,
                    Some((&mut dffn_act, false)),
                );
            }
            for (g, &z) in dffn_act.iter_mut().zip(&cache.ffn_pre) {
                *g *= gelu_grad(z);
            }
            {
                let (dw, db) = two_mut(&mut grads, layout.range(blk.ffn_in_w), layout.range(blk.ffn_in_b));
                linear_backward(
                    &cache.modulated2,
                    rows,
                    h,
                    self.slice(blk.ffn_in_w),
                    &dffn_act,
                    dw,
                    db,
                    Some((&mut dmod, false)),
                );
            }
            modulate_backward(
                &dmod,
                &cache.norm2,
                mods,
                &mut dmods,
                stride,
                3 * h,
                4 * h,
                len,
                h,
                &mut dnorm,
            );
            layer_norm_backward(&dnorm, &cache.norm2, &cache.inv_std2, h, &mut dx);

            // x ← x + gate1 ⊙ attn
            gated_residual_backward(
                &dx,
                &cache.attn_out,
                mods,
                &mut dmods,
                stride,
                2 * h,
                len,
                h,
                &mut dbranch,
            );
            {
                let (dw, db) = two_mut(&mut grads, layout.range(blk.out_w), layout.range(blk.out_b));
                linear_backward(
                    &cache.context,
                    rows,
                    h,
                    self.slice(blk.out_w),
                    &dbranch,
                    dw,
                    db,
                    Some((&mut dcontext, false)),
                );
            }
            for b in 0..batch {
                let seq_qkv = &cache.qkv[b * len * 3 * h..(b + 1) * len * 3 * h];
                let seq_dctx = &dcontext[b * len * h..(b + 1) * len * h];
                let seq_dqkv = &mut dqkv[b * len * 3 * h..(b + 1) * len * 3 * h];
                for head in 0..heads {
                    let q = View::block(seq_qkv, len, 3 * h, head * hd, hd);
                    let k = View::block(seq_qkv, len, 3 * h, h + head * hd, hd);
                    let val = View::block(seq_qkv, len, 3 * h, 2 * h + head * hd, hd);
                    let p = &cache.probs[(b * heads + head) * len * len..(b * heads + head + 1) * len * len];
                    let d_out = View::block(seq_dctx, len, h, head * hd, hd);
                    gemm(
                        View::new(p, len, len).t(),
                        d_out,
                        0.0,
                        ViewMut::block(seq_dqkv, len, 3 * h, 2 * h + head * hd, hd),
                    );
                    gemm(d_out, val.t(), 0.0, ViewMut::new(&mut dp, len, len));
                    for (dp_row, p_row) in dp.chunks_exact_mut(len).zip(p.chunks_exact(len)) {
                        let dot: f64 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                        for (d, &pij) in dp_row.iter_mut().zip(p_row) {
                            *d = pij * (*d - dot) * scale;
                        }
                    }
                    gemm(
                        View::new(&dp, len, len),
                        k,
                        0.0,
                        ViewMut::block(seq_dqkv, len, 3 * h, head * hd, hd),
                    );
                    gemm(
                        View::new(&dp, len, len).t(),
                        q,
                        0.0,
                        ViewMut::block(seq_dqkv, len, 3 * h, h + head * hd, hd),
                    );
                }
            }
            {
                let (dw, db) = two_mut(&mut grads, layout.range(blk.qkv_w), layout.range(blk.qkv_b));
                linear_backward(
                    &cache.modulated1,
                    rows,
                    h,
                    self.slice(blk.qkv_w),
                    &dqkv,
                    dw,
                    db,
                    Some((&mut dmod, false)),
                );
            }
            modulate_backward(&dmod, &cache.norm1, mods, &mut dmods, stride, 0, h, len, h, &mut dnorm);
            layer_norm_backward(&dnorm, &cache.norm1, &cache.inv_std1, h, &mut dx);

            let (dw, db) = two_mut(
                &mut grads,
                layout.range(blk.modulation_w),
                layout.range(blk.modulation_b),
            );
            linear_backward(
                &pass.cond_act,
                batch,
                h,
                self.slice(blk.modulation_w),
                &dmods,
                dw,
                db,
                Some((&mut dcond_act, true)),
            );
        }

        // Embeddings.
        {
            let (dtok, dpos) = two_mut(
                &mut grads,
                layout.range(slots.token_embedding),
                layout.range(slots.position_embedding),
            );
            for (r, g) in dx.chunks_exact(h).enumerate() {
                let id = pass.tokens[r] as usize;
                let pos = r % len;
                for j in 0..h {
                    dtok[id * h + j] += g[j];
                    dpos[pos * h + j] += g[j];
                }
            }
        }

        // Conditioning path.
        let dcond: Vec<f64> = dcond_act
            .iter()
            .zip(&pass.cond)
            .map(|(g, &c)| g * silu_grad(c))
            .collect();
        let mut dact1 = vec![0.0; batch * h];
        {
            let (dw, db) = two_mut(&mut grads, layout.range(slots.time_w2), layout.range(slots.time_b2));
            linear_backward(
                &pass.time_act1,
                batch,
                h,
                self.slice(slots.time_w2),
                &dcond,
                dw,
                db,
                Some((&mut dact1, false)),
            );
        }
        let dpre1: Vec<f64> = dact1
            .iter()
            .zip(&pass.time_pre1)
            .map(|(g, &z)| g * silu_grad(z))
            .collect();
        let (dw, db) = two_mut(&mut grads, layout.range(slots.time_w1), layout.range(slots.time_b1));
        linear_backward(
            &pass.time_embedding,
            batch,
            td,
            self.slice(slots.time_w1),
            &dpre1,
            dw,
            db,
            None,
        );

        Ok(grads)
    }

    /// Per-sequence loss breakdowns, the batch loss and its gradient.
    pub fn loss_and_gradients(&self, batch: &TrainingBatch) -> Result<(Vec<LossBreakdown>, f64, Vec<f64>)> {
        let (breakdown, loss, pass, dlogits) = self.loss_with_logit_grad(batch)?;
        let grads = self.backward(&pass, &dlogits)?;
        Ok((breakdown, loss, grads))
    }

    /// Batch loss only.
    pub fn loss(&self, batch: &TrainingBatch) -> Result<(Vec<LossBreakdown>, f64)> {
        let (breakdown, loss, _, _) = self.loss_with_logit_grad(batch)?;
        Ok((breakdown, loss))
    }

    fn loss_with_logit_grad(&self, batch: &TrainingBatch) -> Result<(Vec<LossBreakdown>, f64, ForwardPass, Vec<f64>)> {
        let n = batch.batch * batch.len;
        if batch.targets.len() != n
            || batch.mask.len() != n
            || batch.weights.len() != batch.batch
            || batch.lengths.len() != batch.batch
        {
            return Err(Error::Shape("inconsistent training batch".into()));
        }
        let pass = self.forward(&batch.inputs, batch.batch, &batch.times)?;
        let v = pass.vocab;
        let mut dlogits = vec![0.0; n * v];
        let mut breakdown = Vec::with_capacity(batch.batch);
        for b in 0..batch.batch {
            let mut ce = 0.0;
            let mut count = 0;
            let length = batch.lengths[b];
            let coef = if length == 0 {
                0.0
            } else {
                batch.weights[b] / (length as f64 * batch.batch as f64)
            };
            for pos in 0..batch.len {
                let r = b * batch.len + pos;
                if !batch.mask[r] {
                    continue;
                }
                let target = batch.targets[r] as usize;
                if target >= v {
                    return Err(Error::Shape(format!("target id {target} outside vocab {v}")));
                }
                let row = pass.row(b, pos);
                ce += negative_log_softmax(row, target);
                count += 1;
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|&z| (z - max).exp()).sum();
                let drow = &mut dlogits[r * v..(r + 1) * v];
                for (d, &z) in drow.iter_mut().zip(row) {
                    *d = coef * (z - max).exp() / denom;
                }
                drow[target] -= coef;
            }
            breakdown.push(LossBreakdown::new(batch.weights[b], batch.times[b], ce, count, length));
        }
        let loss = breakdown.iter().map(|b| b.weighted_loss).sum::<f64>() / batch.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        Ok((breakdown, loss, pass, dlogits))
    }
}
