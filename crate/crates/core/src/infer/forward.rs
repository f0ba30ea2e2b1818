//! Incremental, gradient-free forward pass with a prefix key/value cache.
//!
//! One routine serves every decode configuration: it computes rows
//! `[start, start + n)` of the sequence given cached keys/values for
//! `[0, start)`, optionally appending the keys/values of rows that are now
//! committed. With the cache disabled callers simply pass `start = 0` and
//! never append, which recomputes everything; because each row's arithmetic
//! has a fixed accumulation order independent of the block extent, both
//! paths produce bit-identical values.

use crate::corpus::TokenId;
use crate::model::{Backbone, ModelError};
use crate::numerics::{kernels, scalar, Scalar};

/// Visibility rule for one block of rows.
///
/// Committed rows (`p < active_start`) are always strictly causal. Active
/// window rows additionally see each other when `bidirectional` is set (the
/// block-diffusion ablation); keys cached for committed rows are always the
/// causal ones, so cached and uncached decodes agree in every mode.
#[derive(Debug, Clone, Copy)]
pub struct WindowVis {
    pub active_start: usize,
    pub window_end: usize,
    pub bidirectional: bool,
}

impl WindowVis {
    pub fn causal() -> Self {
        WindowVis { active_start: usize::MAX, window_end: usize::MAX, bidirectional: false }
    }

    #[inline]
    fn visible(&self, query: usize, key: usize) -> bool {
        if key <= query {
            return true;
        }
        self.bidirectional
            && query >= self.active_start
            && query < self.window_end
            && key >= self.active_start
            && key < self.window_end
    }
}

struct LayerKv<S: Scalar> {
    k: Vec<S>,
    v: Vec<S>,
}

/// Per-layer keys and values for the committed prefix. Window rows are never
/// cached; their contents change across sweeps.
pub struct KvCache<S: Scalar> {
    layers: Vec<LayerKv<S>>,
    len: usize,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(n_layers: usize) -> Self {
        KvCache {
            layers: (0..n_layers).map(|_| LayerKv { k: Vec::new(), v: Vec::new() }).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub struct BlockOutput<S: Scalar> {
    /// Global index of the first row in `hidden`.
    pub start: usize,
    /// Global index of the first row in `logits`.
    pub logits_from: usize,
    /// `[n, d_model]` final-layer states for the block rows.
    pub hidden: Vec<S>,
    /// `[m, vocab]` output scores for rows `logits_from..start + n`.
    pub logits: Vec<S>,
}

impl<S: Scalar> BlockOutput<S> {
    pub fn hidden_row(&self, global: usize, d: usize) -> &[S] {
        let i = global - self.start;
        &self.hidden[i * d..(i + 1) * d]
    }

    pub fn logits_row(&self, global: usize, vocab: usize) -> &[S] {
        let i = global - self.logits_from;
        &self.logits[i * vocab..(i + 1) * vocab]
    }
}

/// Forward rows `[start, start + tokens.len())`.
///
/// Preconditions: `start <= cache.len` (rows already cached may be replayed;
/// their keys are recomputed locally and not re-appended) and
/// `append_upto <= start + tokens.len()`. Keys/values of rows with global
/// position in `[cache.len, append_upto)` are appended to the cache.
pub fn forward_block<S: Scalar>(
    backbone: &Backbone<S>,
    cache: &mut KvCache<S>,
    tokens: &[TokenId],
    start: usize,
    vis: WindowVis,
    append_upto: usize,
    logits_from: usize,
) -> Result<BlockOutput<S>, ModelError> {
    let cfg = &backbone.cfg;
    let n = tokens.len();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let end = start + n;
    assert!(start <= cache.len, "block must not skip past the cache");
    assert!(append_upto <= end);
    assert!(logits_from >= start && logits_from <= end);
    if end > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong { len: end, max: cfg.max_seq_len });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange { id: bad, vocab: cfg.vocab_size });
    }

    let eps = scalar::<S>(kernels::LN_EPS);
    let inv_sqrt_dh = scalar::<S>(1.0 / (dh as f64).sqrt());

    // Embedding + positional rows.
    let mut x = vec![S::zero(); n * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let e = &backbone.tok_emb.data()[tok as usize * d..(tok as usize + 1) * d];
        let p = &backbone.pos_emb.data()[(start + i) * d..(start + i + 1) * d];
        for ((dst, &ev), &pv) in x[i * d..(i + 1) * d].iter_mut().zip(e).zip(p) {
            *dst = ev + pv;
        }
    }

    let mut normed = vec![S::zero(); n * d];
    let mut scores = vec![S::zero(); end];
    let mut att = vec![S::zero(); n * d];
    let mut mlp_hidden = vec![S::zero(); n * cfg.d_ff];

    for (li, layer) in backbone.layers.iter().enumerate() {
        for i in 0..n {
            kernels::layer_norm_row(
                &x[i * d..(i + 1) * d],
                layer.ln1.gamma.data(),
                layer.ln1.beta.data(),
                eps,
                &mut normed[i * d..(i + 1) * d],
            );
        }
        let mut q = vec![S::zero(); n * d];
        let mut k = vec![S::zero(); n * d];
        let mut v = vec![S::zero(); n * d];
        kernels::gemm_nn(n, d, d, &normed, layer.wq.data(), &mut q);
        kernels::gemm_nn(n, d, d, &normed, layer.wk.data(), &mut k);
        kernels::gemm_nn(n, d, d, &normed, layer.wv.data(), &mut v);
        for i in 0..n {
            for (dst, &b) in q[i * d..(i + 1) * d].iter_mut().zip(layer.bq.data()) {
                *dst = *dst + b;
            }
            for (dst, &b) in k[i * d..(i + 1) * d].iter_mut().zip(layer.bk.data()) {
                *dst = *dst + b;
            }
            for (dst, &b) in v[i * d..(i + 1) * d].iter_mut().zip(layer.bv.data()) {
                *dst = *dst + b;
            }
        }

        let kv = &cache.layers[li];
        att.iter_mut().for_each(|a| *a = S::zero());
        for i in 0..n {
            let p_global = start + i;
            for head in 0..cfg.n_heads {
                let hoff = head * dh;
                let q_row = &q[i * d + hoff..i * d + hoff + dh];
                // Scores over global keys [0, start) from the cache, then the
                // block's own keys, ascending so accumulation order is fixed.
                let mut max = S::neg_infinity();
                for j in 0..start {
                    let s = kernels::dot(q_row, &kv.k[j * d + hoff..j * d + hoff + dh])
                        * inv_sqrt_dh;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let visible_to = |j: usize| vis.visible(p_global, j);
                for j in start..end {
                    if visible_to(j) {
                        let bj = j - start;
                        let s = kernels::dot(q_row, &k[bj * d + hoff..bj * d + hoff + dh])
                            * inv_sqrt_dh;
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                }
                let mut denom = S::zero();
                for (j, s) in scores.iter_mut().enumerate().take(start) {
                    let _ = j;
                    *s = (*s - max).exp();
                    denom = denom + *s;
                }
                for j in start..end {
                    if visible_to(j) {
                        scores[j] = (scores[j] - max).exp();
                        denom = denom + scores[j];
                    }
                }
                let out = &mut att[i * d + hoff..i * d + hoff + dh];
                for j in 0..start {
                    let w = scores[j] / denom;
                    for (o, &vv) in out.iter_mut().zip(&kv.v[j * d + hoff..j * d + hoff + dh]) {
                        *o = *o + w * vv;
                    }
                }
                for j in start..end {
                    if visible_to(j) {
                        let bj = j - start;
                        let w = scores[j] / denom;
                        for (o, &vv) in out.iter_mut().zip(&v[bj * d + hoff..bj * d + hoff + dh]) {
                            *o = *o + w * vv;
                        }
                    }
                }
            }
        }

        // Append committed rows' keys/values before x is overwritten.
        let kvm = &mut cache.layers[li];
        for p in cache.len.max(start)..append_upto {
            let i = p - start;
            kvm.k.extend_from_slice(&k[i * d..(i + 1) * d]);
            kvm.v.extend_from_slice(&v[i * d..(i + 1) * d]);
        }

        let mut proj = vec![S::zero(); n * d];
        kernels::gemm_nn(n, d, d, &att, layer.wo.data(), &mut proj);
        for i in 0..n {
            let xr = &mut x[i * d..(i + 1) * d];
            for ((xv, &pv), &b) in
                xr.iter_mut().zip(&proj[i * d..(i + 1) * d]).zip(layer.bo.data())
            {
                *xv = *xv + (pv + b);
            }
        }

        for i in 0..n {
            kernels::layer_norm_row(
                &x[i * d..(i + 1) * d],
                layer.ln2.gamma.data(),
                layer.ln2.beta.data(),
                eps,
                &mut normed[i * d..(i + 1) * d],
            );
        }
        mlp_hidden.iter_mut().for_each(|a| *a = S::zero());
        kernels::gemm_nn(n, d, cfg.d_ff, &normed, layer.w1.data(), &mut mlp_hidden);
        for i in 0..n {
            for (h, &b) in
                mlp_hidden[i * cfg.d_ff..(i + 1) * cfg.d_ff].iter_mut().zip(layer.b1.data())
            {
                *h = kernels::gelu(*h + b);
            }
        }
        let mut down = vec![S::zero(); n * d];
        kernels::gemm_nn(n, cfg.d_ff, d, &mlp_hidden, layer.w2.data(), &mut down);
        for i in 0..n {
            let xr = &mut x[i * d..(i + 1) * d];
            for ((xv, &dv), &b) in
                xr.iter_mut().zip(&down[i * d..(i + 1) * d]).zip(layer.b2.data())
            {
                *xv = *xv + (dv + b);
            }
        }
    }

    if append_upto > cache.len {
        cache.len = append_upto;
    }

    let mut hidden = vec![S::zero(); n * d];
    for i in 0..n {
        kernels::layer_norm_row(
            &x[i * d..(i + 1) * d],
            backbone.ln_f.gamma.data(),
            backbone.ln_f.beta.data(),
            eps,
            &mut hidden[i * d..(i + 1) * d],
        );
    }
    let m = end - logits_from;
    let skip = logits_from - start;
    let vocab = cfg.vocab_size;
    let mut logits = vec![S::zero(); m * vocab];
    kernels::gemm_nn(m, d, vocab, &hidden[skip * d..], backbone.out_w.data(), &mut logits);
    for i in 0..m {
        for (l, &b) in logits[i * vocab..(i + 1) * vocab].iter_mut().zip(backbone.out_b.data()) {
            *l = *l + b;
        }
    }

    Ok(BlockOutput { start, logits_from, hidden, logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::AttentionMask;
    use crate::model::{init_params, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: 45,
            max_seq_len: 64,
            k_max: 16,
            khead_hidden: 24,
        }
    }

    /// The no-cache block forward must agree with the tape forward exactly:
    /// same kernels, same accumulation order.
    #[test]
    fn matches_tape_forward_bit_exactly() {
        let (mut backbone, _) = init_params::<f32>(&cfg(), 41);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for vv in backbone.out_w.data_mut() {
            *vv = rng.gen_range(-0.05..0.05);
        }
        let tokens: Vec<u32> = (0..12).map(|_| rng.gen_range(4..45)).collect();
        let tape_out = backbone.forward(&tokens, &AttentionMask::causal(12)).unwrap();

        let mut cache = KvCache::new(2);
        let block = forward_block(
            &backbone,
            &mut cache,
            &tokens,
            0,
            WindowVis::causal(),
            0,
            0,
        )
        .unwrap();
        assert_eq!(tape_out.logits.data(), block.logits.as_slice());
        assert_eq!(tape_out.hidden.data(), block.hidden.as_slice());
    }

    /// Splitting a sequence into a cached prefix plus a suffix block yields
    /// the exact same rows as one uncached pass.
    #[test]
    fn cached_suffix_matches_full_recompute() {
        let (mut backbone, _) = init_params::<f32>(&cfg(), 43);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for vv in backbone.out_w.data_mut() {
            *vv = rng.gen_range(-0.05..0.05);
        }
        let tokens: Vec<u32> = (0..20).map(|_| rng.gen_range(4..45)).collect();

        let mut no_cache = KvCache::new(2);
        let full =
            forward_block(&backbone, &mut no_cache, &tokens, 0, WindowVis::causal(), 0, 0).unwrap();

        let mut cache = KvCache::new(2);
        let _ = forward_block(&backbone, &mut cache, &tokens[..13], 0, WindowVis::causal(), 13, 13)
            .unwrap();
        assert_eq!(cache.len(), 13);
        let suffix =
            forward_block(&backbone, &mut cache, &tokens[13..], 13, WindowVis::causal(), 13, 13)
                .unwrap();

        let v = 45;
        for (i, row) in (13..20).enumerate() {
            assert_eq!(
                full.logits_row(row, v),
                &suffix.logits[i * v..(i + 1) * v],
                "row {row} differs between cached and uncached paths"
            );
        }
    }
}
