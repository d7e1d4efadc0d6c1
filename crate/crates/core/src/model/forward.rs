//! Forward pass, exact backward pass, and incremental decoding.
//!
//! Architecture: token + learned positional embeddings feed `n_layers`
//! pre-norm blocks (layer norm → causal multi-head attention → residual;
//! layer norm → GELU feed-forward → residual), then a final layer norm and an
//! untied output projection.
//!
//! Batched sequences are stacked into one (batch·len)×width matrix so the
//! position-wise matmuls run as a few large GEMMs; attention runs per
//! sequence and head. The backward pass is hand-derived and verified against
//! central finite differences (see [`finite_diff_max_rel_err`]).

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::math::{
    col_sums, dgelu, gelu, layernorm_rows, log_prob_of, softmax_in_place, LayerNormed, Scalar,
};
use super::params::{tensor_name, ModelError, ModelParams, ParamLayout};

/// One sequence plus its scoring mask. `score_mask[t]` marks token `t` as a
/// prediction target (scored from position t−1); index 0 is never scorable.
#[derive(Debug, Clone, Copy)]
pub struct ScoredSeq<'a> {
    pub tokens: &'a [u32],
    pub score_mask: &'a [bool],
}

/// Loss and flattened gradients for one batch.
#[derive(Debug, Clone)]
pub struct LossGrads<S: Scalar> {
    /// Mean cross-entropy over scored positions (nats).
    pub loss: f64,
    /// Gradient of the loss, laid out like the flat parameter vector.
    pub grads: Vec<S>,
    pub n_scored: usize,
}

struct LayerCache<S: Scalar> {
    x_in: Array2<S>,
    ln1: LayerNormed<S>,
    q: Array2<S>,
    k: Array2<S>,
    v: Array2<S>,
    /// Attention probabilities, one (t × t) matrix per (sequence, head).
    probs: Vec<Array2<S>>,
    ctx: Array2<S>,
    x_mid: Array2<S>,
    ln2: LayerNormed<S>,
    h1: Array2<S>,
    u: Array2<S>,
    attn_drop: Option<Array2<S>>,
    ff_drop: Option<Array2<S>>,
}

struct ForwardCache<S: Scalar> {
    emb_drop: Option<Array2<S>>,
    layers: Vec<LayerCache<S>>,
    x_final: Array2<S>,
    lnf: LayerNormed<S>,
    logits: Array2<S>,
}

fn dropout_mask<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Array2<S> {
    let keep = 1.0 - p;
    let scale = S::from_f64(1.0 / keep);
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.gen::<f64>() < keep {
            scale
        } else {
            S::zero()
        }
    })
}

fn validate_tokens<S: Scalar>(
    params: &ModelParams<S>,
    tokens: &[u32],
    t: usize,
) -> Result<(), ModelError> {
    let cfg = params.config();
    if t > cfg.max_seq_len {
        return Err(ModelError::Overlength {
            len: t,
            max: cfg.max_seq_len,
        });
    }
    for &id in tokens {
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::BadTokenId {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    Ok(())
}

/// Runs the stacked forward pass over `b` sequences of shared length `t`.
fn run_forward<S: Scalar>(
    params: &ModelParams<S>,
    tokens: &[u32],
    b: usize,
    t: usize,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardCache<S>, ModelError> {
    debug_assert_eq!(tokens.len(), b * t);
    validate_tokens(params, tokens, t)?;
    let cfg = params.config();
    let f = cfg.width;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let bt = b * t;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let p_drop = cfg.dropout;
    let dropping = p_drop > 0.0 && dropout_rng.is_some();

    // Embeddings.
    let tok_emb = params.mat("tok_emb");
    let pos_emb = params.mat("pos_emb");
    let mut x = Array2::<S>::zeros((bt, f));
    for i in 0..bt {
        let tok = tokens[i] as usize;
        let pos = i % t;
        let te = tok_emb.row(tok);
        let pe = pos_emb.row(pos);
        let mut row = x.row_mut(i);
        for j in 0..f {
            row[j] = te[j] + pe[j];
        }
    }
    let emb_drop = if dropping {
        let m = dropout_mask::<S>(dropout_rng.as_deref_mut().unwrap(), bt, f, p_drop);
        x = &x * &m;
        Some(m)
    } else {
        None
    };

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let x_in = x;
        let ln1 = layernorm_rows(
            &x_in.view(),
            &params.vec1(&tensor_name(l, "attn_norm.gain")),
            &params.vec1(&tensor_name(l, "attn_norm.bias")),
        );
        let q = ln1.y.dot(&params.mat(&tensor_name(l, "attn.q_w")))
            + &params.vec1(&tensor_name(l, "attn.q_b"));
        let k = ln1.y.dot(&params.mat(&tensor_name(l, "attn.k_w")))
            + &params.vec1(&tensor_name(l, "attn.k_b"));
        let v = ln1.y.dot(&params.mat(&tensor_name(l, "attn.v_w")))
            + &params.vec1(&tensor_name(l, "attn.v_b"));

        let mut probs = Vec::with_capacity(b * heads);
        let mut ctx = Array2::<S>::zeros((bt, f));
        for bi in 0..b {
            let rows = s![bi * t..(bi + 1) * t, ..];
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qs = q.slice(rows).slice_move(cols);
                let ks = k.slice(rows).slice_move(cols);
                let vs = v.slice(rows).slice_move(cols);
                let mut sc = qs.dot(&ks.t());
                // Causal softmax row by row: position i sees columns 0..=i.
                for i in 0..t {
                    let mut max = S::neg_infinity();
                    for j in 0..=i {
                        sc[[i, j]] = sc[[i, j]] * scale;
                        if sc[[i, j]] > max {
                            max = sc[[i, j]];
                        }
                    }
                    let mut sum = S::zero();
                    for j in 0..=i {
                        let e = (sc[[i, j]] - max).exp();
                        sc[[i, j]] = e;
                        sum = sum + e;
                    }
                    for j in 0..t {
                        if j <= i {
                            sc[[i, j]] = sc[[i, j]] / sum;
                        } else {
                            sc[[i, j]] = S::zero();
                        }
                    }
                }
                let ctx_h = sc.dot(&vs);
                ctx.slice_mut(s![bi * t..(bi + 1) * t, h * dh..(h + 1) * dh])
                    .assign(&ctx_h);
                probs.push(sc);
            }
        }
        let mut attn_out = ctx.dot(&params.mat(&tensor_name(l, "attn.out_w")))
            + &params.vec1(&tensor_name(l, "attn.out_b"));
        let attn_drop = if dropping {
            let m = dropout_mask::<S>(dropout_rng.as_deref_mut().unwrap(), bt, f, p_drop);
            attn_out = &attn_out * &m;
            Some(m)
        } else {
            None
        };
        let x_mid = &x_in + &attn_out;

        let ln2 = layernorm_rows(
            &x_mid.view(),
            &params.vec1(&tensor_name(l, "ff_norm.gain")),
            &params.vec1(&tensor_name(l, "ff_norm.bias")),
        );
        let h1 = ln2.y.dot(&params.mat(&tensor_name(l, "ff.in_w")))
            + &params.vec1(&tensor_name(l, "ff.in_b"));
        let u = h1.mapv(gelu);
        let mut ff_out = u.dot(&params.mat(&tensor_name(l, "ff.out_w")))
            + &params.vec1(&tensor_name(l, "ff.out_b"));
        let ff_drop = if dropping {
            let m = dropout_mask::<S>(dropout_rng.as_deref_mut().unwrap(), bt, f, p_drop);
            ff_out = &ff_out * &m;
            Some(m)
        } else {
            None
        };
        x = &x_mid + &ff_out;

        layers.push(LayerCache {
            x_in,
            ln1,
            q,
            k,
            v,
            probs,
            ctx,
            x_mid,
            ln2,
            h1,
            u,
            attn_drop,
            ff_drop,
        });
    }

    let x_final = x;
    let lnf = layernorm_rows(
        &x_final.view(),
        &params.vec1("final_norm.gain"),
        &params.vec1("final_norm.bias"),
    );
    let logits = lnf.y.dot(&params.mat("lm_head.w")) + &params.vec1("lm_head.b");
    Ok(ForwardCache {
        emb_drop,
        layers,
        x_final,
        lnf,
        logits,
    })
}

/// Full-sequence forward pass: logits for every position (seq_len × vocab).
pub fn forward<S: Scalar>(
    params: &ModelParams<S>,
    tokens: &[u32],
) -> Result<Array2<S>, ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::TooShort { len: 0 });
    }
    let cache = run_forward(params, tokens, 1, tokens.len(), None)?;
    Ok(cache.logits)
}

fn add_mat<S: Scalar>(grads: &mut [S], layout: &ParamLayout, name: &str, contrib: &Array2<S>) {
    let slot = layout.slice_of_mut(grads, name);
    debug_assert_eq!(slot.len(), contrib.len());
    for (dst, &src) in slot.iter_mut().zip(contrib.iter()) {
        *dst = *dst + src;
    }
}

fn add_vec<S: Scalar>(grads: &mut [S], layout: &ParamLayout, name: &str, contrib: &Array1<S>) {
    let slot = layout.slice_of_mut(grads, name);
    debug_assert_eq!(slot.len(), contrib.len());
    for (dst, &src) in slot.iter_mut().zip(contrib.iter()) {
        *dst = *dst + src;
    }
}

fn check_batch(batch: &[ScoredSeq<'_>]) -> Result<(usize, usize), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let t = batch[0].tokens.len();
    for seq in batch {
        if seq.tokens.len() != t || seq.score_mask.len() != t {
            return Err(ModelError::RaggedBatch);
        }
    }
    if t < 2 {
        return Err(ModelError::TooShort { len: t });
    }
    Ok((batch.len(), t))
}

/// Mean next-token cross-entropy over the batch's scored positions, with
/// exact gradients for every parameter.
///
/// Pass a dropout rng to enable the config's dropout for this call; without
/// one the computation is a pure function of (params, batch).
pub fn loss_and_grads<S: Scalar>(
    params: &ModelParams<S>,
    batch: &[ScoredSeq<'_>],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<LossGrads<S>, ModelError> {
    let (b, t) = check_batch(batch)?;
    let cfg = params.config();
    let f = cfg.width;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let v_size = cfg.vocab_size;
    let layout = params.layout();

    let mut flat_tokens = Vec::with_capacity(b * t);
    for seq in batch {
        flat_tokens.extend_from_slice(seq.tokens);
    }
    let cache = run_forward(params, &flat_tokens, b, t, dropout_rng)?;

    // Count scored targets first so each contributes CE / n to the mean.
    let mut n_scored = 0usize;
    for seq in batch {
        n_scored += seq.score_mask[1..].iter().filter(|&&m| m).count();
    }
    if n_scored == 0 {
        return Err(ModelError::AllMasked);
    }
    let inv_n = S::from_f64(1.0 / n_scored as f64);

    let mut total_ce = 0.0f64;
    let mut dlogits = Array2::<S>::zeros((b * t, v_size));
    let mut prob_buf = vec![S::zero(); v_size];
    for (bi, seq) in batch.iter().enumerate() {
        for pos in 1..t {
            if !seq.score_mask[pos] {
                continue;
            }
            let row_idx = bi * t + pos - 1;
            let target = seq.tokens[pos] as usize;
            let logit_row = cache.logits.row(row_idx);
            total_ce -= log_prob_of(logit_row.as_slice().unwrap(), target);
            prob_buf.copy_from_slice(logit_row.as_slice().unwrap());
            softmax_in_place(&mut prob_buf);
            let mut drow = dlogits.row_mut(row_idx);
            for c in 0..v_size {
                let delta = if c == target { S::one() } else { S::zero() };
                drow[c] = (prob_buf[c] - delta) * inv_n;
            }
        }
    }
    let loss = total_ce / n_scored as f64;

    // Backward.
    let mut grads = vec![S::zero(); layout.total_params()];
    let w_out = params.mat("lm_head.w");
    add_mat(&mut grads, layout, "lm_head.w", &cache.lnf.y.t().dot(&dlogits));
    add_vec(&mut grads, layout, "lm_head.b", &col_sums(&dlogits.view()));
    let d_lnf_y = dlogits.dot(&w_out.t());
    let (mut dx, dgf, dbf) = super::math::layernorm_backward(
        &d_lnf_y.view(),
        &cache.x_final.view(),
        &cache.lnf,
        &params.vec1("final_norm.gain"),
    );
    add_vec(&mut grads, layout, "final_norm.gain", &dgf);
    add_vec(&mut grads, layout, "final_norm.bias", &dbf);

    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];

        // Feed-forward branch.
        let mut d_ffout = dx.clone();
        if let Some(m) = &lc.ff_drop {
            d_ffout = &d_ffout * m;
        }
        add_vec(&mut grads, layout, &tensor_name(l, "ff.out_b"), &col_sums(&d_ffout.view()));
        add_mat(&mut grads, layout, &tensor_name(l, "ff.out_w"), &lc.u.t().dot(&d_ffout));
        let d_u = d_ffout.dot(&params.mat(&tensor_name(l, "ff.out_w")).t());
        let d_h1 = &d_u * &lc.h1.mapv(dgelu);
        add_vec(&mut grads, layout, &tensor_name(l, "ff.in_b"), &col_sums(&d_h1.view()));
        add_mat(&mut grads, layout, &tensor_name(l, "ff.in_w"), &lc.ln2.y.t().dot(&d_h1));
        let d_ln2_y = d_h1.dot(&params.mat(&tensor_name(l, "ff.in_w")).t());
        let (d_xmid_norm, dg2, db2) = super::math::layernorm_backward(
            &d_ln2_y.view(),
            &lc.x_mid.view(),
            &lc.ln2,
            &params.vec1(&tensor_name(l, "ff_norm.gain")),
        );
        add_vec(&mut grads, layout, &tensor_name(l, "ff_norm.gain"), &dg2);
        add_vec(&mut grads, layout, &tensor_name(l, "ff_norm.bias"), &db2);
        let d_xmid = &dx + &d_xmid_norm;

        // Attention branch.
        let mut d_attnout = d_xmid.clone();
        if let Some(m) = &lc.attn_drop {
            d_attnout = &d_attnout * m;
        }
        add_vec(&mut grads, layout, &tensor_name(l, "attn.out_b"), &col_sums(&d_attnout.view()));
        add_mat(&mut grads, layout, &tensor_name(l, "attn.out_w"), &lc.ctx.t().dot(&d_attnout));
        let d_ctx = d_attnout.dot(&params.mat(&tensor_name(l, "attn.out_w")).t());

        let mut dq = Array2::<S>::zeros((b * t, f));
        let mut dk = Array2::<S>::zeros((b * t, f));
        let mut dv = Array2::<S>::zeros((b * t, f));
        for bi in 0..b {
            for h in 0..heads {
                let p = &lc.probs[bi * heads + h];
                let rows = s![bi * t..(bi + 1) * t, h * dh..(h + 1) * dh];
                let d_ctx_s = d_ctx.slice(rows);
                let ks = lc.k.slice(rows);
                let qs = lc.q.slice(rows);
                let vs = lc.v.slice(rows);

                let dp = d_ctx_s.dot(&vs.t());
                dv.slice_mut(rows).assign(&p.t().dot(&d_ctx_s));
                // Softmax backward per causal row, folding in the 1/sqrt(dh).
                let mut ds = Array2::<S>::zeros((t, t));
                for i in 0..t {
                    let mut dot = S::zero();
                    for j in 0..=i {
                        dot = dot + dp[[i, j]] * p[[i, j]];
                    }
                    for j in 0..=i {
                        ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                    }
                }
                dq.slice_mut(rows).assign(&ds.dot(&ks));
                dk.slice_mut(rows).assign(&ds.t().dot(&qs));
            }
        }
        add_vec(&mut grads, layout, &tensor_name(l, "attn.q_b"), &col_sums(&dq.view()));
        add_vec(&mut grads, layout, &tensor_name(l, "attn.k_b"), &col_sums(&dk.view()));
        add_vec(&mut grads, layout, &tensor_name(l, "attn.v_b"), &col_sums(&dv.view()));
        let a = &lc.ln1.y;
        add_mat(&mut grads, layout, &tensor_name(l, "attn.q_w"), &a.t().dot(&dq));
        add_mat(&mut grads, layout, &tensor_name(l, "attn.k_w"), &a.t().dot(&dk));
        add_mat(&mut grads, layout, &tensor_name(l, "attn.v_w"), &a.t().dot(&dv));
        let d_a = dq.dot(&params.mat(&tensor_name(l, "attn.q_w")).t())
            + dk.dot(&params.mat(&tensor_name(l, "attn.k_w")).t())
            + dv.dot(&params.mat(&tensor_name(l, "attn.v_w")).t());
        let (d_xin_norm, dg1, db1) = super::math::layernorm_backward(
            &d_a.view(),
            &lc.x_in.view(),
            &lc.ln1,
            &params.vec1(&tensor_name(l, "attn_norm.gain")),
        );
        add_vec(&mut grads, layout, &tensor_name(l, "attn_norm.gain"), &dg1);
        add_vec(&mut grads, layout, &tensor_name(l, "attn_norm.bias"), &db1);
        dx = &d_xmid + &d_xin_norm;
    }

    if let Some(m) = &cache.emb_drop {
        dx = &dx * m;
    }
    // Scatter into the embedding tables.
    {
        let tok_slot = layout.slice_of_mut(&mut grads, "tok_emb");
        for i in 0..b * t {
            let tok = flat_tokens[i] as usize;
            let drow = dx.row(i);
            for j in 0..f {
                tok_slot[tok * f + j] = tok_slot[tok * f + j] + drow[j];
            }
        }
    }
    {
        let pos_slot = layout.slice_of_mut(&mut grads, "pos_emb");
        for i in 0..b * t {
            let pos = i % t;
            let drow = dx.row(i);
            for j in 0..f {
                pos_slot[pos * f + j] = pos_slot[pos * f + j] + drow[j];
            }
        }
    }

    Ok(LossGrads {
        loss,
        grads,
        n_scored,
    })
}

/// Single-sequence convenience wrapper around [`loss_and_grads`].
pub fn loss_and_grads_single<S: Scalar>(
    params: &ModelParams<S>,
    tokens: &[u32],
    score_mask: &[bool],
) -> Result<LossGrads<S>, ModelError> {
    loss_and_grads(
        params,
        &[ScoredSeq {
            tokens,
            score_mask,
        }],
        None,
    )
}

/// Total teacher-forced cross-entropy (nats) and scored-position count,
/// without gradients. Sequences need not share a length.
pub fn batch_cross_entropy<S: Scalar>(
    params: &ModelParams<S>,
    batch: &[ScoredSeq<'_>],
) -> Result<(f64, usize), ModelError> {
    let mut total = 0.0f64;
    let mut n = 0usize;
    for seq in batch {
        let t = seq.tokens.len();
        if t < 2 {
            return Err(ModelError::TooShort { len: t });
        }
        if seq.score_mask.len() != t {
            return Err(ModelError::RaggedBatch);
        }
        let cache = run_forward(params, seq.tokens, 1, t, None)?;
        for pos in 1..t {
            if !seq.score_mask[pos] {
                continue;
            }
            let row = cache.logits.row(pos - 1);
            total -= log_prob_of(row.as_slice().unwrap(), seq.tokens[pos] as usize);
            n += 1;
        }
    }
    Ok((total, n))
}

/// Verification utility: maximum relative error between analytic gradients
/// and central finite differences of step `h`, over every parameter.
///
/// Relative error uses a guarded denominator max(|a|, |n|, 1e-6) so
/// near-zero pairs compare absolutely.
pub fn finite_diff_max_rel_err(
    params: &ModelParams<f64>,
    batch: &[ScoredSeq<'_>],
    h: f64,
) -> Result<f64, ModelError> {
    let analytic = loss_and_grads(params, batch, None)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..probe.n_params() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = loss_and_grads(&probe, batch, None)?.loss;
        probe.data_mut()[i] = orig - h;
        let down = loss_and_grads(&probe, batch, None)?.loss;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.grads[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Incremental decoding state: cached keys/values per layer, advanced one
/// token at a time. Produces the same logits as the full forward pass.
#[derive(Debug, Clone)]
pub struct DecoderState<S: Scalar> {
    pos: usize,
    /// Per layer, `pos` rows of `width` values.
    k_cache: Vec<Vec<S>>,
    v_cache: Vec<Vec<S>>,
}

impl<S: Scalar> DecoderState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        let l = params.config().n_layers;
        Self {
            pos: 0,
            k_cache: vec![Vec::new(); l],
            v_cache: vec![Vec::new(); l],
        }
    }

    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }

    /// Consumes one token and returns the next-token logits row.
    pub fn advance(&mut self, params: &ModelParams<S>, token: u32) -> Result<Vec<S>, ModelError> {
        let cfg = params.config();
        let f = cfg.width;
        let heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        if self.pos >= cfg.max_seq_len {
            return Err(ModelError::Overlength {
                len: self.pos + 1,
                max: cfg.max_seq_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::BadTokenId {
                id: token,
                vocab: cfg.vocab_size,
            });
        }

        let tok_emb = params.mat("tok_emb");
        let pos_emb = params.mat("pos_emb");
        let mut x = Array2::<S>::zeros((1, f));
        {
            let te = tok_emb.row(token as usize);
            let pe = pos_emb.row(self.pos);
            let mut row = x.row_mut(0);
            for j in 0..f {
                row[j] = te[j] + pe[j];
            }
        }

        let t_new = self.pos + 1;
        for l in 0..cfg.n_layers {
            let ln1 = layernorm_rows(
                &x.view(),
                &params.vec1(&tensor_name(l, "attn_norm.gain")),
                &params.vec1(&tensor_name(l, "attn_norm.bias")),
            );
            let q = ln1.y.dot(&params.mat(&tensor_name(l, "attn.q_w")))
                + &params.vec1(&tensor_name(l, "attn.q_b"));
            let k = ln1.y.dot(&params.mat(&tensor_name(l, "attn.k_w")))
                + &params.vec1(&tensor_name(l, "attn.k_b"));
            let v = ln1.y.dot(&params.mat(&tensor_name(l, "attn.v_w")))
                + &params.vec1(&tensor_name(l, "attn.v_b"));
            self.k_cache[l].extend(k.row(0).iter().copied());
            self.v_cache[l].extend(v.row(0).iter().copied());
            let keys = ArrayView2::from_shape((t_new, f), &self.k_cache[l]).unwrap();
            let vals = ArrayView2::from_shape((t_new, f), &self.v_cache[l]).unwrap();

            let mut ctx = Array2::<S>::zeros((1, f));
            let mut weights = vec![S::zero(); t_new];
            for h in 0..heads {
                let qh = q.slice(s![0, h * dh..(h + 1) * dh]);
                let kh = keys.slice(s![.., h * dh..(h + 1) * dh]);
                let vh = vals.slice(s![.., h * dh..(h + 1) * dh]);
                for (j, w) in weights.iter_mut().enumerate() {
                    let krow = kh.row(j);
                    let mut acc = S::zero();
                    for d in 0..dh {
                        acc = acc + qh[d] * krow[d];
                    }
                    *w = acc * scale;
                }
                softmax_in_place(&mut weights);
                let mut ctx_h = ctx.slice_mut(s![0, h * dh..(h + 1) * dh]);
                for j in 0..t_new {
                    let w = weights[j];
                    let vrow = vh.row(j);
                    for d in 0..dh {
                        ctx_h[d] = ctx_h[d] + w * vrow[d];
                    }
                }
            }
            let attn_out = ctx.dot(&params.mat(&tensor_name(l, "attn.out_w")))
                + &params.vec1(&tensor_name(l, "attn.out_b"));
            let x_mid = &x + &attn_out;
            let ln2 = layernorm_rows(
                &x_mid.view(),
                &params.vec1(&tensor_name(l, "ff_norm.gain")),
                &params.vec1(&tensor_name(l, "ff_norm.bias")),
            );
            let h1 = ln2.y.dot(&params.mat(&tensor_name(l, "ff.in_w")))
                + &params.vec1(&tensor_name(l, "ff.in_b"));
            let u = h1.mapv(gelu);
            let ff_out = u.dot(&params.mat(&tensor_name(l, "ff.out_w")))
                + &params.vec1(&tensor_name(l, "ff.out_b"));
            x = &x_mid + &ff_out;
        }

        let lnf = layernorm_rows(
            &x.view(),
            &params.vec1("final_norm.gain"),
            &params.vec1("final_norm.bias"),
        );
        let logits = lnf.y.dot(&params.mat("lm_head.w")) + &params.vec1("lm_head.b");
        self.pos += 1;
        Ok(logits.row(0).to_vec())
    }

    /// Feeds a token slice, returning the logits after the last one.
    pub fn advance_all(
        &mut self,
        params: &ModelParams<S>,
        tokens: &[u32],
    ) -> Result<Vec<S>, ModelError> {
        let mut last = None;
        for &tok in tokens {
            last = Some(self.advance(params, tok)?);
        }
        last.ok_or(ModelError::TooShort { len: 0 })
    }
}
