//! Pre-LN transformer encoder with attentive token pooling.
//!
//! In the second half of the blocks, the class token's pre-softmax attention
//! logits score every patch token and only the top `floor(r * n)` patch
//! tokens survive the block.

use std::fmt;
use std::str::FromStr;

use crate::app::{selection_margin, top_k_indices};
use crate::error::{ApvitError, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    gelu, gelu_backward, gather_rows, layer_norm, layer_norm_backward, matmul, matmul_backward,
    matmul_nt, matmul_nt_backward, scatter_rows, softmax_rows, softmax_rows_backward,
    LayerNormCache, Tensor, LN_EPS,
};

/// Hidden width of the MLP relative to the embedding width.
pub const MLP_RATIO: usize = 4;

/// How per-head class logits are combined into one score per token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AtpVariant {
    Sum,
    Abs,
    Max,
}

impl FromStr for AtpVariant {
    type Err = ApvitError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SUM" => Ok(Self::Sum),
            "ABS" => Ok(Self::Abs),
            "MAX" => Ok(Self::Max),
            other => Err(ApvitError::Config(format!("unknown ATP variant {other:?}"))),
        }
    }
}

impl fmt::Display for AtpVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "SUM",
            Self::Abs => "ABS",
            Self::Max => "MAX",
        })
    }
}

/// Token sequence with the class token at row 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq<T = f64> {
    /// `[T + 1, D]`
    pub tokens: Tensor<T>,
    /// Original flat patch index of every patch row, ascending.
    pub kept_patch_ids: Vec<usize>,
}

impl<T: Scalar> TokenSeq<T> {
    pub fn new(tokens: Tensor<T>, kept_patch_ids: Vec<usize>) -> Result<Self> {
        if tokens.rank() != 2 || tokens.rows() != kept_patch_ids.len() + 1 {
            return Err(ApvitError::Dimension(format!(
                "token matrix {:?} does not hold a class token plus {} patches",
                tokens.shape(),
                kept_patch_ids.len()
            )));
        }
        Ok(Self {
            tokens,
            kept_patch_ids,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.kept_patch_ids.len()
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams<T = f64> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> BlockParams<T> {
    /// All-zero parameters, including the LayerNorm gains.
    pub fn zeros(d: usize) -> Self {
        let hidden = MLP_RATIO * d;
        Self {
            ln1_gamma: Tensor::zeros(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ln2_gamma: Tensor::zeros(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.dim(0)
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named(&self) -> [(&'static str, &Tensor<T>); 12] {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.wo", &self.wo),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("mlp.w1", &self.w1),
            ("mlp.b1", &self.b1),
            ("mlp.w2", &self.w2),
            ("mlp.b2", &self.b2),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 12] {
        [
            ("ln1.gamma", &mut self.ln1_gamma),
            ("ln1.beta", &mut self.ln1_beta),
            ("attn.wq", &mut self.wq),
            ("attn.wk", &mut self.wk),
            ("attn.wv", &mut self.wv),
            ("attn.wo", &mut self.wo),
            ("ln2.gamma", &mut self.ln2_gamma),
            ("ln2.beta", &mut self.ln2_beta),
            ("mlp.w1", &mut self.w1),
            ("mlp.b1", &mut self.b1),
            ("mlp.w2", &mut self.w2),
            ("mlp.b2", &mut self.b2),
        ]
    }
}

/// Pre-softmax, scaled class-token logits against every patch token.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnRecord<T = f64> {
    /// `[heads, T]`
    pub class_logits_per_head: Tensor<T>,
}

// ---------------------------------------------------------------------------
// keep schedule

/// Patch-token count after every block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeepSchedule {
    pub initial: usize,
    pub per_block_patch_counts: Vec<usize>,
    pub atp_start_block: usize,
}

impl KeepSchedule {
    pub fn blocks(&self) -> usize {
        self.per_block_patch_counts.len()
    }

    pub fn final_patch_count(&self) -> usize {
        *self.per_block_patch_counts.last().unwrap_or(&self.initial)
    }

    /// Tokens that reach the head, class token included.
    pub fn total_reserved(&self) -> usize {
        self.final_patch_count() + 1
    }

    /// Patch tokens entering each block.
    pub fn block_input_counts(&self) -> Vec<usize> {
        std::iter::once(self.initial)
            .chain(self.per_block_patch_counts.iter().copied())
            .take(self.blocks())
            .collect()
    }
}

/// Keeps all `k` patch tokens through the first `m / 2` blocks, then
/// `floor(r * count)` after each later block. Counts never drop below one.
pub fn keep_schedule(k: usize, r: f64, m: usize) -> Result<KeepSchedule> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(ApvitError::Config(format!("keep rate {r} outside (0, 1]")));
    }
    if !m.is_multiple_of(2) {
        return Err(ApvitError::Config(format!("block count {m} must be even")));
    }
    if k == 0 {
        return Err(ApvitError::Config("keep number must be positive".into()));
    }
    let start = m / 2;
    let mut counts = Vec::with_capacity(m);
    let mut n = k;
    for block in 0..m {
        if block >= start {
            // The guard absorbs representation error, e.g. 0.9 * 160.
            n = ((r * n as f64 + 1e-9).floor() as usize).max(1);
        }
        counts.push(n);
    }
    Ok(KeepSchedule {
        initial: k,
        per_block_patch_counts: counts,
        atp_start_block: start,
    })
}

// ---------------------------------------------------------------------------
// multi-head self-attention

#[derive(Clone, Debug)]
pub struct MsaCache<T = f64> {
    input: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    probs: Vec<Tensor<T>>,
    concat: Tensor<T>,
}

fn head_dim(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(ApvitError::Config(format!(
            "embedding width {d} not divisible by {heads} heads"
        )));
    }
    Ok(d / heads)
}

/// Multi-head attention over already-normalized tokens `h: [n, D]`.
/// Returns the projected output and the class row of every head's logits.
pub fn msa_forward<T: Scalar>(
    h: &Tensor<T>,
    params: &BlockParams<T>,
    heads: usize,
) -> Result<(Tensor<T>, AttnRecord<T>, MsaCache<T>)> {
    let d = params.dim();
    let hd = head_dim(d, heads)?;
    let n = h.rows();
    let scale = T::one() / T::from_usize_lossy(hd).sqrt();
    let q = matmul(h, &params.wq)?;
    let k = matmul(h, &params.wk)?;
    let v = matmul(h, &params.wv)?;
    let mut concat = Tensor::zeros(&[n, d]);
    let mut probs = Vec::with_capacity(heads);
    let mut class_rows = Vec::with_capacity(heads * n.saturating_sub(1));
    for head in 0..heads {
        let (lo, hi) = (head * hd, (head + 1) * hd);
        let qh = q.slice_cols(lo, hi);
        let kh = k.slice_cols(lo, hi);
        let vh = v.slice_cols(lo, hi);
        let logits = matmul_nt(&qh, &kh)?.scale(scale);
        class_rows.extend_from_slice(&logits.row(0)[1..]);
        let a = softmax_rows(&logits);
        concat.write_cols(lo, &matmul(&a, &vh)?);
        probs.push(a);
    }
    let out = matmul(&concat, &params.wo)?;
    let record = AttnRecord {
        class_logits_per_head: Tensor::new(vec![heads, n - 1], class_rows)?,
    };
    let cache = MsaCache {
        input: h.clone(),
        q,
        k,
        v,
        probs,
        concat,
    };
    Ok((out, record, cache))
}

/// Gradients of [`msa_forward`]: `(d_input, dwq, dwk, dwv, dwo)`.
pub fn msa_backward<T: Scalar>(
    cache: &MsaCache<T>,
    params: &BlockParams<T>,
    d_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = params.dim();
    let heads = cache.probs.len();
    let hd = d / heads;
    let n = cache.input.rows();
    let scale = T::one() / T::from_usize_lossy(hd).sqrt();
    let (d_concat, dwo) = matmul_backward(&cache.concat, &params.wo, d_out);
    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, d]);
    for (head, a) in cache.probs.iter().enumerate() {
        let (lo, hi) = (head * hd, (head + 1) * hd);
        let qh = cache.q.slice_cols(lo, hi);
        let kh = cache.k.slice_cols(lo, hi);
        let vh = cache.v.slice_cols(lo, hi);
        let d_oh = d_concat.slice_cols(lo, hi);
        let (d_a, d_vh) = matmul_backward(a, &vh, &d_oh);
        let d_logits = softmax_rows_backward(a, &d_a).scale(scale);
        let (d_qh, d_kh) = matmul_nt_backward(&qh, &kh, &d_logits);
        dq.write_cols(lo, &d_qh);
        dk.write_cols(lo, &d_kh);
        dv.write_cols(lo, &d_vh);
    }
    let (mut d_in, dwq) = matmul_backward(&cache.input, &params.wq, &dq);
    let (d_in_k, dwk) = matmul_backward(&cache.input, &params.wk, &dk);
    let (d_in_v, dwv) = matmul_backward(&cache.input, &params.wv, &dv);
    d_in.add_assign(&d_in_k);
    d_in.add_assign(&d_in_v);
    (d_in, dwq, dwk, dwv, dwo)
}

// ---------------------------------------------------------------------------
// encoder block

#[derive(Clone, Debug)]
pub struct BlockCache<T = f64> {
    ln1: LayerNormCache<T>,
    msa: MsaCache<T>,
    ln2: LayerNormCache<T>,
    h2: Tensor<T>,
    pre_act: Tensor<T>,
    act: Tensor<T>,
}

fn block_forward_tokens<T: Scalar>(
    x: &Tensor<T>,
    params: &BlockParams<T>,
    heads: usize,
) -> Result<(Tensor<T>, AttnRecord<T>, BlockCache<T>)> {
    let eps = T::lit(LN_EPS);
    let (h1, ln1) = layer_norm(x, &params.ln1_gamma, &params.ln1_beta, eps)?;
    let (attn, record, msa) = msa_forward(&h1, params, heads)?;
    let x1 = x.add(&attn);
    let (h2, ln2) = layer_norm(&x1, &params.ln2_gamma, &params.ln2_beta, eps)?;
    let mut pre_act = matmul(&h2, &params.w1)?;
    pre_act.add_row_broadcast(&params.b1);
    let act = gelu(&pre_act);
    let mut mlp = matmul(&act, &params.w2)?;
    mlp.add_row_broadcast(&params.b2);
    let out = x1.add(&mlp);
    let cache = BlockCache {
        ln1,
        msa,
        ln2,
        h2,
        pre_act,
        act,
    };
    Ok((out, record, cache))
}

/// `x + MSA(LN1(x))` followed by `x + MLP(LN2(x))`.
pub fn block_forward<T: Scalar>(
    seq: &TokenSeq<T>,
    params: &BlockParams<T>,
    heads: usize,
) -> Result<(TokenSeq<T>, AttnRecord<T>, BlockCache<T>)> {
    let (out, record, cache) = block_forward_tokens(&seq.tokens, params, heads)?;
    Ok((
        TokenSeq {
            tokens: out,
            kept_patch_ids: seq.kept_patch_ids.clone(),
        },
        record,
        cache,
    ))
}

/// Gradient on the block input and on every block parameter.
pub fn block_backward<T: Scalar>(
    cache: &BlockCache<T>,
    params: &BlockParams<T>,
    d_out: &Tensor<T>,
) -> (Tensor<T>, BlockParams<T>) {
    let (d_act, dw2) = matmul_backward(&cache.act, &params.w2, d_out);
    let db2 = d_out.sum_rows();
    let d_pre = gelu_backward(&cache.pre_act, &d_act);
    let db1 = d_pre.sum_rows();
    let (d_h2, dw1) = matmul_backward(&cache.h2, &params.w1, &d_pre);
    let (d_ln2, dg2, dbeta2) = layer_norm_backward(&cache.ln2, &params.ln2_gamma, &d_h2);
    let mut d_x1 = d_out.clone();
    d_x1.add_assign(&d_ln2);

    let (d_h1, dwq, dwk, dwv, dwo) = msa_backward(&cache.msa, params, &d_x1);
    let (d_ln1, dg1, dbeta1) = layer_norm_backward(&cache.ln1, &params.ln1_gamma, &d_h1);
    let mut d_x = d_x1;
    d_x.add_assign(&d_ln1);
    (
        d_x,
        BlockParams {
            ln1_gamma: dg1,
            ln1_beta: dbeta1,
            wq: dwq,
            wk: dwk,
            wv: dwv,
            wo: dwo,
            ln2_gamma: dg2,
            ln2_beta: dbeta2,
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
        },
    )
}

// ---------------------------------------------------------------------------
// token pooling

/// Combines per-head class logits into one score per patch token.
pub fn atp_scores<T: Scalar>(rec: &AttnRecord<T>, variant: AtpVariant) -> Tensor<T> {
    let logits = &rec.class_logits_per_head;
    let (heads, t) = (logits.dim(0), logits.dim(1));
    let mut scores = match variant {
        AtpVariant::Sum | AtpVariant::Abs => vec![T::zero(); t],
        AtpVariant::Max => vec![T::neg_infinity(); t],
    };
    for h in 0..heads {
        for (s, &v) in scores.iter_mut().zip(logits.row(h)) {
            match variant {
                AtpVariant::Sum => *s += v,
                AtpVariant::Abs => *s += v.abs(),
                AtpVariant::Max => *s = s.max(v),
            }
        }
    }
    Tensor::new(vec![t], scores).expect("length matches")
}

/// Current patch positions (0-based, excluding the class token) of the
/// `keep_num` best scores, ascending.
pub fn atp_keep_positions<T: Scalar>(scores: &Tensor<T>, keep_num: usize) -> Result<Vec<usize>> {
    let t = scores.len();
    if keep_num == 0 || keep_num > t {
        return Err(ApvitError::Config(format!(
            "ATP keep number {keep_num} outside [1, {t}]"
        )));
    }
    Ok(top_k_indices(scores.data(), keep_num))
}

fn rows_for_positions(positions: &[usize]) -> Vec<usize> {
    std::iter::once(0).chain(positions.iter().map(|p| p + 1)).collect()
}

fn apply_positions<T: Scalar>(seq: &TokenSeq<T>, positions: &[usize]) -> Result<TokenSeq<T>> {
    let tokens = gather_rows(&seq.tokens, &rows_for_positions(positions))?;
    let kept_patch_ids = positions.iter().map(|&p| seq.kept_patch_ids[p]).collect();
    Ok(TokenSeq {
        tokens,
        kept_patch_ids,
    })
}

/// Keeps the class token and the `keep_num` highest-scoring patch tokens,
/// preserving their relative order.
pub fn atp_select<T: Scalar>(
    seq: &TokenSeq<T>,
    scores: &Tensor<T>,
    keep_num: usize,
) -> Result<TokenSeq<T>> {
    if scores.len() != seq.patch_count() {
        return Err(ApvitError::Dimension(format!(
            "{} scores for {} patch tokens",
            scores.len(),
            seq.patch_count()
        )));
    }
    apply_positions(seq, &atp_keep_positions(scores, keep_num)?)
}

// ---------------------------------------------------------------------------
// encoder

#[derive(Clone, Debug)]
pub struct EncoderOutput<T = f64> {
    /// Tokens after the last block (and its pooling).
    pub seq: TokenSeq<T>,
    /// Surviving original patch ids after every block.
    pub trail: Vec<Vec<usize>>,
    pub records: Vec<AttnRecord<T>>,
    /// Patch positions kept at each block, `None` where nothing was dropped.
    pub selections: Vec<Option<Vec<usize>>>,
    /// Smallest kept score minus largest dropped score per pooling block.
    pub margins: Vec<Option<T>>,
    caches: Vec<BlockCache<T>>,
    input_rows: Vec<usize>,
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn class_embedding(&self) -> Tensor<T> {
        Tensor::new(vec![self.seq.tokens.cols()], self.seq.tokens.row(0).to_vec())
            .expect("row length")
    }
}

/// Runs every block and applies token pooling wherever the schedule asks for
/// fewer patch tokens than the block received. `forced` replays earlier
/// selections instead of recomputing them.
pub fn encoder_forward<T: Scalar>(
    seq: TokenSeq<T>,
    blocks: &[BlockParams<T>],
    schedule: &KeepSchedule,
    heads: usize,
    variant: AtpVariant,
    forced: Option<&[Option<Vec<usize>>]>,
) -> Result<EncoderOutput<T>> {
    if seq.patch_count() != schedule.initial || blocks.len() != schedule.blocks() {
        return Err(ApvitError::Config(format!(
            "schedule for {} blocks from {} patches does not fit {} blocks over {} patches",
            schedule.blocks(),
            schedule.initial,
            blocks.len(),
            seq.patch_count()
        )));
    }
    let mut seq = seq;
    let m = blocks.len();
    let mut out = EncoderOutput {
        seq: seq.clone(),
        trail: Vec::with_capacity(m),
        records: Vec::with_capacity(m),
        selections: Vec::with_capacity(m),
        margins: Vec::with_capacity(m),
        caches: Vec::with_capacity(m),
        input_rows: Vec::with_capacity(m),
    };
    for (i, params) in blocks.iter().enumerate() {
        out.input_rows.push(seq.tokens.rows());
        let (next, record, cache) = block_forward(&seq, params, heads)?;
        seq = next;
        let target = schedule.per_block_patch_counts[i];
        let (selection, margin) = if target < seq.patch_count() {
            let scores = atp_scores(&record, variant);
            let positions = match forced.and_then(|f| f.get(i).cloned().flatten()) {
                Some(p) if p.len() == target => p,
                Some(p) => {
                    return Err(ApvitError::Config(format!(
                        "replayed selection at block {i} keeps {} tokens, schedule wants {target}",
                        p.len()
                    )))
                }
                None => atp_keep_positions(&scores, target)?,
            };
            let margin = selection_margin(scores.data(), &positions);
            seq = apply_positions(&seq, &positions)?;
            (Some(positions), margin)
        } else {
            (None, None)
        };
        out.trail.push(seq.kept_patch_ids.clone());
        out.records.push(record);
        out.selections.push(selection);
        out.margins.push(margin);
        out.caches.push(cache);
    }
    out.seq = seq;
    Ok(out)
}

/// Gradient on the encoder input tokens and on every block, given the
/// gradient on the final token matrix.
pub fn encoder_backward<T: Scalar>(
    out: &EncoderOutput<T>,
    blocks: &[BlockParams<T>],
    d_final: &Tensor<T>,
) -> (Tensor<T>, Vec<BlockParams<T>>) {
    let mut d = d_final.clone();
    let mut grads = Vec::with_capacity(blocks.len());
    for i in (0..blocks.len()).rev() {
        if let Some(positions) = &out.selections[i] {
            d = scatter_rows(&d, &rows_for_positions(positions), out.input_rows[i]);
        }
        let (dx, g) = block_backward(&out.caches[i], &blocks[i], &d);
        grads.push(g);
        d = dx;
    }
    grads.reverse();
    (d, grads)
}
