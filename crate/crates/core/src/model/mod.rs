//! Full classifier: stem, patch pooling, embedding, pooled encoder, head.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::app::{
    criterion_backward, criterion_map, selection_margin, soft_pool, soft_pool_backward,
    top_k_indices, AttentionMap2D, CriterionCache, CriterionKind, LanetParams,
};
use crate::error::{ApvitError, Result};
use crate::scalar::Scalar;
use crate::stem::{
    normalize_image, stem_backward, stem_forward, FeatureMap, StemConfig, StemOutput, StemParams,
};
use crate::tensor::{
    gather_rows, layer_norm, layer_norm_backward, matmul, matmul_backward, scatter_rows,
    LayerNormCache, Tensor, LN_EPS,
};
use crate::transformer::{
    encoder_backward, encoder_forward, keep_schedule, AtpVariant, BlockParams, EncoderOutput,
    KeepSchedule, TokenSeq,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolingMode {
    Hard,
    Soft,
    None,
}

impl FromStr for PoolingMode {
    type Err = ApvitError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HARD" => Ok(Self::Hard),
            "SOFT" => Ok(Self::Soft),
            "NONE" => Ok(Self::None),
            other => Err(ApvitError::Config(format!("unknown pooling mode {other:?}"))),
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hard => "HARD",
            Self::Soft => "SOFT",
            Self::None => "NONE",
        })
    }
}

/// Classification readout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    /// Final class token.
    Clt,
    /// Mean of the surviving patch tokens.
    Gap,
}

impl FromStr for HeadKind {
    type Err = ApvitError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CLT" => Ok(Self::Clt),
            "GAP" => Ok(Self::Gap),
            other => Err(ApvitError::Config(format!("unknown head kind {other:?}"))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Clt => "CLT",
            Self::Gap => "GAP",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApvitConfig {
    pub stem: StemConfig,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Patches kept by the patch-pooling stage.
    pub k: usize,
    /// Fraction of patch tokens kept by each token-pooling block.
    pub r: f64,
    pub criterion: CriterionKind,
    pub atp_variant: AtpVariant,
    pub pooling: PoolingMode,
    pub head: HeadKind,
    pub num_classes: usize,
    pub lanet_ratio: usize,
}

impl Default for ApvitConfig {
    fn default() -> Self {
        Self {
            stem: StemConfig::default(),
            embed_dim: 64,
            blocks: 8,
            heads: 4,
            k: 48,
            r: 0.8,
            criterion: CriterionKind::Abs,
            atp_variant: AtpVariant::Sum,
            pooling: PoolingMode::Hard,
            head: HeadKind::Clt,
            num_classes: 4,
            lanet_ratio: 8,
        }
    }
}

impl ApvitConfig {
    /// Same architecture with every pooling stage disabled.
    pub fn baseline(&self) -> Self {
        Self {
            k: self.stem.patch_count(),
            r: 1.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stem.validate()?;
        let n = self.stem.patch_count();
        if self.k == 0 || self.k > n {
            return Err(ApvitError::Config(format!(
                "keep number k={} outside [1, {n}]",
                self.k
            )));
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(ApvitError::Config(format!("keep rate r={} outside (0, 1]", self.r)));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(ApvitError::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.blocks == 0 || !self.blocks.is_multiple_of(2) {
            return Err(ApvitError::Config(format!(
                "block count {} must be positive and even",
                self.blocks
            )));
        }
        if self.num_classes < 2 {
            return Err(ApvitError::Config("need at least two classes".into()));
        }
        if self.criterion == CriterionKind::Lanet {
            let c = self.stem.out_channels();
            if self.lanet_ratio == 0 || !c.is_multiple_of(self.lanet_ratio) || c < self.lanet_ratio {
                return Err(ApvitError::Config(format!(
                    "lanet_ratio {} does not divide {c} channels",
                    self.lanet_ratio
                )));
            }
        }
        Ok(())
    }

    /// Patch tokens entering the encoder.
    pub fn post_app_count(&self) -> usize {
        match self.pooling {
            PoolingMode::Hard => self.k,
            PoolingMode::Soft | PoolingMode::None => self.stem.patch_count(),
        }
    }

    pub fn schedule(&self) -> Result<KeepSchedule> {
        keep_schedule(self.post_app_count(), self.r, self.blocks)
    }
}

#[derive(Clone, Debug)]
pub struct ApvitParams<T = f64> {
    pub stem: StemParams<T>,
    pub lanet: Option<LanetParams<T>>,
    /// `[C, D]`
    pub embed_w: Tensor<T>,
    pub embed_b: Tensor<T>,
    /// `[H*W + 1, D]`; row 0 belongs to the class token.
    pub pos_embed: Tensor<T>,
    pub cls_token: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_gamma: Tensor<T>,
    pub final_beta: Tensor<T>,
    /// `[D, num_classes]`
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Scalar> ApvitParams<T> {
    /// All-zero tensors with the shapes `config` requires.
    pub fn zeros(config: &ApvitConfig) -> Result<Self> {
        config.validate()?;
        let c = config.stem.out_channels();
        let d = config.embed_dim;
        let lanet = match config.criterion {
            CriterionKind::Lanet => Some(LanetParams::zeros(c, config.lanet_ratio)?),
            _ => None,
        };
        Ok(Self {
            stem: StemParams::zeros(&config.stem),
            lanet,
            embed_w: Tensor::zeros(&[c, d]),
            embed_b: Tensor::zeros(&[d]),
            pos_embed: Tensor::zeros(&[config.stem.patch_count() + 1, d]),
            cls_token: Tensor::zeros(&[d]),
            blocks: (0..config.blocks).map(|_| BlockParams::zeros(d)).collect(),
            final_gamma: Tensor::zeros(&[d]),
            final_beta: Tensor::zeros(&[d]),
            head_w: Tensor::zeros(&[d, config.num_classes]),
            head_b: Tensor::zeros(&[config.num_classes]),
        })
    }

    /// Same-shaped zeros, e.g. for gradient or velocity buffers.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|_, t| t.fill(T::zero()));
        out
    }

    /// Visits every tensor in canonical checkpoint order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        for (i, (k, b)) in self.stem.kernels.iter().zip(&self.stem.biases).enumerate() {
            f(&format!("stem.conv{i}.weight"), k);
            f(&format!("stem.conv{i}.bias"), b);
        }
        if let Some(l) = &self.lanet {
            f("lanet.w1", &l.w1);
            f("lanet.b1", &l.b1);
            f("lanet.w2", &l.w2);
            f("lanet.b2", &l.b2);
        }
        f("embed.weight", &self.embed_w);
        f("embed.bias", &self.embed_b);
        f("pos_embed", &self.pos_embed);
        f("cls_token", &self.cls_token);
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.named() {
                f(&format!("blocks.{i}.{name}"), t);
            }
        }
        f("final_ln.gamma", &self.final_gamma);
        f("final_ln.beta", &self.final_beta);
        f("head.weight", &self.head_w);
        f("head.bias", &self.head_b);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for (i, (k, b)) in self
            .stem
            .kernels
            .iter_mut()
            .zip(self.stem.biases.iter_mut())
            .enumerate()
        {
            f(&format!("stem.conv{i}.weight"), k);
            f(&format!("stem.conv{i}.bias"), b);
        }
        if let Some(l) = &mut self.lanet {
            f("lanet.w1", &mut l.w1);
            f("lanet.b1", &mut l.b1);
            f("lanet.w2", &mut l.w2);
            f("lanet.b2", &mut l.b2);
        }
        f("embed.weight", &mut self.embed_w);
        f("embed.bias", &mut self.embed_b);
        f("pos_embed", &mut self.pos_embed);
        f("cls_token", &mut self.cls_token);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.named_mut() {
                f(&format!("blocks.{i}.{name}"), t);
            }
        }
        f("final_ln.gamma", &mut self.final_gamma);
        f("final_ln.beta", &mut self.final_beta);
        f("head.weight", &mut self.head_w);
        f("head.bias", &mut self.head_b);
    }

    /// Flat list of `(name, tensor)` in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut names = Vec::new();
        self.for_each(|n, _| names.push(n.to_string()));
        let mut tensors: Vec<&Tensor<T>> = Vec::new();
        collect_refs(self, &mut tensors);
        names.into_iter().zip(tensors).collect()
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    /// Applies `f` to matching tensors of `self` and `other`, which must
    /// share a layout.
    pub fn zip_apply(&mut self, other: &Self, mut f: impl FnMut(&str, &mut Tensor<T>, &Tensor<T>)) {
        let mut rhs: Vec<&Tensor<T>> = Vec::new();
        collect_refs(other, &mut rhs);
        let mut it = rhs.into_iter();
        self.for_each_mut(|name, t| f(name, t, it.next().expect("matching layout")));
    }

    pub fn cast<U: Scalar>(&self) -> ApvitParams<U> {
        ApvitParams {
            stem: StemParams {
                kernels: self.stem.kernels.iter().map(Tensor::cast).collect(),
                biases: self.stem.biases.iter().map(Tensor::cast).collect(),
            },
            lanet: self.lanet.as_ref().map(|l| LanetParams {
                w1: l.w1.cast(),
                b1: l.b1.cast(),
                w2: l.w2.cast(),
                b2: l.b2.cast(),
                ratio: l.ratio,
            }),
            embed_w: self.embed_w.cast(),
            embed_b: self.embed_b.cast(),
            pos_embed: self.pos_embed.cast(),
            cls_token: self.cls_token.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_gamma: b.ln1_gamma.cast(),
                    ln1_beta: b.ln1_beta.cast(),
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                    ln2_gamma: b.ln2_gamma.cast(),
                    ln2_beta: b.ln2_beta.cast(),
                    w1: b.w1.cast(),
                    b1: b.b1.cast(),
                    w2: b.w2.cast(),
                    b2: b.b2.cast(),
                })
                .collect(),
            final_gamma: self.final_gamma.cast(),
            final_beta: self.final_beta.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }
}

fn collect_refs<'a, T: Scalar>(p: &'a ApvitParams<T>, out: &mut Vec<&'a Tensor<T>>) {
    for (k, b) in p.stem.kernels.iter().zip(&p.stem.biases) {
        out.push(k);
        out.push(b);
    }
    if let Some(l) = &p.lanet {
        out.extend([&l.w1, &l.b1, &l.w2, &l.b2]);
    }
    out.extend([&p.embed_w, &p.embed_b, &p.pos_embed, &p.cls_token]);
    for b in &p.blocks {
        out.extend(b.named().map(|(_, t)| t));
    }
    out.extend([&p.final_gamma, &p.final_beta, &p.head_w, &p.head_b]);
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fans of a weight tensor: matrices are `[in, out]`, kernels
/// `[out, in, kh, kw]`. Returns `None` for vectors.
fn fans(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [i, o] => Some((*i, *o)),
        [o, i, kh, kw] => Some((i * kh * kw, o * kh * kw)),
        _ => None,
    }
}

/// Glorot-uniform weights; biases, class token and positional table zero;
/// LayerNorm gains one.
pub fn init_params<T: Scalar>(config: &ApvitConfig, seed: u64) -> Result<ApvitParams<T>> {
    let mut params = ApvitParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.for_each_mut(|name, t| {
        if name.ends_with("gamma") {
            t.fill(T::one());
        } else if name == "pos_embed" || name == "cls_token" {
            // zero
        } else if let Some((fi, fo)) = fans(t.shape()) {
            let bound = glorot_bound(fi, fo);
            for v in t.data_mut() {
                *v = T::lit(rng.random_range(-bound..bound));
            }
        }
    });
    Ok(params)
}

/// Selections made during a forward pass, replayable in later passes.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Selections {
    /// Flat positions kept by patch pooling, ascending.
    pub app: Vec<usize>,
    /// Current patch positions kept by each block's token pooling.
    pub atp: Vec<Option<Vec<usize>>>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Replay these selections instead of recomputing top-k.
    pub forced: Option<&'a Selections>,
    /// Replace the soft-pooling attention map by this constant.
    pub pinned_attention: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Diagnostics<T = f64> {
    pub app_indices: Vec<usize>,
    /// Surviving original patch ids after each block.
    pub trail: Vec<Vec<usize>>,
    /// `[H, W]` criterion map.
    pub criterion_map: Tensor<T>,
    pub logits: Tensor<T>,
    pub selections: Selections,
    /// Gap between the weakest kept and strongest dropped patch score.
    pub app_margin: Option<T>,
    pub atp_margins: Vec<Option<T>>,
}

/// Everything a backward pass needs.
#[derive(Clone, Debug)]
pub struct ForwardPass<T = f64> {
    pub logits: Tensor<T>,
    pub diagnostics: Diagnostics<T>,
    stem: StemOutput<T>,
    attn: AttentionMap2D<T>,
    criterion_cache: CriterionCache<T>,
    attention_pinned: bool,
    soft_gate: Option<AttentionMap2D<T>>,
    tokens: Tensor<T>,
    encoder: EncoderOutput<T>,
    final_ln: LayerNormCache<T>,
    readout: Tensor<T>,
}

impl<T: Scalar> ForwardPass<T> {
    /// Discrete state of every piecewise-linear op ahead of the encoder:
    /// stem pool winners and ReLU gates, the channel winner of a MAX
    /// criterion and the LANet gates.
    pub fn kink_pattern(&self, criterion: CriterionKind) -> Vec<usize> {
        let mut out = self.stem.kink_pattern();
        if criterion == CriterionKind::Max {
            let tap = self.stem.tap();
            let (c, hw) = (tap.dim(0), tap.dim(1) * tap.dim(2));
            let x = tap.data();
            out.extend((0..hw).map(|p| {
                (1..c).fold(0, |best, ch| if x[ch * hw + p] > x[best * hw + p] { ch } else { best })
            }));
        }
        out.extend(self.criterion_cache.kink_pattern());
        out
    }
}

/// Runs the classifier and returns logits plus diagnostics.
pub fn forward<T: Scalar>(
    image: &Tensor<T>,
    params: &ApvitParams<T>,
    config: &ApvitConfig,
) -> Result<(Tensor<T>, Diagnostics<T>)> {
    let pass = forward_with(image, params, config, &ForwardOptions::default())?;
    Ok((pass.logits, pass.diagnostics))
}

pub fn forward_with<T: Scalar>(
    image: &Tensor<T>,
    params: &ApvitParams<T>,
    config: &ApvitConfig,
    opts: &ForwardOptions<'_>,
) -> Result<ForwardPass<T>> {
    config.validate()?;
    let n_patches = config.stem.patch_count();

    let x = normalize_image(image);
    let stem = stem_forward(&x, &params.stem, &config.stem)?;
    let (attn, criterion_cache) = criterion_map(stem.tap(), config.criterion, params.lanet.as_ref())?;

    let mut soft_gate = None;
    let (tokens, app_indices, app_margin, attention_pinned) = match config.pooling {
        PoolingMode::Hard => {
            let indices = match opts.forced {
                Some(sel) => {
                    if sel.app.len() != config.k {
                        return Err(ApvitError::Config(format!(
                            "replayed patch selection keeps {}, config wants {}",
                            sel.app.len(),
                            config.k
                        )));
                    }
                    sel.app.clone()
                }
                None => top_k_indices(attn.flat(), config.k),
            };
            let margin = selection_margin(attn.flat(), &indices);
            let tokens = gather_rows(&stem.features.to_tokens(), &indices)?;
            (tokens, indices, margin, false)
        }
        PoolingMode::Soft => {
            let pinned = opts.pinned_attention.map(|v| AttentionMap2D {
                weights: Tensor::full(attn.weights.shape(), T::lit(v)),
            });
            let pooled = soft_pool(&stem.features, pinned.as_ref().unwrap_or(&attn))?;
            let is_pinned = pinned.is_some();
            soft_gate = pinned;
            (pooled.to_tokens(), (0..n_patches).collect(), None, is_pinned)
        }
        PoolingMode::None => (stem.features.to_tokens(), (0..n_patches).collect(), None, false),
    };

    let mut embedded = matmul(&tokens, &params.embed_w)?;
    embedded.add_row_broadcast(&params.embed_b);
    let pos_rows: Vec<usize> = app_indices.iter().map(|&i| i + 1).collect();
    embedded.add_assign(&gather_rows(&params.pos_embed, &pos_rows)?);
    let cls = params.cls_token.add(&Tensor::new(
        vec![config.embed_dim],
        params.pos_embed.row(0).to_vec(),
    )?);
    let cls = cls.reshape(&[1, config.embed_dim])?;
    let seq = TokenSeq::new(Tensor::vstack(&[&cls, &embedded])?, app_indices.clone())?;

    let schedule = config.schedule()?;
    let encoder = encoder_forward(
        seq,
        &params.blocks,
        &schedule,
        config.heads,
        config.atp_variant,
        opts.forced.map(|s| s.atp.as_slice()),
    )?;

    let (normed, final_ln) = layer_norm(
        &encoder.seq.tokens,
        &params.final_gamma,
        &params.final_beta,
        T::lit(LN_EPS),
    )?;
    let readout = match config.head {
        HeadKind::Clt => normed.slice_rows(0, 1),
        HeadKind::Gap => {
            let patches = normed.slice_rows(1, normed.rows());
            let inv = T::one() / T::from_usize_lossy(patches.rows());
            patches.sum_rows().scale(inv).reshape(&[1, config.embed_dim])?
        }
    };
    let mut logits = matmul(&readout, &params.head_w)?;
    logits.add_row_broadcast(&params.head_b);
    let logits = logits.reshape(&[config.num_classes])?;

    let diagnostics = Diagnostics {
        app_indices: app_indices.clone(),
        trail: encoder.trail.clone(),
        criterion_map: attn.weights.clone(),
        logits: logits.clone(),
        selections: Selections {
            app: app_indices,
            atp: encoder.selections.clone(),
        },
        app_margin,
        atp_margins: encoder.margins.clone(),
    };
    Ok(ForwardPass {
        logits,
        diagnostics,
        stem,
        attn,
        criterion_cache,
        attention_pinned,
        soft_gate,
        tokens,
        encoder,
        final_ln,
        readout,
    })
}

/// Parameter gradients of `dlogits . logits`, with every selection held at
/// its forward value.
pub fn backward<T: Scalar>(
    pass: &ForwardPass<T>,
    params: &ApvitParams<T>,
    config: &ApvitConfig,
    dlogits: &Tensor<T>,
) -> Result<ApvitParams<T>> {
    let mut grads = params.zeros_like();
    let dl = dlogits.clone().reshape(&[1, config.num_classes])?;

    let (d_readout, d_head_w) = matmul_backward(&pass.readout, &params.head_w, &dl);
    grads.head_w = d_head_w;
    grads.head_b = dlogits.clone();

    let final_tokens = &pass.encoder.seq.tokens;
    let mut d_normed = Tensor::zeros(final_tokens.shape());
    match config.head {
        HeadKind::Clt => d_normed.row_mut(0).copy_from_slice(d_readout.data()),
        HeadKind::Gap => {
            let t = final_tokens.rows() - 1;
            let inv = T::one() / T::from_usize_lossy(t);
            for r in 1..=t {
                for (g, &v) in d_normed.row_mut(r).iter_mut().zip(d_readout.data()) {
                    *g = v * inv;
                }
            }
        }
    }
    let (d_final, d_gamma, d_beta) = layer_norm_backward(&pass.final_ln, &params.final_gamma, &d_normed);
    grads.final_gamma = d_gamma;
    grads.final_beta = d_beta;

    let (d_seq, block_grads) = encoder_backward(&pass.encoder, &params.blocks, &d_final);
    grads.blocks = block_grads;

    let d_cls_row = d_seq.row(0);
    grads.cls_token.data_mut().copy_from_slice(d_cls_row);
    grads.pos_embed.row_mut(0).copy_from_slice(d_cls_row);
    let d_embedded = d_seq.slice_rows(1, d_seq.rows());
    for (j, &p) in pass.diagnostics.app_indices.iter().enumerate() {
        grads.pos_embed.row_mut(p + 1).copy_from_slice(d_embedded.row(j));
    }
    let (d_tokens, d_embed_w) = matmul_backward(&pass.tokens, &params.embed_w, &d_embedded);
    grads.embed_w = d_embed_w;
    grads.embed_b = d_embedded.sum_rows();

    let (h, w) = (pass.stem.features.height(), pass.stem.features.width());
    let (d_features, d_tap) = match config.pooling {
        PoolingMode::Hard => {
            let full = scatter_rows(&d_tokens, &pass.diagnostics.app_indices, h * w);
            (FeatureMap::from_tokens(&full, h, w).data, None)
        }
        PoolingMode::None => (FeatureMap::from_tokens(&d_tokens, h, w).data, None),
        PoolingMode::Soft => {
            let d_pooled = FeatureMap::from_tokens(&d_tokens, h, w).data;
            if pass.attention_pinned {
                let gate = pass.soft_gate.as_ref().expect("pinned soft-pooling map");
                let (d_feat, _) = soft_pool_backward(&pass.stem.features, gate, &d_pooled);
                (d_feat, None)
            } else {
                let (d_feat, d_attn) = soft_pool_backward(&pass.stem.features, &pass.attn, &d_pooled);
                let (d_tap, lanet_grads) = criterion_backward(
                    pass.stem.tap(),
                    config.criterion,
                    params.lanet.as_ref(),
                    &pass.criterion_cache,
                    &d_attn,
                );
                if let Some(lg) = lanet_grads {
                    grads.lanet = Some(lg);
                }
                (d_feat, Some(d_tap))
            }
        }
    };
    grads.stem = stem_backward(&pass.stem, &params.stem, &d_features, d_tap.as_ref());
    Ok(grads)
}

/// Index of the largest logit; ties go to the smaller index.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict<T: Scalar>(
    image: &Tensor<T>,
    params: &ApvitParams<T>,
    config: &ApvitConfig,
) -> Result<usize> {
    let (logits, _) = forward(image, params, config)?;
    Ok(argmax(logits.data()))
}
