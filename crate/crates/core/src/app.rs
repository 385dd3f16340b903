//! Attentive patch pooling: reduce a feature map to a spatial attention map
//! and keep only the most attended patches.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::error::{ApvitError, Result};
use crate::scalar::Scalar;
use crate::stem::FeatureMap;
use crate::tensor::{
    add_channel_bias, channel_bias_grad, conv2d, conv2d_backward, gather_rows, relu,
    relu_backward, sigmoid, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CriterionKind {
    Sum,
    Abs,
    Max,
    Lanet,
}

impl CriterionKind {
    pub const ALL: [CriterionKind; 4] = [Self::Sum, Self::Abs, Self::Max, Self::Lanet];
}

impl FromStr for CriterionKind {
    type Err = ApvitError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SUM" => Ok(Self::Sum),
            "ABS" => Ok(Self::Abs),
            "MAX" => Ok(Self::Max),
            "LANET" => Ok(Self::Lanet),
            other => Err(ApvitError::Config(format!("unknown criterion {other:?}"))),
        }
    }
}

impl fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "SUM",
            Self::Abs => "ABS",
            Self::Max => "MAX",
            Self::Lanet => "LANET",
        })
    }
}

/// Unnormalized `[H, W]` attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap2D<T = f64> {
    pub weights: Tensor<T>,
}

impl<T: Scalar> AttentionMap2D<T> {
    pub fn flat(&self) -> &[T] {
        self.weights.data()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSelection<T = f64> {
    /// Ascending flat positions in `[0, H*W)`.
    pub indices: Vec<usize>,
    /// `[k, C]` features of the kept positions.
    pub tokens: Tensor<T>,
}

/// Two 1x1 convolutions reducing `C -> C/ratio -> 1`.
#[derive(Clone, Debug)]
pub struct LanetParams<T = f64> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub ratio: usize,
}

impl<T: Scalar> LanetParams<T> {
    pub fn zeros(channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) || channels < ratio {
            return Err(ApvitError::Config(format!(
                "LANet ratio {ratio} does not divide {channels} channels"
            )));
        }
        let hidden = channels / ratio;
        Ok(Self {
            w1: Tensor::zeros(&[hidden, channels, 1, 1]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[1, hidden, 1, 1]),
            b2: Tensor::zeros(&[1]),
            ratio,
        })
    }
}

/// Intermediate values of [`criterion_map`] needed by its backward.
#[derive(Clone, Debug)]
pub struct CriterionCache<T = f64> {
    /// LANet pre-ReLU hidden map.
    lanet_hidden: Option<Tensor<T>>,
}

impl<T: Scalar> CriterionCache<T> {
    /// LANet ReLU gates (empty for the fixed criteria).
    pub fn kink_pattern(&self) -> Vec<usize> {
        self.lanet_hidden
            .iter()
            .flat_map(|h| h.data().iter().map(|&v| usize::from(v > T::zero())))
            .collect()
    }
}

/// Reduces the channel axis of `fmap` (`[C, H, W]`) to one attention value
/// per position.
pub fn criterion_map<T: Scalar>(
    fmap: &Tensor<T>,
    kind: CriterionKind,
    lanet: Option<&LanetParams<T>>,
) -> Result<(AttentionMap2D<T>, CriterionCache<T>)> {
    let (c, h, w) = (fmap.dim(0), fmap.dim(1), fmap.dim(2));
    let hw = h * w;
    let x = fmap.data();
    let reduce = |f: &dyn Fn(&mut T, T)| {
        let mut out = x[..hw].to_vec();
        for ch in 1..c {
            for (o, &v) in out.iter_mut().zip(&x[ch * hw..(ch + 1) * hw]) {
                f(o, v);
            }
        }
        out
    };
    let (values, lanet_hidden) = match (kind, lanet) {
        (CriterionKind::Lanet, None) => {
            return Err(ApvitError::Config(
                "LANET criterion selected without LANet parameters".into(),
            ))
        }
        (CriterionKind::Lanet, Some(p)) => {
            let mut hidden = conv2d(fmap, &p.w1, 1, 0)?;
            add_channel_bias(&mut hidden, &p.b1);
            let mut out = conv2d(&relu(&hidden), &p.w2, 1, 0)?;
            add_channel_bias(&mut out, &p.b2);
            (out.into_data(), Some(hidden))
        }
        (CriterionKind::Sum, _) => (reduce(&|o, v| *o += v), None),
        (CriterionKind::Abs, _) => {
            let mut out: Vec<T> = x[..hw].iter().map(|v| v.abs()).collect();
            for ch in 1..c {
                for (o, &v) in out.iter_mut().zip(&x[ch * hw..(ch + 1) * hw]) {
                    *o += v.abs();
                }
            }
            (out, None)
        }
        (CriterionKind::Max, _) => (
            reduce(&|o, v| {
                if v > *o {
                    *o = v
                }
            }),
            None,
        ),
    };
    Ok((
        AttentionMap2D {
            weights: Tensor::new(vec![h, w], values)?,
        },
        CriterionCache { lanet_hidden },
    ))
}

/// Backward of [`criterion_map`]: gradient on the input map and, for LANet,
/// on its parameters.
pub fn criterion_backward<T: Scalar>(
    fmap: &Tensor<T>,
    kind: CriterionKind,
    lanet: Option<&LanetParams<T>>,
    cache: &CriterionCache<T>,
    d_attn: &Tensor<T>,
) -> (Tensor<T>, Option<LanetParams<T>>) {
    let (c, h, w) = (fmap.dim(0), fmap.dim(1), fmap.dim(2));
    let hw = h * w;
    let x = fmap.data();
    let g = d_attn.data();
    let mut dx = Tensor::zeros(fmap.shape());
    match kind {
        CriterionKind::Sum => {
            for ch in 0..c {
                dx.data_mut()[ch * hw..(ch + 1) * hw].copy_from_slice(g);
            }
        }
        CriterionKind::Abs => {
            for (i, d) in dx.data_mut().iter_mut().enumerate() {
                let v = x[i];
                *d = if v > T::zero() {
                    g[i % hw]
                } else if v < T::zero() {
                    -g[i % hw]
                } else {
                    T::zero()
                };
            }
        }
        CriterionKind::Max => {
            for p in 0..hw {
                let mut best = 0;
                for ch in 1..c {
                    if x[ch * hw + p] > x[best * hw + p] {
                        best = ch;
                    }
                }
                dx.data_mut()[best * hw + p] = g[p];
            }
        }
        CriterionKind::Lanet => {
            let p = lanet.expect("LANet parameters present in forward");
            let hidden = cache.lanet_hidden.as_ref().expect("LANet cache");
            let act = relu(hidden);
            let d_out = d_attn.clone().reshape(&[1, h, w]).expect("same size");
            let db2 = channel_bias_grad(&d_out);
            let (d_act, dw2) = conv2d_backward(&act, &p.w2, 1, 0, &d_out);
            let d_hidden = relu_backward(hidden, &d_act);
            let db1 = channel_bias_grad(&d_hidden);
            let (d_in, dw1) = conv2d_backward(fmap, &p.w1, 1, 0, &d_hidden);
            return (
                d_in,
                Some(LanetParams {
                    w1: dw1,
                    b1: db1,
                    w2: dw2,
                    b2: db2,
                    ratio: p.ratio,
                }),
            );
        }
    }
    (dx, None)
}

/// Descending by score, ties toward the smaller index.
fn rank_order<T: Scalar>(scores: &[T], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `k` largest scores, reported ascending. Ties prefer the
/// smaller index.
pub fn top_k_indices<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(order.len());
    if k < order.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
    }
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// Smallest kept score minus largest dropped score. `None` when nothing is
/// dropped.
pub fn selection_margin<T: Scalar>(scores: &[T], kept: &[usize]) -> Option<T> {
    if kept.len() >= scores.len() {
        return None;
    }
    let mut is_kept = vec![false; scores.len()];
    kept.iter().for_each(|&i| is_kept[i] = true);
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for (i, &s) in scores.iter().enumerate() {
        if is_kept[i] {
            lo = lo.min(s);
        } else {
            hi = hi.max(s);
        }
    }
    Some(lo - hi)
}

/// Keeps the `k` most attended positions of `fmap`.
pub fn select_top_k<T: Scalar>(
    fmap: &FeatureMap<T>,
    attn: &AttentionMap2D<T>,
    k: usize,
) -> Result<PatchSelection<T>> {
    let n = fmap.height() * fmap.width();
    if attn.weights.len() != n {
        return Err(ApvitError::Dimension(format!(
            "attention map {:?} does not match feature map {:?}",
            attn.weights.shape(),
            fmap.data.shape()
        )));
    }
    if k == 0 || k > n {
        return Err(ApvitError::Config(format!("keep number {k} outside [1, {n}]")));
    }
    let indices = top_k_indices(attn.flat(), k);
    let tokens = gather_rows(&fmap.to_tokens(), &indices)?;
    Ok(PatchSelection { indices, tokens })
}

/// Multiplies every channel by `sigmoid(attn)`.
pub fn soft_pool<T: Scalar>(
    fmap: &FeatureMap<T>,
    attn: &AttentionMap2D<T>,
) -> Result<FeatureMap<T>> {
    let hw = fmap.height() * fmap.width();
    if attn.weights.len() != hw {
        return Err(ApvitError::Dimension(format!(
            "attention map {:?} does not match feature map {:?}",
            attn.weights.shape(),
            fmap.data.shape()
        )));
    }
    let gate: Vec<T> = attn.flat().iter().map(|&a| sigmoid(a)).collect();
    let mut out = fmap.data.clone();
    for chunk in out.data_mut().chunks_exact_mut(hw) {
        for (v, &s) in chunk.iter_mut().zip(&gate) {
            *v *= s;
        }
    }
    FeatureMap::new(out)
}

/// Backward of [`soft_pool`]: `(d_fmap, d_attn)`.
pub fn soft_pool_backward<T: Scalar>(
    fmap: &FeatureMap<T>,
    attn: &AttentionMap2D<T>,
    d_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let hw = fmap.height() * fmap.width();
    let gate: Vec<T> = attn.flat().iter().map(|&a| sigmoid(a)).collect();
    let mut d_fmap = d_out.clone();
    let mut d_attn = Tensor::zeros(attn.weights.shape());
    for (dchunk, xchunk) in d_fmap
        .data_mut()
        .chunks_exact_mut(hw)
        .zip(fmap.data.data().chunks_exact(hw))
    {
        for (p, (d, &x)) in dchunk.iter_mut().zip(xchunk).enumerate() {
            let s = gate[p];
            d_attn.data_mut()[p] += *d * x * s * (T::one() - s);
            *d *= s;
        }
    }
    (d_fmap, d_attn)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_criteria() {
        let x = Tensor::new(vec![3, 1, 1], vec![1.0, -2.0, 3.0]).unwrap();
        let get = |k| criterion_map(&x, k, None).unwrap().0.weights.data()[0];
        assert_eq!(get(CriterionKind::Sum), 2.0);
        assert_eq!(get(CriterionKind::Abs), 6.0);
        assert_eq!(get(CriterionKind::Max), 3.0);
    }

    #[test]
    fn lanet_without_params_is_config_error() {
        let x = Tensor::<f64>::zeros(&[8, 2, 2]);
        assert!(matches!(
            criterion_map(&x, CriterionKind::Lanet, None),
            Err(ApvitError::Config(_))
        ));
    }

    #[test]
    fn sum_equals_abs_for_nonnegative() {
        let x = Tensor::from_fn(&[4, 3, 3], |i| ((i * 7) % 5) as f64);
        let s = criterion_map(&x, CriterionKind::Sum, None).unwrap().0;
        let a = criterion_map(&x, CriterionKind::Abs, None).unwrap().0;
        assert_eq!(s, a);
    }

    #[test]
    fn parse_criterion() {
        assert_eq!("abs".parse::<CriterionKind>().unwrap(), CriterionKind::Abs);
        assert_eq!("LANet".parse::<CriterionKind>().unwrap(), CriterionKind::Lanet);
        assert!("mean".parse::<CriterionKind>().is_err());
    }

    #[test]
    fn top_k_examples() {
        let fm = FeatureMap::new(Tensor::from_fn(&[2, 2, 2], |i| i as f64)).unwrap();
        let attn = AttentionMap2D {
            weights: Tensor::new(vec![2, 2], vec![0.1, 0.5, 0.3, 0.2]).unwrap(),
        };
        let sel = select_top_k(&fm, &attn, 2).unwrap();
        assert_eq!(sel.indices, vec![1, 2]);
        assert_eq!(sel.tokens.data(), &[1.0, 5.0, 2.0, 6.0]);

        let all = select_top_k(&fm, &attn, 4).unwrap();
        assert_eq!(all.indices, vec![0, 1, 2, 3]);
        assert_eq!(all.tokens, fm.to_tokens());

        assert!(matches!(select_top_k(&fm, &attn, 0), Err(ApvitError::Config(_))));
        assert!(matches!(select_top_k(&fm, &attn, 5), Err(ApvitError::Config(_))));
    }

    #[test]
    fn ties_prefer_smaller_index() {
        assert_eq!(top_k_indices(&[1.0, 2.0, 2.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.0f64; 5], 3), vec![0, 1, 2]);
    }

    #[test]
    fn soft_pool_halves_at_zero_and_saturates() {
        let fm = FeatureMap::new(Tensor::from_fn(&[2, 2, 2], |i| i as f64 + 1.0)).unwrap();
        let zero = AttentionMap2D {
            weights: Tensor::zeros(&[2, 2]),
        };
        assert_eq!(soft_pool(&fm, &zero).unwrap().data, fm.data.scale(0.5));
        let big = AttentionMap2D {
            weights: Tensor::full(&[2, 2], 20.0),
        };
        let out = soft_pool(&fm, &big).unwrap();
        for (a, b) in out.data.data().iter().zip(fm.data.data()) {
            assert!(((a - b) / b).abs() < 1e-8);
        }
    }
}
