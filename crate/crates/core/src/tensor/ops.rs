use std::collections::HashSet;

use super::{gemm_nn, gemm_nt, gemm_tn, instrument, Tensor};
use crate::error::{ApvitError, Result};
use crate::scalar::Scalar;

fn expect_rank<T: Scalar>(t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(ApvitError::Dimension(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// matmul

/// `C = A B` for `A: [m,p]`, `B: [p,n]`. Counted by [`instrument`].
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(ApvitError::Dimension(format!(
            "matmul: cannot multiply {:?} by {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, p, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut c = vec![T::zero(); m * n];
    gemm_nn(m, p, n, a.data(), b.data(), &mut c);
    instrument::add(2 * (m * p * n) as u64);
    Tensor::new(vec![m, n], c)?.ensure_finite("matmul")
}

/// `C = A B^T` for `A: [m,p]`, `B: [n,p]`. Counted by [`instrument`].
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1) {
        return Err(ApvitError::Dimension(format!(
            "matmul_nt: cannot multiply {:?} by transpose of {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, p, n) = (a.dim(0), a.dim(1), b.dim(0));
    let mut c = vec![T::zero(); m * n];
    gemm_nt(m, p, n, a.data(), b.data(), &mut c);
    instrument::add(2 * (m * p * n) as u64);
    Tensor::new(vec![m, n], c)?.ensure_finite("matmul_nt")
}

/// Backward of [`matmul`]: `(dA, dB) = (dC B^T, A^T dC)`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, p, n) = (a.dim(0), a.dim(1), b.dim(1));
    debug_assert_eq!(dc.shape(), &[m, n]);
    let mut da = vec![T::zero(); m * p];
    gemm_nt(m, n, p, dc.data(), b.data(), &mut da);
    let mut db = vec![T::zero(); p * n];
    gemm_tn(p, m, n, a.data(), dc.data(), &mut db);
    (
        Tensor::new(vec![m, p], da).expect("shape"),
        Tensor::new(vec![p, n], db).expect("shape"),
    )
}

/// `dA` only, for when `B` is a constant or its gradient is not wanted.
pub fn matmul_backward_lhs<T: Scalar>(b: &Tensor<T>, dc: &Tensor<T>) -> Tensor<T> {
    let (p, n) = (b.dim(0), b.dim(1));
    let m = dc.dim(0);
    let mut da = vec![T::zero(); m * p];
    gemm_nt(m, n, p, dc.data(), b.data(), &mut da);
    Tensor::new(vec![m, p], da).expect("shape")
}

/// Backward of [`matmul_nt`]: `(dA, dB) = (dC B, dC^T A)`.
pub fn matmul_nt_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, p, n) = (a.dim(0), a.dim(1), b.dim(0));
    let mut da = vec![T::zero(); m * p];
    gemm_nn(m, n, p, dc.data(), b.data(), &mut da);
    let mut db = vec![T::zero(); n * p];
    gemm_tn(n, m, p, dc.data(), a.data(), &mut db);
    (
        Tensor::new(vec![m, p], da).expect("shape"),
        Tensor::new(vec![n, p], db).expect("shape"),
    )
}

// ---------------------------------------------------------------------------
// softmax

/// Softmax over the last axis, with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.cols();
    let mut out = x.clone();
    if c == 0 {
        return out;
    }
    for row in out.data_mut().chunks_exact_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let c = y.cols();
    let mut dx = dy.clone();
    if c == 0 {
        return dx;
    }
    for (dxr, yr) in dx.data_mut().chunks_exact_mut(c).zip(y.data().chunks_exact(c)) {
        let dot: T = dxr.iter().zip(yr).map(|(&g, &p)| g * p).sum();
        for (g, &p) in dxr.iter_mut().zip(yr) {
            *g = p * (*g - dot);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// layer norm

pub const LN_EPS: f64 = 1e-6;

/// Values retained by [`layer_norm`] for its backward.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T = f64> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Normalizes each last-axis slice to zero mean and unit variance, then
/// applies `gamma` and `beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let n = x.cols();
    if gamma.len() != n || beta.len() != n {
        return Err(ApvitError::Dimension(format!(
            "layer_norm: input {:?} with gamma {:?} and beta {:?}",
            x.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    let nf = T::from_usize_lossy(n);
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut rstd = Vec::with_capacity(x.len() / n.max(1));
    for (xr, yr) in xhat
        .data_mut()
        .chunks_exact_mut(n)
        .zip(y.data_mut().chunks_exact_mut(n))
    {
        let mean = xr.iter().copied().sum::<T>() / nf;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let r = T::one() / (var + eps).sqrt();
        for ((xv, yv), (&g, &b)) in xr
            .iter_mut()
            .zip(yr.iter_mut())
            .zip(gamma.data().iter().zip(beta.data()))
        {
            *xv = (*xv - mean) * r;
            *yv = *xv * g + b;
        }
        rstd.push(r);
    }
    let y = y.ensure_finite("layer_norm")?;
    Ok((y, LayerNormCache { xhat, rstd }))
}

/// Backward of [`layer_norm`]: returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = gamma.len();
    let nf = T::from_usize_lossy(n);
    let mut dx = dy.clone();
    let mut dgamma = Tensor::zeros(&[n]);
    let mut dbeta = Tensor::zeros(&[n]);
    for ((dyr, xr), &r) in dx
        .data_mut()
        .chunks_exact_mut(n)
        .zip(cache.xhat.data().chunks_exact(n))
        .zip(&cache.rstd)
    {
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for (j, (&g, &xh)) in dyr.iter().zip(xr).enumerate() {
            dgamma.data_mut()[j] += g * xh;
            dbeta.data_mut()[j] += g;
            let dxh = g * gamma.data()[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh;
        }
        mean_dxhat /= nf;
        mean_dxhat_xhat /= nf;
        for (j, (g, &xh)) in dyr.iter_mut().zip(xr).enumerate() {
            let dxh = *g * gamma.data()[j];
            *g = r * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// convolution

fn conv_out_side(side: usize, k: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - k) / stride + 1
}

fn im2col<T: Scalar>(
    input: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, usize, usize) {
    let (cin, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (oh, ow) = (
        conv_out_side(h, kh, stride, pad),
        conv_out_side(w, kw, stride, pad),
    );
    let ohw = oh * ow;
    let mut cols = vec![T::zero(); cin * kh * kw * ohw];
    let x = input.data();
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * ow + ox] = x[(c * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

fn check_conv<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<()> {
    expect_rank(input, 3, "conv2d input")?;
    expect_rank(kernels, 4, "conv2d kernels")?;
    if stride == 0 {
        return Err(ApvitError::Dimension("conv2d: stride must be >= 1".into()));
    }
    let (cin, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (kcin, kh, kw) = (kernels.dim(1), kernels.dim(2), kernels.dim(3));
    if kcin != cin {
        return Err(ApvitError::Dimension(format!(
            "conv2d: input {:?} has {cin} channels, kernels {:?} expect {kcin}",
            input.shape(),
            kernels.shape()
        )));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(ApvitError::Dimension(format!(
            "conv2d: kernel {:?} larger than padded input {:?} (pad {pad})",
            kernels.shape(),
            input.shape()
        )));
    }
    Ok(())
}

/// Zero-padded 2-D cross-correlation of `[Cin,H,W]` with `[Cout,Cin,kh,kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    check_conv(input, kernels, stride, pad)?;
    let (cout, cin, kh, kw) = (kernels.dim(0), kernels.dim(1), kernels.dim(2), kernels.dim(3));
    let (cols, oh, ow) = im2col(input, kh, kw, stride, pad);
    let p = cin * kh * kw;
    let mut out = vec![T::zero(); cout * oh * ow];
    gemm_nn(cout, p, oh * ow, kernels.data(), &cols, &mut out);
    instrument::add(2 * (cout * p * oh * ow) as u64);
    Tensor::new(vec![cout, oh, ow], out)?.ensure_finite("conv2d")
}

/// Backward of [`conv2d`]: returns `(d_input, d_kernels)`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    pad: usize,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (cout, cin, kh, kw) = (kernels.dim(0), kernels.dim(1), kernels.dim(2), kernels.dim(3));
    let (h, w) = (input.dim(1), input.dim(2));
    let (cols, oh, ow) = im2col(input, kh, kw, stride, pad);
    let ohw = oh * ow;
    let p = cin * kh * kw;

    let mut dk = vec![T::zero(); cout * p];
    gemm_nt(cout, ohw, p, dout.data(), &cols, &mut dk);

    let mut dcols = vec![T::zero(); p * ohw];
    gemm_tn(p, cout, ohw, kernels.data(), dout.data(), &mut dcols);

    let mut dx = vec![T::zero(); cin * h * w];
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(c * h + iy as usize) * w + ix as usize] += dcols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
    (
        Tensor::new(vec![cin, h, w], dx).expect("shape"),
        Tensor::new(kernels.shape().to_vec(), dk).expect("shape"),
    )
}

/// Adds a per-channel bias to a `[C,H,W]` map.
pub fn add_channel_bias<T: Scalar>(x: &mut Tensor<T>, bias: &Tensor<T>) {
    let c = x.dim(0);
    let plane = x.len() / c;
    for (ch, chunk) in x.data_mut().chunks_exact_mut(plane).enumerate() {
        let b = bias.data()[ch];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// Backward of [`add_channel_bias`]: per-channel sums.
pub fn channel_bias_grad<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let c = dy.dim(0);
    let plane = dy.len() / c;
    Tensor::from_fn(&[c], |ch| dy.data()[ch * plane..(ch + 1) * plane].iter().copied().sum())
}

// ---------------------------------------------------------------------------
// max pooling

/// Max pooling output plus the flat input index chosen for every output cell.
#[derive(Clone, Debug)]
pub struct MaxPoolOutput<T = f64> {
    pub value: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Non-overlapping style max pooling over `[C,H,W]`. Ties resolve to the
/// first element in row-major window order.
pub fn max_pool2d<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<MaxPoolOutput<T>> {
    expect_rank(input, 3, "max_pool2d input")?;
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(ApvitError::Dimension(format!(
            "max_pool2d: window {window} stride {stride} invalid for {:?}",
            input.shape()
        )));
    }
    if window == stride && (h % stride != 0 || w % stride != 0) {
        return Err(ApvitError::Dimension(format!(
            "max_pool2d: {:?} not divisible by stride {stride}",
            input.shape()
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let x = input.data();
    let mut value = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ch * h + oy * stride) * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = (ch * h + oy * stride + dy) * w + ox * stride + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                value.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(MaxPoolOutput {
        value: Tensor::new(vec![c, oh, ow], value)?,
        argmax,
    })
}

/// Routes each upstream gradient to its window's argmax.
pub fn max_pool2d_backward<T: Scalar>(
    argmax: &[usize],
    input_shape: &[usize],
    dout: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(dout.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}

// ---------------------------------------------------------------------------
// row gather / scatter

/// Selects rows of a 2-D tensor. Indices must be unique and in range.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    expect_rank(x, 2, "gather_rows")?;
    let t = x.rows();
    let mut seen = HashSet::with_capacity(indices.len());
    for &i in indices {
        if i >= t {
            return Err(ApvitError::Index(format!(
                "gather_rows: index {i} out of range for {t} rows"
            )));
        }
        if !seen.insert(i) {
            return Err(ApvitError::Index(format!("gather_rows: duplicate index {i}")));
        }
    }
    let d = x.cols();
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(vec![indices.len(), d], data)
}

/// Backward of [`gather_rows`]: scatters `dout` rows into a zero `[rows, D]`.
pub fn scatter_rows<T: Scalar>(dout: &Tensor<T>, indices: &[usize], rows: usize) -> Tensor<T> {
    let d = dout.cols();
    let mut dx = Tensor::zeros(&[rows, d]);
    for (j, &i) in indices.iter().enumerate() {
        for (a, &g) in dx.row_mut(i).iter_mut().zip(dout.row(j)) {
            *a += g;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU evaluated at the pre-activation `x`.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(dy, |v, g| if v > T::zero() { g } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu_inner<T: Scalar>(x: T) -> T {
    let k = (T::lit(2.0) / T::PI()).sqrt();
    k * (x + T::lit(GELU_C) * x * x * x)
}

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::lit(0.5) * v * (T::one() + gelu_inner(v).tanh()))
}

/// Gradient of [`gelu`] at the pre-activation `x`.
pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let k = (T::lit(2.0) / T::PI()).sqrt();
    x.zip_map(dy, |v, g| {
        let t = gelu_inner(v).tanh();
        let dinner = k * (T::one() + T::lit(3.0 * GELU_C) * v * v);
        let d = T::lit(0.5) * (T::one() + t) + T::lit(0.5) * v * (T::one() - t * t) * dinner;
        g * d
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = t2(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let c = matmul(&t2(&[&[1.0, 2.0]]), &t2(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, ApvitError::Dimension(_)));
    }

    #[test]
    fn softmax_basic_rows() {
        let y = softmax_rows(&t2(&[&[0.0, 0.0], &[1000.0, 1000.0]]));
        assert_eq!(y.row(0), &[0.5, 0.5]);
        assert_eq!(y.row(1), &[0.5, 0.5]);
        let y = softmax_rows(&t2(&[&[1000.0, 1000.0, 1000.0]]));
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_hand_values() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let (y, _) = layer_norm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), 1e-6).unwrap();
        // (x - 2) / sqrt(2/3 + 1e-6)
        let s = (2.0f64 / 3.0 + 1e-6).sqrt();
        assert!((y.data()[0] + 1.0 / s).abs() < 1e-12);
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data()[2] - 1.0 / s).abs() < 1e-12);
        assert!((y.data()[2] - 1.224_743_9).abs() < 1e-6);

        let x = Tensor::new(vec![3], vec![5.0, 5.0, 5.0]).unwrap();
        let (y, _) = layer_norm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let beta = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, 9.0, -3.0, 0.5, 0.25, 8.0]).unwrap();
        let (y, _) = layer_norm(&x, &Tensor::zeros(&[3]), &beta, 1e-6).unwrap();
        assert_eq!(y.row(0), beta.data());
        assert_eq!(y.row(1), beta.data());
    }

    #[test]
    fn conv_scaling_and_spread() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64 - 4.0);
        let k = Tensor::full(&[1, 1, 1, 1], 2.0);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x.scale(2.0));

        let mut onehot = Tensor::zeros(&[1, 3, 3]);
        onehot.set(&[0, 1, 1], 1.0);
        let y = conv2d(&onehot, &Tensor::ones(&[1, 1, 3, 3]), 1, 1).unwrap();
        assert_eq!(y.data(), &[1.0; 9]);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2]);
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[1, 1, 5, 5]), 1, 1),
            Err(ApvitError::Dimension(_))
        ));
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 3, 3]), 0, 1).is_err());
    }

    #[test]
    fn max_pool_cases() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(out.value.data(), &[4.0]);

        let c = Tensor::full(&[1, 4, 4], 7.0);
        let out = max_pool2d(&c, 2, 2).unwrap();
        assert_eq!(out.value.data(), &[7.0; 4]);
        let dx: Tensor = max_pool2d_backward(&out.argmax, c.shape(), &Tensor::ones(&[1, 2, 2]));
        // window-first element of each 2x2 window
        let hot: Vec<usize> = (0..16).filter(|&i| dx.data()[i] == 1.0).collect();
        assert_eq!(hot, vec![0, 2, 8, 10]);

        assert!(max_pool2d(&Tensor::<f64>::zeros(&[1, 3, 4]), 2, 2).is_err());
    }

    #[test]
    fn gather_rows_cases() {
        let x = Tensor::from_fn(&[3, 2], |i| i as f64);
        assert_eq!(gather_rows(&x, &[0, 1, 2]).unwrap(), x);
        let g = gather_rows(&x, &[2, 0]).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(matches!(gather_rows(&x, &[3]), Err(ApvitError::Index(_))));
        assert!(matches!(gather_rows(&x, &[1, 1]), Err(ApvitError::Index(_))));
        let dx: Tensor = scatter_rows(&Tensor::ones(&[2, 2]), &[2, 0], 3);
        assert_eq!(dx.data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
    }
}
