use super::{gemm, MatMut, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

fn expect_rank2<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::InvalidArgument(format!(
            "{op}: expected a matrix, got shape {:?}",
            t.shape()
        ))),
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = expect_rank2(a, "matmul")?;
    let (k2, n) = expect_rank2(b, "matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        T::one(),
        MatRef::dense(a.data(), m, k),
        MatRef::dense(b.data(), k, n),
        T::zero(),
        MatMut::dense(out.data_mut(), m, n),
    );
    Ok(out)
}

/// Returns `(g·bᵀ, aᵀ·g)`.
pub fn matmul_vjp<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = expect_rank2(a, "matmul_vjp")?;
    let (k2, n) = expect_rank2(b, "matmul_vjp")?;
    let (gm, gn) = expect_rank2(g, "matmul_vjp")?;
    if k != k2 || gm != m || gn != n {
        return Err(Error::ShapeMismatch {
            op: "matmul_vjp",
            lhs: vec![m, n],
            rhs: g.shape().to_vec(),
        });
    }
    let mut ga = Tensor::zeros(&[m, k]);
    gemm(
        T::one(),
        MatRef::dense(g.data(), m, n),
        MatRef::dense(b.data(), k, n).t(),
        T::zero(),
        MatMut::dense(ga.data_mut(), m, k),
    );
    let mut gb = Tensor::zeros(&[k, n]);
    gemm(
        T::one(),
        MatRef::dense(a.data(), m, k).t(),
        MatRef::dense(g.data(), m, n),
        T::zero(),
        MatMut::dense(gb.data_mut(), k, n),
    );
    Ok((ga, gb))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.ensure_finite("softmax_rows")?;
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = total.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// VJP given the softmax output `y`: `y ⊙ (g − rowsum(g ⊙ y))`.
pub fn softmax_rows_vjp<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    y.ensure_same_shape(g, "softmax_rows_vjp")?;
    let mut out = Tensor::zeros_like(y);
    for i in 0..y.rows() {
        let (yr, gr) = (y.row(i), g.row(i));
        let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in out.row_mut(i).iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - inner);
        }
    }
    Ok(out)
}

/// Normalized input and reciprocal standard deviation per row.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T: Scalar> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

impl<T: Scalar> LayerNormCache<T> {
    pub fn size_bytes(&self) -> usize {
        self.xhat.size_bytes() + self.rstd.len() * T::DTYPE.size_bytes()
    }
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    layer_norm_forward(x, gain, bias, eps).map(|(y, _)| y)
}

pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("layer_norm: eps must be positive".into()));
    }
    let eps = T::from_f64_lossy(eps);
    let inv_d = T::from_usize(d).unwrap().recip();
    let mut xhat = x.clone();
    let mut y = Tensor::zeros_like(x);
    let mut rstd = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = xhat.row_mut(i);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = (var + eps).sqrt().recip();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        rstd.push(r);
        for (j, o) in y.row_mut(i).iter_mut().enumerate() {
            *o = xhat.data()[i * d + j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((y, LayerNormCache { xhat, rstd }))
}

/// Returns `(gx, ggain, gbias)`.
pub fn layer_norm_vjp<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    cache.xhat.ensure_same_shape(g, "layer_norm_vjp")?;
    let d = g.cols();
    let inv_d = T::from_usize(d).unwrap().recip();
    let mut gx = Tensor::zeros_like(g);
    let mut ggain = Tensor::zeros(&[d]);
    let mut gbias = Tensor::zeros(&[d]);
    let mut gxhat = vec![T::zero(); d];
    for i in 0..g.rows() {
        let (xh, gr) = (cache.xhat.row(i), g.row(i));
        for j in 0..d {
            gxhat[j] = gr[j] * gain.data()[j];
            ggain.data_mut()[j] += gr[j] * xh[j];
            gbias.data_mut()[j] += gr[j];
        }
        let sum_g: T = gxhat.iter().copied().sum();
        let sum_gx: T = gxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        let r = cache.rstd[i];
        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
            *o = r * (gxhat[j] - inv_d * sum_g - xh[j] * inv_d * sum_gx);
        }
    }
    Ok((gx, ggain, gbias))
}

/// tanh-approximation GELU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let k = T::from_f64_lossy(GELU_K);
    let c = T::from_f64_lossy(GELU_C);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let k = T::from_f64_lossy(GELU_K);
    let c = T::from_f64_lossy(GELU_C);
    let three = T::from_f64_lossy(3.0);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
}

/// Elementwise VJP of [`gelu`] at input `x`.
pub fn gelu_vjp<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(g, "gelu_vjp", |xv, gv| gelu_grad_scalar(xv) * gv)
}

/// Mean next-token cross-entropy and its gradient `(softmax − onehot) / T`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    let (rows, vocab) = expect_rank2(logits, "cross_entropy")?;
    if targets.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::OutOfRange {
            op: "cross_entropy",
            index: bad,
            limit: vocab,
        });
    }
    let probs = softmax_rows(logits)?;
    let inv_t = T::from_usize(rows.max(1)).unwrap().recip();
    let mut loss = T::zero();
    let mut grad = probs;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - row[t];
        let g = grad.row_mut(i);
        g[t] -= T::one();
        g.iter_mut().for_each(|v| *v *= inv_t);
    }
    Ok((loss * inv_t, grad))
}
