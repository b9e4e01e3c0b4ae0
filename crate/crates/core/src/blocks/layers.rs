//! Attention and MLP sub-blocks with forward caches and hand-written backward passes.

use super::{BlockParams, Model};
use crate::error::{Error, Result};
use crate::numerics::{
    gelu, gelu_vjp, gemm, layer_norm_forward, layer_norm_vjp, LayerNormCache, MatMut, MatRef,
    Scalar, Tensor,
};

/// `x·w` for `x: n×i`, `w: i×o`.
fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (n, i, o) = (x.rows(), x.cols(), w.cols());
    let mut out = Tensor::zeros(&[n, o]);
    gemm(
        T::one(),
        MatRef::dense(x.data(), n, i),
        MatRef::dense(w.data(), i, o),
        T::zero(),
        MatMut::dense(out.data_mut(), n, o),
    );
    out
}

/// Accumulates `gw += xᵀ·g` and returns `g·wᵀ`.
fn linear_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &Tensor<T>, gw: &mut Tensor<T>) -> Tensor<T> {
    let (n, i, o) = (x.rows(), x.cols(), w.cols());
    gemm(
        T::one(),
        MatRef::dense(x.data(), n, i).t(),
        MatRef::dense(g.data(), n, o),
        T::one(),
        MatMut::dense(gw.data_mut(), i, o),
    );
    let mut gx = Tensor::zeros(&[n, i]);
    gemm(
        T::one(),
        MatRef::dense(g.data(), n, o),
        MatRef::dense(w.data(), i, o).t(),
        T::zero(),
        MatMut::dense(gx.data_mut(), n, i),
    );
    gx
}

fn add_bias<T: Scalar>(x: &mut Tensor<T>, b: &Tensor<T>) {
    for i in 0..x.rows() {
        for (v, &bv) in x.row_mut(i).iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
}

fn accumulate_col_sums<T: Scalar>(g: &Tensor<T>, out: &mut Tensor<T>) {
    for i in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
}

fn check_state<T: Scalar>(p: &Tensor<T>, model: &Model<T>, op: &'static str) -> Result<()> {
    let cfg = &model.config;
    match *p.shape() {
        [t, d] if d == cfg.width && t >= 1 && t <= cfg.context_length => Ok(()),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: p.shape().to_vec(),
            rhs: vec![cfg.context_length, cfg.width],
        }),
    }
}

/// Quantities retained by one attention evaluation for its backward pass.
#[derive(Debug, Clone)]
pub struct AttnCache<T: Scalar> {
    ln: LayerNormCache<T>,
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Row-stochastic causal attention weights, `heads × T × T`.
    probs: Vec<T>,
    o: Tensor<T>,
}

impl<T: Scalar> AttnCache<T> {
    pub fn tensor_count(&self) -> usize {
        8
    }

    pub fn size_bytes(&self) -> usize {
        self.ln.size_bytes()
            + self.x.size_bytes()
            + self.q.size_bytes()
            + self.k.size_bytes()
            + self.v.size_bytes()
            + self.probs.len() * T::DTYPE.size_bytes()
            + self.o.size_bytes()
    }
}

/// Causal multi-head self-attention of `LN₁(p)`, without the residual add.
pub fn attn_forward<T: Scalar>(
    p: &Tensor<T>,
    bp: &BlockParams<T>,
    heads: usize,
    eps: f64,
) -> Result<(Tensor<T>, AttnCache<T>)> {
    let (seq, d) = (p.rows(), p.cols());
    let dh = d / heads;
    let (x, ln) = layer_norm_forward(p, &bp.ln1_gain, &bp.ln1_bias, eps)?;
    let q = linear(&x, &bp.wq);
    let k = linear(&x, &bp.wk);
    let v = linear(&x, &bp.wv);
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::zero(); heads * seq * seq];
    let mut o = Tensor::zeros(&[seq, d]);
    for h in 0..heads {
        let s = &mut probs[h * seq * seq..(h + 1) * seq * seq];
        gemm(
            scale,
            MatRef::col_block(q.data(), seq, d, h * dh, dh),
            MatRef::col_block(k.data(), seq, d, h * dh, dh).t(),
            T::zero(),
            MatMut::dense(s, seq, seq),
        );
        for t in 0..seq {
            let row = &mut s[t * seq..(t + 1) * seq];
            crate::numerics::softmax_in_place(&mut row[..=t]);
            row[t + 1..].iter_mut().for_each(|v| *v = T::zero());
        }
        gemm(
            T::one(),
            MatRef::dense(s, seq, seq),
            MatRef::col_block(v.data(), seq, d, h * dh, dh),
            T::zero(),
            MatMut::col_block(o.data_mut(), seq, d, h * dh, dh),
        );
    }
    let out = linear(&o, &bp.wo);
    Ok((
        out,
        AttnCache {
            ln,
            x,
            q,
            k,
            v,
            probs,
            o,
        },
    ))
}

/// Backward of [`attn_forward`]: accumulates into `grads`, returns the gradient w.r.t. `p`.
pub fn attn_backward<T: Scalar>(
    cache: &AttnCache<T>,
    bp: &BlockParams<T>,
    heads: usize,
    g: &Tensor<T>,
    grads: &mut BlockParams<T>,
) -> Result<Tensor<T>> {
    let (seq, d) = (g.rows(), g.cols());
    let dh = d / heads;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let go = linear_backward(&cache.o, &bp.wo, g, &mut grads.wo);
    let mut gq = Tensor::zeros(&[seq, d]);
    let mut gk = Tensor::zeros(&[seq, d]);
    let mut gv = Tensor::zeros(&[seq, d]);
    let mut gs = vec![T::zero(); seq * seq];
    for h in 0..heads {
        let pr = &cache.probs[h * seq * seq..(h + 1) * seq * seq];
        // gP = gO_h · V_hᵀ
        gemm(
            T::one(),
            MatRef::col_block(go.data(), seq, d, h * dh, dh),
            MatRef::col_block(cache.v.data(), seq, d, h * dh, dh).t(),
            T::zero(),
            MatMut::dense(&mut gs, seq, seq),
        );
        // gV_h = Pᵀ · gO_h
        gemm(
            T::one(),
            MatRef::dense(pr, seq, seq).t(),
            MatRef::col_block(go.data(), seq, d, h * dh, dh),
            T::zero(),
            MatMut::col_block(gv.data_mut(), seq, d, h * dh, dh),
        );
        for t in 0..seq {
            let (prow, grow) = (&pr[t * seq..(t + 1) * seq], &mut gs[t * seq..(t + 1) * seq]);
            let inner: T = prow.iter().zip(grow.iter()).map(|(&a, &b)| a * b).sum();
            for (gv, &pv) in grow.iter_mut().zip(prow) {
                *gv = pv * (*gv - inner) * scale;
            }
        }
        gemm(
            T::one(),
            MatRef::dense(&gs, seq, seq),
            MatRef::col_block(cache.k.data(), seq, d, h * dh, dh),
            T::zero(),
            MatMut::col_block(gq.data_mut(), seq, d, h * dh, dh),
        );
        gemm(
            T::one(),
            MatRef::dense(&gs, seq, seq).t(),
            MatRef::col_block(cache.q.data(), seq, d, h * dh, dh),
            T::zero(),
            MatMut::col_block(gk.data_mut(), seq, d, h * dh, dh),
        );
    }
    let mut gx = linear_backward(&cache.x, &bp.wq, &gq, &mut grads.wq);
    gx.add_assign(&linear_backward(&cache.x, &bp.wk, &gk, &mut grads.wk))?;
    gx.add_assign(&linear_backward(&cache.x, &bp.wv, &gv, &mut grads.wv))?;
    let (gp, ggain, gbias) = layer_norm_vjp(&cache.ln, &bp.ln1_gain, &gx)?;
    grads.ln1_gain.add_assign(&ggain)?;
    grads.ln1_bias.add_assign(&gbias)?;
    Ok(gp)
}

#[derive(Debug, Clone)]
pub struct MlpCache<T: Scalar> {
    ln: LayerNormCache<T>,
    z: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

impl<T: Scalar> MlpCache<T> {
    pub fn tensor_count(&self) -> usize {
        5
    }

    pub fn size_bytes(&self) -> usize {
        self.ln.size_bytes() + self.z.size_bytes() + self.pre.size_bytes() + self.act.size_bytes()
    }
}

/// `W₂·gelu(W₁·LN₂(x) + b₁) + b₂`, row-wise, without the residual add.
pub fn mlp_forward<T: Scalar>(
    x: &Tensor<T>,
    bp: &BlockParams<T>,
    eps: f64,
) -> Result<(Tensor<T>, MlpCache<T>)> {
    let (z, ln) = layer_norm_forward(x, &bp.ln2_gain, &bp.ln2_bias, eps)?;
    let mut pre = linear(&z, &bp.w1);
    add_bias(&mut pre, &bp.b1);
    let act = gelu(&pre);
    let mut out = linear(&act, &bp.w2);
    add_bias(&mut out, &bp.b2);
    Ok((out, MlpCache { ln, z, pre, act }))
}

pub fn mlp_backward<T: Scalar>(
    cache: &MlpCache<T>,
    bp: &BlockParams<T>,
    g: &Tensor<T>,
    grads: &mut BlockParams<T>,
) -> Result<Tensor<T>> {
    accumulate_col_sums(g, &mut grads.b2);
    let gact = linear_backward(&cache.act, &bp.w2, g, &mut grads.w2);
    let gpre = gelu_vjp(&cache.pre, &gact)?;
    accumulate_col_sums(&gpre, &mut grads.b1);
    let gz = linear_backward(&cache.z, &bp.w1, &gpre, &mut grads.w1);
    let (gx, ggain, gbias) = layer_norm_vjp(&cache.ln, &bp.ln2_gain, &gz)?;
    grads.ln2_gain.add_assign(&ggain)?;
    grads.ln2_bias.add_assign(&gbias)?;
    Ok(gx)
}

/// Everything the layer function retains for its backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache<T: Scalar> {
    pub attn: AttnCache<T>,
    pub mlp: MlpCache<T>,
}

impl<T: Scalar> LayerCache<T> {
    pub fn tensor_count(&self) -> usize {
        self.attn.tensor_count() + self.mlp.tensor_count()
    }

    pub fn size_bytes(&self) -> usize {
        self.attn.size_bytes() + self.mlp.size_bytes()
    }
}

/// `f(p) = Attn(LN₁ p) + MLP(LN₂(p + Attn(LN₁ p)))` with its cache.
pub fn layer_forward<T: Scalar>(
    p: &Tensor<T>,
    bp: &BlockParams<T>,
    heads: usize,
    eps: f64,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    let (a, attn) = attn_forward(p, bp, heads, eps)?;
    let u = p.add(&a)?;
    let (m, mlp) = mlp_forward(&u, bp, eps)?;
    let mut out = a;
    out.add_assign(&m)?;
    Ok((out, LayerCache { attn, mlp }))
}

/// Backward of [`layer_forward`]; returns `J_fᵀ g`.
pub fn layer_backward<T: Scalar>(
    cache: &LayerCache<T>,
    bp: &BlockParams<T>,
    heads: usize,
    g: &Tensor<T>,
    grads: &mut BlockParams<T>,
) -> Result<Tensor<T>> {
    let gu = mlp_backward(&cache.mlp, bp, g, grads)?;
    let ga = g.add(&gu)?;
    let mut gp = attn_backward(&cache.attn, bp, heads, &ga, grads)?;
    gp.add_assign(&gu)?;
    Ok(gp)
}

/// Multi-head causal self-attention of `LN₁(p)` for layer `layer`.
pub fn attn_block<T: Scalar>(p: &Tensor<T>, model: &Model<T>, layer: usize) -> Result<Tensor<T>> {
    check_state(p, model, "attn_block")?;
    let cfg = &model.config;
    attn_forward(p, model.block(layer), cfg.heads, cfg.ln_eps).map(|(o, _)| o)
}

/// Feed-forward sub-block applied to `LN₂(x)`.
pub fn mlp_block<T: Scalar>(x: &Tensor<T>, model: &Model<T>, layer: usize) -> Result<Tensor<T>> {
    check_state(x, model, "mlp_block")?;
    mlp_forward(x, model.block(layer), model.config.ln_eps).map(|(o, _)| o)
}

/// The transformer layer as an update function, `f_θℓ(p)`.
pub fn layer_fn<T: Scalar>(p: &Tensor<T>, model: &Model<T>, layer: usize) -> Result<Tensor<T>> {
    check_state(p, model, "layer_fn")?;
    let cfg = &model.config;
    layer_forward(p, model.block(layer), cfg.heads, cfg.ln_eps).map(|(o, _)| o)
}

/// Pre-norm residual step: `q = p + Attn(LN₁ p)`, `p' = q + MLP(LN₂ q)`.
pub fn baseline_step<T: Scalar>(p: &Tensor<T>, model: &Model<T>, layer: usize) -> Result<Tensor<T>> {
    let q = p.add(&attn_block(p, model, layer)?)?;
    q.add(&mlp_block(&q, model, layer)?)
}

pub(crate) fn check_layer_state<T: Scalar>(p: &Tensor<T>, model: &Model<T>, op: &'static str) -> Result<()> {
    check_state(p, model, op)
}
