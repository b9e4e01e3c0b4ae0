//! Layer-update rules and their exact inverses.

use super::layers::{attn_block, check_layer_state, layer_fn, mlp_block};
use super::{BlockKind, Model};
use crate::error::{Error, Result};
use crate::numerics::{matmul, Scalar, Tensor};

/// The states a reversible forward pass keeps alive between layers.
#[derive(Debug, Clone, PartialEq)]
pub enum StateCarrier<T: Scalar> {
    /// `(p⁽ℓ⁻¹⁾, p⁽ℓ⁾)` for the two-term recurrences.
    TwoStep { prev: Tensor<T>, cur: Tensor<T> },
    /// `(p⁽ℓ⁾, q⁽ℓ⁾)` for the staggered Hamiltonian update.
    HamiltonianPair { p: Tensor<T>, q: Tensor<T> },
}

impl<T: Scalar> StateCarrier<T> {
    /// Carrier at depth 0. The missing second state duplicates the embedding.
    pub fn initial(p0: Tensor<T>, kind: BlockKind) -> Self {
        match kind {
            BlockKind::Hamiltonian => StateCarrier::HamiltonianPair {
                q: p0.clone(),
                p: p0,
            },
            _ => StateCarrier::TwoStep {
                prev: p0.clone(),
                cur: p0,
            },
        }
    }

    pub fn two_step(prev: Tensor<T>, cur: Tensor<T>) -> Result<Self> {
        prev.ensure_same_shape(&cur, "carrier")?;
        Ok(StateCarrier::TwoStep { prev, cur })
    }

    pub fn hamiltonian(p: Tensor<T>, q: Tensor<T>) -> Result<Self> {
        p.ensure_same_shape(&q, "carrier")?;
        Ok(StateCarrier::HamiltonianPair { p, q })
    }

    /// The state fed to the output projection.
    pub fn output(&self) -> &Tensor<T> {
        match self {
            StateCarrier::TwoStep { cur, .. } => cur,
            StateCarrier::HamiltonianPair { p, .. } => p,
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 2] {
        match self {
            StateCarrier::TwoStep { prev, cur } => [prev, cur],
            StateCarrier::HamiltonianPair { p, q } => [p, q],
        }
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        match self {
            StateCarrier::TwoStep { prev, cur } => [prev, cur],
            StateCarrier::HamiltonianPair { p, q } => [p, q],
        }
    }

    pub fn size_bytes(&self) -> usize {
        self.tensors().iter().map(|t| t.size_bytes()).sum()
    }

    /// Largest max-norm relative error over both members.
    pub fn max_rel_err(&self, reference: &Self) -> f64 {
        self.tensors()
            .iter()
            .zip(reference.tensors())
            .map(|(a, b)| crate::numerics::max_rel_err(a, b))
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        let [a, b] = self.tensors();
        (a.norm().powi(2) + b.norm().powi(2)).sqrt()
    }

    fn expect_two_step(&self, op: &'static str) -> Result<(&Tensor<T>, &Tensor<T>)> {
        match self {
            StateCarrier::TwoStep { prev, cur } => Ok((prev, cur)),
            _ => Err(Error::InvalidArgument(format!("{op}: expected a two-step carrier"))),
        }
    }

    fn expect_pair(&self, op: &'static str) -> Result<(&Tensor<T>, &Tensor<T>)> {
        match self {
            StateCarrier::HamiltonianPair { p, q } => Ok((p, q)),
            _ => Err(Error::InvalidArgument(format!(
                "{op}: expected a position/momentum carrier"
            ))),
        }
    }
}

/// `p⁺ = prev·p⁻ + cur·p + force·F(p)`; every two-term rule is one of these.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoStepCoeffs {
    pub prev: f64,
    pub cur: f64,
    pub force: f64,
}

impl TwoStepCoeffs {
    pub fn midpoint(h: f64) -> Self {
        TwoStepCoeffs {
            prev: 1.0,
            cur: 0.0,
            force: 2.0 * h,
        }
    }

    pub fn midpoint_a(h: f64, a: f64) -> Result<Self> {
        if a == 0.0 {
            return Err(Error::InvalidArgument(
                "midpoint-(a) with a = 0 is not invertible".into(),
            ));
        }
        Ok(TwoStepCoeffs {
            prev: a,
            cur: 1.0 - a,
            force: h,
        })
    }

    pub fn leapfrog(h: f64) -> Self {
        TwoStepCoeffs {
            prev: -1.0,
            cur: 2.0,
            force: h * h,
        }
    }

    /// Coefficients of layer `layer` for the configured kind; `None` for the
    /// baseline and Hamiltonian kinds.
    pub fn for_layer(cfg: &super::ModelConfig, layer: usize) -> Option<Result<Self>> {
        let h = cfg.step_size;
        match cfg.block_kind {
            BlockKind::Midpoint => Some(Ok(Self::midpoint(h))),
            BlockKind::MidpointA | BlockKind::Retrofit => Some(Self::midpoint_a(h, cfg.a_at(layer))),
            BlockKind::Leapfrog => Some(Ok(Self::leapfrog(h))),
            BlockKind::Baseline | BlockKind::Hamiltonian => None,
        }
    }
}

/// Forward two-term update given the already evaluated force `F(cur)`.
pub fn two_step_update<T: Scalar>(
    prev: &Tensor<T>,
    cur: &Tensor<T>,
    force: &Tensor<T>,
    c: TwoStepCoeffs,
) -> Result<Tensor<T>> {
    prev.ensure_same_shape(cur, "two_step_update")?;
    cur.ensure_same_shape(force, "two_step_update")?;
    let (a, b, g) = (
        T::from_f64_lossy(c.prev),
        T::from_f64_lossy(c.cur),
        T::from_f64_lossy(c.force),
    );
    let data = prev
        .data()
        .iter()
        .zip(cur.data())
        .zip(force.data())
        .map(|((&pm, &pc), &f)| a * pm + b * pc + g * f)
        .collect();
    Tensor::new(prev.shape(), data)
}

/// Recovers `p⁻ = (p⁺ − cur·p − force·F(p)) / prev`.
pub fn two_step_recover<T: Scalar>(
    cur: &Tensor<T>,
    next: &Tensor<T>,
    force: &Tensor<T>,
    c: TwoStepCoeffs,
) -> Result<Tensor<T>> {
    cur.ensure_same_shape(next, "two_step_recover")?;
    cur.ensure_same_shape(force, "two_step_recover")?;
    let (a, b, g) = (
        T::from_f64_lossy(c.prev),
        T::from_f64_lossy(c.cur),
        T::from_f64_lossy(c.force),
    );
    let data = next
        .data()
        .iter()
        .zip(cur.data())
        .zip(force.data())
        .map(|((&pn, &pc), &f)| (pn - b * pc - g * f) / a)
        .collect();
    Tensor::new(cur.shape(), data)
}

fn two_step_with<T: Scalar>(
    carrier: &StateCarrier<T>,
    model: &Model<T>,
    layer: usize,
    c: TwoStepCoeffs,
    op: &'static str,
) -> Result<StateCarrier<T>> {
    let (prev, cur) = carrier.expect_two_step(op)?;
    let f = layer_fn(cur, model, layer)?;
    let next = two_step_update(prev, cur, &f, c)?;
    Ok(StateCarrier::TwoStep {
        prev: cur.clone(),
        cur: next,
    })
}

fn two_step_inverse_with<T: Scalar>(
    carrier: &StateCarrier<T>,
    model: &Model<T>,
    layer: usize,
    c: TwoStepCoeffs,
    op: &'static str,
) -> Result<StateCarrier<T>> {
    // After a step the carrier holds (p⁽ℓ⁾, p⁽ℓ⁺¹⁾).
    let (cur, next) = carrier.expect_two_step(op)?;
    let f = layer_fn(cur, model, layer)?;
    let prev = two_step_recover(cur, next, &f, c)?;
    Ok(StateCarrier::TwoStep {
        prev,
        cur: cur.clone(),
    })
}

/// `p⁽ℓ⁺¹⁾ = p⁽ℓ⁻¹⁾ + 2h f(p⁽ℓ⁾)`
pub fn midpoint_step<T: Scalar>(
    carrier: &StateCarrier<T>,
    model: &Model<T>,
    layer: usize,
    h: f64,
) -> Result<StateCarrier<T>> {
    two_step_with(carrier, model, layer, TwoStepCoeffs::midpoint(h), "midpoint_step")
}

pub fn midpoint_inverse<T: Scalar>(
    carrier: &StateCarrier<T>,
    model: &Model<T>,
    layer: usize,
    h: f64,
) -> Result<StateCarrier<T>> {
    two_step_inverse_with(carrier, model, layer, TwoStepCoeffs::midpoint(h), "midpoint_inverse")
}

/// `p⁽ℓ⁺¹⁾ = a p⁽ℓ⁻¹⁾ + (1 − a) p⁽ℓ⁾ + h f(p⁽ℓ⁾)`
pub fn midpoint_a_step<T: Scalar>(
    carrier: &StateCarrier<T>,
    model: &Model<T>,
    layer: usize,
    h: f64,
    a: f64,
) -> Result<StateCarrier<T>> {
    two_step_with(carrier, model, layer, TwoStepCoeffs::midpoint_a(h, a)?, "midpoint_a_step")
}

pub fn midpoint_a_inverse<T: Scalar>(
    carrier: &StateCarrier<T>,
    model: &Model<T>,
    layer: usize,
    h: f64,
    a: f64,
) -> Result<StateCarrier<T>> {
    two_step_inverse_with(
        carrier,
        model,
        layer,
        TwoStepCoeffs::midpoint_a(h, a)?,
        "midpoint_a_inverse",
    )
}

/// `p⁽ℓ⁺¹⁾ = 2p⁽ℓ⁾ − p⁽ℓ⁻¹⁾ + h² f(p⁽ℓ⁾)`
pub fn leapfrog_step<T: Scalar>(
    carrier: &StateCarrier<T>,
    model: &Model<T>,
    layer: usize,
    h: f64,
) -> Result<StateCarrier<T>> {
    two_step_with(carrier, model, layer, TwoStepCoeffs::leapfrog(h), "leapfrog_step")
}

pub fn leapfrog_inverse<T: Scalar>(
    carrier: &StateCarrier<T>,
    model: &Model<T>,
    layer: usize,
    h: f64,
) -> Result<StateCarrier<T>> {
    two_step_inverse_with(carrier, model, layer, TwoStepCoeffs::leapfrog(h), "leapfrog_inverse")
}

/// `q' = q + Attn(LN₁ p)`, then `p' = p + MLP(LN₂ q')` (unit coefficients).
pub fn hamiltonian_step<T: Scalar>(
    carrier: &StateCarrier<T>,
    model: &Model<T>,
    layer: usize,
) -> Result<StateCarrier<T>> {
    let (p, q) = carrier.expect_pair("hamiltonian_step")?;
    let q_new = q.add(&attn_block(p, model, layer)?)?;
    let p_new = p.add(&mlp_block(&q_new, model, layer)?)?;
    Ok(StateCarrier::HamiltonianPair { p: p_new, q: q_new })
}

/// Undoes [`hamiltonian_step`]: `p = p' − MLP(LN₂ q')`, then `q = q' − Attn(LN₁ p)`.
pub fn hamiltonian_inverse<T: Scalar>(
    carrier: &StateCarrier<T>,
    model: &Model<T>,
    layer: usize,
) -> Result<StateCarrier<T>> {
    let (p_new, q_new) = carrier.expect_pair("hamiltonian_inverse")?;
    let p = p_new.sub(&mlp_block(q_new, model, layer)?)?;
    let q = q_new.sub(&attn_block(&p, model, layer)?)?;
    Ok(StateCarrier::HamiltonianPair { p, q })
}

/// The force term `F_ℓ` of the model's two-term rule: the layer function, or
/// the retrofit composite for converted models.
pub fn force<T: Scalar>(p: &Tensor<T>, model: &Model<T>, layer: usize) -> Result<Tensor<T>> {
    match model.config.block_kind {
        BlockKind::Retrofit => crate::retrofit::retrofit_force(p, model, layer),
        _ => layer_fn(p, model, layer),
    }
}

/// One forward layer of a reversible model, dispatched on its block kind.
pub fn step<T: Scalar>(
    carrier: &StateCarrier<T>,
    model: &Model<T>,
    layer: usize,
) -> Result<StateCarrier<T>> {
    match TwoStepCoeffs::for_layer(&model.config, layer) {
        Some(c) => {
            let c = c?;
            let (prev, cur) = carrier.expect_two_step("step")?;
            let f = force(cur, model, layer)?;
            let next = two_step_update(prev, cur, &f, c)?;
            Ok(StateCarrier::TwoStep {
                prev: cur.clone(),
                cur: next,
            })
        }
        None if model.config.block_kind == BlockKind::Hamiltonian => {
            hamiltonian_step(carrier, model, layer)
        }
        None => Err(Error::NotReversible(model.config.block_kind.name())),
    }
}

/// Inverse of [`step`].
pub fn inverse<T: Scalar>(
    carrier: &StateCarrier<T>,
    model: &Model<T>,
    layer: usize,
) -> Result<StateCarrier<T>> {
    match TwoStepCoeffs::for_layer(&model.config, layer) {
        Some(c) => {
            let c = c?;
            let (cur, next) = carrier.expect_two_step("inverse")?;
            let f = force(cur, model, layer)?;
            let prev = two_step_recover(cur, next, &f, c)?;
            Ok(StateCarrier::TwoStep {
                prev,
                cur: cur.clone(),
            })
        }
        None if model.config.block_kind == BlockKind::Hamiltonian => {
            hamiltonian_inverse(carrier, model, layer)
        }
        None => Err(Error::NotReversible(model.config.block_kind.name())),
    }
}

/// `p⁽⁰⁾ = E(x) + P`: token rows plus learned positions.
pub fn embed<T: Scalar>(tokens: &[usize], model: &Model<T>) -> Result<Tensor<T>> {
    let cfg = &model.config;
    if tokens.is_empty() || tokens.len() > cfg.context_length {
        return Err(Error::OutOfRange {
            op: "embed: sequence length",
            index: tokens.len(),
            limit: cfg.context_length,
        });
    }
    let emb = &model.params.embedding;
    let d = cfg.width;
    let mut out = Tensor::zeros(&[tokens.len(), d]);
    for (t, &tok) in tokens.iter().enumerate() {
        if tok >= cfg.vocab_size {
            return Err(Error::OutOfRange {
                op: "embed: token",
                index: tok,
                limit: cfg.vocab_size,
            });
        }
        let (e, pos) = (emb.token.row(tok), emb.position.row(t));
        for ((o, &a), &b) in out.row_mut(t).iter_mut().zip(e).zip(pos) {
            *o = a + b;
        }
    }
    Ok(out)
}

/// Logits `p·W`; softmax is left to the loss.
pub fn project_logits<T: Scalar>(p: &Tensor<T>, model: &Model<T>) -> Result<Tensor<T>> {
    check_layer_state(p, model, "project_logits")?;
    matmul(p, &model.params.embedding.head)
}
