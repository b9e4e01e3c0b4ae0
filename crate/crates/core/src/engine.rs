//! Forward and backward passes over whole models.
//!
//! [`forward_reversible`] keeps only the two-tensor state carrier plus the
//! embedding output; [`backward_reversible`] walks the layers in reverse,
//! rebuilding each earlier state with the exact inverse, recomputing that
//! layer's internals and applying the hand-written VJPs. [`forward_stored`]
//! and [`backward_stored`] are ordinary stored-activation backprop and serve as
//! the reference.

use crate::blocks::layers::{
    attn_backward, attn_forward, layer_backward, layer_forward, mlp_backward, mlp_forward, AttnCache,
    LayerCache, MlpCache,
};
use crate::blocks::{
    embed, project_logits, step, two_step_recover, two_step_update, BlockKind, GradientBundle, Model,
    ModelConfig, Params, StateCarrier, TwoStepCoeffs,
};
use crate::error::{Error, Result};
use crate::numerics::{cross_entropy, matmul_vjp, Scalar, Tensor};
use crate::retrofit::{retrofit_force_backward, retrofit_force_forward, RetrofitForceCache};

/// Abort backward when a reconstructed state is this many times larger than
/// its forward counterpart.
pub const DEFAULT_RECONSTRUCTION_GUARD: f64 = 1e3;

/// Counts what a forward pass keeps alive for the backward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ActivationLedger {
    pub tensors_stored: usize,
    pub scalars_stored: usize,
    /// Retained bytes plus the largest transient working set seen.
    pub peak_bytes: usize,
    retained_bytes: usize,
}

impl ActivationLedger {
    pub fn store_tensor(&mut self, bytes: usize) {
        self.tensors_stored += 1;
        self.retained_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.retained_bytes);
    }

    /// Records `count` tensors totalling `bytes`.
    pub fn store_tensors(&mut self, count: usize, bytes: usize) {
        self.tensors_stored += count;
        self.retained_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.retained_bytes);
    }

    pub fn store_scalars(&mut self, count: usize, bytes_each: usize) {
        self.scalars_stored += count;
        self.retained_bytes += count * bytes_each;
        self.peak_bytes = self.peak_bytes.max(self.retained_bytes);
    }

    /// Records a working set that lives on top of the retained tensors only briefly.
    pub fn observe_transient(&mut self, bytes: usize) {
        self.peak_bytes = self.peak_bytes.max(self.retained_bytes + bytes);
    }

    pub fn retained_bytes(&self) -> usize {
        self.retained_bytes
    }
}

/// Largest batch whose activations fit in `budget` bytes when every sequence
/// needs `ledger.peak_bytes`.
pub fn max_batch_under_budget(budget: usize, ledger: &ActivationLedger) -> usize {
    budget / ledger.peak_bytes.max(1)
}

/// Bytes held by one layer's forward cache for a length-`seq` input.
pub fn layer_cache_bytes(cfg: &ModelConfig, seq: usize) -> usize {
    let (d, hid, heads) = (cfg.width, cfg.hidden_width(), cfg.heads);
    let ln = seq * d + seq;
    let attn = ln + 5 * seq * d + heads * seq * seq;
    let mlp = ln + seq * d + 2 * seq * hid;
    (attn + mlp) * cfg.dtype.size_bytes()
}

/// Transient bytes of one force evaluation with its cache.
pub fn force_workspace_bytes(cfg: &ModelConfig, seq: usize) -> usize {
    let per_layer = layer_cache_bytes(cfg, seq);
    match cfg.block_kind {
        BlockKind::Retrofit => (cfg.fixed_point_iters + 2) * per_layer,
        _ => per_layer,
    }
}

/// Cached force evaluation for the two-term rules.
#[derive(Debug, Clone)]
enum ForceCache<T: Scalar> {
    Layer(LayerCache<T>),
    Retrofit(RetrofitForceCache<T>),
}

impl<T: Scalar> ForceCache<T> {
    fn size_bytes(&self) -> usize {
        match self {
            ForceCache::Layer(c) => c.size_bytes(),
            ForceCache::Retrofit(c) => c.size_bytes(),
        }
    }

    fn tensor_count(&self) -> usize {
        match self {
            ForceCache::Layer(c) => c.tensor_count(),
            ForceCache::Retrofit(c) => c.tensor_count(),
        }
    }
}

fn force_forward<T: Scalar>(p: &Tensor<T>, model: &Model<T>, layer: usize) -> Result<(Tensor<T>, ForceCache<T>)> {
    let cfg = &model.config;
    match cfg.block_kind {
        BlockKind::Retrofit => {
            let (f, c) = retrofit_force_forward(p, model, layer)?;
            Ok((f, ForceCache::Retrofit(c)))
        }
        _ => {
            let (f, c) = layer_forward(p, model.block(layer), cfg.heads, cfg.ln_eps)?;
            Ok((f, ForceCache::Layer(c)))
        }
    }
}

fn force_backward<T: Scalar>(
    cache: &ForceCache<T>,
    model: &Model<T>,
    layer: usize,
    g: &Tensor<T>,
    grads: &mut Params<T>,
) -> Result<Tensor<T>> {
    match cache {
        ForceCache::Layer(c) => {
            layer_backward(c, model.block(layer), model.config.heads, g, &mut grads.blocks[layer])
        }
        ForceCache::Retrofit(c) => retrofit_force_backward(c, model, layer, g, grads),
    }
}

/// What [`forward_reversible`] hands to [`backward_reversible`].
#[derive(Debug, Clone)]
pub struct ReversibleTrace<T: Scalar> {
    pub tokens: Vec<usize>,
    pub carrier: StateCarrier<T>,
    /// The embedding output, kept so reconstruction has a checked end point.
    pub anchor: Tensor<T>,
    /// Carrier norm after each layer, index 0 being the initial carrier.
    pub norms: Vec<f64>,
}

fn ensure_reversible(cfg: &ModelConfig) -> Result<()> {
    if cfg.block_kind.is_reversible() {
        Ok(())
    } else {
        Err(Error::NotReversible(cfg.block_kind.name()))
    }
}

/// Forward pass that retains only the carrier, the embedding output and one
/// norm per layer.
pub fn forward_reversible<T: Scalar>(
    tokens: &[usize],
    model: &Model<T>,
) -> Result<(Tensor<T>, ReversibleTrace<T>, ActivationLedger)> {
    let cfg = &model.config;
    ensure_reversible(cfg)?;
    let p0 = embed(tokens, model)?;
    let mut ledger = ActivationLedger::default();
    ledger.store_tensor(p0.size_bytes());
    let mut carrier = StateCarrier::initial(p0.clone(), cfg.block_kind);
    for t in carrier.tensors() {
        ledger.store_tensor(t.size_bytes());
    }
    ledger.store_scalars(cfg.layers + 1, std::mem::size_of::<f64>());
    ledger.observe_transient(force_workspace_bytes(cfg, tokens.len()) + p0.size_bytes());
    let mut norms = Vec::with_capacity(cfg.layers + 1);
    norms.push(carrier.norm());
    for layer in 0..cfg.layers {
        carrier = step(&carrier, model, layer)?;
        norms.push(carrier.norm());
    }
    let logits = project_logits(carrier.output(), model)?;
    let trace = ReversibleTrace {
        tokens: tokens.to_vec(),
        carrier,
        anchor: p0,
        norms,
    };
    Ok((logits, trace, ledger))
}

#[derive(Debug, Clone)]
enum StepCache<T: Scalar> {
    Residual(LayerCache<T>),
    TwoStep(ForceCache<T>),
    Hamiltonian { attn: AttnCache<T>, mlp: MlpCache<T> },
}

impl<T: Scalar> StepCache<T> {
    fn size_bytes(&self) -> usize {
        match self {
            StepCache::Residual(c) => c.size_bytes(),
            StepCache::TwoStep(c) => c.size_bytes(),
            StepCache::Hamiltonian { attn, mlp } => attn.size_bytes() + mlp.size_bytes(),
        }
    }

    fn tensor_count(&self) -> usize {
        match self {
            StepCache::Residual(c) => c.tensor_count(),
            StepCache::TwoStep(c) => c.tensor_count(),
            StepCache::Hamiltonian { attn, mlp } => attn.tensor_count() + mlp.tensor_count(),
        }
    }
}

/// Everything a stored-activation forward pass retains.
#[derive(Debug, Clone)]
pub struct StoredTrace<T: Scalar> {
    pub tokens: Vec<usize>,
    /// `p⁽⁰⁾ … p⁽ᴸ⁾`.
    pub states: Vec<Tensor<T>>,
    /// `q⁽⁰⁾ … q⁽ᴸ⁾` for the Hamiltonian kind, empty otherwise.
    pub momenta: Vec<Tensor<T>>,
    caches: Vec<StepCache<T>>,
    kind: BlockKind,
}

impl<T: Scalar> StoredTrace<T> {
    /// Carrier before layer `depth` runs (`depth = L` is the final carrier).
    pub fn carrier(&self, depth: usize) -> StateCarrier<T> {
        match self.kind {
            BlockKind::Hamiltonian => StateCarrier::HamiltonianPair {
                p: self.states[depth].clone(),
                q: self.momenta[depth].clone(),
            },
            _ => StateCarrier::TwoStep {
                prev: self.states[depth.saturating_sub(1)].clone(),
                cur: self.states[depth].clone(),
            },
        }
    }

    pub fn depth(&self) -> usize {
        self.caches.len()
    }
}

/// Forward pass retaining every hidden state and every layer's cache. Works for
/// every kind, including the baseline.
pub fn forward_stored<T: Scalar>(
    tokens: &[usize],
    model: &Model<T>,
) -> Result<(Tensor<T>, StoredTrace<T>, ActivationLedger)> {
    let cfg = &model.config;
    let p0 = embed(tokens, model)?;
    let mut ledger = ActivationLedger::default();
    ledger.store_tensor(p0.size_bytes());
    let mut states = vec![p0.clone()];
    let mut momenta = Vec::new();
    let mut caches = Vec::with_capacity(cfg.layers);
    if cfg.block_kind == BlockKind::Hamiltonian {
        ledger.store_tensor(p0.size_bytes());
        momenta.push(p0);
    }
    for layer in 0..cfg.layers {
        let cur = &states[layer];
        let cache = match cfg.block_kind {
            BlockKind::Baseline => {
                let (f, c) = layer_forward(cur, model.block(layer), cfg.heads, cfg.ln_eps)?;
                states.push(cur.add(&f)?);
                StepCache::Residual(c)
            }
            BlockKind::Hamiltonian => {
                let bp = model.block(layer);
                let (a, attn) = attn_forward(cur, bp, cfg.heads, cfg.ln_eps)?;
                let q_new = momenta[layer].add(&a)?;
                let (m, mlp) = mlp_forward(&q_new, bp, cfg.ln_eps)?;
                let p_new = cur.add(&m)?;
                ledger.store_tensor(q_new.size_bytes());
                states.push(p_new);
                momenta.push(q_new);
                StepCache::Hamiltonian { attn, mlp }
            }
            _ => {
                let coeffs = two_step_coeffs(cfg, layer)?;
                let prev = &states[layer.saturating_sub(1)];
                let (f, c) = force_forward(cur, model, layer)?;
                states.push(two_step_update(prev, cur, &f, coeffs)?);
                StepCache::TwoStep(c)
            }
        };
        ledger.store_tensor(states[layer + 1].size_bytes());
        ledger.store_tensors(cache.tensor_count(), cache.size_bytes());
        caches.push(cache);
    }
    let out = &states[cfg.layers];
    let logits = project_logits(out, model)?;
    let trace = StoredTrace {
        tokens: tokens.to_vec(),
        states,
        momenta,
        caches,
        kind: cfg.block_kind,
    };
    Ok((logits, trace, ledger))
}

fn two_step_coeffs(cfg: &ModelConfig, layer: usize) -> Result<TwoStepCoeffs> {
    TwoStepCoeffs::for_layer(cfg, layer).unwrap_or(Err(Error::NotReversible(cfg.block_kind.name())))
}

/// Gradient of the output projection; returns the adjoint of the final state.
fn head_backward<T: Scalar>(
    out: &Tensor<T>,
    dlogits: &Tensor<T>,
    model: &Model<T>,
    grads: &mut Params<T>,
) -> Result<Tensor<T>> {
    let (g_out, g_head) = matmul_vjp(out, &model.params.embedding.head, dlogits)?;
    grads.embedding.head.add_assign(&g_head)?;
    Ok(g_out)
}

fn embed_backward<T: Scalar>(tokens: &[usize], g: &Tensor<T>, grads: &mut Params<T>) {
    for (t, &tok) in tokens.iter().enumerate() {
        let row = g.row(t);
        for (dst, &v) in grads.embedding.token.row_mut(tok).iter_mut().zip(row) {
            *dst += v;
        }
        for (dst, &v) in grads.embedding.position.row_mut(t).iter_mut().zip(row) {
            *dst += v;
        }
    }
}

fn check_dlogits<T: Scalar>(dlogits: &Tensor<T>, seq: usize, model: &Model<T>) -> Result<()> {
    let expect = [seq, model.config.vocab_size];
    if dlogits.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "backward: dlogits",
            lhs: dlogits.shape().to_vec(),
            rhs: expect.to_vec(),
        });
    }
    Ok(())
}

/// Options for [`backward_reversible_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardOptions {
    pub guard: f64,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        BackwardOptions {
            guard: DEFAULT_RECONSTRUCTION_GUARD,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackwardReport<T: Scalar> {
    pub grads: GradientBundle<T>,
    /// Max relative error of the reconstructed initial carrier against the
    /// cached embedding output.
    pub anchor_err: f64,
    pub ledger: ActivationLedger,
}

/// Backward pass by state reconstruction.
pub fn backward_reversible<T: Scalar>(
    trace: &ReversibleTrace<T>,
    dlogits: &Tensor<T>,
    model: &Model<T>,
) -> Result<GradientBundle<T>> {
    backward_reversible_with(trace, dlogits, model, BackwardOptions::default(), &mut |_, _| {})
        .map(|r| r.grads)
}

/// [`backward_reversible`] with a configurable guard. `observer(ℓ, c)` sees
/// each reconstructed carrier `c`, the one in place before layer `ℓ` ran.
pub fn backward_reversible_with<T: Scalar>(
    trace: &ReversibleTrace<T>,
    dlogits: &Tensor<T>,
    model: &Model<T>,
    opts: BackwardOptions,
    observer: &mut dyn FnMut(usize, &StateCarrier<T>),
) -> Result<BackwardReport<T>> {
    let cfg = &model.config;
    ensure_reversible(cfg)?;
    if trace.norms.len() != cfg.layers + 1 {
        return Err(Error::TraceMismatch(format!(
            "trace has {} layer norms, model has {} layers",
            trace.norms.len().saturating_sub(1),
            cfg.layers
        )));
    }
    let seq = trace.tokens.len();
    check_dlogits(dlogits, seq, model)?;
    let state_bytes = trace.anchor.size_bytes();
    let mut ledger = ActivationLedger::default();
    for _ in 0..5 {
        // carrier, its adjoint, anchor
        ledger.store_tensor(state_bytes);
    }
    ledger.store_scalars(trace.norms.len(), std::mem::size_of::<f64>());

    let mut grads = model.params.zeros_like();
    let g_out = head_backward(trace.carrier.output(), dlogits, model, &mut grads)?;
    let mut carrier = trace.carrier.clone();
    let mut adj = match &carrier {
        StateCarrier::TwoStep { .. } => [Tensor::zeros_like(&g_out), g_out],
        StateCarrier::HamiltonianPair { .. } => {
            let z = Tensor::zeros_like(&g_out);
            [g_out, z]
        }
    };

    for layer in (0..cfg.layers).rev() {
        let (next_carrier, next_adj, workspace) = match carrier {
            StateCarrier::TwoStep { prev, cur } => {
                let c = two_step_coeffs(cfg, layer)?;
                let (f, cache) = force_forward(&prev, model, layer)?;
                let earlier = two_step_recover(&prev, &cur, &f, c)?;
                let [g_prev, g_cur] = adj;
                let g_force = g_cur.scale(T::from_f64_lossy(c.force));
                let mut g_mid = force_backward(&cache, model, layer, &g_force, &mut grads)?;
                g_mid.add_assign(&g_prev)?;
                g_mid.axpy(T::from_f64_lossy(c.cur), &g_cur)?;
                let g_earlier = g_cur.scale(T::from_f64_lossy(c.prev));
                (
                    StateCarrier::TwoStep { prev: earlier, cur: prev },
                    [g_earlier, g_mid],
                    cache.size_bytes(),
                )
            }
            StateCarrier::HamiltonianPair { p: p_new, q: q_new } => {
                let bp = model.block(layer);
                let (m, mlp) = mlp_forward(&q_new, bp, cfg.ln_eps)?;
                let p = p_new.sub(&m)?;
                let (a, attn) = attn_forward(&p, bp, cfg.heads, cfg.ln_eps)?;
                let q = q_new.sub(&a)?;
                let [g_p_new, g_q_new] = adj;
                let gb = &mut grads.blocks[layer];
                let mut g_q = mlp_backward(&mlp, bp, &g_p_new, gb)?;
                g_q.add_assign(&g_q_new)?;
                let mut g_p = attn_backward(&attn, bp, cfg.heads, &g_q, gb)?;
                g_p.add_assign(&g_p_new)?;
                (
                    StateCarrier::HamiltonianPair { p, q },
                    [g_p, g_q],
                    mlp.size_bytes() + attn.size_bytes(),
                )
            }
        };
        ledger.observe_transient(workspace);
        let forward_norm = trace.norms[layer];
        let norm = next_carrier.norm();
        if !norm.is_finite() || norm > opts.guard * forward_norm.max(f64::MIN_POSITIVE) {
            return Err(Error::ReconstructionDiverged {
                layer,
                reconstructed: norm,
                forward: forward_norm,
            });
        }
        observer(layer, &next_carrier);
        carrier = next_carrier;
        adj = next_adj;
    }

    let anchor_err = carrier
        .tensors()
        .iter()
        .map(|t| crate::numerics::max_rel_err(t, &trace.anchor))
        .fold(0.0, f64::max);
    let [g_a, g_b] = adj;
    let g0 = g_a.add(&g_b)?;
    embed_backward(&trace.tokens, &g0, &mut grads);
    Ok(BackwardReport {
        grads,
        anchor_err,
        ledger,
    })
}

/// Reference backward pass over stored activations.
pub fn backward_stored<T: Scalar>(
    trace: &StoredTrace<T>,
    dlogits: &Tensor<T>,
    model: &Model<T>,
) -> Result<GradientBundle<T>> {
    let cfg = &model.config;
    if trace.depth() != cfg.layers || trace.kind != cfg.block_kind {
        return Err(Error::TraceMismatch(format!(
            "trace of {} {} layers, model of {} {} layers",
            trace.depth(),
            trace.kind,
            cfg.layers,
            cfg.block_kind
        )));
    }
    check_dlogits(dlogits, trace.tokens.len(), model)?;
    let mut grads = model.params.zeros_like();
    let g_out = head_backward(&trace.states[cfg.layers], dlogits, model, &mut grads)?;
    // Adjoints of (first, second) carrier member; the meaning follows the kind.
    let mut g_first = Tensor::zeros_like(&g_out);
    let mut g_second = g_out;
    if cfg.block_kind == BlockKind::Hamiltonian {
        std::mem::swap(&mut g_first, &mut g_second);
    }
    for layer in (0..cfg.layers).rev() {
        let bp = model.block(layer);
        match &trace.caches[layer] {
            StepCache::Residual(c) => {
                let gf = layer_backward(c, bp, cfg.heads, &g_second, &mut grads.blocks[layer])?;
                g_second.add_assign(&gf)?;
            }
            StepCache::TwoStep(cache) => {
                let c = two_step_coeffs(cfg, layer)?;
                let g_force = g_second.scale(T::from_f64_lossy(c.force));
                let mut g_mid = force_backward(cache, model, layer, &g_force, &mut grads)?;
                g_mid.add_assign(&g_first)?;
                g_mid.axpy(T::from_f64_lossy(c.cur), &g_second)?;
                g_first = g_second.scale(T::from_f64_lossy(c.prev));
                g_second = g_mid;
            }
            StepCache::Hamiltonian { attn, mlp } => {
                let gb = &mut grads.blocks[layer];
                let mut g_q = mlp_backward(mlp, bp, &g_first, gb)?;
                g_q.add_assign(&g_second)?;
                let mut g_p = attn_backward(attn, bp, cfg.heads, &g_q, gb)?;
                g_p.add_assign(&g_first)?;
                g_first = g_p;
                g_second = g_q;
            }
        }
    }
    let g0 = if cfg.block_kind == BlockKind::Baseline {
        g_second
    } else {
        g_first.add(&g_second)?
    };
    embed_backward(&trace.tokens, &g0, &mut grads);
    Ok(grads)
}

/// Which backward pass computes gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backprop {
    Reversible,
    Stored,
}

impl Backprop {
    /// Reconstruction for reversible kinds, stored activations for the baseline.
    pub fn for_kind(kind: BlockKind) -> Self {
        if kind.is_reversible() {
            Backprop::Reversible
        } else {
            Backprop::Stored
        }
    }
}

/// Logits without retaining anything beyond what the forward needs.
pub fn forward_logits<T: Scalar>(tokens: &[usize], model: &Model<T>) -> Result<Tensor<T>> {
    let cfg = &model.config;
    if cfg.block_kind == BlockKind::Baseline {
        let mut p = embed(tokens, model)?;
        for layer in 0..cfg.layers {
            p = crate::blocks::baseline_step(&p, model, layer)?;
        }
        project_logits(&p, model)
    } else {
        forward_reversible(tokens, model).map(|(logits, _, _)| logits)
    }
}

/// Gradient of an arbitrary logit loss: `loss_grad` maps logits to `(loss, dlogits)`.
pub fn loss_and_grad_with<T: Scalar>(
    tokens: &[usize],
    model: &Model<T>,
    mode: Backprop,
    loss_grad: impl FnOnce(&Tensor<T>) -> Result<(f64, Tensor<T>)>,
) -> Result<(f64, GradientBundle<T>, ActivationLedger)> {
    match mode {
        Backprop::Reversible => {
            let (logits, trace, mut ledger) = forward_reversible(tokens, model)?;
            let (loss, dlogits) = loss_grad(&logits)?;
            let report = backward_reversible_with(
                &trace,
                &dlogits,
                model,
                BackwardOptions::default(),
                &mut |_, _| {},
            )?;
            ledger.observe_transient(report.ledger.peak_bytes.saturating_sub(ledger.retained_bytes()));
            Ok((loss, report.grads, ledger))
        }
        Backprop::Stored => {
            let (logits, trace, ledger) = forward_stored(tokens, model)?;
            let (loss, dlogits) = loss_grad(&logits)?;
            let grads = backward_stored(&trace, &dlogits, model)?;
            Ok((loss, grads, ledger))
        }
    }
}

/// Next-token cross-entropy of `seq[..n-1]` predicting `seq[1..]`, with gradients.
pub fn loss_and_grad<T: Scalar>(
    seq: &[usize],
    model: &Model<T>,
    mode: Backprop,
) -> Result<(f64, GradientBundle<T>, ActivationLedger)> {
    let (inputs, targets) = split_sequence(seq)?;
    loss_and_grad_with(inputs, model, mode, |logits| {
        let (loss, g) = cross_entropy(logits, targets)?;
        Ok((loss.as_f64(), g))
    })
}

fn split_sequence(seq: &[usize]) -> Result<(&[usize], &[usize])> {
    if seq.len() < 2 {
        return Err(Error::InvalidArgument(
            "a training sequence needs at least two tokens".into(),
        ));
    }
    Ok((&seq[..seq.len() - 1], &seq[1..]))
}

/// Mean next-token cross-entropy over sequences, forward only.
pub fn evaluate_loss<T: Scalar>(model: &Model<T>, seqs: &[Vec<usize>]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("no evaluation sequences".into()));
    }
    let mut total = 0.0;
    for seq in seqs {
        let (inputs, targets) = split_sequence(seq)?;
        let logits = forward_logits(inputs, model)?;
        total += cross_entropy(&logits, targets)?.0.as_f64();
    }
    Ok(total / seqs.len() as f64)
}

/// AdamW with linear warmup and cosine decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            min_lr: 1e-4,
            warmup_steps: 100,
            total_steps: 2000,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: Some(1.0),
        }
    }
}

impl OptimConfig {
    /// Learning rate at 0-based step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return self.min_lr;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.min_lr + cosine * (self.lr - self.min_lr)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Scalar> {
    pub config: OptimConfig,
    pub m: Params<T>,
    pub v: Params<T>,
    pub step: usize,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: OptimConfig, params: &Params<T>) -> Self {
        AdamW {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Applies one update and returns the learning rate used. Gradients are
    /// clipped in place when clipping is enabled.
    pub fn update(&mut self, params: &mut Params<T>, grads: &mut Params<T>) -> f64 {
        let cfg = &self.config;
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.norm();
            if norm > clip {
                grads.scale(T::from_f64_lossy(clip / norm));
            }
        }
        let lr = cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(cfg.eps);
        let iter = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in iter {
            let decay = if p.shape().len() == 2 {
                T::from_f64_lossy(1.0 - lr * cfg.weight_decay)
            } else {
                T::one()
            };
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + one_b1 * gi;
                vd[i] = b2 * vd[i] + one_b2 * gi * gi;
                let denom = (vd[i] * inv_bc2).sqrt() + eps;
                pd[i] = pd[i] * decay - step_size * md[i] / denom;
            }
        }
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub ledger: ActivationLedger,
}

/// One optimizer step on a batch of sequences (gradients averaged).
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    batch: &[Vec<usize>],
    opt: &mut AdamW<T>,
    mode: Backprop,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = model.params.zeros_like();
    let mut loss = 0.0;
    let mut ledger = ActivationLedger::default();
    for seq in batch {
        let (l, g, led) = loss_and_grad(seq, model, mode)?;
        loss += l;
        total.axpy(T::one(), &g)?;
        ledger = led;
    }
    let inv = 1.0 / batch.len() as f64;
    loss *= inv;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: opt.step,
            value: loss,
        });
    }
    total.scale(T::from_f64_lossy(inv));
    let grad_norm = total.norm();
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: opt.step,
            value: grad_norm,
        });
    }
    let lr = opt.update(&mut model.params, &mut total);
    Ok(StepStats {
        loss,
        grad_norm,
        lr,
        ledger,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ModelConfig;
    use crate::numerics::{seeded_rng, DType};
    use rand::Rng as _;

    fn model64(kind: BlockKind, layers: usize, seed: u64) -> Model<f64> {
        let cfg = ModelConfig::new(kind, 11, 8, 8, 2, layers).with_dtype(DType::F64);
        Model::init(cfg, seed).unwrap()
    }

    fn tokens(n: usize, v: usize, seed: u64) -> Vec<usize> {
        let mut rng = seeded_rng(seed);
        (0..n).map(|_| rng.gen_range(0..v)).collect()
    }

    #[test]
    fn cache_size_formula_matches_actual_cache() {
        let m = model64(BlockKind::Midpoint, 2, 0);
        let p = embed(&tokens(6, 11, 1), &m).unwrap();
        let (_, c) = layer_forward(&p, m.block(0), 2, 1e-5).unwrap();
        assert_eq!(c.size_bytes(), layer_cache_bytes(&m.config, 6));
    }

    #[test]
    fn baseline_is_rejected_by_reversible_forward() {
        let m = model64(BlockKind::Baseline, 2, 0);
        assert!(matches!(
            forward_reversible(&[1, 2], &m),
            Err(Error::NotReversible(_))
        ));
    }

    #[test]
    fn zero_dlogits_give_zero_gradients() {
        let m = model64(BlockKind::Leapfrog, 3, 2);
        let toks = tokens(5, 11, 3);
        let (_, trace, _) = forward_reversible(&toks, &m).unwrap();
        let g = backward_reversible(&trace, &Tensor::zeros(&[5, 11]), &m).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn reversible_and_stored_logits_agree_bitwise() {
        for kind in BlockKind::REVERSIBLE {
            let m = model64(kind, 4, 5);
            let toks = tokens(7, 11, 6);
            let (a, _, _) = forward_reversible(&toks, &m).unwrap();
            let (b, trace, _) = forward_stored(&toks, &m).unwrap();
            assert_eq!(a, b, "{kind}");
            assert_eq!(trace.states.len(), 5);
        }
    }

    #[test]
    fn backward_rejects_mismatched_trace() {
        let m = model64(BlockKind::Midpoint, 4, 5);
        let other = model64(BlockKind::Midpoint, 3, 5);
        let toks = tokens(4, 11, 6);
        let (_, trace, _) = forward_reversible(&toks, &m).unwrap();
        assert!(matches!(
            backward_reversible(&trace, &Tensor::zeros(&[4, 11]), &other),
            Err(Error::TraceMismatch(_))
        ));
    }

    #[test]
    fn guard_trips_on_corrupted_carrier() {
        let m = model64(BlockKind::Midpoint, 4, 5);
        let toks = tokens(4, 11, 6);
        let (_, mut trace, _) = forward_reversible(&toks, &m).unwrap();
        for v in trace.carrier.tensors_mut()[0].data_mut() {
            *v *= 1e6;
        }
        let r = backward_reversible(&trace, &Tensor::full(&[4, 11], 1.0), &m);
        assert!(matches!(r, Err(Error::ReconstructionDiverged { layer: 3, .. })), "{r:?}");
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = OptimConfig {
            lr: 1.0,
            min_lr: 0.1,
            warmup_steps: 10,
            total_steps: 110,
            ..OptimConfig::default()
        };
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(60) - 0.55).abs() < 1e-12);
        assert!((cfg.lr_at(110) - 0.1).abs() < 1e-12);
        assert!(cfg.lr_at(500) == 0.1);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let m = model64(BlockKind::Midpoint, 2, 0);
        let mut params = m.params.clone();
        let mut g = params.zeros_like();
        g.embedding.head.fill(0.5);
        let cfg = OptimConfig {
            lr: 0.01,
            warmup_steps: 0,
            weight_decay: 0.0,
            grad_clip: None,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg, &params);
        opt.update(&mut params, &mut g);
        let before = &m.params.embedding.head;
        let after = &params.embedding.head;
        for (b, a) in before.data().iter().zip(after.data()) {
            assert!((b - a - 0.01).abs() < 1e-9);
        }
        assert_eq!(params.embedding.token, m.params.embedding.token);
    }
}
