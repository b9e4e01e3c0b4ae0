use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, DType};
use crate::stability::sample_a_coefficient;

/// Layer update rule applied by every layer of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// Standard pre-norm residual transformer block.
    Baseline,
    /// `p⁺ = p⁻ + 2h f(p)`
    Midpoint,
    /// `p⁺ = a p⁻ + (1 − a) p + h f(p)` with a per-layer coefficient.
    MidpointA,
    /// `p⁺ = 2p − p⁻ + h² f(p)`
    Leapfrog,
    /// Staggered attention/MLP updates on a position–momentum pair.
    Hamiltonian,
    /// Midpoint-(a) student converted from a trained baseline.
    Retrofit,
}

impl BlockKind {
    pub const ALL: [BlockKind; 5] = [
        BlockKind::Baseline,
        BlockKind::Midpoint,
        BlockKind::MidpointA,
        BlockKind::Leapfrog,
        BlockKind::Hamiltonian,
    ];

    pub const REVERSIBLE: [BlockKind; 4] = [
        BlockKind::Midpoint,
        BlockKind::MidpointA,
        BlockKind::Leapfrog,
        BlockKind::Hamiltonian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Baseline => "baseline",
            BlockKind::Midpoint => "midpoint",
            BlockKind::MidpointA => "midpoint_a",
            BlockKind::Leapfrog => "leapfrog",
            BlockKind::Hamiltonian => "hamiltonian",
            BlockKind::Retrofit => "retrofit",
        }
    }

    pub fn is_reversible(self) -> bool {
        self != BlockKind::Baseline
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(BlockKind::Baseline),
            "midpoint" => Ok(BlockKind::Midpoint),
            "midpoint_a" | "midpoint-a" => Ok(BlockKind::MidpointA),
            "leapfrog" => Ok(BlockKind::Leapfrog),
            "hamiltonian" => Ok(BlockKind::Hamiltonian),
            "retrofit" => Ok(BlockKind::Retrofit),
            other => Err(Error::Config(format!("unknown block kind `{other}`"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Step size `h` of the two-term recurrences.
    pub step_size: f64,
    pub block_kind: BlockKind,
    /// Per-layer `a_ℓ` for `midpoint_a` and `retrofit`; empty otherwise.
    pub a_schedule: Vec<f64>,
    /// Fixed-point iterations used by `retrofit` to estimate the previous state.
    pub fixed_point_iters: usize,
    pub ln_eps: f64,
    pub dtype: DType,
}

impl ModelConfig {
    /// A small configuration with GPT-2-style defaults for everything but the sizes.
    pub fn new(
        block_kind: BlockKind,
        vocab_size: usize,
        context_length: usize,
        width: usize,
        heads: usize,
        layers: usize,
    ) -> Self {
        ModelConfig {
            vocab_size,
            context_length,
            width,
            heads,
            layers,
            step_size: 1.0,
            block_kind,
            a_schedule: Vec::new(),
            fixed_point_iters: 1,
            ln_eps: crate::numerics::DEFAULT_LN_EPS,
            dtype: DType::F32,
        }
        .with_default_schedule(0)
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn with_step_size(mut self, h: f64) -> Self {
        self.step_size = h;
        self
    }

    /// Fills in the frozen `a` schedule when the kind needs one.
    pub fn with_default_schedule(mut self, seed: u64) -> Self {
        self.a_schedule = match self.block_kind {
            BlockKind::MidpointA => default_a_schedule(self.layers, seed),
            BlockKind::Retrofit => retrofit_a_schedule(self.layers, seed),
            _ => Vec::new(),
        };
        self
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn hidden_width(&self) -> usize {
        4 * self.width
    }

    /// Coefficient `a_ℓ` used at layer `layer`.
    pub fn a_at(&self, layer: usize) -> f64 {
        match self.block_kind {
            BlockKind::MidpointA => self.a_schedule[layer],
            BlockKind::Retrofit if layer == 0 => 1.0,
            BlockKind::Retrofit => self.a_schedule[layer],
            _ => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 || self.context_length == 0 || self.width == 0 {
            return fail("vocab_size, context_length and width must be positive".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return fail(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if self.layers == 0 {
            return fail("layers must be positive".into());
        }
        if self.block_kind.is_reversible() && self.block_kind != BlockKind::Hamiltonian && self.layers < 2 {
            return fail("two-term recurrences need at least 2 layers".into());
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return fail(format!("step_size must be positive, got {}", self.step_size));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return fail("ln_eps must be positive".into());
        }
        match self.block_kind {
            BlockKind::MidpointA | BlockKind::Retrofit => {
                if self.a_schedule.len() != self.layers {
                    return fail(format!(
                        "a_schedule has {} entries for {} layers",
                        self.a_schedule.len(),
                        self.layers
                    ));
                }
                if let Some(i) = self.a_schedule.iter().position(|a| *a == 0.0 || !a.is_finite()) {
                    return fail(format!("a_schedule[{i}] must be finite and non-zero"));
                }
            }
            _ => {}
        }
        if self.block_kind == BlockKind::Retrofit && self.fixed_point_iters == 0 {
            return fail("fixed_point_iters must be at least 1".into());
        }
        Ok(())
    }
}

/// Per-layer coefficients drawn once from the ±1-centred mixture and then frozen.
pub fn default_a_schedule(layers: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed ^ 0xa5ce_d01e);
    (0..layers).map(|_| sample_a_coefficient(&mut rng)).collect()
}

/// Like [`default_a_schedule`] but with the first entry pinned to 1: the first
/// retrofitted layer has no predecessor and reproduces the residual step exactly.
pub fn retrofit_a_schedule(layers: usize, seed: u64) -> Vec<f64> {
    let mut s = default_a_schedule(layers, seed);
    if let Some(first) = s.first_mut() {
        *first = 1.0;
    }
    s
}
