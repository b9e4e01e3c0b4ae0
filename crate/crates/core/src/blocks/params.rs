use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Rng, Scalar, Tensor};

const INIT_STD: f64 = 0.02;
/// Unit-variance tables keep the residual stream large next to each layer's update.
const EMBED_INIT_STD: f64 = 1.0;

/// Token table, positional table and output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams<T: Scalar> {
    /// `V × d`
    pub token: Tensor<T>,
    /// `T × d`, learned absolute positions.
    pub position: Tensor<T>,
    /// `d × V`
    pub head: Tensor<T>,
}

/// Weights of one transformer layer. Matrices act on row vectors (`x·W`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
}

const BLOCK_FIELDS: [&str; 12] = [
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "mlp.w1",
    "mlp.b1",
    "mlp.w2",
    "mlp.b2",
    "ln1.gain",
    "ln1.bias",
    "ln2.gain",
    "ln2.bias",
];

impl<T: Scalar> BlockParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, h) = (cfg.width, cfg.hidden_width());
        BlockParams {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            w1: Tensor::zeros(&[d, h]),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[h, d]),
            b2: Tensor::zeros(&[d]),
            ln1_gain: Tensor::zeros(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::zeros(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
        }
    }

    /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (d, h) = (cfg.width, cfg.hidden_width());
        BlockParams {
            wq: Tensor::randn(&[d, d], INIT_STD, rng),
            wk: Tensor::randn(&[d, d], INIT_STD, rng),
            wv: Tensor::randn(&[d, d], INIT_STD, rng),
            wo: Tensor::randn(&[d, d], INIT_STD, rng),
            w1: Tensor::randn(&[d, h], INIT_STD, rng),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::randn(&[h, d], INIT_STD, rng),
            b2: Tensor::zeros(&[d]),
            ln1_gain: Tensor::full(&[d], T::one()),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], T::one()),
            ln2_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 12] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

impl<T: Scalar> EmbeddingParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        EmbeddingParams {
            token: Tensor::zeros(&[cfg.vocab_size, cfg.width]),
            position: Tensor::zeros(&[cfg.context_length, cfg.width]),
            head: Tensor::zeros(&[cfg.width, cfg.vocab_size]),
        }
    }

    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        EmbeddingParams {
            token: Tensor::randn(&[cfg.vocab_size, cfg.width], EMBED_INIT_STD, rng),
            position: Tensor::randn(&[cfg.context_length, cfg.width], EMBED_INIT_STD, rng),
            head: Tensor::randn(&[cfg.width, cfg.vocab_size], INIT_STD, rng),
        }
    }
}

/// Every learnable tensor of a model. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T: Scalar> {
    pub embedding: EmbeddingParams<T>,
    pub blocks: Vec<BlockParams<T>>,
}

/// One gradient tensor per parameter tensor, shape-congruent with [`Params`].
pub type GradientBundle<T> = Params<T>;

impl<T: Scalar> Params<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Params {
            embedding: EmbeddingParams::zeros(cfg),
            blocks: (0..cfg.layers).map(|_| BlockParams::zeros(cfg)).collect(),
        }
    }

    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let embedding = EmbeddingParams::init(cfg, rng);
        let blocks = (0..cfg.layers).map(|_| BlockParams::init(cfg, rng)).collect();
        Params { embedding, blocks }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(T::zero()));
        z
    }

    /// Parameters in a fixed order: embeddings first, then each block.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let e = &self.embedding;
        let mut out = vec![&e.token, &e.position, &e.head];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let e = &mut self.embedding;
        let mut out = vec![&mut e.token, &mut e.position, &mut e.head];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    /// Stable names matching [`Params::tensors`] order.
    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["embed.token", "embed.position", "embed.head"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for i in 0..self.blocks.len() {
            out.extend(BLOCK_FIELDS.iter().map(|f| format!("blocks.{i}.{f}")));
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.names().into_iter().zip(self.tensors()).collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    /// Global L2 norm over all tensors.
    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| {
                let n = t.norm();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = Params::<T>::zeros(cfg);
        if self.blocks.len() != reference.blocks.len() {
            return Err(Error::Config(format!(
                "expected {} blocks, found {}",
                reference.blocks.len(),
                self.blocks.len()
            )));
        }
        for ((name, t), r) in self.named_tensors().into_iter().zip(reference.tensors()) {
            if t.shape() != r.shape() {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    r.shape()
                )));
            }
        }
        Ok(())
    }
}

/// A configuration together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model; identical seeds give identical weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::check_config(&config)?;
        let mut rng = seeded_rng(seed);
        let params = Params::init(&config, &mut rng);
        Ok(Model { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::check_config(&config)?;
        let params = Params::zeros(&config);
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        Self::check_config(&config)?;
        params.check_layout(&config)?;
        Ok(Model { config, params })
    }

    fn check_config(config: &ModelConfig) -> Result<()> {
        config.validate()?;
        if config.dtype != T::DTYPE {
            return Err(Error::DtypeMismatch {
                op: "model",
                lhs: config.dtype.name(),
                rhs: T::DTYPE.name(),
            });
        }
        Ok(())
    }

    /// The same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let config = self.config.clone().with_dtype(U::DTYPE);
        let mut params = Params::<U>::zeros(&config);
        for (dst, src) in params.tensors_mut().into_iter().zip(self.params.tensors()) {
            *dst = src.cast();
        }
        Model { config, params }
    }

    pub fn block(&self, layer: usize) -> &BlockParams<T> {
        &self.params.blocks[layer]
    }
}
