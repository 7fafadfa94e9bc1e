use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};

pub const EMBED_STD: f64 = 0.1;

/// Name, shape and offset of one tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LayerOffsets {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub mlp_norm: usize,
    pub w_in: usize,
    pub w_out: usize,
}

/// Where every tensor lives in the flat vector. Order: `embed`, then per
/// layer `attn_norm, wq, wk, wv, wo, mlp_norm, w_in, w_out`, then
/// `final_norm`, then `head` when untied.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub(crate) embed: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) final_norm: usize,
    pub(crate) head: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, c, f) = (cfg.vocab_size, cfg.model_dim, cfg.mlp_dim());
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec { name, shape, offset };
            offset += spec.len();
            let at = spec.offset;
            tensors.push(spec);
            at
        };
        let embed = push("embed".into(), vec![v, c]);
        let layers = (0..cfg.num_layers)
            .map(|l| LayerOffsets {
                attn_norm: push(format!("layers.{l}.attn_norm"), vec![c]),
                wq: push(format!("layers.{l}.wq"), vec![c, c]),
                wk: push(format!("layers.{l}.wk"), vec![c, c]),
                wv: push(format!("layers.{l}.wv"), vec![c, c]),
                wo: push(format!("layers.{l}.wo"), vec![c, c]),
                mlp_norm: push(format!("layers.{l}.mlp_norm"), vec![c]),
                w_in: push(format!("layers.{l}.w_in"), vec![c, f]),
                w_out: push(format!("layers.{l}.w_out"), vec![f, c]),
            })
            .collect();
        let final_norm = push("final_norm".into(), vec![c]);
        let head = if cfg.tie_head { embed } else { push("head".into(), vec![v, c]) };
        Layout { tensors, embed, layers, final_norm, head, total: offset }
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Name of the tensor that owns flat index `idx`.
    pub fn owner(&self, idx: usize) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.range().contains(&idx))
    }
}

/// All learnable weights, stored as one flat vector of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyModelParams {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl TinyModelParams {
    /// Gaussian initialization: embeddings with std `EMBED_STD`, projections
    /// with std `1/sqrt(fan_in)`, residual output projections additionally
    /// scaled by `1/sqrt(2 * layers)`, normalization gains at 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid = 1.0 / ((2 * config.num_layers) as f64).sqrt();
        for t in &layout.tensors {
            let base = t.name.rsplit('.').next().unwrap_or(&t.name);
            let std = match base {
                "attn_norm" | "mlp_norm" | "final_norm" => {
                    data[t.range()].fill(1.0);
                    continue;
                }
                "embed" | "head" => EMBED_STD,
                "wo" | "w_out" => resid / (t.shape[0] as f64).sqrt(),
                _ => 1.0 / (t.shape[0] as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for x in &mut data[t.range()] {
                *x = normal.sample(&mut rng);
            }
        }
        Ok(Self { config: config.clone(), layout, data })
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|t| &self.data[t.range()])
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
