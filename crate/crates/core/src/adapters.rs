//! Per-domain prompt prefixes and bottleneck visual adapters.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::checkpoint;
use crate::domain::DomainId;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamSet, Parameter, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub prefix_len: usize,
    pub bottleneck: usize,
    /// 1-based vision block indices.
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub use_bias: bool,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            prefix_len: 10,
            bottleneck: 16,
            layers: vec![4, 8],
            activation: Activation::Gelu,
            use_bias: true,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if let Some(&l) = self
            .layers
            .iter()
            .find(|&&l| l == 0 || l > backbone.vision_layers)
        {
            return Err(Error::Config(format!(
                "injection layer {l} outside 1..={}",
                backbone.vision_layers
            )));
        }
        let mut sorted = self.layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.layers.len() {
            return Err(Error::Config(format!("duplicate injection layers in {:?}", self.layers)));
        }
        if self.bottleneck == 0 && !self.layers.is_empty() {
            return Err(Error::Config("bottleneck width must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable prefix `P ∈ R^{l×d_q}`.
#[derive(Clone, Debug)]
pub struct PromptAdapter {
    pub domain: DomainId,
    pub prefix: Parameter,
}

impl PromptAdapter {
    pub fn len(&self) -> usize {
        self.prefix.tensor.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.prefix.tensor.shape()[1]
    }

    /// The prefix as a graph node, or `None` when `l = 0`.
    pub fn prefix_var(&self, g: &mut Graph) -> Option<Var> {
        if self.is_empty() {
            None
        } else {
            Some(g.param(&self.prefix))
        }
    }
}

/// `[P; E]`; with no prefix the embeddings pass through unchanged.
pub fn prompt_forward(g: &mut Graph, prefix: Option<Var>, embeddings: Var) -> Result<Var> {
    match prefix {
        None => Ok(embeddings),
        Some(p) => g.concat_rows(&[p, embeddings]),
    }
}

#[derive(Clone, Debug)]
pub struct VisualLayer {
    pub layer: usize,
    pub w1: Parameter,
    pub b1: Option<Parameter>,
    pub w2: Parameter,
    pub b2: Option<Parameter>,
}

/// Bottleneck residual MLPs, one per injection layer.
#[derive(Clone, Debug)]
pub struct VisualAdapter {
    pub domain: DomainId,
    pub activation: Activation,
    layers: Vec<usize>,
    blocks: Vec<VisualLayer>,
}

impl VisualAdapter {
    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn blocks(&self) -> &[VisualLayer] {
        &self.blocks
    }

    /// `Δh = W₂·σ(W₁·h + b₁) + b₂`; the caller adds it to `h`.
    pub fn forward(&self, g: &mut Graph, layer: usize, h: Var) -> Result<Var> {
        let block = self
            .blocks
            .iter()
            .find(|b| b.layer == layer)
            .ok_or_else(|| Error::Contract(format!("visual adapter has no layer {layer}")))?;
        let w1 = g.param(&block.w1);
        let mut a = g.matmul_t(h, w1)?;
        if let Some(b1) = &block.b1 {
            let b1 = g.param(b1);
            a = g.add_bias(a, b1)?;
        }
        a = match self.activation {
            Activation::Gelu => g.gelu(a),
            Activation::Relu => g.relu(a),
        };
        let w2 = g.param(&block.w2);
        let mut out = g.matmul_t(a, w2)?;
        if let Some(b2) = &block.b2 {
            let b2 = g.param(b2);
            out = g.add_bias(out, b2)?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct AdapterPair {
    pub domain: DomainId,
    pub config: AdapterConfig,
    pub prompt: PromptAdapter,
    pub visual: VisualAdapter,
}

impl AdapterPair {
    /// Same pair with an empty prefix.
    pub fn without_prompt(&self) -> AdapterPair {
        let mut out = self.clone();
        let width = self.prompt.width();
        out.prompt.prefix = Parameter::new(self.prompt.prefix.name(), Tensor::zeros(vec![0, width]), false);
        out.config.prefix_len = 0;
        out
    }

    /// Same pair with no visual hooks.
    pub fn without_visual(&self) -> AdapterPair {
        let mut out = self.clone();
        out.visual.blocks.clear();
        out.visual.layers.clear();
        out.config.layers.clear();
        out
    }
}

impl ParamSet for AdapterPair {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.prompt.prefix];
        for b in &self.visual.blocks {
            out.push(&b.w1);
            out.extend(b.b1.as_ref());
            out.push(&b.w2);
            out.extend(b.b2.as_ref());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.prompt.prefix];
        for b in &mut self.visual.blocks {
            out.push(&mut b.w1);
            out.extend(b.b1.as_mut());
            out.push(&mut b.w2);
            out.extend(b.b2.as_mut());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdapterMeta {
    domain: DomainId,
    config: AdapterConfig,
    d_q: usize,
    d_v: usize,
}

/// Fresh pair: `P, W₁ ~ N(0, std²)`, `W₂ = 0`, zero biases, so the visual
/// part starts as an exact no-op.
pub fn init_adapter_pair(
    domain: DomainId,
    config: &AdapterConfig,
    backbone: &BackboneConfig,
) -> Result<AdapterPair> {
    config.validate(backbone)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ ((domain.index as u64) << 48));
    let (d_q, d_v, d_a) = (backbone.d_q, backbone.d_v, config.bottleneck);
    let base = format!("adapter.{}", domain.name);
    let prefix = Parameter::new(
        format!("{base}.prompt.prefix"),
        Tensor::randn(vec![config.prefix_len, d_q], config.init_std, &mut rng),
        true,
    );
    let blocks = config
        .layers
        .iter()
        .map(|&l| {
            let name = |s: &str| format!("{base}.visual.{l}.{s}");
            VisualLayer {
                layer: l,
                w1: Parameter::new(name("w1"), Tensor::randn(vec![d_a, d_v], config.init_std, &mut rng), true),
                b1: config.use_bias.then(|| Parameter::new(name("b1"), Tensor::zeros(vec![d_a]), true)),
                w2: Parameter::new(name("w2"), Tensor::zeros(vec![d_v, d_a]), true),
                b2: config.use_bias.then(|| Parameter::new(name("b2"), Tensor::zeros(vec![d_v]), true)),
            }
        })
        .collect();
    Ok(AdapterPair {
        domain: domain.clone(),
        config: config.clone(),
        prompt: PromptAdapter {
            domain: domain.clone(),
            prefix,
        },
        visual: VisualAdapter {
            domain: domain.clone(),
            activation: config.activation,
            layers: config.layers.clone(),
            blocks,
        },
    })
}

pub fn save_adapter(pair: &AdapterPair, path: &Path) -> Result<()> {
    let meta = AdapterMeta {
        domain: pair.domain.clone(),
        config: pair.config.clone(),
        d_q: pair.prompt.width(),
        d_v: pair.visual.blocks.first().map_or(0, |b| b.w1.tensor.shape()[1]),
    };
    checkpoint::save(path, "adapter", serde_json::to_value(meta)?, pair)
}

/// Loads and validates against `backbone` before touching any weight.
pub fn load_adapter(path: &Path, backbone: &BackboneConfig) -> Result<AdapterPair> {
    let ck = checkpoint::load(path, "adapter")?;
    let meta: AdapterMeta = ck.meta()?;
    if meta.d_q != backbone.d_q || (!meta.config.layers.is_empty() && meta.d_v != backbone.d_v) {
        return Err(Error::Config(format!(
            "adapter was built for d_q={}, d_v={}; backbone has d_q={}, d_v={}",
            meta.d_q, meta.d_v, backbone.d_q, backbone.d_v
        )));
    }
    let mut pair = init_adapter_pair(meta.domain, &meta.config, backbone)?;
    ck.apply_to(&mut pair)?;
    Ok(pair)
}
