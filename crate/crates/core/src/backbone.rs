//! Miniature vision-language QA model: patch encoder, projector and a
//! prefix-visible causal decoder.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::hooks::{HookSite, Injection};
use crate::synthdata::Image;
use crate::tensor::{AttentionMask, Graph, ParamSet, Parameter, ParameterStore, Tensor, Var};
use crate::vocab::{self, TokenSequence};

const INIT_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_v: usize,
    pub vision_layers: usize,
    pub d_q: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_answer_len: usize,
    /// Rows in the text position table; bounds question plus answer length.
    pub max_text_len: usize,
    pub mlp_ratio: usize,
    pub layer_norm_eps: f64,
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            d_v: 64,
            vision_layers: 12,
            d_q: 64,
            decoder_layers: 4,
            heads: 4,
            vocab_size: vocab::VOCAB_SIZE,
            max_answer_len: 8,
            max_text_len: 32,
            mlp_ratio: 2,
            layer_norm_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.d_v % self.heads != 0 || self.d_q % self.heads != 0 {
            return bad(format!("d_v {} and d_q {} must be divisible by heads {}", self.d_v, self.d_q, self.heads));
        }
        if self.vocab_size <= vocab::END {
            return bad("vocab_size must include the end token".into());
        }
        if self.vision_layers == 0 || self.decoder_layers == 0 || self.mlp_ratio == 0 {
            return bad("layer counts and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn site_name(layer: usize) -> String {
        format!("vision.block.{layer}")
    }
}

/// Output of a greedy decode; `step_logits[i]` scored answer token `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub answer: TokenSequence,
    pub step_logits: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParameterStore,
}

impl ParamSet for Backbone {
    fn params(&self) -> Vec<&Parameter> {
        self.params.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.params.params_mut()
    }
}

fn block_params(
    store: &mut ParameterStore,
    prefix: &str,
    d: usize,
    ratio: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut add = |name: &str, t: Tensor| store.insert(format!("{prefix}.{name}"), t, true);
    add("ln1.gain", Tensor::ones(vec![d]))?;
    add("ln1.bias", Tensor::zeros(vec![d]))?;
    add("attn.qkv.weight", Tensor::randn(vec![3 * d, d], INIT_STD, rng))?;
    add("attn.qkv.bias", Tensor::zeros(vec![3 * d]))?;
    add("attn.out.weight", Tensor::randn(vec![d, d], INIT_STD, rng))?;
    add("attn.out.bias", Tensor::zeros(vec![d]))?;
    add("ln2.gain", Tensor::ones(vec![d]))?;
    add("ln2.bias", Tensor::zeros(vec![d]))?;
    add("mlp.fc1.weight", Tensor::randn(vec![ratio * d, d], INIT_STD, rng))?;
    add("mlp.fc1.bias", Tensor::zeros(vec![ratio * d]))?;
    add("mlp.fc2.weight", Tensor::randn(vec![d, ratio * d], INIT_STD, rng))?;
    add("mlp.fc2.bias", Tensor::zeros(vec![d]))
}

impl Backbone {
    /// Seeded random initialisation; every parameter starts trainable.
    pub fn init(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut s = ParameterStore::new();
        let c = &config;
        let p2 = c.patch_size * c.patch_size;
        s.insert("vision.patch_embed.weight", Tensor::randn(vec![c.d_v, p2], INIT_STD, &mut rng), true)?;
        s.insert("vision.pos_embed", Tensor::randn(vec![c.num_patches(), c.d_v], INIT_STD, &mut rng), true)?;
        for l in 1..=c.vision_layers {
            block_params(&mut s, &format!("vision.block.{l}"), c.d_v, c.mlp_ratio, &mut rng)?;
        }
        s.insert("vision.ln_final.gain", Tensor::ones(vec![c.d_v]), true)?;
        s.insert("vision.ln_final.bias", Tensor::zeros(vec![c.d_v]), true)?;
        s.insert("projector.weight", Tensor::randn(vec![c.d_q, c.d_v], INIT_STD, &mut rng), true)?;
        s.insert("projector.bias", Tensor::zeros(vec![c.d_q]), true)?;
        s.insert("text.token_embed", Tensor::randn(vec![c.vocab_size, c.d_q], INIT_STD, &mut rng), true)?;
        s.insert("text.pos_embed", Tensor::randn(vec![c.max_text_len, c.d_q], INIT_STD, &mut rng), true)?;
        for l in 1..=c.decoder_layers {
            block_params(&mut s, &format!("decoder.block.{l}"), c.d_q, c.mlp_ratio, &mut rng)?;
        }
        s.insert("decoder.ln_final.gain", Tensor::ones(vec![c.d_q]), true)?;
        s.insert("decoder.ln_final.bias", Tensor::zeros(vec![c.d_q]), true)?;
        s.insert("lm_head.weight", Tensor::randn(vec![c.vocab_size, c.d_q], INIT_STD, &mut rng), true)?;
        s.insert("lm_head.bias", Tensor::zeros(vec![c.vocab_size]), true)?;
        Ok(Self { config, params: s })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore {
        &self.params
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn freeze(&mut self) {
        self.set_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.all_frozen()
    }

    /// Injection points, one after every vision block.
    pub fn sites(&self) -> Vec<HookSite> {
        (1..=self.config.vision_layers)
            .map(|l| HookSite {
                name: BackboneConfig::site_name(l),
                expected_shape: vec![self.config.num_patches(), self.config.d_v],
            })
            .collect()
    }

    fn var(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(self.params.get(name)?))
    }

    fn linear(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w = self.var(g, &format!("{prefix}.weight"))?;
        let b = self.var(g, &format!("{prefix}.bias"))?;
        let y = g.matmul_t(x, w)?;
        g.add_bias(y, b)
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.var(g, &format!("{prefix}.gain"))?;
        let bias = self.var(g, &format!("{prefix}.bias"))?;
        g.layer_norm(x, gain, bias, self.config.layer_norm_eps)
    }

    /// Pre-norm transformer block.
    fn block(&self, g: &mut Graph, prefix: &str, x: Var, mask: AttentionMask) -> Result<Var> {
        let h = self.layer_norm(g, x, &format!("{prefix}.ln1"))?;
        let qkv = self.linear(g, h, &format!("{prefix}.attn.qkv"))?;
        let a = g.attention(qkv, self.config.heads, mask)?;
        let o = self.linear(g, a, &format!("{prefix}.attn.out"))?;
        let x = g.add(x, o)?;
        let h = self.layer_norm(g, x, &format!("{prefix}.ln2"))?;
        let f = self.linear(g, h, &format!("{prefix}.mlp.fc1"))?;
        let f = g.gelu(f);
        let f = self.linear(g, f, &format!("{prefix}.mlp.fc2"))?;
        g.add(x, f)
    }

    /// Linear patch projection (no bias) plus position embeddings.
    pub fn embed_patches(&self, g: &mut Graph, image: &Image) -> Result<Var> {
        if image.size() != self.config.image_size {
            return Err(Error::Config(format!(
                "image is {0}x{0}, backbone expects {1}x{1}",
                image.size(),
                self.config.image_size
            )));
        }
        let mut patches = image.patches(self.config.patch_size)?;
        let bg = image.median();
        patches.data_mut().iter_mut().for_each(|v| *v -= bg);
        let patches = g.leaf(patches);
        let w = self.var(g, "vision.patch_embed.weight")?;
        let x = g.matmul_t(patches, w)?;
        let pos = self.var(g, "vision.pos_embed")?;
        g.add(x, pos)
    }

    /// Runs vision blocks `first..=last`, applying injections after each one.
    pub fn vision_blocks(
        &self,
        g: &mut Graph,
        mut x: Var,
        first: usize,
        last: usize,
        inj: &Injection<'_>,
    ) -> Result<Var> {
        for l in first..=last {
            x = self.block(g, &format!("vision.block.{l}"), x, AttentionMask::Full)?;
            x = inj.after_block(g, l, x)?;
        }
        Ok(x)
    }

    /// All vision blocks followed by the final layer norm.
    pub fn encode_vision(&self, g: &mut Graph, patches: Var, inj: &Injection<'_>) -> Result<Var> {
        let x = self.vision_blocks(g, patches, 1, self.config.vision_layers, inj)?;
        self.layer_norm(g, x, "vision.ln_final")
    }

    /// Hidden state after block `upto` (0 = patch embeddings) with no
    /// injection; used to cache the frozen part of the encoder.
    pub fn vision_prefix(&self, image: &Image, upto: usize) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = self.embed_patches(&mut g, image)?;
        let x = self.vision_blocks(&mut g, x, 1, upto, &Injection::None)?;
        Ok(g.value(x).clone())
    }

    /// Visual tokens resumed from a cached [`Backbone::vision_prefix`].
    pub fn visual_tokens_from(
        &self,
        g: &mut Graph,
        cached: Tensor,
        upto: usize,
        inj: &Injection<'_>,
    ) -> Result<Var> {
        let x = g.leaf(cached);
        let x = self.vision_blocks(g, x, upto + 1, self.config.vision_layers, inj)?;
        let z = self.layer_norm(g, x, "vision.ln_final")?;
        self.project_visual(g, z)
    }

    pub fn project_visual(&self, g: &mut Graph, z_v: Var) -> Result<Var> {
        self.linear(g, z_v, "projector")
    }

    /// Visual tokens in decoder width for one image.
    pub fn visual_tokens(&self, g: &mut Graph, image: &Image, inj: &Injection<'_>) -> Result<Var> {
        let p = self.embed_patches(g, image)?;
        let z = self.encode_vision(g, p, inj)?;
        self.project_visual(g, z)
    }

    /// Token plus position embeddings; positions count from 0.
    pub fn embed_text(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.config.max_text_len {
            return Err(Error::Index {
                what: "text length",
                index: ids.len(),
                bound: self.config.max_text_len + 1,
            });
        }
        let table = self.var(g, "text.token_embed")?;
        let tok = g.embedding(table, ids)?;
        let pos_table = self.var(g, "text.pos_embed")?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.embedding(pos_table, &positions)?;
        g.add(tok, pos)
    }

    /// Next-token logits for `rows` text positions starting at `first_row`.
    ///
    /// The decoder input is `[visual; context]`, where `context` is the text
    /// embedding sequence, optionally already carrying a prompt prefix of
    /// `prefix_len` rows. Visual and prefix rows are visible to every
    /// position; text rows are causal among themselves.
    pub fn decoder_logits(
        &self,
        g: &mut Graph,
        visual: Var,
        context: Var,
        prefix_len: usize,
        first_row: usize,
        rows: usize,
    ) -> Result<Var> {
        let t = g.shape(visual)[0];
        let mut x = g.concat_rows(&[visual, context])?;
        let mask = AttentionMask::PrefixCausal {
            visible_prefix: t + prefix_len,
        };
        for l in 1..=self.config.decoder_layers {
            x = self.block(g, &format!("decoder.block.{l}"), x, mask)?;
        }
        let h = g.slice_rows(x, t + prefix_len + first_row, rows)?;
        let h = self.layer_norm(g, h, "decoder.ln_final")?;
        self.linear(g, h, "lm_head")
    }

    /// Logits for every text row, no prefix.
    pub fn forward_logits(&self, g: &mut Graph, visual: Var, text: Var) -> Result<Var> {
        let m = g.shape(text)[0];
        self.decoder_logits(g, visual, text, 0, 0, m)
    }

    /// Teacher-forced mean cross-entropy over `answer ++ [END]`.
    pub fn answer_loss(
        &self,
        g: &mut Graph,
        visual: Var,
        question: &TokenSequence,
        answer: &TokenSequence,
        inj: &Injection<'_>,
    ) -> Result<Var> {
        if question.is_empty() {
            return Err(Error::Contract("question must be nonempty".into()));
        }
        let mut ids = question.ids.clone();
        ids.extend_from_slice(&answer.ids);
        let text = self.embed_text(g, &ids)?;
        let (context, l) = inj.prepend_prefix(g, text)?;
        let mut targets = answer.ids.clone();
        targets.push(vocab::END);
        let logits = self.decoder_logits(g, visual, context, l, question.len() - 1, targets.len())?;
        g.cross_entropy(logits, &targets)
    }

    /// Greedy decoding; ties go to the lowest token id.
    pub fn generate_greedy(
        &self,
        image: &Image,
        question: &TokenSequence,
        inj: &Injection<'_>,
    ) -> Result<Generation> {
        let mut g = Graph::inference();
        let visual = self.visual_tokens(&mut g, image, inj)?;
        self.generate_from_visual(g.value(visual).clone(), question, inj)
    }

    /// Greedy decoding from precomputed visual tokens `[T×d_q]`.
    pub fn generate_from_visual(
        &self,
        visual: Tensor,
        question: &TokenSequence,
        inj: &Injection<'_>,
    ) -> Result<Generation> {
        if question.is_empty() {
            return Err(Error::Contract("question must be nonempty".into()));
        }
        question.validate(self.config.vocab_size)?;
        let epoch = inj.epoch();
        let mut ids = question.ids.clone();
        let mut answer = Vec::new();
        let mut step_logits = Vec::new();
        for _ in 0..self.config.max_answer_len {
            let mut g = Graph::inference();
            let v = g.leaf(visual.clone());
            let text = self.embed_text(&mut g, &ids)?;
            let (context, l) = inj.prepend_prefix(&mut g, text)?;
            let logits = self.decoder_logits(&mut g, v, context, l, ids.len() - 1, 1)?;
            let row = g.value(logits).data().to_vec();
            let next = argmax(&row);
            step_logits.push(row);
            if next == vocab::END {
                break;
            }
            answer.push(next);
            ids.push(next);
        }
        if inj.epoch() != epoch {
            return Err(Error::State("hook set changed during generation".into()));
        }
        Ok(Generation {
            answer: TokenSequence::new(answer),
            step_logits,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, "backbone", serde_json::to_value(&self.config)?, self)
    }

    /// Loads weights into a fresh model; the result is frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path, "backbone")?;
        let config: BackboneConfig = ck.meta()?;
        let mut model = Self::init(config)?;
        ck.apply_to(&mut model)?;
        model.freeze();
        Ok(model)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            vision_layers: 2,
            decoder_layers: 1,
            d_v: 16,
            d_q: 16,
            heads: 2,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn zero_image_gives_position_embeddings() {
        let m = Backbone::init(small()).unwrap();
        let mut g = Graph::inference();
        let x = m.embed_patches(&mut g, &Image::filled(32, 0.0)).unwrap();
        assert_eq!(g.shape(x), &[16, 16]);
        assert!(g.value(x).bit_eq(&m.store().get("vision.pos_embed").unwrap().tensor));
    }

    #[test]
    fn one_patch_change_touches_one_token() {
        let m = Backbone::init(small()).unwrap();
        let a = Image::filled(32, 0.3);
        let mut b = a.clone();
        b.set(9, 17, 0.9);
        let mut g = Graph::inference();
        let xa = m.embed_patches(&mut g, &a).unwrap();
        let xb = m.embed_patches(&mut g, &b).unwrap();
        let differing: Vec<usize> = (0..16)
            .filter(|&r| g.value(xa).row(r) != g.value(xb).row(r))
            .collect();
        assert_eq!(differing, vec![6]);
    }

    #[test]
    fn wrong_image_size_is_config_error() {
        let m = Backbone::init(small()).unwrap();
        let mut g = Graph::inference();
        assert!(matches!(m.embed_patches(&mut g, &Image::filled(16, 0.0)), Err(Error::Config(_))));
    }

    #[test]
    fn identity_projection_passes_features_through() {
        let mut m = Backbone::init(small()).unwrap();
        m.store_mut().get_mut("projector.weight").unwrap().tensor = Tensor::identity(16);
        let mut g = Graph::inference();
        let z = g.leaf(Tensor::randn(vec![16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let y = m.project_visual(&mut g, z).unwrap();
        assert!(g.value(y).bit_eq(g.value(z)));
    }

    #[test]
    fn visual_token_order_does_not_matter() {
        let m = Backbone::init(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vis = Tensor::randn(vec![16, 16], 1.0, &mut rng);
        let mut rows: Vec<Vec<f64>> = (0..16).map(|r| vis.row(r).to_vec()).collect();
        rows.reverse();
        let perm = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::inference();
        let text = m.embed_text(&mut g, &[12, 13, 14]).unwrap();
        let a = g.leaf(vis);
        let b = g.leaf(perm);
        let la = m.forward_logits(&mut g, a, text).unwrap();
        let lb = m.forward_logits(&mut g, b, text).unwrap();
        assert_eq!(g.shape(la), &[3, 64]);
        assert!(g.value(la).max_abs_diff(g.value(lb)) < 1e-12);
    }

    #[test]
    fn single_text_row_gives_one_logit_row() {
        let m = Backbone::init(small()).unwrap();
        let mut g = Graph::inference();
        let v = g.leaf(Tensor::zeros(vec![16, 16]));
        let text = m.embed_text(&mut g, &[12]).unwrap();
        let l = m.forward_logits(&mut g, v, text).unwrap();
        assert_eq!(g.shape(l), &[1, 64]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn checkpoint_round_trip_freezes() {
        let m = Backbone::init(small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.ckpt");
        m.save(&path).unwrap();
        let back = Backbone::load(&path).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert!(back.is_frozen());
    }
}
