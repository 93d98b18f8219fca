//! Image-only domain classifier, routing policies and the adapter registry.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterPair};
use crate::backbone::{argmax, BackboneConfig};
use crate::checkpoint;
use crate::domain::DomainId;
use crate::error::{Error, Result};
use crate::synthdata::{Dataset, Image};
use crate::tensor::kernels::softmax_in_place;
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamSet, Parameter, ParameterStore, Tensor, Var};

/// Patch-mean pooling, then a two-layer MLP with a GELU hidden layer.
#[derive(Clone, Debug)]
pub struct DomainClassifier {
    pub domains: Vec<DomainId>,
    patch_size: usize,
    hidden: usize,
    params: ParameterStore,
}

impl ParamSet for DomainClassifier {
    fn params(&self) -> Vec<&Parameter> {
        self.params.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.params.params_mut()
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    domains: Vec<DomainId>,
    patch_size: usize,
    hidden: usize,
}

impl DomainClassifier {
    /// Seeded init with `N(0, 1/fan_in)` weights and zero biases.
    pub fn init(domains: Vec<DomainId>, patch_size: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut c = Self::zeros(domains, patch_size, hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = patch_size * patch_size;
        let k = c.domains.len();
        c.params.get_mut("classifier.fc1.weight")?.tensor =
            Tensor::randn(vec![hidden, input], 1.0 / (input as f64).sqrt(), &mut rng);
        c.params.get_mut("classifier.fc2.weight")?.tensor =
            Tensor::randn(vec![k, hidden], 1.0 / (hidden as f64).sqrt(), &mut rng);
        Ok(c)
    }

    pub fn zeros(domains: Vec<DomainId>, patch_size: usize, hidden: usize) -> Result<Self> {
        if domains.is_empty() || patch_size == 0 || hidden == 0 {
            return Err(Error::Config("classifier needs domains, a patch size and a hidden width".into()));
        }
        let input = patch_size * patch_size;
        let k = domains.len();
        let mut params = ParameterStore::new();
        params.insert("classifier.fc1.weight", Tensor::zeros(vec![hidden, input]), true)?;
        params.insert("classifier.fc1.bias", Tensor::zeros(vec![hidden]), true)?;
        params.insert("classifier.fc2.weight", Tensor::zeros(vec![k, hidden]), true)?;
        params.insert("classifier.fc2.bias", Tensor::zeros(vec![k]), true)?;
        Ok(Self {
            domains,
            patch_size,
            hidden,
            params,
        })
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    /// Normalised patch-mean features `[1×p²]`.
    pub fn pooled(&self, image: &Image) -> Result<Tensor> {
        let patches = image.patches(self.patch_size)?;
        let (t, c) = (patches.rows(), patches.cols());
        let mut out = vec![0.0; c];
        for r in 0..t {
            out.iter_mut().zip(patches.row(r)).for_each(|(o, v)| *o += v);
        }
        // Centre and spread pixel means so a fresh MLP sees O(1) inputs.
        out.iter_mut().for_each(|o| *o = (*o / t as f64 - 0.5) * 4.0);
        Tensor::new(vec![1, c], out)
    }

    /// Hidden activations and logits for a batch of pooled rows.
    fn forward(&self, g: &mut Graph, pooled: Var) -> Result<(Var, Var)> {
        let p = |n: &str| self.params.get(n);
        let w1 = g.param(p("classifier.fc1.weight")?);
        let b1 = g.param(p("classifier.fc1.bias")?);
        let w2 = g.param(p("classifier.fc2.weight")?);
        let b2 = g.param(p("classifier.fc2.bias")?);
        let h = g.matmul_t(pooled, w1)?;
        let h = g.add_bias(h, b1)?;
        let e = g.gelu(h);
        let l = g.matmul_t(e, w2)?;
        Ok((e, g.add_bias(l, b2)?))
    }

    /// Penultimate embedding and logits.
    pub fn embed_and_logits(&self, image: &Image) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::inference();
        let x = g.leaf(self.pooled(image)?);
        let (e, l) = self.forward(&mut g, x)?;
        Ok((g.value(e).to_vec(), g.value(l).to_vec()))
    }

    /// Softmax over domain logits.
    pub fn classify(&self, image: &Image) -> Result<Vec<f64>> {
        let (_, mut logits) = self.embed_and_logits(image)?;
        softmax_in_place(&mut logits);
        Ok(logits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ClassifierMeta {
            domains: self.domains.clone(),
            patch_size: self.patch_size,
            hidden: self.hidden,
        };
        checkpoint::save(path, "classifier", serde_json::to_value(meta)?, self)
    }

    /// Loaded classifiers are frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path, "classifier")?;
        let meta: ClassifierMeta = ck.meta()?;
        let mut c = Self::zeros(meta.domains, meta.patch_size, meta.hidden)?;
        ck.apply_to(&mut c)?;
        c.set_trainable(false);
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 1e-3,
            batch_size: 16,
            hidden: 32,
            seed: 0,
        }
    }
}

/// Cross-entropy training on image-only input; frozen on return.
///
/// `domains` fixes the label space; samples whose domain is not listed are
/// an error. Returns the classifier and the mean loss of every epoch.
pub fn train_classifier(
    data: &Dataset,
    domains: &[DomainId],
    backbone: &BackboneConfig,
    cfg: &ClassifierTrainConfig,
) -> Result<(DomainClassifier, Vec<f64>)> {
    if domains.len() < 2 {
        return Err(Error::Config(format!(
            "classifier training needs at least 2 domains, got {}",
            domains.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut clf = DomainClassifier::init(domains.to_vec(), backbone.patch_size, cfg.hidden, cfg.seed)?;
    let label_of: BTreeMap<usize, usize> = domains.iter().enumerate().map(|(i, d)| (d.index, i)).collect();
    let mut rows = Vec::with_capacity(data.len());
    for s in data.iter() {
        let label = *label_of.get(&s.domain.index).ok_or_else(|| Error::Lookup {
            what: "domain label",
            name: s.domain.name.clone(),
            available: domains.iter().map(|d| d.name.clone()).collect::<Vec<_>>().join(", "),
        })?;
        rows.push((clf.pooled(&s.image)?, label));
    }
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC1A5_5000);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let width = rows.first().map_or(0, |(t, _)| t.cols());
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut flat = Vec::with_capacity(batch.len() * width);
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                flat.extend_from_slice(rows[i].0.data());
                targets.push(rows[i].1);
            }
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![batch.len(), width], flat)?);
            let (_, logits) = clf.forward(&mut g, x)?;
            let loss = g.cross_entropy(logits, &targets)?;
            g.backward(loss)?;
            total += g.value(loss).item() * batch.len() as f64;
            clf.accumulate_grads(&g.param_grads());
            opt.step(&mut clf)?;
        }
        losses.push(total / rows.len().max(1) as f64);
    }
    clf.set_trainable(false);
    Ok((clf, losses))
}

/// Mean penultimate embedding per classifier domain, in classifier order.
pub fn compute_prototypes(clf: &DomainClassifier, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let mut sums = vec![vec![0.0; clf.hidden]; clf.num_domains()];
    let mut counts = vec![0usize; clf.num_domains()];
    for s in data.iter() {
        let Some(k) = clf.domains.iter().position(|d| d.index == s.domain.index) else {
            continue;
        };
        let (e, _) = clf.embed_and_logits(&s.image)?;
        sums[k].iter_mut().zip(&e).for_each(|(a, b)| *a += b);
        counts[k] += 1;
    }
    for (k, (sum, n)) in sums.iter_mut().zip(&counts).enumerate() {
        if *n == 0 {
            return Err(Error::State(format!("no samples for domain {}", clf.domains[k])));
        }
        sum.iter_mut().for_each(|v| *v /= *n as f64);
    }
    Ok(sums)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Hard,
    Soft,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub policy: PolicyKind,
    pub probabilities: Vec<f64>,
    /// Position in the classifier's domain list (hard and random).
    pub selected: Option<usize>,
    /// Mixing weights (soft).
    pub weights: Option<Vec<f64>>,
}

pub fn route_hard(probs: &[f64]) -> RoutingDecision {
    RoutingDecision {
        policy: PolicyKind::Hard,
        probabilities: probs.to_vec(),
        selected: Some(argmax(probs)),
        weights: None,
    }
}

/// Similarity-weighted mixture: `softmax(−‖e − proto_k‖² / T)`.
pub fn route_soft(
    probs: &[f64],
    embedding: &[f64],
    prototypes: &[Vec<f64>],
    temperature: f64,
) -> Result<RoutingDecision> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if prototypes.is_empty() {
        return Err(Error::State("no domain prototypes available".into()));
    }
    let mut w: Vec<f64> = prototypes
        .iter()
        .map(|p| -p.iter().zip(embedding).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / temperature)
        .collect();
    softmax_in_place(&mut w);
    Ok(RoutingDecision {
        policy: PolicyKind::Soft,
        probabilities: probs.to_vec(),
        selected: None,
        weights: Some(w),
    })
}

pub fn route_random(k: usize, rng: &mut impl Rng) -> Result<RoutingDecision> {
    if k == 0 {
        return Err(Error::Config("random routing needs at least one domain".into()));
    }
    Ok(RoutingDecision {
        policy: PolicyKind::Random,
        probabilities: vec![1.0 / k as f64; k],
        selected: Some(rng.gen_range(0..k)),
        weights: None,
    })
}

/// Adapter pairs keyed by domain, plus soft-routing prototypes.
#[derive(Clone, Debug, Default)]
pub struct AdapterRegistry {
    pairs: BTreeMap<usize, AdapterPair>,
    pub default_domain: Option<DomainId>,
    /// Aligned with [`AdapterRegistry::domains`].
    pub prototypes: Option<Vec<Vec<f64>>>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, pair: AdapterPair) {
        self.pairs.insert(pair.domain.index, pair);
    }

    pub fn get(&self, d: &DomainId) -> Result<&AdapterPair> {
        self.pairs
            .get(&d.index)
            .filter(|p| p.domain.name == d.name)
            .ok_or_else(|| Error::Lookup {
                what: "adapter domain",
                name: d.name.clone(),
                available: self.pairs.values().map(|p| p.domain.name.clone()).collect::<Vec<_>>().join(", "),
            })
    }

    pub fn domains(&self) -> Vec<DomainId> {
        self.pairs.values().map(|p| p.domain.clone()).collect()
    }

    pub fn pairs(&self) -> impl Iterator<Item = &AdapterPair> {
        self.pairs.values()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Writes each pair to `dir/adapter_<name>.ckpt` and a JSON manifest.
    pub fn save(&self, dir: &Path, classifier: Option<&Path>) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for p in self.pairs.values() {
            let file = format!("adapter_{}.ckpt", p.domain.name);
            adapters::save_adapter(p, &dir.join(&file))?;
            entries.push(ManifestEntry {
                domain: p.domain.clone(),
                adapter_path: file,
            });
        }
        let manifest = RegistryManifest {
            domains: entries,
            classifier_path: classifier.map(|c| c.display().to_string()),
            prototypes: self.prototypes.clone(),
            default_domain: self.default_domain.clone(),
        };
        let path = dir.join(RegistryManifest::FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(dir: &Path, backbone: &BackboneConfig) -> Result<(Self, RegistryManifest)> {
        let path = dir.join(RegistryManifest::FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: RegistryManifest = serde_json::from_str(&text)?;
        let mut reg = Self::new();
        for e in &manifest.domains {
            reg.insert(adapters::load_adapter(&dir.join(&e.adapter_path), backbone)?);
        }
        reg.prototypes = manifest.prototypes.clone();
        reg.default_domain = manifest.default_domain.clone();
        Ok((reg, manifest))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub domain: DomainId,
    pub adapter_path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryManifest {
    pub domains: Vec<ManifestEntry>,
    pub classifier_path: Option<String>,
    pub prototypes: Option<Vec<Vec<f64>>>,
    pub default_domain: Option<DomainId>,
}

impl RegistryManifest {
    pub const FILE: &'static str = "registry.json";
}
