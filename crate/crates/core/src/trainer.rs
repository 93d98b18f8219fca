//! Backbone pretraining, per-domain adapter training and evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterPair;
use crate::backbone::Backbone;
use crate::domain::DomainId;
use crate::error::{Error, Result};
use crate::hooks::{HookEngine, Injection};
use crate::metrics::{self, EvalReport};
use crate::router::{self, AdapterRegistry, DomainClassifier};
use crate::synthdata::{Dataset, VqaSample};
use crate::tensor::{AdamW, AdamWConfig, Gradients, Graph, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValMetric {
    /// BLEU when any gold answer has several tokens, accuracy otherwise.
    Auto,
    Bleu,
    Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub eval_metric: ValMetric,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 16,
            max_epochs: 5,
            early_stop_patience: 2,
            eval_metric: ValMetric::Auto,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub label: String,
    pub metric: String,
    /// Validation metric before the first update.
    pub initial_val_metric: f64,
    pub epochs: Vec<EpochLog>,
    /// 0 means the initial weights were kept.
    pub best_epoch: usize,
    pub stop_reason: String,
    pub frozen_checksums: BTreeMap<String, String>,
}

impl TrainLog {
    /// One JSON object per epoch, then a summary object.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut out = Vec::new();
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        let summary = serde_json::json!({
            "label": self.label,
            "metric": self.metric,
            "initial_val_metric": self.initial_val_metric,
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
            "frozen_checksums": self.frozen_checksums,
        });
        serde_json::to_writer(&mut out, &summary)?;
        out.push(b'\n');
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn best_val_metric(&self) -> f64 {
        match self.best_epoch {
            0 => self.initial_val_metric,
            e => self.epochs[e - 1].val_metric,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

/// Trains every backbone parameter with teacher-forced answer loss, then
/// freezes the model. Returns the mean training loss of each epoch.
pub fn pretrain_backbone(backbone: &mut Backbone, data: &Dataset, cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    backbone.set_trainable(true);
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in shuffled(data.len(), &mut rng).chunks(cfg.batch_size) {
            let mut grads = Gradients::default();
            for &i in batch {
                let s = &data.samples[i];
                let mut g = Graph::new();
                let v = backbone.visual_tokens(&mut g, &s.image, &Injection::None)?;
                let loss = backbone.answer_loss(&mut g, v, &s.question, &s.answer, &Injection::None)?;
                g.backward(loss)?;
                total += g.value(loss).item();
                grads.accumulate(&g.param_grads());
            }
            grads.scale(1.0 / batch.len() as f64);
            backbone.accumulate_grads(&grads);
            opt.step(backbone)?;
        }
        losses.push(total / data.len() as f64);
    }
    backbone.freeze();
    Ok(losses)
}

fn pick_metric(requested: ValMetric, data: &Dataset) -> ValMetric {
    match requested {
        ValMetric::Auto if data.iter().any(|s| s.answer.len() > 1) => ValMetric::Bleu,
        ValMetric::Auto => ValMetric::Accuracy,
        m => m,
    }
}

fn val_score(backbone: &Backbone, pair: &AdapterPair, data: &Dataset, metric: ValMetric) -> Result<f64> {
    let inj = Injection::Inline(pair);
    let mut preds = Vec::with_capacity(data.len());
    let mut golds = Vec::with_capacity(data.len());
    for s in data.iter() {
        preds.push(backbone.generate_greedy(&s.image, &s.question, &inj)?.answer.ids);
        golds.push(s.answer.ids.clone());
    }
    let set = metrics::MetricSet::compute(&preds, &golds)?;
    Ok(match metric {
        ValMetric::Bleu => set.bleu,
        _ => set.accuracy,
    })
}

/// Checksums of the groups that must not move while adapters train.
pub fn frozen_checksums(backbone: &Backbone, classifier: Option<&DomainClassifier>) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    out.insert("backbone".to_string(), backbone.checksum());
    if let Some(c) = classifier {
        out.insert("classifier".to_string(), c.checksum());
    }
    out
}

/// Mean teacher-forced loss of `pair` over `data`, hooks active.
pub fn adapter_loss(backbone: &Backbone, pair: &AdapterPair, data: &Dataset) -> Result<f64> {
    let mut engine = HookEngine::new(backbone.sites());
    engine.install_pair(pair)?;
    let mut total = 0.0;
    for s in data.iter() {
        total += sample_loss(backbone, &engine, s)?;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Forward-only teacher-forced loss of one sample through the hook engine.
pub fn sample_loss(backbone: &Backbone, engine: &HookEngine, sample: &VqaSample) -> Result<f64> {
    let inj = Injection::Hooks(engine);
    let mut g = Graph::inference();
    let v = backbone.visual_tokens(&mut g, &sample.image, &inj)?;
    let l = backbone.answer_loss(&mut g, v, &sample.question, &sample.answer, &inj)?;
    Ok(g.value(l).item())
}

/// One forward/backward pass of `pair` on a sample through the hook engine;
/// returns the loss and adapter gradients. `cached` resumes the frozen
/// encoder after block `upto`.
pub fn adapter_step(
    backbone: &Backbone,
    engine: &HookEngine,
    sample: &VqaSample,
    cached: Option<(&Tensor, usize)>,
) -> Result<(f64, Gradients)> {
    let inj = Injection::Hooks(engine);
    let mut g = Graph::new();
    let v = match cached {
        Some((t, upto)) => backbone.visual_tokens_from(&mut g, t.clone(), upto, &inj)?,
        None => backbone.visual_tokens(&mut g, &sample.image, &inj)?,
    };
    let loss = backbone.answer_loss(&mut g, v, &sample.question, &sample.answer, &inj)?;
    g.backward(loss)?;
    Ok((g.value(loss).item(), g.param_grads()))
}

/// Optimises only the pair's parameters with the backbone frozen, keeping
/// the weights of the best validation epoch (epoch 0 = initial weights).
pub fn train_adapter_pair(
    backbone: &Backbone,
    classifier: Option<&DomainClassifier>,
    mut pair: AdapterPair,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(AdapterPair, TrainLog)> {
    cfg.validate()?;
    if !backbone.is_frozen() {
        return Err(Error::Contract("backbone must be frozen before adapter training".into()));
    }
    if classifier.is_some_and(|c| !c.all_frozen()) {
        return Err(Error::Contract("classifier must be frozen before adapter training".into()));
    }
    if train.is_empty() {
        return Err(Error::Config(format!("no training samples for domain {}", pair.domain)));
    }
    let before = frozen_checksums(backbone, classifier);
    let metric = pick_metric(cfg.eval_metric, val);
    let upto = pair.visual.layers().iter().min().map_or(backbone.config().vision_layers, |l| l - 1);
    let cache = train
        .iter()
        .map(|s| backbone.vision_prefix(&s.image, upto))
        .collect::<Result<Vec<_>>>()?;

    let initial = val_score(backbone, &pair, val, metric)?;
    let mut best = (0usize, initial, pair.clone());
    let mut stale = 0;
    let mut stop_reason = "max_epochs".to_string();
    let mut epochs = Vec::new();
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (pair.domain.index as u64).wrapping_mul(0x9E37_79B9));
    let mut engine = HookEngine::new(backbone.sites());
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let mut total = 0.0;
        for batch in shuffled(train.len(), &mut rng).chunks(cfg.batch_size) {
            engine.install_pair(&pair)?;
            let mut grads = Gradients::default();
            for &i in batch {
                let (l, g) = adapter_step(backbone, &engine, &train.samples[i], Some((&cache[i], upto)))?;
                total += l;
                grads.accumulate(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            pair.accumulate_grads(&grads);
            opt.step(&mut pair)?;
        }
        engine.clear();
        let v = val_score(backbone, &pair, val, metric)?;
        epochs.push(EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            val_metric: v,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if v > best.1 {
            best = (epoch, v, pair.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                stop_reason = "early_stop".into();
                break;
            }
        }
    }
    let after = frozen_checksums(backbone, classifier);
    if before != after {
        return Err(Error::State("frozen parameters changed during adapter training".into()));
    }
    let log = TrainLog {
        label: pair.domain.name.clone(),
        metric: format!("{metric:?}").to_lowercase(),
        initial_val_metric: initial,
        epochs,
        best_epoch: best.0,
        stop_reason,
        frozen_checksums: after,
    };
    Ok((best.2, log))
}

/// Which adapters serve each evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Policy {
    /// No adapters: the frozen backbone alone.
    Baseline,
    /// The gold domain's pair.
    Oracle,
    Hard,
    Soft { temperature: f64 },
    /// `repeats` full passes with independent uniform draws.
    Random { seed: u64, repeats: usize },
    /// One pair for every input.
    Fixed { domain: DomainId },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub policy: Policy,
    /// Use the inline adapter build instead of the hook engine.
    pub inline: bool,
}

impl EvalOptions {
    pub fn new(policy: Policy) -> Self {
        Self { policy, inline: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub sample: usize,
    pub domain: String,
    pub selected: Option<String>,
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub routes: Vec<RouteRecord>,
    /// Generated answer ids, one per routed sample.
    pub predictions: Vec<Vec<usize>>,
}

pub struct EvalContext<'a> {
    pub backbone: &'a Backbone,
    pub registry: Option<&'a AdapterRegistry>,
    pub classifier: Option<&'a DomainClassifier>,
}

impl<'a> EvalContext<'a> {
    fn registry(&self) -> Result<&'a AdapterRegistry> {
        self.registry
            .ok_or_else(|| Error::State("this policy needs an adapter registry".into()))
    }

    fn classifier(&self) -> Result<&'a DomainClassifier> {
        self.classifier
            .ok_or_else(|| Error::State("this policy needs a domain classifier".into()))
    }

    fn generate_with(&self, s: &VqaSample, pair: &AdapterPair, engine: &mut HookEngine, inline: bool) -> Result<Vec<usize>> {
        if inline {
            return Ok(self.backbone.generate_greedy(&s.image, &s.question, &Injection::Inline(pair))?.answer.ids);
        }
        engine.install_pair(pair)?;
        let out = self.backbone.generate_greedy(&s.image, &s.question, &Injection::Hooks(engine))?;
        engine.clear();
        Ok(out.answer.ids)
    }
}

/// Routes, generates and scores every sample. Pure with respect to all
/// inputs: repeated calls return identical results.
pub fn evaluate(ctx: &EvalContext<'_>, data: &Dataset, opts: &EvalOptions) -> Result<Evaluation> {
    let mut rows = Vec::with_capacity(data.len());
    let mut routes = Vec::with_capacity(data.len());
    let mut engine = HookEngine::new(ctx.backbone.sites());
    let label = serde_json::to_value(opts)?;
    match &opts.policy {
        Policy::Baseline => {
            for s in data.iter() {
                let out = ctx.backbone.generate_greedy(&s.image, &s.question, &Injection::None)?;
                rows.push((s.domain.name.clone(), out.answer.ids, s.answer.ids.clone()));
            }
        }
        Policy::Oracle | Policy::Hard | Policy::Fixed { .. } => {
            let reg = ctx.registry()?;
            for (i, s) in data.iter().enumerate() {
                let d = match &opts.policy {
                    Policy::Oracle => s.domain.clone(),
                    Policy::Fixed { domain } => domain.clone(),
                    _ => {
                        let clf = ctx.classifier()?;
                        let k = router::route_hard(&clf.classify(&s.image)?).selected.unwrap_or(0);
                        clf.domains[k].clone()
                    }
                };
                let pair = reg.get(&d)?;
                let pred = ctx.generate_with(s, pair, &mut engine, opts.inline)?;
                routes.push(RouteRecord {
                    sample: i,
                    domain: s.domain.name.clone(),
                    selected: Some(d.name.clone()),
                    weights: None,
                });
                rows.push((s.domain.name.clone(), pred, s.answer.ids.clone()));
            }
        }
        Policy::Soft { temperature } => {
            if opts.inline {
                return Err(Error::Config("soft routing has no inline build".into()));
            }
            let reg = ctx.registry()?;
            let clf = ctx.classifier()?;
            let protos = reg
                .prototypes
                .as_ref()
                .ok_or_else(|| Error::State("registry has no domain prototypes".into()))?;
            let pairs = clf.domains.iter().map(|d| reg.get(d)).collect::<Result<Vec<_>>>()?;
            for (i, s) in data.iter().enumerate() {
                let (emb, mut logits) = clf.embed_and_logits(&s.image)?;
                crate::tensor::kernels::softmax_in_place(&mut logits);
                let decision = router::route_soft(&logits, &emb, protos, *temperature)?;
                let w = decision.weights.unwrap_or_default();
                let mix: Vec<(f64, &AdapterPair)> = w.iter().copied().zip(pairs.iter().copied()).collect();
                engine.install_mixture(&mix)?;
                let out = ctx.backbone.generate_greedy(&s.image, &s.question, &Injection::Hooks(&engine))?;
                engine.clear();
                routes.push(RouteRecord {
                    sample: i,
                    domain: s.domain.name.clone(),
                    selected: None,
                    weights: Some(w),
                });
                rows.push((s.domain.name.clone(), out.answer.ids, s.answer.ids.clone()));
            }
        }
        Policy::Random { seed, repeats } => {
            let reg = ctx.registry()?;
            let domains = reg.domains();
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            // Generation is deterministic per (sample, adapter), so repeated
            // draws reuse earlier outputs.
            let mut memo: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
            for _ in 0..(*repeats).max(1) {
                for (i, s) in data.iter().enumerate() {
                    let k = router::route_random(domains.len(), &mut rng)?.selected.unwrap_or(0);
                    let pred = match memo.get(&(i, k)) {
                        Some(p) => p.clone(),
                        None => {
                            let p = ctx.generate_with(s, reg.get(&domains[k])?, &mut engine, opts.inline)?;
                            memo.insert((i, k), p.clone());
                            p
                        }
                    };
                    routes.push(RouteRecord {
                        sample: i,
                        domain: s.domain.name.clone(),
                        selected: Some(domains[k].name.clone()),
                        weights: None,
                    });
                    rows.push((s.domain.name.clone(), pred, s.answer.ids.clone()));
                }
            }
        }
    }
    let report = EvalReport::from_predictions(policy_label(&opts.policy), &rows, label)?;
    let predictions = rows.into_iter().map(|(_, p, _)| p).collect();
    Ok(Evaluation {
        report,
        routes,
        predictions,
    })
}

pub fn policy_label(p: &Policy) -> String {
    match p {
        Policy::Baseline => "baseline".into(),
        Policy::Oracle => "oracle".into(),
        Policy::Hard => "hard".into(),
        Policy::Soft { temperature } => format!("soft(T={temperature})"),
        Policy::Random { .. } => "random".into(),
        Policy::Fixed { domain } => format!("fixed({})", domain.name),
    }
}

/// `A[d][k]`: exact-match accuracy of adapter `k` on domain `d`'s samples,
/// both in registry order.
pub fn adapter_accuracy_matrix(ctx: &EvalContext<'_>, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let reg = ctx.registry()?;
    let domains = reg.domains();
    let mut out = Vec::with_capacity(domains.len());
    for d in &domains {
        let subset = data.for_domain(d.index);
        let mut row = Vec::with_capacity(domains.len());
        for k in &domains {
            let e = evaluate(ctx, &subset, &EvalOptions::new(Policy::Fixed { domain: k.clone() }))?;
            row.push(e.report.overall.accuracy);
        }
        out.push(row);
    }
    Ok(out)
}
