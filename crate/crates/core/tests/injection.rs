use std::sync::Arc;

use catch_core::adapters::{init_adapter_pair, AdapterConfig, AdapterPair};
use catch_core::backbone::{Backbone, BackboneConfig};
use catch_core::hooks::{HookEngine, Injection, SiteHook};
use catch_core::synthdata::{gen_sample, DomainSpec, VqaSample};
use catch_core::tensor::{Graph, ParamSet, Tensor, Var};
use catch_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn backbone() -> Backbone {
    let mut bb = Backbone::init(BackboneConfig {
        vision_layers: 4,
        decoder_layers: 2,
        ..BackboneConfig::default()
    })
    .unwrap();
    bb.freeze();
    bb
}

fn samples() -> Vec<VqaSample> {
    let specs = DomainSpec::builtin_suite();
    (0..8).map(|i| gen_sample(&specs[i % 4], 100 + i as u64).unwrap()).collect()
}

fn trained_like(bb: &Backbone, s: &VqaSample) -> AdapterPair {
    let cfg = AdapterConfig {
        prefix_len: 4,
        layers: vec![1, 3],
        ..AdapterConfig::default()
    };
    let mut pair = init_adapter_pair(s.domain.clone(), &cfg, bb.config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for p in pair.params_mut() {
        let shape = p.tensor.shape().to_vec();
        p.tensor = Tensor::randn(shape, 0.5, &mut rng);
    }
    pair
}

struct Zero;

impl SiteHook for Zero {
    fn delta(&self, g: &mut Graph, _site: &str, h: Var) -> Result<Var> {
        let shape = g.shape(h).to_vec();
        Ok(g.leaf(Tensor::zeros(shape)))
    }
}

struct WrongShape;

impl SiteHook for WrongShape {
    fn delta(&self, g: &mut Graph, _site: &str, _h: Var) -> Result<Var> {
        Ok(g.leaf(Tensor::zeros(vec![1, 1])))
    }
}

#[test]
fn inline_build_matches_hooked_build_bit_exact() {
    let bb = backbone();
    for s in samples() {
        let pair = trained_like(&bb, &s);
        let mut engine = HookEngine::new(bb.sites());
        engine.install_pair(&pair).unwrap();
        let hooked = bb.generate_greedy(&s.image, &s.question, &Injection::Hooks(&engine)).unwrap();
        let inline = bb.generate_greedy(&s.image, &s.question, &Injection::Inline(&pair)).unwrap();
        assert_eq!(hooked.answer, inline.answer);
        assert_eq!(hooked.step_logits, inline.step_logits);
        let base = bb.generate_greedy(&s.image, &s.question, &Injection::None).unwrap();
        assert_ne!(base.step_logits, hooked.step_logits, "perturbed adapters should change the logits");
    }
}

#[test]
fn register_then_remove_restores_the_baseline() {
    let bb = backbone();
    let s = &samples()[1];
    let base = bb.generate_greedy(&s.image, &s.question, &Injection::None).unwrap();
    let mut engine = HookEngine::new(bb.sites());
    let h = engine.register("vision.block.2", Arc::new(Zero)).unwrap();
    let zero = bb.generate_greedy(&s.image, &s.question, &Injection::Hooks(&engine)).unwrap();
    assert_eq!(zero.step_logits, base.step_logits);
    engine.remove(&h);
    engine.remove(&h);
    engine.install_pair(&trained_like(&bb, s)).unwrap();
    engine.clear();
    let after = bb.generate_greedy(&s.image, &s.question, &Injection::Hooks(&engine)).unwrap();
    assert_eq!(after.step_logits, base.step_logits);
}

#[test]
fn wrong_shaped_delta_is_rejected() {
    let bb = backbone();
    let s = &samples()[0];
    let mut engine = HookEngine::new(bb.sites());
    engine.register("vision.block.1", Arc::new(WrongShape)).unwrap();
    let err = bb.generate_greedy(&s.image, &s.question, &Injection::Hooks(&engine)).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn unknown_site_is_a_lookup_error() {
    let bb = backbone();
    let mut engine = HookEngine::new(bb.sites());
    assert!(matches!(engine.register("vision.block.99", Arc::new(Zero)), Err(Error::Lookup { .. })));
}
