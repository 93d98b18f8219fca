use catch_core::adapters::{init_adapter_pair, AdapterConfig, AdapterPair};
use catch_core::backbone::{Backbone, BackboneConfig};
use catch_core::domain::DomainId;
use catch_core::hooks::{HookEngine, Injection};
use catch_core::synthdata::{gen_sample, DomainSpec, VqaSample};
use catch_core::tensor::{grad_check, GradCheckOptions, Graph, ParamSet, Tensor};
use catch_core::trainer::adapter_step;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_backbone() -> Backbone {
    let mut bb = Backbone::init(BackboneConfig {
        vision_layers: 4,
        decoder_layers: 2,
        ..BackboneConfig::default()
    })
    .unwrap();
    bb.freeze();
    bb
}

/// A pair moved away from its zero-`W₂` init so every gradient is nonzero.
fn perturbed_pair(bb: &Backbone, domain: DomainId) -> AdapterPair {
    let cfg = AdapterConfig {
        prefix_len: 3,
        layers: vec![2, 4],
        ..AdapterConfig::default()
    };
    let mut pair = init_adapter_pair(domain, &cfg, bb.config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in pair.params_mut() {
        let shape = p.tensor.shape().to_vec();
        p.tensor = Tensor::randn(shape, 0.3, &mut rng);
    }
    pair
}

fn sample(kind: usize, seed: u64) -> VqaSample {
    gen_sample(&DomainSpec::builtin_suite()[kind], seed).unwrap()
}

#[test]
fn adapter_gradients_match_central_differences() {
    let bb = small_backbone();
    for (kind, seed) in [(0, 1), (2, 4)] {
        let s = sample(kind, seed);
        let mut pair = perturbed_pair(&bb, s.domain.clone());
        let names = pair.param_names();
        let report = grad_check(&mut pair, &names, &GradCheckOptions::default(), |p| {
            let mut engine = HookEngine::new(bb.sites());
            engine.install_pair(p)?;
            adapter_step(&bb, &engine, &s, None)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
        assert_eq!(report.coords_checked, pair.numel());
    }
}

#[test]
fn cached_prefix_gives_the_same_loss_and_gradients() {
    let bb = small_backbone();
    let s = sample(3, 2);
    let pair = perturbed_pair(&bb, s.domain.clone());
    let mut engine = HookEngine::new(bb.sites());
    engine.install_pair(&pair).unwrap();
    let (full, gf) = adapter_step(&bb, &engine, &s, None).unwrap();
    let cache = bb.vision_prefix(&s.image, 1).unwrap();
    let (cached, gc) = adapter_step(&bb, &engine, &s, Some((&cache, 1))).unwrap();
    assert!((full - cached).abs() < 1e-12);
    for (name, g) in gf.iter() {
        let other = gc.get(name).unwrap();
        let diff = g.iter().zip(other).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{name}: {diff}");
    }
}

#[test]
fn backbone_gradients_match_central_differences() {
    let mut bb = Backbone::init(BackboneConfig {
        vision_layers: 2,
        decoder_layers: 1,
        ..BackboneConfig::default()
    })
    .unwrap();
    bb.set_trainable(true);
    let s = sample(1, 3);
    let names = bb.param_names();
    let opts = GradCheckOptions {
        max_coords_per_param: 6,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&mut bb, &names, &opts, |b| {
        let mut g = Graph::new();
        let v = b.visual_tokens(&mut g, &s.image, &Injection::None)?;
        let l = b.answer_loss(&mut g, v, &s.question, &s.answer, &Injection::None)?;
        g.backward(l)?;
        Ok((g.value(l).item(), g.param_grads()))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}
