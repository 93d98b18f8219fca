use catch_core::adapters::{init_adapter_pair, prompt_forward, AdapterConfig};
use catch_core::backbone::{argmax, Backbone, BackboneConfig};
use catch_core::hooks::{HookEngine, Injection};
use catch_core::metrics::{accuracy, bleu, meteor_lite, rouge_l};
use catch_core::router::{route_hard, route_soft};
use catch_core::synthdata::{gen_sample, solve_from_image, DomainSpec};
use catch_core::tensor::{AdamW, AdamWConfig, Graph, ParamSet, ParameterStore, Tensor};
use proptest::prelude::*;
use std::sync::OnceLock;

fn tokens(max_len: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 1..=max_len)
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn small_backbone() -> &'static Backbone {
    static BB: OnceLock<Backbone> = OnceLock::new();
    BB.get_or_init(|| {
        let mut bb = Backbone::init(BackboneConfig {
            vision_layers: 4,
            decoder_layers: 2,
            ..BackboneConfig::default()
        })
        .unwrap();
        bb.freeze();
        bb
    })
}

proptest! {
    #[test]
    fn tensor_shape_must_cover_data(dims in prop::collection::vec(1usize..5, 1..4), extra in 0usize..3) {
        let n: usize = dims.iter().product();
        prop_assert!(Tensor::new(dims.clone(), vec![0.0; n]).is_ok());
        if extra > 0 {
            prop_assert!(Tensor::new(dims, vec![0.0; n + extra]).is_err());
        }
    }

    #[test]
    fn frozen_parameters_survive_optimizer_steps(vals in prop::collection::vec(-3.0f64..3.0, 4), steps in 1usize..6) {
        let mut store = ParameterStore::new();
        store.insert("frozen", Tensor::new(vec![2], vals[..2].to_vec()).unwrap(), false).unwrap();
        store.insert("live", Tensor::new(vec![2], vals[2..].to_vec()).unwrap(), true).unwrap();
        let before = store.param("frozen").unwrap().tensor.data().to_vec();
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.1));
        for k in 0..steps {
            let mut g = Graph::new();
            let a = g.param(store.param("frozen").unwrap());
            let b = g.param(store.param("live").unwrap());
            let s = g.add(a, b).unwrap();
            let sq = g.mul(s, s).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap();
            store.accumulate_grads(&g.param_grads());
            opt.step(&mut store).unwrap();
            prop_assert_eq!(opt.step_count(), k as u64 + 1);
        }
        let after = store.param("frozen").unwrap().tensor.data().to_vec();
        prop_assert_eq!(before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), after.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert!(!opt.has_moments_for("frozen"));
        prop_assert!(opt.has_moments_for("live"));
    }

    #[test]
    fn metrics_are_bounded(c in tokens(8), r in tokens(8)) {
        for v in [bleu(&c, &r).unwrap().value, rouge_l(&c, &r).value, meteor_lite(&c, &r).value] {
            prop_assert!((0.0..=1.0).contains(&v), "{}", v);
        }
    }

    #[test]
    fn self_match_scores(x in tokens(8)) {
        prop_assert!((bleu(&x, &x).unwrap().value - 1.0).abs() < 1e-12);
        prop_assert_eq!(rouge_l(&x, &x).value, 1.0);
        let n = x.len() as f64;
        prop_assert!((meteor_lite(&x, &x).value - (1.0 - 0.5 / n.powi(3))).abs() < 1e-12);
    }

    #[test]
    fn rouge_is_symmetric(c in tokens(8), r in tokens(8)) {
        prop_assert!((rouge_l(&c, &r).value - rouge_l(&r, &c).value).abs() < 1e-15);
    }

    #[test]
    fn accuracy_ignores_sample_order(pairs in prop::collection::vec((tokens(3), tokens(3)), 1..20), rot in 0usize..20) {
        let (p, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let k = rot % p.len();
        let (mut p2, mut g2) = (p.clone(), g.clone());
        p2.rotate_left(k);
        g2.rotate_left(k);
        prop_assert_eq!(accuracy(&p, &g).unwrap(), accuracy(&p2, &g2).unwrap());
    }

    #[test]
    fn hard_routing_ignores_monotone_logit_transforms(logits in prop::collection::vec(-5.0f64..5.0, 2..6), scale in 0.1f64..10.0, shift in -3.0f64..3.0) {
        let base = route_hard(&softmax(&logits)).selected;
        let moved: Vec<f64> = logits.iter().map(|l| (scale * l + shift).tanh() * 7.0).collect();
        prop_assume!({
            let mut s = moved.clone();
            s.sort_by(f64::total_cmp);
            s.windows(2).all(|w| w[1] - w[0] > 1e-9)
        });
        prop_assert_eq!(route_hard(&softmax(&moved)).selected, base);
        prop_assert_eq!(base, Some(argmax(&logits)));
    }

    #[test]
    fn soft_weights_lie_on_the_simplex(
        emb in prop::collection::vec(-2.0f64..2.0, 3),
        protos in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..5),
        t in 1e-3f64..10.0,
    ) {
        let probs = vec![1.0 / protos.len() as f64; protos.len()];
        let d = route_soft(&probs, &emb, &protos, t).unwrap();
        let w = d.weights.unwrap();
        prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn soft_routing_sharpens_to_the_nearest_prototype(
        emb in prop::collection::vec(-2.0f64..2.0, 3),
        protos in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..5),
    ) {
        let dist: Vec<f64> = protos.iter().map(|p| p.iter().zip(&emb).map(|(a, b)| (a - b).powi(2)).sum()).collect();
        let mut sorted = dist.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted[1] - sorted[0] > 1e-3);
        let nearest = dist.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let probs = vec![1.0 / protos.len() as f64; protos.len()];
        let w = route_soft(&probs, &emb, &protos, 1e-6).unwrap().weights.unwrap();
        prop_assert!(w[nearest] > 1.0 - 1e-9);
    }

    #[test]
    fn prefix_adds_exactly_l_rows(l in 0usize..6, n in 1usize..6) {
        let mut g = Graph::inference();
        let e = g.leaf(Tensor::zeros(vec![n, 4]));
        let p = (l > 0).then(|| g.leaf(Tensor::zeros(vec![l, 4])));
        let out = prompt_forward(&mut g, p, e).unwrap();
        prop_assert_eq!(g.shape(out).to_vec(), vec![l + n, 4]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn answers_follow_from_pixels(kind in 0usize..4, seed in any::<u64>()) {
        let spec = &DomainSpec::builtin_suite()[kind];
        let s = gen_sample(spec, seed).unwrap();
        prop_assert_eq!(&solve_from_image(spec.kind, &s.image).unwrap(), &s.answer);
        prop_assert_eq!(gen_sample(spec, seed).unwrap(), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn zero_adapters_are_the_identity(kind in 0usize..4, seed in 0u64..10_000) {
        let bb = small_backbone();
        let s = gen_sample(&DomainSpec::builtin_suite()[kind], seed).unwrap();
        let cfg = AdapterConfig { prefix_len: 0, layers: vec![2, 4], seed, ..AdapterConfig::default() };
        let pair = init_adapter_pair(s.domain.clone(), &cfg, bb.config()).unwrap();
        let base = bb.generate_greedy(&s.image, &s.question, &Injection::None).unwrap();
        let mut engine = HookEngine::new(bb.sites());
        engine.install_pair(&pair).unwrap();
        let hooked = bb.generate_greedy(&s.image, &s.question, &Injection::Hooks(&engine)).unwrap();
        prop_assert_eq!(&hooked.answer, &base.answer);
        prop_assert_eq!(hooked.step_logits, base.step_logits.clone());
        engine.clear();
        let cleared = bb.generate_greedy(&s.image, &s.question, &Injection::Hooks(&engine)).unwrap();
        prop_assert_eq!(cleared.step_logits, base.step_logits);
    }
}
