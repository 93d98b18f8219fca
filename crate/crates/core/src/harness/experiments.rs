use super::config::{derive_seed, ExperimentId, PolicyName};
use super::pipeline::Pipeline;
use super::report::{build_id, Cell, Check, Provenance, Report, Table};
use crate::adapters::{AdapterConfig, AdapterPair};
use crate::backbone::Backbone;
use crate::domain::DomainId;
use crate::error::Result;
use crate::metrics::EvalReport;
use crate::router::{AdapterRegistry, DomainClassifier};
use crate::synthdata::Dataset;
use crate::trainer::{adapter_accuracy_matrix, evaluate, policy_label, EvalContext, EvalOptions, Evaluation, Policy};

/// Frozen backbone, classifier and adapters of the configured system.
pub struct System {
    pub backbone: Backbone,
    pub classifier: DomainClassifier,
    pub registry: AdapterRegistry,
}

impl System {
    pub fn load(p: &mut Pipeline) -> Result<Self> {
        Self::load_with(p, &p.cfg.effective_adapter())
    }

    pub fn load_with(p: &mut Pipeline, adapter: &AdapterConfig) -> Result<Self> {
        let backbone = p.backbone()?;
        let classifier = p.classifier()?;
        let registry = p.adapters(&backbone, &classifier, adapter)?;
        Ok(Self {
            backbone,
            classifier,
            registry,
        })
    }

    pub fn ctx(&self) -> EvalContext<'_> {
        EvalContext {
            backbone: &self.backbone,
            registry: Some(&self.registry),
            classifier: Some(&self.classifier),
        }
    }

    pub fn eval(&self, data: &Dataset, policy: Policy) -> Result<Evaluation> {
        evaluate(&self.ctx(), data, &EvalOptions::new(policy))
    }
}

fn provenance(p: &mut Pipeline) -> Result<Provenance> {
    Ok(Provenance {
        build_id: build_id().to_string(),
        seed: p.cfg.seed,
        config_hash: p.cfg.hash(),
        dataset_hash: p.dataset_hash()?,
        checkpoints: p.checkpoints().clone(),
    })
}

fn columns(domains: &[DomainId]) -> Vec<String> {
    let mut c: Vec<String> = domains.iter().map(|d| d.name.clone()).collect();
    c.push("mean".into());
    c
}

fn acc(r: &EvalReport, d: &DomainId) -> f64 {
    r.domain(&d.name).map_or(0.0, |x| x.metrics.accuracy)
}

/// Per-domain accuracy cells plus the domain mean.
fn acc_cells(r: &EvalReport, domains: &[DomainId], reference: Option<&EvalReport>) -> Vec<Cell> {
    let mut cells: Vec<Cell> = domains
        .iter()
        .map(|d| match reference {
            Some(b) => Cell::with_delta(acc(r, d), acc(b, d)),
            None => Cell::pct(acc(r, d)),
        })
        .collect();
    cells.push(match reference {
        Some(b) => Cell::with_delta(r.domain_mean("accuracy"), b.domain_mean("accuracy")),
        None => Cell::pct(r.domain_mean("accuracy")),
    });
    cells
}

fn points(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

fn report(p: &mut Pipeline, id: ExperimentId, tables: Vec<Table>, checks: Vec<Check>, evals: Vec<EvalReport>) -> Result<Report> {
    Ok(Report {
        experiment: id.name().into(),
        tables,
        checks,
        evaluations: evals,
        provenance: provenance(p)?,
    })
}

/// Frozen baseline against hard-routed adapters on every domain.
pub fn run_main(p: &mut Pipeline) -> Result<Report> {
    let sys = System::load(p)?;
    let test = p.splits()?.test.clone();
    let domains = p.domains();
    let base = sys.eval(&test, Policy::Baseline)?.report;
    let catch = sys.eval(&test, Policy::Hard)?.report;

    let mut t = Table::new("accuracy: frozen baseline vs adapters (hard routing)", columns(&domains));
    t.push("frozen baseline", acc_cells(&base, &domains, None));
    t.push("adapters (hard routing)", acc_cells(&catch, &domains, Some(&base)));

    let mut m = Table::new("adapter metrics (hard routing)", columns(&domains));
    for name in crate::metrics::MetricSet::NAMES {
        let mut cells: Vec<Cell> = domains
            .iter()
            .map(|d| Cell::pct(catch.domain(&d.name).and_then(|x| x.metrics.get(name)).unwrap_or(0.0)))
            .collect();
        cells.push(Cell::pct(catch.domain_mean(name)));
        m.push(name, cells);
    }

    let gains: Vec<f64> = domains.iter().map(|d| acc(&catch, d) - acc(&base, d)).collect();
    let mean_gain = catch.domain_mean("accuracy") - base.domain_mean("accuracy");
    let worst = gains.iter().copied().fold(f64::INFINITY, f64::min);
    let checks = vec![
        check("adapters_beat_baseline_every_domain", worst > 0.0, format!("smallest gain {} points", points(worst))),
        check("mean_gain_at_least_5_points", mean_gain >= 0.05, format!("mean gain {} points", points(mean_gain))),
    ];
    report(p, ExperimentId::Main, vec![t, m], checks, vec![base, catch])
}

fn map_registry(reg: &AdapterRegistry, f: impl Fn(&AdapterPair) -> AdapterPair) -> AdapterRegistry {
    let mut out = AdapterRegistry::new();
    for pair in reg.pairs() {
        out.insert(f(pair));
    }
    out.default_domain = reg.default_domain.clone();
    out.prototypes = reg.prototypes.clone();
    out
}

pub const HOOK_FOOTNOTE: &str = "w/o hook injection serves the same adapter weights through a hardcoded inline \
build. Both paths execute the same operations in the same order, so the row is bit-identical to the full \
model; a nonzero drop for this variant would reflect an implementation difference rather than the \
injection mechanism.";

/// Removes one component at a time from the full hard-routed system.
pub fn run_ablation(p: &mut Pipeline) -> Result<Report> {
    let sys = System::load(p)?;
    let test = p.splits()?.test.clone();
    let domains = p.domains();
    let full = sys.eval(&test, Policy::Hard)?;

    let variant = |reg: &AdapterRegistry| {
        let ctx = EvalContext {
            backbone: &sys.backbone,
            registry: Some(reg),
            classifier: Some(&sys.classifier),
        };
        evaluate(&ctx, &test, &EvalOptions::new(Policy::Hard))
    };
    let no_prompt = variant(&map_registry(&sys.registry, AdapterPair::without_prompt))?;
    let no_visual = variant(&map_registry(&sys.registry, AdapterPair::without_visual))?;
    let default = sys.registry.default_domain.clone().unwrap_or_else(|| domains[0].clone());
    let fixed = sys.eval(&test, Policy::Fixed { domain: default.clone() })?;
    let inline = evaluate(
        &sys.ctx(),
        &test,
        &EvalOptions {
            policy: Policy::Hard,
            inline: true,
        },
    )?;

    let mut t = Table::new("ablation accuracy (change vs full model)", columns(&domains));
    t.push("full model", acc_cells(&full.report, &domains, None));
    let rows = [
        ("w/o prompt adapter", &no_prompt),
        ("w/o visual adapter", &no_visual),
        ("w/o domain classifier", &fixed),
        ("w/o hook injection", &inline),
    ];
    for (label, e) in rows {
        t.push(label, acc_cells(&e.report, &domains, Some(&full.report)));
    }
    t.footnotes.push(HOOK_FOOTNOTE.into());
    t.footnotes.push(format!("w/o domain classifier serves every input with the {} adapters.", default.name));

    let max_drop = |e: &Evaluation| {
        domains
            .iter()
            .map(|d| acc(&full.report, d) - acc(&e.report, d))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let used: std::collections::BTreeSet<_> = fixed.routes.iter().filter_map(|r| r.selected.clone()).collect();
    let mean_drop = full.report.domain_mean("accuracy") - fixed.report.domain_mean("accuracy");
    let checks = vec![
        check(
            "prompt_removal_drops_a_domain_2_points",
            max_drop(&no_prompt) >= 0.02,
            format!("largest drop {} points", points(max_drop(&no_prompt))),
        ),
        check(
            "visual_removal_drops_a_domain_2_points",
            max_drop(&no_visual) >= 0.02,
            format!("largest drop {} points", points(max_drop(&no_visual))),
        ),
        check("classifier_removal_lowers_mean", mean_drop > 0.0, format!("mean drop {} points", points(mean_drop))),
        check(
            "fixed_variant_uses_one_adapter",
            used.len() == 1,
            format!("adapters used: {}", used.into_iter().collect::<Vec<_>>().join(", ")),
        ),
        check(
            "hook_injection_bit_identical",
            inline.predictions == full.predictions && inline.report.domains == full.report.domains,
            "inline and hooked generations compared token by token".into(),
        ),
    ];
    let evals = vec![full.report, no_prompt.report, no_visual.report, fixed.report, inline.report];
    report(p, ExperimentId::Ablation, vec![t], checks, evals)
}

/// Leave-one-domain-out: classifier and adapters cover three domains, the
/// fourth is served by soft routing over them.
pub fn run_crossdomain(p: &mut Pipeline) -> Result<Report> {
    let sys = System::load(p)?;
    let test = p.splits()?.test.clone();
    let domains = p.domains();
    let in_training = sys.eval(&test, Policy::Hard)?.report;
    let temperature = p.cfg.soft_temperature();

    let mut soft_row = Vec::new();
    let mut hard_row = Vec::new();
    let mut evals = Vec::new();
    let mut checks = Vec::new();
    for held in &domains {
        let rest: Vec<DomainId> = domains.iter().filter(|d| *d != held).cloned().collect();
        let clf = p.classifier_for(&rest)?;
        let reg = p.subset(&sys.registry, &clf)?;
        let ctx = EvalContext {
            backbone: &sys.backbone,
            registry: Some(&reg),
            classifier: Some(&clf),
        };
        let data = test.for_domain(held.index);
        let mut soft = evaluate(&ctx, &data, &EvalOptions::new(Policy::Soft { temperature }))?.report;
        let mut hard = evaluate(&ctx, &data, &EvalOptions::new(Policy::Hard))?.report;
        soft.label = format!("held-out {held} (soft)");
        hard.label = format!("held-out {held} (hard)");
        let s = soft.overall.accuracy;
        let random = p.specs[held.index].random_answer_baseline();
        let trained = acc(&in_training, held);
        checks.push(check(
            &format!("{held}_above_random_answer"),
            s > random,
            format!("{} vs {}", points(s), points(random)),
        ));
        checks.push(check(
            &format!("{held}_below_in_training"),
            s < trained,
            format!("{} vs {}", points(s), points(trained)),
        ));
        soft_row.push(Cell::pct(s));
        hard_row.push(Cell::pct(hard.overall.accuracy));
        evals.push(soft);
        evals.push(hard);
    }
    let names: Vec<String> = domains.iter().map(|d| d.name.clone()).collect();
    let mut t = Table::new("held-out accuracy (trained on the other three domains)", names);
    t.push(format!("held-out, soft routing (T={temperature})"), soft_row);
    t.push("held-out, hard routing", hard_row);
    t.push(
        "in-training, hard routing",
        domains.iter().map(|d| Cell::pct(acc(&in_training, d))).collect(),
    );
    t.push(
        "random answer",
        p.specs.iter().map(|s| Cell::pct(s.random_answer_baseline())).collect(),
    );
    t.footnotes
        .push("Hard routing sends every held-out input to one of the three foreign adapter pairs.".into());
    evals.push(in_training);
    report(p, ExperimentId::Crossdomain, vec![t], checks, evals)
}

/// Hard, soft and random adapter selection on the mixed test set.
pub fn run_routing(p: &mut Pipeline) -> Result<Report> {
    let sys = System::load(p)?;
    let test = p.splits()?.test.clone();
    let domains = p.domains();
    let t_soft = p.cfg.soft_temperature();
    let t_limit = p.cfg.limit_temperature;
    let hard = sys.eval(&test, Policy::Hard)?.report;
    let soft = sys.eval(&test, Policy::Soft { temperature: t_soft })?.report;
    let limit = sys.eval(&test, Policy::Soft { temperature: t_limit })?.report;
    let random_policy = Policy::Random {
        seed: derive_seed(p.cfg.seed, 6),
        repeats: p.cfg.random_repeats,
    };
    let random = sys.eval(&test, random_policy)?.report;
    let matrix = adapter_accuracy_matrix(&sys.ctx(), &test)?;
    let expected: Vec<f64> = matrix.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect();
    let expected_mean = expected.iter().sum::<f64>() / expected.len() as f64;

    let mut t = Table::new("routing accuracy", columns(&domains));
    t.push("hard (classifier argmax)", acc_cells(&hard, &domains, None));
    t.push(format!("soft (T={t_soft})"), acc_cells(&soft, &domains, None));
    t.push(format!("soft (T={t_limit})"), acc_cells(&limit, &domains, None));
    t.push(
        format!("random ({} passes)", p.cfg.random_repeats),
        acc_cells(&random, &domains, None),
    );
    let mut cells: Vec<Cell> = expected.iter().map(|&x| Cell::pct(x)).collect();
    cells.push(Cell::pct(expected_mean));
    t.push("random, enumerated expectation", cells);

    let mut m = Table::new(
        "adapter accuracy by domain (rows: data domain, columns: adapter)",
        domains.iter().map(|d| d.name.clone()).collect(),
    );
    for (d, row) in domains.iter().zip(&matrix) {
        m.push(d.name.clone(), row.iter().map(|&x| Cell::pct(x)).collect());
    }

    let (h, s, l, r) = (
        hard.domain_mean("accuracy"),
        soft.domain_mean("accuracy"),
        limit.domain_mean("accuracy"),
        random.domain_mean("accuracy"),
    );
    let checks = vec![
        check("hard_ge_soft_ge_random", h >= s && s >= r, format!("{} >= {} >= {}", points(h), points(s), points(r))),
        check("hard_minus_random_at_least_5", h - r >= 0.05, format!("{} points", points(h - r))),
        check(
            "soft_limit_matches_hard",
            (l - h).abs() <= 0.001,
            format!("|{} - {}| points", points(l), points(h)),
        ),
        check(
            "random_matches_enumeration",
            (r - expected_mean).abs() <= 0.01,
            format!("|{} - {}| points", points(r), points(expected_mean)),
        ),
    ];
    report(p, ExperimentId::Routing, vec![t, m], checks, vec![hard, soft, limit, random])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Layers,
    Prefix,
}

/// Retrains adapters at each sweep point and evaluates hard routing.
pub fn run_sweep(p: &mut Pipeline, what: Sweep) -> Result<Report> {
    let base = p.cfg.effective_adapter();
    let depth = p.cfg.backbone.vision_layers;
    let points_list: Vec<(String, AdapterConfig)> = match what {
        Sweep::Layers => [
            ("early [2,4]", vec![2, 4]),
            ("mid [4,8]", vec![4, 8]),
            ("late [10,12]", vec![depth - 2, depth]),
            ("all", (1..=depth).collect()),
        ]
        .into_iter()
        .map(|(n, layers)| {
            let label = if n.starts_with("late") {
                format!("late [{},{}]", depth - 2, depth)
            } else {
                n.to_string()
            };
            (label, AdapterConfig { layers, ..base.clone() })
        })
        .collect(),
        Sweep::Prefix => [5, 10, 20, 50]
            .into_iter()
            .map(|l| (format!("l={l}"), AdapterConfig { prefix_len: l, ..base.clone() }))
            .collect(),
    };
    let test = p.splits()?.test.clone();
    let domains = p.domains();
    let (id, title) = match what {
        Sweep::Layers => (ExperimentId::LayersSweep, "accuracy by injection layers"),
        Sweep::Prefix => (ExperimentId::PrefixSweep, "accuracy by prefix length"),
    };
    let mut t = Table::new(title, columns(&domains));
    let mut means = Vec::new();
    let mut evals = Vec::new();
    for (label, cfg) in &points_list {
        let sys = System::load_with(p, cfg)?;
        let mut r = sys.eval(&test, Policy::Hard)?.report;
        r.label = label.clone();
        t.push(label.clone(), acc_cells(&r, &domains, None));
        means.push(r.domain_mean("accuracy"));
        evals.push(r);
    }
    let checks = match what {
        Sweep::Layers => vec![check(
            "mid_ge_late",
            means[1] >= means[2],
            format!("{} vs {}", points(means[1]), points(means[2])),
        )],
        Sweep::Prefix => {
            let best = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            vec![check(
                "l10_within_1_point_of_best",
                best - means[1] <= 0.01,
                format!("{} vs best {}", points(means[1]), points(best)),
            )]
        }
    };
    t.footnotes
        .push("Checks on sweeps record expected trends; they are reported, not enforced.".into());
    report(p, id, vec![t], checks, evals)
}

/// Single-policy evaluation on the test split.
pub fn run_eval(p: &mut Pipeline, policy: PolicyName) -> Result<Report> {
    let sys = System::load(p)?;
    let test = p.splits()?.test.clone();
    let domains = p.domains();
    let policy = match policy {
        PolicyName::Hard => Policy::Hard,
        PolicyName::Soft => Policy::Soft {
            temperature: p.cfg.soft_temperature(),
        },
        PolicyName::Random => Policy::Random {
            seed: derive_seed(p.cfg.seed, 6),
            repeats: p.cfg.random_repeats,
        },
    };
    let r = sys.eval(&test, policy.clone())?.report;
    let mut t = Table::new(format!("{} metrics", policy_label(&policy)), columns(&domains));
    for name in crate::metrics::MetricSet::NAMES {
        let mut cells: Vec<Cell> = domains
            .iter()
            .map(|d| Cell::pct(r.domain(&d.name).and_then(|x| x.metrics.get(name)).unwrap_or(0.0)))
            .collect();
        cells.push(Cell::pct(r.domain_mean(name)));
        t.push(name, cells);
    }
    let mut rep = report(p, ExperimentId::Main, vec![t], vec![], vec![r])?;
    rep.experiment = format!("eval_{}", policy_label(&policy).split('(').next().unwrap_or("policy"));
    Ok(rep)
}

/// Dispatches on the configured experiment id.
pub fn run_experiment(p: &mut Pipeline) -> Result<Report> {
    match p.cfg.experiment {
        ExperimentId::Main => run_main(p),
        ExperimentId::Ablation => run_ablation(p),
        ExperimentId::Crossdomain => run_crossdomain(p),
        ExperimentId::Routing => run_routing(p),
        ExperimentId::LayersSweep => run_sweep(p, Sweep::Layers),
        ExperimentId::PrefixSweep => run_sweep(p, Sweep::Prefix),
    }
}
