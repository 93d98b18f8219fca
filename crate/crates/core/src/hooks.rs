//! Named-site additive injection: `f'(x) = f(x) + h(x)`.
//!
//! A hook receives the site's output and returns a delta of the same shape.
//! The engine adds it; a site with no hook is passed through untouched.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::adapters::{AdapterPair, PromptAdapter, VisualAdapter};
use crate::backbone::BackboneConfig;
use crate::domain::DomainId;
use crate::error::{Error, Result};
use crate::router::AdapterRegistry;
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HookSite {
    pub name: String,
    pub expected_shape: Vec<usize>,
}

/// Additive transformation attached to one site.
pub trait SiteHook: Send + Sync {
    fn delta(&self, g: &mut Graph, site: &str, h: Var) -> Result<Var>;
}

/// Rows prepended to the text embedding sequence.
pub trait PrefixSource: Send + Sync {
    fn prefix(&self, g: &mut Graph) -> Result<Option<Var>>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HookHandle {
    pub site: String,
    pub id: u64,
}

struct Slot {
    id: u64,
    hook: Arc<dyn SiteHook>,
}

pub struct HookEngine {
    sites: Vec<HookSite>,
    slots: BTreeMap<String, Slot>,
    prefix: Option<Arc<dyn PrefixSource>>,
    active: Vec<HookHandle>,
    active_domain: Option<DomainId>,
    next_id: u64,
    epoch: u64,
}

impl std::fmt::Debug for HookEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HookEngine")
            .field("sites", &self.sites.len())
            .field("active", &self.active_sites())
            .field("prefix", &self.prefix.is_some())
            .field("epoch", &self.epoch)
            .finish()
    }
}

impl HookEngine {
    pub fn new(sites: Vec<HookSite>) -> Self {
        Self {
            sites,
            slots: BTreeMap::new(),
            prefix: None,
            active: Vec::new(),
            active_domain: None,
            next_id: 1,
            epoch: 0,
        }
    }

    pub fn sites(&self) -> &[HookSite] {
        &self.sites
    }

    /// Bumped on every mutation; generation checks it did not move.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn active_domain(&self) -> Option<&DomainId> {
        self.active_domain.as_ref()
    }

    pub fn active_sites(&self) -> Vec<String> {
        self.slots.keys().cloned().collect()
    }

    pub fn has_prefix(&self) -> bool {
        self.prefix.is_some()
    }

    /// One line per site: name and shape contract.
    pub fn site_listing(&self) -> String {
        let mut out = String::new();
        for s in &self.sites {
            let state = if self.slots.contains_key(&s.name) { "active" } else { "empty" };
            let _ = writeln!(out, "{}\t{:?}\t{}", s.name, s.expected_shape, state);
        }
        out
    }

    fn site(&self, name: &str) -> Result<&HookSite> {
        self.sites.iter().find(|s| s.name == name).ok_or_else(|| Error::Lookup {
            what: "hook site",
            name: name.to_string(),
            available: self.sites.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(", "),
        })
    }

    pub fn register(&mut self, site: &str, hook: Arc<dyn SiteHook>) -> Result<HookHandle> {
        self.site(site)?;
        if self.slots.contains_key(site) {
            return Err(Error::Conflict(format!("site `{site}` already has an active hook")));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.slots.insert(site.to_string(), Slot { id, hook });
        self.epoch += 1;
        let handle = HookHandle {
            site: site.to_string(),
            id,
        };
        self.active.push(handle.clone());
        Ok(handle)
    }

    /// Removes the hook if it is still the one registered; otherwise no-op.
    pub fn remove(&mut self, handle: &HookHandle) {
        if self.slots.get(&handle.site).is_some_and(|s| s.id == handle.id) {
            self.slots.remove(&handle.site);
            self.active.retain(|h| h != handle);
            self.epoch += 1;
        }
    }

    pub fn bind_prefix(&mut self, prefix: Arc<dyn PrefixSource>) {
        self.prefix = Some(prefix);
        self.epoch += 1;
    }

    pub fn unbind_prefix(&mut self) {
        if self.prefix.take().is_some() {
            self.epoch += 1;
        }
    }

    /// Drops every hook and the prefix binding.
    pub fn clear(&mut self) {
        if !self.slots.is_empty() || self.prefix.is_some() || self.active_domain.is_some() {
            self.epoch += 1;
        }
        self.slots.clear();
        self.active.clear();
        self.prefix = None;
        self.active_domain = None;
    }

    /// Installs a prepared set of hooks and prefix, replacing everything.
    /// Every site is checked first, so a bad set leaves the engine untouched.
    pub fn install(
        &mut self,
        hooks: Vec<(String, Arc<dyn SiteHook>)>,
        prefix: Option<Arc<dyn PrefixSource>>,
        domain: Option<DomainId>,
    ) -> Result<()> {
        for (site, _) in &hooks {
            self.site(site)?;
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some((dup, _)) = hooks.iter().find(|(s, _)| !seen.insert(s.clone())) {
            return Err(Error::Conflict(format!("site `{dup}` listed twice")));
        }
        self.clear();
        for (site, hook) in hooks {
            self.register(&site, hook)?;
        }
        if let Some(p) = prefix {
            self.bind_prefix(p);
        }
        self.active_domain = domain;
        Ok(())
    }

    /// Activates one adapter pair: its visual hooks and its prefix.
    pub fn install_pair(&mut self, pair: &AdapterPair) -> Result<()> {
        let visual = Arc::new(pair.visual.clone());
        let hooks = pair
            .visual
            .layers()
            .iter()
            .map(|&l| {
                let h: Arc<dyn SiteHook> = Arc::new(VisualHook {
                    adapter: Arc::clone(&visual),
                    layer: l,
                });
                (BackboneConfig::site_name(l), h)
            })
            .collect();
        let prefix: Option<Arc<dyn PrefixSource>> = if pair.prompt.len() > 0 {
            Some(Arc::new(pair.prompt.clone()))
        } else {
            None
        };
        self.install(hooks, prefix, Some(pair.domain.clone()))
    }

    /// Replaces the active adapters with domain `d`'s pair from `registry`.
    pub fn swap_domain(&mut self, registry: &AdapterRegistry, d: &DomainId) -> Result<()> {
        let pair = registry.get(d)?;
        self.install_pair(pair)
    }

    /// Output-mixed hooks for soft routing: `Σ w_k Δh_k` at each site and
    /// `Σ w_k P_k` as prefix. Zero weights are skipped.
    pub fn install_mixture(&mut self, mix: &[(f64, &AdapterPair)]) -> Result<()> {
        let terms: Vec<(f64, &AdapterPair)> = mix.iter().copied().filter(|(w, _)| *w != 0.0).collect();
        let mut by_site: BTreeMap<usize, Vec<(f64, Arc<VisualAdapter>)>> = BTreeMap::new();
        let mut prefixes = Vec::new();
        for (w, pair) in &terms {
            let visual = Arc::new(pair.visual.clone());
            for &l in pair.visual.layers() {
                by_site.entry(l).or_default().push((*w, Arc::clone(&visual)));
            }
            if pair.prompt.len() > 0 {
                prefixes.push((*w, pair.prompt.clone()));
            }
        }
        let lens: std::collections::BTreeSet<usize> = prefixes.iter().map(|(_, p)| p.len()).collect();
        if lens.len() > 1 {
            return Err(Error::Config(format!("cannot mix prefixes of lengths {lens:?}")));
        }
        let hooks = by_site
            .into_iter()
            .map(|(l, terms)| {
                let h: Arc<dyn SiteHook> = Arc::new(MixedVisualHook { layer: l, terms });
                (BackboneConfig::site_name(l), h)
            })
            .collect();
        let prefix: Option<Arc<dyn PrefixSource>> = if prefixes.is_empty() {
            None
        } else {
            Some(Arc::new(MixedPrefix { terms: prefixes }))
        };
        self.install(hooks, prefix, None)
    }

    /// Adds the site's hook output to `h`, enforcing the shape contract.
    pub fn apply(&self, g: &mut Graph, site: &str, h: Var) -> Result<Var> {
        let Some(slot) = self.slots.get(site) else {
            return Ok(h);
        };
        let expected = &self.site(site)?.expected_shape;
        if g.shape(h) != expected.as_slice() {
            return Err(Error::Shape {
                op: "hook input",
                left: expected.clone(),
                right: g.shape(h).to_vec(),
            });
        }
        let delta = slot.hook.delta(g, site, h)?;
        if g.shape(delta) != expected.as_slice() {
            return Err(Error::Shape {
                op: "hook output",
                left: expected.clone(),
                right: g.shape(delta).to_vec(),
            });
        }
        g.add(h, delta)
    }

    pub fn prefix(&self, g: &mut Graph) -> Result<Option<Var>> {
        match &self.prefix {
            Some(p) => p.prefix(g),
            None => Ok(None),
        }
    }
}

struct VisualHook {
    adapter: Arc<VisualAdapter>,
    layer: usize,
}

impl SiteHook for VisualHook {
    fn delta(&self, g: &mut Graph, _site: &str, h: Var) -> Result<Var> {
        self.adapter.forward(g, self.layer, h)
    }
}

struct MixedVisualHook {
    layer: usize,
    terms: Vec<(f64, Arc<VisualAdapter>)>,
}

impl SiteHook for MixedVisualHook {
    fn delta(&self, g: &mut Graph, _site: &str, h: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.terms.len());
        for (w, a) in &self.terms {
            parts.push((*w, a.forward(g, self.layer, h)?));
        }
        g.weighted_sum(&parts)
    }
}

impl PrefixSource for PromptAdapter {
    fn prefix(&self, g: &mut Graph) -> Result<Option<Var>> {
        Ok(self.prefix_var(g))
    }
}

struct MixedPrefix {
    terms: Vec<(f64, PromptAdapter)>,
}

impl PrefixSource for MixedPrefix {
    fn prefix(&self, g: &mut Graph) -> Result<Option<Var>> {
        let mut parts = Vec::with_capacity(self.terms.len());
        for (w, p) in &self.terms {
            if let Some(v) = p.prefix_var(g) {
                parts.push((*w, v));
            }
        }
        if parts.is_empty() {
            return Ok(None);
        }
        g.weighted_sum(&parts).map(Some)
    }
}

/// How adapters reach the backbone during one forward pass.
#[derive(Clone, Copy)]
pub enum Injection<'a> {
    None,
    Hooks(&'a HookEngine),
    /// The adapter addition written straight into the block loop, with no
    /// hook engine involved.
    Inline(&'a AdapterPair),
}

impl<'a> Injection<'a> {
    pub fn after_block(&self, g: &mut Graph, layer: usize, h: Var) -> Result<Var> {
        match self {
            Injection::None => Ok(h),
            Injection::Hooks(e) => e.apply(g, &BackboneConfig::site_name(layer), h),
            Injection::Inline(pair) => {
                if pair.visual.layers().contains(&layer) {
                    let delta = pair.visual.forward(g, layer, h)?;
                    g.add(h, delta)
                } else {
                    Ok(h)
                }
            }
        }
    }

    /// `[prefix; text]` and the prefix row count.
    pub fn prepend_prefix(&self, g: &mut Graph, text: Var) -> Result<(Var, usize)> {
        let prefix = match self {
            Injection::None => None,
            Injection::Hooks(e) => e.prefix(g)?,
            Injection::Inline(pair) => pair.prompt.prefix_var(g),
        };
        match prefix {
            None => Ok((text, 0)),
            Some(p) => {
                let l = g.shape(p)[0];
                Ok((crate::adapters::prompt_forward(g, Some(p), text)?, l))
            }
        }
    }

    /// Earliest vision layer this injection touches.
    pub fn first_layer(&self) -> Option<usize> {
        match self {
            Injection::None => None,
            Injection::Hooks(e) => e
                .slots
                .keys()
                .filter_map(|s| s.strip_prefix("vision.block.")?.parse().ok())
                .min(),
            Injection::Inline(pair) => pair.visual.layers().iter().copied().min(),
        }
    }

    pub fn epoch(&self) -> u64 {
        match self {
            Injection::Hooks(e) => e.epoch(),
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct Constant(f64);

    impl SiteHook for Constant {
        fn delta(&self, g: &mut Graph, _: &str, h: Var) -> Result<Var> {
            let shape = g.shape(h).to_vec();
            Ok(g.leaf(Tensor::full(shape, self.0)))
        }
    }

    struct WrongShape;

    impl SiteHook for WrongShape {
        fn delta(&self, g: &mut Graph, _: &str, _: Var) -> Result<Var> {
            Ok(g.leaf(Tensor::zeros(vec![1, 2])))
        }
    }

    fn engine() -> HookEngine {
        HookEngine::new(
            (1..=3)
                .map(|l| HookSite {
                    name: format!("vision.block.{l}"),
                    expected_shape: vec![2, 2],
                })
                .collect(),
        )
    }

    fn run(e: &HookEngine, site: &str) -> Result<Tensor> {
        let mut g = Graph::inference();
        let h = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = e.apply(&mut g, site, h)?;
        Ok(g.value(out).clone())
    }

    #[test]
    fn unknown_site_lists_available() {
        let mut e = engine();
        match e.register("vision.block.9", Arc::new(Constant(0.0))) {
            Err(Error::Lookup { available, .. }) => assert!(available.contains("vision.block.2")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn occupied_slot_conflicts() {
        let mut e = engine();
        e.register("vision.block.1", Arc::new(Constant(0.0))).unwrap();
        assert!(matches!(
            e.register("vision.block.1", Arc::new(Constant(1.0))),
            Err(Error::Conflict(_))
        ));
    }

    #[test]
    fn register_remove_restores_and_is_idempotent() {
        let mut e = engine();
        let base = run(&e, "vision.block.1").unwrap();
        let a = e.register("vision.block.1", Arc::new(Constant(0.5))).unwrap();
        let b = e.register("vision.block.2", Arc::new(Constant(1.0))).unwrap();
        assert_eq!(run(&e, "vision.block.1").unwrap().data(), &[1.5, 2.5, 3.5, 4.5]);
        e.remove(&a);
        e.remove(&a);
        assert!(run(&e, "vision.block.1").unwrap().bit_eq(&base));
        assert_eq!(run(&e, "vision.block.2").unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
        e.remove(&b);
        assert!(e.active_sites().is_empty());
    }

    #[test]
    fn stale_handle_does_not_remove_newer_hook() {
        let mut e = engine();
        let old = e.register("vision.block.1", Arc::new(Constant(1.0))).unwrap();
        e.remove(&old);
        e.register("vision.block.1", Arc::new(Constant(2.0))).unwrap();
        e.remove(&old);
        assert_eq!(e.active_sites(), vec!["vision.block.1".to_string()]);
    }

    #[test]
    fn wrong_shaped_delta_is_rejected() {
        let mut e = engine();
        e.register("vision.block.3", Arc::new(WrongShape)).unwrap();
        assert!(matches!(run(&e, "vision.block.3"), Err(Error::Shape { .. })));
    }

    #[test]
    fn failed_install_keeps_previous_hooks() {
        let mut e = engine();
        e.register("vision.block.2", Arc::new(Constant(1.0))).unwrap();
        let epoch = e.epoch();
        let bad: Vec<(String, Arc<dyn SiteHook>)> = vec![
            ("vision.block.1".into(), Arc::new(Constant(0.0))),
            ("vision.block.7".into(), Arc::new(Constant(0.0))),
        ];
        assert!(e.install(bad, None, None).is_err());
        assert_eq!(e.active_sites(), vec!["vision.block.2".to_string()]);
        assert_eq!(e.epoch(), epoch);
    }

    #[test]
    fn listing_names_every_site() {
        let listing = engine().site_listing();
        assert_eq!(listing.lines().count(), 3);
        assert!(listing.contains("vision.block.2\t[2, 2]\tempty"));
    }
}
