use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use sha2::{Digest, Sha256};

use super::config::{key_of, ExperimentConfig};
use crate::adapters::{init_adapter_pair, load_adapter, save_adapter, AdapterConfig};
use crate::backbone::Backbone;
use crate::domain::DomainId;
use crate::error::{Error, Result};
use crate::router::{compute_prototypes, train_classifier, AdapterRegistry, DomainClassifier};
use crate::synthdata::{
    gen_dataset, write_dataset_dir, Dataset, DatasetManifest, DomainSpec, SplitRatios, Splits,
};
use crate::trainer::{pretrain_backbone, train_adapter_pair, TrainLog};

/// Seed offset separating the pretraining corpus from the experiment splits.
const PRETRAIN_CORPUS_SALT: u64 = 0x5EED_0F_C0_8F05;

/// On-disk artifacts of one output directory, trained on demand and keyed
/// by the configuration that produced them.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    pub specs: Vec<DomainSpec>,
    splits: Option<Splits>,
    dataset_hash: Option<String>,
    backbone_key: Option<String>,
    checkpoints: BTreeMap<String, String>,
}

fn file_sha(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl Pipeline {
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let root = cfg.resolved_output();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            cfg,
            root,
            specs: DomainSpec::builtin_suite(),
            splits: None,
            dataset_hash: None,
            backbone_key: None,
            checkpoints: BTreeMap::new(),
        })
    }

    pub fn domains(&self) -> Vec<DomainId> {
        self.specs.iter().map(|s| s.id.clone()).collect()
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    fn artifacts(&self) -> PathBuf {
        self.root.join("artifacts")
    }

    fn data_dir(&self) -> PathBuf {
        self.cfg.manifest.clone().unwrap_or_else(|| self.root.join("data"))
    }

    fn missing(&self, path: &Path, command: &str) -> Error {
        Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: format!("run `catch {command}` with the same config first"),
        }
    }

    /// Writes the experiment splits unless a matching manifest is present.
    pub fn gen_data(&mut self) -> Result<DatasetManifest> {
        let dir = self.data_dir();
        if let Ok(m) = DatasetManifest::load(&dir) {
            if m.master_seed == self.cfg.seed && m.n_per_domain == self.cfg.data.n_per_domain {
                return Ok(m);
            }
            if self.cfg.manifest.is_some() {
                return Ok(m);
            }
        }
        if self.cfg.manifest.is_some() {
            return Err(self.missing(&dir.join(DatasetManifest::FILE), "gen-data"));
        }
        info!("generating dataset in {}", dir.display());
        write_dataset_dir(
            &dir,
            &self.specs,
            self.cfg.data.n_per_domain,
            SplitRatios::default(),
            self.cfg.seed,
        )
    }

    pub fn splits(&mut self) -> Result<&Splits> {
        if self.splits.is_none() {
            let dir = self.data_dir();
            let manifest = match DatasetManifest::load(&dir) {
                Ok(m) if self.cfg.manifest.is_some() => m,
                Ok(m) if m.master_seed == self.cfg.seed && m.n_per_domain == self.cfg.data.n_per_domain => m,
                _ if self.cfg.train_missing => self.gen_data()?,
                _ => return Err(self.missing(&dir.join(DatasetManifest::FILE), "gen-data")),
            };
            let mut h = Sha256::new();
            for f in [DatasetManifest::FILE, &manifest.train, &manifest.val, &manifest.test] {
                let p = dir.join(f);
                h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
            }
            self.dataset_hash = Some(hex::encode(h.finalize()));
            self.splits = Some(manifest.load_splits(&dir)?);
        }
        Ok(self.splits.as_ref().expect("loaded above"))
    }

    pub fn dataset_hash(&mut self) -> Result<String> {
        self.splits()?;
        Ok(self.dataset_hash.clone().expect("set with splits"))
    }

    /// Mixed-domain corpus used only for backbone pretraining: every
    /// domain's content drawn in the neutral house style, with seeds apart
    /// from the experiment splits.
    pub fn pretrain_corpus(&self) -> Result<Dataset> {
        let ratios = SplitRatios {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        let neutral: Vec<DomainSpec> = self.specs.iter().map(DomainSpec::neutral).collect();
        Ok(gen_dataset(
            &neutral,
            self.cfg.data.pretrain_per_domain,
            ratios,
            self.cfg.seed ^ PRETRAIN_CORPUS_SALT,
        )?
        .train)
    }

    fn backbone_key(&mut self) -> String {
        self.backbone_key
            .get_or_insert_with(|| {
                key_of(&[
                    &serde_json::to_value(self.cfg.effective_backbone()).expect("serialises"),
                    &serde_json::to_value(self.cfg.effective_pretrain()).expect("serialises"),
                    &serde_json::json!([self.cfg.seed, self.cfg.data.pretrain_per_domain]),
                ])
            })
            .clone()
    }

    pub fn backbone_path(&mut self) -> PathBuf {
        let key = self.backbone_key();
        self.artifacts().join(format!("backbone-{key}.ckpt"))
    }

    /// Loads the frozen backbone, pretraining it first if allowed.
    pub fn backbone(&mut self) -> Result<Backbone> {
        let path = self.backbone_path();
        if !path.exists() {
            if !self.cfg.train_missing {
                return Err(self.missing(&path, "pretrain"));
            }
            self.pretrain()?;
        }
        let bb = Backbone::load(&path)?;
        self.checkpoints.insert("backbone".into(), file_sha(&path)?);
        Ok(bb)
    }

    /// Pretrains and saves the backbone; returns per-epoch losses.
    pub fn pretrain(&mut self) -> Result<Vec<f64>> {
        let path = self.backbone_path();
        let corpus = self.pretrain_corpus()?;
        let mut bb = Backbone::init(self.cfg.effective_backbone())?;
        info!("pretraining backbone on {} samples", corpus.len());
        let losses = pretrain_backbone(&mut bb, &corpus, &self.cfg.effective_pretrain())?;
        bb.save(&path)?;
        let log = path.with_extension("losses.json");
        fs::write(&log, serde_json::to_string(&losses)?).map_err(|e| Error::io(&log, e))?;
        Ok(losses)
    }

    fn classifier_path(&mut self, domains: &[DomainId]) -> Result<PathBuf> {
        let names: Vec<&str> = domains.iter().map(|d| d.name.as_str()).collect();
        let key = key_of(&[
            &serde_json::to_value(self.cfg.effective_classifier())?,
            &serde_json::to_value(&names)?,
            &serde_json::Value::String(self.dataset_hash()?),
        ]);
        Ok(self.artifacts().join(format!("classifier-{key}.ckpt")))
    }

    /// Classifier over `domains`, trained on their train split on demand.
    pub fn classifier_for(&mut self, domains: &[DomainId]) -> Result<DomainClassifier> {
        let path = self.classifier_path(domains)?;
        if !path.exists() {
            if !self.cfg.train_missing {
                return Err(self.missing(&path, "train-classifier"));
            }
            self.train_classifier(domains)?;
        }
        let clf = DomainClassifier::load(&path)?;
        let tag = if domains.len() == self.specs.len() {
            "classifier".to_string()
        } else {
            format!(
                "classifier[{}]",
                domains.iter().map(|d| d.name.as_str()).collect::<Vec<_>>().join(",")
            )
        };
        self.checkpoints.insert(tag, file_sha(&path)?);
        Ok(clf)
    }

    pub fn classifier(&mut self) -> Result<DomainClassifier> {
        self.classifier_for(&self.domains())
    }

    pub fn train_classifier(&mut self, domains: &[DomainId]) -> Result<Vec<f64>> {
        let path = self.classifier_path(domains)?;
        let keep: Vec<usize> = domains.iter().map(|d| d.index).collect();
        let data = self.splits()?.train.filter(|s| keep.contains(&s.domain.index));
        let (clf, losses) = train_classifier(&data, domains, &self.cfg.backbone, &self.cfg.effective_classifier())?;
        clf.save(&path)?;
        Ok(losses)
    }

    pub fn adapter_dir(&mut self, adapter: &AdapterConfig) -> Result<PathBuf> {
        let key = key_of(&[
            &serde_json::Value::String(self.backbone_key()),
            &serde_json::to_value(adapter)?,
            &serde_json::to_value(self.cfg.effective_train())?,
            &serde_json::Value::String(self.dataset_hash()?),
        ]);
        Ok(self.artifacts().join(format!("adapters-{key}")))
    }

    /// Trains one domain's pair and writes its checkpoint and log.
    pub fn train_adapter(
        &mut self,
        backbone: &Backbone,
        classifier: Option<&DomainClassifier>,
        adapter: &AdapterConfig,
        domain: &DomainId,
    ) -> Result<TrainLog> {
        let dir = self.adapter_dir(adapter)?;
        let splits = self.splits()?;
        let train = splits.train.for_domain(domain.index);
        let val = splits.val.for_domain(domain.index);
        let pair = init_adapter_pair(domain.clone(), adapter, backbone.config())?;
        info!("training adapters for {domain} on {} samples", train.len());
        let (pair, log) = train_adapter_pair(backbone, classifier, pair, &train, &val, &self.cfg.effective_train())?;
        save_adapter(&pair, &dir.join(format!("adapter_{}.ckpt", domain.name)))?;
        log.write_jsonl(&dir.join(format!("train_{}.jsonl", domain.name)))?;
        Ok(log)
    }

    /// Per-domain pairs for every domain, trained on demand, with soft-routing
    /// prototypes taken from `classifier` on the training split.
    pub fn adapters(
        &mut self,
        backbone: &Backbone,
        classifier: &DomainClassifier,
        adapter: &AdapterConfig,
    ) -> Result<AdapterRegistry> {
        let dir = self.adapter_dir(adapter)?;
        let mut reg = AdapterRegistry::new();
        for d in self.domains() {
            let path = dir.join(format!("adapter_{}.ckpt", d.name));
            if !path.exists() {
                if !self.cfg.train_missing {
                    return Err(self.missing(&path, &format!("train-adapters --domain {}", d.name)));
                }
                self.train_adapter(backbone, Some(classifier), adapter, &d)?;
            }
            reg.insert(load_adapter(&path, backbone.config())?);
            let tag = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            self.checkpoints.insert(format!("{tag}/{}", d.name), file_sha(&path)?);
        }
        reg.default_domain = reg.domains().first().cloned();
        reg.prototypes = Some(self.prototypes(classifier)?);
        Ok(reg)
    }

    /// Registry restricted to the classifier's domains.
    pub fn subset(&mut self, full: &AdapterRegistry, classifier: &DomainClassifier) -> Result<AdapterRegistry> {
        let mut reg = AdapterRegistry::new();
        for d in &classifier.domains {
            reg.insert(full.get(d)?.clone());
        }
        reg.default_domain = classifier.domains.first().cloned();
        reg.prototypes = Some(self.prototypes(classifier)?);
        Ok(reg)
    }

    pub fn prototypes(&mut self, classifier: &DomainClassifier) -> Result<Vec<Vec<f64>>> {
        let keep: Vec<usize> = classifier.domains.iter().map(|d| d.index).collect();
        let data = self.splits()?.train.filter(|s| keep.contains(&s.domain.index));
        compute_prototypes(classifier, &data)
    }

    /// Artifact hashes touched so far.
    pub fn checkpoints(&self) -> &BTreeMap<String, String> {
        &self.checkpoints
    }
}
