//! Run configuration file.
//!
//! A flat TOML file: scalar keys at top level, plus a `[corpora]` table
//! mapping each domain to its corpus file. `slot_registry` names the
//! slot-description file to include. Relative paths are resolved against the
//! directory holding the config file.
//!
//! Precedence, highest first: command-line flags, the config file, the
//! `COACH_SEED` environment variable (seed only), built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use coach::corpus::{load_bio_corpus, load_slot_registry, CorpusFormat, LabeledUtterance, SlotRegistry, SplitSpec};
use coach::embeddings::{load_word_vectors, EmbeddingTable};
use coach::model::{CoarseMode, EntityEncoderMode, ModelConfig};
use coach::rng::{stream_rng, Stream};
use coach::templates::{RegLossConfig, WrongTemplateMode};
use coach::trainer::{training_vocabulary, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SEED_ENV: &str = "COACH_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub slot_registry: PathBuf,
    pub format: CorpusFormat,
    pub target_domain: Option<String>,
    pub few_shot: usize,
    pub validation_size: usize,
    pub seed: Option<u64>,

    /// Pretrained word vectors (`token v1 … vd`); random init when absent.
    pub word_vectors: Option<PathBuf>,
    /// Pretrained character-trigram vectors in the same layout.
    pub char_ngram_vectors: Option<PathBuf>,
    /// Fine-tune pretrained vectors instead of keeping them frozen.
    pub train_word_vectors: bool,
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_buckets: usize,

    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub entity_encoder: EntityEncoderMode,
    pub coarse: CoarseMode,
    pub hard_constraints: bool,
    pub use_template_reg: bool,
    pub beta: f64,
    pub margin: f64,
    /// `false` drops the margin clamp on the wrong-template term.
    pub clamp_repulsion: bool,
    pub warmup_epochs: usize,
    pub wrong_templates: WrongTemplateMode,

    /// Matrix only.
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,

    pub corpora: BTreeMap<String, PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            slot_registry: PathBuf::new(),
            format: CorpusFormat::Bio,
            target_domain: None,
            few_shot: 0,
            validation_size: coach::corpus::DEFAULT_VALIDATION_SIZE,
            seed: None,
            word_vectors: None,
            char_ngram_vectors: None,
            train_word_vectors: false,
            word_dim: 300,
            char_dim: 100,
            char_buckets: coach::embeddings::DEFAULT_BUCKETS,
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            hidden: t.model.hidden,
            layers: t.model.layers,
            dropout: t.model.dropout,
            entity_encoder: t.model.entity_encoder,
            coarse: t.model.coarse,
            hard_constraints: t.model.hard_constraints,
            use_template_reg: t.use_template_reg,
            beta: t.reg.beta,
            margin: t.reg.margin.unwrap_or(2.0),
            clamp_repulsion: t.reg.margin.is_some(),
            warmup_epochs: t.reg.warmup_epochs,
            wrong_templates: t.reg.wrong_mode,
            shots: vec![0, 20, 50],
            seeds: vec![1, 2, 3],
            corpora: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new("config.path", format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::new("config.parse", format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.slot_registry);
        config.word_vectors.as_mut().map(resolve);
        config.char_ngram_vectors.as_mut().map(resolve);
        config.corpora.values_mut().for_each(resolve);
        Ok(config)
    }

    /// Fills the seed from the environment when neither flag nor file set it.
    pub fn resolve_seed(&mut self) -> Result<u64, CliError> {
        if self.seed.is_none() {
            if let Ok(v) = std::env::var(SEED_ENV) {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::new("config.invalid", format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                self.seed = Some(seed);
            }
        }
        Ok(*self.seed.get_or_insert(1))
    }

    /// Every referenced input file must exist.
    pub fn check_paths(&self) -> Result<(), CliError> {
        if self.slot_registry.as_os_str().is_empty() {
            return Err(CliError::new("config.invalid", "slot_registry is not set"));
        }
        if self.corpora.is_empty() {
            return Err(CliError::new("config.invalid", "no [corpora] entries"));
        }
        let mut paths: Vec<(&str, &Path)> = vec![("slot_registry", &self.slot_registry)];
        paths.extend(self.word_vectors.as_deref().map(|p| ("word_vectors", p)));
        paths.extend(self.char_ngram_vectors.as_deref().map(|p| ("char_ngram_vectors", p)));
        paths.extend(self.corpora.iter().map(|(d, p)| (d.as_str(), p.as_path())));
        for (key, p) in paths {
            if !p.is_file() {
                return Err(CliError::new("config.path", format!("{key}: no such file {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn input_files(&self) -> Vec<&Path> {
        let mut files = vec![self.slot_registry.as_path()];
        files.extend(self.word_vectors.as_deref());
        files.extend(self.char_ngram_vectors.as_deref());
        files.extend(self.corpora.values().map(PathBuf::as_path));
        files
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            model: ModelConfig {
                hidden: self.hidden,
                layers: self.layers,
                dropout: self.dropout,
                entity_encoder: self.entity_encoder,
                coarse: self.coarse,
                hard_constraints: self.hard_constraints,
            },
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            seed,
            use_template_reg: self.use_template_reg,
            reg: RegLossConfig {
                beta: self.beta,
                warmup_epochs: self.warmup_epochs,
                margin: self.clamp_repulsion.then_some(self.margin),
                wrong_mode: self.wrong_templates,
            },
            ..TrainConfig::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load_registry(&self) -> Result<SlotRegistry, CliError> {
        Ok(load_slot_registry(&self.slot_registry)?)
    }

    /// Loads every corpus; repaired tags are reported on stderr.
    pub fn load_corpora(&self, registry: &SlotRegistry) -> Result<BTreeMap<String, Vec<LabeledUtterance>>, CliError> {
        let mut out = BTreeMap::new();
        for (domain, path) in &self.corpora {
            if registry.domain_slots(domain).is_none() {
                return Err(CliError::new(
                    "config.invalid",
                    format!("domain {domain:?} has no entries in the slot registry"),
                ));
            }
            let loaded = load_bio_corpus(path, domain, self.format)?;
            if loaded.repaired_tags > 0 {
                eprintln!("warning: {}: repaired {} orphan I- tags", path.display(), loaded.repaired_tags);
            }
            registry.check_covers(&loaded.utterances)?;
            out.insert(domain.clone(), loaded.utterances);
        }
        Ok(out)
    }

    /// Embeddings for one run: pretrained vectors when configured, otherwise
    /// random vectors over the training vocabulary.
    pub fn embedding_table(&self, split: &SplitSpec, registry: &SlotRegistry, seed: u64) -> coach::Result<EmbeddingTable> {
        let mut rng = stream_rng(seed, Stream::Init);
        let table = match &self.word_vectors {
            Some(p) => {
                let mut t = EmbeddingTable::from_word_vectors(load_word_vectors(p, self.word_dim)?, self.char_dim, self.char_buckets, &mut rng)?;
                t.trainable = self.train_word_vectors;
                t
            }
            None => EmbeddingTable::random(
                training_vocabulary(&split.train, registry),
                self.word_dim,
                self.char_dim,
                self.char_buckets,
                &mut rng,
            )?,
        };
        match &self.char_ngram_vectors {
            Some(p) => {
                let ng = load_word_vectors(p, self.char_dim)?;
                let vectors = coach::numerics::Tensor::from_rows(&ng.vectors)?;
                table.with_ngram_vectors(ng.words, vectors)
            }
            None => Ok(table),
        }
    }
}
