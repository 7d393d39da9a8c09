//! Mini-batch training with Adam, validation-based model selection and
//! early stopping, plus the leave-one-domain-out experiment matrix.
//!
//! Every utterance contributes `w₁·step1 + w₂·step2 (+ w₃·reg)`; a batch
//! averages these and takes one Adam step. During the first
//! `reg.warmup_epochs` epochs the regularizer only reaches the template
//! encoder, its attention and the slot-label embeddings.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{few_shot_augment, leave_one_out_split, LabeledUtterance, SlotRegistry, SplitSpec};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::{evaluate_with_breakdown, span_f1, F1Report};
use crate::model::{CoachModel, ModelConfig};
use crate::numerics::{AdamState, Gradients, Graph, ParamStore};
use crate::rng::{indexed_rng, Stream};
use crate::templates::{make_template_set, regularization_loss, Phase, RegLossConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub model: ModelConfig,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub step1_weight: f64,
    pub step2_weight: f64,
    pub reg_weight: f64,
    pub use_template_reg: bool,
    pub reg: RegLossConfig,
    /// Stop as soon as validation F1 (in `[0, 1]`) reaches this value.
    pub stop_at_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            model: ModelConfig::default(),
            max_epochs: 300,
            patience: 5,
            batch_size: 32,
            seed: 0,
            step1_weight: 1.0,
            step2_weight: 1.0,
            reg_weight: 1.0,
            use_template_reg: true,
            reg: RegLossConfig::default(),
            stop_at_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("batch_size", self.batch_size),
            ("hidden", self.model.hidden),
            ("layers", self.model.layers),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.model.dropout)));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.reg.validate()
    }

    /// Hex SHA-256 of the JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Mean per-utterance losses of one epoch, and validation F1 in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub step1: f64,
    pub step2: f64,
    pub reg: f64,
    pub validation_f1: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_validation_f1: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
    pub stopped_early: bool,
    pub wall_clock_secs: f64,
}

/// Wall-clock time is not part of equality.
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.best_validation_f1 == other.best_validation_f1
            && self.seed == other.seed
            && self.config_hash == other.config_hash
            && self.stopped_early == other.stopped_early
    }
}

impl TrainReport {
    pub fn validation_trajectory(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.validation_f1).collect()
    }

    /// Total training loss per epoch.
    pub fn loss_trajectory(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.step1 + e.step2 + e.reg).collect()
    }
}

/// Sorted distinct tokens of the training utterances and slot descriptions:
/// the vocabulary for randomly initialized embeddings.
pub fn training_vocabulary(train: &[LabeledUtterance], registry: &SlotRegistry) -> Vec<String> {
    let mut words: BTreeSet<String> = train.iter().flat_map(|u| u.tokens.iter().cloned()).collect();
    words.extend(registry.slots().iter().flat_map(|s| s.description_tokens.iter().cloned()));
    words.into_iter().collect()
}

/// Span F1 of `model` on `data`, each utterance restricted to its domain's
/// slots.
pub fn validation_f1(model: &CoachModel, data: &[LabeledUtterance]) -> Result<f64> {
    let preds = model.predict_corpus(data)?;
    let gold: Vec<&Vec<String>> = data.iter().map(|u| &u.labels).collect();
    Ok(span_f1(&preds, &gold)?.f1)
}

/// Trains on `split.train`, selects on `split.validation`.
pub fn train(
    split: &SplitSpec,
    registry: &SlotRegistry,
    table: EmbeddingTable,
    config: &TrainConfig,
) -> Result<(CoachModel, TrainReport)> {
    train_with_log(split, registry, table, config, None)
}

/// [`train`], writing one JSON line per epoch to `log`.
pub fn train_with_log(
    split: &SplitSpec,
    registry: &SlotRegistry,
    table: EmbeddingTable,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(CoachModel, TrainReport)> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::Split("training set is empty".into()));
    }
    registry.check_covers(&split.train)?;
    registry.check_covers(&split.validation)?;

    let started = Instant::now();
    let seed = config.seed;
    let mut model = CoachModel::new(config.model.clone(), registry.clone(), table, seed)?;
    let mut adam = AdamState::new(config.lr);
    let mut grads = Gradients::new(&model.params);

    let mut records = Vec::new();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_params: Option<ParamStore> = None;
    let mut stopped_early = false;
    let mut utterance_counter: u64 = 0;
    let n = split.train.len();

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut indexed_rng(seed, Stream::Shuffle, epoch as u64));
        let phase = if epoch < config.reg.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Joint
        };
        let (mut s1, mut s2, mut sr) = (0.0, 0.0, 0.0);

        for batch in order.chunks(config.batch_size) {
            grads.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                utterance_counter += 1;
                let utt = &split.train[i];
                let mut g = Graph::training(&model.params, indexed_rng(seed, Stream::Dropout, utterance_counter));
                let losses = model.supervised_losses(&mut g, utt)?;
                let mut total = g.scale(losses.step1, config.step1_weight);
                let v1 = g.scalar(losses.step1);
                let mut v2 = 0.0;
                if let Some(l2) = losses.step2 {
                    v2 = g.scalar(l2);
                    let w = g.scale(l2, config.step2_weight);
                    total = g.add(total, w)?;
                }
                let mut vr = 0.0;
                if config.use_template_reg {
                    let candidates = wrong_template_candidates(&model, &utt.domain);
                    let mut rng = indexed_rng(seed, Stream::Templates, utterance_counter);
                    let set = make_template_set(utt, &model.registry, &candidates, config.reg.wrong_mode, &mut rng)?;
                    if let Some(lr) = regularization_loss(&model, &mut g, losses.hiddens, &set, &config.reg, phase)? {
                        vr = g.scalar(lr);
                        let w = g.scale(lr, config.reg_weight);
                        total = g.add(total, w)?;
                    }
                }
                if !(v1.is_finite() && v2.is_finite() && vr.is_finite()) {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        detail: format!("utterance {i}: step1={v1} step2={v2} reg={vr}"),
                    });
                }
                s1 += v1;
                s2 += v2;
                sr += vr;
                let total = g.scale(total, scale);
                g.backward(total, &mut grads)?;
            }
            if !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    detail: "non-finite gradient".into(),
                });
            }
            if grads.has_any() {
                adam.step(&mut model.params, &grads)?;
            }
        }

        let validation_f1 = if split.validation.is_empty() {
            None
        } else {
            Some(validation_f1(&model, &split.validation)?)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            step1: s1 / n as f64,
            step2: s2 / n as f64,
            reg: sr / n as f64,
            validation_f1,
        };
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        records.push(record);

        if let Some(f1) = validation_f1 {
            let (improved, stop) = stopper.observe(epoch + 1, f1);
            if improved {
                best_params = Some(model.params.clone());
            }
            if stop || config.stop_at_f1.is_some_and(|t| f1 >= t) {
                stopped_early = epoch + 1 < config.max_epochs;
                break;
            }
        }
    }

    let (best_epoch, best_validation_f1) = match (stopper.best, best_params) {
        (Some((f1, epoch)), Some(params)) => {
            model.params = params;
            (epoch, Some(f1))
        }
        _ => (records.len(), None),
    };
    let report = TrainReport {
        epochs: records,
        best_epoch,
        best_validation_f1,
        seed,
        config_hash: config.hash(),
        stopped_early,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Patience-based stopping on a validation score. Only strict
/// improvements reset the counter, so ties keep the earlier epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    /// Best score and its epoch.
    pub best: Option<(f64, usize)>,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records `score` for `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|(b, _)| score > b);
        if improved {
            self.best = Some((score, epoch));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        (improved, self.since_best >= self.patience)
    }
}

/// Replacement slots for wrong templates: the utterance's domain slots, or
/// every slot when the domain has fewer than two.
fn wrong_template_candidates(model: &CoachModel, domain: &str) -> Vec<usize> {
    let own = model.candidate_slots(domain);
    if own.len() >= 2 {
        own
    } else {
        (0..model.registry.len()).collect()
    }
}

/// One trained and evaluated (target, shots, seed) combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub target: String,
    pub shots: usize,
    pub seed: u64,
    pub report: F1Report,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub cells: Vec<MatrixCell>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn cell_text(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_owned(), crate::eval::percent)
}

impl MatrixReport {
    fn targets(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.cells
            .iter()
            .filter(|c| seen.insert(c.target.clone()))
            .map(|c| c.target.clone())
            .collect()
    }

    fn shots(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.cells.iter().map(|c| c.shots).collect();
        set.into_iter().collect()
    }

    /// Test F1 averaged over seeds, per target domain and shot count.
    pub fn mean_f1(&self, target: &str, shots: usize) -> Option<f64> {
        let xs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.target == target && c.shots == shots)
            .map(|c| c.report.f1)
            .collect();
        mean(&xs)
    }

    /// Rows: target domains then `Average F1`; columns: shot counts.
    pub fn table1_tsv(&self) -> String {
        let shots = self.shots();
        let mut out = String::from("target");
        for s in &shots {
            out.push_str(&format!("\t{s}-shot"));
        }
        out.push('\n');
        let mut columns: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for t in self.targets() {
            out.push_str(&t);
            for &s in &shots {
                let v = self.mean_f1(&t, s);
                if let Some(v) = v {
                    columns.entry(s).or_default().push(v);
                }
                out.push('\t');
                out.push_str(&cell_text(v));
            }
            out.push('\n');
        }
        out.push_str("Average F1");
        for s in &shots {
            out.push('\t');
            out.push_str(&cell_text(columns.get(s).and_then(|v| mean(v))));
        }
        out.push('\n');
        out
    }

    /// Rows: shot counts; columns: unseen and seen F1 averaged over target
    /// domains (each domain first averaged over seeds). Domains whose test
    /// split lacks a part do not contribute to that column.
    pub fn table2_tsv(&self) -> String {
        let mut out = String::from("shots\tunseen\tseen\n");
        for s in self.shots() {
            let mut unseen = Vec::new();
            let mut seen = Vec::new();
            for t in self.targets() {
                let cells: Vec<&MatrixCell> = self.cells.iter().filter(|c| c.target == t && c.shots == s).collect();
                let u: Vec<f64> = cells.iter().filter_map(|c| c.report.unseen.as_ref().map(|r| r.f1)).collect();
                let k: Vec<f64> = cells.iter().filter_map(|c| c.report.seen.as_ref().map(|r| r.f1)).collect();
                unseen.extend(mean(&u));
                seen.extend(mean(&k));
            }
            out.push_str(&format!("{s}\t{}\t{}\n", cell_text(mean(&unseen)), cell_text(mean(&seen))));
        }
        out
    }
}

/// Trains and tests every target domain × shot count × seed.
///
/// `make_table` builds fresh embeddings for each run from its split and
/// seed. Each cell uses `base` with the seed replaced.
pub fn run_experiment_matrix(
    corpora: &BTreeMap<String, Vec<LabeledUtterance>>,
    registry: &SlotRegistry,
    shots: &[usize],
    seeds: &[u64],
    validation_size: usize,
    base: &TrainConfig,
    make_table: &dyn Fn(&SplitSpec, u64) -> Result<EmbeddingTable>,
) -> Result<MatrixReport> {
    if corpora.len() < 2 {
        return Err(Error::Split(format!("need at least 2 domains, got {}", corpora.len())));
    }
    let mut cells = Vec::new();
    for target in corpora.keys() {
        for &k in shots {
            for &seed in seeds {
                let split = leave_one_out_split(corpora, target, validation_size, seed)?;
                let split = few_shot_augment(&split, k, seed)?;
                let config = TrainConfig { seed, ..base.clone() };
                let table = make_table(&split, seed)?;
                let (model, report) = train(&split, registry, table, &config)?;
                let (f1, _) = evaluate_with_breakdown(&model, &split.test, Some(&split.source_slot_names))?;
                cells.push(MatrixCell {
                    target: target.clone(),
                    shots: k,
                    seed,
                    report: f1,
                    best_epoch: report.best_epoch,
                });
            }
        }
    }
    Ok(MatrixReport { cells })
}
