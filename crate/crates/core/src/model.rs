//! The two-step tagger.
//!
//! Step 1 encodes the utterance with a BiLSTM and labels every token with
//! O, B or I. Step 2 takes every detected span, encodes it into the
//! embedding space and scores it against the slot description matrix with
//! plain dot products. Each span gets exactly one slot, so every token ends
//! up with exactly one tag.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledUtterance, SlotRegistry, SlotSpan};
use crate::embeddings::{EmbeddingLayer, EmbeddingTable, EmbeddingVocab};
use crate::error::{Error, Result};
use crate::layers::{crf_viterbi, Attention, BiLstm, Coarse, CoarseSequence, CrfLayer, Linear};
use crate::numerics::{read_checkpoint, write_checkpoint, Graph, ParamStore, Tensor, Var};
use crate::rng::{stream_rng, Stream};

/// How a span's hidden states become a single vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityEncoderMode {
    /// One-layer BiLSTM over the span; final forward ⊕ final backward state.
    #[default]
    Bilstm,
    /// Sum of the span rows, then a linear map without bias.
    Sum,
}

impl std::str::FromStr for EntityEncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm" => Ok(Self::Bilstm),
            "sum" => Ok(Self::Sum),
            other => Err(Error::Config(format!("unknown entity encoder {other:?} (expected bilstm or sum)"))),
        }
    }
}

/// Step-1 output layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoarseMode {
    #[default]
    Crf,
    /// Independent per-token softmax; decoded by per-token argmax.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub entity_encoder: EntityEncoderMode,
    pub coarse: CoarseMode,
    pub hard_constraints: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 200,
            layers: 2,
            dropout: 0.3,
            entity_encoder: EntityEncoderMode::Bilstm,
            coarse: CoarseMode::Crf,
            hard_constraints: true,
        }
    }
}

/// A span over tokens `start..=end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Maximal `B I*` runs, left to right. A malformed sequence (an `I` with no
/// open run) is repaired by treating that `I` as `B`; the second value counts
/// such repairs.
pub fn extract_spans(coarse: &CoarseSequence) -> (Vec<EntitySpan>, usize) {
    let mut spans: Vec<EntitySpan> = Vec::new();
    let mut open: Option<usize> = None;
    let mut repaired = 0;
    for (t, &c) in coarse.0.iter().enumerate() {
        match c {
            Coarse::O => {
                if let Some(s) = open.take() {
                    spans.push(EntitySpan { start: s, end: t - 1 });
                }
            }
            Coarse::B => {
                if let Some(s) = open.replace(t) {
                    spans.push(EntitySpan { start: s, end: t - 1 });
                }
            }
            Coarse::I => {
                if open.is_none() {
                    repaired += 1;
                    open = Some(t);
                }
            }
        }
    }
    if let Some(s) = open {
        spans.push(EntitySpan {
            start: s,
            end: coarse.len() - 1,
        });
    }
    (spans, repaired)
}

/// Slot logits `M_desc · r`, one per description row.
pub fn predict_slot_type(r: &[f64], desc: &Tensor) -> Result<Vec<f64>> {
    if desc.cols() != r.len() {
        return Err(Error::Shape {
            op: "slot_logits",
            left: desc.shape().to_vec(),
            right: vec![r.len()],
        });
    }
    Ok((0..desc.rows())
        .map(|k| desc.row_slice(k).iter().zip(r).map(|(a, b)| a * b).sum())
        .collect())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub enum EntityEncoder {
    Bilstm(BiLstm),
    Sum(Linear),
}

/// Parameters and structure of the full model.
#[derive(Clone, Debug)]
pub struct CoachModel {
    pub config: ModelConfig,
    pub registry: SlotRegistry,
    pub params: ParamStore,
    pub embeddings: EmbeddingLayer,
    pub encoder: BiLstm,
    pub emissions: Linear,
    pub crf: CrfLayer,
    pub entity_encoder: EntityEncoder,
    pub utterance_attention: Attention,
    pub template_encoder: BiLstm,
    pub template_attention: Attention,
    /// One row per registry slot, used for `<slot>` tokens in templates.
    pub label_embeddings: crate::numerics::ParamId,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    registry: SlotRegistry,
    vocab: EmbeddingVocab,
    embeddings_trainable: bool,
    extra: serde_json::Value,
}

impl CoachModel {
    /// Builds a model whose weights are drawn from `seed`.
    pub fn new(config: ModelConfig, registry: SlotRegistry, table: EmbeddingTable, seed: u64) -> Result<Self> {
        if registry.is_empty() {
            return Err(Error::Registry("no slots registered".into()));
        }
        if config.hidden == 0 || config.layers == 0 {
            return Err(Error::Config("hidden size and layer count must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        let d = table.dim();
        if config.entity_encoder == EntityEncoderMode::Bilstm && !d.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "the bilstm entity encoder needs an even embedding dimension, got {d}"
            )));
        }
        let mut rng = stream_rng(seed, Stream::Init);
        let label_init = table.build_description_matrix(registry.slots())?;
        let mut params = ParamStore::new();
        let embeddings = table.into_layer(&mut params, "embed")?;
        let h = config.hidden;
        let encoder = BiLstm::new(&mut params, "encoder", d, h, config.layers, config.dropout, &mut rng)?;
        let emissions = Linear::new(&mut params, "emissions", 2 * h, 3, true, &mut rng)?;
        let crf = CrfLayer::new(&mut params, "crf", config.hard_constraints)?;
        let entity_encoder = match config.entity_encoder {
            EntityEncoderMode::Bilstm => {
                EntityEncoder::Bilstm(BiLstm::new(&mut params, "entity", 2 * h, d / 2, 1, 0.0, &mut rng)?)
            }
            EntityEncoderMode::Sum => EntityEncoder::Sum(Linear::new(&mut params, "entity", 2 * h, d, false, &mut rng)?),
        };
        let utterance_attention = Attention::new(&mut params, "utterance_attention", 2 * h, &mut rng)?;
        let template_encoder = BiLstm::new(&mut params, "template", d, h, config.layers, config.dropout, &mut rng)?;
        let template_attention = Attention::new(&mut params, "template_attention", 2 * h, &mut rng)?;
        let label_embeddings = params.add("label_embeddings", label_init, true)?;
        Ok(Self {
            config,
            registry,
            params,
            embeddings,
            encoder,
            emissions,
            crf,
            entity_encoder,
            utterance_attention,
            template_encoder,
            template_attention,
            label_embeddings,
        })
    }

    /// Embedding dimension `d_s`, shared by entity and description vectors.
    pub fn embedding_dim(&self) -> usize {
        self.embeddings.vocab.dim()
    }

    /// Encoder hidden states `n × 2h`.
    pub fn encode(&self, g: &mut Graph<'_>, tokens: &[String]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty utterance".into()));
        }
        let x = self.embeddings.embed(g, tokens)?;
        self.encoder.forward(g, x)
    }

    /// Step-1 scores `n × 3`.
    pub fn emission_scores(&self, g: &mut Graph<'_>, hiddens: Var) -> Result<Var> {
        self.emissions.forward(g, hiddens)
    }

    /// Step-1 loss: CRF sequence NLL, or summed per-token cross-entropy in
    /// softmax mode.
    pub fn step1_loss(&self, g: &mut Graph<'_>, emissions: Var, gold: &CoarseSequence) -> Result<Var> {
        match self.config.coarse {
            CoarseMode::Crf => self.crf.nll(g, emissions, gold),
            CoarseMode::Softmax => {
                let mut total: Option<Var> = None;
                for (t, c) in gold.0.iter().enumerate() {
                    let row = g.slice_rows(emissions, t, 1)?;
                    let ce = g.cross_entropy(row, c.index())?;
                    total = Some(match total {
                        Some(acc) => g.add(acc, ce)?,
                        None => ce,
                    });
                }
                total.ok_or_else(|| Error::Invalid("empty utterance".into()))
            }
        }
    }

    /// Decodes step-1 scores into a coarse sequence.
    pub fn decode(&self, emissions: &Tensor) -> CoarseSequence {
        match self.config.coarse {
            CoarseMode::Crf => crf_viterbi(emissions, &self.crf.scores(&self.params)),
            CoarseMode::Softmax => CoarseSequence(
                (0..emissions.rows())
                    .map(|t| Coarse::from_index(argmax(emissions.row_slice(t))))
                    .collect(),
            ),
        }
    }

    /// Entity representation `1 × d_s` for one span of `hiddens`.
    pub fn encode_entity(&self, g: &mut Graph<'_>, hiddens: Var, span: EntitySpan) -> Result<Var> {
        let n = g.value(hiddens).rows();
        if span.start > span.end || span.end >= n {
            return Err(Error::Invalid(format!(
                "span {}..={} outside an utterance of {n} tokens",
                span.start, span.end
            )));
        }
        let rows = g.slice_rows(hiddens, span.start, span.len())?;
        match &self.entity_encoder {
            EntityEncoder::Bilstm(lstm) => {
                let out = lstm.forward(g, rows)?;
                let half = lstm.hidden;
                let last = g.slice_rows(out, span.len() - 1, 1)?;
                let fwd = g.slice_cols(last, 0, half)?;
                let first = g.slice_rows(out, 0, 1)?;
                let bwd = g.slice_cols(first, half, half)?;
                g.concat_cols(&[fwd, bwd])
            }
            EntityEncoder::Sum(proj) => {
                let summed = g.combine_rows(rows, vec![(0..span.len()).map(|i| (i, 1.0)).collect()])?;
                proj.forward(g, summed)
            }
        }
    }

    /// Description matrix over `slots` (registry indices), `|slots| × d_s`.
    pub fn description_matrix(&self, g: &mut Graph<'_>, slots: &[usize]) -> Result<Var> {
        let all = self.registry.slots();
        let chosen: Vec<_> = slots.iter().map(|&i| &all[i]).collect();
        self.embeddings.describe(g, &chosen)
    }

    /// Plain description matrix over every registry slot.
    pub fn description_tensor(&self) -> Result<Tensor> {
        let all: Vec<usize> = (0..self.registry.len()).collect();
        let mut g = Graph::new(&self.params);
        let m = self.description_matrix(&mut g, &all)?;
        Ok(g.value(m).clone())
    }

    /// Mean cross-entropy of the slot logits over `entities`, each paired
    /// with the position of its gold slot in `desc`'s rows. `None` for zero
    /// entities.
    pub fn step2_loss(&self, g: &mut Graph<'_>, entities: &[(Var, usize)], desc: Var) -> Result<Option<Var>> {
        let n_s = g.value(desc).rows();
        let mut total: Option<Var> = None;
        for &(r, gold) in entities {
            if gold >= n_s {
                return Err(Error::Invalid(format!("gold slot {gold} out of range for {n_s} slots")));
            }
            let logits = g.matmul_nt(r, desc)?;
            let ce = g.cross_entropy(logits, gold)?;
            total = Some(match total {
                Some(acc) => g.add(acc, ce)?,
                None => ce,
            });
        }
        Ok(total.map(|t| g.scale(t, 1.0 / entities.len() as f64)))
    }

    /// Candidate slots for an utterance of `domain`: the domain's slots when
    /// the registry knows the domain, else every slot.
    pub fn candidate_slots(&self, domain: &str) -> Vec<usize> {
        match self.registry.domain_slots(domain) {
            Some(s) if !s.is_empty() => s.to_vec(),
            _ => (0..self.registry.len()).collect(),
        }
    }

    /// Step-1 and step-2 losses for one labeled utterance, using gold spans
    /// for step 2. Returns the encoder states too, for the regularizer.
    pub fn supervised_losses(&self, g: &mut Graph<'_>, utt: &LabeledUtterance) -> Result<SupervisedLosses> {
        let hiddens = self.encode(g, &utt.tokens)?;
        let em = self.emission_scores(g, hiddens)?;
        let gold = CoarseSequence::from_tags(&utt.labels);
        let step1 = self.step1_loss(g, em, &gold)?;

        let candidates = self.candidate_slots(&utt.domain);
        let spans = utt.spans();
        let step2 = if spans.is_empty() {
            None
        } else {
            let desc = self.description_matrix(g, &candidates)?;
            let mut entities = Vec::with_capacity(spans.len());
            for s in &spans {
                let idx = self
                    .registry
                    .index_of(&s.slot)
                    .ok_or_else(|| Error::Registry(format!("unknown slot {:?}", s.slot)))?;
                let pos = candidates.iter().position(|&c| c == idx).ok_or_else(|| {
                    Error::Registry(format!("slot {:?} is not registered for domain {:?}", s.slot, utt.domain))
                })?;
                let r = self.encode_entity(g, hiddens, EntitySpan { start: s.start, end: s.end })?;
                entities.push((r, pos));
            }
            self.step2_loss(g, &entities, desc)?
        };
        Ok(SupervisedLosses { hiddens, step1, step2 })
    }

    /// Coarse sequence from the step-1 decoder.
    pub fn tag_entities(&self, tokens: &[String]) -> Result<CoarseSequence> {
        let mut g = Graph::new(&self.params);
        let h = self.encode(&mut g, tokens)?;
        let em = self.emission_scores(&mut g, h)?;
        Ok(self.decode(g.value(em)))
    }

    /// Full prediction with slots restricted to `slots` (registry indices).
    /// `desc` is [`Self::description_tensor`], computed once per batch.
    pub fn predict_with(&self, desc: &Tensor, tokens: &[String], slots: &[usize]) -> Result<Prediction> {
        if slots.is_empty() {
            return Err(Error::Invalid("no candidate slots".into()));
        }
        if tokens.is_empty() {
            return Ok(Prediction::default());
        }
        let mut g = Graph::new(&self.params);
        let h = self.encode(&mut g, tokens)?;
        let em = self.emission_scores(&mut g, h)?;
        let coarse = self.decode(g.value(em));
        let (spans, repaired) = extract_spans(&coarse);
        let mut typed = Vec::with_capacity(spans.len());
        for span in spans {
            let r = self.encode_entity(&mut g, h, span)?;
            let logits = predict_slot_type(g.value(r).data(), desc)?;
            let masked: Vec<f64> = slots.iter().map(|&i| logits[i]).collect();
            let slot = slots[argmax(&masked)];
            typed.push(SlotSpan {
                start: span.start,
                end: span.end,
                slot: self.registry.slots()[slot].name.clone(),
            });
        }
        Ok(Prediction {
            tags: crate::corpus::bio::tags_from_spans(tokens.len(), &typed),
            coarse,
            repaired,
        })
    }

    /// BIO tags for `tokens`, slots restricted to `slots`.
    pub fn predict_full(&self, tokens: &[String], slots: &[usize]) -> Result<Vec<String>> {
        let desc = self.description_tensor()?;
        Ok(self.predict_with(&desc, tokens, slots)?.tags)
    }

    /// Predictions for many utterances, each restricted to its domain's
    /// slots. Runs in parallel; output order follows the input.
    pub fn predict_corpus(&self, utterances: &[LabeledUtterance]) -> Result<Vec<Vec<String>>> {
        use rayon::prelude::*;
        let desc = self.description_tensor()?;
        utterances
            .par_iter()
            .map(|u| Ok(self.predict_with(&desc, &u.tokens, &self.candidate_slots(&u.domain))?.tags))
            .collect()
    }

    /// Writes parameters and structure. `extra` is stored verbatim.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            registry: self.registry.clone(),
            vocab: self.embeddings.vocab.clone(),
            embeddings_trainable: self.params.get(self.embeddings.word).trainable,
            extra,
        };
        let json = serde_json::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_checkpoint(path, &json, &self.params)
    }

    /// Restores a model saved by [`Self::save`], with its `extra` value.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (json, tensors) = read_checkpoint(path)?;
        let mut meta: CheckpointMeta =
            serde_json::from_str(&json).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        meta.registry.reindex();
        meta.vocab.reindex();
        let v = &meta.vocab;
        let table = EmbeddingTable {
            word_vectors: Tensor::zeros(&[v.words().len(), v.word_dim]),
            char_ngram_vectors: Tensor::zeros(&[v.ngrams().len(), v.char_dim]),
            char_buckets: Tensor::zeros(&[v.n_buckets, v.char_dim]),
            vocab: meta.vocab,
            trainable: meta.embeddings_trainable,
        };
        let mut model = Self::new(meta.config, meta.registry, table, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (name, value) in tensors {
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name:?}")))?;
            let p = model.params.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok((model, meta.extra))
    }
}

/// Graph nodes produced by [`CoachModel::supervised_losses`].
#[derive(Clone, Copy, Debug)]
pub struct SupervisedLosses {
    pub hiddens: Var,
    pub step1: Var,
    /// `None` when the utterance has no entities.
    pub step2: Option<Var>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prediction {
    pub tags: Vec<String>,
    pub coarse: CoarseSequence,
    /// Malformed step-1 positions that were repaired (only possible with
    /// constraints off or in softmax mode).
    pub repaired: usize,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::SlotType;

    fn seq(s: &str) -> CoarseSequence {
        CoarseSequence(
            s.split_whitespace()
                .map(|c| match c {
                    "O" => Coarse::O,
                    "B" => Coarse::B,
                    _ => Coarse::I,
                })
                .collect(),
        )
    }

    fn span(start: usize, end: usize) -> EntitySpan {
        EntitySpan { start, end }
    }

    pub(crate) fn tiny_model(mode: EntityEncoderMode, seed: u64) -> CoachModel {
        let mut registry = SlotRegistry::new();
        registry.insert("music", SlotType::new("playlist", "playlist")).unwrap();
        registry.insert("music", SlotType::new("music_item", "music item")).unwrap();
        registry.insert("music", SlotType::new("artist", "artist name")).unwrap();
        let words = "can you put this tune onto latin dance cardio playlist music item artist name"
            .split(' ')
            .map(String::from);
        let mut rng = stream_rng(seed, Stream::Synthetic);
        let table = EmbeddingTable::random(words, 6, 4, 64, &mut rng).unwrap();
        let config = ModelConfig {
            hidden: 5,
            entity_encoder: mode,
            ..ModelConfig::default()
        };
        CoachModel::new(config, registry, table, seed).unwrap()
    }

    #[test]
    fn spans_follow_runs() {
        assert_eq!(extract_spans(&seq("O B I I O B")), (vec![span(1, 3), span(5, 5)], 0));
        assert_eq!(extract_spans(&seq("O O O")), (vec![], 0));
        assert_eq!(extract_spans(&seq("B")), (vec![span(0, 0)], 0));
        assert_eq!(extract_spans(&seq("B B I")), (vec![span(0, 0), span(1, 2)], 0));
    }

    #[test]
    fn malformed_runs_are_repaired_and_counted() {
        assert_eq!(extract_spans(&seq("I I O I")), (vec![span(0, 1), span(3, 3)], 2));
    }

    #[test]
    fn identity_description_returns_r() {
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(predict_slot_type(&[0.5, -2.0, 3.0], &eye).unwrap(), vec![0.5, -2.0, 3.0]);
        assert!(predict_slot_type(&[1.0], &eye).is_err());
    }

    #[test]
    fn zero_representation_picks_first_slot() {
        let desc = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let logits = predict_slot_type(&[0.0, 0.0], &desc).unwrap();
        assert_eq!(argmax(&logits), 0);
    }

    #[test]
    fn orthogonal_row_wins() {
        let desc = Tensor::matrix(3, 3, vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        for k in 0..3 {
            let r = desc.row_slice(k).to_vec();
            assert_eq!(argmax(&predict_slot_type(&r, &desc).unwrap()), k);
            let scaled: Vec<f64> = r.iter().map(|x| x * 7.5).collect();
            assert_eq!(argmax(&predict_slot_type(&scaled, &desc).unwrap()), k);
        }
    }

    #[test]
    fn entity_bilstm_output_has_embedding_dim() {
        let m = tiny_model(EntityEncoderMode::Bilstm, 1);
        let tokens: Vec<String> = "put this tune".split(' ').map(String::from).collect();
        let mut g = Graph::new(&m.params);
        let h = m.encode(&mut g, &tokens).unwrap();
        let r = m.encode_entity(&mut g, h, span(1, 2)).unwrap();
        assert_eq!(g.value(r).shape(), &[1, m.embedding_dim()]);
        assert!(m.encode_entity(&mut g, h, span(2, 3)).is_err());
    }

    #[test]
    fn single_token_sum_is_projection_of_that_row() {
        let m = tiny_model(EntityEncoderMode::Sum, 2);
        let tokens: Vec<String> = "put this tune".split(' ').map(String::from).collect();
        let mut g = Graph::new(&m.params);
        let h = m.encode(&mut g, &tokens).unwrap();
        let r = m.encode_entity(&mut g, h, span(1, 1)).unwrap();
        let EntityEncoder::Sum(proj) = &m.entity_encoder else { unreachable!() };
        let row = g.slice_rows(h, 1, 1).unwrap();
        let direct = proj.forward(&mut g, row).unwrap();
        assert_eq!(g.value(r), g.value(direct));
    }

    #[test]
    fn zero_entities_have_no_step2_loss() {
        let m = tiny_model(EntityEncoderMode::Bilstm, 3);
        let utt = LabeledUtterance::from_str_pairs("put this tune", "O O O", "music").unwrap();
        let mut g = Graph::new(&m.params);
        let l = m.supervised_losses(&mut g, &utt).unwrap();
        assert!(l.step2.is_none());
    }

    #[test]
    fn uniform_logits_cost_ln_n_per_entity() {
        let store = ParamStore::new();
        let m = tiny_model(EntityEncoderMode::Bilstm, 3);
        let mut g = Graph::new(&store);
        let desc = g.constant(Tensor::zeros(&[4, 2]));
        let r1 = g.constant(Tensor::row(vec![1.0, 2.0]));
        let r2 = g.constant(Tensor::row(vec![-3.0, 0.5]));
        let loss = m.step2_loss(&mut g, &[(r1, 0), (r2, 3)], desc).unwrap().unwrap();
        assert!((g.scalar(loss) - 4f64.ln()).abs() < 1e-12);
        assert!(m.step2_loss(&mut g, &[(r1, 4)], desc).is_err());
    }

    #[test]
    fn prediction_assigns_one_tag_per_token() {
        let m = tiny_model(EntityEncoderMode::Bilstm, 4);
        let tokens: Vec<String> = "can you put this tune onto latin dance cardio".split(' ').map(String::from).collect();
        let tags = m.predict_full(&tokens, &[0, 1, 2]).unwrap();
        assert_eq!(tags.len(), tokens.len());
        assert!(crate::corpus::bio::is_well_formed(&tags));
        let forced = m.predict_full(&tokens, &[2]).unwrap();
        assert!(forced.iter().all(|t| t == "O" || t.ends_with("-artist")));
        assert!(m.predict_full(&tokens, &[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let m = tiny_model(EntityEncoderMode::Sum, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        m.save(&path, serde_json::json!({"note": 1})).unwrap();
        let (back, extra) = CoachModel::load(&path).unwrap();
        assert_eq!(extra["note"], 1);
        assert_eq!(back.config, m.config);
        let tokens: Vec<String> = "put this tune onto latin".split(' ').map(String::from).collect();
        let a = m.tag_entities(&tokens).unwrap();
        let b = back.tag_entities(&tokens).unwrap();
        assert_eq!(a, b);
        for ((_, p), (_, q)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(p, q);
        }
    }
}
