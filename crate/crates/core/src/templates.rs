//! Delexicalized templates and the template regularization loss.
//!
//! The correct template of an utterance replaces each entity span by one
//! `<slot>` token. Wrong templates swap those tokens for other slots. The
//! regularizer pulls the utterance representation toward the correct
//! template's representation and pushes it away from the wrong ones:
//!
//! ```text
//! loss = MSE(Rᵘ, Rʳ) + β · Σ_w max(0, margin − MSE(Rᵘ, Rʷ)) / 2
//! ```
//!
//! Without a margin the repulsion term is the unbounded `−β · Σ_w MSE / 2`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledUtterance, SlotRegistry, SlotSpan};
use crate::error::{Error, Result};
use crate::model::CoachModel;
use crate::numerics::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateToken {
    Word(String),
    /// Registry index of a slot label.
    Slot(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Template(pub Vec<TemplateToken>);

impl Template {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Positions holding slot labels.
    pub fn slot_positions(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t, TemplateToken::Slot(_)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Surface form, slot labels written as `<name>`.
    pub fn render(&self, registry: &SlotRegistry) -> Vec<String> {
        self.0
            .iter()
            .map(|t| match t {
                TemplateToken::Word(w) => w.clone(),
                TemplateToken::Slot(i) => format!("<{}>", registry.slots()[*i].name),
            })
            .collect()
    }
}

/// How wrong templates perturb the correct one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrongTemplateMode {
    /// Every slot label is replaced.
    #[default]
    AllPositions,
    /// One randomly chosen slot label is replaced.
    OnePosition,
}

/// Templates of one utterance. `wrong` is empty when the utterance has no
/// entities.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub correct: Template,
    pub wrong: Vec<Template>,
    /// Template position of each gold span.
    pub provenance: Vec<(usize, SlotSpan)>,
}

/// Replaces every entity span by a single slot-label token.
pub fn make_correct_template(utt: &LabeledUtterance, registry: &SlotRegistry) -> Result<(Template, Vec<(usize, SlotSpan)>)> {
    let spans = utt.spans();
    let mut out = Vec::with_capacity(utt.len());
    let mut provenance = Vec::with_capacity(spans.len());
    let mut t = 0;
    let mut next = spans.iter().peekable();
    while t < utt.len() {
        match next.peek() {
            Some(s) if s.start == t => {
                let idx = registry
                    .index_of(&s.slot)
                    .ok_or_else(|| Error::Registry(format!("unknown slot {:?}", s.slot)))?;
                provenance.push((out.len(), (*s).clone()));
                out.push(TemplateToken::Slot(idx));
                t = s.end + 1;
                next.next();
            }
            _ => {
                out.push(TemplateToken::Word(utt.tokens[t].clone()));
                t += 1;
            }
        }
    }
    Ok((Template(out), provenance))
}

/// Two wrong templates. Each replaced label is drawn uniformly from
/// `candidates` minus the label it replaces.
pub fn make_wrong_templates<R: Rng + ?Sized>(
    correct: &Template,
    candidates: &[usize],
    mode: WrongTemplateMode,
    rng: &mut R,
) -> Result<[Template; 2]> {
    let positions = correct.slot_positions();
    if positions.is_empty() {
        return Err(Error::Invalid("template has no slot labels".into()));
    }
    let draw = |rng: &mut R| -> Result<Template> {
        let mut out = correct.clone();
        let chosen: Vec<usize> = match mode {
            WrongTemplateMode::AllPositions => positions.clone(),
            WrongTemplateMode::OnePosition => vec![*positions.choose(rng).expect("non-empty")],
        };
        for p in chosen {
            let TemplateToken::Slot(gold) = out.0[p] else { unreachable!() };
            let others: Vec<usize> = candidates.iter().copied().filter(|&c| c != gold).collect();
            let pick = others
                .choose(rng)
                .ok_or_else(|| Error::Registry("wrong templates need at least two slot types".into()))?;
            out.0[p] = TemplateToken::Slot(*pick);
        }
        Ok(out)
    };
    let a = draw(rng)?;
    let b = draw(rng)?;
    Ok([a, b])
}

/// Correct and wrong templates for `utt`. Replacement slots come from
/// `candidates`; an utterance without entities yields an empty set.
pub fn make_template_set<R: Rng + ?Sized>(
    utt: &LabeledUtterance,
    registry: &SlotRegistry,
    candidates: &[usize],
    mode: WrongTemplateMode,
    rng: &mut R,
) -> Result<TemplateSet> {
    let (correct, provenance) = make_correct_template(utt, registry)?;
    if provenance.is_empty() {
        return Ok(TemplateSet {
            correct,
            wrong: Vec::new(),
            provenance,
        });
    }
    let wrong = make_wrong_templates(&correct, candidates, mode, rng)?.to_vec();
    Ok(TemplateSet {
        correct,
        wrong,
        provenance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegLossConfig {
    pub beta: f64,
    /// Epochs during which only the template side learns from this loss.
    pub warmup_epochs: usize,
    /// Repulsion clamp. `None` gives the unbounded form.
    pub margin: Option<f64>,
    pub wrong_mode: WrongTemplateMode,
}

impl Default for RegLossConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            warmup_epochs: 3,
            margin: Some(2.0),
            wrong_mode: WrongTemplateMode::AllPositions,
        }
    }
}

impl RegLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if let Some(m) = self.margin {
            if !m.is_finite() {
                return Err(Error::Config("margin must be finite; omit it for the unbounded form".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Utterance side held constant.
    Warmup,
    Joint,
}

/// Plain-value regularization loss for precomputed representations.
pub fn template_reg_value(ru: &[f64], rr: &[f64], rw: [&[f64]; 2], cfg: &RegLossConfig) -> f64 {
    let mse = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    let attract = mse(ru, rr);
    let repel: f64 = rw
        .iter()
        .map(|w| {
            let d = mse(ru, w);
            match cfg.margin {
                Some(m) => (m - d).max(0.0),
                None => -d,
            }
        })
        .sum();
    attract + cfg.beta * repel / 2.0
}

/// Graph form of [`template_reg_value`].
pub fn template_reg_loss(g: &mut Graph<'_>, ru: Var, rr: Var, rw: [Var; 2], cfg: &RegLossConfig) -> Result<Var> {
    let attract = g.mse(ru, rr)?;
    let mut repel: Option<Var> = None;
    for w in rw {
        let d = g.mse(ru, w)?;
        let term = match cfg.margin {
            Some(m) => {
                let neg = g.scale(d, -1.0);
                let shifted = g.add_const(neg, m);
                g.relu(shifted)
            }
            None => g.scale(d, -1.0),
        };
        repel = Some(match repel {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let repel = g.scale(repel.expect("two wrong templates"), cfg.beta / 2.0);
    g.add(attract, repel)
}

/// Template representation `1 × 2h`: embeddings (slot labels from the
/// label-embedding table), template BiLSTM, attention pooling. With
/// `freeze_shared` the word embeddings are treated as constants.
pub fn template_representation(
    model: &CoachModel,
    g: &mut Graph<'_>,
    template: &Template,
    freeze_shared: bool,
) -> Result<Var> {
    if template.is_empty() {
        return Err(Error::Invalid("empty template".into()));
    }
    let mut words = Vec::new();
    let mut labels = Vec::new();
    // Row of each position in [words; labels].
    let mut order = Vec::with_capacity(template.len());
    for t in &template.0 {
        match t {
            TemplateToken::Word(w) => {
                order.push((false, words.len()));
                words.push(w.clone());
            }
            TemplateToken::Slot(i) => {
                order.push((true, labels.len()));
                labels.push(*i);
            }
        }
    }
    let mut parts = Vec::new();
    if !words.is_empty() {
        let mut e = model.embeddings.embed(g, &words)?;
        if freeze_shared {
            e = g.detach(e);
        }
        parts.push(e);
    }
    if !labels.is_empty() {
        let table = g.param(model.label_embeddings);
        parts.push(g.combine_rows(table, labels.iter().map(|&i| vec![(i, 1.0)]).collect())?);
    }
    let stacked = g.concat_rows(&parts)?;
    let x = g.combine_rows(
        stacked,
        order
            .iter()
            .map(|&(is_label, k)| vec![(if is_label { words.len() + k } else { k }, 1.0)])
            .collect(),
    )?;
    let h = model.template_encoder.forward(g, x)?;
    model.template_attention.pool(g, h)
}

/// Utterance representation `1 × 2h` from encoder states. In warmup the
/// states are detached so no gradient reaches the utterance side.
pub fn utterance_representation(model: &CoachModel, g: &mut Graph<'_>, hiddens: Var, phase: Phase) -> Result<Var> {
    match phase {
        Phase::Warmup => {
            let h = g.detach(hiddens);
            let r = model.utterance_attention.pool(g, h)?;
            Ok(g.detach(r))
        }
        Phase::Joint => model.utterance_attention.pool(g, hiddens),
    }
}

/// Regularization loss for one utterance, or `None` without entities.
pub fn regularization_loss(
    model: &CoachModel,
    g: &mut Graph<'_>,
    hiddens: Var,
    set: &TemplateSet,
    cfg: &RegLossConfig,
    phase: Phase,
) -> Result<Option<Var>> {
    if set.wrong.len() != 2 {
        return Ok(None);
    }
    let freeze = phase == Phase::Warmup;
    let ru = utterance_representation(model, g, hiddens, phase)?;
    let rr = template_representation(model, g, &set.correct, freeze)?;
    let w0 = template_representation(model, g, &set.wrong[0], freeze)?;
    let w1 = template_representation(model, g, &set.wrong[1], freeze)?;
    template_reg_loss(g, ru, rr, [w0, w1], cfg).map(Some)
}

/// `(MSE(Rᵘ, Rʳ), min_w MSE(Rᵘ, Rʷ))` for one utterance under the current
/// parameters, or `None` without entities.
pub fn template_distances(model: &CoachModel, utt: &LabeledUtterance, set: &TemplateSet) -> Result<Option<(f64, f64)>> {
    if set.wrong.len() != 2 {
        return Ok(None);
    }
    let mut g = Graph::new(&model.params);
    let h = model.encode(&mut g, &utt.tokens)?;
    let ru = utterance_representation(model, &mut g, h, Phase::Joint)?;
    let dist = |g: &mut Graph<'_>, t: &Template| -> Result<f64> {
        let r = template_representation(model, g, t, false)?;
        let d = g.mse(ru, r)?;
        Ok(g.scalar(d))
    };
    let correct = dist(&mut g, &set.correct)?;
    let a = dist(&mut g, &set.wrong[0])?;
    let b = dist(&mut g, &set.wrong[1])?;
    Ok(Some((correct, a.min(b))))
}
