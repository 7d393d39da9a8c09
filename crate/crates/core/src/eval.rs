//! Span-level precision, recall and F1 with conlleval semantics.
//!
//! A predicted span counts only if its start, end and slot type all match a
//! gold span. Counts are micro-averaged over every utterance. An undefined
//! ratio (0/0) is 0.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::bio::spans;
use crate::corpus::unseen_seen_partition;
use crate::corpus::LabeledUtterance;
use crate::error::{Error, Result};
use crate::layers::CoarseSequence;
use crate::model::CoachModel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl SpanCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, other: &SpanCounts) {
        self.gold += other.gold;
        self.predicted += other.predicted;
        self.correct += other.correct;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Scores in `[0, 1]`; use [`percent`] for the ×100 two-decimal form.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: SpanCounts,
    pub per_type: BTreeMap<String, SpanCounts>,
    /// Present when the breakdown was requested and the part is non-empty.
    pub unseen: Option<Box<F1Report>>,
    pub seen: Option<Box<F1Report>>,
}

impl F1Report {
    fn from_counts(counts: SpanCounts, per_type: BTreeMap<String, SpanCounts>) -> Self {
        Self {
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            counts,
            per_type,
            unseen: None,
            seen: None,
        }
    }

    /// Structured text: overall line, breakdown lines, one line per type.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, name: &str, r: &F1Report| {
            let _ = writeln!(
                s,
                "{name}\tprecision={}\trecall={}\tf1={}\tgold={}\tpredicted={}\tcorrect={}",
                percent(r.precision),
                percent(r.recall),
                percent(r.f1),
                r.counts.gold,
                r.counts.predicted,
                r.counts.correct
            );
        };
        line(&mut s, "overall", self);
        for (name, part) in [("unseen", &self.unseen), ("seen", &self.seen)] {
            match part {
                Some(r) => line(&mut s, name, r),
                None if self.unseen.is_some() || self.seen.is_some() => {
                    let _ = writeln!(s, "{name}\tempty");
                }
                None => {}
            }
        }
        for (slot, c) in &self.per_type {
            let _ = writeln!(
                s,
                "type:{slot}\tf1={}\tgold={}\tpredicted={}\tcorrect={}",
                percent(c.f1()),
                c.gold,
                c.predicted,
                c.correct
            );
        }
        s
    }
}

/// `x` in `[0, 1]` as a percentage with two decimals.
pub fn percent(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

/// Exact-match span F1 over aligned tag sequences.
pub fn span_f1<P, G>(pred: &[P], gold: &[G]) -> Result<F1Report>
where
    P: AsRef<[String]>,
    G: AsRef<[String]>,
{
    if pred.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "{} predicted sequences for {} gold sequences",
            pred.len(),
            gold.len()
        )));
    }
    let mut total = SpanCounts::default();
    let mut per_type: BTreeMap<String, SpanCounts> = BTreeMap::new();
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        let (p, g) = (p.as_ref(), g.as_ref());
        if p.len() != g.len() {
            return Err(Error::Invalid(format!(
                "utterance {i}: {} predicted tags for {} tokens",
                p.len(),
                g.len()
            )));
        }
        let ps = spans(p);
        let gs = spans(g);
        let gold_set: HashSet<_> = gs.iter().collect();
        for s in &gs {
            per_type.entry(s.slot.clone()).or_default().gold += 1;
        }
        for s in &ps {
            let c = per_type.entry(s.slot.clone()).or_default();
            c.predicted += 1;
            if gold_set.contains(s) {
                c.correct += 1;
                total.correct += 1;
            }
        }
        total.gold += gs.len();
        total.predicted += ps.len();
    }
    Ok(F1Report::from_counts(total, per_type))
}

/// Span F1 of predictions against `test`, with seen/unseen sub-reports
/// when `source_slot_names` is given.
pub fn score_with_breakdown(
    predictions: &[Vec<String>],
    test: &[LabeledUtterance],
    source_slot_names: Option<&BTreeSet<String>>,
) -> Result<F1Report> {
    let gold: Vec<&Vec<String>> = test.iter().map(|u| &u.labels).collect();
    let mut report = span_f1(predictions, &gold)?;
    if let Some(source) = source_slot_names {
        type Part<'a> = (Vec<&'a Vec<String>>, Vec<&'a Vec<String>>);
        let mut parts: [Part; 2] = Default::default();
        for (p, u) in predictions.iter().zip(test) {
            let k = usize::from(!is_unseen(u, source));
            parts[k].0.push(p);
            parts[k].1.push(&u.labels);
        }
        let sub = |(p, g): &Part| -> Result<Option<Box<F1Report>>> {
            if p.is_empty() {
                return Ok(None);
            }
            Ok(Some(Box::new(span_f1(p, g)?)))
        };
        report.unseen = sub(&parts[0])?;
        report.seen = sub(&parts[1])?;
    }
    Ok(report)
}

/// Same rule as [`unseen_seen_partition`].
fn is_unseen(u: &LabeledUtterance, source: &BTreeSet<String>) -> bool {
    let (unseen, _) = unseen_seen_partition(std::slice::from_ref(u), source);
    !unseen.is_empty()
}

/// Runs the model on `test` (each utterance restricted to its domain's
/// slots) and scores it, with the seen/unseen breakdown when
/// `source_slot_names` is given.
pub fn evaluate_with_breakdown(
    model: &CoachModel,
    test: &[LabeledUtterance],
    source_slot_names: Option<&BTreeSet<String>>,
) -> Result<(F1Report, Vec<Vec<String>>)> {
    let predictions = model.predict_corpus(test)?;
    let report = score_with_breakdown(&predictions, test, source_slot_names)?;
    Ok((report, predictions))
}

/// F1 of step-1 tagging alone: spans compared on boundaries only.
pub fn coarse_f1(pred: &[CoarseSequence], gold: &[CoarseSequence]) -> Result<F1Report> {
    let p: Vec<Vec<String>> = pred.iter().map(|s| s.to_tags("E")).collect();
    let g: Vec<Vec<String>> = gold.iter().map(|s| s.to_tags("E")).collect();
    span_f1(&p, &g)
}

/// Sums counts across reports, e.g. separately scored partitions.
pub fn merge_counts<'a>(reports: impl IntoIterator<Item = &'a F1Report>) -> SpanCounts {
    let mut total = SpanCounts::default();
    for r in reports {
        total.add(&r.counts);
    }
    total
}
