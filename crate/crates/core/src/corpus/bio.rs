//! BIO tag parsing, repair and span extraction.

use serde::{Deserialize, Serialize};

/// A parsed slot tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> Tag<'a> {
    pub fn parse(tag: &'a str) -> Option<Self> {
        if tag == "O" {
            return Some(Tag::Outside);
        }
        let (prefix, slot) = tag.split_once('-')?;
        if slot.is_empty() {
            return None;
        }
        match prefix {
            "B" => Some(Tag::Begin(slot)),
            "I" => Some(Tag::Inside(slot)),
            _ => None,
        }
    }

    pub fn slot(self) -> Option<&'a str> {
        match self {
            Tag::Outside => None,
            Tag::Begin(s) | Tag::Inside(s) => Some(s),
        }
    }
}

/// A typed span over token indices `start..=end`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotSpan {
    pub start: usize,
    pub end: usize,
    pub slot: String,
}

/// Rewrites every `I-X` that does not continue a `B-X`/`I-X` run into `B-X`.
/// Returns the number of rewritten tags.
pub fn repair(labels: &mut [String]) -> usize {
    let mut repaired = 0;
    let mut prev: Option<String> = None;
    for label in labels.iter_mut() {
        let fix = match Tag::parse(label) {
            Some(Tag::Inside(slot)) if prev.as_deref() != Some(slot) => Some(format!("B-{slot}")),
            _ => None,
        };
        if let Some(fixed) = fix {
            *label = fixed;
            repaired += 1;
        }
        prev = Tag::parse(label).and_then(Tag::slot).map(str::to_owned);
    }
    repaired
}

/// True when every `I-X` continues a run of type `X`.
pub fn is_well_formed<S: AsRef<str>>(labels: &[S]) -> bool {
    let mut prev: Option<&str> = None;
    for label in labels {
        let Some(tag) = Tag::parse(label.as_ref()) else {
            return false;
        };
        if let Tag::Inside(slot) = tag {
            if prev != Some(slot) {
                return false;
            }
        }
        prev = tag.slot();
    }
    true
}

/// Chunks with conlleval semantics: a chunk starts at `B-X`, or at `I-X`
/// whose predecessor is not of type `X`; it ends before `O`, `B-*`, or a
/// change of type. Unparseable tags are treated as `O`.
pub fn spans<S: AsRef<str>>(labels: &[S]) -> Vec<SlotSpan> {
    let mut out: Vec<SlotSpan> = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, label) in labels.iter().enumerate() {
        let tag = Tag::parse(label.as_ref()).unwrap_or(Tag::Outside);
        let continues = matches!((tag, open), (Tag::Inside(s), Some((_, o))) if s == o);
        if continues {
            continue;
        }
        if let Some((start, slot)) = open.take() {
            out.push(SlotSpan {
                start,
                end: i - 1,
                slot: slot.to_owned(),
            });
        }
        if let Some(slot) = tag.slot() {
            open = Some((i, slot));
        }
    }
    if let Some((start, slot)) = open {
        out.push(SlotSpan {
            start,
            end: labels.len() - 1,
            slot: slot.to_owned(),
        });
    }
    out
}

/// Renders typed spans as a BIO sequence of length `n`.
pub fn tags_from_spans(n: usize, spans: &[SlotSpan]) -> Vec<String> {
    let mut tags = vec!["O".to_owned(); n];
    for s in spans {
        tags[s.start] = format!("B-{}", s.slot);
        for t in tags.iter_mut().take(s.end + 1).skip(s.start + 1) {
            *t = format!("I-{}", s.slot);
        }
    }
    tags
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn orphan_inside_becomes_begin() {
        let mut labels = v(&["O", "I-genre"]);
        assert_eq!(repair(&mut labels), 1);
        assert_eq!(labels, v(&["O", "B-genre"]));
    }

    #[test]
    fn type_change_inside_is_repaired() {
        let mut labels = v(&["B-a", "I-b", "I-b"]);
        assert_eq!(repair(&mut labels), 1);
        assert_eq!(labels, v(&["B-a", "B-b", "I-b"]));
        assert!(is_well_formed(&labels));
    }

    #[test]
    fn spans_follow_conlleval_chunking() {
        let labels = v(&["B-a", "I-a", "O", "I-b", "B-b", "I-a"]);
        let got: Vec<_> = spans(&labels).into_iter().map(|s| (s.start, s.end, s.slot)).collect();
        assert_eq!(
            got,
            vec![
                (0, 1, "a".to_owned()),
                (3, 3, "b".to_owned()),
                (4, 4, "b".to_owned()),
                (5, 5, "a".to_owned())
            ]
        );
    }

    #[test]
    fn tags_from_spans_inverts_spans() {
        let labels = v(&["O", "B-x", "I-x", "B-y", "O"]);
        assert_eq!(tags_from_spans(5, &spans(&labels)), labels);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert_eq!(Tag::parse("X-foo"), None);
        assert_eq!(Tag::parse("B-"), None);
        assert_eq!(Tag::parse("B-a-b"), Some(Tag::Begin("a-b")));
    }
}
