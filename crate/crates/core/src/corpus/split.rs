use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::LabeledUtterance;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const DEFAULT_VALIDATION_SIZE: usize = 500;

/// Train/validation/test partition for one held-out target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<LabeledUtterance>,
    pub validation: Vec<LabeledUtterance>,
    pub test: Vec<LabeledUtterance>,
    pub target_domain: String,
    /// Slots occurring in the source-domain training data.
    pub source_slot_names: BTreeSet<String>,
    pub seed: u64,
    pub few_shot: usize,
    pub warnings: Vec<String>,
}

/// Holds out `target`: every other domain trains, the target is shuffled
/// with `seed` and cut into `val_size` validation items and a test remainder.
///
/// A target corpus smaller than `val_size` keeps one item for test and puts
/// the rest in validation, with a warning.
pub fn leave_one_out_split(
    corpora: &BTreeMap<String, Vec<LabeledUtterance>>,
    target: &str,
    val_size: usize,
    seed: u64,
) -> Result<SplitSpec> {
    if corpora.len() < 2 {
        return Err(Error::Split(format!("need at least 2 domains, got {}", corpora.len())));
    }
    let target_items = corpora
        .get(target)
        .ok_or_else(|| Error::Split(format!("target domain {target:?} not in corpora")))?;

    let train: Vec<LabeledUtterance> = corpora
        .iter()
        .filter(|(d, _)| d.as_str() != target)
        .flat_map(|(_, u)| u.iter().cloned())
        .collect();
    let source_slot_names = train.iter().flat_map(LabeledUtterance::slot_names).collect();

    let mut warnings = Vec::new();
    let mut val_count = val_size;
    if target_items.len() < val_size {
        val_count = target_items.len().saturating_sub(1);
        warnings.push(format!(
            "target {target:?} has {} utterances, fewer than the validation size {val_size}; using {val_count} for validation",
            target_items.len()
        ));
    }

    let mut order: Vec<usize> = (0..target_items.len()).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Split));
    let validation = order[..val_count].iter().map(|&i| target_items[i].clone()).collect();
    let test = order[val_count..].iter().map(|&i| target_items[i].clone()).collect();

    Ok(SplitSpec {
        train,
        validation,
        test,
        target_domain: target.to_owned(),
        source_slot_names,
        seed,
        few_shot: 0,
        warnings,
    })
}

/// Moves `k` seeded-random test utterances into training. Validation is
/// untouched and `source_slot_names` keeps describing the source domains.
pub fn few_shot_augment(split: &SplitSpec, k: usize, seed: u64) -> Result<SplitSpec> {
    if k > split.test.len() {
        return Err(Error::Split(format!(
            "few-shot size {k} exceeds the {} test utterances",
            split.test.len()
        )));
    }
    let mut out = split.clone();
    if k == 0 {
        return Ok(out);
    }
    let picked = sample(&mut stream_rng(seed, Stream::FewShot), split.test.len(), k).into_vec();
    let chosen: BTreeSet<usize> = picked.iter().copied().collect();
    out.train.extend(picked.iter().map(|&i| split.test[i].clone()));
    out.test = split
        .test
        .iter()
        .enumerate()
        .filter(|(i, _)| !chosen.contains(i))
        .map(|(_, u)| u.clone())
        .collect();
    out.few_shot += k;
    Ok(out)
}

/// Splits `test` into utterances containing at least one slot absent from
/// `source_slot_names` (unseen) and the rest (seen). Order is preserved.
pub fn unseen_seen_partition(
    test: &[LabeledUtterance],
    source_slot_names: &BTreeSet<String>,
) -> (Vec<LabeledUtterance>, Vec<LabeledUtterance>) {
    test.iter()
        .cloned()
        .partition(|u| u.slot_names().iter().any(|s| !source_slot_names.contains(s)))
}
