//! Seeded one-step transformations of MCQA items.
//!
//! Every non-identity transformation starts from a shuffle; label
//! randomization and the "None of the others" variants are applied on top of
//! a shuffled item.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mcqa::{positional_label, CanonicalRecord, Language, McqaItem, OptionEntry};
use crate::rng::{derive_seed, Xoshiro256StarStar};

pub const SHUFFLE_STAGE: &str = "shuffle";
pub const LABELS_STAGE: &str = "labels";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    None,
    Shuffle,
    Random,
    AddNoto,
    ReplaceNoto,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::None,
        TransformKind::Shuffle,
        TransformKind::Random,
        TransformKind::AddNoto,
        TransformKind::ReplaceNoto,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::None => "none",
            TransformKind::Shuffle => "shuffle",
            TransformKind::Random => "random",
            TransformKind::AddNoto => "add_noto",
            TransformKind::ReplaceNoto => "replace_noto",
        }
    }

    /// Name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            TransformKind::None => "None",
            TransformKind::Shuffle => "Shuffle",
            TransformKind::Random => "Random",
            TransformKind::AddNoto => "AddNoto",
            TransformKind::ReplaceNoto => "ReplaceNoto",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown one-step transform {s:?}"))
    }
}

/// Language-specific "None of the others" strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NotoStrings {
    pub en: String,
    pub es: String,
}

impl Default for NotoStrings {
    fn default() -> Self {
        Self {
            en: "None of the others".to_string(),
            es: "Ninguna de las demás".to_string(),
        }
    }
}

impl NotoStrings {
    pub fn text(&self, language: Language) -> &str {
        match language {
            Language::En => &self.en,
            Language::Es => &self.es,
        }
    }
}

/// Where AddNoto inserts the extra option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotoPlacement {
    #[default]
    Last,
    First,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    pub noto: NotoStrings,
    pub add_noto_placement: NotoPlacement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// `permutation[old] = new` over the base item's option indices.
    pub permutation: Vec<usize>,
    /// Positional label after shuffling mapped to the presented label;
    /// absent when labels are the canonical A, B, C, ...
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_map: Option<BTreeMap<char, char>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noto_position: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noto_text: Option<String>,
    /// Shuffle seed (0 for the identity transformation).
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformedItem {
    pub base_id: String,
    pub dataset: String,
    pub language: Language,
    pub question: String,
    pub kind: TransformKind,
    pub presented_options: Vec<OptionEntry>,
    pub gold_label: char,
    pub provenance: Provenance,
}

impl TransformedItem {
    pub fn labels(&self) -> Vec<char> {
        self.presented_options.iter().map(|o| o.label).collect()
    }

    pub fn gold_position(&self) -> usize {
        self.presented_options
            .iter()
            .position(|o| o.label == self.gold_label)
            .expect("gold label is presented")
    }

    pub fn gold_text(&self) -> &str {
        &self.presented_options[self.gold_position()].text
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PerturbError {
    #[error("{transform} requires a shuffled item, got {found}")]
    RequiresShuffle {
        transform: TransformKind,
        found: TransformKind,
    },
    #[error("item {item_id}: an option already reads {noto:?}")]
    NotoCollision { item_id: String, noto: String },
    #[error("item {item_id}: no free label left for an extra option")]
    NoFreeLabel { item_id: String },
}

fn identity_presentation(item: &McqaItem, kind: TransformKind, seed: u64) -> TransformedItem {
    TransformedItem {
        base_id: item.id.clone(),
        dataset: item.dataset.clone(),
        language: item.language,
        question: item.question.clone(),
        kind,
        presented_options: item
            .options
            .iter()
            .enumerate()
            .map(|(i, o)| OptionEntry::new(positional_label(i), o.text.clone()))
            .collect(),
        gold_label: positional_label(item.gold_index),
        provenance: Provenance {
            permutation: (0..item.options.len()).collect(),
            label_map: None,
            noto_position: None,
            noto_text: None,
            seed,
            label_seed: None,
        },
    }
}

/// Unperturbed presentation with canonical labels.
pub fn identity(item: &McqaItem) -> TransformedItem {
    identity_presentation(item, TransformKind::None, 0)
}

pub fn shuffle(item: &McqaItem, seed: u64) -> TransformedItem {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let order = rng.shuffled_indices(item.options.len());
    let mut permutation = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        permutation[old] = new;
    }
    let presented_options = order
        .iter()
        .enumerate()
        .map(|(new, &old)| OptionEntry::new(positional_label(new), item.options[old].text.clone()))
        .collect();
    let mut out = identity_presentation(item, TransformKind::Shuffle, seed);
    out.presented_options = presented_options;
    out.gold_label = positional_label(permutation[item.gold_index]);
    out.provenance.permutation = permutation;
    out
}

fn require_shuffled(t: &TransformedItem, transform: TransformKind) -> Result<(), PerturbError> {
    if t.kind == TransformKind::Shuffle {
        Ok(())
    } else {
        Err(PerturbError::RequiresShuffle {
            transform,
            found: t.kind,
        })
    }
}

/// True when the letters run alphabetically up or down by one at every step.
pub fn is_sequential(labels: &[char]) -> bool {
    if labels.len() < 2 {
        return false;
    }
    let ascending = labels.windows(2).all(|w| w[1] as u32 == w[0] as u32 + 1);
    let descending = labels.windows(2).all(|w| w[0] as u32 == w[1] as u32 + 1);
    ascending || descending
}

fn is_canonical_prefix(labels: &[char]) -> bool {
    labels
        .iter()
        .enumerate()
        .all(|(i, &c)| c == positional_label(i))
}

/// Draws `count` distinct uppercase letters, resampling until the sequence is
/// neither an alphabetical run nor the canonical prefix.
pub fn sample_labels(count: usize, seed: u64) -> Vec<char> {
    assert!((2..=26).contains(&count), "label count {count} out of range");
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    loop {
        let mut alphabet: Vec<char> = (b'A'..=b'Z').map(char::from).collect();
        for i in 0..count {
            let j = i + rng.below((26 - i) as u64) as usize;
            alphabet.swap(i, j);
        }
        let drawn = &alphabet[..count];
        if !is_sequential(drawn) && !is_canonical_prefix(drawn) {
            return drawn.to_vec();
        }
    }
}

/// Replaces presented labels position by position, keeping option order.
pub fn relabel(t: &TransformedItem, labels: &[char]) -> TransformedItem {
    assert_eq!(labels.len(), t.presented_options.len());
    let label_map: BTreeMap<char, char> = t
        .presented_options
        .iter()
        .zip(labels)
        .map(|(o, &l)| (o.label, l))
        .collect();
    let mut out = t.clone();
    for (opt, &label) in out.presented_options.iter_mut().zip(labels) {
        opt.label = label;
    }
    out.gold_label = label_map[&t.gold_label];
    out.provenance.label_map = Some(label_map);
    out.kind = TransformKind::Random;
    out
}

pub fn randomize_labels(t: &TransformedItem, seed: u64) -> Result<TransformedItem, PerturbError> {
    require_shuffled(t, TransformKind::Random)?;
    let labels = sample_labels(t.presented_options.len(), seed);
    let mut out = relabel(t, &labels);
    out.provenance.label_seed = Some(seed);
    Ok(out)
}

fn check_noto_collision(t: &TransformedItem, noto: &str) -> Result<(), PerturbError> {
    if t.presented_options.iter().any(|o| o.text.trim() == noto.trim()) {
        return Err(PerturbError::NotoCollision {
            item_id: t.base_id.clone(),
            noto: noto.to_string(),
        });
    }
    Ok(())
}

pub fn add_noto(
    t: &TransformedItem,
    noto: &str,
    placement: NotoPlacement,
) -> Result<TransformedItem, PerturbError> {
    require_shuffled(t, TransformKind::AddNoto)?;
    check_noto_collision(t, noto)?;
    let k = t.presented_options.len();
    if k >= 26 {
        return Err(PerturbError::NoFreeLabel {
            item_id: t.base_id.clone(),
        });
    }
    let mut texts: Vec<String> = t.presented_options.iter().map(|o| o.text.clone()).collect();
    let mut gold_position = t.gold_position();
    let noto_position = match placement {
        NotoPlacement::Last => k,
        NotoPlacement::First => {
            gold_position += 1;
            0
        }
    };
    texts.insert(noto_position, noto.to_string());
    let mut out = t.clone();
    out.presented_options = texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| OptionEntry::new(positional_label(i), text))
        .collect();
    out.gold_label = positional_label(gold_position);
    out.kind = TransformKind::AddNoto;
    out.provenance.noto_position = Some(noto_position);
    out.provenance.noto_text = Some(noto.to_string());
    Ok(out)
}

pub fn replace_noto(t: &TransformedItem, noto: &str) -> Result<TransformedItem, PerturbError> {
    require_shuffled(t, TransformKind::ReplaceNoto)?;
    check_noto_collision(t, noto)?;
    let position = t.gold_position();
    let mut out = t.clone();
    out.presented_options[position].text = noto.to_string();
    out.kind = TransformKind::ReplaceNoto;
    out.provenance.noto_position = Some(position);
    out.provenance.noto_text = Some(noto.to_string());
    Ok(out)
}

/// Applies a one-step transformation with seeds derived from
/// `(global_seed, item id, run_index)`.
pub fn apply_one_step(
    kind: TransformKind,
    item: &McqaItem,
    global_seed: u64,
    run_index: u32,
    config: &PerturbConfig,
) -> Result<TransformedItem, PerturbError> {
    apply_one_step_seeded(
        kind,
        item,
        derive_seed(global_seed, &item.id, run_index, SHUFFLE_STAGE),
        derive_seed(global_seed, &item.id, run_index, LABELS_STAGE),
        config,
    )
}

/// Applies a one-step transformation with explicit shuffle and label seeds.
pub fn apply_one_step_seeded(
    kind: TransformKind,
    item: &McqaItem,
    shuffle_seed: u64,
    label_seed: u64,
    config: &PerturbConfig,
) -> Result<TransformedItem, PerturbError> {
    if kind == TransformKind::None {
        return Ok(identity(item));
    }
    let shuffled = shuffle(item, shuffle_seed);
    let noto = config.noto.text(item.language);
    match kind {
        TransformKind::None => unreachable!(),
        TransformKind::Shuffle => Ok(shuffled),
        TransformKind::Random => randomize_labels(&shuffled, label_seed),
        TransformKind::AddNoto => add_noto(&shuffled, noto, config.add_noto_placement),
        TransformKind::ReplaceNoto => replace_noto(&shuffled, noto),
    }
}

/// Transformed dataset record: the canonical record plus the presentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformedRecord {
    #[serde(flatten)]
    pub canonical: CanonicalRecord,
    pub kind: TransformKind,
    pub presented: Vec<OptionEntry>,
    pub gold_label: char,
    pub provenance: Provenance,
}

impl TransformedRecord {
    pub fn new(item: &McqaItem, t: &TransformedItem) -> Self {
        Self {
            canonical: CanonicalRecord::from(item),
            kind: t.kind,
            presented: t.presented_options.clone(),
            gold_label: t.gold_label,
            provenance: t.provenance.clone(),
        }
    }
}

fn sorted_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vec<&'a str> {
    let mut v: Vec<&str> = texts.into_iter().collect();
    v.sort_unstable();
    v
}

/// Checks every structural invariant of a transformed item against its base
/// item. Returns human-readable descriptions of the violations.
pub fn check_transformed(base: &McqaItem, t: &TransformedItem, noto: &str) -> Vec<String> {
    let mut problems = Vec::new();
    let labels = t.labels();
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != labels.len() {
        problems.push(format!("presented labels not distinct: {labels:?}"));
    }
    let gold_hits = labels.iter().filter(|&&l| l == t.gold_label).count();
    if gold_hits != 1 {
        problems.push(format!("gold label {} presented {gold_hits} times", t.gold_label));
        return problems;
    }

    let k = base.options.len();
    let mut seen = vec![false; k];
    if t.provenance.permutation.len() != k
        || t.provenance.permutation.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true))
    {
        problems.push(format!("permutation {:?} is not a bijection", t.provenance.permutation));
    }

    let base_texts = base.options.iter().map(|o| o.text.as_str());
    let presented = sorted_texts(t.presented_options.iter().map(|o| o.text.as_str()));
    let expected = match t.kind {
        TransformKind::None | TransformKind::Shuffle | TransformKind::Random => sorted_texts(base_texts),
        TransformKind::AddNoto => sorted_texts(base_texts.chain(std::iter::once(noto))),
        TransformKind::ReplaceNoto => sorted_texts(
            base_texts
                .enumerate()
                .filter(|(i, _)| *i != base.gold_index)
                .map(|(_, s)| s)
                .chain(std::iter::once(noto)),
        ),
    };
    if presented != expected {
        problems.push("option text multiset not preserved".to_string());
    }

    match t.kind {
        TransformKind::ReplaceNoto => {
            if t.gold_text() != noto {
                problems.push("ReplaceNoto gold option is not the NOTO option".to_string());
            }
            if t.presented_options.iter().any(|o| o.text == base.gold_text()) {
                problems.push("ReplaceNoto left the original gold text presented".to_string());
            }
        }
        _ => {
            if t.gold_text() != base.gold_text() {
                problems.push("gold option text changed".to_string());
            }
        }
    }

    if let Some(pos) = t.provenance.noto_position {
        if t.presented_options.get(pos).map(|o| o.text.as_str()) != t.provenance.noto_text.as_deref() {
            problems.push(format!("noto_position {pos} does not hold the NOTO text"));
        }
    }
    if matches!(t.kind, TransformKind::Shuffle | TransformKind::Random | TransformKind::ReplaceNoto)
        && t.presented_options.len() != k
    {
        problems.push("option count changed".to_string());
    }
    if t.kind == TransformKind::AddNoto && t.presented_options.len() != k + 1 {
        problems.push("AddNoto must add exactly one option".to_string());
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcqa::{Language, Split};

    fn item(texts: &[&str], gold: usize) -> McqaItem {
        McqaItem::with_texts("q1", "medqa", Split::Test, Language::En, "Q?", texts, gold)
    }

    fn four() -> McqaItem {
        item(&["aspirin", "heparin", "warfarin", "insulin"], 1)
    }

    #[test]
    fn single_option_shuffle_is_identity() {
        let t = shuffle(&item(&["only"], 0), 1234);
        assert_eq!(t.provenance.permutation, vec![0]);
        assert_eq!(t.gold_label, 'A');
    }

    #[test]
    fn shuffle_keeps_gold_text() {
        for seed in 0..200 {
            let t = shuffle(&four(), seed);
            assert_eq!(t.gold_text(), "heparin");
        }
    }

    #[test]
    fn shuffle_seed_42_fixture() {
        // presentation order [3, 1, 0, 2] from the reference generator
        let t = shuffle(&four(), 42);
        let texts: Vec<_> = t.presented_options.iter().map(|o| o.text.as_str()).collect();
        assert_eq!(texts, vec!["insulin", "heparin", "aspirin", "warfarin"]);
        assert_eq!(t.provenance.permutation, vec![2, 1, 3, 0]);
        assert_eq!(t.gold_label, 'B');
        assert_eq!(t.labels(), vec!['A', 'B', 'C', 'D']);
        assert_eq!(t.provenance.seed, 42);
    }

    #[test]
    fn relabel_example_mqfy() {
        let base = four();
        let mut t = identity(&base);
        t.kind = TransformKind::Shuffle;
        t.gold_label = 'C';
        let r = relabel(&t, &['M', 'Q', 'F', 'Y']);
        assert_eq!(r.gold_label, 'F');
        assert_eq!(r.labels(), vec!['M', 'Q', 'F', 'Y']);
        let before: Vec<_> = t.presented_options.iter().map(|o| &o.text).collect();
        let after: Vec<_> = r.presented_options.iter().map(|o| &o.text).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn sequential_runs_rejected() {
        assert!(is_sequential(&['B', 'C', 'D', 'E']));
        assert!(is_sequential(&['E', 'D', 'C', 'B']));
        assert!(!is_sequential(&['M', 'Q', 'F', 'Y']));
        assert!(is_canonical_prefix(&['A', 'B', 'C']));
        assert_eq!(sample_labels(4, 42), vec!['C', 'D', 'T', 'N']);
        for seed in 0..2000 {
            let l = sample_labels(3, seed);
            assert!(!is_sequential(&l) && !is_canonical_prefix(&l));
        }
    }

    #[test]
    fn randomize_requires_shuffle() {
        let t = identity(&four());
        assert_eq!(
            randomize_labels(&t, 1).unwrap_err(),
            PerturbError::RequiresShuffle {
                transform: TransformKind::Random,
                found: TransformKind::None
            }
        );
    }

    #[test]
    fn add_noto_appends_last() {
        let mut t = identity(&four());
        t.kind = TransformKind::Shuffle;
        let a = add_noto(&t, "None of the others", NotoPlacement::Last).unwrap();
        assert_eq!(a.labels(), vec!['A', 'B', 'C', 'D', 'E']);
        assert_eq!(a.presented_options[4].text, "None of the others");
        assert_eq!(a.gold_label, 'B');
        assert_eq!(a.provenance.noto_position, Some(4));
        assert!(check_transformed(&four(), &a, "None of the others").is_empty());
    }

    #[test]
    fn add_noto_first_placement_shifts_gold() {
        let mut t = identity(&four());
        t.kind = TransformKind::Shuffle;
        let a = add_noto(&t, "None of the others", NotoPlacement::First).unwrap();
        assert_eq!(a.presented_options[0].text, "None of the others");
        assert_eq!(a.gold_label, 'C');
        assert_eq!(a.gold_text(), "heparin");
    }

    #[test]
    fn spanish_noto_string() {
        let cfg = PerturbConfig::default();
        assert_eq!(cfg.noto.text(Language::Es), "Ninguna de las demás");
        assert_eq!(cfg.noto.text(Language::En), "None of the others");
        let mut es = four();
        es.language = Language::Es;
        let t = apply_one_step(TransformKind::AddNoto, &es, 3, 0, &cfg).unwrap();
        assert_eq!(t.presented_options.last().unwrap().text, "Ninguna de las demás");
    }

    #[test]
    fn replace_noto_in_place() {
        let base = item(&["x", "gold", "y", "z"], 1);
        let mut t = identity(&base);
        t.kind = TransformKind::Shuffle;
        let r = replace_noto(&t, "None of the others").unwrap();
        let got: Vec<_> = r.presented_options.iter().map(|o| (o.label, o.text.as_str())).collect();
        assert_eq!(
            got,
            vec![('A', "x"), ('B', "None of the others"), ('C', "y"), ('D', "z")]
        );
        assert_eq!(r.gold_label, 'B');
        assert_eq!(r.provenance.noto_position, Some(1));
    }

    #[test]
    fn noto_collision_is_error() {
        let base = item(&["a", "None of the others", "c"], 0);
        let mut t = identity(&base);
        t.kind = TransformKind::Shuffle;
        assert!(matches!(
            add_noto(&t, "None of the others", NotoPlacement::Last),
            Err(PerturbError::NotoCollision { .. })
        ));
        assert!(matches!(
            replace_noto(&t, "None of the others"),
            Err(PerturbError::NotoCollision { .. })
        ));
    }

    #[test]
    fn none_kind_is_identity() {
        let t = apply_one_step(TransformKind::None, &four(), 1, 2, &PerturbConfig::default()).unwrap();
        assert_eq!(t.labels(), vec!['A', 'B', 'C', 'D']);
        assert_eq!(t.gold_label, 'B');
        assert_eq!(t.presented_options[0].text, "aspirin");
    }

    #[test]
    fn random_composes_fixtures() {
        // derive_seed(7,"q1",0,"shuffle") gives order [3,2,0,1];
        // derive_seed(7,"q1",0,"labels") gives labels E,L,W,U.
        let t = apply_one_step(TransformKind::Random, &four(), 7, 0, &PerturbConfig::default()).unwrap();
        let got: Vec<_> = t.presented_options.iter().map(|o| (o.label, o.text.as_str())).collect();
        assert_eq!(
            got,
            vec![('E', "insulin"), ('L', "warfarin"), ('W', "aspirin"), ('U', "heparin")]
        );
        assert_eq!(t.gold_label, 'U');
    }
}
