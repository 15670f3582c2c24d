//! Toy ASR, sentence-level CER, quality tokens and training-set assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Error, Result};
use crate::metrics;
use crate::synthworld::{FeatureSequence, PhonemeSpan, World};
use crate::unitizer::{expand_units, ReducedUnits};
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsrConfig {
    /// Most frequent inventory entries considered per phoneme.
    pub decode_beam: usize,
    /// Cost per unit of edit distance between an inventory entry and the
    /// units it explains.
    pub substitution_cost: f64,
    /// A matched window may be this many units shorter or longer than the entry.
    pub length_slack: usize,
    /// Cost of leaving one unit unexplained.
    pub skip_cost: f64,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self {
            decode_beam: 4,
            substitution_cost: 2.0,
            length_slack: 1,
            skip_cost: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InventoryEntry {
    pub units: Vec<u32>,
    pub count: u64,
}

/// Unit-to-text decoder built from phoneme-aligned renderings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyAsr {
    /// Entries per phoneme, most frequent first.
    pub inventory: Vec<Vec<InventoryEntry>>,
    pub config: AsrConfig,
    /// Grapheme and its phoneme code, in grapheme order.
    pub codes: Vec<(char, Vec<u32>)>,
    lead_from: u32,
}

/// One rendering with its known phoneme boundaries.
#[derive(Clone, Debug)]
pub struct AsrTrainingPair<'a> {
    pub reduced: &'a ReducedUnits,
    pub alignment: &'a [PhonemeSpan],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Step {
    /// Inventory entry `rank` of `phoneme` matched against `len` units.
    Phoneme { phoneme: u32, rank: usize, len: usize },
    Skip,
}

impl ToyAsr {
    pub fn build<'a>(
        world: &World,
        pairs: impl IntoIterator<Item = AsrTrainingPair<'a>>,
        config: AsrConfig,
    ) -> Result<Self> {
        if config.decode_beam == 0 {
            return Err(config_err("decode_beam must be at least 1"));
        }
        let phonemes = world.g2p.phoneme_count();
        let mut counts: Vec<BTreeMap<Vec<u32>, u64>> = vec![BTreeMap::new(); phonemes];
        for pair in pairs {
            let frames = expand_units(pair.reduced)?;
            let span_total: usize = pair.alignment.iter().map(|s| s.frames).sum();
            if span_total != frames.len() {
                return Err(Error::AsrBuild(format!(
                    "alignment covers {span_total} frames but units cover {}",
                    frames.len()
                )));
            }
            let mut start = 0;
            for span in pair.alignment {
                let seg = ReducedUnits::from_units(&frames[start..start + span.frames]);
                start += span.frames;
                let slot = counts
                    .get_mut(span.rendered as usize)
                    .ok_or_else(|| Error::AsrBuild(format!("phoneme {} out of range", span.rendered)))?;
                *slot.entry(seg.units).or_insert(0) += 1;
            }
        }
        let mut inventory = Vec::with_capacity(phonemes);
        for (p, c) in counts.into_iter().enumerate() {
            if c.is_empty() {
                return Err(Error::AsrBuild(format!("phoneme {p} never observed")));
            }
            let mut entries: Vec<InventoryEntry> = c
                .into_iter()
                .map(|(units, count)| InventoryEntry { units, count })
                .collect();
            // Stable sort keeps lexicographic unit order among equal counts.
            entries.sort_by(|a, b| b.count.cmp(&a.count));
            inventory.push(entries);
        }
        let codes = world
            .graphemes()
            .iter()
            .enumerate()
            .map(|(g, &c)| (c, world.g2p.code(g).to_vec()))
            .collect();
        let lead_from = (0..phonemes as u32)
            .find(|&p| world.g2p.is_lead(p))
            .unwrap_or(phonemes as u32);
        Ok(Self {
            inventory,
            config,
            codes,
            lead_from,
        })
    }

    fn neg_log_prob(&self, phoneme: usize, rank: usize) -> f64 {
        let entries = &self.inventory[phoneme];
        let total: u64 = entries.iter().map(|e| e.count).sum();
        -((entries[rank].count as f64) / total as f64).ln()
    }

    fn step_cost(&self, units: &[u32], at: usize, step: Step) -> Option<(f64, usize)> {
        match step {
            Step::Skip => Some((self.config.skip_cost, 1)),
            Step::Phoneme { phoneme, rank, len } => {
                let e = &self.inventory[phoneme as usize][rank].units;
                let window = units.get(at..at + len)?;
                let edits = metrics::edit_distance(e, window);
                Some((
                    self.config.substitution_cost * edits as f64 + self.neg_log_prob(phoneme as usize, rank),
                    len,
                ))
            }
        }
    }

    fn steps(&self) -> Vec<Step> {
        let mut out = Vec::new();
        let slack = self.config.length_slack;
        for (p, entries) in self.inventory.iter().enumerate() {
            for (rank, e) in entries.iter().enumerate().take(self.config.decode_beam) {
                let lo = e.units.len().saturating_sub(slack).max(1);
                for len in lo..=e.units.len() + slack {
                    out.push(Step::Phoneme {
                        phoneme: p as u32,
                        rank,
                        len,
                    });
                }
            }
        }
        out.push(Step::Skip);
        out
    }

    /// Minimum-cost segmentation of a unit string into phonemes.
    ///
    /// Among equal-cost segmentations the lexicographically smallest step
    /// sequence wins, phonemes ordered by id and skips last.
    pub fn decode_phonemes(&self, r: &ReducedUnits) -> Vec<u32> {
        let units = &r.units;
        let n = units.len();
        let steps = self.steps();
        let mut cost_to_go = vec![f64::INFINITY; n + 1];
        cost_to_go[n] = 0.0;
        for i in (0..n).rev() {
            for &s in &steps {
                if let Some((c, len)) = self.step_cost(units, i, s) {
                    cost_to_go[i] = cost_to_go[i].min(c + cost_to_go[i + len]);
                }
            }
        }
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            let (step, len) = steps
                .iter()
                .find_map(|&s| {
                    let (c, len) = self.step_cost(units, i, s)?;
                    (c + cost_to_go[i + len] <= cost_to_go[i] + 1e-9).then_some((s, len))
                })
                .expect("skip keeps every suffix decodable");
            if let Step::Phoneme { phoneme, .. } = step {
                out.push(phoneme);
            }
            i += len;
        }
        out
    }

    pub fn phonemes_to_text(&self, phonemes: &[u32]) -> String {
        let mut out = String::new();
        let mut i = 0;
        while i < phonemes.len() {
            let len = if phonemes[i] >= self.lead_from { 2 } else { 1 };
            if i + len > phonemes.len() {
                break;
            }
            match self.codes.iter().find(|(_, code)| code.as_slice() == &phonemes[i..i + len]) {
                Some((c, _)) => {
                    out.push(*c);
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }

    pub fn decode(&self, r: &ReducedUnits) -> String {
        self.phonemes_to_text(&self.decode_phonemes(r))
    }
}

pub fn build_toy_asr<'a>(
    world: &World,
    pairs: impl IntoIterator<Item = AsrTrainingPair<'a>>,
    config: AsrConfig,
) -> Result<ToyAsr> {
    ToyAsr::build(world, pairs, config)
}

pub fn asr_decode(asr: &ToyAsr, r: &ReducedUnits) -> String {
    asr.decode(r)
}

/// Sentence-level CER per (utterance, system), stored as a fraction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CerTable {
    pub rows: BTreeMap<(String, String), f64>,
}

impl CerTable {
    pub fn utterances(&self) -> BTreeSet<&str> {
        self.rows.keys().map(|(u, _)| u.as_str()).collect()
    }

    pub fn systems(&self) -> BTreeSet<&str> {
        self.rows.keys().map(|(_, s)| s.as_str()).collect()
    }

    pub fn get(&self, utt: &str, system: &str) -> Option<f64> {
        self.rows.get(&(utt.to_owned(), system.to_owned())).copied()
    }

    pub fn mean_for(&self, system: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|((_, s), _)| s == system)
            .map(|(_, &v)| v)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("utt_id,system_id,cer\n");
        for ((u, s), v) in &self.rows {
            out.push_str(&format!("{u},{s},{v}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("utt_id,system_id,cer") {
            return Err(Error::Format("CER table: missing header".into()));
        }
        let mut table = CerTable::default();
        for (i, line) in lines.enumerate() {
            let bad = || Error::Format(format!("CER table line {}: `{line}`", i + 2));
            let mut parts = line.split(',');
            let (Some(u), Some(s), Some(v), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(bad());
            };
            let v: f64 = v.parse().map_err(|_| bad())?;
            table.rows.insert((u.to_string(), s.to_string()), v);
        }
        Ok(table)
    }

    /// Rows restricted to the given utterances and systems.
    pub fn restrict(&self, utts: &BTreeSet<String>, systems: &[String]) -> CerTable {
        CerTable {
            rows: self
                .rows
                .iter()
                .filter(|((u, s), _)| utts.contains(u) && systems.contains(s))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        }
    }
}

/// Per-system reduced units, keyed by utterance id.
pub type UnitCorpus = BTreeMap<String, ReducedUnits>;

pub fn compute_cer_table(
    asr: &ToyAsr,
    corpora: &BTreeMap<String, UnitCorpus>,
    refs: &BTreeMap<String, String>,
) -> Result<CerTable> {
    let mut table = CerTable::default();
    for (system, corpus) in corpora {
        for (utt, reference) in refs {
            let units = corpus
                .get(utt)
                .ok_or_else(|| data_err(format!("system {system} has no units for {utt}")))?;
            let hyp = asr.decode(units);
            table
                .rows
                .insert((utt.clone(), system.clone()), metrics::cer(&hyp, reference)?);
        }
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QualityToken {
    Y,
    N,
}

impl QualityToken {
    pub fn token_id(self, vocab: Vocab) -> u32 {
        match self {
            QualityToken::Y => vocab.yes(),
            QualityToken::N => vocab.no(),
        }
    }
}

pub type TokenAssignment = BTreeMap<(String, String), QualityToken>;

/// `Y` for every system whose CER equals the utterance's best CER, `N`
/// for the rest.
pub fn assign_quality_tokens(table: &CerTable) -> TokenAssignment {
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for ((u, _), &v) in &table.rows {
        let slot = best.entry(u.as_str()).or_insert(f64::INFINITY);
        if v < *slot {
            *slot = v;
        }
    }
    table
        .rows
        .iter()
        .map(|((u, s), &v)| {
            let tok = if v == best[u.as_str()] {
                QualityToken::Y
            } else {
                QualityToken::N
            };
            ((u.clone(), s.clone()), tok)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "systems", rename_all = "lowercase")]
pub enum DatasetMode {
    Single(String),
    Combined(Vec<String>),
    Multitask(Vec<String>),
}

impl DatasetMode {
    pub fn systems(&self) -> Vec<String> {
        match self {
            DatasetMode::Single(s) => vec![s.clone()],
            DatasetMode::Combined(v) | DatasetMode::Multitask(v) => v.clone(),
        }
    }

    /// Number of decoder branches a model for this mode needs.
    pub fn branch_count(&self) -> usize {
        match self {
            DatasetMode::Multitask(v) => v.len(),
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetMode::Single(_) => "single",
            DatasetMode::Combined(_) => "combined",
            DatasetMode::Multitask(_) => "multitask",
        }
    }
}

/// Source features with per-system quality tokens and reduced units.
#[derive(Clone, Debug)]
pub struct MultiTargetExample {
    pub utt_id: String,
    pub source: Arc<FeatureSequence>,
    pub targets: BTreeMap<String, (QualityToken, ReducedUnits)>,
}

/// One model training example: a source and one token sequence per branch
/// (without BOS/EOS).
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub utt_id: String,
    pub source: Arc<FeatureSequence>,
    pub targets: Vec<Vec<u32>>,
}

#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub mode: DatasetMode,
    /// Branch index to system id; one entry unless multitask.
    pub branches: Vec<String>,
    pub examples: Vec<TrainingExample>,
}

/// Everything dataset assembly reads.
pub struct DatasetInputs<'a> {
    pub utt_ids: &'a [String],
    pub sources: &'a BTreeMap<String, Arc<FeatureSequence>>,
    pub corpora: &'a BTreeMap<String, UnitCorpus>,
    pub tokens: &'a TokenAssignment,
    pub vocab: Vocab,
}

pub fn multi_target_examples(systems: &[String], inputs: &DatasetInputs<'_>) -> Result<Vec<MultiTargetExample>> {
    let mut out = Vec::with_capacity(inputs.utt_ids.len());
    for utt in inputs.utt_ids {
        let source = inputs
            .sources
            .get(utt)
            .ok_or_else(|| data_err(format!("no source features for {utt}")))?
            .clone();
        let mut targets = BTreeMap::new();
        for sys in systems {
            let units = lookup_units(inputs, sys, utt)?;
            let tok = *inputs
                .tokens
                .get(&(utt.clone(), sys.clone()))
                .ok_or_else(|| data_err(format!("no quality token for ({utt}, {sys})")))?;
            targets.insert(sys.clone(), (tok, units.clone()));
        }
        out.push(MultiTargetExample {
            utt_id: utt.clone(),
            source,
            targets,
        });
    }
    Ok(out)
}

fn lookup_units<'a>(inputs: &'a DatasetInputs<'_>, sys: &str, utt: &str) -> Result<&'a ReducedUnits> {
    inputs
        .corpora
        .get(sys)
        .ok_or_else(|| config_err(format!("unknown system `{sys}`")))?
        .get(utt)
        .ok_or_else(|| data_err(format!("system {sys} has no units for {utt}")))
}

pub fn build_dataset(mode: &DatasetMode, inputs: &DatasetInputs<'_>) -> Result<TrainingSet> {
    let systems = mode.systems();
    if systems.is_empty() {
        return Err(config_err("a dataset needs at least one system"));
    }
    for s in &systems {
        if !inputs.corpora.contains_key(s) {
            return Err(config_err(format!("unknown system `{s}`")));
        }
    }
    let source_of = |utt: &String| {
        inputs
            .sources
            .get(utt)
            .cloned()
            .ok_or_else(|| data_err(format!("no source features for {utt}")))
    };
    let mut examples = Vec::new();
    match mode {
        DatasetMode::Single(_) | DatasetMode::Combined(_) => {
            for sys in &systems {
                for utt in inputs.utt_ids {
                    examples.push(TrainingExample {
                        utt_id: utt.clone(),
                        source: source_of(utt)?,
                        targets: vec![lookup_units(inputs, sys, utt)?.units.clone()],
                    });
                }
            }
        }
        DatasetMode::Multitask(_) => {
            for ex in multi_target_examples(&systems, inputs)? {
                let targets = systems
                    .iter()
                    .map(|s| {
                        let (tok, units) = &ex.targets[s];
                        let mut seq = Vec::with_capacity(units.len() + 1);
                        seq.push(tok.token_id(inputs.vocab));
                        seq.extend_from_slice(&units.units);
                        seq
                    })
                    .collect();
                examples.push(TrainingExample {
                    utt_id: ex.utt_id,
                    source: ex.source,
                    targets,
                });
            }
        }
    }
    Ok(TrainingSet {
        mode: mode.clone(),
        branches: match mode {
            DatasetMode::Multitask(v) => v.clone(),
            _ => vec![systems.join("+")],
        },
        examples,
    })
}
