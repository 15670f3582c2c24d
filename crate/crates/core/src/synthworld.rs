//! Synthetic parallel corpus and simulated TTS channels.
//!
//! A [`World`] is derived from a [`ToyLanguageSpec`] and fixes everything
//! shared by all systems: the source-token embeddings, the bilingual
//! lexicon, the grapheme-to-phoneme code, the base phoneme templates and
//! the base phoneme durations. A [`TtsSystemSpec`] then describes how one
//! simulated TTS system departs from that shared base.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Result};
use crate::seeded;

/// Grapheme inventory. The target alphabet is a prefix of this string.
pub const GRAPHEMES: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

/// Scale of the additive noise applied to a frame hit by the vocoder.
const VOCODER_NOISE_SCALE: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyLanguageSpec {
    pub source_alphabet_size: usize,
    pub target_alphabet_size: usize,
    pub phoneme_inventory_size: usize,
    /// Inclusive bounds on the number of target graphemes per sentence.
    pub sentence_length_range: (usize, usize),
    /// (train, dev, test)
    pub corpus_sizes: (usize, usize, usize),
    pub master_seed: u64,
    pub feature_dim: usize,
    /// Inclusive bounds on how many frames each source token occupies.
    pub source_frames_per_token: (usize, usize),
    pub source_jitter: f64,
    pub target_jitter: f64,
    /// Inclusive bounds on the base duration (frames) of a phoneme.
    pub phoneme_duration_range: (usize, usize),
    /// Fraction of source tokens that swap places with their right neighbour
    /// when translated.
    pub reorder_fraction: f64,
}

impl Default for ToyLanguageSpec {
    fn default() -> Self {
        Self {
            source_alphabet_size: 30,
            target_alphabet_size: 30,
            phoneme_inventory_size: 12,
            sentence_length_range: (4, 8),
            corpus_sizes: (200, 20, 20),
            master_seed: 7,
            feature_dim: 16,
            source_frames_per_token: (2, 4),
            source_jitter: 0.3,
            target_jitter: 0.1,
            phoneme_duration_range: (3, 5),
            reorder_fraction: 0.25,
        }
    }
}

impl ToyLanguageSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("source_alphabet_size", self.source_alphabet_size),
            ("target_alphabet_size", self.target_alphabet_size),
            ("phoneme_inventory_size", self.phoneme_inventory_size),
            ("feature_dim", self.feature_dim),
            ("sentence_length_range.min", self.sentence_length_range.0),
            ("source_frames_per_token.min", self.source_frames_per_token.0),
            ("phoneme_duration_range.min", self.phoneme_duration_range.0),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(config_err(format!("{name} must be at least 1")));
            }
        }
        let (tr, dv, te) = self.corpus_sizes;
        if tr == 0 || dv == 0 || te == 0 {
            return Err(config_err("every corpus split needs at least one utterance"));
        }
        for (name, (lo, hi)) in [
            ("sentence_length_range", self.sentence_length_range),
            ("source_frames_per_token", self.source_frames_per_token),
            ("phoneme_duration_range", self.phoneme_duration_range),
        ] {
            if lo > hi {
                return Err(config_err(format!("{name}: min {lo} exceeds max {hi}")));
            }
        }
        if self.target_alphabet_size > GRAPHEMES.len() {
            return Err(config_err(format!(
                "target_alphabet_size {} exceeds the {}-grapheme inventory",
                self.target_alphabet_size,
                GRAPHEMES.len()
            )));
        }
        G2p::lead_count(self.phoneme_inventory_size, self.target_alphabet_size)?;
        if !(0.0..=1.0).contains(&self.reorder_fraction) {
            return Err(config_err("reorder_fraction must lie in [0,1]"));
        }
        if !(self.source_jitter >= 0.0 && self.target_jitter >= 0.0) {
            return Err(config_err("jitter must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(data_err(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelUtterance {
    pub utt_id: String,
    pub source_text: Vec<u32>,
    pub target_text: String,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationMode {
    /// Autoregressive analog: per-phoneme durations drawn at random.
    Stochastic,
    /// Non-autoregressive analog: fixed durations scaled by the speed factor.
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtsSystemSpec {
    pub system_id: String,
    pub lexicon_seed: u64,
    pub lexicon_agreement: f64,
    pub duration_mode: DurationMode,
    pub speed_factor: f64,
    pub vocoder_id: String,
    pub vocoder_noise_rate: f64,
    pub synthesis_error_rate: f64,
}

impl TtsSystemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.system_id.is_empty() || self.system_id.contains(char::is_whitespace) {
            return Err(config_err(format!("invalid system_id `{}`", self.system_id)));
        }
        if !(self.speed_factor > 0.0 && self.speed_factor.is_finite()) {
            return Err(config_err(format!(
                "{}: speed_factor must be positive",
                self.system_id
            )));
        }
        for (name, v) in [
            ("lexicon_agreement", self.lexicon_agreement),
            ("vocoder_noise_rate", self.vocoder_noise_rate),
            ("synthesis_error_rate", self.synthesis_error_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err(format!(
                    "{}: {name} must lie in [0,1], got {v}",
                    self.system_id
                )));
            }
        }
        Ok(())
    }
}

/// Frames of one utterance, either source speech or one system's rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Array2<f64>,
    pub utt_id: String,
    /// `"source"` or the rendering system's id.
    pub origin: String,
}

impl FeatureSequence {
    pub fn frame_count(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// One rendered phoneme of a synthesized utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSpan {
    /// Phoneme implied by the text.
    pub intended: u32,
    /// Phoneme whose template was actually rendered.
    pub rendered: u32,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub features: FeatureSequence,
    pub alignment: Vec<PhonemeSpan>,
    pub perturbed_frames: usize,
    pub corrupted: bool,
}

/// Prefix-free grapheme-to-phoneme code.
///
/// The last `lead` phonemes only ever open a two-phoneme code; every other
/// phoneme is a complete code on its own. Second positions never use a lead
/// phoneme, so decoding is a greedy left-to-right parse.
#[derive(Clone, Debug, PartialEq)]
pub struct G2p {
    codes: Vec<Vec<u32>>,
    phoneme_count: usize,
    lead: usize,
}

impl G2p {
    fn lead_count(phonemes: usize, graphemes: usize) -> Result<usize> {
        (0..phonemes)
            .find(|&lead| (phonemes - lead) + lead * (phonemes - lead) >= graphemes)
            .ok_or_else(|| {
                config_err(format!(
                    "{phonemes} phonemes cannot encode {graphemes} graphemes"
                ))
            })
    }

    fn new(phonemes: usize, graphemes: usize, seed: u64) -> Result<Self> {
        let lead = Self::lead_count(phonemes, graphemes)?;
        let plain = phonemes - lead;
        let mut all: Vec<Vec<u32>> = (0..plain as u32).map(|p| vec![p]).collect();
        for l in plain..phonemes {
            for s in 0..plain {
                all.push(vec![l as u32, s as u32]);
            }
        }
        // Short codes first so every single-phoneme code is used before pairs.
        let (mut singles, mut pairs): (Vec<_>, Vec<_>) = all.into_iter().partition(|c| c.len() == 1);
        let mut rng = seeded!(seed, "g2p");
        singles.shuffle(&mut rng);
        pairs.shuffle(&mut rng);
        singles.extend(pairs);
        singles.truncate(graphemes);
        singles.shuffle(&mut rng);
        Ok(Self {
            codes: singles,
            phoneme_count: phonemes,
            lead,
        })
    }

    pub fn code(&self, grapheme: usize) -> &[u32] {
        &self.codes[grapheme]
    }

    pub fn phoneme_count(&self) -> usize {
        self.phoneme_count
    }

    pub fn is_lead(&self, phoneme: u32) -> bool {
        (phoneme as usize) >= self.phoneme_count - self.lead
    }

    /// Parses a phoneme string back into grapheme indices, dropping codes
    /// that are incomplete or unassigned.
    pub fn parse(&self, phonemes: &[u32]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < phonemes.len() {
            let len = if self.is_lead(phonemes[i]) { 2 } else { 1 };
            if i + len > phonemes.len() {
                break;
            }
            let code = &phonemes[i..i + len];
            if let Some(g) = self.codes.iter().position(|c| c == code) {
                out.push(g);
                i += len;
            } else {
                i += 1;
            }
        }
        out
    }
}

/// The world shared by every simulated system.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: ToyLanguageSpec,
    graphemes: Vec<char>,
    translation: Vec<u32>,
    reorders: Vec<bool>,
    pub g2p: G2p,
    source_embeddings: Array2<f64>,
    /// `[phoneme] = [start, end]` templates.
    base_lexicon: Vec<[Vec<f64>; 2]>,
    base_durations: Vec<usize>,
}

/// A system's phoneme templates.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub templates: Vec<[Vec<f64>; 2]>,
}

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

impl World {
    pub fn new(spec: &ToyLanguageSpec) -> Result<Self> {
        spec.validate()?;
        let seed = spec.master_seed;
        let graphemes: Vec<char> = GRAPHEMES.chars().take(spec.target_alphabet_size).collect();

        let mut rng = seeded!(seed, "translation");
        let mut perm: Vec<u32> = (0..spec.target_alphabet_size as u32).collect();
        perm.shuffle(&mut rng);
        let translation = (0..spec.source_alphabet_size)
            .map(|s| perm[s % perm.len()])
            .collect();
        let reorders = (0..spec.source_alphabet_size)
            .map(|_| rng.gen::<f64>() < spec.reorder_fraction)
            .collect();

        let g2p = G2p::new(spec.phoneme_inventory_size, spec.target_alphabet_size, seed)?;

        let mut rng = seeded!(seed, "source-embeddings");
        let d = spec.feature_dim;
        let source_embeddings = Array2::from_shape_fn((spec.source_alphabet_size, d), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });

        let base_lexicon = (0..spec.phoneme_inventory_size)
            .map(|p| {
                let mut rng = seeded!(seed, "base-lexicon", p);
                [gaussian_vec(&mut rng, d, 1.0), gaussian_vec(&mut rng, d, 1.0)]
            })
            .collect();
        let mut rng = seeded!(seed, "durations");
        let (lo, hi) = spec.phoneme_duration_range;
        let base_durations = (0..spec.phoneme_inventory_size)
            .map(|_| rng.gen_range(lo..=hi))
            .collect();

        Ok(Self {
            spec: spec.clone(),
            graphemes,
            translation,
            reorders,
            g2p,
            source_embeddings,
            base_lexicon,
            base_durations,
        })
    }

    pub fn graphemes(&self) -> &[char] {
        &self.graphemes
    }

    pub fn grapheme_index(&self, c: char) -> Option<usize> {
        self.graphemes.iter().position(|&g| g == c)
    }

    /// Target grapheme string for a source token sequence.
    pub fn translate(&self, source: &[u32]) -> String {
        let mut out = String::with_capacity(source.len());
        let mut i = 0;
        while i < source.len() {
            let tok = source[i] as usize;
            if self.reorders[tok] && i + 1 < source.len() {
                out.push(self.graphemes[self.translation[source[i + 1] as usize] as usize]);
                out.push(self.graphemes[self.translation[tok] as usize]);
                i += 2;
            } else {
                out.push(self.graphemes[self.translation[tok] as usize]);
                i += 1;
            }
        }
        out
    }

    pub fn gen_parallel_corpus(&self) -> Vec<ParallelUtterance> {
        let (tr, dv, te) = self.spec.corpus_sizes;
        let (lo, hi) = self.spec.sentence_length_range;
        let mut out = Vec::with_capacity(tr + dv + te);
        for (split, n) in [(Split::Train, tr), (Split::Dev, dv), (Split::Test, te)] {
            for i in 0..n {
                let mut rng = seeded!(self.spec.master_seed, "utterance", split.as_str(), i);
                let len = rng.gen_range(lo..=hi);
                let source_text: Vec<u32> = (0..len)
                    .map(|_| rng.gen_range(0..self.spec.source_alphabet_size as u32))
                    .collect();
                let target_text = self.translate(&source_text);
                out.push(ParallelUtterance {
                    utt_id: format!("{}-{:05}", split.as_str(), i),
                    source_text,
                    target_text,
                    split,
                });
            }
        }
        out
    }

    pub fn render_source(&self, utt: &ParallelUtterance) -> Result<FeatureSequence> {
        if utt.source_text.is_empty() {
            return Err(data_err(format!("{}: empty source text", utt.utt_id)));
        }
        let d = self.spec.feature_dim;
        let (lo, hi) = self.spec.source_frames_per_token;
        let mut rng = seeded!(self.spec.master_seed, "source", &utt.utt_id);
        let mut rows: Vec<f64> = Vec::new();
        let mut count = 0;
        for &tok in &utt.source_text {
            if tok as usize >= self.spec.source_alphabet_size {
                return Err(data_err(format!(
                    "{}: source token {tok} outside alphabet of {}",
                    utt.utt_id, self.spec.source_alphabet_size
                )));
            }
            let reps = rng.gen_range(lo..=hi);
            let emb = self.source_embeddings.row(tok as usize);
            for _ in 0..reps {
                rows.extend(emb.iter().map(|&v| v + self.spec.source_jitter * rng.sample::<f64, _>(StandardNormal)));
                count += 1;
            }
        }
        Ok(FeatureSequence {
            frames: Array2::from_shape_vec((count, d), rows).expect("row-major frames"),
            utt_id: utt.utt_id.clone(),
            origin: "source".into(),
        })
    }

    /// Entries that are not copied from the base lexicon borrow another
    /// resampled phoneme's base template (a cycle), so the system renders those
    /// phonemes the way other systems render different ones. A lone resampled
    /// entry gets a fresh template.
    pub fn lexicon(&self, sys: &TtsSystemSpec) -> Lexicon {
        let seed = self.spec.master_seed;
        let d = self.spec.feature_dim;
        let n = self.spec.phoneme_inventory_size;
        let mut resampled: Vec<usize> = (0..n)
            .filter(|&p| seeded!(seed, "lexicon-agree", sys.lexicon_seed, p).gen::<f64>() >= sys.lexicon_agreement)
            .collect();
        let mut templates = self.base_lexicon.clone();
        match resampled.len() {
            0 => {}
            1 => {
                let p = resampled[0];
                let mut rng = seeded!(seed, "lexicon-resample", sys.lexicon_seed, p);
                templates[p] = [gaussian_vec(&mut rng, d, 1.0), gaussian_vec(&mut rng, d, 1.0)];
            }
            m => {
                resampled.shuffle(&mut seeded!(seed, "lexicon-cycle", sys.lexicon_seed));
                for i in 0..m {
                    templates[resampled[i]] = self.base_lexicon[resampled[(i + 1) % m]].clone();
                }
            }
        }
        Lexicon { templates }
    }

    pub fn phonemes_of(&self, utt: &ParallelUtterance) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for c in utt.target_text.chars() {
            let g = self.grapheme_index(c).ok_or_else(|| {
                data_err(format!("{}: unmapped grapheme `{c}`", utt.utt_id))
            })?;
            out.extend_from_slice(self.g2p.code(g));
        }
        Ok(out)
    }

    /// Phoneme duration in frames under a system's duration model.
    fn durations(&self, sys: &TtsSystemSpec, utt_id: &str, phonemes: &[u32]) -> Vec<usize> {
        let mut rng = seeded!(self.spec.master_seed, "durations", sys.lexicon_seed, utt_id);
        phonemes
            .iter()
            .map(|&p| {
                let base = self.base_durations[p as usize] as f64;
                let raw = match sys.duration_mode {
                    DurationMode::Deterministic => base,
                    DurationMode::Stochastic => (base + rng.gen_range(-1i32..=1) as f64).max(1.0),
                };
                round_half_up(raw / sys.speed_factor).max(1)
            })
            .collect()
    }

    pub fn synth_target(&self, utt: &ParallelUtterance, sys: &TtsSystemSpec) -> Result<SynthOutput> {
        self.synth_with_lexicon(utt, sys, &self.lexicon(sys))
    }

    /// [`World::synth_target`] with a precomputed lexicon.
    pub fn synth_with_lexicon(
        &self,
        utt: &ParallelUtterance,
        sys: &TtsSystemSpec,
        lexicon: &Lexicon,
    ) -> Result<SynthOutput> {
        let seed = self.spec.master_seed;
        let intended = self.phonemes_of(utt)?;
        if intended.is_empty() {
            return Err(data_err(format!("{}: empty target text", utt.utt_id)));
        }
        let durations = self.durations(sys, &utt.utt_id, &intended);

        let mut rendered = intended.clone();
        let mut err_rng = seeded!(seed, "synthesis-error", sys.lexicon_seed, &sys.vocoder_id, &utt.utt_id);
        let corrupted = err_rng.gen::<f64>() < sys.synthesis_error_rate && self.spec.phoneme_inventory_size > 1;
        if corrupted {
            let pos = err_rng.gen_range(0..rendered.len());
            let shift = err_rng.gen_range(1..self.spec.phoneme_inventory_size as u32);
            rendered[pos] = (rendered[pos] + shift) % self.spec.phoneme_inventory_size as u32;
        }

        let d = self.spec.feature_dim;
        let mut frame_rng = seeded!(seed, "frames", &sys.vocoder_id, &utt.utt_id);
        let mut rows = Vec::new();
        let mut alignment = Vec::with_capacity(intended.len());
        for ((&want, &got), &dur) in intended.iter().zip(&rendered).zip(&durations) {
            // Each phoneme glides linearly from its start to its end template.
            let total = dur.max(2);
            let [start, end] = &lexicon.templates[got as usize];
            for f in 0..total {
                let alpha = f as f64 / (total - 1) as f64;
                rows.extend(start.iter().zip(end).map(|(&a, &b)| {
                    a + alpha * (b - a) + self.spec.target_jitter * frame_rng.sample::<f64, _>(StandardNormal)
                }));
            }
            alignment.push(PhonemeSpan {
                intended: want,
                rendered: got,
                frames: total,
            });
        }
        let count = rows.len() / d;
        let mut frames = Array2::from_shape_vec((count, d), rows).expect("row-major frames");

        let mut voc_rng = seeded!(seed, "vocoder", &sys.vocoder_id, &utt.utt_id);
        let mut perturbed_frames = 0;
        for mut row in frames.rows_mut() {
            if voc_rng.gen::<f64>() < sys.vocoder_noise_rate {
                perturbed_frames += 1;
                for v in row.iter_mut() {
                    *v += VOCODER_NOISE_SCALE * voc_rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Ok(SynthOutput {
            features: FeatureSequence {
                frames,
                utt_id: utt.utt_id.clone(),
                origin: sys.system_id.clone(),
            },
            alignment,
            perturbed_frames,
            corrupted,
        })
    }

    /// Decodes a phoneme string to text through the inverse G2P code.
    pub fn phonemes_to_text(&self, phonemes: &[u32]) -> String {
        self.g2p
            .parse(phonemes)
            .into_iter()
            .map(|g| self.graphemes[g])
            .collect()
    }
}

/// Fraction of phoneme tokens in `utts` whose templates coincide between the
/// two lexicons.
pub fn template_overlap(world: &World, a: &Lexicon, b: &Lexicon, utts: &[ParallelUtterance]) -> Result<f64> {
    let mut same = 0usize;
    let mut total = 0usize;
    for utt in utts {
        for p in world.phonemes_of(utt)? {
            total += 1;
            if a.templates[p as usize] == b.templates[p as usize] {
                same += 1;
            }
        }
    }
    if total == 0 {
        return Err(data_err("no phonemes to compare"));
    }
    Ok(same as f64 / total as f64)
}

pub fn gen_parallel_corpus(spec: &ToyLanguageSpec) -> Result<Vec<ParallelUtterance>> {
    Ok(World::new(spec)?.gen_parallel_corpus())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn sys(id: &str, seed: u64, agreement: f64) -> TtsSystemSpec {
        TtsSystemSpec {
            system_id: id.into(),
            lexicon_seed: seed,
            lexicon_agreement: agreement,
            duration_mode: DurationMode::Deterministic,
            speed_factor: 1.0,
            vocoder_id: "hfg".into(),
            vocoder_noise_rate: 0.0,
            synthesis_error_rate: 0.0,
        }
    }

    fn small_spec(train: usize) -> ToyLanguageSpec {
        ToyLanguageSpec {
            corpus_sizes: (train, 2, 2),
            ..Default::default()
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        let spec = ToyLanguageSpec {
            master_seed: 7,
            ..small_spec(2)
        };
        assert_eq!(gen_parallel_corpus(&spec).unwrap(), gen_parallel_corpus(&spec).unwrap());
    }

    #[test]
    fn degenerate_length_range() {
        let spec = ToyLanguageSpec {
            sentence_length_range: (5, 5),
            ..small_spec(30)
        };
        for u in gen_parallel_corpus(&spec).unwrap() {
            assert_eq!(u.target_text.chars().count(), 5);
            assert_eq!(u.source_text.len(), 5);
        }
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let spec = ToyLanguageSpec {
            corpus_sizes: (200, 20, 20),
            ..Default::default()
        };
        let corpus = gen_parallel_corpus(&spec).unwrap();
        assert_eq!(corpus.len(), 240);
        let ids: HashSet<_> = corpus.iter().map(|u| u.utt_id.as_str()).collect();
        assert_eq!(ids.len(), 240);
        for split in Split::ALL {
            let n = corpus.iter().filter(|u| u.split == split).count();
            let want = match split {
                Split::Train => 200,
                _ => 20,
            };
            assert_eq!(n, want);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            ToyLanguageSpec { sentence_length_range: (6, 5), ..Default::default() },
            ToyLanguageSpec { phoneme_inventory_size: 0, ..Default::default() },
            ToyLanguageSpec { phoneme_inventory_size: 3, target_alphabet_size: 30, ..Default::default() },
            ToyLanguageSpec { corpus_sizes: (1, 0, 1), ..Default::default() },
            ToyLanguageSpec { target_alphabet_size: 40, ..Default::default() },
        ];
        for spec in bad {
            assert!(matches!(gen_parallel_corpus(&spec), Err(crate::Error::Config(_))), "{spec:?}");
        }
    }

    #[test]
    fn g2p_round_trips_every_text() {
        let world = World::new(&ToyLanguageSpec::default()).unwrap();
        for u in world.gen_parallel_corpus() {
            let ph = world.phonemes_of(&u).unwrap();
            assert_eq!(world.phonemes_to_text(&ph), u.target_text);
        }
    }

    #[test]
    fn render_source_frame_count_and_determinism() {
        let spec = ToyLanguageSpec {
            source_frames_per_token: (3, 3),
            ..Default::default()
        };
        let world = World::new(&spec).unwrap();
        let utt = ParallelUtterance {
            utt_id: "x".into(),
            source_text: vec![0, 1, 2, 3, 4],
            target_text: world.translate(&[0, 1, 2, 3, 4]),
            split: Split::Train,
        };
        let a = world.render_source(&utt).unwrap();
        assert_eq!(a.frame_count(), 15);
        assert_eq!(a, world.render_source(&utt).unwrap());

        let empty = ParallelUtterance { source_text: vec![], ..utt.clone() };
        assert!(matches!(world.render_source(&empty), Err(crate::Error::Data(_))));
        let unknown = ParallelUtterance { source_text: vec![999], ..utt };
        assert!(matches!(world.render_source(&unknown), Err(crate::Error::Data(_))));
    }

    #[test]
    fn slower_speed_is_longer() {
        let world = World::new(&ToyLanguageSpec::default()).unwrap();
        let base = sys("E", 2, 0.5);
        let slow = TtsSystemSpec { speed_factor: 0.95, ..base.clone() };
        let fast = TtsSystemSpec { speed_factor: 1.05, ..base.clone() };
        for u in world.gen_parallel_corpus().iter().take(50) {
            let n_slow = world.synth_target(u, &slow).unwrap().features.frame_count();
            let n_base = world.synth_target(u, &base).unwrap().features.frame_count();
            let n_fast = world.synth_target(u, &fast).unwrap().features.frame_count();
            assert!(n_slow >= n_base && n_base >= n_fast);
        }
    }

    #[test]
    fn full_agreement_gives_identical_renderings() {
        let world = World::new(&ToyLanguageSpec::default()).unwrap();
        let a = sys("A", 11, 1.0);
        let b = sys("B", 99, 1.0);
        for u in world.gen_parallel_corpus().iter().take(20) {
            let fa = world.synth_target(u, &a).unwrap().features;
            let fb = world.synth_target(u, &b).unwrap().features;
            assert_eq!(fa.frames, fb.frames);
        }
    }

    #[test]
    fn unmapped_grapheme_rejected() {
        let world = World::new(&ToyLanguageSpec::default()).unwrap();
        let utt = ParallelUtterance {
            utt_id: "bad".into(),
            source_text: vec![1],
            target_text: "a!".into(),
            split: Split::Dev,
        };
        assert!(matches!(world.synth_target(&utt, &sys("A", 1, 0.5)), Err(crate::Error::Data(_))));
    }

    #[test]
    fn vocoder_noise_matches_binomial() {
        // 1000 seeded 100-frame utterances; per-utterance count ~ Bin(100, 0.02).
        let spec = ToyLanguageSpec {
            sentence_length_range: (1, 1),
            phoneme_duration_range: (1, 1),
            ..Default::default()
        };
        let world = World::new(&spec).unwrap();
        let noisy = TtsSystemSpec { vocoder_noise_rate: 0.02, ..sys("A", 1, 0.5) };
        let lex = world.lexicon(&noisy);
        let singles: Vec<char> = world
            .graphemes()
            .iter()
            .copied()
            .filter(|&c| world.g2p.code(world.grapheme_index(c).unwrap()).len() == 1)
            .collect();
        let draws = 1000;
        let mut total = 0usize;
        for i in 0..draws {
            // 50 single-phoneme graphemes of 2 frames each.
            let text: String = (0..50).map(|j| singles[(i + j) % singles.len()]).collect();
            let utt = ParallelUtterance {
                utt_id: format!("mc-{i}"),
                source_text: vec![0],
                target_text: text,
                split: Split::Train,
            };
            let out = world.synth_with_lexicon(&utt, &noisy, &lex).unwrap();
            assert_eq!(out.features.frame_count(), 100);
            total += out.perturbed_frames;
        }
        let n = (draws * 100) as f64;
        let mean = n * 0.02;
        let sigma = (n * 0.02 * 0.98).sqrt();
        assert!((total as f64 - mean).abs() <= 3.0 * sigma, "total {total} vs {mean}±{sigma}");
        let per_utt = total as f64 / draws as f64;
        assert!((per_utt - 2.0).abs() < 0.2);
    }

    #[test]
    fn agreement_monotone_in_overlap() {
        let world = World::new(&ToyLanguageSpec::default()).unwrap();
        let utts: Vec<_> = world.gen_parallel_corpus().into_iter().take(100).collect();
        let mut last = -1.0;
        for agreement in [0.0, 0.5, 1.0] {
            let a = world.lexicon(&sys("A", 3, agreement));
            let b = world.lexicon(&sys("B", 4, agreement));
            let overlap = template_overlap(&world, &a, &b, &utts).unwrap();
            assert!(overlap >= last, "{agreement}: {overlap} < {last}");
            last = overlap;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn synthesis_error_swaps_one_phoneme() {
        let world = World::new(&ToyLanguageSpec::default()).unwrap();
        let broken = TtsSystemSpec { synthesis_error_rate: 1.0, ..sys("A", 1, 0.5) };
        for u in world.gen_parallel_corpus().iter().take(20) {
            let out = world.synth_target(u, &broken).unwrap();
            assert!(out.corrupted);
            let diffs = out.alignment.iter().filter(|s| s.intended != s.rendered).count();
            assert_eq!(diffs, 1);
        }
    }
}
