//! Beam search per branch and first-token branch selection.
//!
//! Free decoding positions may emit a unit or EOS. Quality tokens only
//! appear through `forced_prefix`.

use std::cmp::Ordering;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::{DecoderState, EncoderMemory, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Exponent of the length normalization `log p / len^alpha`.
    pub length_alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 10,
            max_len: 200,
            length_alpha: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Decoded units; specials are stripped.
    pub tokens: Vec<u32>,
    /// Every generated token, including a forced prefix and EOS.
    pub raw: Vec<u32>,
    /// Length-normalized log-probability.
    pub score: f64,
    pub log_prob: f64,
    pub branch_id: usize,
    /// True when `max_len` was reached without EOS.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub branch_id: usize,
    /// Probability of Y as the first token, per branch.
    pub p_y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub selection: Selection,
    pub hypothesis: Hypothesis,
}

/// One line of a decode file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub utt_id: String,
    pub branch_id: usize,
    pub p_y: Vec<f64>,
    pub units: Vec<u32>,
    pub score: f64,
    pub truncated: bool,
}

impl DecodeRecord {
    pub fn new(utt_id: &str, t: &Translation) -> Self {
        Self {
            utt_id: utt_id.to_string(),
            branch_id: t.hypothesis.branch_id,
            p_y: t.selection.p_y.clone(),
            units: t.hypothesis.tokens.clone(),
            score: t.hypothesis.score,
            truncated: t.hypothesis.truncated,
        }
    }
}

pub fn normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(alpha)
}

#[derive(Clone)]
struct Live {
    tokens: Vec<u32>,
    log_prob: f64,
    state: DecoderState,
    next: ndarray::Array1<f64>,
}

struct Done {
    tokens: Vec<u32>,
    log_prob: f64,
    score: f64,
    truncated: bool,
}

fn better(a: &Done, b: &Done) -> bool {
    match a.score.partial_cmp(&b.score).unwrap_or(Ordering::Equal) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.tokens < b.tokens,
    }
}

pub fn beam_search(
    model: &Model,
    branch: usize,
    source: &Array2<f64>,
    cfg: &BeamConfig,
    forced_prefix: &[u32],
) -> Result<Hypothesis> {
    let mem = model.memory(source)?;
    beam_search_with_memory(model, &mem, branch, cfg, forced_prefix)
}

/// Beam search over one branch. Each step expands every live hypothesis,
/// keeps the `beam` best candidates by log-probability (ties by parent rank,
/// then token id) and retires those ending in EOS. The result is the best
/// retired hypothesis by normalized score; live hypotheses at `max_len`
/// compete too and are flagged truncated.
pub fn beam_search_with_memory(
    model: &Model,
    mem: &EncoderMemory,
    branch: usize,
    cfg: &BeamConfig,
    forced_prefix: &[u32],
) -> Result<Hypothesis> {
    if cfg.beam == 0 || cfg.max_len == 0 {
        return Err(config_err("beam and max_len must be at least 1"));
    }
    let vocab = model.vocab();
    let mut state = model.start(branch)?;
    let next = model.step(mem, &mut state, vocab.bos())?;
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        state,
        next,
    }];
    let mut best: Option<Done> = None;
    let mut offer = |d: Done| {
        if best.as_ref().is_none_or(|b| better(&d, b)) {
            best = Some(d);
        }
    };
    let allowed: Vec<u32> = (0..vocab.units() as u32).chain([vocab.eos()]).collect();
    for t in 0..cfg.max_len {
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (rank, h) in live.iter().enumerate() {
            match forced_prefix.get(t) {
                Some(&tok) => cands.push((h.log_prob + h.next[tok as usize], rank, tok)),
                None => cands.extend(allowed.iter().map(|&tok| (h.log_prob + h.next[tok as usize], rank, tok))),
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(cfg.beam);
        let mut next_live = Vec::with_capacity(cands.len());
        for (lp, rank, tok) in cands {
            let mut tokens = live[rank].tokens.clone();
            tokens.push(tok);
            if tok == vocab.eos() {
                offer(Done {
                    score: normalized(lp, tokens.len(), cfg.length_alpha),
                    tokens,
                    log_prob: lp,
                    truncated: false,
                });
            } else if t + 1 == cfg.max_len {
                offer(Done {
                    score: normalized(lp, tokens.len(), cfg.length_alpha),
                    tokens,
                    log_prob: lp,
                    truncated: true,
                });
            } else {
                let mut state = live[rank].state.clone();
                let next = model.step(mem, &mut state, tok)?;
                next_live.push(Live {
                    tokens,
                    log_prob: lp,
                    state,
                    next,
                });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }
    let d = best.expect("at least one hypothesis retires");
    Ok(Hypothesis {
        tokens: d.tokens.iter().copied().filter(|&t| vocab.is_unit(t)).collect(),
        raw: d.tokens,
        score: d.score,
        log_prob: d.log_prob,
        branch_id: branch,
        truncated: d.truncated,
    })
}

/// One decoding step per branch from BOS; picks the branch with the highest
/// probability of Y (lowest index on ties).
pub fn select_branch(model: &Model, mem: &EncoderMemory) -> Result<Selection> {
    let y = model.vocab().yes() as usize;
    let mut p_y = Vec::with_capacity(model.branch_count());
    for b in 0..model.branch_count() {
        let mut st = model.start(b)?;
        p_y.push(model.step(mem, &mut st, model.vocab().bos())?[y].exp());
    }
    Ok(Selection {
        branch_id: argmax_first(&p_y),
        p_y,
    })
}

pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Branch selection followed by beam search on the chosen branch with Y
/// forced first. Single-branch models decode without a forced prefix.
pub fn translate(model: &Model, source: &Array2<f64>, cfg: &BeamConfig) -> Result<Translation> {
    let mem = model.memory(source)?;
    let selection = select_branch(model, &mem)?;
    let forced: &[u32] = if model.branch_count() > 1 {
        &[model.vocab().yes()][..]
    } else {
        &[]
    };
    let hypothesis = beam_search_with_memory(model, &mem, selection.branch_id, cfg, forced)?;
    Ok(Translation { selection, hypothesis })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(units: usize, branches: usize) -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            units,
            encoder_layers: 1,
            decoder_layers: 1,
            hidden_dim: 8,
            attention_heads: 2,
            ffn_dim: 16,
            branch_count: branches,
            dropout: 0.0,
        }
    }

    fn source(rng: &mut ChaCha8Rng) -> Array2<f64> {
        let n = rng.gen_range(2..6);
        Array2::from_shape_simple_fn((n, 3), || rng.gen_range(-1.5..1.5))
    }

    /// Log-probability of `tokens` after BOS by teacher forcing.
    fn sequence_log_prob(m: &Model, b: usize, src: &Array2<f64>, tokens: &[u32]) -> f64 {
        let mut input = vec![m.vocab().bos()];
        input.extend_from_slice(&tokens[..tokens.len() - 1]);
        let logits = &m.forward(src, &[(b, &input)]).unwrap()[0];
        tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| logits[[t, tok as usize]] - crate::model::tape::log_sum_exp(logits.row(t).iter().copied()))
            .sum()
    }

    fn greedy(m: &Model, b: usize, src: &Array2<f64>, max_len: usize) -> Vec<u32> {
        let v = m.vocab();
        let allowed: Vec<u32> = (0..v.units() as u32).chain([v.eos()]).collect();
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut input = vec![v.bos()];
            input.extend(&out);
            let logits = &m.forward(src, &[(b, &input)]).unwrap()[0];
            let row = logits.row(input.len() - 1);
            let mut best = allowed[0];
            for &t in &allowed {
                if row[t as usize] > row[best as usize] {
                    best = t;
                }
            }
            out.push(best);
            if best == v.eos() {
                break;
            }
        }
        out
    }

    fn exhaustive(m: &Model, b: usize, src: &Array2<f64>, max_len: usize, prefix: &[u32]) -> (Vec<u32>, f64) {
        let v = m.vocab();
        let allowed: Vec<u32> = (0..v.units() as u32).chain([v.eos()]).collect();
        let mut best: Option<(Vec<u32>, f64)> = None;
        let mut frontier = vec![prefix.to_vec()];
        while let Some(seq) = frontier.pop() {
            let ends = seq.last() == Some(&v.eos()) || seq.len() == max_len;
            if ends {
                let s = normalized(sequence_log_prob(m, b, src, &seq), seq.len(), 1.0);
                if best.as_ref().is_none_or(|(bs, bv)| s > *bv || (s == *bv && seq < *bs)) {
                    best = Some((seq.clone(), s));
                }
                continue;
            }
            for &t in &allowed {
                let mut next = seq.clone();
                next.push(t);
                frontier.push(next);
            }
        }
        best.unwrap()
    }

    #[test]
    fn beam_one_is_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..100 {
            let m = Model::init(&cfg(5, 2), i).unwrap();
            let src = source(&mut rng);
            let b = (i % 2) as usize;
            let bc = BeamConfig {
                beam: 1,
                max_len: 8,
                length_alpha: 1.0,
            };
            let h = beam_search(&m, b, &src, &bc, &[]).unwrap();
            assert_eq!(h.raw, greedy(&m, b, &src, 8), "input {i}");
        }
    }

    #[test]
    fn wide_beam_equals_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (units, max_len, beam) in [(2, 3, 27), (3, 4, 256)] {
            for i in 0..10 {
                let m = Model::init(&cfg(units, 1), 100 + i).unwrap();
                let src = source(&mut rng);
                let bc = BeamConfig {
                    beam,
                    max_len,
                    length_alpha: 1.0,
                };
                let h = beam_search(&m, 0, &src, &bc, &[]).unwrap();
                let (seq, score) = exhaustive(&m, 0, &src, max_len, &[]);
                assert_eq!(h.raw, seq);
                assert!((h.score - score).abs() < 1e-9);
                assert_eq!(h.truncated, seq.last() != Some(&m.vocab().eos()));
            }
        }
    }

    #[test]
    fn forced_prefix_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::init(&cfg(3, 2), 4).unwrap();
        let src = source(&mut rng);
        let y = m.vocab().yes();
        let bc = BeamConfig {
            beam: 64,
            max_len: 4,
            length_alpha: 1.0,
        };
        let h = beam_search(&m, 1, &src, &bc, &[y]).unwrap();
        assert_eq!(h.raw[0], y);
        assert!(h.tokens.iter().all(|&t| m.vocab().is_unit(t)));
        let (seq, _) = exhaustive(&m, 1, &src, 4, &[y]);
        assert_eq!(h.raw, seq);
    }

    #[test]
    fn wider_beams_do_not_lower_the_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..20 {
            let m = Model::init(&cfg(6, 1), 200 + i).unwrap();
            let src = source(&mut rng);
            let mut last = f64::NEG_INFINITY;
            for beam in [1, 2, 4, 8, 16] {
                let bc = BeamConfig {
                    beam,
                    max_len: 6,
                    length_alpha: 1.0,
                };
                let s = beam_search(&m, 0, &src, &bc, &[]).unwrap().score;
                assert!(s >= last - 1e-12, "input {i} beam {beam}: {s} < {last}");
                last = s;
            }
        }
    }

    #[test]
    fn selection_ties_go_to_the_first_branch() {
        assert_eq!(argmax_first(&[0.7, 0.4]), 0);
        assert_eq!(argmax_first(&[0.4, 0.7]), 1);
        assert_eq!(argmax_first(&[0.5, 0.5, 0.5]), 0);
        let mut m = Model::init(&cfg(3, 3), 1).unwrap();
        m.params_mut().iter_mut().for_each(|p| p.fill(0.0));
        let mem = m.memory(&Array2::ones((2, 3))).unwrap();
        let sel = select_branch(&m, &mem).unwrap();
        assert_eq!(sel.branch_id, 0);
        assert!(sel.p_y.iter().all(|&p| (p - 1.0 / m.vocab().size() as f64).abs() < 1e-12));
    }

    #[test]
    fn single_branch_translate_is_plain_beam_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Model::init(&cfg(4, 1), 9).unwrap();
        let bc = BeamConfig {
            beam: 3,
            max_len: 7,
            length_alpha: 1.0,
        };
        for _ in 0..5 {
            let src = source(&mut rng);
            let t = translate(&m, &src, &bc).unwrap();
            assert_eq!(t.selection.branch_id, 0);
            assert_eq!(t.selection.p_y.len(), 1);
            assert_eq!(t.hypothesis, beam_search(&m, 0, &src, &bc, &[]).unwrap());
        }
    }

    #[test]
    fn translate_uses_argmax_branch_and_strips_specials() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bc = BeamConfig {
            beam: 4,
            max_len: 10,
            length_alpha: 1.0,
        };
        for i in 0..30 {
            let m = Model::init(&cfg(5, 3), 300 + i).unwrap();
            let src = source(&mut rng);
            let t = translate(&m, &src, &bc).unwrap();
            assert_eq!(t.hypothesis.branch_id, argmax_first(&t.selection.p_y));
            assert_eq!(t.hypothesis.raw[0], m.vocab().yes());
            assert!(t.hypothesis.tokens.iter().all(|&u| u < 5));
            assert_eq!(t, translate(&m, &src, &bc).unwrap());
        }
    }

    #[test]
    fn zero_beam_rejected() {
        let m = Model::init(&cfg(3, 1), 1).unwrap();
        let bc = BeamConfig {
            beam: 0,
            ..BeamConfig::default()
        };
        assert!(beam_search(&m, 0, &Array2::ones((2, 3)), &bc, &[]).is_err());
    }
}
