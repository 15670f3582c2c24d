//! Staged, cached execution of the experiment matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::formats::{
    codebook_string, parse_codebook, read_jsonl, read_matrix, write_atomic, write_jsonl, write_matrix,
};
use super::store::{content_key, ArtifactStore};
use super::{CellSpec, ExperimentConfig};
use crate::error::{data_err, Error, Result};
use crate::inference::{beam_search_with_memory, select_branch, DecodeRecord, Hypothesis, Selection, Translation};
use crate::metrics::{self, CorrelationMatrix, Smoothing};
use crate::model::{load_checkpoint, save_checkpoint, train, Checkpoint, LogRecord, Model};
use crate::synthworld::{FeatureSequence, ParallelUtterance, PhonemeSpan, Split, World};
use crate::targetprep::{
    assign_quality_tokens, build_dataset, build_toy_asr, compute_cer_table, AsrTrainingPair, CerTable, DatasetInputs,
    DatasetMode, QualityToken, TokenAssignment, ToyAsr, TrainingSet, UnitCorpus,
};
use crate::unitizer::{encode_units, fit_kmeans, pool_frames, reduce_units, Codebook, ReducedUnits};

/// Scores of one branch of a multitask model on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchResult {
    pub system_id: String,
    pub bleu: f64,
    pub cer: f64,
    /// Test utterances for which selection chose this branch.
    pub selected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub bleu: f64,
    /// Mean sentence CER of the transcribed output against the reference.
    pub cer: f64,
    pub best_dev_loss: Option<f64>,
    pub checkpoint_step: u64,
    /// Empty unless the cell is multitask.
    pub branches: Vec<BranchResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cell_id: String,
    pub mode: DatasetMode,
    pub seeds: Vec<SeedResult>,
    pub bleu_mean: f64,
    pub bleu_std: f64,
    pub cer_mean: f64,
    pub cer_std: f64,
}

impl EvalReport {
    pub fn new(cell: &CellSpec, seeds: Vec<SeedResult>) -> Self {
        let bleu: Vec<f64> = seeds.iter().map(|s| s.bleu).collect();
        let cer: Vec<f64> = seeds.iter().map(|s| s.cer).collect();
        Self {
            cell_id: cell.id(),
            mode: cell.mode.clone(),
            bleu_mean: mean(&bleu),
            bleu_std: std_dev(&bleu),
            cer_mean: mean(&cer),
            cer_std: std_dev(&cer),
            seeds,
        }
    }

    /// Per-seed BLEU of one branch of a multitask cell.
    pub fn branch_bleu(&self, system: &str) -> Vec<f64> {
        self.seeds
            .iter()
            .filter_map(|s| s.branches.iter().find(|b| b.system_id == system).map(|b| b.bleu))
            .collect()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Grapheme tokens used for BLEU: one token per non-space character.
pub fn bleu_tokens(text: &str) -> Vec<String> {
    let spaced: Vec<String> = text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect();
    metrics::normalize_text(&spaced.join(" "))
}

#[derive(Serialize, Deserialize)]
struct AlignmentRecord {
    utt_id: String,
    alignment: Vec<PhonemeSpan>,
    corrupted: bool,
    perturbed_frames: usize,
}

#[derive(Serialize, Deserialize)]
struct UnitRecord {
    utt_id: String,
    system_id: String,
    units: Vec<u32>,
    durations: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct TokenRecord {
    utt_id: String,
    system_id: String,
    token: QualityToken,
}

#[derive(Clone, Serialize, Deserialize)]
struct BranchRecord {
    utt_id: String,
    branch_id: usize,
    units: Vec<u32>,
    score: f64,
    truncated: bool,
}

/// A system's rendering of every utterance.
#[derive(Clone, Debug)]
pub struct Rendering {
    pub features: BTreeMap<String, Arc<FeatureSequence>>,
    pub alignments: BTreeMap<String, Vec<PhonemeSpan>>,
}

pub struct TrainedCell {
    pub key: String,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub branches: Vec<String>,
}

pub struct Decoded {
    pub records: Vec<DecodeRecord>,
    /// `[branch]` hypotheses with Y forced, multitask cells only.
    branch_records: Vec<Vec<BranchRecord>>,
}

/// Stage runner over one configuration and artifact store.
pub struct Pipeline<'a> {
    pub cfg: &'a ExperimentConfig,
    pub store: &'a ArtifactStore,
    world: World,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a ExperimentConfig, store: &'a ArtifactStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            store,
            world: World::new(&cfg.world)?,
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    fn corpus_key(&self) -> Result<String> {
        content_key("corpus", &self.cfg.world)
    }

    pub fn corpus(&self) -> Result<Vec<ParallelUtterance>> {
        let key = self.corpus_key()?;
        stage(
            "gen-data",
            self.store.fetch(
                "corpus",
                &key,
                |dir| write_jsonl(&dir.join("corpus.jsonl"), "corpus", self.world.gen_parallel_corpus()),
                |dir| read_jsonl(&dir.join("corpus.jsonl"), "corpus"),
            ),
        )
    }

    pub fn utt_ids(&self, split: Split) -> Result<Vec<String>> {
        Ok(self
            .corpus()?
            .into_iter()
            .filter(|u| u.split == split)
            .map(|u| u.utt_id)
            .collect())
    }

    fn references(&self) -> Result<BTreeMap<String, String>> {
        Ok(self.corpus()?.into_iter().map(|u| (u.utt_id, u.target_text)).collect())
    }

    pub fn sources(&self) -> Result<BTreeMap<String, Arc<FeatureSequence>>> {
        let corpus = self.corpus()?;
        let key = content_key("source", &self.corpus_key()?)?;
        stage(
            "synth",
            self.store.fetch(
                "source",
                &key,
                |dir| {
                    for utt in &corpus {
                        let fs = self.world.render_source(utt)?;
                        write_matrix(&dir.join(format!("{}.f64", utt.utt_id)), &fs.frames)?;
                    }
                    Ok(())
                },
                |dir| {
                    corpus
                        .iter()
                        .map(|u| {
                            let frames = read_matrix(&dir.join(format!("{}.f64", u.utt_id)))?;
                            Ok((
                                u.utt_id.clone(),
                                Arc::new(FeatureSequence {
                                    frames,
                                    utt_id: u.utt_id.clone(),
                                    origin: "source".into(),
                                }),
                            ))
                        })
                        .collect()
                },
            ),
        )
    }

    pub fn synth(&self, system_id: &str) -> Result<Rendering> {
        let sys = self.cfg.system(system_id)?.clone();
        let corpus = self.corpus()?;
        let key = content_key("synth", &(self.corpus_key()?, &sys))?;
        stage(
            "synth",
            self.store.fetch(
                "synth",
                &key,
                |dir| {
                    let lex = self.world.lexicon(&sys);
                    let sdir = dir.join(&sys.system_id);
                    let mut aligns = Vec::with_capacity(corpus.len());
                    for utt in &corpus {
                        let out = self.world.synth_with_lexicon(utt, &sys, &lex)?;
                        write_matrix(&sdir.join(format!("{}.f64", utt.utt_id)), &out.features.frames)?;
                        aligns.push(AlignmentRecord {
                            utt_id: utt.utt_id.clone(),
                            alignment: out.alignment,
                            corrupted: out.corrupted,
                            perturbed_frames: out.perturbed_frames,
                        });
                    }
                    write_jsonl(&sdir.join("alignment.jsonl"), "alignment", aligns)
                },
                |dir| {
                    let sdir = dir.join(&sys.system_id);
                    let aligns: Vec<AlignmentRecord> = read_jsonl(&sdir.join("alignment.jsonl"), "alignment")?;
                    let mut features = BTreeMap::new();
                    let mut alignments = BTreeMap::new();
                    for a in aligns {
                        let frames = read_matrix(&sdir.join(format!("{}.f64", a.utt_id)))?;
                        features.insert(
                            a.utt_id.clone(),
                            Arc::new(FeatureSequence {
                                frames,
                                utt_id: a.utt_id.clone(),
                                origin: sys.system_id.clone(),
                            }),
                        );
                        alignments.insert(a.utt_id, a.alignment);
                    }
                    Ok(Rendering { features, alignments })
                },
            ),
        )
    }

    fn codebook_key(&self) -> Result<String> {
        content_key("codebook", &(self.corpus_key()?, &self.cfg.systems, &self.cfg.unitizer))
    }

    /// K-means codebook over pooled train-split renderings of every system.
    pub fn codebook(&self) -> Result<Codebook> {
        let key = self.codebook_key()?;
        stage(
            "unitize",
            self.store.fetch(
                "codebook",
                &key,
                |dir| {
                    let mut train = self.utt_ids(Split::Train)?;
                    if self.cfg.unitizer.fit_utterances > 0 {
                        train.truncate(self.cfg.unitizer.fit_utterances);
                    }
                    let mut seqs = Vec::new();
                    for s in &self.cfg.systems {
                        let r = self.synth(&s.system_id)?;
                        seqs.extend(train.iter().map(|u| r.features[u].clone()));
                    }
                    let pooled = pool_frames(seqs.iter().map(|a| a.as_ref()))?;
                    let fit = fit_kmeans(&pooled, &self.cfg.unitizer.kmeans())?;
                    log::info!("codebook: k={} inertia={:.3}", fit.codebook.k(), fit.codebook.inertia);
                    write_atomic(&dir.join("codebook.txt"), codebook_string(&fit.codebook).as_bytes())
                },
                |dir| parse_codebook(&std::fs::read_to_string(dir.join("codebook.txt"))?),
            ),
        )
    }

    pub fn units(&self, system_id: &str) -> Result<UnitCorpus> {
        self.cfg.system(system_id)?;
        let key = content_key("units", &(self.codebook_key()?, self.cfg.system(system_id)?))?;
        stage(
            "unitize",
            self.store.fetch(
                "units",
                &key,
                |dir| {
                    let cb = self.codebook()?;
                    let r = self.synth(system_id)?;
                    let mut recs = Vec::with_capacity(r.features.len());
                    for (utt, fs) in &r.features {
                        let reduced = reduce_units(&encode_units(fs, &cb)?);
                        recs.push(UnitRecord {
                            utt_id: utt.clone(),
                            system_id: system_id.to_string(),
                            units: reduced.units,
                            durations: reduced.durations,
                        });
                    }
                    write_jsonl(&dir.join("units.jsonl"), "units", recs)
                },
                |dir| {
                    let recs: Vec<UnitRecord> = read_jsonl(&dir.join("units.jsonl"), "units")?;
                    recs.into_iter()
                        .map(|r| {
                            let red = ReducedUnits {
                                units: r.units,
                                durations: r.durations,
                            };
                            red.validate()?;
                            Ok((r.utt_id, red))
                        })
                        .collect()
                },
            ),
        )
    }

    fn asr_key(&self) -> Result<String> {
        content_key("asr", &(self.codebook_key()?, &self.cfg.asr))
    }

    /// Toy ASR pooled over the train-split renderings of every system.
    pub fn asr(&self) -> Result<ToyAsr> {
        stage(
            "prep-targets",
            self.store.fetch(
                "asr",
                &self.asr_key()?,
                |dir| {
                    let train = self.utt_ids(Split::Train)?;
                    let mut data = Vec::new();
                    for s in &self.cfg.systems {
                        data.push((self.units(&s.system_id)?, self.synth(&s.system_id)?.alignments));
                    }
                    let pairs = data.iter().flat_map(|(units, aligns)| {
                        train.iter().map(move |u| AsrTrainingPair {
                            reduced: &units[u],
                            alignment: &aligns[u],
                        })
                    });
                    let asr = build_toy_asr(&self.world, pairs, self.cfg.asr.clone())?;
                    write_atomic(&dir.join("asr.json"), &serde_json::to_vec(&asr)?)
                },
                |dir| Ok(serde_json::from_slice(&std::fs::read(dir.join("asr.json"))?)?),
            ),
        )
    }

    fn cer_key(&self) -> Result<String> {
        content_key("cer", &self.asr_key()?)
    }

    /// Toy-ASR CER of every system's rendering of every utterance.
    pub fn cer_table(&self) -> Result<CerTable> {
        stage(
            "prep-targets",
            self.store.fetch(
                "cer",
                &self.cer_key()?,
                |dir| {
                    let asr = self.asr()?;
                    let mut corpora = BTreeMap::new();
                    for s in &self.cfg.systems {
                        corpora.insert(s.system_id.clone(), self.units(&s.system_id)?);
                    }
                    let table = compute_cer_table(&asr, &corpora, &self.references()?)?;
                    write_atomic(&dir.join("cer.csv"), table.to_csv().as_bytes())
                },
                |dir| CerTable::from_csv(&std::fs::read_to_string(dir.join("cer.csv"))?),
            ),
        )
    }

    /// Quality tokens among `systems` over the train and dev splits.
    pub fn tokens(&self, systems: &[String]) -> Result<TokenAssignment> {
        let mut utts: BTreeSet<String> = self.utt_ids(Split::Train)?.into_iter().collect();
        utts.extend(self.utt_ids(Split::Dev)?);
        Ok(assign_quality_tokens(&self.cer_table()?.restrict(&utts, systems)))
    }

    pub fn dataset(&self, mode: &DatasetMode, split: Split) -> Result<TrainingSet> {
        let systems = mode.systems();
        let tokens = self.tokens(&systems)?;
        let sources = self.sources()?;
        let mut corpora = BTreeMap::new();
        for s in &systems {
            corpora.insert(s.clone(), self.units(s)?);
        }
        let ids = self.utt_ids(split)?;
        build_dataset(
            mode,
            &DatasetInputs {
                utt_ids: &ids,
                sources: &sources,
                corpora: &corpora,
                tokens: &tokens,
                vocab: self.cfg.model_config(1).vocab(),
            },
        )
    }

    fn train_key(&self, mode: &DatasetMode, seed: u64) -> Result<String> {
        content_key(
            "train",
            &(
                self.cer_key()?,
                mode,
                self.cfg.model_config(mode.branch_count()),
                self.cfg.train_config(seed),
            ),
        )
    }

    pub fn train_cell(&self, mode: &DatasetMode, seed: u64) -> Result<TrainedCell> {
        let key = self.train_key(mode, seed)?;
        let systems = mode.systems();
        let checkpoint_and_log = stage(
            "train",
            self.store.fetch(
                "train",
                &key,
                |dir| {
                    let data = self.dataset(mode, Split::Train)?;
                    let dev = self.dataset(mode, Split::Dev)?;
                    let mcfg = self.cfg.model_config(mode.branch_count());
                    let tc = self.cfg.train_config(seed);
                    let mut model = Model::init(&mcfg, seed)?;
                    log::info!(
                        "training {} seed {seed}: {} examples, {} parameters",
                        mode.name(),
                        data.examples.len(),
                        model.parameter_count()
                    );
                    let out = train(&mut model, &data, Some(&dev), &tc)?;
                    save_checkpoint(&out.checkpoint, &dir.join("model.ckpt"))?;
                    write_jsonl(&dir.join("train_log.jsonl"), "train-log", &out.log)?;
                    let tokens = self.tokens(&systems)?;
                    write_jsonl(
                        &dir.join("tokens.jsonl"),
                        "tokens",
                        tokens.iter().map(|((u, s), t)| TokenRecord {
                            utt_id: u.clone(),
                            system_id: s.clone(),
                            token: *t,
                        }),
                    )
                },
                |dir| {
                    Ok((
                        load_checkpoint(&dir.join("model.ckpt"))?,
                        read_jsonl(&dir.join("train_log.jsonl"), "train-log")?,
                    ))
                },
            ),
        )?;
        let (checkpoint, log) = checkpoint_and_log;
        Ok(TrainedCell {
            key,
            checkpoint,
            log,
            branches: match mode {
                DatasetMode::Multitask(v) => v.clone(),
                _ => vec![systems.join("+")],
            },
        })
    }

    /// Decodes the test split with branch selection; multitask models also
    /// decode every branch with Y forced.
    pub fn decode(&self, cell: &TrainedCell) -> Result<Decoded> {
        let key = content_key("decode", &(&cell.key, &self.cfg.decode))?;
        let model = &cell.checkpoint.model;
        stage(
            "translate",
            self.store.fetch(
                "decode",
                &key,
                |dir| {
                    let sources = self.sources()?;
                    let multi = model.branch_count() > 1;
                    let mut records = Vec::new();
                    let mut per_branch = vec![Vec::new(); if multi { model.branch_count() } else { 0 }];
                    for utt in self.utt_ids(Split::Test)? {
                        let t = translate_all(model, &sources[&utt].frames, &self.cfg.decode, &mut |b, h| {
                            per_branch[b].push(BranchRecord {
                                utt_id: utt.clone(),
                                branch_id: b,
                                units: h.tokens.clone(),
                                score: h.score,
                                truncated: h.truncated,
                            })
                        })?;
                        records.push(DecodeRecord::new(&utt, &t));
                    }
                    write_jsonl(&dir.join("decode.jsonl"), "decode", &records)?;
                    write_jsonl(&dir.join("branches.jsonl"), "branch-decode", per_branch.concat())
                },
                |dir| {
                    let records: Vec<DecodeRecord> = read_jsonl(&dir.join("decode.jsonl"), "decode")?;
                    let flat: Vec<BranchRecord> = read_jsonl(&dir.join("branches.jsonl"), "branch-decode")?;
                    let mut branch_records = vec![Vec::new(); if flat.is_empty() { 0 } else { model.branch_count() }];
                    for r in flat {
                        let b = r.branch_id;
                        branch_records
                            .get_mut(b)
                            .ok_or_else(|| data_err(format!("branch {b} out of range")))?
                            .push(r);
                    }
                    Ok(Decoded {
                        records,
                        branch_records,
                    })
                },
            ),
        )
    }

    fn score(&self, asr: &ToyAsr, refs: &BTreeMap<String, String>, outputs: &[(&str, &[u32])]) -> Result<(f64, f64)> {
        let mut hyps = Vec::with_capacity(outputs.len());
        let mut gold = Vec::with_capacity(outputs.len());
        let mut cer_sum = 0.0;
        for (utt, units) in outputs {
            let reference = refs.get(*utt).ok_or_else(|| data_err(format!("no reference for {utt}")))?;
            let text = asr.decode(&ReducedUnits::from_units(units));
            cer_sum += metrics::cer(&text, reference)?;
            hyps.push(bleu_tokens(&text));
            gold.push(bleu_tokens(reference));
        }
        let bleu = metrics::corpus_bleu(&hyps, &gold, Smoothing::None)?.score;
        Ok((bleu, cer_sum / outputs.len().max(1) as f64))
    }

    pub fn evaluate(&self, cell: &TrainedCell, decoded: &Decoded) -> Result<(f64, f64, Vec<BranchResult>)> {
        let asr = self.asr()?;
        let refs = self.references()?;
        let outputs: Vec<(&str, &[u32])> = decoded
            .records
            .iter()
            .map(|r| (r.utt_id.as_str(), r.units.as_slice()))
            .collect();
        let (bleu, cer) = stage("evaluate", self.score(&asr, &refs, &outputs))?;
        let mut branches = Vec::new();
        for (b, recs) in decoded.branch_records.iter().enumerate() {
            let outs: Vec<(&str, &[u32])> = recs.iter().map(|r| (r.utt_id.as_str(), r.units.as_slice())).collect();
            let (bb, bc) = stage("evaluate", self.score(&asr, &refs, &outs))?;
            branches.push(BranchResult {
                system_id: cell.branches[b].clone(),
                bleu: bb,
                cer: bc,
                selected: decoded.records.iter().filter(|r| r.branch_id == b).count(),
            });
        }
        Ok((bleu, cer, branches))
    }

    pub fn run_cell(&self, cell: &CellSpec) -> Result<EvalReport> {
        let mut seeds = Vec::with_capacity(cell.seeds.len());
        for &seed in &cell.seeds {
            let trained = self.train_cell(&cell.mode, seed)?;
            let decoded = self.decode(&trained)?;
            let (bleu, cer, branches) = self.evaluate(&trained, &decoded)?;
            let best_dev_loss = trained
                .log
                .iter()
                .filter_map(|r| r.dev_loss)
                .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))));
            log::info!("{} seed {seed}: BLEU {bleu:.2} CER {:.2}%", cell.id(), 100.0 * cer);
            seeds.push(SeedResult {
                seed,
                bleu,
                cer,
                best_dev_loss,
                checkpoint_step: trained.checkpoint.step,
                branches,
            });
        }
        Ok(EvalReport::new(cell, seeds))
    }
}

/// Selection plus a Y-forced beam search on every branch; the selected
/// branch's hypothesis is the translation. Single-branch models decode once
/// without a forced prefix.
fn translate_all(
    model: &Model,
    source: &ndarray::Array2<f64>,
    cfg: &crate::inference::BeamConfig,
    on_branch: &mut dyn FnMut(usize, &Hypothesis),
) -> Result<Translation> {
    let mem = model.memory(source)?;
    let selection: Selection = select_branch(model, &mem)?;
    if model.branch_count() == 1 {
        let hypothesis = beam_search_with_memory(model, &mem, 0, cfg, &[])?;
        return Ok(Translation { selection, hypothesis });
    }
    let y = model.vocab().yes();
    let mut chosen = None;
    for b in 0..model.branch_count() {
        let h = beam_search_with_memory(model, &mem, b, cfg, &[y])?;
        on_branch(b, &h);
        if b == selection.branch_id {
            chosen = Some(h);
        }
    }
    Ok(Translation {
        selection,
        hypothesis: chosen.expect("selected branch exists"),
    })
}

/// Runs every cell of the configuration, reusing cached stages.
pub fn run_pipeline(cfg: &ExperimentConfig, store: &ArtifactStore) -> Result<Vec<EvalReport>> {
    let p = Pipeline::new(cfg, store)?;
    cfg.cells.iter().map(|c| p.run_cell(c)).collect()
}

/// Pearson correlation of dev-split unit distributions between every pair
/// of systems; writes `correlation.csv` into `out_dir` when given.
pub fn analyze_correlation(cfg: &ExperimentConfig, store: &ArtifactStore, out_dir: Option<&Path>) -> Result<CorrelationMatrix> {
    if cfg.systems.len() < 2 {
        return Err(Error::Data("correlation needs at least two systems".into()));
    }
    let p = Pipeline::new(cfg, store)?;
    let dev = p.utt_ids(Split::Dev)?;
    let mut labels = Vec::new();
    let mut dists = Vec::new();
    for s in &cfg.systems {
        let units = p.units(&s.system_id)?;
        let seqs = dev
            .iter()
            .map(|u| {
                units
                    .get(u)
                    .map(|r| r.units.as_slice())
                    .ok_or_else(|| data_err(format!("system {} has no units for {u}", s.system_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        dists.push(metrics::unit_distribution(seqs, cfg.unitizer.k)?);
        labels.push(s.system_id.clone());
    }
    let m = CorrelationMatrix::compute(labels, &dists)?;
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("correlation.csv"), m.to_csv().as_bytes())?;
    }
    Ok(m)
}
