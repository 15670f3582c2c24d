//! Shared-encoder, multi-branch transformer over unit vocabularies.

mod checkpoint;
mod decode;
pub mod tape;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use decode::{DecoderState, EncoderMemory};
pub use train::{lr_at, train, LogRecord, TrainConfig, TrainOutcome};

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Result};
#[cfg(test)]
use crate::error::Error;
use crate::seeded;
use crate::targetprep::TrainingExample;
use crate::vocab::Vocab;
use tape::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Source feature dimension.
    pub input_dim: usize,
    /// Number of discrete units K; the vocabulary adds five specials.
    pub units: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub hidden_dim: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    pub branch_count: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            units: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            hidden_dim: 128,
            attention_heads: 4,
            ffn_dim: 256,
            branch_count: 1,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.units)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.branch_count >= 1, "branch_count must be at least 1"),
            (self.units >= 1, "units must be at least 1"),
            (self.input_dim >= 1, "input_dim must be at least 1"),
            (self.attention_heads >= 1, "attention_heads must be at least 1"),
            (
                self.hidden_dim >= 1 && self.hidden_dim.is_multiple_of(self.attention_heads.max(1)),
                "hidden_dim must be a positive multiple of attention_heads",
            ),
            (self.ffn_dim >= 1, "ffn_dim must be at least 1"),
            (
                (0.0..1.0).contains(&self.dropout),
                "dropout must be in [0, 1)",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(config_err(*msg)),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross_attn: Attention,
    ln3: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Branch {
    embed: usize,
    layers: Vec<DecoderLayer>,
    ln: Norm,
    out: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    input: Linear,
    encoder: Vec<EncoderLayer>,
    enc_ln: Norm,
    branches: Vec<Branch>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct LayoutBuilder {
    specs: Vec<(String, (usize, usize), Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.add(
                format!("{prefix}.weight"),
                (fan_in, fan_out),
                Init::Normal((fan_in as f64).powf(-0.5)),
            ),
            b: self.add(format!("{prefix}.bias"), (1, fan_out), Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{prefix}.gamma"), (1, dim), Init::Ones),
            beta: self.add(format!("{prefix}.beta"), (1, dim), Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<(String, (usize, usize), Init)>) {
    let d = cfg.hidden_dim;
    let v = cfg.vocab().size();
    let mut b = LayoutBuilder { specs: Vec::new() };
    let input = b.linear("encoder.input", cfg.input_dim, d);
    let encoder = (0..cfg.encoder_layers)
        .map(|i| {
            let p = format!("encoder.layers.{i}");
            EncoderLayer {
                ln1: b.norm(&format!("{p}.ln1"), d),
                attn: b.attention(&format!("{p}.attn"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                ff1: b.linear(&format!("{p}.ff1"), d, cfg.ffn_dim),
                ff2: b.linear(&format!("{p}.ff2"), cfg.ffn_dim, d),
            }
        })
        .collect();
    let enc_ln = b.norm("encoder.ln", d);
    let branches = (0..cfg.branch_count)
        .map(|br| {
            let p = format!("branch{br}");
            let embed = b.add(format!("{p}.embed"), (v, d), Init::Normal(1.0));
            let layers = (0..cfg.decoder_layers)
                .map(|i| {
                    let q = format!("{p}.layers.{i}");
                    DecoderLayer {
                        ln1: b.norm(&format!("{q}.ln1"), d),
                        self_attn: b.attention(&format!("{q}.self_attn"), d),
                        ln2: b.norm(&format!("{q}.ln2"), d),
                        cross_attn: b.attention(&format!("{q}.cross_attn"), d),
                        ln3: b.norm(&format!("{q}.ln3"), d),
                        ff1: b.linear(&format!("{q}.ff1"), d, cfg.ffn_dim),
                        ff2: b.linear(&format!("{q}.ff2"), cfg.ffn_dim, d),
                    }
                })
                .collect();
            let ln = b.norm(&format!("{p}.ln"), d);
            let out = b.linear(&format!("{p}.out"), d, v);
            Branch {
                embed,
                layers,
                ln,
                out,
            }
        })
        .collect();
    (
        Layout {
            input,
            encoder,
            enc_ln,
            branches,
        },
        b.specs,
    )
}

/// Sinusoidal position table, `n × d`.
pub fn positions(n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(p, i)| {
        let rate = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
        let a = p as f64 * rate;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    index: HashMap<String, usize>,
    params: Vec<Array2<f64>>,
    layout: Layout,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.params == other.params
    }
}

impl Model {
    /// Deterministic initialization. Each tensor is drawn from its own
    /// stream keyed by `(seed, name)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        let params = specs
            .iter()
            .map(|(name, shape, init)| match *init {
                Init::Zeros => Array2::zeros(*shape),
                Init::Ones => Array2::ones(*shape),
                Init::Normal(std) => {
                    let mut rng = seeded!("init", seed, name.as_str());
                    let dist = Normal::new(0.0, std).expect("finite std");
                    Array2::from_shape_simple_fn(*shape, || dist.sample(&mut rng))
                }
            })
            .collect();
        let names: Vec<String> = specs.into_iter().map(|s| s.0).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            config: config.clone(),
            names,
            index,
            params,
            layout,
        })
    }

    /// Rebuilds a model from named tensors; every tensor of the layout must
    /// be present with the right shape.
    pub fn from_named(config: &ModelConfig, tensors: Vec<(String, Array2<f64>)>) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        if tensors.len() != model.params.len() {
            return Err(data_err(format!(
                "expected {} tensors, got {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (name, value) in tensors {
            let i = *model
                .index
                .get(&name)
                .ok_or_else(|| data_err(format!("unexpected tensor `{name}`")))?;
            if value.dim() != model.params[i].dim() {
                return Err(data_err(format!("tensor `{name}` has the wrong shape")));
            }
            model.params[i] = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub fn branch_count(&self) -> usize {
        self.config.branch_count
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let v = self.vocab().size() as u32;
        match tokens.iter().find(|&&t| t >= v) {
            Some(t) => Err(data_err(format!("token {t} outside vocabulary of {v}"))),
            None => Ok(()),
        }
    }

    fn check_branch(&self, branch: usize) -> Result<()> {
        if branch >= self.branch_count() {
            return Err(data_err(format!(
                "branch {branch} out of range for {} branches",
                self.branch_count()
            )));
        }
        Ok(())
    }

    /// Teacher-forced logits (`len × vocab`) for each `(branch, prefix)`
    /// request. The encoder runs once and is shared.
    pub fn forward(&self, source: &Array2<f64>, requests: &[(usize, &[u32])]) -> Result<Vec<Array2<f64>>> {
        for (b, toks) in requests {
            self.check_branch(*b)?;
            self.check_tokens(toks)?;
        }
        self.check_source(source)?;
        let mut g = Graph::new(&self.params);
        let mut ctx = Ctx { rng: None };
        let enc = self.encode_on(&mut g, source, &mut ctx);
        Ok(requests
            .iter()
            .map(|(b, toks)| {
                let l = self.decode_on(&mut g, enc, *b, toks, &mut ctx);
                g.value(l).to_owned()
            })
            .collect())
    }

    /// Encoder output for one source, `frames × hidden`.
    pub fn encode(&self, source: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_source(source)?;
        let mut g = Graph::new(&self.params);
        let enc = self.encode_on(&mut g, source, &mut Ctx { rng: None });
        Ok(g.value(enc).to_owned())
    }

    fn check_source(&self, source: &Array2<f64>) -> Result<()> {
        if source.ncols() != self.config.input_dim || source.nrows() == 0 {
            return Err(data_err(format!(
                "source must be a non-empty matrix with {} columns, got {:?}",
                self.config.input_dim,
                source.dim()
            )));
        }
        Ok(())
    }

    /// Sum over branches of the mean token cross-entropy for one example.
    /// Branch `b` sees `[BOS] + targets[b]` and predicts `targets[b] + [EOS]`.
    pub fn example_loss(&self, example: &TrainingExample) -> Result<f64> {
        self.check_example(example)?;
        let mut g = Graph::new(&self.params);
        let loss = self.loss_on(&mut g, example, &mut Ctx { rng: None });
        Ok(g.scalar(loss))
    }

    /// Loss and its gradient, added into `grads` scaled by `scale`.
    pub fn loss_and_grad<R: Rng>(
        &self,
        example: &TrainingExample,
        grads: &mut [Array2<f64>],
        scale: f64,
        rng: Option<&mut R>,
    ) -> Result<f64> {
        self.check_example(example)?;
        let mut g = Graph::new(&self.params);
        let mut ctx = Ctx {
            rng: rng.map(|r| r as &mut dyn rand::RngCore),
        };
        let loss = self.loss_on(&mut g, example, &mut ctx);
        g.backward(loss, grads, scale);
        Ok(g.scalar(loss))
    }

    /// Gradient of the loss of a single branch only.
    pub fn branch_loss_grad(&self, example: &TrainingExample, branch: usize) -> Result<Vec<Array2<f64>>> {
        self.check_example(example)?;
        self.check_branch(branch)?;
        let mut g = Graph::new(&self.params);
        let mut ctx = Ctx { rng: None };
        let enc = self.encode_on(&mut g, &example.source.frames, &mut ctx);
        let loss = self.branch_loss_on(&mut g, enc, branch, &example.targets[branch], &mut ctx);
        let mut grads = self.zero_grads();
        g.backward(loss, &mut grads, 1.0);
        Ok(grads)
    }

    pub fn zero_grads(&self) -> Vec<Array2<f64>> {
        self.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect()
    }

    fn check_example(&self, example: &TrainingExample) -> Result<()> {
        if example.targets.len() != self.branch_count() {
            return Err(data_err(format!(
                "example {} has {} targets for {} branches",
                example.utt_id,
                example.targets.len(),
                self.branch_count()
            )));
        }
        for t in &example.targets {
            self.check_tokens(t)?;
        }
        self.check_source(&example.source.frames)
    }

    fn loss_on(&self, g: &mut Graph<'_>, example: &TrainingExample, ctx: &mut Ctx<'_>) -> Var {
        let enc = self.encode_on(g, &example.source.frames, ctx);
        let mut total: Option<Var> = None;
        for (b, t) in example.targets.iter().enumerate() {
            let l = self.branch_loss_on(g, enc, b, t, ctx);
            total = Some(match total {
                Some(acc) => g.add(acc, l),
                None => l,
            });
        }
        total.expect("at least one branch")
    }

    fn branch_loss_on(&self, g: &mut Graph<'_>, enc: Var, b: usize, target: &[u32], ctx: &mut Ctx<'_>) -> Var {
        let vocab = self.vocab();
        let mut input = Vec::with_capacity(target.len() + 1);
        input.push(vocab.bos());
        input.extend_from_slice(target);
        let mut gold: Vec<Option<u32>> = target.iter().map(|&t| Some(t)).collect();
        gold.push(Some(vocab.eos()));
        for t in gold.iter_mut() {
            if *t == Some(vocab.pad()) {
                *t = None;
            }
        }
        let logits = self.decode_on(g, enc, b, &input, ctx);
        g.cross_entropy(logits, &gold)
    }

    fn linear_on(&self, g: &mut Graph<'_>, x: Var, l: Linear) -> Var {
        let w = g.param(l.w);
        let b = g.param(l.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm_on(&self, g: &mut Graph<'_>, x: Var, n: Norm) -> Var {
        let gamma = g.param(n.gamma);
        let beta = g.param(n.beta);
        g.layer_norm(x, gamma, beta)
    }

    fn attention_on(&self, g: &mut Graph<'_>, x: Var, ctx_v: Var, a: Attention, causal: bool) -> Var {
        let d = self.config.hidden_dim;
        let heads = self.config.attention_heads;
        let dh = d / heads;
        let q = self.linear_on(g, x, a.q);
        let k = self.linear_on(g, ctx_v, a.k);
        let v = self.linear_on(g, ctx_v, a.v);
        let outs: Vec<Var> = (0..heads)
            .map(|h| {
                let qh = g.col_slice(q, h * dh, dh);
                let kh = g.col_slice(k, h * dh, dh);
                let vh = g.col_slice(v, h * dh, dh);
                let s = g.matmul_t(qh, kh);
                let s = g.scale(s, 1.0 / (dh as f64).sqrt());
                let p = g.softmax(s, causal);
                g.matmul(p, vh)
            })
            .collect();
        let cat = if heads == 1 { outs[0] } else { g.hconcat(&outs) };
        self.linear_on(g, cat, a.o)
    }

    fn ffn_on(&self, g: &mut Graph<'_>, x: Var, ff1: Linear, ff2: Linear) -> Var {
        let h = self.linear_on(g, x, ff1);
        let h = g.gelu(h);
        self.linear_on(g, h, ff2)
    }

    fn residual(&self, g: &mut Graph<'_>, x: Var, y: Var, ctx: &mut Ctx<'_>) -> Var {
        let y = self.dropout_on(g, y, ctx);
        g.add(x, y)
    }

    fn dropout_on(&self, g: &mut Graph<'_>, x: Var, ctx: &mut Ctx<'_>) -> Var {
        let p = self.config.dropout;
        match ctx.rng.as_mut() {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let dim = g.value(x).raw_dim();
                let mask = Array2::from_shape_simple_fn(dim, || if rng.gen::<f64>() < p { 0.0 } else { keep });
                g.dropout(x, mask)
            }
            _ => x,
        }
    }

    fn encode_on(&self, g: &mut Graph<'_>, source: &Array2<f64>, ctx: &mut Ctx<'_>) -> Var {
        let lay = &self.layout;
        let x = g.input(source.clone());
        let x = self.linear_on(g, x, lay.input);
        let pos = g.input(positions(source.nrows(), self.config.hidden_dim));
        let x = g.add(x, pos);
        let mut x = self.dropout_on(g, x, ctx);
        for layer in &lay.encoder {
            let h = self.norm_on(g, x, layer.ln1);
            let a = self.attention_on(g, h, h, layer.attn, false);
            x = self.residual(g, x, a, ctx);
            let h = self.norm_on(g, x, layer.ln2);
            let f = self.ffn_on(g, h, layer.ff1, layer.ff2);
            x = self.residual(g, x, f, ctx);
        }
        self.norm_on(g, x, lay.enc_ln)
    }

    fn decode_on(&self, g: &mut Graph<'_>, enc: Var, b: usize, tokens: &[u32], ctx: &mut Ctx<'_>) -> Var {
        let br = &self.layout.branches[b];
        let emb = g.param(br.embed);
        let x = g.gather(emb, tokens);
        let pos = g.input(positions(tokens.len(), self.config.hidden_dim));
        let x = g.add(x, pos);
        let mut x = self.dropout_on(g, x, ctx);
        for layer in &br.layers {
            let h = self.norm_on(g, x, layer.ln1);
            let a = self.attention_on(g, h, h, layer.self_attn, true);
            x = self.residual(g, x, a, ctx);
            let h = self.norm_on(g, x, layer.ln2);
            let a = self.attention_on(g, h, enc, layer.cross_attn, false);
            x = self.residual(g, x, a, ctx);
            let h = self.norm_on(g, x, layer.ln3);
            let f = self.ffn_on(g, h, layer.ff1, layer.ff2);
            x = self.residual(g, x, f, ctx);
        }
        let x = self.norm_on(g, x, br.ln);
        self.linear_on(g, x, br.out)
    }
}

struct Ctx<'r> {
    rng: Option<&'r mut dyn rand::RngCore>,
}

#[cfg(test)]
pub(crate) mod tests;
