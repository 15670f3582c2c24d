//! Step-by-step decoding with cached keys and values. Produces the same
//! logits as the teacher-forced graph, one position at a time.

use ndarray::{concatenate, s, Array1, Array2, Axis};

use super::tape::{gelu, normalize_rows, softmax_rows};
use super::{positions, Attention, Linear, Model, Norm};
use crate::error::Result;

/// Encoder output with per-branch cross-attention keys and values.
#[derive(Clone, Debug)]
pub struct EncoderMemory {
    pub encoded: Array2<f64>,
    /// `[branch][layer] -> (keys, values)`
    cross: Vec<Vec<(Array2<f64>, Array2<f64>)>>,
}

/// Self-attention cache of one hypothesis on one branch.
#[derive(Clone, Debug)]
pub struct DecoderState {
    branch: usize,
    layers: Vec<(Array2<f64>, Array2<f64>)>,
    len: usize,
}

impl DecoderState {
    pub fn branch(&self) -> usize {
        self.branch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Model {
    fn lin(&self, x: &Array2<f64>, l: Linear) -> Array2<f64> {
        x.dot(&self.params[l.w]) + &self.params[l.b]
    }

    fn ln(&self, x: &Array2<f64>, n: Norm) -> Array2<f64> {
        let (xhat, _) = normalize_rows(x.view());
        xhat * &self.params[n.gamma] + &self.params[n.beta]
    }

    fn attend(&self, q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, a: Attention) -> Array2<f64> {
        let heads = self.config.attention_heads;
        let dh = self.config.hidden_dim / heads;
        let outs: Vec<Array2<f64>> = (0..heads)
            .map(|h| {
                let cols = s![.., h * dh..(h + 1) * dh];
                let sc = q.slice(cols).dot(&k.slice(cols).t()) * (1.0 / (dh as f64).sqrt());
                softmax_rows(sc.view(), false).dot(&v.slice(cols))
            })
            .collect();
        let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
        self.lin(&concatenate(Axis(1), &views).expect("equal rows"), a.o)
    }

    /// Runs the encoder and precomputes cross-attention projections for all branches.
    pub fn memory(&self, source: &Array2<f64>) -> Result<EncoderMemory> {
        let encoded = self.encode(source)?;
        let cross = self
            .layout
            .branches
            .iter()
            .map(|br| {
                br.layers
                    .iter()
                    .map(|l| (self.lin(&encoded, l.cross_attn.k), self.lin(&encoded, l.cross_attn.v)))
                    .collect()
            })
            .collect();
        Ok(EncoderMemory { encoded, cross })
    }

    pub fn start(&self, branch: usize) -> Result<DecoderState> {
        self.check_branch(branch)?;
        let d = self.config.hidden_dim;
        Ok(DecoderState {
            branch,
            layers: vec![(Array2::zeros((0, d)), Array2::zeros((0, d))); self.config.decoder_layers],
            len: 0,
        })
    }

    /// Feeds one token and returns log-probabilities for the next position.
    pub fn step(&self, mem: &EncoderMemory, state: &mut DecoderState, token: u32) -> Result<Array1<f64>> {
        self.check_tokens(&[token])?;
        let br = &self.layout.branches[state.branch];
        let d = self.config.hidden_dim;
        let pos = positions(state.len + 1, d);
        let mut x = self.params[br.embed].slice(s![token as usize..token as usize + 1, ..]).to_owned()
            + pos.slice(s![state.len..state.len + 1, ..]);
        for (li, layer) in br.layers.iter().enumerate() {
            let h = self.ln(&x, layer.ln1);
            let q = self.lin(&h, layer.self_attn.q);
            let (ck, cv) = &mut state.layers[li];
            *ck = concatenate(Axis(0), &[ck.view(), self.lin(&h, layer.self_attn.k).view()]).expect("width");
            *cv = concatenate(Axis(0), &[cv.view(), self.lin(&h, layer.self_attn.v).view()]).expect("width");
            x = x + self.attend(&q, ck, cv, layer.self_attn);
            let h = self.ln(&x, layer.ln2);
            let q = self.lin(&h, layer.cross_attn.q);
            let (mk, mv) = &mem.cross[state.branch][li];
            x = x + self.attend(&q, mk, mv, layer.cross_attn);
            let h = self.ln(&x, layer.ln3);
            let f = self.lin(&self.lin(&h, layer.ff1).mapv(gelu), layer.ff2);
            x = x + f;
        }
        state.len += 1;
        let logits = self.lin(&self.ln(&x, br.ln), br.out).row(0).to_owned();
        let lse = super::tape::log_sum_exp(logits.iter().copied());
        Ok(logits.mapv(|l| l - lse))
    }
}
