//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Graph`] records one forward computation. Parameters are borrowed from
//! the caller and never copied; [`Graph::backward`] adds their gradients into
//! a caller-owned buffer.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gather(Var, Vec<u32>),
    ColSlice(Var, usize),
    HConcat(Vec<Var>),
    Dropout(Var, Array2<f64>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<u32>>,
        probs: Array2<f64>,
        count: usize,
    },
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p [Array2<f64>],
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Array2<f64>]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        match &self.nodes[v.0] {
            Node { op: Op::Param(i), .. } => self.params[*i].view(),
            Node { value, .. } => value.as_ref().expect("node value").view(),
        }
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) + &self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = &self.value(a) + &self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = &self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (xhat, inv_std) = normalize_rows(self.value(x));
        let v = &xhat * &self.value(gamma) + self.value(beta);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax. With `causal`, entry (i, j) is masked when j > i.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let v = softmax_rows(self.value(a), causal);
        self.push(v, Op::Softmax(a))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (mut row, &id) in v.rows_mut().into_iter().zip(ids) {
            row.assign(&t.row(id as usize));
        }
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::ColSlice(a, start))
    }

    pub fn hconcat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::HConcat(parts.to_vec()))
    }

    /// Inverted dropout with a precomputed keep mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let v = &self.value(a) * &mask;
        self.push(v, Op::Dropout(a, mask))
    }

    /// Mean token cross-entropy; `None` targets are ignored. Returns a 1×1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.nrows(), targets.len(), "one target per logit row");
        let probs = softmax_rows(l, false);
        let mut total = 0.0;
        let mut count = 0;
        for (row, t) in l.rows().into_iter().zip(targets) {
            if let Some(t) = t {
                total += log_sum_exp(row.iter().copied()) - row[*t as usize];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Back-propagates `scale · d(root)` and adds parameter gradients into
    /// `grads` (indexed like the parameter slice).
    pub fn backward(&self, root: Var, grads: &mut [Array2<f64>], scale: f64) {
        let n = root.0 + 1;
        let mut g: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        let rshape = self.value(root).raw_dim();
        g[root.0] = Some(Array2::from_elem(rshape, scale));
        for i in (0..n).rev() {
            let Some(dy) = g[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(p) => grads[*p] += &dy,
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&dy);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = dy.dot(&self.value(*b));
                    let db = dy.t().dot(&self.value(*a));
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, dy.clone());
                    acc(&mut g, *a, dy);
                }
                Op::AddRow(a, row) => {
                    acc(&mut g, *row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut g, *a, dy);
                }
                Op::Scale(a, k) => acc(&mut g, *a, dy * *k),
                Op::Gelu(a) => {
                    let mut d = dy;
                    Zip::from(&mut d)
                        .and(&self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    acc(&mut g, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    acc(&mut g, *beta, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        &mut g,
                        *gamma,
                        (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let mut dxhat = dy * self.value(*gamma);
                    let n = dxhat.ncols() as f64;
                    for ((mut row, xh), &is) in dxhat.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
                        let m1 = row.sum() / n;
                        let m2 = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                        Zip::from(&mut row)
                            .and(&xh)
                            .for_each(|d, &h| *d = is * (*d - m1 - h * m2));
                    }
                    acc(&mut g, *x, dxhat);
                }
                Op::Softmax(a) => {
                    let p = self.nodes[i].value.as_ref().expect("softmax value");
                    let mut d = dy;
                    for (mut row, prow) in d.rows_mut().into_iter().zip(p.rows()) {
                        let dot: f64 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                        Zip::from(&mut row).and(&prow).for_each(|d, &p| *d = p * (*d - dot));
                    }
                    acc(&mut g, *a, d);
                }
                Op::Gather(table, ids) => {
                    let mut d = Array2::zeros(self.value(*table).raw_dim());
                    for (row, &id) in dy.rows().into_iter().zip(ids) {
                        let mut dst = d.row_mut(id as usize);
                        dst += &row;
                    }
                    acc(&mut g, *table, d);
                }
                Op::ColSlice(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + dy.ncols()]).assign(&dy);
                    acc(&mut g, *a, d);
                }
                Op::HConcat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut g, p, dy.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::Dropout(a, mask) => acc(&mut g, *a, dy * mask),
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    if *count == 0 {
                        continue;
                    }
                    let k = dy[[0, 0]] / *count as f64;
                    let mut d = probs.clone();
                    for (mut row, t) in d.rows_mut().into_iter().zip(targets) {
                        match t {
                            Some(t) => {
                                row[*t as usize] -= 1.0;
                                row *= k;
                            }
                            None => row.fill(0.0),
                        }
                    }
                    acc(&mut g, *logits, d);
                }
            }
        }
    }
}

fn acc(g: &mut [Option<Array2<f64>>], v: Var, d: Array2<f64>) {
    match &mut g[v.0] {
        Some(x) => *x += &d,
        slot => *slot = Some(d),
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn normalize_rows(x: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<f64>) {
    let n = x.ncols() as f64;
    let mut out = x.to_owned();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * is);
        inv.push(is);
    }
    (out, inv)
}

pub fn softmax_rows(x: ArrayView2<'_, f64>, causal: bool) -> Array2<f64> {
    let mut out = x.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let live = if causal { i + 1 } else { row.len() };
        let m = row.iter().take(live).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j < live {
                *v = (*v - m).exp();
                z += *v;
            } else {
                *v = 0.0;
            }
        }
        row /= z;
    }
    out
}
