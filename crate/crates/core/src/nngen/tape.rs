//! Minimal reverse-mode differentiation over row-major matrices.

use ndarray::{s, Array2, ArrayView2, Axis};

pub type Var = usize;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    MulRow(Var, Var),
    AddTiled(Var, Var),
    AddGroup {
        a: Var,
        g: Var,
        rows: usize,
    },
    MulGroup {
        a: Var,
        g: Var,
        rows: usize,
    },
    Gelu(Var),
    Silu(Var),
    LayerNorm {
        a: Var,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        probs: Vec<Array2<f64>>,
    },
    PermuteRows(Var, Vec<usize>),
    GroupLinComb {
        a: Var,
        b: Var,
        ca: Vec<f64>,
        cb: Vec<f64>,
        rows: usize,
    },
    WeightedSse {
        a: Var,
        target: Array2<f64>,
        row_weights: Vec<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, v| a.max(*v));
        row.mapv_inplace(|v| (v - m).exp());
        let z: f64 = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v].value
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a + b` with `b` a single row broadcast over all rows of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddBias(a, b))
    }

    /// `a * g` elementwise with `g` a single broadcast row.
    pub fn mul_row(&mut self, a: Var, g: Var) -> Var {
        let v = self.value(a) * self.value(g);
        self.push(v, Op::MulRow(a, g))
    }

    /// `a` is a stack of groups of `p.nrows()` rows; `p` is added to each.
    pub fn add_tiled(&mut self, a: Var, p: Var) -> Var {
        let n = self.value(p).nrows();
        let mut v = self.value(a).clone();
        for mut chunk in v.axis_chunks_iter_mut(Axis(0), n) {
            chunk += self.value(p);
        }
        self.push(v, Op::AddTiled(a, p))
    }

    /// Row `i` of `g` is added to the `i`-th group of `rows` rows of `a`.
    pub fn add_group(&mut self, a: Var, g: Var, rows: usize) -> Var {
        let mut v = self.value(a).clone();
        for (i, mut chunk) in v.axis_chunks_iter_mut(Axis(0), rows).enumerate() {
            chunk += &self.value(g).row(i);
        }
        self.push(v, Op::AddGroup { a, g, rows })
    }

    /// The `i`-th group of `rows` rows of `a` scaled elementwise by row `i` of `g`.
    pub fn mul_group(&mut self, a: Var, g: Var, rows: usize) -> Var {
        let mut v = self.value(a).clone();
        for (i, mut chunk) in v.axis_chunks_iter_mut(Axis(0), rows).enumerate() {
            chunk *= &self.value(g).row(i);
        }
        self.push(v, Op::MulGroup { a, g, rows })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    /// Per-row standardisation without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in y.axis_iter_mut(Axis(0)) {
            let m = row.sum() / d;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - m) * is);
            inv_std.push(is);
        }
        self.push(y, Op::LayerNorm { a, inv_std })
    }

    /// Grouped multi-head scaled dot-product attention. `q` holds `groups`
    /// stacked blocks of query rows, `k` and `v` the matching key blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / heads;
        let nq = qv.nrows() / groups;
        let nk = kv.nrows() / groups;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros(qv.dim());
        let mut probs = Vec::with_capacity(groups * heads);
        for g in 0..groups {
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qg = qv.slice(s![g * nq..(g + 1) * nq, ..]);
                let kg = kv.slice(s![g * nk..(g + 1) * nk, ..]);
                let vg = vv.slice(s![g * nk..(g + 1) * nk, ..]);
                let mut sc = qg.slice(cols).dot(&kg.slice(cols).t()) * scale;
                softmax_rows(&mut sc);
                let o = sc.dot(&vg.slice(cols));
                out.slice_mut(s![g * nq..(g + 1) * nq, h * dh..(h + 1) * dh]).assign(&o);
                probs.push(sc);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
        )
    }

    /// Attention weights of an attention node, one matrix per group and head.
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<f64>]> {
        match &self.nodes[v].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `out[i] = a[perm[i]]`.
    pub fn permute_rows(&mut self, a: Var, perm: Vec<usize>) -> Var {
        let x = self.value(a);
        let v = x.select(Axis(0), &perm);
        self.push(v, Op::PermuteRows(a, perm))
    }

    /// Per-group `ca[g] * a + cb[g] * b` over groups of `rows` rows.
    pub fn group_lin_comb(&mut self, a: Var, b: Var, ca: Vec<f64>, cb: Vec<f64>, rows: usize) -> Var {
        let mut v = Array2::zeros(self.value(a).dim());
        for (g, mut chunk) in v.axis_chunks_iter_mut(Axis(0), rows).enumerate() {
            let r = s![g * rows..(g + 1) * rows, ..];
            chunk.assign(&(&self.value(a).slice(r) * ca[g] + &self.value(b).slice(r) * cb[g]));
        }
        self.push(v, Op::GroupLinComb { a, b, ca, cb, rows })
    }

    /// `sum_i w_i * sum_j (a_ij - target_ij)^2` as a 1x1 node.
    pub fn weighted_sse(&mut self, a: Var, target: Array2<f64>, row_weights: Vec<f64>) -> Var {
        let x = self.value(a);
        let mut acc = 0.0;
        for (i, (xr, tr)) in x.outer_iter().zip(target.outer_iter()).enumerate() {
            let s: f64 = xr.iter().zip(tr.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
            acc += row_weights[i] * s;
        }
        self.push(
            Array2::from_elem((1, 1), acc),
            Op::WeightedSse {
                a,
                target,
                row_weights,
            },
        )
    }

    /// Gradients of the 1x1 node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(Array2::ones((1, 1)));
        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v] {
                Some(x) => *x += &g,
                slot => *slot = Some(g),
            }
        }
        for i in (0..=out).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, dy.dot(&self.value(*b).t()));
                    acc(&mut grads, *b, self.value(*a).t().dot(&dy));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::AddBias(a, b) => {
                    acc(&mut grads, *b, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, dy);
                }
                Op::MulRow(a, g) => {
                    let gg = (&dy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *g, gg);
                    acc(&mut grads, *a, &dy * self.value(*g));
                }
                Op::AddTiled(a, p) => {
                    let n = self.value(*p).nrows();
                    let mut gp = Array2::zeros(self.value(*p).dim());
                    for chunk in dy.axis_chunks_iter(Axis(0), n) {
                        gp += &chunk;
                    }
                    acc(&mut grads, *p, gp);
                    acc(&mut grads, *a, dy);
                }
                Op::AddGroup { a, g, rows } => {
                    let mut gg = Array2::zeros(self.value(*g).dim());
                    for (k, chunk) in dy.axis_chunks_iter(Axis(0), *rows).enumerate() {
                        gg.row_mut(k).assign(&chunk.sum_axis(Axis(0)));
                    }
                    acc(&mut grads, *g, gg);
                    acc(&mut grads, *a, dy);
                }
                Op::MulGroup { a, g, rows } => {
                    let av = self.value(*a);
                    let gv = self.value(*g);
                    let mut gg = Array2::zeros(gv.dim());
                    let mut ga = dy.clone();
                    for (k, (chunk, mut gchunk)) in av
                        .axis_chunks_iter(Axis(0), *rows)
                        .zip(ga.axis_chunks_iter_mut(Axis(0), *rows))
                        .enumerate()
                    {
                        let prod = &gchunk * &chunk;
                        gg.row_mut(k).assign(&prod.sum_axis(Axis(0)));
                        gchunk *= &gv.row(k);
                    }
                    acc(&mut grads, *g, gg);
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let g = &dy * &self.value(*a).mapv(gelu_grad);
                    acc(&mut grads, *a, g);
                }
                Op::Silu(a) => {
                    let d = self.value(*a).mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    acc(&mut grads, *a, &dy * &d);
                }
                Op::LayerNorm { a, inv_std } => {
                    let y = &node.value;
                    let d = y.ncols() as f64;
                    let mut dx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let (yr, gr) = (y.row(r), dy.row(r));
                        let mg = gr.sum() / d;
                        let mgy = gr.iter().zip(yr.iter()).map(|(p, q)| p * q).sum::<f64>() / d;
                        for c in 0..y.ncols() {
                            dx[[r, c]] = inv_std[r] * (gr[c] - mg - yr[c] * mgy);
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    groups,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, *groups, probs, &dy);
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::PermuteRows(a, perm) => {
                    let mut g = Array2::zeros(self.value(*a).dim());
                    for (i, &p) in perm.iter().enumerate() {
                        let mut row = g.row_mut(p);
                        row += &dy.row(i);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::GroupLinComb { a, b, ca, cb, rows } => {
                    let mut ga = dy.clone();
                    let mut gb = dy;
                    for (g, mut chunk) in ga.axis_chunks_iter_mut(Axis(0), *rows).enumerate() {
                        chunk *= ca[g];
                    }
                    for (g, mut chunk) in gb.axis_chunks_iter_mut(Axis(0), *rows).enumerate() {
                        chunk *= cb[g];
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::WeightedSse {
                    a,
                    target,
                    row_weights,
                } => {
                    let s = dy[[0, 0]];
                    let mut g = (self.value(*a) - target) * 2.0 * s;
                    for (i, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
                        row *= row_weights[i];
                    }
                    acc(&mut grads, *a, g);
                }
            }
        }
        grads
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        probs: &[Array2<f64>],
        dy: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / heads;
        let nq = qv.nrows() / groups;
        let nk = kv.nrows() / groups;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(qv.dim());
        let mut dk = Array2::zeros(kv.dim());
        let mut dv = Array2::zeros(vv.dim());
        for g in 0..groups {
            for h in 0..heads {
                let p = &probs[g * heads + h];
                let qr = s![g * nq..(g + 1) * nq, h * dh..(h + 1) * dh];
                let kr = s![g * nk..(g + 1) * nk, h * dh..(h + 1) * dh];
                let dout: ArrayView2<f64> = dy.slice(qr);
                dv.slice_mut(kr).assign(&p.t().dot(&dout));
                let dp = dout.dot(&vv.slice(kr).t());
                let mut ds = dp.clone();
                for r in 0..nq {
                    let dot: f64 = dp.row(r).iter().zip(p.row(r).iter()).map(|(a, b)| a * b).sum();
                    for c in 0..nk {
                        ds[[r, c]] = p[[r, c]] * (dp[[r, c]] - dot);
                    }
                }
                ds *= scale;
                dq.slice_mut(qr).assign(&ds.dot(&kv.slice(kr)));
                dk.slice_mut(kr).assign(&ds.t().dot(&qv.slice(qr)));
            }
        }
        (dq, dk, dv)
    }
}
