//! Tape-based reverse-mode differentiation over matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! referenced by [`ParamId`] and read directly from a borrowed
//! [`ParamStore`], so building a graph never copies weights. Calling
//! [`Graph::backward`] on a `1 x 1` node walks the tape in reverse and
//! returns one gradient per parameter touched.

use rand::Rng;

use crate::tensor::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Matrix<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<F>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<F> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix<F>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Matrix::cast).collect(),
        }
    }
}

/// Gradients aligned with a [`ParamStore`]; untouched parameters stay `None`.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Matrix<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn empty(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn accumulate(&mut self, id: ParamId, g: Matrix<F>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn merge(&mut self, other: Gradients<F>) {
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn global_norm(&self) -> F {
        self.grads
            .iter()
            .flatten()
            .map(Matrix::sum_sq)
            .sum::<F>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix<F>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Param(ParamId),
    Constant,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Affine(Var, F),
    Relu(Var),
    Dropout(Var, Vec<F>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix<F>,
        rstd: Vec<F>,
    },
    Softmax(Var),
    LogSoftmax(Var, Option<Vec<bool>>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    PickSum(Var, Vec<(usize, usize)>),
}

struct Node<F> {
    op: Op<F>,
    value: Matrix<F>,
}

pub struct Graph<'p, F> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
}

const LN_EPS: f64 = 1e-5;

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix<F> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    fn push(&mut self, op: Op<F>, value: Matrix<F>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Op::Param(id), Matrix::zeros(0, 0))
    }

    pub fn constant(&mut self, value: Matrix<F>) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(Op::MatMulBt(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    /// Adds the `1 x cols` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut v = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!((1, v.cols()), b.shape(), "bias shape");
        for r in 0..v.rows() {
            for (x, &y) in v.row_mut(r).iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.push(Op::AddRow(a, bias), v)
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: F, shift: F) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = *x * scale + shift;
        }
        self.push(Op::Affine(a, scale), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            if *x < F::zero() {
                *x = F::zero();
            }
        }
        self.push(Op::Relu(a), v)
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let mut v = self.value(a).clone();
        for (x, &m) in v.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        self.push(Op::Dropout(a, mask), v)
    }

    /// Row-wise layer normalization with `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = F::of(cols as f64);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let s = F::one() / (var + F::of(LN_EPS)).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, &gv), &bv) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            out,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.push(Op::Softmax(a), v)
    }

    /// Row-wise log-softmax. Entries where `mask` is `false` get `-inf`
    /// and receive no gradient. Every row must keep at least one entry.
    pub fn log_softmax_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Var {
        let mut v = self.value(a).clone();
        if let Some(m) = &mask {
            assert_eq!(m.len(), v.len(), "mask shape");
        }
        let cols = v.cols();
        for r in 0..v.rows() {
            let allowed = |c: usize| mask.as_ref().map_or(true, |m| m[r * cols + c]);
            let row = v.row_mut(r);
            let mut max = F::neg_infinity();
            for (c, &x) in row.iter().enumerate() {
                if allowed(c) && x > max {
                    max = x;
                }
            }
            let mut s = F::zero();
            for (c, &x) in row.iter().enumerate() {
                if allowed(c) {
                    s += (x - max).exp();
                }
            }
            let lse = max + s.ln();
            for (c, x) in row.iter_mut().enumerate() {
                *x = if allowed(c) { *x - lse } else { F::neg_infinity() };
            }
        }
        self.push(Op::LogSoftmax(a, mask), v)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut v = Matrix::zeros(idx.len(), src.cols());
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).copy_from_slice(src.row(r));
        }
        self.push(Op::GatherRows(a, idx), v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let src = self.value(a);
        let mut v = Matrix::zeros(src.rows(), width);
        for r in 0..src.rows() {
            v.row_mut(r).copy_from_slice(&src.row(r)[start..start + width]);
        }
        self.push(Op::SliceCols(a, start), v)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        self.push(Op::ConcatCols(parts), v)
    }

    /// Sum of the selected `(row, col)` entries, as a `1 x 1` node.
    pub fn pick_sum(&mut self, a: Var, picks: Vec<(usize, usize)>) -> Var {
        let m = self.value(a);
        let s: F = picks.iter().map(|&(r, c)| m.get(r, c)).sum();
        self.push(Op::PickSum(a, picks), Matrix::filled(1, 1, s))
    }

    /// Reverse sweep from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix<F>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Matrix::filled(1, 1, F::one()));
        let mut out = Gradients::empty(self.params.len());

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param(id) => out.accumulate(*id, g),
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(*b));
                    let gb = self.value(*a).matmul_at(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_at(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Affine(a, s) => {
                    let mut g = g;
                    g.scale(*s);
                    acc(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let mut g = g;
                    for (x, &y) in g.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= F::zero() {
                            *x = F::zero();
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Dropout(a, mask) => {
                    let mut g = g;
                    for (x, &m) in g.data_mut().iter_mut().zip(mask) {
                        *x *= m;
                    }
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = g.shape();
                    let n = F::of(cols as f64);
                    let mut ggain = Matrix::zeros(1, cols);
                    let mut gbias = Matrix::zeros(1, cols);
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xhat = F::zero();
                        for c in 0..cols {
                            ggain.data_mut()[c] += gr[c] * xr[c];
                            gbias.data_mut()[c] += gr[c];
                            let d = gr[c] * gv.data()[c];
                            sum_dxhat += d;
                            sum_dxhat_xhat += d * xr[c];
                        }
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            let d = gr[c] * gv.data()[c];
                            out[c] = rstd[r] * (d - sum_dxhat / n - xr[c] * sum_dxhat_xhat / n);
                        }
                    }
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, gbias);
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for (o, (&p, &q)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (q - s);
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::LogSoftmax(a, mask) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut gx = Matrix::zeros(y.rows(), cols);
                    for r in 0..y.rows() {
                        let allowed = |c: usize| mask.as_ref().map_or(true, |m| m[r * cols + c]);
                        let gr = g.row(r);
                        let s: F = (0..cols).filter(|&c| allowed(c)).map(|c| gr[c]).sum();
                        let yr = y.row(r);
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            if allowed(c) {
                                *o = gr[c] - yr[c].exp() * s;
                            }
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::GatherRows(a, idx) => {
                    let src = self.value(*a);
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, &x) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::PickSum(a, picks) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    let s = g.get(0, 0);
                    for &(r, c) in picks {
                        let cur = gx.get(r, c);
                        gx.set(r, c, cur + s);
                    }
                    acc(&mut grads, *a, gx);
                }
            }
        }
        out
    }
}

fn acc<F: Real>(grads: &mut [Option<Matrix<F>>], v: Var, g: Matrix<F>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Central differences of `f` with respect to every entry of every parameter.
    fn check(store: &ParamStore<f64>, f: impl Fn(&mut Graph<'_, f64>) -> Var) {
        let g = {
            let mut graph = Graph::new(store);
            let root = f(&mut graph);
            graph.backward(root)
        };
        let h = 1e-6;
        for id in store.ids() {
            let analytic = g.get(id).cloned().unwrap_or_else(|| {
                let m = store.get(id);
                Matrix::zeros(m.rows(), m.cols())
            });
            for k in 0..store.get(id).len() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[k] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[k] -= h;
                let fp = {
                    let mut gr = Graph::new(&plus);
                    let r = f(&mut gr);
                    gr.scalar(r)
                };
                let fm = {
                    let mut gr = Graph::new(&minus);
                    let r = f(&mut gr);
                    gr.scalar(r)
                };
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic.data()[k];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                    "{}[{k}]: analytic {a} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let x = store.add("x", random(3, 4, &mut rng));
        let w = store.add("w", random(4, 4, &mut rng));
        let b = store.add("b", random(1, 4, &mut rng));
        let gain = store.add("gain", random(1, 4, &mut rng));
        let emb = store.add("emb", random(5, 4, &mut rng));
        check(&store, |g| {
            let xv = g.param(x);
            let wv = g.param(w);
            let bv = g.param(b);
            let h = g.matmul(xv, wv);
            let h = g.add_row(h, bv);
            let h = g.relu(h);
            let gv = g.param(gain);
            let h = g.layer_norm(h, gv, bv);
            let left = g.slice_cols(h, 0, 2);
            let right = g.slice_cols(h, 2, 2);
            let scores = g.matmul_bt(left, right);
            let p = g.softmax_rows(scores);
            let mixed = g.matmul(p, right);
            let cat = g.concat_cols(vec![mixed, left]);
            let e = g.param(emb);
            let rows = g.gather_rows(e, vec![1, 3, 1]);
            let both = g.add(cat, rows);
            let both = g.affine(both, 0.7, 0.1);
            let mask = (0..12).map(|i| i % 4 != 3).collect();
            let lp = g.log_softmax_rows(both, Some(mask));
            let s1 = g.pick_sum(lp, vec![(0, 0), (1, 2), (2, 1), (0, 0)]);
            let lp2 = g.log_softmax_rows(scores, None);
            let s2 = g.pick_sum(lp2, vec![(2, 0)]);
            g.add(s1, s2)
        });
    }

    #[test]
    fn masked_entries_are_neg_infinity() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
        let lp = g.log_softmax_rows(a, Some(vec![true, false, true]));
        let v = g.value(lp);
        assert_eq!(v.get(0, 1), f64::NEG_INFINITY);
        let total: f64 = [0, 2].iter().map(|&c| v.get(0, c).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Matrix::filled(2, 2, 1.5));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(g.dropout(a, 0.0, &mut rng), a);
        let d = g.dropout(a, 0.5, &mut rng);
        for &x in g.value(d).data() {
            assert!(x == 0.0 || (x - 3.0).abs() < 1e-12);
        }
    }
}
