use super::tensor::Tensor;
use super::ParamVector;
use crate::error::{ensure, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Parameters registered on a tape: one [`Var`] per layout segment.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub id: usize,
    pub vars: Vec<Var>,
}

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param { group: usize, offset: usize },
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode gradient record.
///
/// Every operation evaluates eagerly and appends a node holding its output.
/// [`Tape::backward`] replays the nodes in reverse and accumulates
/// adjoints into the registered parameter groups.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    group_lens: Vec<usize>,
}

/// Flat gradients, one buffer per registered [`ParamGroup`].
#[derive(Clone, Debug)]
pub struct Gradients {
    groups: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn of(&self, group: &ParamGroup) -> &[f64] {
        &self.groups[group.id]
    }

    pub fn into_group(mut self, group: &ParamGroup) -> Vec<f64> {
        std::mem::take(&mut self.groups[group.id])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Record a constant input; its gradient is never propagated anywhere.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    /// Register every segment of `params` as a differentiable leaf.
    pub fn params(&mut self, params: &ParamVector) -> ParamGroup {
        let id = self.group_lens.len();
        self.group_lens.push(params.len());
        let mut vars = Vec::with_capacity(params.layout().len());
        for (i, seg) in params.layout().iter().enumerate() {
            let offset = params.offset(i);
            let t = Tensor { rows: seg.rows, cols: seg.cols, data: params.segment(i).to_vec() };
            vars.push(self.push(t, Op::Param { group: id, offset }));
        }
        ParamGroup { id, vars }
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a (n x d) + row (1 x d)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rr, cr) = self.shape(row);
        ensure!(rr == 1 && cr == ca, Shape, "add_row {}x{} + {}x{}", ra, ca, rr, cr);
        let mut out = self.value(a).clone();
        out.add_row_inplace(&self.value(row).data);
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// `a (n x d) * row (1 x d)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rr, cr) = self.shape(row);
        ensure!(rr == 1 && cr == ca, Shape, "mul_row {}x{} * {}x{}", ra, ca, rr, cr);
        let r = self.value(row).data.clone();
        let mut out = self.value(a).clone();
        for chunk in out.data.chunks_mut(ca) {
            for (x, s) in chunk.iter_mut().zip(&r) {
                *x *= s;
            }
        }
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(sa == sb, Shape, "{} {:?} vs {:?}", name, sa, sb);
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.push(Tensor { rows: sa.0, cols: sa.1, data }, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "minimum", f64::min, Op::Min(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Row sums: `n x d -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.chunks(t.cols.max(1)).map(|r| r.iter().sum()).collect();
        let rows = t.rows;
        self.push(Tensor { rows, cols: 1, data }, Op::SumCols(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for r in out.data.chunks_mut(t.cols.max(1)) {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in r.iter_mut() {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Pick one column per row: `n x d -> n x 1`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        ensure!(index.len() == r, Shape, "gather: {} indices for {} rows", index.len(), r);
        ensure!(index.iter().all(|&i| i < c), Shape, "gather index out of range for {} columns", c);
        let t = self.value(a);
        let data = index.iter().enumerate().map(|(i, &j)| t.get(i, j)).collect();
        Ok(self.push(Tensor { rows: r, cols: 1, data }, Op::Gather(a, index.to_vec())))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {}x{}",
                rv.rows, rv.cols
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::scalar(1.0));
        let mut groups: Vec<Vec<f64>> = self.group_lens.iter().map(|&n| vec![0.0; n]).collect();

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param { group, offset } => {
                    let dst = &mut groups[*group][*offset..*offset + g.len()];
                    for (d, x) in dst.iter_mut().zip(&g.data) {
                        *d += x;
                    }
                }
                Op::MatMul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    accumulate(&mut adj, *a, g.matmul_t(vb));
                    accumulate(&mut adj, *b, va.t_matmul(&g));
                }
                Op::AddRow(a, row) => {
                    let mut rsum = vec![0.0; g.cols];
                    for r in g.data.chunks(g.cols) {
                        for (s, x) in rsum.iter_mut().zip(r) {
                            *s += x;
                        }
                    }
                    accumulate(&mut adj, *row, Tensor::row_vector(rsum));
                    accumulate(&mut adj, *a, g);
                }
                Op::MulRow(a, row) => {
                    let va = self.value(*a);
                    let vr = &self.value(*row).data;
                    let mut ga = g.clone();
                    let mut gr = vec![0.0; g.cols];
                    for (gx, ax) in ga.data.chunks_mut(g.cols).zip(va.data.chunks(g.cols)) {
                        for j in 0..gx.len() {
                            gr[j] += gx[j] * ax[j];
                            gx[j] *= vr[j];
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *row, Tensor::row_vector(gr));
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.map(|x| -x));
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    accumulate(&mut adj, *a, elementwise(&g, vb, |x, y| x * y));
                    accumulate(&mut adj, *b, elementwise(&g, va, |x, y| x * y));
                }
                Op::Min(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let mut ga = g.clone();
                    let mut gb = g;
                    for k in 0..ga.data.len() {
                        if va.data[k] <= vb.data[k] {
                            gb.data[k] = 0.0;
                        } else {
                            ga.data[k] = 0.0;
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, k) => accumulate(&mut adj, *a, g.map(|x| x * k)),
                Op::AddScalar(a) => accumulate(&mut adj, *a, g),
                Op::Tanh(a) => {
                    let y = &node.value;
                    accumulate(&mut adj, *a, elementwise(&g, y, |gx, yx| gx * (1.0 - yx * yx)));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    accumulate(&mut adj, *a, elementwise(&g, x, |gx, xx| if xx > 0.0 { gx } else { 0.0 }));
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    accumulate(&mut adj, *a, elementwise(&g, y, |gx, yx| gx * yx));
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    accumulate(&mut adj, *a, elementwise(&g, x, |gx, xx| 2.0 * gx * xx));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    let (lo, hi) = (*lo, *hi);
                    accumulate(
                        &mut adj,
                        *a,
                        elementwise(&g, x, |gx, xx| if xx < lo || xx > hi { 0.0 } else { gx }),
                    );
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut adj, *a, Tensor::filled(r, c, g.item()));
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    let n = (r * c).max(1) as f64;
                    accumulate(&mut adj, *a, Tensor::filled(r, c, g.item() / n));
                }
                Op::SumCols(a) => {
                    let (r, c) = self.shape(*a);
                    let mut out = Tensor::zeros(r, c);
                    for (row, gx) in out.data.chunks_mut(c.max(1)).zip(&g.data) {
                        row.iter_mut().for_each(|x| *x = *gx);
                    }
                    accumulate(&mut adj, *a, out);
                }
                Op::LogSoftmax(a) => {
                    // d/dx_j = g_j - softmax_j * sum_k g_k
                    let y = &node.value;
                    let c = y.cols.max(1);
                    let mut out = g.clone();
                    for (orow, yrow) in out.data.chunks_mut(c).zip(y.data.chunks(c)) {
                        let gs: f64 = orow.iter().sum();
                        for (o, yv) in orow.iter_mut().zip(yrow) {
                            *o -= yv.exp() * gs;
                        }
                    }
                    accumulate(&mut adj, *a, out);
                }
                Op::Gather(a, index) => {
                    let (r, c) = self.shape(*a);
                    let mut out = Tensor::zeros(r, c);
                    for (i, &j) in index.iter().enumerate() {
                        out.data[i * c + j] = g.data[i];
                    }
                    accumulate(&mut adj, *a, out);
                }
            }
        }
        Ok(Gradients { groups })
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.data.iter_mut().zip(&g.data) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::Segment;

    fn scalar_param(x: f64) -> ParamVector {
        ParamVector::new(vec![x], vec![Segment::new("x", 1, 1)]).unwrap()
    }

    #[test]
    fn square_gradient() {
        let p = scalar_param(3.0);
        let mut tape = Tape::new();
        let g = tape.params(&p);
        let y = tape.square(g.vars[0]);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.of(&g), &[6.0]);
    }

    #[test]
    fn uniform_log_softmax_gradient() {
        let a = 5;
        let p = ParamVector::new(vec![0.0; a], vec![Segment::new("logits", 1, a)]).unwrap();
        for k in 0..a {
            let mut tape = Tape::new();
            let g = tape.params(&p);
            let ls = tape.log_softmax(g.vars[0]);
            let pick = tape.gather(ls, &[k]).unwrap();
            let grads = tape.backward(pick).unwrap();
            for (j, &d) in grads.of(&g).iter().enumerate() {
                let expect = if j == k { 1.0 - 1.0 / a as f64 } else { -1.0 / a as f64 };
                assert!((d - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_has_zero_gradient() {
        let p = scalar_param(2.0);
        let mut tape = Tape::new();
        let g = tape.params(&p);
        let c = tape.constant(Tensor::scalar(7.0));
        let y = tape.square(c);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.of(&g), &[0.0]);
        assert_eq!(grads.of(&g).len(), p.len());
    }

    #[test]
    fn non_scalar_root_is_a_contract_error() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(c), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = x*x + x  ->  2x + 1
        let p = scalar_param(1.5);
        let mut tape = Tape::new();
        let g = tape.params(&p);
        let x = g.vars[0];
        let xx = tape.mul(x, x).unwrap();
        let y = tape.add(xx, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!((grads.of(&g)[0] - 4.0).abs() < 1e-15);
    }
}
