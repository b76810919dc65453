use ndarray::{s, Array2, Axis, Zip};

use super::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ShiftRows { x: Var, shift: usize, segment: usize },
    SeqIm2Col { x: Var, seq_len: usize, kernel: usize },
    Reshape(Var),
    RepeatRows(Var, usize),
    SoftmaxRows(Var),
    WeightedSum { alpha: Var, memory: Var },
    /// Scalar loss with its gradient w.r.t. `input` precomputed.
    Loss { input: Var, grad: Array2<f64> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Eagerly evaluated computation tape. Values are computed as nodes are
/// added; [`Graph::backward`] walks the tape in reverse.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_nodes[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + row`, broadcasting a `1 x m` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `a * col`, broadcasting an `n x 1` column over every column of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &rows);
        self.push(v, Op::GatherRows(a, rows))
    }

    /// Delays rows by `shift` inside consecutive blocks of `segment` rows,
    /// filling the first `shift` rows of each block with zeros.
    pub fn shift_rows(&mut self, x: Var, shift: usize, segment: usize) -> Var {
        let src = self.value(x);
        let mut v = Array2::zeros(src.raw_dim());
        for start in (0..src.nrows()).step_by(segment) {
            let end = (start + segment).min(src.nrows());
            if start + shift < end {
                v.slice_mut(s![start + shift..end, ..])
                    .assign(&src.slice(s![start..end - shift, ..]));
            }
        }
        self.push(v, Op::ShiftRows { x, shift, segment })
    }

    /// Centred 1-D convolution patches. `x` stacks sequences of `seq_len`
    /// rows; output row `r` holds the `kernel` neighbours of `r` within its
    /// own sequence (zero outside), laid out tap-major.
    pub fn seq_im2col(&mut self, x: Var, seq_len: usize, kernel: usize) -> Var {
        let src = self.value(x);
        let (n, c) = src.dim();
        let pad = (kernel - 1) / 2;
        let mut v = Array2::zeros((n, kernel * c));
        for r in 0..n {
            let t = r % seq_len;
            let base = r - t;
            for k in 0..kernel {
                let tt = t as isize + k as isize - pad as isize;
                if tt < 0 || tt >= seq_len as isize {
                    continue;
                }
                v.slice_mut(s![r, k * c..(k + 1) * c])
                    .assign(&src.row(base + tt as usize));
            }
        }
        self.push(v, Op::SeqIm2Col { x, seq_len, kernel })
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, cols))
            .expect("reshape: size mismatch");
        self.push(v, Op::Reshape(a))
    }

    /// Repeats each row `n` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let src = self.value(a);
        let idx: Vec<usize> = (0..src.nrows()).flat_map(|i| std::iter::repeat_n(i, n)).collect();
        let v = src.select(Axis(0), &idx);
        self.push(v, Op::RepeatRows(a, n))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row /= z;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// `out[b] = sum_t alpha[b, t] * memory[b * L + t]` with `alpha: B x L`.
    pub fn weighted_sum(&mut self, alpha: Var, memory: Var) -> Var {
        let a = self.value(alpha);
        let m = self.value(memory);
        let (b, l) = a.dim();
        let mut v = Array2::zeros((b, m.ncols()));
        for i in 0..b {
            let block = m.slice(s![i * l..(i + 1) * l, ..]);
            v.row_mut(i).assign(&a.row(i).dot(&block));
        }
        self.push(v, Op::WeightedSum { alpha, memory })
    }

    /// Records a scalar loss whose gradient w.r.t. `input` the caller has
    /// already computed.
    pub fn loss(&mut self, input: Var, value: f64, grad: Array2<f64>) -> Var {
        debug_assert_eq!(grad.dim(), self.value(input).dim());
        self.push(Array2::from_elem((1, 1), value), Op::Loss { input, grad })
    }

    /// `sum(mask * (pred - target)^2) / denom`.
    pub fn masked_mse(&mut self, pred: Var, target: &Array2<f64>, mask: &Array2<f64>, denom: f64) -> Var {
        let diff = (self.value(pred) - target) * mask;
        let value = diff.iter().map(|d| d * d).sum::<f64>() / denom;
        let grad = diff * (2.0 / denom);
        self.loss(pred, value, grad)
    }

    /// `sum(mask * bce_with_logits(z, y)) / denom`.
    pub fn masked_bce_logits(&mut self, logits: Var, target: &Array2<f64>, mask: &Array2<f64>, denom: f64) -> Var {
        let z = self.value(logits);
        let mut value = 0.0;
        let mut grad = Array2::zeros(z.raw_dim());
        Zip::from(&mut grad)
            .and(z)
            .and(target)
            .and(mask)
            .for_each(|g, &z, &y, &m| {
                if m != 0.0 {
                    value += m * (softplus(z) - y * z);
                    *g = m * (sigmoid(z) - y) / denom;
                }
            });
        self.loss(logits, value / denom, grad)
    }

    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Gradients of the scalar `loss` w.r.t. every parameter touched by the
    /// tape, indexed by parameter id.
    pub fn backward(&self, loss: Var) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Array2<f64>>> = vec![None; self.params.len()];
        grads[loss.0] = Some(Array2::ones(self.nodes[loss.0].value.raw_dim()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => acc_into(&mut param_grads[*id], g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, r) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulCol(a, c) => {
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g * self.value(*c);
                    acc(&mut grads, *c, gc);
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|g, &y| {
                        if y <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ShiftRows { x, shift, segment } => {
                    let n = g.nrows();
                    let mut ga = Array2::zeros(g.raw_dim());
                    for start in (0..n).step_by(*segment) {
                        let end = (start + segment).min(n);
                        if start + shift < end {
                            ga.slice_mut(s![start..end - shift, ..])
                                .assign(&g.slice(s![start + shift..end, ..]));
                        }
                    }
                    acc(&mut grads, *x, ga);
                }
                Op::SeqIm2Col { x, seq_len, kernel } => {
                    let src = self.value(*x);
                    let (n, c) = src.dim();
                    let pad = (kernel - 1) / 2;
                    let mut ga = Array2::zeros((n, c));
                    for r in 0..n {
                        let t = r % seq_len;
                        let base = r - t;
                        for k in 0..*kernel {
                            let tt = t as isize + k as isize - pad as isize;
                            if tt < 0 || tt >= *seq_len as isize {
                                continue;
                            }
                            let mut dst = ga.row_mut(base + tt as usize);
                            dst += &g.slice(s![r, k * c..(k + 1) * c]);
                        }
                    }
                    acc(&mut grads, *x, ga);
                }
                Op::Reshape(a) => {
                    let ga = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(self.value(*a).raw_dim())
                        .expect("reshape backward");
                    acc(&mut grads, *a, ga);
                }
                Op::RepeatRows(a, n) => {
                    let src = self.value(*a);
                    let mut ga = Array2::zeros(src.raw_dim());
                    for i in 0..src.nrows() {
                        ga.row_mut(i)
                            .assign(&g.slice(s![i * n..(i + 1) * n, ..]).sum_axis(Axis(0)));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|v, &yv| *v -= yv * dot);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::WeightedSum { alpha, memory } => {
                    let a = self.value(*alpha);
                    let m = self.value(*memory);
                    let (b, l) = a.dim();
                    let mut galpha = Array2::zeros((b, l));
                    let mut gmem = Array2::zeros(m.raw_dim());
                    for i in 0..b {
                        let block = m.slice(s![i * l..(i + 1) * l, ..]);
                        galpha.row_mut(i).assign(&block.dot(&g.row(i)));
                        for t in 0..l {
                            let mut dst = gmem.row_mut(i * l + t);
                            dst.scaled_add(a[[i, t]], &g.row(i));
                        }
                    }
                    acc(&mut grads, *alpha, galpha);
                    acc(&mut grads, *memory, gmem);
                }
                Op::Loss { input, grad } => {
                    acc(&mut grads, *input, grad * g[[0, 0]]);
                }
            }
        }
        param_grads
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    acc_into(&mut grads[v.0], g);
}

fn acc_into(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
