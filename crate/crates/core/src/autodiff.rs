//! A small tensor-level reverse-mode differentiation tape.
//!
//! Every value is a dense `f64` matrix; scalars are `1 x 1`. Operations are
//! recorded in evaluation order and [`Tape::backward`] walks them in
//! reverse, accumulating vector-Jacobian products. The op set is exactly
//! what the encoder and loss terms need; the pairwise Gaussian correlation,
//! channel-wise propagation, the HSIC estimator and the two softmax losses
//! are single nodes with hand-derived adjoints.

use ndarray::{Array2, Axis};

use crate::kernel::{frobenius_inner, row_distance, MaternParams};

pub type Tensor = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    AffineRows {
        x: Var,
        scale: Vec<f64>,
    },
    GroupMean {
        x: Var,
        groups: usize,
    },
    GroupMax {
        x: Var,
        source_rows: Vec<usize>,
    },
    MeanRows(Var),
    PairwiseGauss {
        x: Var,
        delta: f64,
    },
    Propagate {
        adj: Var,
        h: Var,
        joints: usize,
    },
    StackRows(Vec<Var>),
    ConcatCols(Var, Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    KlDiv {
        student: Var,
        teacher: Var,
        temperature: f64,
        log_p: Tensor,
        log_q: Tensor,
    },
    Hsic {
        z: Var,
        centered_labels: Tensor,
        params: MaternParams,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, or `None` when the
    /// root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn scalar(v: f64) -> Tensor {
    Array2::from_elem((1, 1), v)
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    log_softmax_rows(x).mapv(f64::exp)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// An input: a parameter or a constant. Gradients flow into leaves but not
    /// beyond them.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// `a + b` with the single row of `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "add_row expects a row vector");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::AddRow(a, b))
    }

    /// `a * b` elementwise with the single row of `b` broadcast.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "mul_row expects a row vector");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::MulRow(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// `y[r, c] = scale[r] * x[r, c] + offset[r]` with constant `scale`, `offset`.
    pub fn affine_rows(&mut self, x: Var, scale: Vec<f64>, offset: &[f64]) -> Var {
        let mut value = self.value(x).clone();
        assert_eq!(value.nrows(), scale.len());
        assert_eq!(value.nrows(), offset.len());
        for ((mut row, s), o) in value.rows_mut().into_iter().zip(&scale).zip(offset) {
            row.mapv_inplace(|v| s * v + o);
        }
        self.push(value, Op::AffineRows { x, scale })
    }

    /// Mean over `groups` stacked blocks: `(G*N) x C -> N x C`.
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let n = xv.nrows() / groups;
        assert_eq!(n * groups, xv.nrows());
        let mut value = Array2::zeros((n, xv.ncols()));
        for g in 0..groups {
            value += &xv.slice(ndarray::s![g * n..(g + 1) * n, ..]);
        }
        value /= groups as f64;
        self.push(value, Op::GroupMean { x, groups })
    }

    /// Elementwise max over `groups` stacked blocks. Ties go to the earliest block.
    pub fn group_max(&mut self, x: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let n = xv.nrows() / groups;
        assert_eq!(n * groups, xv.nrows());
        let c = xv.ncols();
        let mut value = Array2::from_elem((n, c), f64::NEG_INFINITY);
        let mut source_rows = vec![0; n * c];
        for g in 0..groups {
            for j in 0..n {
                for k in 0..c {
                    let v = xv[[g * n + j, k]];
                    if v > value[[j, k]] {
                        value[[j, k]] = v;
                        source_rows[j * c + k] = g * n + j;
                    }
                }
            }
        }
        self.push(value, Op::GroupMax { x, source_rows })
    }

    /// Column means as a `1 x C` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a))
    }

    /// `N x C -> N^2 x C`, row `i*N + j` holding `exp(-(x_i - x_j)^2 / (2 delta^2))`.
    pub fn pairwise_gauss(&mut self, x: Var, delta: f64) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.dim();
        let mut value = Array2::zeros((n * n, c));
        for i in 0..n {
            for j in 0..n {
                for k in 0..c {
                    value[[i * n + j, k]] =
                        crate::refinement::gaussian(xv[[i, k]] - xv[[j, k]], delta);
                }
            }
        }
        self.push(value, Op::PairwiseGauss { x, delta })
    }

    /// Channel-wise propagation: `adj` is `N^2 x C'` (row `i*N + j`), `h` is
    /// `(T*N) x C'`; output row `t*N + i`, channel `c` is
    /// `sum_j adj[i*N + j, c] * h[t*N + j, c]`.
    pub fn propagate(&mut self, adj: Var, h: Var, joints: usize) -> Var {
        let av = self.value(adj);
        let hv = self.value(h);
        let n = joints;
        let c = hv.ncols();
        assert_eq!(av.dim(), (n * n, c));
        let t = hv.nrows() / n;
        let mut value = Array2::zeros((t * n, c));
        for f in 0..t {
            for i in 0..n {
                for k in 0..c {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += av[[i * n + j, k]] * hv[[f * n + j, k]];
                    }
                    value[[f * n + i, k]] = acc;
                }
            }
        }
        self.push(value, Op::Propagate { adj, h, joints })
    }

    pub fn stack_rows(&mut self, rows: Vec<Var>) -> Var {
        let views: Vec<_> = rows.iter().map(|&r| self.value(r).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("rows share a width");
        self.push(value, Op::StackRows(rows))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("equal row counts");
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::Softmax(a))
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), labels.len());
        let log_p = log_softmax_rows(lv);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &y)| log_p[[i, y]])
            .sum::<f64>()
            / labels.len() as f64;
        let probs = log_p.mapv(f64::exp);
        self.push(
            scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Batch mean of `KL(softmax(student / P) || softmax(teacher / P))`.
    pub fn kl_div(&mut self, student: Var, teacher: Var, temperature: f64) -> Var {
        let log_p = log_softmax_rows(&(self.value(student) / temperature));
        let log_q = log_softmax_rows(&(self.value(teacher) / temperature));
        let n = log_p.nrows() as f64;
        let loss = log_p
            .iter()
            .zip(log_q.iter())
            .map(|(lp, lq)| lp.exp() * (lp - lq))
            .sum::<f64>()
            / n;
        self.push(
            scalar(loss),
            Op::KlDiv {
                student,
                teacher,
                temperature,
                log_p,
                log_q,
            },
        )
    }

    /// HSIC between the rows of `z` (Matérn kernel) and a label kernel that
    /// has already been centered.
    pub fn hsic(&mut self, z: Var, centered_labels: Tensor, params: MaternParams) -> Var {
        let zv = self.value(z);
        let n = zv.nrows();
        assert_eq!(centered_labels.dim(), (n, n));
        let k = crate::kernel::kernel_matrix(zv.view(), &params)
            .expect("validated kernel parameters")
            .values;
        let value = frobenius_inner(&k, &centered_labels) / ((n - 1) * (n - 1)) as f64;
        self.push(
            scalar(value),
            Op::Hsic {
                z,
                centered_labels,
                params,
            },
        )
    }

    /// `sum_k w_k * s_k` over `1 x 1` scalars.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let value = terms
            .iter()
            .map(|&(v, w)| w * self.scalar_value(v))
            .sum::<f64>();
        self.push(scalar(value), Op::WeightedSum(terms))
    }

    /// Reverse sweep from the `1 x 1` node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward needs a scalar root"
        );
        self.vjp(root, scalar(1.0))
    }

    /// Vector-Jacobian product: gradients of `sum(seed * value(root))`.
    pub fn vjp(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(self.value(root).dim(), seed.dim());
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulRow(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&node.value, |gv, &y| {
                        if y <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::AffineRows { x, scale } => {
                    let mut gx = g.clone();
                    for (mut row, s) in gx.rows_mut().into_iter().zip(scale) {
                        row *= *s;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GroupMean { x, groups } => {
                    let n = g.nrows();
                    let mut gx = Array2::zeros((n * groups, g.ncols()));
                    let share = &g / *groups as f64;
                    for t in 0..*groups {
                        gx.slice_mut(ndarray::s![t * n..(t + 1) * n, ..])
                            .assign(&share);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GroupMax { x, source_rows } => {
                    let xv = self.value(*x);
                    let c = g.ncols();
                    let mut gx = Array2::zeros(xv.dim());
                    for ((j, k), gv) in g.indexed_iter() {
                        gx[[source_rows[j * c + k], k]] += gv;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanRows(a) => {
                    let m = self.value(*a).nrows();
                    let row = &g.row(0) / m as f64;
                    let ga = Array2::from_shape_fn((m, g.ncols()), |(_, c)| row[c]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::PairwiseGauss { x, delta } => {
                    let xv = self.value(*x);
                    let (n, c) = xv.dim();
                    let inv = 1.0 / (delta * delta);
                    let mut gx = Array2::zeros((n, c));
                    for i in 0..n {
                        for j in 0..n {
                            for k in 0..c {
                                let r = i * n + j;
                                let d = xv[[i, k]] - xv[[j, k]];
                                let s = g[[r, k]] * node.value[[r, k]] * d * inv;
                                gx[[i, k]] -= s;
                                gx[[j, k]] += s;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Propagate { adj, h, joints } => {
                    let n = *joints;
                    let av = self.value(*adj);
                    let hv = self.value(*h);
                    let c = hv.ncols();
                    let t = hv.nrows() / n;
                    let mut ga = Array2::zeros(av.dim());
                    let mut gh = Array2::zeros(hv.dim());
                    for f in 0..t {
                        for i in 0..n {
                            for k in 0..c {
                                let go = g[[f * n + i, k]];
                                if go == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    ga[[i * n + j, k]] += go * hv[[f * n + j, k]];
                                    gh[[f * n + j, k]] += av[[i * n + j, k]] * go;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *adj, ga);
                    accumulate(&mut grads, *h, gh);
                }
                Op::StackRows(rows) => {
                    let mut offset = 0;
                    for &r in rows {
                        let m = self.value(r).nrows();
                        let part = g.slice(ndarray::s![offset..offset + m, ..]).to_owned();
                        accumulate(&mut grads, r, part);
                        offset += m;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(*a).ncols();
                    accumulate(&mut grads, *a, g.slice(ndarray::s![.., ..split]).to_owned());
                    accumulate(&mut grads, *b, g.slice(ndarray::s![.., split..]).to_owned());
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow, |v, &yv| *v -= yv * dot);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g[[0, 0]] / labels.len() as f64;
                    let mut gl = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        gl[[i, y]] -= 1.0;
                    }
                    gl *= scale;
                    accumulate(&mut grads, *logits, gl);
                }
                Op::KlDiv {
                    student,
                    teacher,
                    temperature,
                    log_p,
                    log_q,
                } => {
                    let n = log_p.nrows();
                    let scale = g[[0, 0]] / (n as f64 * temperature);
                    let p = log_p.mapv(f64::exp);
                    let q = log_q.mapv(f64::exp);
                    let mut gs = Array2::zeros(p.dim());
                    for i in 0..n {
                        let kl: f64 = (0..p.ncols())
                            .map(|k| p[[i, k]] * (log_p[[i, k]] - log_q[[i, k]]))
                            .sum();
                        for k in 0..p.ncols() {
                            gs[[i, k]] = scale * p[[i, k]] * (log_p[[i, k]] - log_q[[i, k]] - kl);
                        }
                    }
                    let gt = (&q - &p) * scale;
                    accumulate(&mut grads, *student, gs);
                    accumulate(&mut grads, *teacher, gt);
                }
                Op::Hsic {
                    z,
                    centered_labels,
                    params,
                } => {
                    let zv = self.value(*z);
                    let (n, d) = zv.dim();
                    let scale = 2.0 * g[[0, 0]] / ((n - 1) * (n - 1)) as f64;
                    let mut gz = Array2::zeros((n, d));
                    for u in 0..n {
                        for w in 0..n {
                            if u == w {
                                continue;
                            }
                            let r = row_distance(zv.row(u), zv.row(w));
                            let coef = scale
                                * centered_labels[[u, w]]
                                * params.radial_derivative_over_r(r);
                            for k in 0..d {
                                gz[[u, k]] += coef * (zv[[u, k]] - zv[[w, k]]);
                            }
                        }
                    }
                    accumulate(&mut grads, *z, gz);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, scalar(w * g[[0, 0]]));
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{center, label_kernel, MaternOrder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(weights * f(x)))/dx against central differences for every
    /// entry of every input.
    fn check<F>(inputs: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |xs: &[Tensor]| -> (Tape, Var, Vec<Var>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            let out = build(&mut tape, &vars);
            (tape, out, vars)
        };
        let (tape, out, vars) = eval(&inputs);
        let weights = Array2::from_shape_fn(tape.value(out).dim(), |(i, j)| {
            1.0 + 0.37 * i as f64 - 0.21 * j as f64
        });
        let project = |xs: &[Tensor]| {
            let (t, o, _) = eval(xs);
            (t.value(o) * &weights).sum()
        };
        let grads = tape.vjp(out, weights.clone());
        let h = 1e-6;
        for (which, x) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[which])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(x.dim()));
            for idx in 0..x.len() {
                let mut plus = inputs.clone();
                plus[which].as_slice_mut().unwrap()[idx] += h;
                let mut minus = inputs.clone();
                minus[which].as_slice_mut().unwrap()[idx] -= h;
                let numeric = (project(&plus) - project(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {which} entry {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn basic_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2)],
            |t, v| t.matmul(v[0], v[1]),
        );
        check(
            vec![random(&mut rng, 3, 4), random(&mut rng, 3, 4)],
            |t, v| t.add(v[0], v[1]),
        );
        check(
            vec![random(&mut rng, 3, 4), random(&mut rng, 1, 4)],
            |t, v| t.add_row(v[0], v[1]),
        );
        check(
            vec![random(&mut rng, 3, 4), random(&mut rng, 1, 4)],
            |t, v| t.mul_row(v[0], v[1]),
        );
        check(vec![random(&mut rng, 3, 4)], |t, v| t.relu(v[0]));
        check(vec![random(&mut rng, 3, 2)], |t, v| {
            t.affine_rows(v[0], vec![0.5, -2.0, 1.5], &[0.1, 0.2, 0.3])
        });
        check(vec![random(&mut rng, 6, 2)], |t, v| t.group_mean(v[0], 3));
        check(vec![random(&mut rng, 6, 2)], |t, v| t.group_max(v[0], 3));
        check(vec![random(&mut rng, 5, 3)], |t, v| t.mean_rows(v[0]));
        check(
            vec![random(&mut rng, 2, 3), random(&mut rng, 1, 3)],
            |t, v| t.stack_rows(vec![v[0], v[1], v[0]]),
        );
        check(
            vec![random(&mut rng, 2, 3), random(&mut rng, 2, 1)],
            |t, v| t.concat_cols(v[0], v[1]),
        );
        check(vec![random(&mut rng, 3, 4)], |t, v| t.softmax(v[0]));
        check(
            vec![random(&mut rng, 1, 1), random(&mut rng, 1, 1)],
            |t, v| t.weighted_sum(vec![(v[0], 2.0), (v[1], -0.5), (v[0], 1.0)]),
        );
    }

    #[test]
    fn graph_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(vec![random(&mut rng, 3, 2)], |t, v| {
            t.pairwise_gauss(v[0], 0.8)
        });
        check(
            vec![random(&mut rng, 9, 2), random(&mut rng, 6, 2)],
            |t, v| t.propagate(v[0], v[1], 3),
        );
    }

    #[test]
    fn loss_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![random(&mut rng, 4, 3)], |t, v| {
            t.cross_entropy(v[0], &[0, 2, 1, 2])
        });
        for temperature in [1.0, 2.5] {
            check(
                vec![random(&mut rng, 4, 3), random(&mut rng, 4, 3)],
                |t, v| t.kl_div(v[0], v[1], temperature),
            );
        }
        let labels = [0, 1, 1, 2, 0];
        let l = center(&label_kernel(&labels, 3).unwrap().values);
        for order in [
            MaternOrder::Half,
            MaternOrder::ThreeHalves,
            MaternOrder::FiveHalves,
        ] {
            let params = MaternParams::new(order, 1.3, 0.9).unwrap();
            check(vec![random(&mut rng, 5, 3)], |t, v| {
                t.hsic(v[0], l.clone(), params)
            });
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::from_elem((1, 1), 2.0));
        let d = tape.detach(x);
        let y = tape.weighted_sum(vec![(d, 3.0)]);
        let grads = tape.backward(y);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(d).unwrap()[[0, 0]], 3.0);
    }
}
