use std::collections::HashMap;

use ndarray::{s, Axis, Zip};

use super::params::{Mat, ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Ln(Var),
    Recip(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    Pick(Var, usize, usize),
    ScatterCols(Var, Vec<usize>),
}

struct Node {
    value: Option<Mat>,
    op: Op,
}

/// Reverse-mode tape over `f64` matrices. Parameters are read from a
/// borrowed [`ParamStore`] and never copied into the tape.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for each parameter that took part in the computation.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
    }
}

fn reduce_to(grad: Mat, shape: (usize, usize)) -> Mat {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), x))
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, rb, "matmul {ra}x{ca} by {rb}x{cb}");
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Elementwise sum with row/column/scalar broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product with row/column/scalar broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddScalar(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Per-row standardization (zero mean, unit variance), no affine part.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let (v, _) = layer_norm_rows(self.value(a));
        self.push(v, Op::LayerNormRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, i + 1)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    /// Column means as a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a)[[r, c]]);
        self.push(v, Op::Pick(a, r, c))
    }

    /// Adds column `j` of `a` into column `idx[j]` of a zero matrix with
    /// `width` columns.
    pub fn scatter_cols(&mut self, a: Var, idx: &[usize], width: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.ncols(), idx.len(), "scatter index length");
        let mut v = Mat::zeros((src.nrows(), width));
        for (j, &k) in idx.iter().enumerate() {
            let mut dst = v.column_mut(k);
            dst += &src.column(j);
        }
        self.push(v, Op::ScatterCols(a, idx.to_vec()))
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Mat::ones((1, 1)));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = node.value.as_ref();
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    accumulate(&mut grads[a.0], reduce_to(g.clone(), sa));
                    accumulate(&mut grads[b.0], reduce_to(g, sb));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = reduce_to(&g * vb, va.dim());
                    let gb = reduce_to(&g * va, vb.dim());
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(a, k) => accumulate(&mut grads[a.0], g * *k),
                Op::AddScalar(a) => accumulate(&mut grads[a.0], g),
                Op::Tanh(a) => {
                    let y = y.unwrap();
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|g, &y| *g *= 1.0 - y * y);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let y = y.unwrap();
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|g, &y| *g *= y * (1.0 - y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                        *g *= d;
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Ln(a) => accumulate(&mut grads[a.0], g / self.value(*a)),
                Op::Recip(a) => {
                    let y = y.unwrap();
                    accumulate(&mut grads[a.0], -(g * y * y));
                }
                Op::SoftmaxRows(a) => {
                    let y = y.unwrap();
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads[a.0], y * &(g - &dot));
                }
                Op::LayerNormRows(a) => {
                    let (xhat, inv_std) = layer_norm_rows(self.value(*a));
                    let n = xhat.ncols() as f64;
                    let mean_g = g.sum_axis(Axis(1)).insert_axis(Axis(1)) / n;
                    let mean_gx = (&g * &xhat).sum_axis(Axis(1)).insert_axis(Axis(1)) / n;
                    let ga = (g - &mean_g - &(&xhat * &mean_gx)) * &inv_std;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.t().to_owned()),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        accumulate(&mut grads[p.0], g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        accumulate(&mut grads[p.0], g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    for (r, &k) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(k);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MeanRows(a) => {
                    let (m, n) = self.shape(*a);
                    let ga = g.broadcast((m, n)).unwrap().to_owned() / m as f64;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sum(a) => {
                    accumulate(&mut grads[a.0], Mat::from_elem(self.shape(*a), g[[0, 0]]));
                }
                Op::Pick(a, r, c) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    ga[[*r, *c]] = g[[0, 0]];
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ScatterCols(a, idx) => {
                    let ga = g.select(Axis(1), idx);
                    accumulate(&mut grads[a.0], ga);
                }
            }
        }
        let params = self.param_vars.iter().map(|(&id, v)| (id, v.0)).collect();
        Gradients { grads, params }
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

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// Returns the standardized rows and the per-row inverse std as a column.
fn layer_norm_rows(x: &Mat) -> (Mat, Mat) {
    let n = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)).insert_axis(Axis(1)) / n;
    let centered = x - &mean;
    let var = (&centered * &centered).sum_axis(Axis(1)).insert_axis(Axis(1)) / n;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    (centered * &inv_std, inv_std)
}
