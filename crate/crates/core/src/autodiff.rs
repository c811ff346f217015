//! A small reverse-mode automatic differentiation engine.
//!
//! Every value is a row-major 2-D matrix. Nodes are appended to a [`Graph`]
//! in evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::geometry::{rot_x, rot_y, rot_z, Mat3};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Recip(Var),
    MeanRows(Var),
    Mean(Var),
    RowNorm(Var),
    Gather(Var, Vec<usize>),
    Concat(Var, Var),
    Slice(Var, usize),
    Transpose(Var),
    EulerToRot(Var),
    RotToEuler(Var),
}

#[derive(Clone, Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Computation graph owning every intermediate value of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that influenced it.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `v`; zeros if `v` did not influence the output.
    pub fn get(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => {
                let (r, c) = self.shapes[v.0];
                vec![0.0; r * c]
            }
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Error {
    Error::ShapeMismatch { op, lhs, rhs }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf holding `data` (row-major). Parameters and inputs alike are
    /// leaves; gradients are available for every node after `backward`.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(shape_err("leaf", (rows, cols), (data.len(), 1)));
        }
        Ok(self.push(rows, cols, data, Op::Leaf))
    }

    pub fn scalar_leaf(&mut self, x: f64) -> Var {
        self.push(1, 1, vec![x], Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", (n, k), (k2, m)));
        }
        let out = matmul_raw(&self.nodes[a.0].value, &self.nodes[b.0].value, n, k, m);
        Ok(self.push(n, m, out, Op::MatMul(a, b)))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(sa.0, sa.1, out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1×C` row to every row of an `N×C` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, c) = self.shape(a);
        let sr = self.shape(row);
        if sr != (1, c) {
            return Err(shape_err("add_row", (n, c), sr));
        }
        let r = &self.nodes[row.0].value;
        let out = self.nodes[a.0]
            .value
            .chunks_exact(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(n, c, out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (n, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|x| x * s).collect();
        self.push(n, c, out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (n, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| x.max(0.0)).collect();
        self.push(n, c, out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (n, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        self.push(n, c, out, Op::Tanh(a))
    }

    /// Elementwise `1/x`; zero entries are rejected.
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.shape(a);
        let v = &self.nodes[a.0].value;
        if v.contains(&0.0) {
            return Err(Error::DegenerateGeometry("reciprocal of zero".into()));
        }
        let out = v.iter().map(|x| 1.0 / x).collect();
        Ok(self.push(n, c, out, Op::Recip(a)))
    }

    /// Column means, `N×C → 1×C`. Each column is summed in sorted order so the
    /// result does not depend on row order, bit for bit.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (n, c) = self.shape(a);
        let v = &self.nodes[a.0].value;
        let mut column = vec![0.0; n];
        let mut out = Vec::with_capacity(c);
        for j in 0..c {
            for i in 0..n {
                column[i] = v[i * c + j];
            }
            column.sort_unstable_by(f64::total_cmp);
            out.push(column.iter().sum::<f64>() / n as f64);
        }
        self.push(1, c, out, Op::MeanRows(a))
    }

    /// Mean of all entries, `→ 1×1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(1, 1, vec![m], Op::Mean(a))
    }

    /// Euclidean norm of each row, `N×C → N×1`. The subgradient at a zero
    /// row is zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let (n, c) = self.shape(a);
        let out = self.nodes[a.0]
            .value
            .chunks_exact(c)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push(n, 1, out, Op::RowNorm(a))
    }

    /// Rows of `a` at `indices`. The indices are constants of the graph.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let (n, c) = self.shape(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather_rows", (n, c), (bad, 0)));
        }
        let v = &self.nodes[a.0].value;
        let out = indices
            .iter()
            .flat_map(|&i| v[i * c..(i + 1) * c].iter().copied())
            .collect();
        Ok(self.push(indices.len(), c, out, Op::Gather(a, indices)))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = self.shape(a);
        let (nb, cb) = self.shape(b);
        if n != nb {
            return Err(shape_err("concat_cols", (n, ca), (nb, cb)));
        }
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(&va[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&vb[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(n, ca + cb, out, Op::Concat(a, b)))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.shape(a);
        if start + len > c {
            return Err(shape_err("slice_cols", (n, c), (start, len)));
        }
        let v = &self.nodes[a.0].value;
        let out = (0..n)
            .flat_map(|i| v[i * c + start..i * c + start + len].iter().copied())
            .collect();
        Ok(self.push(n, len, out, Op::Slice(a, start)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (n, c) = self.shape(a);
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[j * n + i] = v[i * c + j];
            }
        }
        self.push(c, n, out, Op::Transpose(a))
    }

    /// Euler angles `1×3` to a row-major `3×3` rotation (`Rz·Ry·Rx`).
    pub fn euler_to_rotation(&mut self, angles: Var) -> Result<Var> {
        let s = self.shape(angles);
        if s != (1, 3) {
            return Err(shape_err("euler_to_rotation", s, (1, 3)));
        }
        let a = &self.nodes[angles.0].value;
        let r = rot_z(a[2]) * rot_y(a[1]) * rot_x(a[0]);
        Ok(self.push(3, 3, mat3_to_rows(&r), Op::EulerToRot(angles)))
    }

    /// Row-major `3×3` rotation to Euler angles `1×3`, away from gimbal lock.
    pub fn rotation_to_euler(&mut self, rotation: Var) -> Result<Var> {
        let s = self.shape(rotation);
        if s != (3, 3) {
            return Err(shape_err("rotation_to_euler", s, (3, 3)));
        }
        let r = &self.nodes[rotation.0].value;
        let h = r[0].hypot(r[3]);
        let out = vec![r[7].atan2(r[8]), (-r[6]).atan2(h), r[3].atan2(r[0])];
        Ok(self.push(1, 3, out, Op::RotToEuler(rotation)))
    }

    /// Reverse sweep from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let s = self.shape(loss);
        if s != (1, 1) {
            return Err(shape_err("backward", s, (1, 1)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| (n.rows, n.cols)).collect(),
        })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = cols;
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                // dA = G·Bᵀ
                let ga = acc(grads, *a, n * k);
                for i in 0..n {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += g[i * m + j] * vb[p * m + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
                // dB = Aᵀ·G
                let gb = acc(grads, *b, k * m);
                for i in 0..n {
                    for p in 0..k {
                        let x = va[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        let grow = &g[i * m..(i + 1) * m];
                        let brow = &mut gb[p * m..(p + 1) * m];
                        for (o, gv) in brow.iter_mut().zip(grow) {
                            *o += x * gv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
                add_into(acc(grads, *b, g.len()), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
                add_into(acc(grads, *b, g.len()), g, -1.0);
            }
            Op::Mul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * vb[i];
                }
                let gb = acc(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * va[i];
                }
            }
            Op::AddRow(a, r) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
                let gr = acc(grads, *r, cols);
                for chunk in g.chunks_exact(cols) {
                    for (o, x) in gr.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
            }
            Op::Scale(a, s) => add_into(acc(grads, *a, g.len()), g, *s),
            Op::Relu(a) => {
                let va = &self.nodes[a.0].value;
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    if va[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Tanh(a) => {
                let ga = acc(grads, *a, g.len());
                for (i, y) in node.value.iter().enumerate() {
                    ga[i] += g[i] * (1.0 - y * y);
                }
            }
            Op::Recip(a) => {
                let ga = acc(grads, *a, g.len());
                for (i, y) in node.value.iter().enumerate() {
                    ga[i] -= g[i] * y * y;
                }
            }
            Op::MeanRows(a) => {
                let (n, c) = self.shape(*a);
                let ga = acc(grads, *a, n * c);
                let inv = 1.0 / n as f64;
                for i in 0..n {
                    for j in 0..c {
                        ga[i * c + j] += g[j] * inv;
                    }
                }
            }
            Op::Mean(a) => {
                let len = self.nodes[a.0].value.len();
                let d = g[0] / len as f64;
                for x in acc(grads, *a, len).iter_mut() {
                    *x += d;
                }
            }
            Op::RowNorm(a) => {
                let (n, c) = self.shape(*a);
                let va = &self.nodes[a.0].value;
                let ga = acc(grads, *a, n * c);
                for i in 0..n {
                    let norm = node.value[i];
                    if norm > 0.0 {
                        let s = g[i] / norm;
                        for j in 0..c {
                            ga[i * c + j] += s * va[i * c + j];
                        }
                    }
                }
            }
            Op::Gather(a, indices) => {
                let len = self.nodes[a.0].value.len();
                let ga = acc(grads, *a, len);
                for (row, &src) in indices.iter().enumerate() {
                    for j in 0..cols {
                        ga[src * cols + j] += g[row * cols + j];
                    }
                }
            }
            Op::Concat(a, b) => {
                let ca = self.shape(*a).1;
                let cb = self.shape(*b).1;
                let ga = acc(grads, *a, rows * ca);
                for i in 0..rows {
                    for j in 0..ca {
                        ga[i * ca + j] += g[i * cols + j];
                    }
                }
                let gb = acc(grads, *b, rows * cb);
                for i in 0..rows {
                    for j in 0..cb {
                        gb[i * cb + j] += g[i * cols + ca + j];
                    }
                }
            }
            Op::Slice(a, start) => {
                let c = self.shape(*a).1;
                let ga = acc(grads, *a, rows * c);
                for i in 0..rows {
                    for j in 0..cols {
                        ga[i * c + start + j] += g[i * cols + j];
                    }
                }
            }
            Op::Transpose(a) => {
                // node is cols×rows of a; a is rows'×cols' = cols×rows here.
                let ga = acc(grads, *a, rows * cols);
                for i in 0..rows {
                    for j in 0..cols {
                        ga[j * rows + i] += g[i * cols + j];
                    }
                }
            }
            Op::EulerToRot(a) => {
                let ang = &self.nodes[a.0].value;
                let (rx, ry, rz) = (rot_x(ang[0]), rot_y(ang[1]), rot_z(ang[2]));
                let partials = [
                    rz * ry * d_rot_x(ang[0]),
                    rz * d_rot_y(ang[1]) * rx,
                    d_rot_z(ang[2]) * ry * rx,
                ];
                let ga = acc(grads, *a, 3);
                for (k, dr) in partials.iter().enumerate() {
                    let mut s = 0.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            s += g[i * 3 + j] * dr[(i, j)];
                        }
                    }
                    ga[k] += s;
                }
            }
            Op::RotToEuler(a) => {
                let r = &self.nodes[a.0].value;
                let ga = acc(grads, *a, 9);
                // roll = atan2(r21, r22)
                let q = r[7] * r[7] + r[8] * r[8];
                ga[7] += g[0] * r[8] / q;
                ga[8] -= g[0] * r[7] / q;
                // pitch = atan2(-r20, hypot(r00, r10))
                let h = r[0].hypot(r[3]);
                let q = h * h + r[6] * r[6];
                ga[6] -= g[1] * h / q;
                let dh = g[1] * r[6] / q;
                ga[0] += dh * r[0] / h;
                ga[3] += dh * r[3] / h;
                // yaw = atan2(r10, r00)
                let q = r[3] * r[3] + r[0] * r[0];
                ga[3] += g[2] * r[0] / q;
                ga[0] -= g[2] * r[3] / q;
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

pub(crate) fn mat3_to_rows(m: &Mat3) -> Vec<f64> {
    (0..3).flat_map(|i| (0..3).map(move |j| m[(i, j)])).collect()
}

pub(crate) fn rows_to_mat3(v: &[f64]) -> Mat3 {
    Mat3::from_row_slice(v)
}

fn d_rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}
