use std::cell::{Ref, RefCell};
use std::sync::Arc;

use super::{split_axis, Result, Tensor, TensorError};

/// Recorded operation with the indices of its inputs.
///
/// Parents always have smaller indices than the node that consumes them, so
/// the node list is a topological order by construction.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    ScaleBy(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    ClampMin(usize, f64),
    Sum(usize),
    SumAxis { a: usize, axis: usize },
    Softmax { a: usize, axis: usize },
    LogSumExp { a: usize, axis: usize },
    CumSum { a: usize, axis: usize },
    Reshape(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    GatherRows { a: usize, index: Arc<Vec<usize>> },
    NormalizeRows(usize),
    Bilinear { grid: usize, points: usize },
    RotatePairs { a: usize, mats: Arc<Vec<[f64; 4]>>, transpose: bool },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Result of a backward pass: one optional gradient buffer per tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when no
    /// gradient reached it.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn get_or_zeros(&self, var: Var<'_>) -> Vec<f64> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; var.value().len()],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn node(&self, id: usize) -> Ref<'_, Node> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    fn push(&self, op: Op, value: Tensor, name: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents(&op).iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, &mut grads, node, &g)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn parents(op: &Op) -> Vec<usize> {
    use Op::*;
    match op {
        Leaf => vec![],
        MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b)
        | MulRow(a, b) | ScaleBy(a, b) => vec![*a, *b],
        BatchMatMul { a, b, .. } => vec![*a, *b],
        Bilinear { grid, points } => vec![*grid, *points],
        Transpose(a) | Scale(a, _) | AddScalar(a) | Relu(a) | Exp(a) | Log(a) | Sqrt(a)
        | ClampMin(a, _) | Sum(a) | Reshape(a) | NormalizeRows(a) => vec![*a],
        SumAxis { a, .. }
        | Softmax { a, .. }
        | LogSumExp { a, .. }
        | CumSum { a, .. }
        | Slice { a, .. }
        | GatherRows { a, .. }
        | RotatePairs { a, .. } => vec![*a],
        Concat { parts, .. } => parts.clone(),
    }
}

/// Adds into the gradient buffer of `id` if that node wants one.
fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let n = nodes[id].value.len();
    let buf = grads[id].get_or_insert_with(|| vec![0.0; n]);
    f(buf);
}

fn backprop(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    node: &Node,
    g: &[f64],
) -> Result<()> {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let (ad, bd) = (av.data(), bv.data());
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bd[p * n + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..m {
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
            });
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = out.shape()[2];
            let (ad, bd) = (av.data(), bv.data());
            let bidx = |z: usize, p: usize, j: usize| {
                if *trans_b {
                    z * n * k + j * k + p
                } else {
                    z * k * n + p * n + j
                }
            };
            accumulate(nodes, grads, *a, |ga| {
                for z in 0..batch {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[(z * m + i) * n + j] * bd[bidx(z, p, j)];
                            }
                            ga[(z * m + i) * k + p] += s;
                        }
                    }
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for z in 0..batch {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ad[(z * m + i) * k + p];
                            for j in 0..n {
                                gb[bidx(z, p, j)] += aip * g[(z * m + i) * n + j];
                            }
                        }
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (m, n) = (out.shape()[1], out.shape()[0]);
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| {
                for (x, gi) in gb.iter_mut().zip(g) {
                    *x -= gi;
                }
            });
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (nodes[*a].value.data(), nodes[*b].value.data());
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * bd[i];
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * ad[i];
                }
            });
        }
        Op::Div(a, b) => {
            let (ad, bd) = (nodes[*a].value.data(), nodes[*b].value.data());
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] / bd[i];
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                }
            });
        }
        Op::AddRow(a, r) => {
            let n = nodes[*r].value.len();
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *r, |gr| {
                for (i, gi) in g.iter().enumerate() {
                    gr[i % n] += gi;
                }
            });
        }
        Op::MulRow(a, r) => {
            let ad = nodes[*a].value.data();
            let rd = nodes[*r].value.data();
            let n = rd.len();
            accumulate(nodes, grads, *a, |ga| {
                for (i, gi) in g.iter().enumerate() {
                    ga[i] += gi * rd[i % n];
                }
            });
            accumulate(nodes, grads, *r, |gr| {
                for (i, gi) in g.iter().enumerate() {
                    gr[i % n] += gi * ad[i];
                }
            });
        }
        Op::ScaleBy(a, s) => {
            let ad = nodes[*a].value.data();
            let sv = nodes[*s].value.item();
            accumulate(nodes, grads, *a, |ga| {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi * sv;
                }
            });
            accumulate(nodes, grads, *s, |gs| {
                gs[0] += g.iter().zip(ad).map(|(gi, ai)| gi * ai).sum::<f64>();
            });
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, |ga| {
            for (x, gi) in ga.iter_mut().zip(g) {
                *x += gi * c;
            }
        }),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, |ga| add_into(ga, g)),
        Op::Relu(a) => {
            let ad = nodes[*a].value.data();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    if ad[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            });
        }
        Op::Exp(a) => {
            let y = out.data();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * y[i];
                }
            });
        }
        Op::Log(a) => {
            let ad = nodes[*a].value.data();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] / ad[i];
                }
            });
        }
        Op::Sqrt(a) => {
            let y = out.data();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * 0.5 / y[i];
                }
            });
        }
        Op::ClampMin(a, c) => {
            let ad = nodes[*a].value.data();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    if ad[i] > *c {
                        ga[i] += g[i];
                    }
                }
            });
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, |ga| {
            for x in ga.iter_mut() {
                *x += g[0];
            }
        }),
        Op::SumAxis { a, axis } => {
            let (outer, len, inner) = split_axis(nodes[*a].value.shape(), *axis)?;
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            ga[(o * len + l) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            });
        }
        Op::Softmax { a, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis)?;
            let y = out.data();
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            ga[at(l)] += y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSumExp { a, axis } => {
            let x = nodes[*a].value.data();
            let (outer, len, inner) = split_axis(nodes[*a].value.shape(), *axis)?;
            let lse = out.data();
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let go = g[o * inner + i];
                        let l0 = lse[o * inner + i];
                        for l in 0..len {
                            let at = (o * len + l) * inner + i;
                            ga[at] += go * (x[at] - l0).exp();
                        }
                    }
                }
            });
        }
        Op::CumSum { a, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis)?;
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let mut run = 0.0;
                        for l in (0..len).rev() {
                            let at = (o * len + l) * inner + i;
                            run += g[at];
                            ga[at] += run;
                        }
                    }
                }
            });
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis)?;
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                accumulate(nodes, grads, p, |gp| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        add_into(&mut gp[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                });
                offset += len;
            }
        }
        Op::Slice { a, axis, start } => {
            let (outer, total, inner) = split_axis(nodes[*a].value.shape(), *axis)?;
            let len = out.shape()[*axis];
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    let src = o * len * inner;
                    add_into(&mut ga[dst..dst + len * inner], &g[src..src + len * inner]);
                }
            });
        }
        Op::GatherRows { a, index } => {
            let row = out.len() / index.len().max(1);
            accumulate(nodes, grads, *a, |ga| {
                for (r, &src) in index.iter().enumerate() {
                    add_into(&mut ga[src * row..(src + 1) * row], &g[r * row..(r + 1) * row]);
                }
            });
        }
        Op::NormalizeRows(a) => {
            let x = nodes[*a].value.data();
            let y = out.data();
            let n = *out.shape().last().unwrap_or(&1);
            accumulate(nodes, grads, *a, |ga| {
                for r in 0..y.len() / n {
                    let xs = &x[r * n..(r + 1) * n];
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let norm = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga[r * n + j] += (gs[j] - ys[j] * dot) / norm;
                    }
                }
            });
        }
        Op::Bilinear { grid, points } => {
            let gv = &nodes[*grid].value;
            let pv = &nodes[*points].value;
            let (h, w, d) = (gv.shape()[0], gv.shape()[1], gv.shape()[2]);
            let gd = gv.data();
            let pd = pv.data();
            let n = pv.shape()[0];
            accumulate(nodes, grads, *grid, |gg| {
                for s in 0..n {
                    let taps = bilinear_taps(pd[2 * s], pd[2 * s + 1], h, w);
                    for (cell, wt) in taps.cells {
                        for c in 0..d {
                            gg[cell * d + c] += wt * g[s * d + c];
                        }
                    }
                }
            });
            accumulate(nodes, grads, *points, |gp| {
                for s in 0..n {
                    let taps = bilinear_taps(pd[2 * s], pd[2 * s + 1], h, w);
                    let [c00, c10, c01, c11] = taps.corner_cells;
                    let (fx, fy) = (taps.fx, taps.fy);
                    let mut dx = 0.0;
                    let mut dy = 0.0;
                    for c in 0..d {
                        let v00 = gd[c00 * d + c];
                        let v10 = gd[c10 * d + c];
                        let v01 = gd[c01 * d + c];
                        let v11 = gd[c11 * d + c];
                        let gc = g[s * d + c];
                        dx += gc * ((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy);
                        dy += gc * ((v01 - v00) * (1.0 - fx) + (v11 - v10) * fx);
                    }
                    if taps.x_free {
                        gp[2 * s] += dx;
                    }
                    if taps.y_free {
                        gp[2 * s + 1] += dy;
                    }
                }
            });
        }
        Op::RotatePairs { a, mats, transpose } => {
            let cols = out.shape()[1];
            accumulate(nodes, grads, *a, |ga| {
                for (r, m) in mats.iter().enumerate() {
                    // gradient goes through the transpose of the applied map
                    let m = if *transpose { *m } else { [m[0], m[2], m[1], m[3]] };
                    for p in (0..cols).step_by(2) {
                        let (gx, gy) = (g[r * cols + p], g[r * cols + p + 1]);
                        ga[r * cols + p] += m[0] * gx + m[1] * gy;
                        ga[r * cols + p + 1] += m[2] * gx + m[3] * gy;
                    }
                }
            });
        }
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Interpolation stencil for one continuous grid coordinate.
struct Taps {
    cells: [(usize, f64); 4],
    corner_cells: [usize; 4],
    fx: f64,
    fy: f64,
    x_free: bool,
    y_free: bool,
}

/// Border-clamped bilinear stencil. `x` indexes columns (width), `y` rows.
fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> Taps {
    let (x0, fx, x_free) = axis_taps(x, w);
    let (y0, fy, y_free) = axis_taps(y, h);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let c00 = y0 * w + x0;
    let c10 = y0 * w + x1;
    let c01 = y1 * w + x0;
    let c11 = y1 * w + x1;
    Taps {
        cells: [
            (c00, (1.0 - fx) * (1.0 - fy)),
            (c10, fx * (1.0 - fy)),
            (c01, (1.0 - fx) * fy),
            (c11, fx * fy),
        ],
        corner_cells: [c00, c10, c01, c11],
        fx,
        fy,
        x_free,
        y_free,
    }
}

fn axis_taps(v: f64, size: usize) -> (usize, f64, bool) {
    let hi = (size - 1) as f64;
    if size == 1 {
        return (0, 0.0, false);
    }
    if v <= 0.0 {
        return (0, 0.0, v == 0.0);
    }
    if v >= hi {
        return (size - 2, 1.0, v == hi);
    }
    let i0 = (v.floor() as usize).min(size - 2);
    (i0, v - i0 as f64, true)
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).value.shape().to_vec()
    }

    /// First element; convenient for scalars.
    pub fn item(&self) -> f64 {
        self.tape.node(self.id).value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node(self.id).requires_grad
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_shape(&self, other: Var<'t>, op: &'static str) -> Result<(Tensor, Tensor)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(TensorError::Dim {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok((a, b))
    }

    fn zip_with(
        self,
        other: Var<'t>,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, name)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        self.tape
            .push(op, Tensor::new(a.shape().to_vec(), data)?, name)
    }

    fn map(self, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|x| f(*x)).collect();
        self.tape
            .push(op, Tensor::new(a.shape().to_vec(), data)?, name)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::Dim {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let (ad, bd) = (a.data(), b.data());
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let row = &bd[p * n..(p + 1) * n];
                let dst = &mut c[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += aip * row[j];
                }
            }
        }
        self.tape
            .push(Op::MatMul(self.id, other.id), Tensor::new(vec![m, n], c)?, "matmul")
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let bad = || TensorError::Dim {
            op: "bmm",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bk, n) = if trans_b {
            (b.shape()[2], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[2])
        };
        if bk != k {
            return Err(bad());
        }
        let (ad, bd) = (a.data(), b.data());
        let mut c = vec![0.0; batch * m * n];
        for z in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        let bv = if trans_b {
                            bd[z * n * k + j * k + p]
                        } else {
                            bd[z * k * n + p * n + j]
                        };
                        s += ad[(z * m + i) * k + p] * bv;
                    }
                    c[(z * m + i) * n + j] = s;
                }
            }
        }
        self.tape.push(
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            Tensor::new(vec![batch, m, n], c)?,
            "bmm",
        )
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(TensorError::Contract("transpose needs rank 2".into()));
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let ad = a.data();
        let mut t = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                t[j * m + i] = ad[i * n + j];
            }
        }
        self.tape
            .push(Op::Transpose(self.id), Tensor::new(vec![n, m], t)?, "transpose")
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, Op::Add(self.id, other.id), "add", |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, Op::Sub(self.id, other.id), "sub", |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, Op::Mul(self.id, other.id), "mul", |x, y| x * y)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, Op::Div(self.id, other.id), "div", |x, y| x / y)
    }

    fn row_broadcast(
        self,
        row: Var<'t>,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, r) = (self.value(), row.value());
        let n = *a.shape().last().unwrap_or(&1);
        if r.len() != n || a.rank() == 0 {
            return Err(TensorError::Dim {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: r.shape().to_vec(),
            });
        }
        let rd = r.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, rd[i % n]))
            .collect();
        self.tape.push(op, Tensor::new(a.shape().to_vec(), data)?, name)
    }

    /// Adds `row` (length = last dim) to every trailing row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(row, Op::AddRow(self.id, row.id), "add_row", |x, y| x + y)
    }

    /// Multiplies every trailing row elementwise by `row`.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(row, Op::MulRow(self.id, row.id), "mul_row", |x, y| x * y)
    }

    /// Multiplies by a one-element variable.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if sv.len() != 1 {
            return Err(TensorError::Contract("scale_by needs a scalar".into()));
        }
        let c = sv.item();
        self.map(Op::ScaleBy(self.id, s.id), "scale_by", |x| x * c)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.map(Op::Scale(self.id, c), "scale", |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.map(Op::AddScalar(self.id), "add_scalar", |x| x + c)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.map(Op::Relu(self.id), "relu", |x| x.max(0.0))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.map(Op::Exp(self.id), "exp", f64::exp)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.map(Op::Log(self.id), "log", f64::ln)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.map(Op::Sqrt(self.id), "sqrt", f64::sqrt)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn clamp_min(self, floor: f64) -> Result<Var<'t>> {
        self.map(Op::ClampMin(self.id, floor), "clamp_min", |x| x.max(floor))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.tape.push(Op::Sum(self.id), Tensor::scalar(s), "sum")
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len();
        if n == 0 {
            return Err(TensorError::Contract("mean of empty tensor".into()));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (outer, len, inner) = split_axis(a.shape(), axis)?;
        let ad = a.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += ad[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        self.tape.push(
            Op::SumAxis { a: self.id, axis },
            Tensor::new(shape, out)?,
            "sum_axis",
        )
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let data = softmax_values(a.data(), a.shape(), axis)?;
        self.tape.push(
            Op::Softmax { a: self.id, axis },
            Tensor::new(a.shape().to_vec(), data)?,
            "softmax",
        )
    }

    /// Stable `log Σ exp` over `axis`, dropping it from the shape.
    pub fn logsumexp(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (outer, len, inner) = split_axis(a.shape(), axis)?;
        if len == 0 {
            return Err(TensorError::Contract("logsumexp over empty axis".into()));
        }
        let ad = a.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| ad[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..len).map(|l| (ad[at(l)] - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        self.tape.push(
            Op::LogSumExp { a: self.id, axis },
            Tensor::new(shape, out)?,
            "logsumexp",
        )
    }

    pub fn cumsum(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (outer, len, inner) = split_axis(a.shape(), axis)?;
        let mut out = a.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                for l in 1..len {
                    out[(o * len + l) * inner + i] += out[(o * len + l - 1) * inner + i];
                }
            }
        }
        self.tape.push(
            Op::CumSum { a: self.id, axis },
            Tensor::new(a.shape().to_vec(), out)?,
            "cumsum",
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self.value().reshaped(shape.to_vec())?;
        self.tape.push(Op::Reshape(self.id), t, "reshape")
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let tape = first.tape;
        let values: Vec<Tensor> = parts.iter().map(Var::value).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Dim {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        tape.push(
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            Tensor::new(shape, data)?,
            "concat",
        )
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (outer, total, inner) = split_axis(a.shape(), axis)?;
        if start + len > total {
            return Err(TensorError::Contract(format!(
                "slice {start}..{} exceeds extent {total}",
                start + len
            )));
        }
        let ad = a.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * total + start) * inner;
            data.extend_from_slice(&ad[from..from + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        self.tape.push(
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            Tensor::new(shape, data)?,
            "slice",
        )
    }

    /// Selects (and possibly repeats) slices along the first axis.
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() == 0 {
            return Err(TensorError::Contract("gather_rows on a scalar".into()));
        }
        let rows = a.shape()[0];
        let row = a.len() / rows.max(1);
        let mut data = Vec::with_capacity(index.len() * row);
        for &i in index {
            if i >= rows {
                return Err(TensorError::Contract(format!(
                    "row {i} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&a.data()[i * row..(i + 1) * row]);
        }
        let mut shape = a.shape().to_vec();
        shape[0] = index.len();
        self.tape.push(
            Op::GatherRows {
                a: self.id,
                index: Arc::new(index.to_vec()),
            },
            Tensor::new(shape, data)?,
            "gather_rows",
        )
    }

    /// Scales every trailing row to unit Euclidean norm.
    pub fn normalize_rows(self) -> Result<Var<'t>> {
        let a = self.value();
        let n = *a.shape().last().unwrap_or(&1);
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TensorError::Contract("cannot normalize a zero vector".into()));
            }
            for v in row {
                *v /= norm;
            }
        }
        self.tape.push(
            Op::NormalizeRows(self.id),
            Tensor::new(a.shape().to_vec(), data)?,
            "normalize_rows",
        )
    }

    /// Samples an `h × w × d` grid at `n` continuous `(x, y)` points given as
    /// an `n × 2` tensor; `x` runs along the width. Points outside the grid
    /// are clamped to the border.
    pub fn bilinear_sample(self, points: Var<'t>) -> Result<Var<'t>> {
        let (g, p) = (self.value(), points.value());
        if g.rank() != 3 || g.shape()[0] == 0 || g.shape()[1] == 0 {
            return Err(TensorError::Contract("bilinear grid must be h × w × d".into()));
        }
        if p.rank() != 2 || p.shape()[1] != 2 {
            return Err(TensorError::Dim {
                op: "bilinear_sample",
                lhs: g.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        let (h, w, d) = (g.shape()[0], g.shape()[1], g.shape()[2]);
        let n = p.shape()[0];
        let (gd, pd) = (g.data(), p.data());
        let mut out = vec![0.0; n * d];
        for s in 0..n {
            let taps = bilinear_taps(pd[2 * s], pd[2 * s + 1], h, w);
            let dst = &mut out[s * d..(s + 1) * d];
            for (cell, wt) in taps.cells {
                if wt == 0.0 {
                    continue;
                }
                let src = &gd[cell * d..(cell + 1) * d];
                for c in 0..d {
                    dst[c] += wt * src[c];
                }
            }
        }
        self.tape.push(
            Op::Bilinear {
                grid: self.id,
                points: points.id,
            },
            Tensor::new(vec![n, d], out)?,
            "bilinear_sample",
        )
    }

    /// Applies a per-row 2×2 matrix (row-major `[a, b, c, d]`) to every
    /// consecutive coordinate pair of a `rows × 2K` tensor. With `transpose`
    /// the matrix is transposed first.
    pub fn rotate_pairs(self, mats: Arc<Vec<[f64; 4]>>, transpose: bool) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 || !a.shape()[1].is_multiple_of(2) || a.shape()[0] != mats.len() {
            return Err(TensorError::Contract(format!(
                "rotate_pairs: shape {:?} with {} matrices",
                a.shape(),
                mats.len()
            )));
        }
        let cols = a.shape()[1];
        let ad = a.data();
        let mut out = vec![0.0; ad.len()];
        for (r, m) in mats.iter().enumerate() {
            let m = if transpose { [m[0], m[2], m[1], m[3]] } else { *m };
            for p in (0..cols).step_by(2) {
                let (x, y) = (ad[r * cols + p], ad[r * cols + p + 1]);
                out[r * cols + p] = m[0] * x + m[1] * y;
                out[r * cols + p + 1] = m[2] * x + m[3] * y;
            }
        }
        self.tape.push(
            Op::RotatePairs {
                a: self.id,
                mats,
                transpose,
            },
            Tensor::new(a.shape().to_vec(), out)?,
            "rotate_pairs",
        )
    }
}

/// Max-subtracted softmax on raw values.
pub(crate) fn softmax_values(data: &[f64], shape: &[usize], axis: usize) -> Result<Vec<f64>> {
    let (outer, len, inner) = split_axis(shape, axis)?;
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let m = (0..len).map(|l| data[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in 0..len {
                let e = (data[at(l)] - m).exp();
                out[at(l)] = e;
                z += e;
            }
            for l in 0..len {
                out[at(l)] /= z;
            }
        }
    }
    Ok(out)
}
