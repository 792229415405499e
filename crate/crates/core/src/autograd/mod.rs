//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass as a node in an
//! append-only list. Since nodes can only refer to earlier nodes, the graph is
//! acyclic by construction and a single reverse sweep computes all gradients.
//! Tapes are meant to live for one training step and then be dropped.

mod gradcheck;

pub use gradcheck::{grad_check, GradReport, ParamCheck};

use std::rc::Rc;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `b` is either the same shape as `a` or a vector broadcast along `a`'s leading dimension.
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    ClampMin(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Conv1x1 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatVec {
        w: Var,
        x: Var,
    },
    Softmax(Var),
    LogSoftmax {
        x: Var,
        mask: Option<Rc<[bool]>>,
    },
    Pick(Var, usize),
    Sum(Var),
    MeanChannels(Var),
    MeanLocations(Var),
    WeightedSum {
        feat: Var,
        alpha: Var,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Row {
        table: Var,
        row: usize,
    },
    MapCrossEntropy {
        pred: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    relu_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            relu_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf, present once a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.leaf_grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Smallest `|input|` seen by any ReLU on this tape. Finite-difference
    /// checks are unreliable when this is tiny.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(value, op, ng)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (a, b, broadcast) = if sa == sb {
            (a, b, false)
        } else if sb.len() == 1 && sa.len() > 1 && sb[0] == sa[0] {
            (a, b, true)
        } else if sa.len() == 1 && sb.len() > 1 && sa[0] == sb[0] {
            (b, a, true)
        } else {
            return dim_err(format!("binary op on shapes {sa:?} and {sb:?}"));
        };
        let av = self.value(a);
        let bv = self.value(b).data();
        let inner = if broadcast { av.numel() / av.shape()[0] } else { 1 };
        let combine = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Mul => x * y,
        };
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let j = if broadcast { i / inner } else { i };
                combine(x, bv[j])
            })
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            },
            ng,
        ))
    }

    /// Elementwise sum; a vector operand broadcasts along the other operand's channel dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    /// Hadamard product, with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let margin = self
            .value(a)
            .data()
            .iter()
            .fold(f64::INFINITY, |m, x| m.min(x.abs()));
        self.relu_margin = self.relu_margin.min(margin);
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// `max(x, lo)` elementwise; gradient flows only where `x > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, Op::ClampMin(a, lo), |x| x.max(lo))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Natural log. Fails instead of producing NaN or -inf on nonpositive input.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("log of nonpositive value {bad}")));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    /// Per-location linear map: `out[d,h,w] = Σ_c w[d,c] x[c,h,w] + b[d]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (c, h, wd) = self.value(x).chw()?;
        let ws = self.value(w).shape();
        if ws.len() != 2 || ws[1] != c {
            return dim_err(format!("conv1x1 weights {ws:?} vs {c} input channels"));
        }
        let d = ws[0];
        if let Some(b) = b {
            if self.value(b).shape() != [d] {
                return dim_err(format!(
                    "conv1x1 bias {:?} vs {d} filters",
                    self.value(b).shape()
                ));
            }
        }
        let hw = h * wd;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; d * hw];
        for (di, orow) in out.chunks_exact_mut(hw).enumerate() {
            if let Some(b) = b {
                orow.fill(self.value(b).data()[di]);
            }
            for ci in 0..c {
                let k = wv[di * c + ci];
                if k == 0.0 {
                    continue;
                }
                for (o, &xi) in orow.iter_mut().zip(&xv[ci * hw..(ci + 1) * hw]) {
                    *o += k * xi;
                }
            }
        }
        let value = Tensor::new(&[d, h, wd], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(value, Op::Conv1x1 { x, w, b }, ng))
    }

    /// `W x` for a matrix `W: M×N` and a vector `x: N`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let ws = self.value(w).shape();
        let xs = self.value(x).shape();
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return dim_err(format!("matvec {ws:?} × {xs:?}"));
        }
        let (m, n) = (ws[0], ws[1]);
        let wv = self.value(w).data();
        let xv = self.value(x).data();
        let out = (0..m)
            .map(|i| dot(&wv[i * n..(i + 1) * n], xv))
            .collect();
        let ng = self.ng(&[w, x]);
        Ok(self.push(Tensor::vector(out), Op::MatVec { w, x }, ng))
    }

    /// `W x + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matvec(w, x)?;
        if self.value(b).shape() != self.value(y).shape() {
            return dim_err(format!(
                "affine bias {:?} vs output {:?}",
                self.value(b).shape(),
                self.value(y).shape()
            ));
        }
        self.add(y, b)
    }

    /// Softmax over every element, max-subtracted for stability.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::Domain("softmax of non-finite input".into()));
        }
        let value = Tensor::new(xv.shape(), softmax_slice(xv.data()))?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Softmax(x), ng))
    }

    /// Spatial softmax of a `1×H×W` score map.
    pub fn softmax_spatial(&mut self, x: Var) -> Result<Var> {
        let (c, _, _) = self.value(x).chw()?;
        if c != 1 {
            return dim_err(format!("spatial softmax expects 1×H×W, got {c} channels"));
        }
        self.softmax(x)
    }

    /// Log-softmax of a vector. Entries with `mask[i] == false` are excluded
    /// from the normalization and get log-probability `-inf`.
    pub fn log_softmax(&mut self, x: Var, mask: Option<Rc<[bool]>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 {
            return dim_err(format!("log_softmax expects a vector, got {:?}", xv.shape()));
        }
        if let Some(m) = &mask {
            if m.len() != xv.numel() || !m.iter().any(|&b| b) {
                return dim_err("log_softmax mask length or emptiness".to_string());
            }
        }
        if !xv.is_finite() {
            return Err(Error::Domain("log_softmax of non-finite input".into()));
        }
        let out = log_softmax_slice(xv.data(), mask.as_deref());
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::vector(out), Op::LogSoftmax { x, mask }, ng))
    }

    /// Scalar `x[index]` of a vector.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 || index >= xv.numel() {
            return dim_err(format!("pick {index} from {:?}", xv.shape()));
        }
        let value = Tensor::scalar(xv.data()[index]);
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Pick(x, index), ng))
    }

    /// `-log softmax(logits)[target]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        target: usize,
        mask: Option<Rc<[bool]>>,
    ) -> Result<Var> {
        let lp = self.log_softmax(logits, mask)?;
        let picked = self.pick(lp, target)?;
        if !self.value(picked).item().is_finite() {
            return Err(Error::Domain(format!("target {target} is masked out")));
        }
        Ok(self.scale(picked, -1.0))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(value, Op::Sum(x), ng)
    }

    /// Sums a list of scalars (or same-shape tensors).
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::Contract("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Channel mean at each location: `C×H×W → 1×H×W`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; hw];
        for ci in 0..c {
            for (o, &v) in out.iter_mut().zip(&xv[ci * hw..(ci + 1) * hw]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= c as f64);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[1, h, w], out)?, Op::MeanChannels(x), ng))
    }

    /// Location mean per channel: `C×H×W → C`.
    pub fn mean_locations(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let out = (0..c)
            .map(|ci| xv[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::vector(out), Op::MeanLocations(x), ng))
    }

    /// `z[d] = Σ_i alpha[i] feat[d, i]` for `feat: D×H×W`, `alpha: 1×H×W`.
    pub fn weighted_sum(&mut self, feat: Var, alpha: Var) -> Result<Var> {
        let (d, h, w) = self.value(feat).chw()?;
        if self.value(alpha).shape() != [1, h, w] {
            return dim_err(format!(
                "weights {:?} vs features {:?}",
                self.value(alpha).shape(),
                self.value(feat).shape()
            ));
        }
        let hw = h * w;
        let fv = self.value(feat).data();
        let av = self.value(alpha).data();
        let out = (0..d).map(|di| dot(&fv[di * hw..(di + 1) * hw], av)).collect();
        let ng = self.ng(&[feat, alpha]);
        Ok(self.push(Tensor::vector(out), Op::WeightedSum { feat, alpha }, ng))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &x in xs {
            let v = self.value(x);
            if v.rank() != 1 {
                return dim_err(format!("concat of non-vector {:?}", v.shape()));
            }
            out.extend_from_slice(v.data());
        }
        if out.is_empty() {
            return contract_err("concat of nothing");
        }
        let ng = self.ng(xs);
        Ok(self.push(Tensor::vector(out), Op::Concat(xs.to_vec()), ng))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 1 || len == 0 || start + len > v.numel() {
            return dim_err(format!("slice {start}+{len} of {:?}", v.shape()));
        }
        let value = Tensor::vector(v.data()[start..start + len].to_vec());
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Slice { x, start }, ng))
    }

    /// Row `row` of a matrix, e.g. an embedding lookup.
    pub fn row(&mut self, table: Var, row: usize) -> Result<Var> {
        let s = self.value(table).shape();
        if s.len() != 2 || row >= s[0] {
            return dim_err(format!("row {row} of {s:?}"));
        }
        let n = s[1];
        let value = Tensor::vector(self.value(table).data()[row * n..(row + 1) * n].to_vec());
        let ng = self.ng(&[table]);
        Ok(self.push(value, Op::Row { table, row }, ng))
    }

    /// `-Σ target · log(pred)` between a predicted distribution and a
    /// normalized target map of the same shape.
    pub fn map_cross_entropy(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return dim_err(format!(
                "map loss on {:?} vs {:?}",
                pv.shape(),
                target.shape()
            ));
        }
        check_distribution(target, 1e-6)?;
        if pv.data().iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Domain("map loss on nonpositive prediction".into()));
        }
        let loss: f64 = -pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| if t > 0.0 { t * p.ln() } else { 0.0 })
            .sum::<f64>();
        let ng = self.ng(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MapCrossEntropy {
                pred,
                target: target.clone(),
            },
            ng,
        ))
    }

    /// Propagates `d loss / d node` back to every leaf created with [`Tape::leaf`].
    /// Leaf gradients accumulate across repeated calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return contract_err(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let shape = self.nodes[i].value.shape().to_vec();
            match &mut self.leaf_grads[i] {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(Tensor::new(&shape, g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let out = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let inner = if broadcast {
                    out.len() / self.nodes[b.0].value.numel()
                } else {
                    1
                };
                let bi = |i: usize| if broadcast { i / inner } else { i };
                if wants(a) {
                    let ga = slot(grads, a, out.len());
                    match kind {
                        BinaryKind::Add => axpy(ga, g),
                        BinaryKind::Mul => {
                            let bv = val(b);
                            for (i, (s, &gi)) in ga.iter_mut().zip(g).enumerate() {
                                *s += gi * bv[bi(i)];
                            }
                        }
                    }
                }
                if wants(b) {
                    let bl = self.nodes[b.0].value.numel();
                    let av = val(a);
                    let gb = slot(grads, b, bl);
                    for (i, &gi) in g.iter().enumerate() {
                        let contrib = match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Mul => gi * av[i],
                        };
                        gb[bi(i)] += contrib;
                    }
                }
            }
            Op::Scale(a, k) => {
                if wants(a) {
                    let ga = slot(grads, a, g.len());
                    ga.iter_mut().zip(g).for_each(|(s, &gi)| *s += k * gi);
                }
            }
            Op::Shift(a) => {
                if wants(a) {
                    axpy(slot(grads, a, g.len()), g);
                }
            }
            Op::Relu(a) => {
                let av = val(a);
                let ga = slot(grads, a, g.len());
                for ((s, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                    if x > 0.0 {
                        *s += gi;
                    }
                }
            }
            Op::ClampMin(a, lo) => {
                let av = val(a);
                let ga = slot(grads, a, g.len());
                for ((s, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                    if x > lo {
                        *s += gi;
                    }
                }
            }
            Op::Tanh(a) => {
                let ga = slot(grads, a, g.len());
                for ((s, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                    *s += gi * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                let ga = slot(grads, a, g.len());
                for ((s, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                    *s += gi * y * (1.0 - y);
                }
            }
            Op::Log(a) => {
                let av = val(a);
                let ga = slot(grads, a, g.len());
                for ((s, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                    *s += gi / x;
                }
            }
            Op::Conv1x1 { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                let d = self.nodes[w.0].value.shape()[0];
                let xv = val(x);
                let wv = val(w);
                if wants(w) {
                    let gw = slot(grads, w, d * c);
                    for di in 0..d {
                        let grow = &g[di * hw..(di + 1) * hw];
                        for ci in 0..c {
                            gw[di * c + ci] += dot(grow, &xv[ci * hw..(ci + 1) * hw]);
                        }
                    }
                }
                if let Some(b) = b.filter(|&b| wants(b)) {
                    let gb = slot(grads, b, d);
                    for (di, s) in gb.iter_mut().enumerate() {
                        *s += g[di * hw..(di + 1) * hw].iter().sum::<f64>();
                    }
                }
                if wants(x) {
                    let gx = slot(grads, x, c * hw);
                    for di in 0..d {
                        let grow = &g[di * hw..(di + 1) * hw];
                        for ci in 0..c {
                            let k = wv[di * c + ci];
                            for (s, &gi) in gx[ci * hw..(ci + 1) * hw].iter_mut().zip(grow) {
                                *s += k * gi;
                            }
                        }
                    }
                }
            }
            Op::MatVec { w, x } => {
                let n = self.nodes[x.0].value.numel();
                let m = g.len();
                let xv = val(x);
                let wv = val(w);
                if wants(w) {
                    let gw = slot(grads, w, m * n);
                    for (i, &gi) in g.iter().enumerate() {
                        if gi == 0.0 {
                            continue;
                        }
                        for (s, &xj) in gw[i * n..(i + 1) * n].iter_mut().zip(xv) {
                            *s += gi * xj;
                        }
                    }
                }
                if wants(x) {
                    let gx = slot(grads, x, n);
                    for (i, &gi) in g.iter().enumerate() {
                        for (s, &wij) in gx.iter_mut().zip(&wv[i * n..(i + 1) * n]) {
                            *s += gi * wij;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let inner = dot(g, out);
                let gx = slot(grads, x, g.len());
                for ((s, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                    *s += y * (gi - inner);
                }
            }
            Op::LogSoftmax { x, ref mask } => {
                let allowed = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                let gsum: f64 = g
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| allowed(i))
                    .map(|(_, &gi)| gi)
                    .sum();
                let gx = slot(grads, x, g.len());
                for (i, s) in gx.iter_mut().enumerate() {
                    if allowed(i) {
                        *s += g[i] - out[i].exp() * gsum;
                    }
                }
            }
            Op::Pick(x, idx) => {
                let len = self.nodes[x.0].value.numel();
                slot(grads, x, len)[idx] += g[0];
            }
            Op::Sum(x) => {
                let len = self.nodes[x.0].value.numel();
                slot(grads, x, len).iter_mut().for_each(|s| *s += g[0]);
            }
            Op::MeanChannels(x) => {
                let c = self.nodes[x.0].value.shape()[0];
                let hw = g.len();
                let gx = slot(grads, x, c * hw);
                for ci in 0..c {
                    for (s, &gi) in gx[ci * hw..(ci + 1) * hw].iter_mut().zip(g) {
                        *s += gi / c as f64;
                    }
                }
            }
            Op::MeanLocations(x) => {
                let len = self.nodes[x.0].value.numel();
                let hw = len / g.len();
                let gx = slot(grads, x, len);
                for (ci, &gi) in g.iter().enumerate() {
                    gx[ci * hw..(ci + 1) * hw]
                        .iter_mut()
                        .for_each(|s| *s += gi / hw as f64);
                }
            }
            Op::WeightedSum { feat, alpha } => {
                let hw = self.nodes[alpha.0].value.numel();
                let d = g.len();
                let fv = val(feat);
                let av = val(alpha);
                if wants(feat) {
                    let gf = slot(grads, feat, d * hw);
                    for (di, &gi) in g.iter().enumerate() {
                        for (s, &a) in gf[di * hw..(di + 1) * hw].iter_mut().zip(av) {
                            *s += gi * a;
                        }
                    }
                }
                if wants(alpha) {
                    let ga = slot(grads, alpha, hw);
                    for (di, &gi) in g.iter().enumerate() {
                        for (s, &f) in ga.iter_mut().zip(&fv[di * hw..(di + 1) * hw]) {
                            *s += gi * f;
                        }
                    }
                }
            }
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if wants(p) {
                        axpy(slot(grads, p, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, start } => {
                let len = self.nodes[x.0].value.numel();
                axpy(&mut slot(grads, x, len)[start..start + g.len()], g);
            }
            Op::Row { table, row } => {
                let len = self.nodes[table.0].value.numel();
                let n = g.len();
                axpy(&mut slot(grads, table, len)[row * n..(row + 1) * n], g);
            }
            Op::MapCrossEntropy { pred, ref target } => {
                let pv = val(pred);
                let gp = slot(grads, pred, pv.len());
                for ((s, &p), &t) in gp.iter_mut().zip(pv).zip(target.data()) {
                    *s -= g[0] * t / p;
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn log_softmax_slice(x: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let max = x
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed(i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + x.iter()
            .enumerate()
            .filter(|&(i, _)| allowed(i))
            .map(|(_, &v)| (v - max).exp())
            .sum::<f64>()
            .ln();
    x.iter()
        .enumerate()
        .map(|(i, &v)| if allowed(i) { v - lse } else { f64::NEG_INFINITY })
        .collect()
}

/// Checks that `t` is nonnegative and sums to one within `tol`.
pub(crate) fn check_distribution(t: &Tensor, tol: f64) -> Result<()> {
    if t.data().iter().any(|&v| !(v >= 0.0)) {
        return contract_err("target map has negative or NaN entries");
    }
    let total = t.sum();
    if (total - 1.0).abs() > tol {
        return contract_err(format!("target map sums to {total}, not 1"));
    }
    Ok(())
}
