//! Reverse-mode tape. Nodes are appended in evaluation order, so the node
//! list is already topologically sorted and backward is a single reverse sweep.

use std::rc::Rc;

use super::kernels::{self, ConvGeom, Mat};
use super::{Float, Gradients, ParamId, ParamSet, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Dense { x: Var, w: Var, b: Var },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat { a: Var, b: Var },
    Gather { x: Var, index: Rc<Vec<usize>> },
    Gram(Var),
    Mae(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Penalty { h: Var, w: Var },
}

impl<T: Copy> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Dense { x, w, b } => vec![x, w, b],
            Op::Relu(x) | Op::Tanh(x) | Op::Sigmoid(x) | Op::Gram(x) | Op::Scale(x, _) => vec![x],
            Op::Gather { x, .. } => vec![x],
            Op::Concat { a, b } | Op::Mae(a, b) | Op::Add(a, b) => vec![a, b],
            Op::Penalty { h, w } => vec![h, w],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A recording of one forward evaluation.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    /// Kink signature being replayed, and how much of it is consumed.
    frozen: Option<(Vec<i8>, usize)>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            frozen: None,
        }
    }

    /// A tape that evaluates the smooth piece selected by `signature` (from
    /// [`Tape::kink_signature`] of the same graph): ReLUs keep the recorded
    /// masks and MAE terms the recorded signs, wherever the inputs move.
    /// Meant for finite differences; its gradients are not meaningful.
    pub fn with_frozen_kinks(signature: Vec<i8>) -> Self {
        Tape {
            nodes: Vec::new(),
            frozen: Some((signature, 0)),
        }
    }

    fn frozen_signs(&mut self, n: usize) -> Option<Vec<i8>> {
        let (sig, pos) = self.frozen.as_mut()?;
        let end = *pos + n;
        assert!(end <= sig.len(), "frozen kink signature is shorter than the graph");
        let out = sig[*pos..end].to_vec();
        *pos = end;
        Some(out)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Copies a value into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    /// Same-padded, stride-1 convolution. `x`: H×W×C, `w`: k×k×C×F, `b`: F.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd, c) = self.value(x).hwc()?;
        let ws = self.shape(w).to_vec();
        let [k, k2, wc, f] = ws[..] else {
            return Err(Error::shape("conv2d", self.shape(x), &ws));
        };
        if k != k2 || k % 2 == 0 || wc != c {
            return Err(Error::shape("conv2d", self.shape(x), &ws));
        }
        if self.shape(b) != [f] {
            return Err(Error::shape("conv2d bias", &ws, self.shape(b)));
        }
        let geom = ConvGeom { h, w: wd, c, k, f };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), geom);
        Ok(self.push(Tensor::new(&[h, wd, f], out)?, Op::Conv2d { x, w, b, geom }))
    }

    /// Per-pixel fully connected map shared across pixels. `w`: C×N, `b`: N.
    pub fn dense_channels(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd, c) = self.value(x).hwc()?;
        let ws = self.shape(w).to_vec();
        let [wc, n] = ws[..] else {
            return Err(Error::shape("dense_channels", self.shape(x), &ws));
        };
        if wc != c {
            return Err(Error::shape("dense_channels", self.shape(x), &ws));
        }
        if self.shape(b) != [n] {
            return Err(Error::shape("dense_channels bias", &ws, self.shape(b)));
        }
        let mut out = Vec::with_capacity(h * wd * n);
        for _ in 0..h * wd {
            out.extend_from_slice(self.value(b).data());
        }
        kernels::matmul(
            Mat::new(self.value(x).data(), h * wd, c),
            Mat::new(self.value(w).data(), c, n),
            &mut out,
            T::one(),
        );
        Ok(self.push(Tensor::new(&[h, wd, n], out)?, Op::Dense { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = match self.frozen_signs(self.value(x).len()) {
            None => self.value(x).map(|v| if v > T::zero() { v } else { T::zero() }),
            Some(signs) => {
                let xs = self.value(x);
                let data = xs.data().iter().zip(&signs).map(|(&v, &s)| if s > 0 { v } else { T::zero() }).collect();
                Tensor::new(xs.shape(), data).expect("relu shape")
            }
        };
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Channel concatenation; channels of `a` come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ha, wa, ca) = self.value(a).hwc()?;
        let (hb, wb, cb) = self.value(b).hwc()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape("concat_channels", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ha * wa * (ca + cb));
        for p in 0..ha * wa {
            out.extend_from_slice(&da[p * ca..(p + 1) * ca]);
            out.extend_from_slice(&db[p * cb..(p + 1) * cb]);
        }
        Ok(self.push(Tensor::new(&[ha, wa, ca + cb], out)?, Op::Concat { a, b }))
    }

    /// h×w×(C·r²) → (h·r)×(w·r)×C.
    pub fn depth_to_space(&mut self, x: Var, r: usize) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::invalid(format!(
                "depth_to_space: {c} channels not divisible by r²={}",
                r * r
            )));
        }
        let index = kernels::depth_to_space_index(h, w, c, r);
        Ok(self.gather(x, Rc::new(index), &[h * r, w * r, c / (r * r)]))
    }

    /// (h·r)×(w·r)×C → h×w×(C·r²); exact inverse of [`Tape::depth_to_space`].
    pub fn space_to_depth(&mut self, x: Var, r: usize) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::invalid(format!(
                "space_to_depth: {h}×{w} not divisible by r={r}"
            )));
        }
        let (ih, iw, ic) = (h / r, w / r, c * r * r);
        let forward = kernels::depth_to_space_index(ih, iw, ic, r);
        let mut index = vec![0; forward.len()];
        for (dst_of_d2s, &src_of_d2s) in forward.iter().enumerate() {
            index[src_of_d2s] = dst_of_d2s;
        }
        Ok(self.gather(x, Rc::new(index), &[ih, iw, ic]))
    }

    fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        let src = self.value(x).data();
        let out: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, out).expect("gather shape");
        self.push(value, Op::Gather { x, index })
    }

    /// Channel Gram matrix normalized by H·W·C.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        let g = kernels::gram(self.value(x).data(), h * w, c);
        Ok(self.push(Tensor::new(&[c, c], g)?, Op::Gram(x)))
    }

    /// Mean absolute error between equally shaped tensors.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mae", self.shape(a), self.shape(b)));
        }
        let signs = self.frozen_signs(self.value(a).len());
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = da.len();
        let sum: T = match signs {
            None => da.iter().zip(db).map(|(&x, &y)| (x - y).abs()).sum(),
            Some(s) => da
                .iter()
                .zip(db)
                .zip(&s)
                .map(|((&x, &y), &s)| match s {
                    1 => x - y,
                    -1 => y - x,
                    _ => T::zero(),
                })
                .sum(),
        };
        let mean = if n == 0 { T::zero() } else { sum / T::from_usize(n).unwrap() };
        Ok(self.push(Tensor::scalar(mean), Op::Mae(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// Contractive penalty of a tanh layer with activations `h` (…×N) and
    /// weights `w` (C×N): mean over pixels of Σ_j (1−h_j²)² Σ_i w_ij².
    pub fn contractive_penalty(&mut self, h: Var, w: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let hs = self.shape(h).to_vec();
        let n = *ws.last().unwrap_or(&0);
        if ws.len() != 2 || hs.last() != Some(&n) {
            return Err(Error::shape("contractive_penalty", &hs, &ws));
        }
        let col_norms = column_sq_norms(self.value(w).data(), ws[0], n);
        let hd = self.value(h).data();
        let pixels = hd.len().checked_div(n).unwrap_or(0);
        let mut total = T::zero();
        for row in hd.chunks_exact(n.max(1)) {
            for (&hj, &sj) in row.iter().zip(&col_norms) {
                let d = T::one() - hj * hj;
                total = total + d * d * sj;
            }
        }
        let p = if pixels == 0 { T::zero() } else { total / T::from_usize(pixels).unwrap() };
        Ok(self.push(Tensor::scalar(p), Op::Penalty { h, w }))
    }

    /// Side of every kink the recording sits on: the sign of each ReLU input
    /// and of each MAE difference. Two evaluations with equal signatures lie
    /// in the same smooth piece.
    pub fn kink_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        let sign = |v: T| {
            if v > T::zero() {
                1
            } else if v < T::zero() {
                -1
            } else {
                0
            }
        };
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => sig.extend(self.value(x).data().iter().map(|&v| sign(v))),
                Op::Mae(a, b) => sig.extend(
                    self.value(a)
                        .data()
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(&x, &y)| sign(x - y)),
                ),
                _ => {}
            }
        }
        sig
    }

    /// Accumulates d`loss`/dθ into `grads` for every parameter θ in `targets`.
    /// Parameters outside `targets` are left untouched.
    pub fn backward(&self, loss: Var, grads: &mut Gradients<T>, targets: &ParamSet) -> Result<()> {
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        let end = loss.0 + 1;
        let mut reach = vec![false; end];
        for i in 0..end {
            reach[i] = match &self.nodes[i].op {
                Op::Input => false,
                Op::Param(id) => targets.contains(*id),
                op => op.inputs().iter().any(|v| reach[v.0]),
            };
        }
        if !reach[loss.0] {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..end).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..end).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !reach[i] {
                continue;
            }
            if let Op::Param(id) = self.nodes[i].op {
                grads.accumulate(id, &g);
                continue;
            }
            for (input, grad) in self.node_backward(i, &g, &reach) {
                match &mut adj[input.0] {
                    Some(acc) => {
                        for (a, &v) in acc.iter_mut().zip(&grad) {
                            *a = *a + v;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[T], reach: &[bool]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let wants = |v: Var| reach[v.0];
        let mut res = Vec::new();
        match node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let grads = kernels::conv2d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    geom,
                    [wants(x), wants(w), wants(b)],
                );
                for (v, d) in [(x, grads.input), (w, grads.filters), (b, grads.bias)] {
                    if let Some(d) = d {
                        res.push((v, d));
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let xs = self.value(x);
                let (h, wd, c) = xs.hwc().expect("dense input rank");
                let n = self.shape(w)[1];
                let p = h * wd;
                let gm = Mat::new(g, p, n);
                if wants(x) {
                    let mut d = vec![T::zero(); p * c];
                    kernels::matmul(gm, Mat::new(self.value(w).data(), c, n).t(), &mut d, T::zero());
                    res.push((x, d));
                }
                if wants(w) {
                    let mut d = vec![T::zero(); c * n];
                    kernels::matmul(Mat::new(xs.data(), p, c).t(), gm, &mut d, T::zero());
                    res.push((w, d));
                }
                if wants(b) {
                    let mut d = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        for (acc, &v) in d.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    res.push((b, d));
                }
            }
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(out)
                    .map(|(&gi, &y)| if y > T::zero() { gi } else { T::zero() })
                    .collect();
                res.push((x, d));
            }
            Op::Tanh(x) => {
                let d = g.iter().zip(out).map(|(&gi, &y)| gi * (T::one() - y * y)).collect();
                res.push((x, d));
            }
            Op::Sigmoid(x) => {
                let d = g.iter().zip(out).map(|(&gi, &y)| gi * y * (T::one() - y)).collect();
                res.push((x, d));
            }
            Op::Concat { a, b } => {
                let ca = self.shape(a)[2];
                let cb = self.shape(b)[2];
                let pixels = self.value(a).len() / ca.max(1);
                let (mut da, mut db) = (Vec::with_capacity(pixels * ca), Vec::with_capacity(pixels * cb));
                for row in g.chunks_exact(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                if wants(a) {
                    res.push((a, da));
                }
                if wants(b) {
                    res.push((b, db));
                }
            }
            Op::Gather { x, ref index } => {
                let mut d = vec![T::zero(); self.value(x).len()];
                for (&src, &gi) in index.iter().zip(g) {
                    d[src] = d[src] + gi;
                }
                res.push((x, d));
            }
            Op::Gram(x) => {
                let (h, w, c) = self.value(x).hwc().expect("gram input rank");
                res.push((x, kernels::gram_backward(self.value(x).data(), g, h * w, c)));
            }
            Op::Mae(a, b) => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                let n = T::from_usize(da.len().max(1)).unwrap();
                let scale = g[0] / n;
                let sign: Vec<T> = da
                    .iter()
                    .zip(db)
                    .map(|(&x, &y)| {
                        if x > y {
                            scale
                        } else if x < y {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if wants(b) {
                    res.push((b, sign.iter().map(|&s| -s).collect()));
                }
                if wants(a) {
                    res.push((a, sign));
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    res.push((a, g.to_vec()));
                }
                if wants(b) {
                    res.push((b, g.to_vec()));
                }
            }
            Op::Scale(x, s) => {
                res.push((x, g.iter().map(|&v| v * s).collect()));
            }
            Op::Penalty { h, w } => {
                let ws = self.shape(w);
                let (rows, n) = (ws[0], ws[1]);
                let wd = self.value(w).data();
                let hd = self.value(h).data();
                let pixels = hd.len() / n.max(1);
                let inv = if pixels == 0 { T::zero() } else { g[0] / T::from_usize(pixels).unwrap() };
                if wants(h) {
                    let col_norms = column_sq_norms(wd, rows, n);
                    let four = T::from_f64_lossy(4.0);
                    let mut d = Vec::with_capacity(hd.len());
                    for row in hd.chunks_exact(n) {
                        for (&hj, &sj) in row.iter().zip(&col_norms) {
                            d.push(-four * hj * (T::one() - hj * hj) * sj * inv);
                        }
                    }
                    res.push((h, d));
                }
                if wants(w) {
                    let mut energy = vec![T::zero(); n];
                    for row in hd.chunks_exact(n) {
                        for (e, &hj) in energy.iter_mut().zip(row) {
                            let d = T::one() - hj * hj;
                            *e = *e + d * d;
                        }
                    }
                    let two = T::from_f64_lossy(2.0);
                    let d = wd
                        .iter()
                        .enumerate()
                        .map(|(idx, &wij)| two * wij * energy[idx % n] * inv)
                        .collect();
                    res.push((w, d));
                }
            }
        }
        res
    }
}

fn column_sq_norms<T: Float>(w: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut s = vec![T::zero(); cols];
    for r in 0..rows {
        for (acc, &v) in s.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *acc = *acc + v * v;
        }
    }
    s
}
