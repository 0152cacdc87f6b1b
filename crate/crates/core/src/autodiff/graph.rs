use super::conv::{conv_backward, conv_forward, ConvGeom, ConvShape};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        shape: ConvShape,
    },
    Relu(Var),
    Add(Var, Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvgPool(Var),
    TemplateDistance {
        series: Var,
        templates: Var,
    },
    PairwiseAbs(Var, Var),
    Reshape(Var),
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    NegEuclidean(Var, Var),
    BprLoss {
        pos: Var,
        neg: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// order is already a topological order for the backward sweep.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Which side of its kink every ReLU and absolute value sits on. Two
    /// evaluations with equal patterns lie in one smooth piece of the function.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.value(*x).data().iter().map(|&v| v > T::zero())),
                Op::TemplateDistance { series, templates } => {
                    let (h, k) = (self.shape(*templates)[1], self.shape(*templates)[0]);
                    let t = self.value(*templates).data();
                    for &x in self.value(*series).data() {
                        for j in 0..h {
                            out.extend((0..k).map(|c| x >= t[c * h + j]));
                        }
                    }
                }
                Op::PairwiseAbs(a, b) => {
                    let (w, h) = (self.shape(*a)[1], self.shape(*b)[1]);
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    for r in 0..self.shape(*a)[0] {
                        for &x in &va[r * w..][..w] {
                            out.extend(vb[r * h..][..h].iter().map(|&y| x >= y));
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert!(value.is_finite(), "non-finite activation from {:?}", op_name(&op));
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-D cross-correlation of `[N,H,W,Cin]` with `[kh,kw,Cin,Cout]` weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        if ws.len() != 4 || ws[0] != ws[1] {
            return Err(Error::dim(format!("conv2d weight must be [k,k,Cin,Cout], got {ws:?}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::param(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        self.conv(input, weight, bias, ConvGeom::square(ws[0], stride, padding))
    }

    /// 1-D convolution of `[N,L,Cin]` with `[k,Cin,Cout]` weights and
    /// symmetric padding.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv1d_padded(input, weight, bias, stride, padding, padding)
    }

    /// 1-D convolution with independent left/right padding.
    pub fn conv1d_padded(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if is.len() != 3 || ws.len() != 3 {
            return Err(Error::dim(format!(
                "conv1d expects input [N,L,Cin] and weight [k,Cin,Cout], got {is:?} and {ws:?}"
            )));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::param(format!("conv1d stride must be 1 or 2, got {stride}")));
        }
        let x4 = self.reshape(input, &[is[0], 1, is[1], is[2]])?;
        let w4 = self.reshape(weight, &[1, ws[0], ws[1], ws[2]])?;
        let y = self.conv(x4, w4, bias, ConvGeom::along_width(ws[0], stride, pad_left, pad_right))?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[2], ys[3]])
    }

    pub fn conv(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if is.len() != 4 || ws.len() != 4 || ws[0] != geom.kh || ws[1] != geom.kw {
            return Err(Error::dim(format!(
                "conv expects input [N,H,W,C] and weight [{},{},Cin,Cout], got {is:?} and {ws:?}",
                geom.kh, geom.kw
            )));
        }
        if ws[2] != is[3] {
            return Err(Error::dim(format!(
                "conv input has {} channels, weight expects {}",
                is[3], ws[2]
            )));
        }
        if bs != [ws[3]] {
            return Err(Error::dim(format!("conv bias must be [{}], got {bs:?}", ws[3])));
        }
        let (ho, wo) = geom.out_dims(is[1], is[2]).ok_or_else(|| {
            Error::dim(format!("conv output is empty for input {is:?} and geometry {geom:?}"))
        })?;
        let shape = ConvShape {
            n: is[0],
            h: is[1],
            w: is[2],
            cin: is[3],
            cout: ws[3],
            ho,
            wo,
        };
        let out = conv_forward(
            &shape,
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![shape.n, ho, wo, shape.cout], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
                shape,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        )
        .expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!(
                "add needs identical shapes, got {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    /// `[N,F] x [F,G] + [G]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if is.len() != 2 || ws.len() != 2 || is[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::dim(format!(
                "linear expects [N,F], [F,G], [G]; got {is:?}, {ws:?}, {bs:?}"
            )));
        }
        let (n, f, g) = (is[0], is[1], ws[1]);
        let mut out = Vec::with_capacity(n * g);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        T::gemm(n, f, g, self.value(input).data(), f, 1, self.value(weight).data(), g, 1, T::one(), &mut out);
        let value = Tensor::new(vec![n, g], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, rg, Op::Linear { input, weight, bias }))
    }

    /// Mean over every axis between the first (batch) and last (channel).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::dim(format!("global_avg_pool needs [N,...,C], got {s:?}")));
        }
        let (n, c) = (s[0], s[s.len() - 1]);
        let spatial: usize = s[1..s.len() - 1].iter().product();
        if spatial == 0 {
            return Err(Error::dim("global_avg_pool over an empty spatial extent"));
        }
        let scale = T::one() / T::from_usize(spatial).expect("usize converts");
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            let acc = &mut out[b * c..][..c];
            for row in src[b * spatial * c..][..spatial * c].chunks_exact(c) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
            for a in acc.iter_mut() {
                *a = *a * scale;
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::GlobalAvgPool(x)))
    }

    /// `[N,W]` series against `[K,H]` templates gives `[N,W,H,K]` with
    /// entry `|a[n,i] - t[k,j]|`.
    pub fn template_distance(&mut self, series: Var, templates: Var) -> Result<Var> {
        let ss = self.shape(series).to_vec();
        let ts = self.shape(templates).to_vec();
        if ss.len() != 2 || ts.len() != 2 {
            return Err(Error::dim(format!(
                "template_distance expects [N,W] and [K,H], got {ss:?} and {ts:?}"
            )));
        }
        let (n, w, k, h) = (ss[0], ss[1], ts[0], ts[1]);
        let a = self.value(series).data();
        let t = self.value(templates).data();
        let mut out = Vec::with_capacity(n * w * h * k);
        for &x in a {
            for j in 0..h {
                out.extend((0..k).map(|c| (x - t[c * h + j]).abs()));
            }
        }
        let value = Tensor::new(vec![n, w, h, k], out)?;
        let rg = self.any_grad(&[series, templates]);
        Ok(self.push(value, rg, Op::TemplateDistance { series, templates }))
    }

    /// Row-wise pairwise matrices: `[N,W]`, `[N,H]` gives `[N,W,H,1]`.
    pub fn pairwise_abs(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::dim(format!(
                "pairwise_abs expects [N,W] and [N,H], got {sa:?} and {sb:?}"
            )));
        }
        let (n, w, h) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * w * h);
        for r in 0..n {
            let br = &vb[r * h..][..h];
            for &x in &va[r * w..][..w] {
                out.extend(br.iter().map(|&y| (x - y).abs()));
            }
        }
        let value = Tensor::new(vec![n, w, h, 1], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::PairwiseAbs(a, b)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Select rows along the leading axis; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.first().ok_or_else(|| Error::dim("gather_rows on a scalar"))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim(format!("row {bad} out of range for {n} rows")));
        }
        let stride: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            out.extend_from_slice(&src[r * stride..][..stride]);
        }
        let mut shape = s.clone();
        shape[0] = rows.len();
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::GatherRows {
                input: x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Row-wise `-||a - b||_2` for `[N,F]` inputs, giving `[N]`.
    pub fn neg_euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sa != sb {
            return Err(Error::dim(format!(
                "neg_euclidean expects two [N,F] inputs, got {sa:?} and {sb:?}"
            )));
        }
        let f = sa[1];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let out = va
            .chunks_exact(f)
            .zip(vb.chunks_exact(f))
            .map(|(x, y)| {
                let ss: T = x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum();
                -ss.sqrt()
            })
            .collect();
        let value = Tensor::new(vec![sa[0]], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::NegEuclidean(a, b)))
    }

    /// `sum_i softplus(neg_i - pos_i)`, i.e. `sum_i -log sigmoid(pos_i - neg_i)`.
    pub fn bpr_loss(&mut self, pos: Var, neg: Var) -> Result<Var> {
        let (sp, sn) = (self.shape(pos).to_vec(), self.shape(neg).to_vec());
        if sp.len() != 1 || sp != sn || sp[0] == 0 {
            return Err(Error::dim(format!(
                "bpr_loss expects two equal non-empty [m] score vectors, got {sp:?} and {sn:?}"
            )));
        }
        let loss: f64 = self
            .value(pos)
            .data()
            .iter()
            .zip(self.value(neg).data())
            .map(|(&p, &q)| softplus(q.as_f64() - p.as_f64()))
            .sum();
        let rg = self.any_grad(&[pos, neg]);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(loss)), rg, Op::BprLoss { pos, neg }))
    }

    /// `sum(x * weights)`, a scalar projection used to check gradients of
    /// non-scalar outputs.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let v = self.value(x);
        if v.numel() != weights.len() {
            return Err(Error::dim(format!(
                "weighted_sum over {} values with {} weights",
                v.numel(),
                weights.len()
            )));
        }
        let s: T = v.data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            rg,
            Op::WeightedSum {
                input: x,
                weights: weights.to_vec(),
            },
        ))
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    /// Back-propagate from a scalar node. Gradients accumulate into every
    /// leaf with `requires_grad`; intermediate gradients are released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let shape = self.shape(loss).to_vec();
        self.accumulate(loss, Tensor::full(&shape, T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.backward_node(idx, &gout)?;
            // only leaf gradients are kept
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].grad = Some(gout);
            }
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize, gout: &Tensor<T>) -> Result<()> {
        // Each arm computes input gradients from borrowed state, then
        // accumulates once the borrow ends.
        let mut pending: Vec<(Var, Tensor<T>)> = Vec::new();
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                geom,
                shape,
            } => {
                let wv = self.value(*weight);
                let mut dw = rg(*weight).then(|| Tensor::zeros(wv.shape()));
                let mut db = rg(*bias).then(|| Tensor::zeros(self.shape(*bias)));
                let dx = conv_backward(
                    shape,
                    geom,
                    self.value(*input).data(),
                    wv.data(),
                    gout.data(),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                    rg(*input),
                );
                if let Some(dx) = dx {
                    pending.push((*input, Tensor::new(self.shape(*input).to_vec(), dx)?));
                }
                if let Some(dw) = dw {
                    pending.push((*weight, dw));
                }
                if let Some(db) = db {
                    pending.push((*bias, db));
                }
            }
            Op::Relu(x) => {
                let out = &node.value;
                let data = out
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                pending.push((*x, Tensor::new(out.shape().to_vec(), data)?));
            }
            Op::Add(a, b) => {
                pending.push((*a, gout.clone()));
                pending.push((*b, gout.clone()));
            }
            Op::Linear { input, weight, bias } => {
                let (xs, ws) = (self.shape(*input), self.shape(*weight));
                let (n, f, g) = (xs[0], xs[1], ws[1]);
                if rg(*input) {
                    let mut dx = vec![T::zero(); n * f];
                    // dx = gout [n x g] * W^T [g x f]
                    T::gemm(n, g, f, gout.data(), g, 1, self.value(*weight).data(), 1, g, T::zero(), &mut dx);
                    pending.push((*input, Tensor::new(vec![n, f], dx)?));
                }
                if rg(*weight) {
                    let mut dw = vec![T::zero(); f * g];
                    // dW = x^T [f x n] * gout [n x g]
                    T::gemm(f, n, g, self.value(*input).data(), 1, f, gout.data(), g, 1, T::zero(), &mut dw);
                    pending.push((*weight, Tensor::new(vec![f, g], dw)?));
                }
                if rg(*bias) {
                    let mut db = vec![T::zero(); g];
                    for row in gout.data().chunks_exact(g) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    pending.push((*bias, Tensor::new(vec![g], db)?));
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let (n, c) = (s[0], s[s.len() - 1]);
                let spatial: usize = s[1..s.len() - 1].iter().product();
                let scale = T::one() / T::from_usize(spatial).expect("usize converts");
                let mut dx = Vec::with_capacity(n * spatial * c);
                for b in 0..n {
                    let gb = &gout.data()[b * c..][..c];
                    for _ in 0..spatial {
                        dx.extend(gb.iter().map(|&g| g * scale));
                    }
                }
                pending.push((*x, Tensor::new(s.to_vec(), dx)?));
            }
            Op::TemplateDistance { series, templates } => {
                let (ss, ts) = (self.shape(*series), self.shape(*templates));
                let (n, w, k, h) = (ss[0], ss[1], ts[0], ts[1]);
                let a = self.value(*series).data();
                let t = self.value(*templates).data();
                let g = gout.data();
                let sign = |d: T| {
                    if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                let mut da = rg(*series).then(|| vec![T::zero(); n * w]);
                let mut dt = rg(*templates).then(|| vec![T::zero(); k * h]);
                for (p, &x) in a.iter().enumerate() {
                    let mut acc = T::zero();
                    for j in 0..h {
                        let gr = &g[(p * h + j) * k..][..k];
                        for c in 0..k {
                            let sg = sign(x - t[c * h + j]) * gr[c];
                            acc = acc + sg;
                            if let Some(dt) = dt.as_mut() {
                                dt[c * h + j] = dt[c * h + j] - sg;
                            }
                        }
                    }
                    if let Some(da) = da.as_mut() {
                        da[p] = acc;
                    }
                }
                if let Some(da) = da {
                    pending.push((*series, Tensor::new(vec![n, w], da)?));
                }
                if let Some(dt) = dt {
                    pending.push((*templates, Tensor::new(vec![k, h], dt)?));
                }
            }
            Op::PairwiseAbs(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, w, h) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let g = gout.data();
                let mut da = vec![T::zero(); n * w];
                let mut db = vec![T::zero(); n * h];
                for r in 0..n {
                    for i in 0..w {
                        for j in 0..h {
                            let d = va[r * w + i] - vb[r * h + j];
                            let gv = g[(r * w + i) * h + j];
                            let sg = if d > T::zero() {
                                gv
                            } else if d < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            };
                            da[r * w + i] = da[r * w + i] + sg;
                            db[r * h + j] = db[r * h + j] - sg;
                        }
                    }
                }
                pending.push((*a, Tensor::new(vec![n, w], da)?));
                pending.push((*b, Tensor::new(vec![n, h], db)?));
            }
            Op::Reshape(x) => {
                pending.push((*x, gout.clone().reshape(self.shape(*x))?));
            }
            Op::GatherRows { input, rows } => {
                let s = self.shape(*input);
                let stride: usize = s[1..].iter().product();
                let mut dx = Tensor::zeros(s);
                for (out_row, &r) in rows.iter().enumerate() {
                    let src = &gout.data()[out_row * stride..][..stride];
                    let dst = &mut dx.data_mut()[r * stride..][..stride];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = *d + v;
                    }
                }
                pending.push((*input, dx));
            }
            Op::NegEuclidean(a, b) => {
                let s = self.shape(*a).to_vec();
                let f = s[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut da = Vec::with_capacity(va.len());
                for (r, (x, y)) in va.chunks_exact(f).zip(vb.chunks_exact(f)).enumerate() {
                    let dist = -node.value.data()[r];
                    let g = gout.data()[r];
                    if dist > T::zero() {
                        da.extend(x.iter().zip(y).map(|(&p, &q)| -(p - q) / dist * g));
                    } else {
                        da.extend(std::iter::repeat_n(T::zero(), f));
                    }
                }
                let db: Vec<T> = da.iter().map(|&v| -v).collect();
                pending.push((*a, Tensor::new(s.clone(), da)?));
                pending.push((*b, Tensor::new(s, db)?));
            }
            Op::BprLoss { pos, neg } => {
                let g = gout.data()[0].as_f64();
                let (vp, vn) = (self.value(*pos).data(), self.value(*neg).data());
                let mut dp = Vec::with_capacity(vp.len());
                let mut dn = Vec::with_capacity(vp.len());
                for (&p, &q) in vp.iter().zip(vn) {
                    // d/d(diff) of softplus(-diff) is sigmoid(diff) - 1
                    let s = sigmoid(p.as_f64() - q.as_f64()) - 1.0;
                    dp.push(T::from_f64_lossy(s * g));
                    dn.push(T::from_f64_lossy(-s * g));
                }
                pending.push((*pos, Tensor::new(vec![vp.len()], dp)?));
                pending.push((*neg, Tensor::new(vec![vn.len()], dn)?));
            }
            Op::WeightedSum { input, weights } => {
                let g = gout.data()[0];
                let data = weights.iter().map(|&w| w * g).collect();
                pending.push((*input, Tensor::new(self.shape(*input).to_vec(), data)?));
            }
        }
        for (v, g) in pending {
            self.accumulate(v, g);
        }
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv { .. } => "conv",
        Op::Relu(_) => "relu",
        Op::Add(..) => "add",
        Op::Linear { .. } => "linear",
        Op::GlobalAvgPool(_) => "global_avg_pool",
        Op::TemplateDistance { .. } => "template_distance",
        Op::PairwiseAbs(..) => "pairwise_abs",
        Op::Reshape(_) => "reshape",
        Op::GatherRows { .. } => "gather_rows",
        Op::NegEuclidean(..) => "neg_euclidean",
        Op::BprLoss { .. } => "bpr_loss",
        Op::WeightedSum { .. } => "weighted_sum",
    }
}
