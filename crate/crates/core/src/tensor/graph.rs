use super::gemm::gemm;
use super::sample::{linear_sample, SamplePoint};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `sqrt(2/pi)` in the tanh form of GELU.
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient in the tanh form of GELU.
const GELU_CUBIC: f64 = 0.044_715;
const NORM_EPS: f64 = 1e-5;
/// Lower clamp on student probabilities inside KL terms.
pub(crate) const KL_EPS: f64 = 1e-9;

/// Batch-norm statistics: which ones to use.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values each channel was reduced over.
    pub count: usize,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    Normalize { x: Var, inv_std: Vec<f64> },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Conv1d { x: Var, w: Var, groups: usize },
    DeformConv {
        x: Var,
        offsets: Var,
        kernel: Var,
        points: Vec<SamplePoint>,
        col: Vec<f64>,
    },
    InterpSample { x: Var, pos: Var, points: Vec<SamplePoint> },
    AvgPoolTime(Var),
    MaskRows { x: Var, keep: Vec<bool> },
    ConcatLast(Vec<Var>),
    Slice { x: Var, axis: usize, start: usize },
    MeanAxis { x: Var, axis: usize },
    Reshape(Var),
    Sum(Var),
    /// Loss ops store d(loss)/d(logits) computed during the forward pass.
    LogitLoss { logits: Var, dlogits: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Eagerly evaluated computation record with reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the record is already
/// topologically sorted. A graph is single-threaded; independent graphs
/// can share read-only parameter tensors across threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
    first_non_finite: Option<usize>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`; `None` if `v` does not require
    /// gradients or does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    p: usize,
    a_shared: bool,
    b_shared: bool,
    out_dims: Vec<usize>,
}

fn matmul_plan(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatMulPlan> {
    let shape_err = || {
        Error::dim(format!(
            "matmul shape mismatch: {a:?} x {b:?}{}",
            if trans_b { "^T" } else { "" }
        ))
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, p) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != bk {
        return Err(shape_err());
    }
    let a_lead = &a[..a.len() - 2];
    let b_lead = &b[..b.len() - 2];
    let a_batch: usize = a_lead.iter().product();
    if b_lead.is_empty() {
        let mut out_dims = a_lead.to_vec();
        out_dims.extend([m, p]);
        // Collapse a's batch into rows: one large product.
        Ok(MatMulPlan {
            batch: 1,
            m: a_batch * m,
            k,
            p,
            a_shared: false,
            b_shared: true,
            out_dims,
        })
    } else if a_lead.is_empty() {
        let mut out_dims = b_lead.to_vec();
        out_dims.extend([m, p]);
        Ok(MatMulPlan {
            batch: b_lead.iter().product(),
            m,
            k,
            p,
            a_shared: true,
            b_shared: false,
            out_dims,
        })
    } else if a_lead == b_lead {
        let mut out_dims = a_lead.to_vec();
        out_dims.extend([m, p]);
        Ok(MatMulPlan {
            batch: a_batch,
            m,
            k,
            p,
            a_shared: false,
            b_shared: false,
            out_dims,
        })
    } else {
        Err(shape_err())
    }
}

/// How `b` maps onto `a` when broadcasting `b` into `a`'s shape.
enum Bcast {
    /// `b` equals a trailing block of `a`: index is `i % len(b)`.
    Suffix(usize),
    /// Arbitrary right-aligned broadcast: explicit index map.
    General(Vec<usize>),
}

fn bcast_plan(a: &[usize], b: &[usize]) -> Result<Bcast> {
    let lead_ones = b.iter().take_while(|&&d| d == 1).count();
    let b_trim = &b[lead_ones.min(b.len().saturating_sub(1))..];
    if b_trim.len() <= a.len() && a[a.len() - b_trim.len()..] == *b_trim {
        return Ok(Bcast::Suffix(b_trim.iter().product()));
    }
    if b.len() > a.len() {
        return Err(Error::dim(format!("cannot broadcast {b:?} into {a:?}")));
    }
    let off = a.len() - b.len();
    for (i, &bd) in b.iter().enumerate() {
        if bd != 1 && bd != a[off + i] {
            return Err(Error::dim(format!("cannot broadcast {b:?} into {a:?}")));
        }
    }
    let n: usize = a.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; a.len()];
    for _ in 0..n {
        let mut bi = 0;
        for (j, &bd) in b.iter().enumerate() {
            let coord = if bd == 1 { 0 } else { idx[off + j] };
            bi = bi * bd + coord;
        }
        map.push(bi);
        for ax in (0..a.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < a[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(Bcast::General(map))
}

impl Bcast {
    /// Call `f(i, j)` for every element `i` of `a` (length `total`) and the
    /// element `j` of `b` it pairs with.
    #[inline]
    fn for_each(&self, total: usize, mut f: impl FnMut(usize, usize)) {
        match self {
            Bcast::Suffix(n) => {
                for base in (0..total).step_by((*n).max(1)) {
                    for j in 0..*n {
                        f(base + j, j);
                    }
                }
            }
            Bcast::General(map) => map.iter().enumerate().for_each(|(i, &j)| f(i, j)),
        }
    }
}

/// Split dims around `axis`: (outer, axis extent, inner).
fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// `[c, n]` or `[B, c, n]` as (B, c, n).
fn as_bcn(dims: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *dims {
        [c, n] => Ok((1, c, n)),
        [b, c, n] => Ok((b, c, n)),
        _ => Err(Error::dim(format!(
            "{what} expects [c, n] or [B, c, n], got {dims:?}"
        ))),
    }
}

/// `tanh` through one `exp`; libm's `tanh` dominated GELU cost. Absolute
/// error stays at rounding level.
fn tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + tanh(u))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = tanh(u);
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Gradient slot for `v`, zero-initialized on first use; `None` when `v`
/// does not require gradients.
fn slot<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], v: Var) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let entry = &mut grads[v.0];
    if entry.is_none() {
        *entry = Some(Tensor::zeros(node.value.dims()));
    }
    entry.as_mut().map(|t| t.data_mut())
}

/// Zero-padded im2col for one `[cg, n]` channel group.
fn im2col(x: &[f64], cg: usize, n: usize, k: usize, col: &mut [f64]) {
    let pad = (k - 1) / 2;
    for ci in 0..cg {
        let row = &x[ci * n..(ci + 1) * n];
        for j in 0..k {
            let dst = &mut col[(ci * k + j) * n..(ci * k + j + 1) * n];
            for (t, d) in dst.iter_mut().enumerate() {
                let src = t as isize + j as isize - pad as isize;
                *d = if src >= 0 && (src as usize) < n {
                    row[src as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn col2im_add(dcol: &[f64], cg: usize, n: usize, k: usize, dx: &mut [f64]) {
    let pad = (k - 1) / 2;
    for ci in 0..cg {
        for j in 0..k {
            let src = &dcol[(ci * k + j) * n..(ci * k + j + 1) * n];
            for (t, &g) in src.iter().enumerate() {
                let pos = t as isize + j as isize - pad as isize;
                if pos >= 0 && (pos as usize) < n {
                    dx[ci * n + pos as usize] += g;
                }
            }
        }
    }
}

/// Value of the zero-padded row `x~` at padded index `i`.
#[inline]
fn padded(row: &[f64], pad: usize, i: usize) -> f64 {
    if i >= pad && i - pad < row.len() {
        row[i - pad]
    } else {
        0.0
    }
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

    /// Multiply-accumulates executed by forward ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn reset_macs(&mut self) {
        self.macs = 0;
    }

    /// First node whose op turned finite inputs into NaN/Inf. Tracked in
    /// debug builds only; always `None` in release builds.
    pub fn non_finite_node(&self) -> Option<Var> {
        self.first_non_finite.map(Var)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        #[cfg(debug_assertions)]
        if self.first_non_finite.is_none()
            && !value.is_finite()
            && parents.iter().all(|p| self.nodes[p.0].value.is_finite())
        {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v`'s value as a constant; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Batched matrix product `a·b`. Either side may be a plain 2-D matrix
    /// shared across the other's leading batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a·bᵀ` (transpose of the last two dims of `b`).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let plan = matmul_plan(self.value(a).dims(), self.value(b).dims(), trans_b)?;
        let MatMulPlan {
            batch, m, k, p, ..
        } = plan;
        let mut out = vec![0.0; batch * m * p];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                let ao = if plan.a_shared { 0 } else { bi * m * k };
                let bo = if plan.b_shared { 0 } else { bi * k * p };
                gemm(
                    m,
                    k,
                    p,
                    &av[ao..ao + m * k],
                    false,
                    &bv[bo..bo + k * p],
                    trans_b,
                    &mut out[bi * m * p..(bi + 1) * m * p],
                    0.0,
                );
            }
        }
        self.macs += (batch * m * k * p) as u64;
        let value = Tensor::new(&plan.out_dims, out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        if da != db {
            return Err(Error::dim(format!("{what}: shape mismatch {da:?} vs {db:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).dims(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).dims(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` with `b` broadcast (right-aligned) into `a`'s shape.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = bcast_plan(self.value(a).dims(), self.value(b).dims())?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; av.len()];
        plan.for_each(av.len(), |i, j| data[i] = av[i] + bv[j]);
        let value = Tensor::new(self.value(a).dims(), data)?;
        Ok(self.push(value, Op::AddBcast(a, b), &[a, b]))
    }

    /// `a ⊙ b` with `b` broadcast (right-aligned) into `a`'s shape.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = bcast_plan(self.value(a).dims(), self.value(b).dims())?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; av.len()];
        plan.for_each(av.len(), |i, j| data[i] = av[i] * bv[j]);
        let value = Tensor::new(self.value(a).dims(), data)?;
        Ok(self.push(value, Op::MulBcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(0.7978845608028654·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Softmax over the last dim, max-subtracted.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let cols = *value.dims().last().expect("non-empty dims");
        softmax_rows(value.data_mut(), cols);
        self.macs += value.len() as u64;
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Zero-mean unit-variance normalization over the last dim (eps 1e-5).
    pub fn normalize_lastdim(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let d = *src.dims().last().expect("non-empty dims");
        let mut out = src.clone();
        let mut inv_std = Vec::with_capacity(src.len() / d);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::Normalize { x, inv_std }, &[x])
    }

    /// Layer normalization over the last dim with per-feature affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.value(x).dims().last().expect("non-empty dims");
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            if self.value(v).dims() != [d] {
                return Err(Error::dim(format!(
                    "layer_norm {name} must be [{d}], got {:?}",
                    self.value(v).dims()
                )));
            }
        }
        let y = self.normalize_lastdim(x);
        let y = self.mul_bcast(y, gain)?;
        self.add_bcast(y, bias)
    }

    /// Batch normalization of `[B, c, n]` (or `[c, n]`) per channel, with
    /// affine `gain`/`bias` of shape `[c]`. In training mode the batch
    /// statistics are returned so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (b, c, n) = as_bcn(self.value(x).dims(), "batch_norm")?;
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            if self.value(v).dims() != [c] {
                return Err(Error::dim(format!(
                    "batch_norm {name} must be [{c}], got {:?}",
                    self.value(v).dims()
                )));
            }
        }
        let xv = self.value(x).data();
        let count = b * n;
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += xv[(bi * c + ch) * n..(bi * c + ch + 1) * n].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for bi in 0..b {
                        q += xv[(bi * c + ch) * n..(bi * c + ch + 1) * n]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count as f64;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim(format!(
                        "batch_norm running stats must have {c} channels"
                    )));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * n;
                for t in 0..n {
                    let h = (xv[base + t] - mean[ch]) * inv_std[ch];
                    xhat[base + t] = h;
                    out[base + t] = gv[ch] * h + bv[ch];
                }
            }
        }
        let value = Tensor::new(self.value(x).dims(), out)?;
        let stats = train.then(|| BatchStats {
            mean,
            var,
            count,
        });
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                train,
            },
            &[x, gain, bias],
        );
        Ok((v, stats))
    }

    /// 1-D cross-correlation with zero "same" padding.
    ///
    /// `x`: `[B, c_in, n]` or `[c_in, n]`; `w`: `[c_out, c_in/groups, k]`
    /// with odd `k`. Output keeps `x`'s rank with `c_out` channels.
    pub fn conv1d_same(&mut self, x: Var, w: Var, groups: usize) -> Result<Var> {
        let (b, c_in, n) = as_bcn(self.value(x).dims(), "conv1d")?;
        let (c_out, cg, k) = match *self.value(w).dims() {
            [o, i, k] => (o, i, k),
            ref d => return Err(Error::dim(format!("conv1d weight must be rank 3, got {d:?}"))),
        };
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::config(format!(
                "conv1d: channels in={c_in} out={c_out} not divisible by groups={groups}"
            )));
        }
        if cg != c_in / groups {
            return Err(Error::dim(format!(
                "conv1d weight expects {cg} input channels per group, input gives {}",
                c_in / groups
            )));
        }
        if k % 2 == 0 {
            return Err(Error::config(format!("conv1d kernel size must be odd, got {k}")));
        }
        let og = c_out / groups;
        let mut out = vec![0.0; b * c_out * n];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut col = vec![0.0; cg * k * n];
            for bi in 0..b {
                for grp in 0..groups {
                    let xs = &xv[(bi * c_in + grp * cg) * n..(bi * c_in + (grp + 1) * cg) * n];
                    let ws = &wv[grp * og * cg * k..(grp + 1) * og * cg * k];
                    let dst = &mut out[(bi * c_out + grp * og) * n..(bi * c_out + (grp + 1) * og) * n];
                    if k == 1 {
                        gemm(og, cg, n, ws, false, xs, false, dst, 0.0);
                    } else {
                        im2col(xs, cg, n, k, &mut col);
                        gemm(og, cg * k, n, ws, false, &col, false, dst, 0.0);
                    }
                }
            }
        }
        self.macs += (b * c_out * cg * k * n) as u64;
        let dims = if self.value(x).rank() == 2 {
            vec![c_out, n]
        } else {
            vec![b, c_out, n]
        };
        let value = Tensor::new(&dims, out)?;
        Ok(self.push(value, Op::Conv1d { x, w, groups }, &[x, w]))
    }

    /// Deformable 1-D convolution.
    ///
    /// `x`: `[B, c_in, n]`; `offsets`: `[B, k, n]`, one offset per tap and
    /// position shared by all input channels; `kernel`: `[c_out, c_in, k]`.
    /// Tap `j` at position `t` samples the zero-padded input (pad `(k-1)/2`
    /// each side) at `t + j - pad + offset[j, t]` by linear interpolation.
    /// Positions beyond the padded domain clamp to its outermost sample.
    pub fn deform_conv1d(&mut self, x: Var, offsets: Var, kernel: Var) -> Result<Var> {
        let (b, c_in, n) = as_bcn(self.value(x).dims(), "deform_conv1d")?;
        let (c_out, kc, k) = match *self.value(kernel).dims() {
            [o, i, k] => (o, i, k),
            ref d => {
                return Err(Error::dim(format!(
                    "deform_conv1d kernel must be rank 3, got {d:?}"
                )))
            }
        };
        if kc != c_in {
            return Err(Error::dim(format!(
                "deform_conv1d kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        let (ob, ok, on) = as_bcn(self.value(offsets).dims(), "deform_conv1d offsets")?;
        if ob != b || ok != k || on != n {
            return Err(Error::dim(format!(
                "offsets must be [{b}, {k}, {n}], got {:?}",
                self.value(offsets).dims()
            )));
        }
        let pad = (k - 1) / 2;
        let padded_len = n + 2 * pad;
        let xv = self.value(x).data();
        let offv = self.value(offsets).data();
        let mut points = Vec::with_capacity(b * k * n);
        for bi in 0..b {
            for j in 0..k {
                for t in 0..n {
                    let pos = (t + j) as f64 + offv[(bi * k + j) * n + t];
                    points.push(linear_sample(pos, padded_len));
                }
            }
        }
        let mut col = vec![0.0; b * c_in * k * n];
        for bi in 0..b {
            for i in 0..c_in {
                let row = &xv[(bi * c_in + i) * n..(bi * c_in + i + 1) * n];
                for j in 0..k {
                    let dst = &mut col[((bi * c_in + i) * k + j) * n..((bi * c_in + i) * k + j + 1) * n];
                    let pts = &points[(bi * k + j) * n..(bi * k + j + 1) * n];
                    for (d, pt) in dst.iter_mut().zip(pts) {
                        *d = (1.0 - pt.frac) * padded(row, pad, pt.lo)
                            + pt.frac * padded(row, pad, pt.hi);
                    }
                }
            }
        }
        let kv = self.value(kernel).data();
        let mut out = vec![0.0; b * c_out * n];
        for bi in 0..b {
            gemm(
                c_out,
                c_in * k,
                n,
                kv,
                false,
                &col[bi * c_in * k * n..(bi + 1) * c_in * k * n],
                false,
                &mut out[bi * c_out * n..(bi + 1) * c_out * n],
                0.0,
            );
        }
        self.macs += (b * c_out * c_in * k * n + b * c_in * k * n) as u64;
        let dims = if self.value(x).rank() == 2 {
            vec![c_out, n]
        } else {
            vec![b, c_out, n]
        };
        let value = Tensor::new(&dims, out)?;
        Ok(self.push(
            value,
            Op::DeformConv {
                x,
                offsets,
                kernel,
                points,
                col,
            },
            &[x, offsets, kernel],
        ))
    }

    /// Sample each row of `x` (`[c, n]`) at the positions in the same row of
    /// `pos` (`[c, m]`), interpolating linearly and clamping to `[0, n-1]`.
    pub fn linear_interp_sample(&mut self, x: Var, pos: Var) -> Result<Var> {
        let (c, n) = match *self.value(x).dims() {
            [c, n] => (c, n),
            ref d => return Err(Error::dim(format!("interp source must be [c, n], got {d:?}"))),
        };
        let m = match *self.value(pos).dims() {
            [pc, m] if pc == c => m,
            ref d => {
                return Err(Error::dim(format!(
                    "interp positions must be [{c}, m], got {d:?}"
                )))
            }
        };
        let xv = self.value(x).data();
        let pv = self.value(pos).data();
        let points: Vec<SamplePoint> = pv.iter().map(|&p| linear_sample(p, n)).collect();
        let out = points
            .iter()
            .enumerate()
            .map(|(idx, pt)| pt.value(&xv[(idx / m) * n..(idx / m + 1) * n]))
            .collect();
        let value = Tensor::new(&[c, m], out)?;
        Ok(self.push(value, Op::InterpSample { x, pos, points }, &[x, pos]))
    }

    /// Average pooling along the second-to-last (time) axis, kernel 3,
    /// stride 1; windows at the borders average only the samples inside.
    pub fn avg_pool_time(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).dims().to_vec();
        if dims.len() < 2 {
            return Err(Error::dim(format!("avg_pool_time needs rank >= 2, got {dims:?}")));
        }
        let (outer, n, f) = split_axis(&dims, dims.len() - 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for t in 0..n {
                let lo = t.saturating_sub(1);
                let hi = (t + 1).min(n - 1);
                let cnt = (hi - lo + 1) as f64;
                for c in 0..f {
                    let mut s = 0.0;
                    for u in lo..=hi {
                        s += xv[(o * n + u) * f + c];
                    }
                    out[(o * n + t) * f + c] = s / cnt;
                }
            }
        }
        self.macs += 3 * xv.len() as u64;
        let value = Tensor::new(&dims, out)?;
        Ok(self.push(value, Op::AvgPoolTime(x), &[x]))
    }

    /// Zero whole rows (last-dim vectors) where `keep` is false. `keep` has
    /// one entry per row of the trailing 2-D view. No rescaling.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.dims().last().expect("non-empty dims");
        let rows = t.len() / cols;
        if keep.len() != rows {
            return Err(Error::dim(format!(
                "mask length {} does not match {rows} rows of {:?}",
                keep.len(),
                t.dims()
            )));
        }
        let mut out = t.clone();
        for (row, &k) in out.data_mut().chunks_mut(cols).zip(keep) {
            if !k {
                row.fill(0.0);
            }
        }
        self.macs += out.len() as u64;
        Ok(self.push(
            out,
            Op::MaskRows {
                x,
                keep: keep.to_vec(),
            },
            &[x],
        ))
    }

    /// Concatenate along the last dim; leading dims must agree.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let lead = {
            let d = self.value(*first).dims();
            d[..d.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let d = self.value(p).dims();
            if d[..d.len() - 1] != lead[..] {
                return Err(Error::dim(format!(
                    "concat leading dims differ: {lead:?} vs {:?}",
                    &d[..d.len() - 1]
                )));
            }
            widths.push(d[d.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut dims = lead;
        dims.push(total);
        let value = Tensor::new(&dims, out)?;
        Ok(self.push(value, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let dims = self.value(x).dims().to_vec();
        if axis >= dims.len() || len == 0 || start + len > dims[axis] {
            return Err(Error::dim(format!(
                "slice [{start}, {}) on axis {axis} out of range for {dims:?}",
                start + len
            )));
        }
        let (outer, ext, inner) = split_axis(&dims, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * ext + start) * inner..(o * ext + start + len) * inner]);
        }
        let mut odims = dims;
        odims[axis] = len;
        let value = Tensor::new(&odims, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = self.value(x).dims().to_vec();
        if axis >= dims.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {dims:?}")));
        }
        let (outer, ext, inner) = split_axis(&dims, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &xv[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= ext as f64);
        let mut odims = dims;
        odims.remove(axis);
        if odims.is_empty() {
            odims.push(1);
        }
        let value = Tensor::new(&odims, out)?;
        Ok(self.push(value, Op::MeanAxis { x, axis }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(dims)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Mean over the batch of `-ln softmax(logits)[label]`.
    /// `logits`: `[B, K]`; labels index classes.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = match *self.value(logits).dims() {
            [b, k] => (b, k),
            ref d => return Err(Error::dim(format!("cross_entropy logits must be [B, K], got {d:?}"))),
        };
        if labels.len() != b {
            return Err(Error::dim(format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::data(format!("sample {i}: label {l} outside [0, {k})")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let lv = self.value(logits).data();
        let mut loss = 0.0;
        for (bi, &label) in labels.iter().enumerate() {
            let row = &lv[bi * k..(bi + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        softmax_rows(&mut probs, k);
        for (bi, &label) in labels.iter().enumerate() {
            probs[bi * k + label] -= 1.0;
        }
        probs.iter_mut().for_each(|v| *v /= b as f64);
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            value,
            Op::LogitLoss {
                logits,
                dlogits: probs,
            },
            &[logits],
        ))
    }

    /// Mean over the batch of `KL(teacher ‖ softmax(logits))`.
    ///
    /// `teacher` is a constant `[B, K]` matrix of distributions; gradients
    /// flow only into `logits`. Student probabilities are clamped below at
    /// `1e-9` and `0·ln 0` is taken as 0.
    pub fn kl_to_logits(&mut self, teacher: &Tensor, logits: Var) -> Result<Var> {
        let dims = self.value(logits).dims().to_vec();
        let (b, k) = match dims[..] {
            [b, k] => (b, k),
            _ => return Err(Error::dim(format!("kl logits must be [B, K], got {dims:?}"))),
        };
        if teacher.dims() != dims {
            return Err(Error::dim(format!(
                "kl teacher {:?} vs logits {dims:?}",
                teacher.dims()
            )));
        }
        let mut q = self.value(logits).data().to_vec();
        softmax_rows(&mut q, k);
        let p = teacher.data();
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; b * k];
        for bi in 0..b {
            let (pr, qr) = (&p[bi * k..(bi + 1) * k], &q[bi * k..(bi + 1) * k]);
            let mut gq = vec![0.0; k];
            for c in 0..k {
                if pr[c] > 0.0 {
                    loss += pr[c] * (pr[c].ln() - qr[c].max(KL_EPS).ln());
                    if qr[c] > KL_EPS {
                        gq[c] = -pr[c] / qr[c];
                    }
                }
            }
            let dot: f64 = qr.iter().zip(&gq).map(|(a, b)| a * b).sum();
            for c in 0..k {
                dlogits[bi * k + c] = qr[c] * (gq[c] - dot) / b as f64;
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(value, Op::LogitLoss { logits, dlogits }, &[logits]))
    }

    /// Reverse pass from a one-element `root`. Each recorded node is
    /// visited once, in reverse execution order.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(Error::dim(format!(
                "backward root must hold one element, got {:?}",
                root_val.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::ones(root_val.dims()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes[..];
        let node = &nodes[i];
        let gv = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let plan = matmul_plan(nodes[a.0].value.dims(), nodes[b.0].value.dims(), *trans_b)?;
                let MatMulPlan {
                    batch, m, k, p, ..
                } = plan;
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if let Some(da) = slot(grads, nodes, *a) {
                    for bi in 0..batch {
                        let ao = if plan.a_shared { 0 } else { bi * m * k };
                        let bo = if plan.b_shared { 0 } else { bi * k * p };
                        gemm(
                            m,
                            p,
                            k,
                            &gv[bi * m * p..(bi + 1) * m * p],
                            false,
                            &bv[bo..bo + k * p],
                            !*trans_b,
                            &mut da[ao..ao + m * k],
                            1.0,
                        );
                    }
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    for bi in 0..batch {
                        let ao = if plan.a_shared { 0 } else { bi * m * k };
                        let bo = if plan.b_shared { 0 } else { bi * k * p };
                        let gs = &gv[bi * m * p..(bi + 1) * m * p];
                        if *trans_b {
                            gemm(p, m, k, gs, true, &av[ao..ao + m * k], false, &mut db[bo..bo + k * p], 1.0);
                        } else {
                            gemm(k, m, p, &av[ao..ao + m * k], true, gs, false, &mut db[bo..bo + k * p], 1.0);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = slot(grads, nodes, v) {
                        d.iter_mut().zip(gv).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(d) = slot(grads, nodes, *a) {
                    for ((d, g), y) in d.iter_mut().zip(gv).zip(bv) {
                        *d += g * y;
                    }
                }
                if let Some(d) = slot(grads, nodes, *b) {
                    for ((d, g), x) in d.iter_mut().zip(gv).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::AddBcast(a, b) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    d.iter_mut().zip(gv).for_each(|(d, g)| *d += g);
                }
                let plan = bcast_plan(nodes[a.0].value.dims(), nodes[b.0].value.dims())?;
                if let Some(d) = slot(grads, nodes, *b) {
                    plan.for_each(gv.len(), |i, j| d[j] += gv[i]);
                }
            }
            Op::MulBcast(a, b) => {
                let plan = bcast_plan(nodes[a.0].value.dims(), nodes[b.0].value.dims())?;
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(d) = slot(grads, nodes, *a) {
                    plan.for_each(gv.len(), |i, j| d[i] += gv[i] * bv[j]);
                }
                if let Some(d) = slot(grads, nodes, *b) {
                    plan.for_each(gv.len(), |i, j| d[j] += gv[i] * av[i]);
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = slot(grads, nodes, *a) {
                    d.iter_mut().zip(gv).for_each(|(d, g)| *d += c * g);
                }
            }
            Op::Relu(a) => {
                let av = nodes[a.0].value.data();
                if let Some(d) = slot(grads, nodes, *a) {
                    for ((d, g), x) in d.iter_mut().zip(gv).zip(av) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = nodes[a.0].value.data();
                if let Some(d) = slot(grads, nodes, *a) {
                    for ((d, g), x) in d.iter_mut().zip(gv).zip(av) {
                        *d += g * gelu_grad(*x);
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = *node.value.dims().last().expect("non-empty dims");
                if let Some(d) = slot(grads, nodes, *x) {
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(gv.chunks(cols)).zip(out.chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::Normalize { x, inv_std } => {
                let cols = *node.value.dims().last().expect("non-empty dims");
                if let Some(d) = slot(grads, nodes, *x) {
                    for (r, ((dr, gr), yr)) in d
                        .chunks_mut(cols)
                        .zip(gv.chunks(cols))
                        .zip(out.chunks(cols))
                        .enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / cols as f64;
                        let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / cols as f64;
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += inv_std[r] * (g - mg - y * mgy);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                train,
            } => {
                let (b, c, n) = as_bcn(nodes[x.0].value.dims(), "batch_norm")?;
                let gainv = nodes[gain.0].value.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * n;
                        for t in 0..n {
                            sum_g[ch] += gv[base + t];
                            sum_gx[ch] += gv[base + t] * xhat[base + t];
                        }
                    }
                }
                if let Some(d) = slot(grads, nodes, *gain) {
                    d.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
                }
                if let Some(d) = slot(grads, nodes, *bias) {
                    d.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
                }
                if let Some(d) = slot(grads, nodes, *x) {
                    let cnt = (b * n) as f64;
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * n;
                            let scale = gainv[ch] * inv_std[ch];
                            for t in 0..n {
                                let gi = gv[base + t];
                                d[base + t] += if *train {
                                    scale * (gi - sum_g[ch] / cnt - xhat[base + t] * sum_gx[ch] / cnt)
                                } else {
                                    scale * gi
                                };
                            }
                        }
                    }
                }
            }
            Op::Conv1d { x, w, groups } => {
                let (b, c_in, n) = as_bcn(nodes[x.0].value.dims(), "conv1d")?;
                let wd = nodes[w.0].value.dims();
                let (c_out, cg, k) = (wd[0], wd[1], wd[2]);
                let og = c_out / groups;
                let xv = nodes[x.0].value.data();
                let wv = nodes[w.0].value.data();
                let mut col = vec![0.0; cg * k * n];
                if let Some(dw) = slot(grads, nodes, *w) {
                    for bi in 0..b {
                        for grp in 0..*groups {
                            let xs = &xv[(bi * c_in + grp * cg) * n..(bi * c_in + (grp + 1) * cg) * n];
                            let gs = &gv[(bi * c_out + grp * og) * n..(bi * c_out + (grp + 1) * og) * n];
                            let dws = &mut dw[grp * og * cg * k..(grp + 1) * og * cg * k];
                            if k == 1 {
                                gemm(og, n, cg, gs, false, xs, true, dws, 1.0);
                            } else {
                                im2col(xs, cg, n, k, &mut col);
                                gemm(og, n, cg * k, gs, false, &col, true, dws, 1.0);
                            }
                        }
                    }
                }
                if let Some(dx) = slot(grads, nodes, *x) {
                    for bi in 0..b {
                        for grp in 0..*groups {
                            let gs = &gv[(bi * c_out + grp * og) * n..(bi * c_out + (grp + 1) * og) * n];
                            let ws = &wv[grp * og * cg * k..(grp + 1) * og * cg * k];
                            let dxs = &mut dx[(bi * c_in + grp * cg) * n..(bi * c_in + (grp + 1) * cg) * n];
                            if k == 1 {
                                gemm(cg, og, n, ws, true, gs, false, dxs, 1.0);
                            } else {
                                gemm(cg * k, og, n, ws, true, gs, false, &mut col, 0.0);
                                col2im_add(&col, cg, n, k, dxs);
                            }
                        }
                    }
                }
            }
            Op::DeformConv {
                x,
                offsets,
                kernel,
                points,
                col,
            } => {
                let (b, c_in, n) = as_bcn(nodes[x.0].value.dims(), "deform_conv1d")?;
                let kd = nodes[kernel.0].value.dims();
                let (c_out, k) = (kd[0], kd[2]);
                let pad = (k - 1) / 2;
                let kv = nodes[kernel.0].value.data();
                let xv = nodes[x.0].value.data();
                let cs = c_in * k * n;
                if let Some(dk) = slot(grads, nodes, *kernel) {
                    for bi in 0..b {
                        gemm(
                            c_out,
                            n,
                            c_in * k,
                            &gv[bi * c_out * n..(bi + 1) * c_out * n],
                            false,
                            &col[bi * cs..(bi + 1) * cs],
                            true,
                            dk,
                            1.0,
                        );
                    }
                }
                let need_x = nodes[x.0].requires_grad;
                let need_off = nodes[offsets.0].requires_grad;
                if need_x || need_off {
                    let mut dcol = vec![0.0; cs];
                    let mut dx_acc = need_x.then(|| vec![0.0; b * c_in * n]);
                    let mut doff_acc = need_off.then(|| vec![0.0; b * k * n]);
                    for bi in 0..b {
                        gemm(
                            c_in * k,
                            c_out,
                            n,
                            kv,
                            true,
                            &gv[bi * c_out * n..(bi + 1) * c_out * n],
                            false,
                            &mut dcol,
                            0.0,
                        );
                        for i in 0..c_in {
                            let row = &xv[(bi * c_in + i) * n..(bi * c_in + i + 1) * n];
                            for j in 0..k {
                                let dc = &dcol[(i * k + j) * n..(i * k + j + 1) * n];
                                let pts = &points[(bi * k + j) * n..(bi * k + j + 1) * n];
                                for t in 0..n {
                                    let pt = &pts[t];
                                    if let Some(dx) = dx_acc.as_mut() {
                                        let base = (bi * c_in + i) * n;
                                        if pt.lo >= pad && pt.lo - pad < n {
                                            dx[base + pt.lo - pad] += (1.0 - pt.frac) * dc[t];
                                        }
                                        if pt.hi >= pad && pt.hi - pad < n {
                                            dx[base + pt.hi - pad] += pt.frac * dc[t];
                                        }
                                    }
                                    if let Some(doff) = doff_acc.as_mut() {
                                        if !pt.clamped {
                                            let slope = padded(row, pad, pt.hi) - padded(row, pad, pt.lo);
                                            doff[(bi * k + j) * n + t] += dc[t] * slope;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let (Some(acc), Some(d)) = (dx_acc, slot(grads, nodes, *x)) {
                        d.iter_mut().zip(&acc).for_each(|(d, a)| *d += a);
                    }
                    if let (Some(acc), Some(d)) = (doff_acc, slot(grads, nodes, *offsets)) {
                        d.iter_mut().zip(&acc).for_each(|(d, a)| *d += a);
                    }
                }
            }
            Op::InterpSample { x, pos, points } => {
                let n = nodes[x.0].value.dims()[1];
                let m = nodes[pos.0].value.dims()[1];
                let xv = nodes[x.0].value.data();
                if let Some(dx) = slot(grads, nodes, *x) {
                    for (idx, pt) in points.iter().enumerate() {
                        let base = (idx / m) * n;
                        dx[base + pt.lo] += (1.0 - pt.frac) * gv[idx];
                        dx[base + pt.hi] += pt.frac * gv[idx];
                    }
                }
                if let Some(dp) = slot(grads, nodes, *pos) {
                    for (idx, pt) in points.iter().enumerate() {
                        let base = (idx / m) * n;
                        dp[idx] += gv[idx] * pt.slope(&xv[base..base + n]);
                    }
                }
            }
            Op::AvgPoolTime(x) => {
                let dims = node.value.dims();
                let (outer, n, f) = split_axis(dims, dims.len() - 2);
                if let Some(dx) = slot(grads, nodes, *x) {
                    for o in 0..outer {
                        for t in 0..n {
                            let lo = t.saturating_sub(1);
                            let hi = (t + 1).min(n - 1);
                            let cnt = (hi - lo + 1) as f64;
                            for c in 0..f {
                                let g = gv[(o * n + t) * f + c] / cnt;
                                for u in lo..=hi {
                                    dx[(o * n + u) * f + c] += g;
                                }
                            }
                        }
                    }
                }
            }
            Op::MaskRows { x, keep } => {
                let cols = *node.value.dims().last().expect("non-empty dims");
                if let Some(dx) = slot(grads, nodes, *x) {
                    for ((dr, gr), &k) in dx.chunks_mut(cols).zip(gv.chunks(cols)).zip(keep) {
                        if k {
                            dr.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = *node.value.dims().last().expect("non-empty dims");
                let rows = node.value.len() / total;
                let mut off = 0;
                for &p in parts {
                    let w = *nodes[p.0].value.dims().last().expect("non-empty dims");
                    if let Some(d) = slot(grads, nodes, p) {
                        for r in 0..rows {
                            for c in 0..w {
                                d[r * w + c] += gv[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Slice { x, axis, start } => {
                let src_dims = nodes[x.0].value.dims();
                let (outer, ext, inner) = split_axis(src_dims, *axis);
                let len = node.value.dims()[*axis];
                if let Some(dx) = slot(grads, nodes, *x) {
                    for o in 0..outer {
                        let dst = &mut dx[(o * ext + start) * inner..(o * ext + start + len) * inner];
                        let src = &gv[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let (outer, ext, inner) = split_axis(nodes[x.0].value.dims(), *axis);
                if let Some(dx) = slot(grads, nodes, *x) {
                    for o in 0..outer {
                        for e in 0..ext {
                            for c in 0..inner {
                                dx[(o * ext + e) * inner + c] += gv[o * inner + c] / ext as f64;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    dx.iter_mut().zip(gv).for_each(|(d, g)| *d += g);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    dx.iter_mut().for_each(|d| *d += gv[0]);
                }
            }
            Op::LogitLoss { logits, dlogits } => {
                if let Some(d) = slot(grads, nodes, *logits) {
                    d.iter_mut().zip(dlogits).for_each(|(d, s)| *d += gv[0] * s);
                }
            }
        }
        Ok(())
    }
}
