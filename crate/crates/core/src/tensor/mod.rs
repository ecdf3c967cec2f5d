//! Dense f64 tensors and a Wengert-tape reverse-mode differentiator.
//!
//! Operations are recorded on a [`Tape`] during the forward pass and replayed
//! in reverse by [`Tape::backward`]. The op set is exactly what the denoising
//! networks and the guided sampler need: matrix product, 3x3 convolution,
//! nearest resize, elementwise arithmetic, SiLU, a handful of reductions, and
//! the cubic spatial downsampling used inside the observation loss.
//!
//! Every forward op verifies its output is finite; NaN or Inf anywhere is
//! reported as an error rather than silently propagated.

pub mod conv;

use crate::error::{Error, Result};
use crate::resample::{self, CubicTaps};

/// A plain value tensor. Cheap to move across threads; gradients accumulate
/// into `grad` when the owner requests them from a finished tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor_new",
                detail: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn randn(shape: &[usize], rng: &mut impl rand::Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| StandardNormal.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Add this tensor's gradient from a finished tape into `self.grad`.
    /// Accumulation across tapes is additive.
    pub fn accumulate_grad(&mut self, tape: &Tape, var: Var) -> Result<()> {
        let g = tape
            .grad(var)
            .ok_or_else(|| Error::Tape("no gradient recorded for variable".into()))?;
        if g.len() != self.data.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                detail: format!("gradient length {} vs tensor {}", g.len(), self.data.len()),
            });
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (b, gv) in buf.iter_mut().zip(g) {
            *b += gv;
        }
        Ok(())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Matmul(Var, Var),
    /// `[m x n]` plus an `[n]` vector broadcast over rows.
    AddRowVec(Var, Var),
    /// `[c x h x w]` plus a `[c]` vector broadcast per channel plane.
    AddChanVec(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize },
    ResizeNearest { x: Var, factor: usize },
    /// Channel concatenation of two `[c x h x w]` maps.
    Concat(Var, Var),
    /// `[c x h x w]` -> `[h*w x c]` permutation.
    ChwToPixmat(Var),
    Reshape(Var),
    /// Fused clean-signal estimate `(x - sqrt(1-abar) eps) / sqrt(abar)`.
    PredictX0 { x: Var, eps: Var, abar: f64 },
    Sum(Var),
    /// Sum of squared differences (data-fidelity building block).
    SumSquaredDiff(Var, Var),
    /// Mean of squared differences (denoising training loss).
    MseLoss(Var, Var),
    /// Per-band cubic downsampling of a `[h*w x bands]` matrix.
    BicubicDown { x: Var, h: usize, w: usize, s: usize },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Records a forward computation and differentiates it once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    spent: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the backward root with respect to `v`, if it was computed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy the current value out as a detached tensor.
    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Register a leaf. Gradients flow back to it iff `t.requires_grad`.
    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        self.push("input", t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    /// Register a constant leaf (no gradient).
    pub fn constant(&mut self, shape: &[usize], data: &[f64]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "constant",
                detail: format!("shape {:?} vs {} values", shape, data.len()),
            });
        }
        self.push("constant", shape.to_vec(), data.to_vec(), false, Op::Leaf)
    }

    /// Re-enter a node's value as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let shape = self.nodes[v.0].shape.clone();
        let value = self.nodes[v.0].value.clone();
        self.push("detach", shape, value, false, Op::Leaf)
    }

    fn push(
        &mut self,
        opname: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        needs_grad: bool,
        op: Op,
    ) -> Result<Var> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: opname });
        }
        self.nodes.push(Node { shape, value, needs_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension {
                op,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value: Vec<f64> =
            self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push("add", self.nodes[a.0].shape.clone(), value, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value: Vec<f64> =
            self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x - y).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push("sub", self.nodes[a.0].shape.clone(), value, ng, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value: Vec<f64> =
            self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", self.nodes[a.0].shape.clone(), value, ng, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| c * x).collect();
        let ng = self.needs(a);
        self.push("scale", self.nodes[a.0].shape.clone(), value, ng, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x + c).collect();
        let ng = self.needs(a);
        self.push("add_scalar", self.nodes[a.0].shape.clone(), value, ng, Op::AddScalar(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| silu(x)).collect();
        let ng = self.needs(a);
        self.push("silu", self.nodes[a.0].shape.clone(), value, ng, Op::Silu(a))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        matmul_kernel(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut value);
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", vec![m, n], value, ng, Op::Matmul(a, b))
    }

    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (sa, sv) = (&self.nodes[a.0].shape, &self.nodes[v.0].shape);
        let n = *sa.last().unwrap_or(&0);
        if sa.len() != 2 || self.nodes[v.0].value.len() != n {
            return Err(Error::Dimension {
                op: "add_row_vec",
                detail: format!("{:?} + {:?}", sa, sv),
            });
        }
        let mut value = self.nodes[a.0].value.clone();
        for row in value.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(&self.nodes[v.0].value) {
                *x += y;
            }
        }
        let ng = self.needs(a) || self.needs(v);
        self.push("add_row_vec", sa.clone(), value, ng, Op::AddRowVec(a, v))
    }

    pub fn add_chan_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        if sa.len() != 3 || self.nodes[v.0].value.len() != sa[0] {
            return Err(Error::Dimension {
                op: "add_chan_vec",
                detail: format!("{:?} + {:?}", sa, self.nodes[v.0].shape),
            });
        }
        let plane = sa[1] * sa[2];
        let mut value = self.nodes[a.0].value.clone();
        for (c, chunk) in value.chunks_mut(plane).enumerate() {
            let bias = self.nodes[v.0].value[c];
            for x in chunk {
                *x += bias;
            }
        }
        let ng = self.needs(a) || self.needs(v);
        self.push("add_chan_vec", sa, value, ng, Op::AddChanVec(a, v))
    }

    // ---- network structure ops ----

    /// 3x3 convolution, zero padding 1, stride 1 or 2.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 3 || sw.len() != 4 || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!("input {:?}, weights {:?}", sx, sw),
            });
        }
        if sx[0] != sw[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!("input channels {} vs kernel channels {}", sx[0], sw[1]),
            });
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Parameter { name: "stride", detail: format!("{stride} not in {{1,2}}") });
        }
        let (ci, h, w_dim) = (sx[0], sx[1], sx[2]);
        let co = sw[0];
        let (oh, ow) = (conv::conv_out_dim(h, stride), conv::conv_out_dim(w_dim, stride));
        let mut value = vec![0.0; co * oh * ow];
        conv::conv2d_forward(
            &self.nodes[x.0].value,
            ci,
            h,
            w_dim,
            &self.nodes[w.0].value,
            co,
            stride,
            &mut value,
        );
        let ng = self.needs(x) || self.needs(w);
        self.push("conv2d", vec![co, oh, ow], value, ng, Op::Conv2d { x, w, stride })
    }

    pub fn resize_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 3 {
            return Err(Error::Dimension { op: "resize_nearest", detail: format!("{:?}", sx) });
        }
        if factor < 1 {
            return Err(Error::Parameter { name: "factor", detail: "must be >= 1".into() });
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let mut value = vec![0.0; c * h * factor * w * factor];
        conv::resize_nearest_forward(&self.nodes[x.0].value, c, h, w, factor, &mut value);
        let ng = self.needs(x);
        self.push(
            "resize_nearest",
            vec![c, h * factor, w * factor],
            value,
            ng,
            Op::ResizeNearest { x, factor },
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::Dimension {
                op: "concat_channels",
                detail: format!("{:?} ++ {:?}", sa, sb),
            });
        }
        let shape = vec![sa[0] + sb[0], sa[1], sa[2]];
        let mut value = Vec::with_capacity(shape.iter().product());
        value.extend_from_slice(&self.nodes[a.0].value);
        value.extend_from_slice(&self.nodes[b.0].value);
        let ng = self.needs(a) || self.needs(b);
        self.push("concat_channels", shape, value, ng, Op::Concat(a, b))
    }

    /// Permute `[c x h x w]` into the pixel-major matrix `[h*w x c]`.
    pub fn chw_to_pixmat(&mut self, x: Var) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 3 {
            return Err(Error::Dimension { op: "chw_to_pixmat", detail: format!("{:?}", sx) });
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let plane = h * w;
        let src = &self.nodes[x.0].value;
        let mut value = vec![0.0; c * plane];
        for ch in 0..c {
            for p in 0..plane {
                value[p * c + ch] = src[ch * plane + p];
            }
        }
        let ng = self.needs(x);
        self.push("chw_to_pixmat", vec![plane, c], value, ng, Op::ChwToPixmat(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.len() {
            return Err(Error::Dimension {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.nodes[x.0].shape, shape),
            });
        }
        let value = self.nodes[x.0].value.clone();
        let ng = self.needs(x);
        self.push("reshape", shape.to_vec(), value, ng, Op::Reshape(x))
    }

    // ---- diffusion / loss ops ----

    /// Clean-signal estimate from a noisy iterate and a noise prediction.
    pub fn predict_x0(&mut self, x: Var, eps: Var, abar: f64) -> Result<Var> {
        self.same_shape("predict_x0", x, eps)?;
        if abar <= 0.0 {
            return Err(Error::Parameter { name: "abar", detail: format!("{abar} must be > 0") });
        }
        let mut value = vec![0.0; self.nodes[x.0].value.len()];
        crate::diffusion::predict_x0_kernel(
            &self.nodes[x.0].value,
            &self.nodes[eps.0].value,
            abar,
            &mut value,
        );
        let ng = self.needs(x) || self.needs(eps);
        self.push("predict_x0", self.nodes[x.0].shape.clone(), value, ng, Op::PredictX0 { x, eps, abar })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = vec![self.nodes[x.0].value.iter().sum()];
        let ng = self.needs(x);
        self.push("sum", vec![1], value, ng, Op::Sum(x))
    }

    /// `sum((a - b)^2)` over all entries.
    pub fn sum_squared_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sum_squared_diff", a, b)?;
        let value = vec![self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| (x - y) * (x - y))
            .sum()];
        let ng = self.needs(a) || self.needs(b);
        self.push("sum_squared_diff", vec![1], value, ng, Op::SumSquaredDiff(a, b))
    }

    /// `mean((a - b)^2)`.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let n = self.nodes[a.0].value.len() as f64;
        let value = vec![
            self.nodes[a.0]
                .value
                .iter()
                .zip(&self.nodes[b.0].value)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / n,
        ];
        let ng = self.needs(a) || self.needs(b);
        self.push("mse_loss", vec![1], value, ng, Op::MseLoss(a, b))
    }

    /// Cubic downsampling of a `[h*w x bands]` matrix by integer factor `s`.
    pub fn bicubic_down(&mut self, x: Var, h: usize, w: usize, s: usize) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 2 || sx[0] != h * w {
            return Err(Error::Dimension {
                op: "bicubic_down",
                detail: format!("{:?} is not [{h}*{w} x bands]", sx),
            });
        }
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Parameter {
                name: "scale",
                detail: format!("{h}x{w} not divisible by {s}"),
            });
        }
        let bands = sx[1];
        let row_taps = CubicTaps::downsample(h, s);
        let col_taps = CubicTaps::downsample(w, s);
        let value = resample::resample_2d(&row_taps, &col_taps, &self.nodes[x.0].value, bands);
        let ng = self.needs(x);
        self.push(
            "bicubic_down",
            vec![(h / s) * (w / s), bands],
            value,
            ng,
            Op::BicubicDown { x, h, w, s },
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Each tape differentiates once;
    /// a second call is a contract error.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.spent {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        self.spent = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad || grads[idx].is_none() {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.apply_backward(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn grad_buf<'a>(
        &self,
        grads: &'a mut Vec<Option<Vec<f64>>>,
        v: Var,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]))
    }

    fn apply_backward(&self, idx: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        match self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    axpy(1.0, g, gb);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    axpy(-1.0, g, gb);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((t, gv), y) in ga.iter_mut().zip(g).zip(&self.nodes[b.0].value) {
                        *t += gv * y;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    for ((t, gv), x) in gb.iter_mut().zip(g).zip(&self.nodes[a.0].value) {
                        *t += gv * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    axpy(c, g, ga);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    axpy(1.0, g, ga);
                }
            }
            Op::Silu(a) => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((t, gv), &x) in ga.iter_mut().zip(g).zip(&self.nodes[a.0].value) {
                        *t += gv * silu_deriv(x);
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if let Some(ga) = self.grad_buf(grads, a) {
                    // dA = g . B^T
                    let bval = &self.nodes[b.0].value;
                    for i in 0..m {
                        let grow = &g[i * n..][..n];
                        let garow = &mut ga[i * k..][..k];
                        for kk in 0..k {
                            let mut acc = 0.0;
                            let brow = &bval[kk * n..][..n];
                            for (gv, bv) in grow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            garow[kk] += acc;
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    // dB = A^T . g
                    let aval = &self.nodes[a.0].value;
                    for i in 0..m {
                        let grow = &g[i * n..][..n];
                        let arow = &aval[i * k..][..k];
                        for (kk, &av) in arow.iter().enumerate() {
                            let gbrow = &mut gb[kk * n..][..n];
                            for (t, gv) in gbrow.iter_mut().zip(grow) {
                                *t += av * gv;
                            }
                        }
                    }
                }
            }
            Op::AddRowVec(a, v) => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gv) = self.grad_buf(grads, v) {
                    let n = gv.len();
                    for row in g.chunks(n) {
                        for (t, x) in gv.iter_mut().zip(row) {
                            *t += x;
                        }
                    }
                }
            }
            Op::AddChanVec(a, v) => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gv) = self.grad_buf(grads, v) {
                    let plane = self.nodes[a.0].shape[1] * self.nodes[a.0].shape[2];
                    for (c, chunk) in g.chunks(plane).enumerate() {
                        gv[c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Conv2d { x, w, stride } => {
                let sx = &self.nodes[x.0].shape;
                let (ci, h, wd) = (sx[0], sx[1], sx[2]);
                let co = self.nodes[w.0].shape[0];
                if let Some(gx) = self.grad_buf(grads, x) {
                    conv::conv2d_backward_input(g, ci, h, wd, &self.nodes[w.0].value, co, stride, gx);
                }
                if let Some(gw) = self.grad_buf(grads, w) {
                    conv::conv2d_backward_weights(g, &self.nodes[x.0].value, ci, h, wd, co, stride, gw);
                }
            }
            Op::ResizeNearest { x, factor } => {
                let sx = &self.nodes[x.0].shape;
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                if let Some(gx) = self.grad_buf(grads, x) {
                    conv::resize_nearest_backward(g, c, h, w, factor, gx);
                }
            }
            Op::Concat(a, b) => {
                let na = self.nodes[a.0].value.len();
                if let Some(ga) = self.grad_buf(grads, a) {
                    axpy(1.0, &g[..na], ga);
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    axpy(1.0, &g[na..], gb);
                }
            }
            Op::ChwToPixmat(x) => {
                let sx = &self.nodes[x.0].shape;
                let (c, plane) = (sx[0], sx[1] * sx[2]);
                if let Some(gx) = self.grad_buf(grads, x) {
                    for ch in 0..c {
                        for p in 0..plane {
                            gx[ch * plane + p] += g[p * c + ch];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.grad_buf(grads, x) {
                    axpy(1.0, g, gx);
                }
            }
            Op::PredictX0 { x, eps, abar } => {
                let inv = 1.0 / abar.sqrt();
                let c = (1.0 - abar).sqrt();
                if let Some(gx) = self.grad_buf(grads, x) {
                    axpy(inv, g, gx);
                }
                if let Some(ge) = self.grad_buf(grads, eps) {
                    axpy(-c * inv, g, ge);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.grad_buf(grads, x) {
                    let gv = g[0];
                    for t in gx.iter_mut() {
                        *t += gv;
                    }
                }
            }
            Op::SumSquaredDiff(a, b) => {
                let gv = g[0];
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((t, x), y) in ga.iter_mut().zip(&self.nodes[a.0].value).zip(&self.nodes[b.0].value)
                    {
                        *t += gv * 2.0 * (x - y);
                    }
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    for ((t, x), y) in gb.iter_mut().zip(&self.nodes[a.0].value).zip(&self.nodes[b.0].value)
                    {
                        *t -= gv * 2.0 * (x - y);
                    }
                }
            }
            Op::MseLoss(a, b) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gv = g[0] * 2.0 / n;
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((t, x), y) in ga.iter_mut().zip(&self.nodes[a.0].value).zip(&self.nodes[b.0].value)
                    {
                        *t += gv * (x - y);
                    }
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    for ((t, x), y) in gb.iter_mut().zip(&self.nodes[a.0].value).zip(&self.nodes[b.0].value)
                    {
                        *t -= gv * (x - y);
                    }
                }
            }
            Op::BicubicDown { x, h, w, s } => {
                if let Some(gx) = self.grad_buf(grads, x) {
                    let bands = self.nodes[x.0].shape[1];
                    let row_taps = CubicTaps::downsample(h, s);
                    let col_taps = CubicTaps::downsample(w, s);
                    let gin = resample::resample_2d_adjoint(&row_taps, &col_taps, g, bands);
                    axpy(1.0, &gin, gx);
                }
            }
        }
    }
}

#[inline]
fn axpy(c: f64, src: &[f64], dst: &mut [f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let orow = &mut out[i * n..][..n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..][..n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
