use super::kernels::{self, ConvGeometry, EdgeMode};
use super::tensor::{Real, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Relu(Var),
    Gelu(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    Resize {
        x: Var,
        edge: EdgeMode,
    },
    ConvexUpsample {
        coarse: Var,
        weights: Var,
        factor: usize,
    },
    Sum(Var),
    L1Mean {
        x: Var,
        target: Tensor<T>,
    },
    DotConst {
        x: Var,
        weights: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Eager reverse-mode tape.
///
/// Every operation evaluates immediately and appends a node whose inputs are
/// earlier nodes, so the node list is always in topological order.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backpropagated: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// participates in a differentiable path.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A differentiable leaf (a parameter or an input under test).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_values(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_values(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_values(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    /// Adds a `[C]` vector to every position of a `[..., C]` value.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().expect("non-empty shape");
        if self.shape(bias) != [c] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let out = Tensor::new(&[m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "transpose",
                msg: format!("expected a 2-D value, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(&[n, m], out)?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Columns `start..start + len` of a `[N, C]` value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                msg: format!("columns {start}..{} of {s:?}", start + len),
            });
        }
        let (n, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let out = Tensor::new(&[n, len], out)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| AutodiffError::InvalidArgument {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let n = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..n {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::new(&[n, total], out)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "softmax",
                msg: format!("axis {axis} out of range for {s:?}"),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let axis_len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut m = T::neg_infinity();
                for a in 0..axis_len {
                    m = m.max(src[base + a * inner]);
                }
                let mut total = T::zero();
                for a in 0..axis_len {
                    let e = (src[base + a * inner] - m).exp();
                    out[base + a * inner] = e;
                    total += e;
                }
                for a in 0..axis_len {
                    out[base + a * inner] = out[base + a * inner] / total;
                }
            }
        }
        let out = Tensor::new(&s, out)?;
        self.push(
            "softmax",
            out,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
            &[x],
        )
    }

    /// Layer normalization over the last axis followed by a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(x).last().expect("non-empty shape");
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(AutodiffError::InvalidArgument {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let eps = T::from_f64_lossy(eps);
        let cn = T::from_usize(c).expect("channel count");
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let src = self.value(x).data();
        let rows = src.len() / c;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for ch in 0..c {
                let xh = (row[ch] - mean) * rs;
                xhat[r * c + ch] = xh;
                out[r * c + ch] = xh * g[ch] + b[ch];
            }
        }
        let out = Tensor::new(self.shape(x), out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// 2-D convolution of an `[H, W, Cin]` map with a `[kh, kw, Cin, Cout]` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 3 || sk.len() != 4 || sx[2] != sk[2] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        if sk[0] % 2 == 0 || sk[1] % 2 == 0 || !(1..=2).contains(&stride) {
            return Err(AutodiffError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel {sk:?} must have odd extents and stride must be 1 or 2 (got {stride})"),
            });
        }
        let (ph, pw) = (sx[0] + 2 * pad, sx[1] + 2 * pad);
        if ph < sk[0] || pw < sk[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let geom = ConvGeometry {
            in_h: sx[0],
            in_w: sx[1],
            cin: sx[2],
            kh: sk[0],
            kw: sk[1],
            cout: sk[3],
            stride,
            pad,
            out_h: (ph - sk[0]) / stride + 1,
            out_w: (pw - sk[1]) / stride + 1,
        };
        let input = self.value(x).data();
        let owned;
        let cols: &[T] = if geom.is_pointwise() {
            input
        } else {
            owned = kernels::im2col(input, &geom);
            &owned
        };
        let mut out = vec![T::zero(); geom.positions() * geom.cout];
        T::gemm(
            geom.positions(),
            geom.patch_len(),
            geom.cout,
            cols,
            geom.patch_len() as isize,
            1,
            self.value(kernel).data(),
            geom.cout as isize,
            1,
            T::zero(),
            &mut out,
            geom.cout as isize,
            1,
        );
        let out = Tensor::new(&[geom.out_h, geom.out_w, geom.cout], out)?;
        self.push("conv2d", out, Op::Conv2d { x, kernel, geom }, &[x, kernel])
    }

    /// Bilinear, pixel-center aligned resize of an `[h, w, c]` map.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize, edge: EdgeMode) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "resize_bilinear",
                msg: format!("cannot resize {s:?} to {out_h}x{out_w}"),
            });
        }
        let out = kernels::resize_hwc(self.value(x).data(), s[0], s[1], s[2], out_h, out_w, edge);
        let out = Tensor::new(&[out_h, out_w, s[2]], out)?;
        self.push("resize_bilinear", out, Op::Resize { x, edge }, &[x])
    }

    /// Convex upsampling: each fine sample of the `factor`× finer map is a
    /// weighted combination of the replicate-padded 3×3 coarse neighbourhood.
    ///
    /// `coarse` is `[h, w, c]`; `weights` is `[h, w, factor*factor, 9]` and is
    /// expected to already sum to one along its last axis.
    pub fn convex_upsample(&mut self, coarse: Var, weights: Var, factor: usize) -> Result<Var> {
        let sc = self.shape(coarse).to_vec();
        let sw = self.shape(weights).to_vec();
        if sc.len() != 3 || sw != [sc[0], sc[1], factor * factor, 9] {
            return Err(AutodiffError::ShapeMismatch {
                op: "convex_upsample",
                lhs: sc,
                rhs: sw,
            });
        }
        let (h, w, c) = (sc[0], sc[1], sc[2]);
        let (fh, fw) = (h * factor, w * factor);
        let src = self.value(coarse).data();
        let wts = self.value(weights).data();
        let mut out = vec![T::zero(); fh * fw * c];
        for i in 0..h {
            for j in 0..w {
                let nb: [usize; 9] = std::array::from_fn(|k| kernels::neighbour(i, j, k, h, w));
                for a in 0..factor {
                    for b in 0..factor {
                        let wrow = &wts[(((i * w + j) * factor * factor) + a * factor + b) * 9..][..9];
                        let dst = ((i * factor + a) * fw + j * factor + b) * c;
                        for ch in 0..c {
                            let mut acc = T::zero();
                            for k in 0..9 {
                                acc += wrow[k] * src[nb[k] * c + ch];
                            }
                            out[dst + ch] = acc;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[fh, fw, c], out)?;
        self.push(
            "convex_upsample",
            out,
            Op::ConvexUpsample {
                coarse,
                weights,
                factor,
            },
            &[coarse, weights],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean absolute difference against a constant target of the same shape.
    pub fn l1_mean(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "l1_mean",
                lhs: self.shape(x).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = T::from_usize(target.len()).expect("element count");
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<T>()
            / n;
        self.push("l1_mean", Tensor::scalar(s), Op::L1Mean { x, target }, &[x])
    }

    /// `sum(x ⊙ weights)` for a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if self.value(x).len() != weights.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "dot_const",
                lhs: self.shape(x).to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum::<T>();
        self.push("dot_const", Tensor::scalar(s), Op::DotConst { x, weights }, &[x])
    }

    /// Fingerprint of every branch taken at a non-differentiable point (ReLU
    /// gates and absolute-value signs). Two evaluations with equal
    /// signatures lie on the same smooth piece of the computed function.
    pub fn kink_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bit: bool| {
            h ^= bit as u64;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        feed(v > T::zero());
                    }
                }
                Op::L1Mean { x, target } => {
                    for (&a, &b) in self.nodes[x.0].value.data().iter().zip(target.data()) {
                        feed(a > b);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from a scalar loss. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(ls.to_vec()));
        }
        self.backpropagated = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contribution: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(&shape, contribution).expect("gradient matches value shape"));
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &Tensor<T>) {
        let gd = g.data();
        // Each arm computes input contributions from immutable state first,
        // then accumulates them.
        let mut pending: Vec<(Var, Vec<T>)> = Vec::with_capacity(3);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                pending.push((*a, gd.to_vec()));
                pending.push((*b, gd.to_vec()));
            }
            Op::Sub(a, b) => {
                pending.push((*a, gd.to_vec()));
                pending.push((*b, gd.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let va = self.nodes[a.0].value.data();
                let vb = self.nodes[b.0].value.data();
                if self.needs(*a) {
                    pending.push((*a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect()));
                }
                if self.needs(*b) {
                    pending.push((*b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                pending.push((*a, gd.iter().map(|&v| v * s).collect()));
            }
            Op::AddBias(x, b) => {
                pending.push((*x, gd.to_vec()));
                if self.needs(*b) {
                    let c = self.nodes[b.0].value.len();
                    let mut gb = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    pending.push((*b, gb));
                }
            }
            Op::MatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gd, n as isize, 1, vb.data(), 1, n as isize, T::zero(), &mut ga, k as isize, 1);
                    pending.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, va.data(), 1, k as isize, gd, n as isize, 1, T::zero(), &mut gb, n as isize, 1);
                    pending.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                let s = self.nodes[a.0].value.shape();
                let (m, n) = (s[0], s[1]);
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = gd[j * m + i];
                    }
                }
                pending.push((*a, ga));
            }
            Op::Reshape(a) => pending.push((*a, gd.to_vec())),
            Op::SliceCols { x, start } => {
                let s = self.nodes[x.0].value.shape();
                let (n, c) = (s[0], s[1]);
                let len = g.shape()[1];
                let mut gx = vec![T::zero(); n * c];
                for r in 0..n {
                    gx[r * c + start..r * c + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                pending.push((*x, gx));
            }
            Op::ConcatCols(parts) => {
                let n = g.shape()[0];
                let total = g.shape()[1];
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    if self.needs(*p) {
                        let mut gp = Vec::with_capacity(n * w);
                        for r in 0..n {
                            gp.extend_from_slice(&gd[r * total + off..r * total + off + w]);
                        }
                        pending.push((*p, gp));
                    }
                    off += w;
                }
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let y = self.nodes[idx].value.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * axis_len * inner + i;
                        let mut dot = T::zero();
                        for a in 0..*axis_len {
                            dot += gd[base + a * inner] * y[base + a * inner];
                        }
                        for a in 0..*axis_len {
                            let p = base + a * inner;
                            gx[p] = y[p] * (gd[p] - dot);
                        }
                    }
                }
                pending.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.nodes[gain.0].value.data();
                let c = gv.len();
                let cn = T::from_usize(c).expect("channel count");
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); gd.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let off = r * c;
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for ch in 0..c {
                            let d = gd[off + ch] * gv[ch];
                            mean_d += d;
                            mean_dx += d * xhat[off + ch];
                        }
                        mean_d = mean_d / cn;
                        mean_dx = mean_dx / cn;
                        for ch in 0..c {
                            let d = gd[off + ch] * gv[ch];
                            gx[off + ch] = rs * (d - mean_d - xhat[off + ch] * mean_dx);
                        }
                    }
                    pending.push((*x, gx));
                }
                if self.needs(*gain) || self.needs(*bias) {
                    let mut gg = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    for (row, xrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for ch in 0..c {
                            gg[ch] += row[ch] * xrow[ch];
                            gb[ch] += row[ch];
                        }
                    }
                    pending.push((*gain, gg));
                    pending.push((*bias, gb));
                }
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                pending.push((
                    *x,
                    gd.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                ));
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.data();
                pending.push((*x, gd.iter().zip(xv).map(|(&g, &v)| g * gelu_parts(v).1).collect()));
            }
            Op::Conv2d { x, kernel, geom } => {
                let geom = *geom;
                let (p, kk, co) = (geom.positions(), geom.patch_len(), geom.cout);
                let input = self.nodes[x.0].value.data();
                let kdata = self.nodes[kernel.0].value.data();
                if self.needs(*kernel) {
                    let owned;
                    let cols: &[T] = if geom.is_pointwise() {
                        input
                    } else {
                        owned = kernels::im2col(input, &geom);
                        &owned
                    };
                    let mut gk = vec![T::zero(); kk * co];
                    T::gemm(kk, p, co, cols, 1, kk as isize, gd, co as isize, 1, T::zero(), &mut gk, co as isize, 1);
                    pending.push((*kernel, gk));
                }
                if self.needs(*x) {
                    let mut gcols = vec![T::zero(); p * kk];
                    T::gemm(p, co, kk, gd, co as isize, 1, kdata, 1, co as isize, T::zero(), &mut gcols, kk as isize, 1);
                    if geom.is_pointwise() {
                        pending.push((*x, gcols));
                    } else {
                        let mut gx = vec![T::zero(); input.len()];
                        kernels::col2im_accumulate(&gcols, &geom, &mut gx);
                        pending.push((*x, gx));
                    }
                }
            }
            Op::Resize { x, edge } => {
                let s = self.nodes[x.0].value.shape();
                let os = g.shape();
                let gx = kernels::resize_hwc_adjoint(gd, s[0], s[1], s[2], os[0], os[1], *edge);
                pending.push((*x, gx));
            }
            Op::ConvexUpsample {
                coarse,
                weights,
                factor,
            } => {
                let f = *factor;
                let s = self.nodes[coarse.0].value.shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                let fw = w * f;
                let src = self.nodes[coarse.0].value.data();
                let wts = self.nodes[weights.0].value.data();
                let mut gc = vec![T::zero(); src.len()];
                let mut gw = vec![T::zero(); wts.len()];
                for i in 0..h {
                    for j in 0..w {
                        let nb: [usize; 9] = std::array::from_fn(|k| kernels::neighbour(i, j, k, h, w));
                        for a in 0..f {
                            for b in 0..f {
                                let woff = (((i * w + j) * f * f) + a * f + b) * 9;
                                let goff = ((i * f + a) * fw + j * f + b) * c;
                                for ch in 0..c {
                                    let go = gd[goff + ch];
                                    for k in 0..9 {
                                        gw[woff + k] += go * src[nb[k] * c + ch];
                                        gc[nb[k] * c + ch] += go * wts[woff + k];
                                    }
                                }
                            }
                        }
                    }
                }
                pending.push((*coarse, gc));
                pending.push((*weights, gw));
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                pending.push((*x, vec![gd[0]; n]));
            }
            Op::L1Mean { x, target } => {
                let xv = self.nodes[x.0].value.data();
                let n = T::from_usize(xv.len()).expect("element count");
                let scale = gd[0] / n;
                pending.push((
                    *x,
                    xv.iter()
                        .zip(target.data())
                        .map(|(&a, &b)| {
                            if a > b {
                                scale
                            } else if a < b {
                                -scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                ));
            }
            Op::DotConst { x, weights } => {
                pending.push((*x, weights.data().iter().map(|&w| w * gd[0]).collect()));
            }
        }
        for (v, contribution) in pending {
            self.accum(v, contribution);
        }
    }
}
