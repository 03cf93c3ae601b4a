//! Wengert-list reverse-mode engine. Every op appends a node holding its
//! forward value and enough context to run its backward rule; `backward`
//! walks the list once in reverse.

use super::conv::{bias_grad, conv_backward_data, conv_backward_weight, conv_forward, ConvGeom};
use super::tensor::{check_shape, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::real::{gemm, Real, Strides};
use crate::ssm::{selective_scan, selective_scan_backward, ScanMode, SelectiveScanInput};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter leaves of a [`ParamStore`] bound onto a tape, indexed by
/// `ParamId`.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: super::ParamId) -> Var {
        self.0[id.0]
    }
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Gelu,
    Softplus,
    Sigmoid,
    Abs,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Point-wise operations addressable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Gelu,
    Softplus,
    Exp,
    Add,
    Mul,
    Neg,
}

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        fin: usize,
        fout: usize,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    /// `geom` describes the forward convolution whose data-adjoint this is.
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Shift {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat {
        a: Var,
        b: Var,
        batch: usize,
        c1: usize,
        c2: usize,
        plane: usize,
    },
    Split {
        x: Var,
        start: usize,
        batch: usize,
        c_total: usize,
        plane: usize,
    },
    Reverse {
        x: Var,
        batch: usize,
        len: usize,
        ch: usize,
    },
    Flatten {
        x: Var,
        batch: usize,
        ch: usize,
        plane: usize,
    },
    Unflatten {
        x: Var,
        batch: usize,
        ch: usize,
        plane: usize,
    },
    Reshape {
        x: Var,
    },
    ReflectPad {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
        pad: usize,
    },
    SelectiveScan(Box<ScanRecord<T>>),
}

struct ScanRecord<T> {
    u: Var,
    delta: Var,
    b: Var,
    c: Var,
    d: Var,
    a: Vec<T>,
    states: Vec<T>,
    batch: usize,
    len: usize,
    ch: usize,
    n: usize,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Conv { .. } => "conv2d",
            Op::ConvTranspose { .. } => "conv_transpose2d",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Neg => "neg",
                UnaryKind::Exp => "exp",
                UnaryKind::Gelu => "gelu",
                UnaryKind::Softplus => "softplus",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Abs => "abs",
                UnaryKind::Square => "square",
            },
            Op::Scale { .. } => "scale",
            Op::Shift { .. } => "add_scalar",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::LayerNorm { .. } => "layernorm",
            Op::Concat { .. } => "concat_channels",
            Op::Split { .. } => "split_channels",
            Op::Reverse { .. } => "reverse_sequence",
            Op::Flatten { .. } => "raster_flatten",
            Op::Unflatten { .. } => "raster_unflatten",
            Op::Reshape { .. } => "reshape",
            Op::ReflectPad { .. } => "reflect_pad",
            Op::SelectiveScan(_) => "selective_scan",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every bound parameter into its tensor's grad buffer.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>, bound: &Bound) -> Result<()> {
        for (i, &v) in bound.vars().iter().enumerate() {
            if let Some(g) = self.get(v) {
                store.get_mut(super::ParamId(i)).tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

const CORRUPTION_FACTOR: f64 = 1.1;
const TRACE_DEPTH: usize = 6;

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    corrupt_backward: bool,
    check_finite: bool,
    profile: Option<Profile>,
}

/// Wall time per op kind, collected when profiling is on.
#[derive(Clone, Debug, Default)]
pub struct Profile {
    last: Option<std::time::Instant>,
    entries: std::collections::BTreeMap<&'static str, OpTiming>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OpTiming {
    pub count: usize,
    pub forward_secs: f64,
    pub backward_secs: f64,
}

impl Profile {
    /// Entries sorted by total time, largest first.
    pub fn entries(&self) -> Vec<(&'static str, OpTiming)> {
        let mut v: Vec<_> = self.entries.iter().map(|(k, t)| (*k, *t)).collect();
        v.sort_by(|a, b| {
            (b.1.forward_secs + b.1.backward_secs)
                .total_cmp(&(a.1.forward_secs + a.1.backward_secs))
        });
        v
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
            corrupt_backward: false,
            check_finite: false,
            profile: None,
        }
    }

    /// Records per-op forward time (the interval since the previous node was
    /// added) and backward time.
    pub fn set_profile(&mut self, on: bool) {
        self.profile = on.then(|| Profile {
            last: Some(std::time::Instant::now()),
            ..Profile::default()
        });
    }

    pub fn profile(&self) -> Option<&Profile> {
        self.profile.as_ref()
    }

    /// Negative-control hook: every backward rule scales the gradients it
    /// emits by a constant factor, so gradient checks must fail.
    pub fn set_corrupt_backward(&mut self, on: bool) {
        self.corrupt_backward = on;
    }

    /// Validate every forward value; the first non-finite result raises a
    /// numeric error carrying the recent op trace.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    /// Allows another `backward` pass over the same graph.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = requires_grad;
        Ok(self.leaf(&t))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        self.input(shape, data, false)
    }

    pub fn bind(&mut self, store: &ParamStore<T>) -> Bound {
        Bound(store.iter().map(|p| self.leaf(&p.tensor)).collect())
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        parents: &[Var],
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.check_finite {
            if let Some(pos) = value.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "{} produced a non-finite value at flat index {pos}; trace: {}",
                    op.name(),
                    self.trace()
                )));
            }
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        if let Some(p) = &mut self.profile {
            let now = std::time::Instant::now();
            let e = p.entries.entry(op.name()).or_default();
            e.count += 1;
            e.forward_secs += p.last.map_or(0.0, |t| (now - t).as_secs_f64());
            p.last = Some(now);
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn trace(&self) -> String {
        let start = self.nodes.len().saturating_sub(TRACE_DEPTH);
        self.nodes[start..]
            .iter()
            .enumerate()
            .map(|(i, n)| format!("#{} {}{:?}", start + i, n.op.name(), n.shape))
            .collect::<Vec<_>>()
            .join(" -> ")
    }

    // ---------------------------------------------------------------- ops

    /// `y[..., j] = sum_i x[..., i] w[i, j] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let fin = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != fin {
            return Err(Error::dim(
                "linear",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        let fout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::dim(
                    "linear",
                    format!("bias {:?} for {fout} outputs", self.shape(b)),
                ));
            }
        }
        let m = self.value(x).len() / fin;
        let mut y = vec![T::zero(); m * fout];
        if let Some(b) = b {
            let bv = self.value(b);
            y.chunks_mut(fout).for_each(|row| row.copy_from_slice(bv));
        }
        gemm(
            m,
            fin,
            fout,
            T::one(),
            self.value(x),
            Strides::row_major(fin),
            self.value(w),
            Strides::row_major(fout),
            if b.is_some() { T::one() } else { T::zero() },
            &mut y,
            Strides::row_major(fout),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = fout;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(shape, y, Op::Linear { x, w, b, fin, fout }, &parents)
    }

    /// Grouped cross-correlation; `w` is `[c_out, c_in/groups, k, k]`, `b` is `[c_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::dim("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        if ws[2].is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv2d kernel must be odd, got {}",
                ws[2]
            )));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Config(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        self.conv_impl(x, w, b, stride, pad, groups)
    }

    fn conv_impl(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let geom = ConvGeom::new(
            xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad, groups,
        )?;
        if ws[..] != geom.weight_shape() {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "weight {ws:?}, expected {:?} for input {xs:?}",
                    geom.weight_shape()
                ),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} for {} channels", self.shape(b), geom.c_out),
                ));
            }
        }
        let mut y = vec![T::zero(); geom.out_len()];
        conv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &geom,
            &mut y,
        );
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            vec![geom.batch, geom.c_out, geom.h_out, geom.w_out],
            y,
            Op::Conv { x, w, b, geom },
            &parents,
        )
    }

    /// Adjoint of a stride-2 `conv2d` sharing the same kernel; output extents
    /// are exactly doubled. `w` is `[c_in, c_out, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if stride != 2 {
            return Err(Error::Config(format!(
                "transposed convolution supports stride 2 only, got {stride}"
            )));
        }
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("input {xs:?}, weight {ws:?}"),
            ));
        }
        let (h2, w2) = (2 * xs[2], 2 * xs[3]);
        let geom =
            ConvGeom::new(xs[0], ws[1], h2, w2, xs[1], ws[2], stride, pad, 1).map_err(|e| {
                Error::Config(format!("transposed convolution cannot double {xs:?}: {e}"))
            })?;
        if geom.h_out != xs[2] || geom.w_out != xs[3] {
            return Err(Error::Config(format!(
                "kernel {} with padding {pad} does not map {h2}x{w2} back to {}x{}",
                ws[2], xs[2], xs[3]
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.c_in] {
                return Err(Error::dim(
                    "conv_transpose2d",
                    format!("bias {:?} for {} channels", self.shape(b), geom.c_in),
                ));
            }
        }
        let mut y = vec![T::zero(); geom.in_len()];
        conv_backward_data(self.value(x), self.value(w), &geom, &mut y);
        if let Some(b) = b {
            let plane = h2 * w2;
            let bv = self.value(b).to_vec();
            for bi in 0..geom.batch {
                for (c, &v) in bv.iter().enumerate() {
                    y[(bi * geom.c_in + c) * plane..][..plane]
                        .iter_mut()
                        .for_each(|e| *e += v);
                }
            }
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            vec![geom.batch, geom.c_in, h2, w2],
            y,
            Op::ConvTranspose { x, w, b, geom },
            &parents,
        )
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (big, small) = if sa.iter().product::<usize>() >= sb.iter().product::<usize>() {
            (sa, sb)
        } else {
            (sb, sa)
        };
        let trimmed: &[usize] = {
            let lead = small
                .iter()
                .take_while(|&&d| d == 1)
                .count()
                .min(small.len() - 1);
            &small[lead..]
        };
        let ok = big.len() >= trimmed.len() && big[big.len() - trimmed.len()..] == *trimmed;
        let numel_small: usize = small.iter().product();
        if ok || numel_small == 1 {
            Ok(big.to_vec())
        } else {
            Err(Error::dim(
                op,
                format!("shapes {sa:?} and {sb:?} are not broadcast-compatible"),
            ))
        }
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = Op::<T>::Binary { kind, a, b }.name();
        let shape = self.broadcast_shape(name, a, b)?;
        let numel: usize = shape.iter().product();
        let (va, vb) = (self.value(a), self.value(b));
        let (na, nb) = (va.len(), vb.len());
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<T> = if na == numel && nb == numel {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..numel).map(|i| f(va[i % na], vb[i % nb])).collect()
        };
        self.push(shape, out, Op::Binary { kind, a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| unary_forward(kind, v))
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::Unary { kind, x }, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, x)
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x)
    }

    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::dim(
                "elementwise",
                format!("{op:?} takes {arity} arguments, got {}", args.len()),
            ));
        }
        match op {
            Elementwise::Gelu => self.gelu(args[0]),
            Elementwise::Softplus => self.softplus(args[0]),
            Elementwise::Exp => self.exp(args[0]),
            Elementwise::Neg => self.neg(args[0]),
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
        }
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v + c).collect();
        self.push(self.shape(x).to_vec(), out, Op::Shift { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::lit(v.len() as f64);
        self.push(vec![1], vec![s], Op::Mean { x }, &[x])
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::dim(
                "layernorm",
                format!(
                    "input {shape:?} with gain {:?} and bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let (xv, g, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / c;
        let inv_c = T::lit(1.0 / c as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                y[r * c + j] = xh * g[j] + bv[j];
            }
        }
        self.push(
            shape,
            y,
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

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::dim("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let (batch, c1, c2, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for bi in 0..batch {
            out.extend_from_slice(&va[bi * c1 * plane..(bi + 1) * c1 * plane]);
            out.extend_from_slice(&vb[bi * c2 * plane..(bi + 1) * c2 * plane]);
        }
        self.push(
            vec![batch, c1 + c2, sa[2], sa[3]],
            out,
            Op::Concat {
                a,
                b,
                batch,
                c1,
                c2,
                plane,
            },
            &[a, b],
        )
    }

    pub fn split_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || len == 0 || start + len > s[1] {
            return Err(Error::dim(
                "split_channels",
                format!("channels [{start}, {}) of {s:?}", start + len),
            ));
        }
        let (batch, c_total, plane) = (s[0], s[1], s[2] * s[3]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(batch * len * plane);
        for bi in 0..batch {
            out.extend_from_slice(
                &v[(bi * c_total + start) * plane..(bi * c_total + start + len) * plane],
            );
        }
        self.push(
            vec![batch, len, s[2], s[3]],
            out,
            Op::Split {
                x,
                start,
                batch,
                c_total,
                plane,
            },
            &[x],
        )
    }

    /// `out[b, k, c] = x[b, L-1-k, c]`.
    pub fn reverse_sequence(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(
                "reverse_sequence",
                format!("expected [batch, len, channels], got {s:?}"),
            ));
        }
        let out = reverse_rows(self.value(x), s[0], s[1], s[2]);
        self.push(
            s.clone(),
            out,
            Op::Reverse {
                x,
                batch: s[0],
                len: s[1],
                ch: s[2],
            },
            &[x],
        )
    }

    /// `[B, C, H, W] -> [B, H*W, C]`, sequence index `i*W + j`.
    pub fn raster_flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(
                "raster_flatten",
                format!("expected [B, C, H, W], got {s:?}"),
            ));
        }
        let (batch, ch, plane) = (s[0], s[1], s[2] * s[3]);
        let out = transpose_inner(self.value(x), batch, ch, plane);
        self.push(
            vec![batch, plane, ch],
            out,
            Op::Flatten {
                x,
                batch,
                ch,
                plane,
            },
            &[x],
        )
    }

    /// Inverse of [`Tape::raster_flatten`].
    pub fn raster_unflatten(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != h * w {
            return Err(Error::dim(
                "raster_unflatten",
                format!("sequence {s:?} cannot fill a {h}x{w} map"),
            ));
        }
        let (batch, plane, ch) = (s[0], s[1], s[2]);
        let out = transpose_inner(self.value(x), batch, plane, ch);
        self.push(
            vec![batch, ch, h, w],
            out,
            Op::Unflatten {
                x,
                batch,
                ch,
                plane,
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let v = self.value(x).to_vec();
        self.push(shape.to_vec(), v, Op::Reshape { x }, &[x])
    }

    /// Mirror padding (edge pixel not repeated) of the two spatial axes.
    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || pad >= s[2] || pad >= s[3] {
            return Err(Error::dim("reflect_pad", format!("pad {pad} on {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let v = self.value(x);
        let mut out = vec![T::zero(); planes * hp * wp];
        for p in 0..planes {
            for i in 0..hp {
                let si = reflect(i, pad, h);
                for j in 0..wp {
                    out[(p * hp + i) * wp + j] = v[(p * h + si) * w + reflect(j, pad, w)];
                }
            }
        }
        self.push(
            vec![s[0], s[1], hp, wp],
            out,
            Op::ReflectPad {
                x,
                planes,
                h,
                w,
                pad,
            },
            &[x],
        )
    }

    /// Selective scan over `u: [B, L, C]` with per-step `delta: [B, L, C]`,
    /// `b`, `c`: `[B, L, N]`, skip `d: [C]` and fixed diagonal `a: [C, N]`.
    /// The backward rule always runs the sequential adjoint.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        b: Var,
        c: Var,
        d: Var,
        a: &[T],
        mode: ScanMode,
    ) -> Result<Var> {
        let us = self.shape(u).to_vec();
        if us.len() != 3 {
            return Err(Error::dim(
                "selective_scan",
                format!("u must be [B, L, C], got {us:?}"),
            ));
        }
        let (batch, len, ch) = (us[0], us[1], us[2]);
        let bs = self.shape(b).to_vec();
        if bs.len() != 3
            || bs[..2] != us[..2]
            || self.shape(c) != bs.as_slice()
            || self.shape(delta) != us.as_slice()
        {
            return Err(Error::dim(
                "selective_scan",
                format!(
                    "u {us:?}, delta {:?}, B {bs:?}, C {:?}",
                    self.shape(delta),
                    self.shape(c)
                ),
            ));
        }
        let n = bs[2];
        let input = SelectiveScanInput {
            batch,
            len,
            channels: ch,
            state: n,
            u: self.value(u),
            delta: self.value(delta),
            b: self.value(b),
            c: self.value(c),
            a,
            d: self.value(d),
        };
        let out = selective_scan(&input, mode)?;
        let record = ScanRecord {
            u,
            delta,
            b,
            c,
            d,
            a: a.to_vec(),
            states: out.states,
            batch,
            len,
            ch,
            n,
        };
        self.push(
            us,
            out.y,
            Op::SelectiveScan(Box::new(record)),
            &[u, delta, b, c, d],
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a single-element `loss`. May run once per graph
    /// unless [`Tape::reset`] is called.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this tape; call reset() first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let corrupt = self.corrupt_backward.then(|| T::lit(CORRUPTION_FACTOR));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let started = self.profile.is_some().then(std::time::Instant::now);
            let pieces = self.backward_node(i, &g);
            if let (Some(t0), Some(p)) = (started, &mut self.profile) {
                p.entries
                    .entry(self.nodes[i].op.name())
                    .or_default()
                    .backward_secs += t0.elapsed().as_secs_f64();
            }
            for (v, mut gv) in pieces {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if let Some(f) = corrupt {
                    gv.iter_mut().for_each(|e| *e *= f);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b, fin, fout } => {
                let (fin, fout) = (*fin, *fout);
                let m = g.len() / fout;
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); m * fin];
                    gemm(
                        m,
                        fout,
                        fin,
                        T::one(),
                        g,
                        Strides::row_major(fout),
                        self.value(*w),
                        Strides::transposed(fout),
                        T::zero(),
                        &mut gx,
                        Strides::row_major(fin),
                    );
                    out.push((*x, gx));
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); fin * fout];
                    gemm(
                        fin,
                        m,
                        fout,
                        T::one(),
                        self.value(*x),
                        Strides::transposed(fin),
                        g,
                        Strides::row_major(fout),
                        T::zero(),
                        &mut gw,
                        Strides::row_major(fout),
                    );
                    out.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut gb = vec![T::zero(); fout];
                    for row in g.chunks(fout) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    out.push((b, gb));
                }
            }
            Op::Conv { x, w, b, geom } => {
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); geom.in_len()];
                    conv_backward_data(g, self.value(*w), geom, &mut gx);
                    out.push((*x, gx));
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); geom.weight_len()];
                    conv_backward_weight(self.value(*x), g, geom, &mut gw);
                    out.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut gb = vec![T::zero(); geom.c_out];
                    bias_grad(g, geom.batch, geom.c_out, geom.h_out * geom.w_out, &mut gb);
                    out.push((b, gb));
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); geom.out_len()];
                    conv_forward(g, self.value(*w), None, geom, &mut gx);
                    out.push((*x, gx));
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); geom.weight_len()];
                    conv_backward_weight(g, self.value(*x), geom, &mut gw);
                    out.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut gb = vec![T::zero(); geom.c_in];
                    bias_grad(g, geom.batch, geom.c_in, geom.h * geom.w, &mut gb);
                    out.push((b, gb));
                }
            }
            Op::Binary { kind, a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (na, nb) = (va.len(), vb.len());
                if na == g.len()
                    && nb == g.len()
                    && matches!(kind, BinaryKind::Add | BinaryKind::Sub)
                {
                    if self.wants(*a) {
                        out.push((*a, g.to_vec()));
                    }
                    if self.wants(*b) {
                        let gb = match kind {
                            BinaryKind::Add => g.to_vec(),
                            _ => g.iter().map(|&v| -v).collect(),
                        };
                        out.push((*b, gb));
                    }
                    return out;
                }
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); na];
                    for (idx, &gi) in g.iter().enumerate() {
                        let y = vb[idx % nb];
                        ga[idx % na] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gi,
                            BinaryKind::Mul => gi * y,
                            BinaryKind::Div => gi / y,
                        };
                    }
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); nb];
                    for (idx, &gi) in g.iter().enumerate() {
                        let (x, y) = (va[idx % na], vb[idx % nb]);
                        gb[idx % nb] += match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * x,
                            BinaryKind::Div => -gi * x / (y * y),
                        };
                    }
                    out.push((*b, gb));
                }
            }
            Op::Unary { kind, x } => {
                let (xv, yv) = (self.value(*x), &node.value);
                let gx = g
                    .iter()
                    .zip(xv)
                    .zip(yv)
                    .map(|((&gi, &xi), &yi)| gi * unary_derivative(*kind, xi, yi))
                    .collect();
                out.push((*x, gx));
            }
            Op::Scale { x, factor } => out.push((*x, g.iter().map(|&v| v * *factor).collect())),
            Op::Shift { x } | Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::Sum { x } => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Mean { x } => {
                let n = self.value(*x).len();
                out.push((*x, vec![g[0] / T::lit(n as f64); n]));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = self.value(*gain).len();
                let gv = self.value(*gain);
                if self.wants(*x) {
                    let inv_c = T::lit(1.0 / c as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gy = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let (mut s1, mut s2) = (T::zero(), T::zero());
                        for j in 0..c {
                            let gxh = gy[j] * gv[j];
                            s1 += gxh;
                            s2 += gxh * xh[j];
                        }
                        let (m1, m2) = (s1 * inv_c, s2 * inv_c);
                        for j in 0..c {
                            gx[r * c + j] = rs * (gy[j] * gv[j] - m1 - xh[j] * m2);
                        }
                    }
                    out.push((*x, gx));
                }
                if self.wants(*gain) || self.wants(*bias) {
                    let mut gg = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    for (row, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += row[j] * xh[j];
                            gb[j] += row[j];
                        }
                    }
                    out.push((*gain, gg));
                    out.push((*bias, gb));
                }
            }
            Op::Concat {
                a,
                b,
                batch,
                c1,
                c2,
                plane,
            } => {
                let (mut ga, mut gb) = (
                    Vec::with_capacity(batch * c1 * plane),
                    Vec::with_capacity(batch * c2 * plane),
                );
                let stride = (c1 + c2) * plane;
                for bi in 0..*batch {
                    let blk = &g[bi * stride..(bi + 1) * stride];
                    ga.extend_from_slice(&blk[..c1 * plane]);
                    gb.extend_from_slice(&blk[c1 * plane..]);
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Split {
                x,
                start,
                batch,
                c_total,
                plane,
            } => {
                let len = g.len() / (batch * plane);
                let mut gx = vec![T::zero(); batch * c_total * plane];
                for bi in 0..*batch {
                    gx[(bi * c_total + start) * plane..(bi * c_total + start + len) * plane]
                        .copy_from_slice(&g[bi * len * plane..(bi + 1) * len * plane]);
                }
                out.push((*x, gx));
            }
            Op::Reverse { x, batch, len, ch } => out.push((*x, reverse_rows(g, *batch, *len, *ch))),
            Op::Flatten {
                x,
                batch,
                ch,
                plane,
            } => out.push((*x, transpose_inner(g, *batch, *plane, *ch))),
            Op::Unflatten {
                x,
                batch,
                ch,
                plane,
            } => out.push((*x, transpose_inner(g, *batch, *ch, *plane))),
            Op::ReflectPad {
                x,
                planes,
                h,
                w,
                pad,
            } => {
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                let mut gx = vec![T::zero(); planes * h * w];
                for p in 0..*planes {
                    for i in 0..hp {
                        let si = reflect(i, *pad, *h);
                        for j in 0..wp {
                            gx[(p * h + si) * w + reflect(j, *pad, *w)] += g[(p * hp + i) * wp + j];
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::SelectiveScan(r) => {
                let input = SelectiveScanInput {
                    batch: r.batch,
                    len: r.len,
                    channels: r.ch,
                    state: r.n,
                    u: self.value(r.u),
                    delta: self.value(r.delta),
                    b: self.value(r.b),
                    c: self.value(r.c),
                    a: &r.a,
                    d: self.value(r.d),
                };
                let gr = selective_scan_backward(&input, &r.states, g);
                out.push((r.u, gr.u));
                out.push((r.delta, gr.delta));
                out.push((r.b, gr.b));
                out.push((r.c, gr.c));
                out.push((r.d, gr.d));
            }
        }
        out
    }
}

#[inline]
fn reflect(i: usize, pad: usize, n: usize) -> usize {
    let x = i as isize - pad as isize;
    let n = n as isize;
    let r = if x < 0 {
        -x
    } else if x >= n {
        2 * (n - 1) - x
    } else {
        x
    };
    r as usize
}

fn reverse_rows<T: Real>(v: &[T], batch: usize, len: usize, ch: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(v.len());
    for b in 0..batch {
        for k in (0..len).rev() {
            out.extend_from_slice(&v[(b * len + k) * ch..(b * len + k + 1) * ch]);
        }
    }
    out
}

/// Per batch item, transposes a `rows x cols` block.
fn transpose_inner<T: Real>(v: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    let blk = rows * cols;
    for b in 0..batch {
        let (src, dst) = (&v[b * blk..(b + 1) * blk], &mut out[b * blk..(b + 1) * blk]);
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

const SOFTPLUS_LINEAR_ABOVE: f64 = 20.0;

pub fn gelu<T: Real>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(SOFTPLUS_LINEAR_ABOVE) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn unary_forward<T: Real>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Exp => x.exp(),
        UnaryKind::Gelu => gelu(x),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Square => x * x,
    }
}

fn unary_derivative<T: Real>(kind: UnaryKind, x: T, y: T) -> T {
    match kind {
        UnaryKind::Neg => -T::one(),
        UnaryKind::Exp => y,
        UnaryKind::Gelu => {
            let cdf =
                T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
            let pdf = (-T::lit(0.5) * x * x).exp()
                * T::lit(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
            cdf + x * pdf
        }
        UnaryKind::Softplus => {
            if x > T::lit(SOFTPLUS_LINEAR_ABOVE) {
                T::one()
            } else {
                sigmoid(x)
            }
        }
        UnaryKind::Sigmoid => y * (T::one() - y),
        UnaryKind::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Square => T::lit(2.0) * x,
    }
}
