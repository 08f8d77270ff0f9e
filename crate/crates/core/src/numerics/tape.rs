//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value. Nodes only
//! reference earlier nodes, so the tape is always in topological order and
//! `backward` is a single reverse sweep.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    /// Inner products of every trailing-axis vector with each row of a fixed matrix.
    Relation {
        features: Var,
        table: Arc<Tensor>,
    },
    Softmax(Var),
    MeanNll {
        probs: Var,
        labels: Arc<[u16]>,
        ignore: Option<u16>,
        count: usize,
    },
    MeanNegLogMass {
        probs: Var,
        classes: Arc<[usize]>,
        floor: f64,
    },
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
}

/// Resolved layout of a convolution: batch, height, width, in/out channels, kernel size.
#[derive(Clone, Copy, Debug)]
struct ConvDims {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        Var(self.values.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Records a constant. No gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Records a named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.push(value, Op::Param(name.to_string()), true)
    }

    fn conv_dims(&self, input: Var, kernel: Var, bias: Var) -> Result<ConvDims> {
        let x = self.value(input).shape();
        let kshape = self.value(kernel).shape();
        let bshape = self.value(bias).shape();
        let (batch, h, w, cin) = match *x {
            [h, w, c] => (1, h, w, c),
            [b, h, w, c] => (b, h, w, c),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d input must be HxWxC or BxHxWxC, got {x:?}"
                )))
            }
        };
        let [k, k2, kin, cout] = *kshape else {
            return Err(Error::shape(format!(
                "conv2d kernel must be k x k x Cin x Cout, got {kshape:?}"
            )));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d kernel must be square with odd size, got {k}x{k2}"
            )));
        }
        if kin != cin {
            return Err(Error::shape(format!(
                "conv2d input has {cin} channels but kernel expects {kin}"
            )));
        }
        if bshape != [cout] {
            return Err(Error::shape(format!(
                "conv2d bias must have shape [{cout}], got {bshape:?}"
            )));
        }
        Ok(ConvDims {
            batch,
            h,
            w,
            cin,
            cout,
            k,
        })
    }

    /// Same-padded, stride-1 convolution over an `HxWxC` or `BxHxWxC` input.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let dims = self.conv_dims(input, kernel, bias)?;
        let mut out_shape = self.value(input).shape().to_vec();
        *out_shape.last_mut().unwrap() = dims.cout;
        let mut out = Tensor::zeros(&out_shape);
        conv_forward(
            dims,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            out.data_mut(),
        );
        let rg = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.needs(x);
        self.push(out, Op::Relu(x), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.needs(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.needs(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// `out[.., y] = <features[.., :], table[y, :]>` for a constant `N x d` table.
    pub fn relation(&mut self, features: Var, table: Arc<Tensor>) -> Result<Var> {
        let f = self.value(features);
        let [n, d] = *table.shape() else {
            return Err(Error::shape(format!(
                "relation table must be N x d, got {:?}",
                table.shape()
            )));
        };
        if f.last_dim() != d || f.rank() == 0 {
            return Err(Error::shape(format!(
                "feature dimension {} does not match embedding dimension {d}",
                f.last_dim()
            )));
        }
        let mut shape = f.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&shape);
        let t = table.data();
        for (fx, ox) in f
            .data()
            .chunks_exact(d)
            .zip(out.data_mut().chunks_exact_mut(n))
        {
            for (y, o) in ox.iter_mut().enumerate() {
                let row = &t[y * d..(y + 1) * d];
                *o = fx.iter().zip(row).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.needs(features);
        Ok(self.push(out, Op::Relation { features, table }, rg))
    }

    /// Max-stabilized softmax over the trailing axis.
    pub fn softmax(&mut self, logits: Var) -> Var {
        let x = self.value(logits);
        let n = x.last_dim();
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.needs(logits);
        self.push(out, Op::Softmax(logits), rg)
    }

    /// Mean of `-ln probs[p, labels[p]]` over positions whose label is not `ignore`.
    ///
    /// Returns 0 when every position is ignored.
    pub fn mean_nll(&mut self, probs: Var, labels: &[u16], ignore: Option<u16>) -> Result<Var> {
        let p = self.value(probs);
        let n = p.last_dim();
        if p.len() / n != labels.len() {
            return Err(Error::shape(format!(
                "{} label positions for {} probability rows",
                labels.len(),
                p.len() / n
            )));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (row, &l) in p.data().chunks_exact(n).zip(labels) {
            if Some(l) == ignore {
                continue;
            }
            let l = l as usize;
            if l >= n {
                return Err(Error::invalid(format!(
                    "label {l} out of range for {n} classes"
                )));
            }
            total -= row[l].max(f64::MIN_POSITIVE).ln();
            count += 1;
        }
        let value = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let rg = self.needs(probs);
        Ok(self.push(
            Tensor::scalar(value),
            Op::MeanNll {
                probs,
                labels: labels.into(),
                ignore,
                count,
            },
            rg,
        ))
    }

    /// Mean over positions of `-ln max(sum_{k in classes} probs[p, k], floor)`.
    pub fn mean_neg_log_mass(&mut self, probs: Var, classes: &[usize], floor: f64) -> Result<Var> {
        let p = self.value(probs);
        let n = p.last_dim();
        if let Some(&bad) = classes.iter().find(|&&k| k >= n) {
            return Err(Error::invalid(format!(
                "class {bad} out of range for {n} classes"
            )));
        }
        let rows = p.len() / n;
        let total: f64 = p
            .data()
            .chunks_exact(n)
            .map(|row| -classes.iter().map(|&k| row[k]).sum::<f64>().max(floor).ln())
            .sum();
        let rg = self.needs(probs);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::MeanNegLogMass {
                probs,
                classes: classes.into(),
                floor,
            },
            rg,
        ))
    }

    /// Gradients of a scalar `loss` with respect to every parameter on the tape.
    ///
    /// Parameters with no path to `loss` receive zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.requires_grad[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.ops[idx] {
                Op::Input => {}
                Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                } => {
                    let dims = self.conv_dims(*input, *kernel, *bias)?;
                    if self.needs(*bias) {
                        let mut gb = Tensor::zeros(&[dims.cout]);
                        for row in g.data().chunks_exact(dims.cout) {
                            for (a, b) in gb.data_mut().iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                        accumulate(&mut grads, *bias, gb);
                    }
                    if self.needs(*kernel) {
                        let mut gk = Tensor::zeros(self.value(*kernel).shape());
                        conv_backward_kernel(
                            dims,
                            self.value(*input).data(),
                            g.data(),
                            gk.data_mut(),
                        );
                        accumulate(&mut grads, *kernel, gk);
                    }
                    if self.needs(*input) {
                        let mut gx = Tensor::zeros(self.value(*input).shape());
                        conv_backward_input(
                            dims,
                            self.value(*kernel).data(),
                            g.data(),
                            gx.data_mut(),
                        );
                        accumulate(&mut grads, *input, gx);
                    }
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let mut ga = g.clone();
                        for (v, o) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                            *v *= o;
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = g;
                        for (v, o) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                            *v *= o;
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, factor) => {
                    let f = *factor;
                    accumulate(&mut grads, *a, g.map(|v| v * f));
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(self.value(*a).shape(), gv));
                }
                Op::Relation { features, table } => {
                    let [n, d] = *table.shape() else {
                        unreachable!("validated in forward")
                    };
                    let t = table.data();
                    let mut gf = Tensor::zeros(self.value(*features).shape());
                    for (gx, gl) in gf
                        .data_mut()
                        .chunks_exact_mut(d)
                        .zip(g.data().chunks_exact(n))
                    {
                        for (y, &gy) in gl.iter().enumerate() {
                            let row = &t[y * d..(y + 1) * d];
                            for (a, b) in gx.iter_mut().zip(row) {
                                *a += gy * b;
                            }
                        }
                    }
                    accumulate(&mut grads, *features, gf);
                }
                Op::Softmax(x) => {
                    let p = &self.values[idx];
                    let n = p.last_dim();
                    let mut gx = g;
                    for (gr, pr) in gx
                        .data_mut()
                        .chunks_exact_mut(n)
                        .zip(p.data().chunks_exact(n))
                    {
                        let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for (a, &b) in gr.iter_mut().zip(pr) {
                            *a = b * (*a - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanNll {
                    probs,
                    labels,
                    ignore,
                    count,
                } => {
                    let p = self.value(*probs);
                    let mut gp = Tensor::zeros(p.shape());
                    if *count > 0 {
                        let n = p.last_dim();
                        let scale = g.data()[0] / *count as f64;
                        for ((gr, pr), &l) in gp
                            .data_mut()
                            .chunks_exact_mut(n)
                            .zip(p.data().chunks_exact(n))
                            .zip(labels.iter())
                        {
                            if Some(l) == *ignore {
                                continue;
                            }
                            let l = l as usize;
                            if pr[l] >= f64::MIN_POSITIVE {
                                gr[l] = -scale / pr[l];
                            }
                        }
                    }
                    accumulate(&mut grads, *probs, gp);
                }
                Op::MeanNegLogMass {
                    probs,
                    classes,
                    floor,
                } => {
                    let p = self.value(*probs);
                    let n = p.last_dim();
                    let rows = p.len() / n;
                    let scale = g.data()[0] / rows as f64;
                    let mut gp = Tensor::zeros(p.shape());
                    for (gr, pr) in gp
                        .data_mut()
                        .chunks_exact_mut(n)
                        .zip(p.data().chunks_exact(n))
                    {
                        let mass: f64 = classes.iter().map(|&k| pr[k]).sum();
                        if mass > *floor {
                            for &k in classes.iter() {
                                gr[k] = -scale / mass;
                            }
                        }
                    }
                    accumulate(&mut grads, *probs, gp);
                }
            }
        }

        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (idx, op) in self.ops.iter().enumerate() {
            if let Op::Param(name) = op {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.values[idx].shape()));
                match out.get_mut(name) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(Gradients::from_map(out))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

// Convolutions run as im2col + GEMM, one image at a time.
// Row `px` of the column matrix holds the k*k*cin inputs seen by output pixel
// `px` (zeros outside the image), in the same order as the kernel's rows.

fn im2col(dims: ConvDims, x: &[f64], col: &mut [f64]) {
    let ConvDims { h, w, k, cin, .. } = dims;
    let pad = (k / 2) as isize;
    let row_len = k * k * cin;
    for i in 0..h {
        for j in 0..w {
            let row = &mut col[(i * w + j) * row_len..(i * w + j + 1) * row_len];
            for a in 0..k {
                let ii = i as isize + a as isize - pad;
                for b in 0..k {
                    let jj = j as isize + b as isize - pad;
                    let dst = &mut row[(a * k + b) * cin..(a * k + b + 1) * cin];
                    if ii < 0 || ii >= h as isize || jj < 0 || jj >= w as isize {
                        dst.fill(0.0);
                    } else {
                        let src = (ii as usize * w + jj as usize) * cin;
                        dst.copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
}

fn col2im_add(dims: ConvDims, col: &[f64], gx: &mut [f64]) {
    let ConvDims { h, w, k, cin, .. } = dims;
    let pad = (k / 2) as isize;
    let row_len = k * k * cin;
    for i in 0..h {
        for j in 0..w {
            let row = &col[(i * w + j) * row_len..(i * w + j + 1) * row_len];
            for a in 0..k {
                let ii = i as isize + a as isize - pad;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for b in 0..k {
                    let jj = j as isize + b as isize - pad;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let dst = (ii as usize * w + jj as usize) * cin;
                    let src = &row[(a * k + b) * cin..(a * k + b + 1) * cin];
                    for (d, s) in gx[dst..dst + cin].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `c = beta * c + a * b` for row-major `a: m x k`, `b: k x n`, `c: m x n`,
/// where `a` may be read transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above address exactly the asserted extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Per-image views: input slice, output slice, and a reusable column buffer
/// (1x1 convolutions read the input directly).
fn with_columns(dims: ConvDims, x: &[f64], mut f: impl FnMut(usize, &[f64])) {
    let ConvDims {
        batch,
        h,
        w,
        cin,
        k,
        ..
    } = dims;
    let px = h * w;
    let mut col = if k == 1 {
        Vec::new()
    } else {
        vec![0.0; px * k * k * cin]
    };
    for n in 0..batch {
        let xn = &x[n * px * cin..(n + 1) * px * cin];
        if k == 1 {
            f(n, xn);
        } else {
            im2col(dims, xn, &mut col);
            f(n, &col);
        }
    }
}

fn conv_forward(dims: ConvDims, x: &[f64], kernel: &[f64], bias: &[f64], out: &mut [f64]) {
    let ConvDims {
        h, w, cin, cout, k, ..
    } = dims;
    let px = h * w;
    for o in out.chunks_exact_mut(cout) {
        o.copy_from_slice(bias);
    }
    with_columns(dims, x, |n, col| {
        let on = &mut out[n * px * cout..(n + 1) * px * cout];
        gemm(px, k * k * cin, cout, col, false, kernel, false, 1.0, on);
    });
}

fn conv_backward_kernel(dims: ConvDims, x: &[f64], g: &[f64], gk: &mut [f64]) {
    let ConvDims {
        h, w, cin, cout, k, ..
    } = dims;
    let px = h * w;
    with_columns(dims, x, |n, col| {
        let gn = &g[n * px * cout..(n + 1) * px * cout];
        gemm(k * k * cin, px, cout, col, true, gn, false, 1.0, gk);
    });
}

fn conv_backward_input(dims: ConvDims, kernel: &[f64], g: &[f64], gx: &mut [f64]) {
    let ConvDims {
        batch,
        h,
        w,
        cin,
        cout,
        k,
    } = dims;
    let px = h * w;
    let row_len = k * k * cin;
    let mut gcol = vec![0.0; px * row_len];
    for n in 0..batch {
        let gn = &g[n * px * cout..(n + 1) * px * cout];
        let gxn = &mut gx[n * px * cin..(n + 1) * px * cin];
        if k == 1 {
            gemm(px, cout, cin, gn, false, kernel, true, 1.0, gxn);
        } else {
            gemm(px, cout, row_len, gn, false, kernel, true, 0.0, &mut gcol);
            col2im_add(dims, &gcol, gxn);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_once(x: Tensor, k: Tensor, b: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.input(x);
        let k = tape.input(k);
        let b = tape.input(b);
        let y = tape.conv2d(x, k, b)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn conv_ones_counts_overlap() {
        let y = conv_once(
            Tensor::full(&[3, 3, 1], 1.0),
            Tensor::full(&[3, 3, 1, 1], 1.0),
            Tensor::zeros(&[1]),
        )
        .unwrap();
        let d = y.data();
        assert_eq!(d[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(d[corner], 4.0);
        }
        for edge in [1, 3, 5, 7] {
            assert_eq!(d[edge], 6.0);
        }
    }

    #[test]
    fn conv_zero_kernel_gives_zero() {
        let x = Tensor::from_fn(&[4, 5, 2], |i| i as f64 - 3.0);
        let y = conv_once(x, Tensor::zeros(&[3, 3, 2, 3]), Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.shape(), &[4, 5, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_degenerate_is_affine_scalar() {
        let y = conv_once(
            Tensor::full(&[1, 1, 1], 1.5),
            Tensor::full(&[1, 1, 1, 1], -2.0),
            Tensor::full(&[1], 0.25),
        )
        .unwrap();
        assert_eq!(y.data(), &[1.5 * -2.0 + 0.25]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let err = conv_once(
            Tensor::zeros(&[3, 3, 2]),
            Tensor::zeros(&[3, 3, 3, 1]),
            Tensor::zeros(&[1]),
        );
        assert!(matches!(err, Err(Error::Shape(_))));
        let even = conv_once(
            Tensor::zeros(&[3, 3, 1]),
            Tensor::zeros(&[2, 2, 1, 1]),
            Tensor::zeros(&[1]),
        );
        assert!(matches!(even, Err(Error::Shape(_))));
    }

    #[test]
    fn relu_forward_and_mask() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::full(&[4], -0.5));
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get("x").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut tape = Tape::new();
        let t = tape.param("theta", Tensor::scalar(3.0));
        let sq = tape.mul(t, t).unwrap();
        assert_eq!(tape.value(sq).item(), Some(9.0));
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get("theta").unwrap().item(), Some(6.0));
    }

    #[test]
    fn unrelated_parameter_gets_zero() {
        let mut tape = Tape::new();
        let a = tape.param("a", Tensor::scalar(2.0));
        let _b = tape.param("b", Tensor::full(&[2], 7.0));
        let l = tape.scale(a, 3.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get("a").unwrap().item(), Some(3.0));
        assert_eq!(g.get("b").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.param("a", Tensor::full(&[2], 1.0));
        let r = tape.relu(a);
        assert!(matches!(tape.backward(r), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2, 2], vec![2f64.ln(), 0.0, 5.0, 5.0]).unwrap());
        let p = tape.softmax(x);
        let d = tape.value(p).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn mean_nll_skips_ignored() {
        let mut tape = Tape::new();
        let p = tape.input(Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.1, 0.9]).unwrap());
        let l = tape.mean_nll(p, &[0, 9], Some(9)).unwrap();
        assert!((tape.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-15);
        let none = tape.mean_nll(p, &[9, 9], Some(9)).unwrap();
        assert_eq!(tape.value(none).item(), Some(0.0));
        assert!(tape.mean_nll(p, &[0, 2], None).is_err());
    }
}
