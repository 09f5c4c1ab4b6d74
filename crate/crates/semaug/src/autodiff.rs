//! Reverse-mode autodiff on a flat tape.
//!
//! Forward values are computed eagerly through the same kernels the plain
//! inference paths use, so a tape forward and a plain forward of the same
//! network agree bit-for-bit.

use crate::nn;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    /// a * x + b, elementwise with scalar constants (b only affects the
    /// forward value).
    Affine {
        x: Var,
        a: T,
    },
    /// fm [h,w,c] + per-channel vector [c], broadcast over positions.
    AddChannel {
        fm: Var,
        ch: Var,
        hw: usize,
        c: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        n: usize,
        din: usize,
        dout: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        h: usize,
        win: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        cout: usize,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    AvgPool2 {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
    },
    MeanRows {
        x: Var,
        n: usize,
        d: usize,
    },
    Reshape(Var),
    SumAll(Var),
    /// Sum of absolute values; subgradient at zero is zero.
    AbsSum(Var),
    CosineSim(Var, Var),
    SoftmaxVec(Var),
    /// Mean over rows of -log softmax(logits)[label].
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        n: usize,
        k: usize,
    },
    /// Weighted binary cross-entropy with logits, normalized by sum of weights.
    BceLogits {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    },
    /// Smooth-L1 against a constant target, summed over columns, weighted and
    /// normalized over rows.
    SmoothL1 {
        pred: Var,
        target: Vec<T>,
        row_weights: Vec<T>,
        cols: usize,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
        d: usize,
    },
    ConcatRows {
        parts: Vec<(Var, usize)>,
        d: usize,
    },
    RowNormalize {
        x: Var,
        n: usize,
        d: usize,
    },
    /// Bilinear ROI-Align with one sample per output bin; rect in feature-map
    /// coordinates [x0, y0, x1, y1].
    RoiAlign {
        fm: Var,
        rect: [f64; 4],
        out_size: usize,
        h: usize,
        w: usize,
        c: usize,
    },
    AddN(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Param, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = Tensor::from_vec(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )
        .unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = Tensor::from_vec(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x - y)
                .collect(),
        )
        .unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = Tensor::from_vec(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )
        .unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MulElem(a, b), ng)
    }

    pub fn affine(&mut self, x: Var, a: T, b: T) -> Var {
        let v = self.value(x).map(|t| a * t + b);
        let ng = self.needs(x);
        self.push(v, Op::Affine { x, a }, ng)
    }

    pub fn scale(&mut self, x: Var, a: T) -> Var {
        self.affine(x, a, T::zero())
    }

    pub fn add_channel(&mut self, fm: Var, ch: Var) -> Var {
        let fm_shape = self.value(fm).shape().to_vec();
        debug_assert_eq!(fm_shape.len(), 3);
        let c = fm_shape[2];
        let hw = fm_shape[0] * fm_shape[1];
        debug_assert_eq!(self.value(ch).len(), c);
        let mut data = self.value(fm).data().to_vec();
        let chv = self.value(ch).data();
        for pos in 0..hw {
            for (d, &cv) in data[pos * c..(pos + 1) * c].iter_mut().zip(chv) {
                *d += cv;
            }
        }
        let v = Tensor::from_vec(&fm_shape, data).unwrap();
        let ng = self.needs(fm) || self.needs(ch);
        self.push(v, Op::AddChannel { fm, ch, hw, c }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
        let (k2, n) = (self.value(b).shape()[0], self.value(b).shape()[1]);
        debug_assert_eq!(k, k2);
        let mut out = Vec::new();
        nn::matmul(self.value(a).data(), m, k, self.value(b).data(), n, &mut out);
        let v = Tensor::from_vec(&[m, n], out).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Matmul { a, b, m, k, n }, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (rows, cols) = (self.value(x).shape()[0], self.value(x).shape()[1]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        let v = Tensor::from_vec(&[cols, rows], data).unwrap();
        let ng = self.needs(x);
        self.push(v, Op::Transpose { x, rows, cols }, ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, din) = (self.value(x).shape()[0], self.value(x).shape()[1]);
        let dout = self.value(w).shape()[0];
        debug_assert_eq!(self.value(w).shape()[1], din);
        let mut out = Vec::new();
        nn::linear(
            self.value(x).data(),
            n,
            din,
            self.value(w).data(),
            self.value(b).data(),
            dout,
            &mut out,
        );
        let v = Tensor::from_vec(&[n, dout], out).unwrap();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            v,
            Op::Linear {
                x,
                w,
                b,
                n,
                din,
                dout,
            },
            ng,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (h, win, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
        debug_assert_eq!(ws[2], cin);
        let mut out = Vec::new();
        let (ho, wo) = nn::conv2d(
            self.value(x).data(),
            h,
            win,
            cin,
            self.value(w).data(),
            self.value(b).data(),
            kh,
            kw,
            cout,
            stride,
            pad,
            &mut out,
        );
        let v = Tensor::from_vec(&[ho, wo, cout], out).unwrap();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                h,
                win,
                cin,
                kh,
                kw,
                cout,
                stride,
                pad,
            },
            ng,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .map(|t| if t > T::zero() { t } else { T::zero() });
        let ng = self.needs(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let mut out = Vec::new();
        let (ho, wo) = nn::avgpool2(self.value(x).data(), h, w, c, &mut out);
        let v = Tensor::from_vec(&[ho, wo, c], out).unwrap();
        let ng = self.needs(x);
        self.push(v, Op::AvgPool2 { x, h, w, c }, ng)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, d) = (self.value(x).shape()[0], self.value(x).shape()[1]);
        let src = self.value(x).data();
        let inv = T::of(1.0 / n as f64);
        let mut data = vec![T::zero(); d];
        for i in 0..n {
            for (acc, &v) in data.iter_mut().zip(&src[i * d..(i + 1) * d]) {
                *acc += v;
            }
        }
        for v in data.iter_mut() {
            *v *= inv;
        }
        let v = Tensor::from_vec(&[1, d], data).unwrap();
        let ng = self.needs(x);
        self.push(v, Op::MeanRows { x, n, d }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshaped(shape).expect("reshape");
        let ng = self.needs(x);
        self.push(v, Op::Reshape(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn abs_sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().map(|v| v.abs()).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::AbsSum(x), ng)
    }

    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let dot: T = av.iter().zip(bv).map(|(&x, &y)| x * y).sum();
        let na = av.iter().map(|&x| x * x).sum::<T>().sqrt();
        let nb = bv.iter().map(|&x| x * x).sum::<T>().sqrt();
        let s = dot / (na * nb);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(s), Op::CosineSim(a, b), ng)
    }

    pub fn softmax_vec(&mut self, x: Var) -> Var {
        let mut data = self.value(x).data().to_vec();
        nn::softmax_in_place(&mut data);
        let v = Tensor::from_vec(self.value(x).shape(), data).unwrap();
        let ng = self.needs(x);
        self.push(v, Op::SoftmaxVec(x), ng)
    }

    pub fn softmax_xent(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let (n, k) = (self.value(logits).shape()[0], self.value(logits).shape()[1]);
        debug_assert_eq!(labels.len(), n);
        let src = self.value(logits).data();
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &src[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(row[0], T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += lse - row[label];
        }
        let v = Tensor::scalar(total / T::of(n as f64));
        let ng = self.needs(logits);
        self.push(
            v,
            Op::SoftmaxXent {
                logits,
                labels,
                n,
                k,
            },
            ng,
        )
    }

    pub fn bce_logits(&mut self, logits: Var, targets: Vec<T>, weights: Vec<T>) -> Var {
        let src = self.value(logits).data();
        debug_assert_eq!(src.len(), targets.len());
        debug_assert_eq!(src.len(), weights.len());
        let wsum: T = weights.iter().copied().sum();
        let mut total = T::zero();
        if wsum > T::zero() {
            for ((&z, &t), &w) in src.iter().zip(&targets).zip(&weights) {
                let l = z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln();
                total += w * l;
            }
            total /= wsum;
        }
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(total),
            Op::BceLogits {
                logits,
                targets,
                weights,
            },
            ng,
        )
    }

    pub fn smooth_l1(&mut self, pred: Var, target: Vec<T>, row_weights: Vec<T>) -> Var {
        let (n, cols) = (self.value(pred).shape()[0], self.value(pred).shape()[1]);
        debug_assert_eq!(target.len(), n * cols);
        debug_assert_eq!(row_weights.len(), n);
        let src = self.value(pred).data();
        let wsum: T = row_weights.iter().copied().sum();
        let mut total = T::zero();
        if wsum > T::zero() {
            for i in 0..n {
                let mut row = T::zero();
                for j in 0..cols {
                    let e = src[i * cols + j] - target[i * cols + j];
                    let a = e.abs();
                    row += if a < T::one() {
                        T::of(0.5) * e * e
                    } else {
                        a - T::of(0.5)
                    };
                }
                total += row_weights[i] * row;
            }
            total /= wsum;
        }
        let ng = self.needs(pred);
        self.push(
            Tensor::scalar(total),
            Op::SmoothL1 {
                pred,
                target,
                row_weights,
                cols,
            },
            ng,
        )
    }

    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let d = self.value(table).shape()[1];
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let v = Tensor::from_vec(&[idx.len(), d], data).unwrap();
        let ng = self.needs(table);
        self.push(v, Op::GatherRows { table, idx, d }, ng)
    }

    /// Stack row blocks vertically; every part must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let d = self.value(parts[0]).shape()[1];
        let mut data = Vec::new();
        let mut meta = Vec::with_capacity(parts.len());
        let mut ng = false;
        for &p in parts {
            debug_assert_eq!(self.value(p).shape()[1], d);
            let rows = self.value(p).shape()[0];
            data.extend_from_slice(self.value(p).data());
            meta.push((p, rows));
            ng |= self.needs(p);
        }
        let n = data.len() / d;
        let v = Tensor::from_vec(&[n, d], data).unwrap();
        self.push(v, Op::ConcatRows { parts: meta, d }, ng)
    }

    pub fn row_normalize(&mut self, x: Var) -> Var {
        let (n, d) = (self.value(x).shape()[0], self.value(x).shape()[1]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            debug_assert!(norm > T::zero(), "row_normalize on zero row");
            for (o, &v) in data[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let v = Tensor::from_vec(&[n, d], data).unwrap();
        let ng = self.needs(x);
        self.push(v, Op::RowNormalize { x, n, d }, ng)
    }

    /// `rect` is [x0, y0, x1, y1] in feature-map coordinates.
    pub fn roi_align(&mut self, fm: Var, rect: [f64; 4], out_size: usize) -> Var {
        let fs = self.value(fm).shape().to_vec();
        let (h, w, c) = (fs[0], fs[1], fs[2]);
        let data = roi_align_forward(self.value(fm).data(), h, w, c, rect, out_size);
        let v = Tensor::from_vec(&[out_size, out_size, c], data).unwrap();
        let ng = self.needs(fm);
        self.push(
            v,
            Op::RoiAlign {
                fm,
                rect,
                out_size,
                h,
                w,
                c,
            },
            ng,
        )
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        debug_assert!(!xs.is_empty());
        let shape = self.value(xs[0]).shape().to_vec();
        let mut data = self.value(xs[0]).data().to_vec();
        let mut ng = self.needs(xs[0]);
        for &x in &xs[1..] {
            debug_assert_eq!(self.value(x).shape(), &shape[..]);
            for (a, &b) in data.iter_mut().zip(self.value(x).data()) {
                *a += b;
            }
            ng |= self.needs(x);
        }
        let v = Tensor::from_vec(&shape, data).unwrap();
        self.push(v, Op::AddN(xs.to_vec()), ng)
    }

    fn accumulate(&mut self, v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    /// Backpropagate from a scalar loss node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g);
            self.grads[idx] = Some(g);
        }
    }

    fn backward_node(&mut self, idx: usize, g: &Tensor<T>) {
        // Ops only reference earlier vars, so values may be read immutably
        // while grads of parents are written.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.map(|v| -v));
            }
            Op::MulElem(a, b) => {
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect(),
                )
                .unwrap();
                let db = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gv, &av)| gv * av)
                        .collect(),
                )
                .unwrap();
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::Affine { x, a } => {
                let a = *a;
                self.accumulate(*x, g.map(|v| v * a));
            }
            Op::AddChannel { fm, ch, hw, c } => {
                self.accumulate(*fm, g.clone());
                let mut dch = vec![T::zero(); *c];
                for pos in 0..*hw {
                    for (d, &gv) in dch.iter_mut().zip(&g.data()[pos * c..(pos + 1) * c]) {
                        *d += gv;
                    }
                }
                self.accumulate(*ch, Tensor::from_vec(&[*c], dch).unwrap());
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*a) {
                    // dA = g . B^T
                    let bv = self.value(*b).data();
                    let mut da = vec![T::zero(); m * k];
                    for i in 0..m {
                        for j in 0..k {
                            let mut s = T::zero();
                            for l in 0..n {
                                s += g.data()[i * n + l] * bv[j * n + l];
                            }
                            da[i * k + j] = s;
                        }
                    }
                    self.accumulate(*a, Tensor::from_vec(&[m, k], da).unwrap());
                }
                if self.needs(*b) {
                    // dB = A^T . g
                    let av = self.value(*a).data();
                    let mut db = vec![T::zero(); k * n];
                    for i in 0..m {
                        for j in 0..k {
                            let x = av[i * k + j];
                            let row = &g.data()[i * n..(i + 1) * n];
                            for (o, &gv) in db[j * n..(j + 1) * n].iter_mut().zip(row) {
                                *o += x * gv;
                            }
                        }
                    }
                    self.accumulate(*b, Tensor::from_vec(&[k, n], db).unwrap());
                }
            }
            Op::Transpose { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let mut dx = vec![T::zero(); rows * cols];
                for i in 0..cols {
                    for j in 0..rows {
                        dx[j * cols + i] = g.data()[i * rows + j];
                    }
                }
                self.accumulate(*x, Tensor::from_vec(&[rows, cols], dx).unwrap());
            }
            Op::Linear {
                x,
                w,
                b,
                n,
                din,
                dout,
            } => {
                let (n, din, dout) = (*n, *din, *dout);
                if self.needs(*x) {
                    let wv = self.value(*w).data();
                    let mut dx = vec![T::zero(); n * din];
                    for i in 0..n {
                        let grow = &g.data()[i * dout..(i + 1) * dout];
                        let xrow = &mut dx[i * din..(i + 1) * din];
                        for (o, &gv) in grow.iter().enumerate() {
                            let wrow = &wv[o * din..(o + 1) * din];
                            for (d, &wvv) in xrow.iter_mut().zip(wrow) {
                                *d += gv * wvv;
                            }
                        }
                    }
                    self.accumulate(*x, Tensor::from_vec(&[n, din], dx).unwrap());
                }
                if self.needs(*w) {
                    let xv = self.value(*x).data();
                    let mut dw = vec![T::zero(); dout * din];
                    for i in 0..n {
                        let grow = &g.data()[i * dout..(i + 1) * dout];
                        let xrow = &xv[i * din..(i + 1) * din];
                        for (o, &gv) in grow.iter().enumerate() {
                            for (d, &xvv) in dw[o * din..(o + 1) * din].iter_mut().zip(xrow) {
                                *d += gv * xvv;
                            }
                        }
                    }
                    self.accumulate(*w, Tensor::from_vec(&[dout, din], dw).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); dout];
                    for i in 0..n {
                        for (d, &gv) in db.iter_mut().zip(&g.data()[i * dout..(i + 1) * dout]) {
                            *d += gv;
                        }
                    }
                    self.accumulate(*b, Tensor::from_vec(&[dout], db).unwrap());
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                h,
                win,
                cin,
                kh,
                kw,
                cout,
                stride,
                pad,
            } => {
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); h * win * cin];
                    nn::conv2d_grad_input(
                        g.data(),
                        *h,
                        *win,
                        *cin,
                        self.value(*w).data(),
                        *kh,
                        *kw,
                        *cout,
                        *stride,
                        *pad,
                        &mut dx,
                    );
                    self.accumulate(*x, Tensor::from_vec(&[*h, *win, *cin], dx).unwrap());
                }
                if self.needs(*w) || self.needs(*b) {
                    let mut dw = vec![T::zero(); kh * kw * cin * cout];
                    let mut db = vec![T::zero(); *cout];
                    nn::conv2d_grad_params(
                        self.value(*x).data(),
                        g.data(),
                        *h,
                        *win,
                        *cin,
                        *kh,
                        *kw,
                        *cout,
                        *stride,
                        *pad,
                        &mut dw,
                        &mut db,
                    );
                    self.accumulate(
                        *w,
                        Tensor::from_vec(&[*kh, *kw, *cin, *cout], dw).unwrap(),
                    );
                    self.accumulate(*b, Tensor::from_vec(&[*cout], db).unwrap());
                }
            }
            Op::Relu(x) => {
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect(),
                )
                .unwrap();
                self.accumulate(*x, dx);
            }
            Op::AvgPool2 { x, h, w, c } => {
                let mut dx = vec![T::zero(); h * w * c];
                nn::avgpool2_grad(g.data(), *h, *w, *c, &mut dx);
                self.accumulate(*x, Tensor::from_vec(&[*h, *w, *c], dx).unwrap());
            }
            Op::MeanRows { x, n, d } => {
                let inv = T::of(1.0 / *n as f64);
                let mut dx = vec![T::zero(); n * d];
                for i in 0..*n {
                    for (o, &gv) in dx[i * d..(i + 1) * d].iter_mut().zip(g.data()) {
                        *o = gv * inv;
                    }
                }
                self.accumulate(*x, Tensor::from_vec(&[*n, *d], dx).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(*x, g.clone().reshaped(&shape).unwrap());
            }
            Op::SumAll(x) => {
                let gv = g.item();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(*x, Tensor::filled(&shape, gv));
            }
            Op::AbsSum(x) => {
                let gv = g.item();
                let dx = self.value(*x).map(|v| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(*x, dx);
            }
            Op::CosineSim(a, b) => {
                let gv = g.item();
                let shape = self.value(*a).shape().to_vec();
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                let dot: T = av.iter().zip(&bv).map(|(&x, &y)| x * y).sum();
                let na2: T = av.iter().map(|&x| x * x).sum();
                let nb2: T = bv.iter().map(|&x| x * x).sum();
                let (na, nb) = (na2.sqrt(), nb2.sqrt());
                let s = dot / (na * nb);
                if self.needs(*a) {
                    let da: Vec<T> = av
                        .iter()
                        .zip(&bv)
                        .map(|(&x, &y)| gv * (y / (na * nb) - s * x / na2))
                        .collect();
                    self.accumulate(*a, Tensor::from_vec(&shape, da).unwrap());
                }
                if self.needs(*b) {
                    let db: Vec<T> = av
                        .iter()
                        .zip(&bv)
                        .map(|(&x, &y)| gv * (x / (na * nb) - s * y / nb2))
                        .collect();
                    self.accumulate(*b, Tensor::from_vec(&shape, db).unwrap());
                }
            }
            Op::SoftmaxVec(x) => {
                let y = self.nodes[idx].value.data();
                let gdot: T = g.data().iter().zip(y).map(|(&gv, &yv)| gv * yv).sum();
                let dx: Vec<T> = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| yv * (gv - gdot))
                    .collect();
                self.accumulate(*x, Tensor::from_vec(self.value(*x).shape(), dx).unwrap());
            }
            Op::SoftmaxXent {
                logits,
                labels,
                n,
                k,
            } => {
                let gv = g.item() / T::of(*n as f64);
                let src = self.value(*logits).data();
                let mut dx = vec![T::zero(); n * k];
                for (i, &label) in labels.iter().enumerate() {
                    let row = &src[i * k..(i + 1) * k];
                    let mut probs = row.to_vec();
                    nn::softmax_in_place(&mut probs);
                    for (j, (o, &p)) in dx[i * k..(i + 1) * k].iter_mut().zip(&probs).enumerate()
                    {
                        let delta = if j == label { T::one() } else { T::zero() };
                        *o = gv * (p - delta);
                    }
                }
                self.accumulate(*logits, Tensor::from_vec(&[*n, *k], dx).unwrap());
            }
            Op::BceLogits {
                logits,
                targets,
                weights,
            } => {
                let wsum: T = weights.iter().copied().sum();
                if wsum > T::zero() {
                    let gv = g.item() / wsum;
                    let src = self.value(*logits).data();
                    let dx: Vec<T> = src
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&z, &t), &w)| {
                            let sig = T::one() / (T::one() + (-z).exp());
                            gv * w * (sig - t)
                        })
                        .collect();
                    self.accumulate(
                        *logits,
                        Tensor::from_vec(self.value(*logits).shape(), dx).unwrap(),
                    );
                }
            }
            Op::SmoothL1 {
                pred,
                target,
                row_weights,
                cols,
            } => {
                let wsum: T = row_weights.iter().copied().sum();
                if wsum > T::zero() {
                    let gv = g.item() / wsum;
                    let src = self.value(*pred).data();
                    let n = row_weights.len();
                    let mut dx = vec![T::zero(); n * cols];
                    for i in 0..n {
                        for j in 0..*cols {
                            let e = src[i * cols + j] - target[i * cols + j];
                            let d = if e.abs() < T::one() {
                                e
                            } else if e > T::zero() {
                                T::one()
                            } else {
                                -T::one()
                            };
                            dx[i * cols + j] = gv * row_weights[i] * d;
                        }
                    }
                    self.accumulate(*pred, Tensor::from_vec(&[n, *cols], dx).unwrap());
                }
            }
            Op::GatherRows { table, idx: ids, d } => {
                let shape = self.value(*table).shape().to_vec();
                let mut dt = vec![T::zero(); shape[0] * shape[1]];
                for (row, &i) in ids.iter().enumerate() {
                    for (o, &gv) in dt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g.data()[row * d..(row + 1) * d])
                    {
                        *o += gv;
                    }
                }
                self.accumulate(*table, Tensor::from_vec(&shape, dt).unwrap());
            }
            Op::ConcatRows { parts, d } => {
                let mut offset = 0;
                for &(p, rows) in parts {
                    if self.needs(p) {
                        let slice = &g.data()[offset * d..(offset + rows) * d];
                        self.accumulate(
                            p,
                            Tensor::from_vec(&[rows, *d], slice.to_vec()).unwrap(),
                        );
                    }
                    offset += rows;
                }
            }
            Op::RowNormalize { x, n, d } => {
                let src = self.value(*x).data();
                let mut dx = vec![T::zero(); n * d];
                for i in 0..*n {
                    let row = &src[i * d..(i + 1) * d];
                    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let grow = &g.data()[i * d..(i + 1) * d];
                    let ydotg: T = row
                        .iter()
                        .zip(grow)
                        .map(|(&xv, &gv)| xv * gv)
                        .sum::<T>()
                        / (norm * norm);
                    for ((o, &xv), &gv) in dx[i * d..(i + 1) * d].iter_mut().zip(row).zip(grow) {
                        *o = (gv - xv * ydotg) / norm;
                    }
                }
                self.accumulate(*x, Tensor::from_vec(&[*n, *d], dx).unwrap());
            }
            Op::RoiAlign {
                fm,
                rect,
                out_size,
                h,
                w,
                c,
            } => {
                let mut dfm = vec![T::zero(); h * w * c];
                roi_align_backward(g.data(), *h, *w, *c, *rect, *out_size, &mut dfm);
                self.accumulate(*fm, Tensor::from_vec(&[*h, *w, *c], dfm).unwrap());
            }
            Op::AddN(xs) => {
                for &x in xs {
                    self.accumulate(x, g.clone());
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

/// Shared ROI-Align sampling geometry: one bilinear sample per output bin,
/// taken at the bin center, with sample coordinates clamped to the map.
fn roi_sample_points(rect: [f64; 4], out_size: usize, h: usize, w: usize) -> Vec<(f64, f64)> {
    let [x0, y0, x1, y1] = rect;
    let bin_h = (y1 - y0) / out_size as f64;
    let bin_w = (x1 - x0) / out_size as f64;
    let mut pts = Vec::with_capacity(out_size * out_size);
    for i in 0..out_size {
        for j in 0..out_size {
            let y = (y0 + (i as f64 + 0.5) * bin_h).clamp(0.0, (h - 1) as f64);
            let x = (x0 + (j as f64 + 0.5) * bin_w).clamp(0.0, (w - 1) as f64);
            pts.push((y, x));
        }
    }
    pts
}

pub(crate) fn roi_align_forward<T: Scalar>(
    fm: &[T],
    h: usize,
    w: usize,
    c: usize,
    rect: [f64; 4],
    out_size: usize,
) -> Vec<T> {
    let pts = roi_sample_points(rect, out_size, h, w);
    let mut out = vec![T::zero(); out_size * out_size * c];
    for (bin, &(y, x)) in pts.iter().enumerate() {
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = T::of(y - y0 as f64);
        let dx = T::of(x - x0 as f64);
        let one = T::one();
        let w00 = (one - dy) * (one - dx);
        let w01 = (one - dy) * dx;
        let w10 = dy * (one - dx);
        let w11 = dy * dx;
        let b00 = (y0 * w + x0) * c;
        let b01 = (y0 * w + x1) * c;
        let b10 = (y1 * w + x0) * c;
        let b11 = (y1 * w + x1) * c;
        let orow = &mut out[bin * c..(bin + 1) * c];
        for ch in 0..c {
            orow[ch] = w00 * fm[b00 + ch] + w01 * fm[b01 + ch] + w10 * fm[b10 + ch]
                + w11 * fm[b11 + ch];
        }
    }
    out
}

fn roi_align_backward<T: Scalar>(
    grad_out: &[T],
    h: usize,
    w: usize,
    c: usize,
    rect: [f64; 4],
    out_size: usize,
    grad_fm: &mut [T],
) {
    let pts = roi_sample_points(rect, out_size, h, w);
    for (bin, &(y, x)) in pts.iter().enumerate() {
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = T::of(y - y0 as f64);
        let dx = T::of(x - x0 as f64);
        let one = T::one();
        let weights = [
            ((y0, x0), (one - dy) * (one - dx)),
            ((y0, x1), (one - dy) * dx),
            ((y1, x0), dy * (one - dx)),
            ((y1, x1), dy * dx),
        ];
        let grow = &grad_out[bin * c..(bin + 1) * c];
        for ((yy, xx), wv) in weights {
            let base = (yy * w + xx) * c;
            for ch in 0..c {
                grad_fm[base + ch] += wv * grow[ch];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite difference of a scalar function of a flat input.
    fn numerical_grad(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], eps: f64) -> Vec<f64> {
        let mut g = vec![0.0; x0.len()];
        let mut x = x0.to_vec();
        for i in 0..x0.len() {
            x[i] = x0[i] + eps;
            let fp = f(&x);
            x[i] = x0[i] - eps;
            let fm = f(&x);
            x[i] = x0[i];
            g[i] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = n.abs().max(a.abs()).max(1e-6);
            let rel = (a - n).abs() / denom;
            assert!(
                rel < tol,
                "{what}[{i}]: analytic {a} vs numeric {n} (rel {rel})"
            );
        }
    }

    fn seeded(vals: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, "gradcheck");
        (0..vals).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Run a finite-difference check of `build` (graph from one param tensor).
    fn gradcheck(
        shape: &[usize],
        x0: Vec<f64>,
        build: impl Fn(&mut Tape<f64>, Var) -> Var,
        what: &str,
    ) {
        let f = |x: &[f64]| {
            let mut tape = Tape::new();
            let v = tape.param(Tensor::from_vec(shape, x.to_vec()).unwrap());
            let loss = build(&mut tape, v);
            tape.value(loss).item()
        };
        let mut tape = Tape::new();
        let v = tape.param(Tensor::from_vec(shape, x0.clone()).unwrap());
        let loss = build(&mut tape, v);
        tape.backward(loss);
        let analytic = tape.grad(v).unwrap().data().to_vec();
        let numeric = numerical_grad(&f, &x0, 1e-5);
        assert_close(&analytic, &numeric, 1e-5, what);
    }

    #[test]
    fn grad_elementwise_and_reductions() {
        gradcheck(
            &[2, 3],
            seeded(6, 1),
            |t, v| {
                let s = t.scale(v, 1.7);
                let m = t.mul_elem(s, v);
                t.sum_all(m)
            },
            "mul_scale_sum",
        );
        let x0: Vec<f64> = seeded(6, 2).iter().map(|v| v + 2.0 * v.signum()).collect();
        gradcheck(&[6], x0, |t, v| t.abs_sum(v), "abs_sum");
    }

    #[test]
    fn grad_matmul_linear_transpose() {
        gradcheck(
            &[2, 3],
            seeded(6, 3),
            |t, v| {
                let w = t.leaf(Tensor::from_vec(&[3, 2], seeded(6, 4)).unwrap());
                let p = t.matmul(v, w);
                let pt = t.transpose(p);
                t.sum_all(pt)
            },
            "matmul",
        );
        gradcheck(
            &[3, 4],
            seeded(12, 5),
            |t, v| {
                let x = t.leaf(Tensor::from_vec(&[2, 4], seeded(8, 6)).unwrap());
                let b = t.leaf(Tensor::from_vec(&[3], seeded(3, 7)).unwrap());
                let y = t.linear(x, v, b);
                let r = t.relu(y);
                t.sum_all(r)
            },
            "linear_w",
        );
    }

    #[test]
    fn grad_conv_and_pool() {
        // input grad
        gradcheck(
            &[4, 4, 2],
            seeded(32, 8),
            |t, v| {
                let w = t.leaf(Tensor::from_vec(&[3, 3, 2, 3], seeded(54, 9)).unwrap());
                let b = t.leaf(Tensor::from_vec(&[3], seeded(3, 10)).unwrap());
                let y = t.conv2d(v, w, b, 2, 1);
                let r = t.relu(y);
                let p = t.avg_pool2(r);
                t.sum_all(p)
            },
            "conv_input",
        );
        // weight grad
        let x = Tensor::from_vec(&[4, 4, 2], seeded(32, 11)).unwrap();
        gradcheck(
            &[3, 3, 2, 3],
            seeded(54, 12),
            move |t, v| {
                let xv = t.leaf(x.clone());
                let b = t.leaf(Tensor::from_vec(&[3], seeded(3, 13)).unwrap());
                let y = t.conv2d(xv, v, b, 2, 1);
                t.sum_all(y)
            },
            "conv_weight",
        );
    }

    #[test]
    fn grad_softmax_losses() {
        gradcheck(
            &[2, 4],
            seeded(8, 14),
            |t, v| t.softmax_xent(v, vec![1, 3]),
            "softmax_xent",
        );
        gradcheck(
            &[5],
            seeded(5, 15),
            |t, v| {
                t.bce_logits(
                    v,
                    vec![1.0, 0.0, 1.0, 0.0, 1.0],
                    vec![1.0, 1.0, 0.0, 1.0, 1.0],
                )
            },
            "bce_logits",
        );
        gradcheck(
            &[6],
            seeded(6, 16),
            |t, v| {
                let s = t.softmax_vec(v);
                let w = t.leaf(Tensor::from_vec(&[6], seeded(6, 17)).unwrap());
                let m = t.mul_elem(s, w);
                t.sum_all(m)
            },
            "softmax_vec",
        );
        // offsets keep residuals away from the smooth-l1 kink at |e| = 1
        let x0 = vec![0.3, -0.2, 1.8, -2.2, 0.4, 0.1, -1.6, 2.4];
        gradcheck(
            &[2, 4],
            x0,
            |t, v| t.smooth_l1(v, vec![0.0; 8], vec![1.0, 0.5]),
            "smooth_l1",
        );
    }

    #[test]
    fn grad_cosine_norm_gather() {
        gradcheck(
            &[4],
            seeded(4, 18),
            |t, v| {
                let b = t.leaf(Tensor::from_vec(&[4], seeded(4, 19)).unwrap());
                t.cosine_sim(v, b)
            },
            "cosine_a",
        );
        gradcheck(
            &[3, 4],
            seeded(12, 20).iter().map(|v| v + 1.5).collect(),
            |t, v| {
                let n = t.row_normalize(v);
                let w = t.leaf(Tensor::from_vec(&[3, 4], seeded(12, 21)).unwrap());
                let m = t.mul_elem(n, w);
                t.sum_all(m)
            },
            "row_normalize",
        );
        gradcheck(
            &[5, 3],
            seeded(15, 22),
            |t, v| {
                let rows = t.gather_rows(v, vec![0, 2, 2, 4]);
                let m = t.mean_rows(rows);
                let w = t.leaf(Tensor::from_vec(&[1, 3], seeded(3, 23)).unwrap());
                let p = t.mul_elem(m, w);
                t.sum_all(p)
            },
            "gather_mean",
        );
    }

    #[test]
    fn grad_roi_align_and_concat() {
        gradcheck(
            &[6, 6, 2],
            seeded(72, 24),
            |t, v| {
                let r = t.roi_align(v, [0.7, 1.2, 4.3, 5.1], 3);
                let flat = t.reshape(r, &[9, 2]);
                let w = t.leaf(Tensor::from_vec(&[9, 2], seeded(18, 25)).unwrap());
                let m = t.mul_elem(flat, w);
                t.sum_all(m)
            },
            "roi_align",
        );
        gradcheck(
            &[1, 3],
            seeded(3, 26),
            |t, v| {
                let other = t.leaf(Tensor::from_vec(&[2, 3], seeded(6, 27)).unwrap());
                let cat = t.concat_rows(&[v, other, v]);
                let w = t.leaf(Tensor::from_vec(&[4, 3], seeded(12, 28)).unwrap());
                let m = t.mul_elem(cat, w);
                t.sum_all(m)
            },
            "concat_rows",
        );
        gradcheck(
            &[2, 2, 3],
            seeded(12, 29),
            |t, v| {
                let ch = t.leaf(Tensor::from_vec(&[3], seeded(3, 30)).unwrap());
                let s = t.add_channel(v, ch);
                t.sum_all(s)
            },
            "add_channel_fm",
        );
        gradcheck(
            &[3],
            seeded(3, 31),
            |t, v| {
                let fm = t.leaf(Tensor::from_vec(&[2, 2, 3], seeded(12, 32)).unwrap());
                let s = t.add_channel(fm, v);
                let sq = t.mul_elem(s, s);
                t.sum_all(sq)
            },
            "add_channel_vec",
        );
    }
}
