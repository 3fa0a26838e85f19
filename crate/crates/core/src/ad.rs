//! Minimal reverse-mode automatic differentiation on dynamic-dimension
//! arrays.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients
//! for every recorded variable. The op set is exactly what the encoder, the
//! neural field, and the physics decoder need — dense/conv layers, batch
//! normalization, and the handful of structured ops of the reconstruction
//! pipeline (plane rotation, Hermitian slice assembly, Hartley-domain
//! shifts).
//!
//! Everything is generic over the float width so training can run in f32
//! while finite-difference gradient verification runs in f64.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4};

/// Float type the tape operates on.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddConst(Var, #[allow(dead_code)] ArrayD<T>),
    MulConst(Var, ArrayD<T>),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Square(Var),
    SumAxis1(Var),
    SumAll(Var),
    DivCol(Var, Var),
    MulCol(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    RepeatRows(Var, usize),
    SignRows(Var, Vec<T>),
    RotatePoints {
        rot: Var,
        coords: Array2<T>,
    },
    HermitianAssemble {
        reim: Var,
        signs: Vec<T>,
        /// Per half-lattice evaluation row: target column and the k ↦ −k
        /// partner column (None for self-paired points).
        plan: Vec<(usize, Option<usize>)>,
        #[allow(dead_code)]
        n_full: usize,
    },
    ApplyShift {
        vals: Var,
        t: Var,
        /// P×2 in-plane normalized frequencies.
        kxy: Array2<T>,
        neg: Vec<usize>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool2(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
    AffineChan {
        x: Var,
        a: Vec<T>,
        #[allow(dead_code)]
        b: Vec<T>,
    },
    Detach(#[allow(dead_code)] Var),
    Reshape(Var),
    SelectRows {
        a: Var,
        b: Var,
        take_a: Vec<bool>,
    },
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op<T>,
    /// Per-channel (mean, var) stashed by batch-norm forward.
    bn_stats: Option<(Array1<T>, Array1<T>)>,
}

/// Gradients of a scalar root with respect to every tape variable.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads[v.0].as_ref()
    }
}

/// Records a single forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            bn_stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    fn val2(&self, v: Var) -> ndarray::ArrayView2<'_, T> {
        self.nodes[v.0].value.view().into_dimensionality::<Ix2>().unwrap()
    }

    fn val1(&self, v: Var) -> ndarray::ArrayView1<'_, T> {
        self.nodes[v.0].value.view().into_dimensionality::<Ix1>().unwrap()
    }

    fn val4(&self, v: Var) -> ndarray::ArrayView4<'_, T> {
        self.nodes[v.0].value.view().into_dimensionality::<Ix4>().unwrap()
    }

    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf2(&mut self, value: Array2<T>) -> Var {
        self.push(value.into_dyn(), Op::Leaf)
    }

    /// Batch-norm batch statistics recorded during the forward pass.
    pub fn batch_stats(&self, v: Var) -> Option<(&Array1<T>, &Array1<T>)> {
        self.nodes[v.0].bn_stats.as_ref().map(|(m, s)| (m, s))
    }

    // ---- elementwise and linear-algebra ops -------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.val2(a).dot(&self.val2(b));
        self.push(out.into_dyn(), Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let out = &self.val2(x) + &self.val1(b);
        self.push(out.into_dyn(), Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(out, Op::Mul(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| -v);
        self.push(out, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: ArrayD<T>) -> Var {
        let out = &self.nodes[x.0].value + &c;
        self.push(out, Op::AddConst(x, c))
    }

    pub fn mul_const(&mut self, x: Var, c: ArrayD<T>) -> Var {
        let out = &self.nodes[x.0].value * &c;
        self.push(out, Op::MulConst(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| v.sin());
        self.push(out, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| v.cos());
        self.push(out, Op::Cos(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| v.sqrt());
        self.push(out, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| v * v);
        self.push(out, Op::Square(x))
    }

    pub fn sum_axis1(&mut self, x: Var) -> Var {
        let s = self.val2(x).sum_axis(Axis(1));
        let m = s.len();
        self.push(
            s.into_shape((m, 1)).unwrap().into_dyn(),
            Op::SumAxis1(x),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.nodes[x.0].value.iter().copied().sum();
        self.push(ArrayD::from_elem(ndarray::IxDyn(&[1]), s), Op::SumAll(x))
    }

    /// a[m,n] / b[m,1] with the divisor broadcast along columns.
    pub fn div_col(&mut self, a: Var, b: Var) -> Var {
        let av = self.val2(a);
        let bv = self.val2(b);
        let mut out = av.to_owned();
        for (mut row, d) in out.rows_mut().into_iter().zip(bv.column(0)) {
            row.mapv_inplace(|v| v / *d);
        }
        self.push(out.into_dyn(), Op::DivCol(a, b))
    }

    /// a[m,n] * b[m,1] with the multiplier broadcast along columns.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        let av = self.val2(a);
        let bv = self.val2(b);
        let mut out = av.to_owned();
        for (mut row, d) in out.rows_mut().into_iter().zip(bv.column(0)) {
            row.mapv_inplace(|v| v * *d);
        }
        self.push(out.into_dyn(), Op::MulCol(a, b))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.val2(p)).collect();
        let out = ndarray::concatenate(Axis(1), &views).unwrap();
        self.push(out.into_dyn(), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.val2(p)).collect();
        let out = ndarray::concatenate(Axis(0), &views).unwrap();
        self.push(out.into_dyn(), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let out = self.val2(x).slice(ndarray::s![.., lo..hi]).to_owned();
        self.push(out.into_dyn(), Op::SliceCols(x, lo, hi))
    }

    /// Repeats each row `r` times consecutively: [B,d] -> [B*r, d].
    pub fn repeat_rows(&mut self, x: Var, r: usize) -> Var {
        let xv = self.val2(x);
        let (b, d) = xv.dim();
        let mut out = Array2::zeros((b * r, d));
        for i in 0..b {
            for j in 0..r {
                out.row_mut(i * r + j).assign(&xv.row(i));
            }
        }
        self.push(out.into_dyn(), Op::RepeatRows(x, r))
    }

    /// Multiplies each row by a fixed sign (used for Hermitian
    /// canonicalization of rotated frequencies).
    pub fn sign_rows(&mut self, x: Var, signs: Vec<T>) -> Var {
        let xv = self.val2(x);
        let mut out = xv.to_owned();
        for (mut row, &s) in out.rows_mut().into_iter().zip(signs.iter()) {
            row.mapv_inplace(|v| v * s);
        }
        self.push(out.into_dyn(), Op::SignRows(x, signs))
    }

    /// Rotates a fixed P×3 coordinate set by each of B rotation matrices
    /// (row-major 3×3 flattened to 9): out[b*P + p] = R_b · coords[p].
    pub fn rotate_points(&mut self, rot: Var, coords: Array2<T>) -> Var {
        let rv = self.val2(rot);
        let b = rv.nrows();
        let p = coords.nrows();
        let mut out = Array2::zeros((b * p, 3));
        for bi in 0..b {
            let r = rv.row(bi);
            for pi in 0..p
            {
                for a in 0..3 {
                    let mut acc = T::zero();
                    for c in 0..3 {
                        acc += r[3 * a + c] * coords[(pi, c)];
                    }
                    out[(bi * p + pi, a)] = acc;
                }
            }
        }
        self.push(out.into_dyn(), Op::RotatePoints { rot, coords })
    }

    /// Expands per-half-lattice-point (re, im) field outputs into full D²
    /// Hartley slices using F(−k) = F(k)*: H(k) = re − σ·im and
    /// H(−k) = re + σ·im, σ the canonicalization sign of the row.
    pub fn hermitian_assemble(
        &mut self,
        reim: Var,
        signs: Vec<T>,
        plan: Vec<(usize, Option<usize>)>,
        n_full: usize,
    ) -> Var {
        let rv = self.val2(reim);
        let ph = plan.len();
        assert_eq!(rv.nrows() % ph, 0);
        let b = rv.nrows() / ph;
        let mut out = Array2::zeros((b, n_full));
        for bi in 0..b {
            for (ri, &(col, partner)) in plan.iter().enumerate() {
                let row = bi * ph + ri;
                let re = rv[(row, 0)];
                let im = signs[row] * rv[(row, 1)];
                out[(bi, col)] = re - im;
                if let Some(p2) = partner {
                    out[(bi, p2)] = re + im;
                }
            }
        }
        self.push(
            out.into_dyn(),
            Op::HermitianAssemble {
                reim,
                signs,
                plan,
                n_full,
            },
        )
    }

    /// Applies the Hartley-domain shift theorem with per-image translations:
    /// out[b,j] = cos(θ)·v[b,j] + sin(θ)·v[b,neg(j)], θ = π k_j · t_b.
    pub fn apply_shift(&mut self, vals: Var, t: Var, kxy: Array2<T>, neg: Vec<usize>) -> Var {
        let vv = self.val2(vals);
        let tv = self.val2(t);
        let (b, p) = vv.dim();
        assert_eq!(kxy.nrows(), p);
        let pi = <T as Scalar>::from_f64(std::f64::consts::PI);
        let mut out = Array2::zeros((b, p));
        for bi in 0..b {
            let (tx, ty) = (tv[(bi, 0)], tv[(bi, 1)]);
            for j in 0..p {
                let theta = pi * (kxy[(j, 0)] * tx + kxy[(j, 1)] * ty);
                out[(bi, j)] = theta.cos() * vv[(bi, j)] + theta.sin() * vv[(bi, neg[j])];
            }
        }
        self.push(out.into_dyn(), Op::ApplyShift { vals, t, kxy, neg })
    }

    /// 3×3 convolution, stride 1, zero padding 1. x: [B,C,H,W], w: [O,C,3,3],
    /// b: [O].
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.val4(x);
        let wv = self.val4(w);
        let bv = self.val1(b);
        let (nb, c, h, wd) = xv.dim();
        let o = wv.dim().0;
        let cols = im2col(&xv);
        let w2 = wv.to_owned().into_shape((o, c * 9)).unwrap();
        let out2 = cols.dot(&w2.t()); // [B*H*W, O]
        let mut out = Array4::zeros((nb, o, h, wd));
        for bi in 0..nb {
            for oi in 0..o {
                for y in 0..h {
                    for xx in 0..wd {
                        out[(bi, oi, y, xx)] = out2[((bi * h + y) * wd + xx, oi)] + bv[oi];
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Conv3x3 { x, w, b })
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.val4(x);
        let (nb, c, h, w) = xv.dim();
        let mut out = Array4::zeros((nb, c, h / 2, w / 2));
        for bi in 0..nb {
            for ci in 0..c {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let mut m = xv[(bi, ci, 2 * y, 2 * xx)];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let v = xv[(bi, ci, 2 * y + dy, 2 * xx + dx)];
                            if v > m {
                                m = v;
                            }
                        }
                        out[(bi, ci, y, xx)] = m;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::MaxPool2(x))
    }

    /// Batch normalization over all axes except axis 1 (channels/features).
    /// Training mode: uses batch statistics, which are recorded on the node.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let (mean, var) = channel_moments(&self.nodes[x.0].value);
        let g = self.val1(gamma).to_owned();
        let b = self.val1(beta).to_owned();
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        apply_per_channel(&mut out, |ci, v| {
            (v - mean[ci]) / (var[ci] + eps).sqrt() * g[ci] + b[ci]
        });
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, eps });
        self.nodes[v.0].bn_stats = Some((mean, var));
        v
    }

    /// Fixed per-channel affine map (batch norm in inference mode).
    pub fn affine_chan(&mut self, x: Var, a: Vec<T>, b: Vec<T>) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        apply_per_channel(&mut out, |ci, v| v * a[ci] + b[ci]);
        self.push(out, Op::AffineChan { x, a, b })
    }

    /// Forward identity that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.clone();
        self.push(out, Op::Detach(x))
    }

    /// Row-wise selection between two [B,1] columns.
    pub fn select_rows(&mut self, a: Var, b: Var, take_a: Vec<bool>) -> Var {
        let av = self.val2(a);
        let bv = self.val2(b);
        let m = av.nrows();
        let mut out = Array2::zeros((m, 1));
        for i in 0..m {
            out[(i, 0)] = if take_a[i] { av[(i, 0)] } else { bv[(i, 0)] };
        }
        self.push(out.into_dyn(), Op::SelectRows { a, b, take_a })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .nodes[x.0]
            .value
            .clone()
            .into_shape(ndarray::IxDyn(shape))
            .unwrap();
        self.push(out, Op::Reshape(x))
    }

    // ---- backward ---------------------------------------------------------

    /// Gradients of a scalar (single-element) variable with respect to every
    /// recorded variable.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "root must be scalar");
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(
            self.nodes[root.0].value.raw_dim(),
            T::one(),
        ));

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &ArrayD<T>, grads: &mut Vec<Option<ArrayD<T>>>) {
        let acc = |grads: &mut Vec<Option<ArrayD<T>>>, v: Var, delta: ArrayD<T>| {
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let g2 = || g.view().into_dimensionality::<Ix2>().unwrap();
        let g4 = || g.view().into_dimensionality::<Ix4>().unwrap();

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g2().dot(&self.val2(*b).t());
                let db = self.val2(*a).t().dot(&g2());
                acc(grads, *a, da.into_dyn());
                acc(grads, *b, db.into_dyn());
            }
            Op::AddBias(x, b) => {
                acc(grads, *x, g.clone());
                let db = g2().sum_axis(Axis(0));
                acc(grads, *b, db.into_dyn());
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * &self.nodes[b.0].value);
                acc(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::Neg(x) => acc(grads, *x, g.mapv(|v| -v)),
            Op::Scale(x, c) => acc(grads, *x, g.mapv(|v| v * *c)),
            Op::AddConst(x, _) => acc(grads, *x, g.clone()),
            Op::MulConst(x, c) => acc(grads, *x, g * c),
            Op::Relu(x) => {
                let mask = self.nodes[x.0]
                    .value
                    .mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
                acc(grads, *x, g * &mask);
            }
            Op::Sin(x) => {
                let cx = self.nodes[x.0].value.mapv(|v| v.cos());
                acc(grads, *x, g * &cx);
            }
            Op::Cos(x) => {
                let sx = self.nodes[x.0].value.mapv(|v| -v.sin());
                acc(grads, *x, g * &sx);
            }
            Op::Sqrt(x) => {
                let half = <T as Scalar>::from_f64(0.5);
                let inv = self.nodes[idx].value.mapv(|v| half / v);
                acc(grads, *x, g * &inv);
            }
            Op::Square(x) => {
                let two = <T as Scalar>::from_f64(2.0);
                let d = self.nodes[x.0].value.mapv(|v| two * v);
                acc(grads, *x, g * &d);
            }
            Op::SumAxis1(x) => {
                let xv = self.val2(*x);
                let (m, n) = xv.dim();
                let gv = g2();
                let mut dx = Array2::zeros((m, n));
                for i in 0..m {
                    let gi = gv[(i, 0)];
                    dx.row_mut(i).mapv_inplace(|_| gi);
                }
                acc(grads, *x, dx.into_dyn());
            }
            Op::SumAll(x) => {
                let gv = g.iter().next().copied().unwrap();
                let dx = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gv);
                acc(grads, *x, dx);
            }
            Op::DivCol(a, b) => {
                let av = self.val2(*a);
                let bv = self.val2(*b);
                let gv = g2();
                let (m, n) = av.dim();
                let mut da = Array2::zeros((m, n));
                let mut db = Array2::zeros((m, 1));
                for i in 0..m {
                    let d = bv[(i, 0)];
                    let mut s = T::zero();
                    for j in 0..n {
                        da[(i, j)] = gv[(i, j)] / d;
                        s += gv[(i, j)] * av[(i, j)];
                    }
                    db[(i, 0)] = -s / (d * d);
                }
                acc(grads, *a, da.into_dyn());
                acc(grads, *b, db.into_dyn());
            }
            Op::MulCol(a, b) => {
                let av = self.val2(*a);
                let bv = self.val2(*b);
                let gv = g2();
                let (m, n) = av.dim();
                let mut da = Array2::zeros((m, n));
                let mut db = Array2::zeros((m, 1));
                for i in 0..m {
                    let d = bv[(i, 0)];
                    let mut s = T::zero();
                    for j in 0..n {
                        da[(i, j)] = gv[(i, j)] * d;
                        s += gv[(i, j)] * av[(i, j)];
                    }
                    db[(i, 0)] = s;
                }
                acc(grads, *a, da.into_dyn());
                acc(grads, *b, db.into_dyn());
            }
            Op::ConcatCols(parts) => {
                let gv = g2();
                let mut off = 0;
                for &p in parts {
                    let w = self.val2(p).ncols();
                    let dp = gv.slice(ndarray::s![.., off..off + w]).to_owned();
                    acc(grads, p, dp.into_dyn());
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let gv = g2();
                let mut off = 0;
                for &p in parts {
                    let h = self.val2(p).nrows();
                    let dp = gv.slice(ndarray::s![off..off + h, ..]).to_owned();
                    acc(grads, p, dp.into_dyn());
                    off += h;
                }
            }
            Op::SliceCols(x, lo, hi) => {
                let xv = self.val2(*x);
                let mut dx = Array2::zeros(xv.dim());
                dx.slice_mut(ndarray::s![.., *lo..*hi]).assign(&g2());
                acc(grads, *x, dx.into_dyn());
            }
            Op::RepeatRows(x, r) => {
                let xv = self.val2(*x);
                let (b, d) = xv.dim();
                let gv = g2();
                let mut dx = Array2::zeros((b, d));
                for i in 0..b {
                    for j in 0..*r {
                        let grow = gv.row(i * r + j);
                        let mut drow = dx.row_mut(i);
                        drow += &grow;
                    }
                }
                acc(grads, *x, dx.into_dyn());
            }
            Op::SignRows(x, signs) => {
                let gv = g2();
                let mut dx = gv.to_owned();
                for (mut row, &s) in dx.rows_mut().into_iter().zip(signs.iter()) {
                    row.mapv_inplace(|v| v * s);
                }
                acc(grads, *x, dx.into_dyn());
            }
            Op::RotatePoints { rot, coords } => {
                let rv = self.val2(*rot);
                let b = rv.nrows();
                let p = coords.nrows();
                let gv = g2();
                let mut dr = Array2::zeros((b, 9));
                for bi in 0..b {
                    for pi in 0..p {
                        for a in 0..3 {
                            let gval = gv[(bi * p + pi, a)];
                            for c in 0..3 {
                                dr[(bi, 3 * a + c)] += gval * coords[(pi, c)];
                            }
                        }
                    }
                }
                acc(grads, *rot, dr.into_dyn());
            }
            Op::HermitianAssemble {
                reim,
                signs,
                plan,
                n_full: _,
            } => {
                let rv = self.val2(*reim);
                let gv = g2();
                let ph = plan.len();
                let b = rv.nrows() / ph;
                let mut dx = Array2::zeros(rv.dim());
                for bi in 0..b {
                    for (ri, &(col, partner)) in plan.iter().enumerate() {
                        let row = bi * ph + ri;
                        let gc = gv[(bi, col)];
                        let gp = partner.map(|p2| gv[(bi, p2)]).unwrap_or_else(T::zero);
                        dx[(row, 0)] = gc + gp;
                        dx[(row, 1)] = signs[row] * (gp - gc);
                    }
                }
                acc(grads, *reim, dx.into_dyn());
            }
            Op::ApplyShift { vals, t, kxy, neg } => {
                let vv = self.val2(*vals);
                let tv = self.val2(*t);
                let gv = g2();
                let (b, p) = vv.dim();
                let pi = <T as Scalar>::from_f64(std::f64::consts::PI);
                let mut dv = Array2::zeros((b, p));
                let mut dt = Array2::zeros((b, 2));
                for bi in 0..b {
                    let (tx, ty) = (tv[(bi, 0)], tv[(bi, 1)]);
                    for j in 0..p {
                        let theta = pi * (kxy[(j, 0)] * tx + kxy[(j, 1)] * ty);
                        let (c, s) = (theta.cos(), theta.sin());
                        let gj = gv[(bi, j)];
                        dv[(bi, j)] += c * gj;
                        dv[(bi, neg[j])] += s * gj;
                        let dtheta = (-s * vv[(bi, j)] + c * vv[(bi, neg[j])]) * gj;
                        dt[(bi, 0)] += dtheta * pi * kxy[(j, 0)];
                        dt[(bi, 1)] += dtheta * pi * kxy[(j, 1)];
                    }
                }
                acc(grads, *vals, dv.into_dyn());
                acc(grads, *t, dt.into_dyn());
            }
            Op::Conv3x3 { x, w, b } => {
                let xv = self.val4(*x);
                let wv = self.val4(*w);
                let (nb, c, h, wd) = xv.dim();
                let o = wv.dim().0;
                let gv = g4();
                // dout as [B*H*W, O]
                let mut dout2 = Array2::zeros((nb * h * wd, o));
                for bi in 0..nb {
                    for oi in 0..o {
                        for y in 0..h {
                            for xx in 0..wd {
                                dout2[((bi * h + y) * wd + xx, oi)] = gv[(bi, oi, y, xx)];
                            }
                        }
                    }
                }
                let cols = im2col(&xv);
                let dw2 = dout2.t().dot(&cols); // [O, C*9]
                let dw = dw2.into_shape((o, c, 3, 3)).unwrap();
                let db = dout2.sum_axis(Axis(0));
                let w2 = wv.to_owned().into_shape((o, c * 9)).unwrap();
                let dcols = dout2.dot(&w2); // [B*H*W, C*9]
                let dx = col2im(&dcols, nb, c, h, wd);
                acc(grads, *x, dx.into_dyn());
                acc(grads, *w, dw.into_dyn());
                acc(grads, *b, db.into_dyn());
            }
            Op::MaxPool2(x) => {
                let xv = self.val4(*x);
                let (nb, c, h, w) = xv.dim();
                let gv = g4();
                let mut dx = Array4::zeros((nb, c, h, w));
                for bi in 0..nb {
                    for ci in 0..c {
                        for y in 0..h / 2 {
                            for xx in 0..w / 2 {
                                let mut best = (0usize, 0usize);
                                let mut m = xv[(bi, ci, 2 * y, 2 * xx)];
                                for (dy, dx_) in [(0, 1), (1, 0), (1, 1)] {
                                    let v = xv[(bi, ci, 2 * y + dy, 2 * xx + dx_)];
                                    if v > m {
                                        m = v;
                                        best = (dy, dx_);
                                    }
                                }
                                dx[(bi, ci, 2 * y + best.0, 2 * xx + best.1)] +=
                                    gv[(bi, ci, y, xx)];
                            }
                        }
                    }
                }
                acc(grads, *x, dx.into_dyn());
            }
            Op::BatchNorm { x, gamma, beta, eps } => {
                let (mean, var) = self.nodes[idx].bn_stats.as_ref().unwrap().clone();
                let xv = &self.nodes[x.0].value;
                let gam = self.val1(*gamma).to_owned();
                let nchan = mean.len();
                let n_per = <T as Scalar>::from_f64((xv.len() / nchan) as f64);

                // accumulate per-channel sums of g and g*xhat
                let mut sum_g = Array1::<T>::zeros(nchan);
                let mut sum_gx = Array1::<T>::zeros(nchan);
                for_each_channel(xv, |ci, flat_idx, v| {
                    let inv = (var[ci] + *eps).sqrt().recip();
                    let xhat = (v - mean[ci]) * inv;
                    let gi = g.as_slice().unwrap()[flat_idx];
                    sum_g[ci] += gi;
                    sum_gx[ci] += gi * xhat;
                });
                let mut dx = xv.clone();
                {
                    let gslice = g.as_slice().unwrap();
                    let dxs = dx.as_slice_mut().unwrap();
                    let xs = xv.as_slice().unwrap();
                    let shape = xv.shape().to_vec();
                    let chan_stride: usize = shape[2..].iter().product();
                    let cdim = shape[1];
                    for (flat, slot) in dxs.iter_mut().enumerate() {
                        let ci = (flat / chan_stride) % cdim;
                        let inv = (var[ci] + *eps).sqrt().recip();
                        let xhat = (xs[flat] - mean[ci]) * inv;
                        *slot = gam[ci] * inv
                            * (gslice[flat] - sum_g[ci] / n_per - xhat * sum_gx[ci] / n_per);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, sum_gx.into_dyn());
                acc(grads, *beta, sum_g.into_dyn());
            }
            Op::AffineChan { x, a, b: _ } => {
                let mut dx = g.clone();
                apply_per_channel(&mut dx, |ci, v| v * a[ci]);
                acc(grads, *x, dx);
            }
            Op::Detach(_) => {}
            Op::SelectRows { a, b, take_a } => {
                let gv = g2();
                let m = gv.nrows();
                let mut da = Array2::zeros((m, 1));
                let mut db = Array2::zeros((m, 1));
                for i in 0..m {
                    if take_a[i] {
                        da[(i, 0)] = gv[(i, 0)];
                    } else {
                        db[(i, 0)] = gv[(i, 0)];
                    }
                }
                acc(grads, *a, da.into_dyn());
                acc(grads, *b, db.into_dyn());
            }
            Op::Reshape(x) => {
                let dx = g
                    .clone()
                    .into_shape(self.nodes[x.0].value.raw_dim())
                    .unwrap();
                acc(grads, *x, dx);
            }
        }
    }
}

/// Per-channel mean and (biased) variance over all axes except axis 1.
fn channel_moments<T: Scalar>(x: &ArrayD<T>) -> (Array1<T>, Array1<T>) {
    let shape = x.shape();
    let nchan = shape[1];
    let mut mean = Array1::<T>::zeros(nchan);
    let mut var = Array1::<T>::zeros(nchan);
    for_each_channel(x, |ci, _, v| mean[ci] += v);
    let n_per = <T as Scalar>::from_f64((x.len() / nchan) as f64);
    mean.mapv_inplace(|m| m / n_per);
    for_each_channel(x, |ci, _, v| {
        let d = v - mean[ci];
        var[ci] += d * d;
    });
    var.mapv_inplace(|v| v / n_per);
    (mean, var)
}

fn for_each_channel<T: Scalar>(x: &ArrayD<T>, mut f: impl FnMut(usize, usize, T)) {
    let shape = x.shape();
    let cdim = shape[1];
    let chan_stride: usize = shape[2..].iter().product();
    for (flat, &v) in x.as_slice().unwrap().iter().enumerate() {
        let ci = (flat / chan_stride) % cdim;
        f(ci, flat, v);
    }
}

fn apply_per_channel<T: Scalar>(x: &mut ArrayD<T>, f: impl Fn(usize, T) -> T) {
    let shape = x.shape().to_vec();
    let cdim = shape[1];
    let chan_stride: usize = shape[2..].iter().product();
    for (flat, slot) in x.as_slice_mut().unwrap().iter_mut().enumerate() {
        let ci = (flat / chan_stride) % cdim;
        *slot = f(ci, *slot);
    }
}

/// Unfolds 3×3 neighborhoods (zero-padded) into a [B*H*W, C*9] matrix.
fn im2col<T: Scalar>(x: &ndarray::ArrayView4<'_, T>) -> Array2<T> {
    let (nb, c, h, w) = x.dim();
    let mut cols = Array2::zeros((nb * h * w, c * 9));
    for bi in 0..nb {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let row = (bi * h + y) * w + xx;
                    for ky in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            cols[(row, ci * 9 + ky * 3 + kx)] =
                                x[(bi, ci, sy as usize, sx as usize)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back to image shape.
fn col2im<T: Scalar>(cols: &Array2<T>, nb: usize, c: usize, h: usize, w: usize) -> Array4<T> {
    let mut x = Array4::zeros((nb, c, h, w));
    for bi in 0..nb {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let row = (bi * h + y) * w + xx;
                    for ky in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            x[(bi, ci, sy as usize, sx as usize)] +=
                                cols[(row, ci * 9 + ky * 3 + kx)];
                        }
                    }
                }
            }
        }
    }
    x
}
