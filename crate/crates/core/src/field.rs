//! Implicit neural representation of the conformational volume family in
//! Hartley space.
//!
//! The field maps a 3D frequency plus a conformation latent, through a bank
//! of random Fourier features and an MLP, to the real and imaginary parts
//! of the volume's Fourier coefficient; the Hartley value is `re − im`.
//!
//! The represented function is defined on a canonical half-space and
//! extended everywhere by conjugate symmetry F(−k) = F(k)*: evaluating at a
//! non-canonical frequency queries the MLP at −k and conjugates. This makes
//! extracted volumes exactly real and makes the half-plane ("hermitian")
//! slice path agree bit-for-bit with the full evaluation path.

use crate::ad::{Scalar, Var};
use crate::geometry::{PlaneLattice, Rotation};
use crate::nn::{Graph, Mlp, ParamId, ParamSet};
use crate::xform::{inverse_hartley_3d, HtImage, VolumeGrid};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Hyper-parameters of the neural field.
#[derive(Debug, Clone)]
pub struct FieldConfig {
    /// Image/volume side length D; the frequency bank has D/2 rows and the
    /// positional encoding has length D.
    pub d_img: usize,
    /// Conformation latent dimension d.
    pub d_conf: usize,
    /// Hidden width of the MLP body (4 hidden layers).
    pub width: usize,
    /// Std-dev of the Gaussian frequency bank in normalized-coordinate
    /// units. Defaults to D/4 (half-Nyquist).
    pub sigma_f: f64,
}

impl FieldConfig {
    pub fn new(d_img: usize, d_conf: usize, width: usize) -> Self {
        FieldConfig {
            d_img,
            d_conf,
            width,
            sigma_f: d_img as f64 / 4.0,
        }
    }
}

/// The neural field: a fixed random frequency bank plus an MLP with input
/// width D + d and a 2-wide linear output (re, im).
pub struct Field {
    pub cfg: FieldConfig,
    /// (D/2)×3 frequency bank, fixed after initialization (stored as a
    /// non-trainable buffer so checkpoints carry it bit-exactly).
    pub freq_bank: ParamId,
    pub mlp: Mlp,
}

/// Evaluation schedule for one slice: which 3D lattice points to query and
/// where their Hartley values land on the full D² grid.
struct SlicePlan<T: Scalar> {
    /// [Ph, 3] plane-lattice coordinates of the queried representatives.
    points: Array2<T>,
    /// Per representative: full-grid column and optional k ↦ −k partner.
    plan: Vec<(usize, Option<usize>)>,
}

/// Canonicalization sign: +1 when k is in the canonical half-space
/// (kz > 0, ties broken by ky then kx, with k = 0 canonical).
fn canon_sign(kx: f64, ky: f64, kz: f64) -> f64 {
    if kz != 0.0 {
        return kz.signum();
    }
    if ky != 0.0 {
        return ky.signum();
    }
    if kx >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn build_plan<T: Scalar>(lat: &PlaneLattice, hermitian: bool) -> SlicePlan<T> {
    let d = lat.d;
    let n = d * d;
    let mut taken = vec![false; n];
    let mut pts: Vec<[f64; 3]> = Vec::new();
    let mut plan = Vec::new();
    for j in 0..n {
        if !lat.disc_mask[j] || taken[j] {
            continue;
        }
        let nj = lat.neg_index(j);
        let (kx, ky) = (lat.coords[(j, 0)], lat.coords[(j, 1)]);
        // A pair can be shared only when the partner's coordinate is the
        // exact negation; the aliased −1 lines are their own partners in
        // index space but not in coordinate space, so they stay singletons.
        let coord_negated = lat.coords[(nj, 0)] == -kx && lat.coords[(nj, 1)] == -ky;
        if hermitian && nj != j && coord_negated && lat.disc_mask[nj] {
            taken[j] = true;
            taken[nj] = true;
            pts.push([kx, ky, 0.0]);
            plan.push((j, Some(nj)));
        } else {
            taken[j] = true;
            pts.push([kx, ky, 0.0]);
            plan.push((j, None));
        }
    }
    let ph = pts.len();
    let points = Array2::from_shape_fn((ph, 3), |(i, a)| <T as Scalar>::from_f64(pts[i][a]));
    SlicePlan { points, plan }
}

impl Field {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        cfg: FieldConfig,
    ) -> Self {
        let k = cfg.d_img / 2;
        let dist = Normal::new(0.0, cfg.sigma_f).unwrap();
        let bank = Array2::from_shape_fn((k, 3), |_| {
            <T as Scalar>::from_f64(dist.sample(rng))
        });
        let freq_bank = params.add_buffer("field.freq_bank", bank.into_dyn());
        let w = cfg.width;
        let dims = [cfg.d_img + cfg.d_conf, w, w, w, w, 2];
        let mlp = Mlp::new(params, rng, "field.mlp", &dims);
        Field {
            cfg,
            freq_bank,
            mlp,
        }
    }

    fn bank_f64<T: Scalar>(&self, params: &ParamSet<T>) -> Array2<f64> {
        params
            .get(self.freq_bank)
            .mapv(|v| v.to_f64())
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    }

    /// [cos(2π B k), sin(2π B k)], length D.
    pub fn positional_encode<T: Scalar>(&self, params: &ParamSet<T>, k: [f64; 3]) -> Vec<f64> {
        let bank = self.bank_f64(params);
        let nk = bank.nrows();
        let mut out = vec![0.0; 2 * nk];
        for i in 0..nk {
            let phase = 2.0
                * std::f64::consts::PI
                * (bank[(i, 0)] * k[0] + bank[(i, 1)] * k[1] + bank[(i, 2)] * k[2]);
            out[i] = phase.cos();
            out[nk + i] = phase.sin();
        }
        out
    }

    /// Evaluates the field at one frequency: returns (re, im, hartley) with
    /// hartley = re − im. Non-canonical frequencies are evaluated at −k and
    /// conjugated (see module docs).
    pub fn field_eval<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        k: [f64; 3],
        z: &[f64],
    ) -> (f64, f64, f64) {
        assert_eq!(z.len(), self.cfg.d_conf);
        let sigma = canon_sign(k[0], k[1], k[2]);
        let kc = [sigma * k[0], sigma * k[1], sigma * k[2]];
        let mut h = self.positional_encode(params, kc);
        h.extend_from_slice(z);
        let out = self.mlp_forward_f64(params, &h);
        let (re, im) = (out[0], sigma * out[1]);
        (re, im, re - im)
    }

    /// Direct (non-tape) f64 forward through the MLP for one input vector.
    fn mlp_forward_f64<T: Scalar>(&self, params: &ParamSet<T>, input: &[f64]) -> Vec<f64> {
        let mut h: Vec<f64> = input.to_vec();
        let n = self.mlp.layers.len();
        for (li, layer) in self.mlp.layers.iter().enumerate() {
            let w = params.get(layer.w);
            let b = params.get(layer.b);
            let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
            assert_eq!(h.len(), n_in);
            let mut out = vec![0.0; n_out];
            for o in 0..n_out {
                let mut acc = b[[o]].to_f64();
                for i in 0..n_in {
                    acc += h[i] * w[[i, o]].to_f64();
                }
                out[o] = if li + 1 < n { acc.max(0.0) } else { acc };
            }
            h = out;
        }
        h
    }

    /// Tape-recorded slice decoding for a batch: `rot` is [B,9] row-major
    /// rotation matrices, `z` is [B,d]; returns [B, D²] Hartley slices
    /// (zero outside the unit disc).
    pub fn slice_graph<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        rot: Var,
        z: Var,
        lat: &PlaneLattice,
        hermitian: bool,
    ) -> Var {
        let d = lat.d;
        assert_eq!(d, self.cfg.d_img);
        let sp = build_plan::<T>(lat, hermitian);
        let ph = sp.plan.len();
        let rotated = g.tape.rotate_points(rot, sp.points);
        let rv = g.tape.value(rotated);
        let nrows = rv.shape()[0];
        let no_canon = std::env::var("CRYOREC_NO_CANON").is_ok(); // TEMP experiment
        let mut signs: Vec<T> = Vec::with_capacity(nrows);
        for r in 0..nrows {
            signs.push(<T as Scalar>::from_f64(if no_canon {
                1.0
            } else {
                canon_sign(
                    rv[[r, 0]].to_f64(),
                    rv[[r, 1]].to_f64(),
                    rv[[r, 2]].to_f64(),
                )
            }));
        }
        let canon = g.tape.sign_rows(rotated, signs.clone());

        // the bank is a fixed buffer; bind its transpose as a constant leaf
        let bt = self
            .bank_f64(g.params_ref())
            .t()
            .mapv(|v| <T as Scalar>::from_f64(v));
        let bt = g.tape.leaf2(bt);
        let phases = g.tape.matmul(canon, bt);
        let scaled = g
            .tape
            .scale(phases, <T as Scalar>::from_f64(2.0 * std::f64::consts::PI));
        let c = g.tape.cos(scaled);
        let s = g.tape.sin(scaled);
        let zrep = g.tape.repeat_rows(z, ph);
        let h = g.tape.concat_cols(&[c, s, zrep]);
        let out = self.mlp.forward(g, h);
        g.tape.hermitian_assemble(out, signs, sp.plan, d * d)
    }

    /// Decodes one slice outside any training graph.
    pub fn eval_slice<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        rot: &Rotation,
        z: &[f64],
        lat: &PlaneLattice,
        hermitian: bool,
        pixel_size: f64,
    ) -> HtImage {
        let d = lat.d;
        let mut g = Graph::new(params);
        let flat = rot.to_flat();
        let rv = g
            .tape
            .leaf2(Array2::from_shape_fn((1, 9), |(_, j)| {
                <T as Scalar>::from_f64(flat[j])
            }));
        let zv = g.tape.leaf2(Array2::from_shape_fn((1, z.len()), |(_, j)| {
            <T as Scalar>::from_f64(z[j])
        }));
        let slice = self.slice_graph(&mut g, rv, zv, lat, hermitian);
        let v = g.tape.value(slice);
        let data = Array2::from_shape_fn((d, d), |(iy, ix)| v[[0, iy * d + ix]].to_f64());
        HtImage::new(data, pixel_size).expect("lattice side is even")
    }

    /// Evaluates the field on the D³ lattice inside the unit ball and
    /// returns the Hartley-space grid (zero outside the ball).
    pub fn extract_ht_volume<T: Scalar>(&self, params: &ParamSet<T>, z: &[f64]) -> Array3<f64> {
        let d = self.cfg.d_img;
        let bank = self.bank_f64(params);
        let two_pi = 2.0 * std::f64::consts::PI;
        let nk = bank.nrows();
        let coord = |i: usize| 2.0 * (i as f64 - (d / 2) as f64) / d as f64;

        // gather in-ball points
        let mut idx = Vec::new();
        let mut pts = Vec::new();
        for iz in 0..d {
            for iy in 0..d {
                for ix in 0..d {
                    let (kx, ky, kz) = (coord(ix), coord(iy), coord(iz));
                    if kx * kx + ky * ky + kz * kz <= 1.0 {
                        idx.push((iz, iy, ix));
                        pts.push([kx, ky, kz]);
                    }
                }
            }
        }

        // batched forward in f64
        let n = pts.len();
        let din = self.cfg.d_img + self.cfg.d_conf;
        let mut input = Array2::<f64>::zeros((n, din));
        let mut sigma = vec![1.0f64; n];
        for (r, p) in pts.iter().enumerate() {
            let s = canon_sign(p[0], p[1], p[2]);
            sigma[r] = s;
            for i in 0..nk {
                let phase = two_pi
                    * (bank[(i, 0)] * s * p[0]
                        + bank[(i, 1)] * s * p[1]
                        + bank[(i, 2)] * s * p[2]);
                input[(r, i)] = phase.cos();
                input[(r, nk + i)] = phase.sin();
            }
            for (j, &zz) in z.iter().enumerate() {
                input[(r, self.cfg.d_img + j)] = zz;
            }
        }
        let mut h = input;
        let nl = self.mlp.layers.len();
        for (li, layer) in self.mlp.layers.iter().enumerate() {
            let w = params
                .get(layer.w)
                .mapv(|v| v.to_f64())
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let b = params.get(layer.b).mapv(|v| v.to_f64());
            let mut out = h.dot(&w);
            for mut row in out.rows_mut() {
                for (o, slot) in row.iter_mut().enumerate() {
                    *slot += b[[o]];
                    if li + 1 < nl && *slot < 0.0 {
                        *slot = 0.0;
                    }
                }
            }
            h = out;
        }

        let mut vol = Array3::<f64>::zeros((d, d, d));
        for (r, &(iz, iy, ix)) in idx.iter().enumerate() {
            let (re, im) = (h[(r, 0)], sigma[r] * h[(r, 1)]);
            vol[(iz, iy, ix)] = re - im;
        }
        vol
    }

    /// Real-space volume for a conformation latent.
    pub fn extract_volume<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        z: &[f64],
        pixel_size: f64,
    ) -> VolumeGrid {
        let ht = self.extract_ht_volume(params, z);
        let ht = VolumeGrid::new(ht, pixel_size).expect("even side");
        inverse_hartley_3d(&ht)
    }
}
