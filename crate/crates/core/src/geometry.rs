//! Rotation representations, pose containers, and frequency-plane lattices.
//!
//! Rotations are parameterized for regression in the 6-dimensional space
//! S²×S² (two unconstrained 3-vectors) and materialized as 3×3 matrices via
//! Gram–Schmidt orthogonalization. The lattice convention is center-origin:
//! the integer grid −D/2 … D/2−1 scaled by 2/D into [−1, 1), with the DC
//! coefficient at index (D/2, D/2).

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Tolerance below which the Gram–Schmidt inputs are considered degenerate.
pub const GS_EPSILON: f64 = 1e-8;

/// Unconstrained 6-real rotation parameterization (two 3-vectors).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct S2S2Param {
    pub u: [f64; 3],
    pub v: [f64; 3],
}

impl S2S2Param {
    pub fn new(u: [f64; 3], v: [f64; 3]) -> Self {
        S2S2Param { u, v }
    }
}

/// A proper rotation: orthogonal 3×3 matrix with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    m: Matrix3<f64>,
}

impl Rotation {
    /// Wraps a matrix, checking orthogonality and determinant within 1e-6.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let err = (m.transpose() * m - Matrix3::identity()).norm();
        if err > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "matrix is not orthogonal (|R^T R - I| = {err:.3e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "matrix determinant {det} != +1"
            )));
        }
        Ok(Rotation { m })
    }

    pub fn identity() -> Self {
        Rotation {
            m: Matrix3::identity(),
        }
    }

    /// Unchecked constructor for matrices known to be valid by construction.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation { m }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Viewing axis: the third column of the matrix (the rotated z-axis,
    /// along which the projection integral runs).
    pub fn view_axis(&self) -> Vector3<f64> {
        self.m.column(2).into()
    }

    /// Row-major flattening r00..r22.
    pub fn to_flat(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_flat(f: &[f64; 9]) -> Result<Self> {
        Rotation::from_matrix(Matrix3::new(
            f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8],
        ))
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation {
            m: self.m * other.m,
        }
    }
}

/// Rigid pose of a particle: 3D orientation plus in-plane shift in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: [f64; 2],
}

impl Pose {
    pub fn new(rotation: Rotation, translation: [f64; 2]) -> Self {
        Pose {
            rotation,
            translation,
        }
    }
}

/// The z=0 frequency-plane lattice: D² points in [−1, 1)² × {0} plus the
/// disc mask restricting to in-plane radius ≤ 1.
#[derive(Debug, Clone)]
pub struct PlaneLattice {
    pub d: usize,
    /// D² rows of (kx, ky, 0); row j = iy * D + ix.
    pub coords: Array2<f64>,
    pub disc_mask: Vec<bool>,
}

impl PlaneLattice {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 || d % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "lattice side must be even and positive, got {d}"
            )));
        }
        let h = d / 2;
        let mut coords = Array2::zeros((d * d, 3));
        let mut disc_mask = Vec::with_capacity(d * d);
        for iy in 0..d {
            for ix in 0..d {
                let kx = 2.0 * (ix as f64 - h as f64) / d as f64;
                let ky = 2.0 * (iy as f64 - h as f64) / d as f64;
                let j = iy * d + ix;
                coords[(j, 0)] = kx;
                coords[(j, 1)] = ky;
                disc_mask.push(kx * kx + ky * ky <= 1.0);
            }
        }
        Ok(PlaneLattice {
            d,
            coords,
            disc_mask,
        })
    }

    /// Index of the point-reflection partner (k ↦ −k on the centered grid;
    /// the aliased −D/2 row maps to itself).
    pub fn neg_index(&self, j: usize) -> usize {
        let d = self.d;
        let iy = j / d;
        let ix = j % d;
        let nx = (d - ix) % d;
        let ny = (d - iy) % d;
        ny * d + nx
    }

    /// Index map of the exact in-plane π rotation about the image center.
    /// Identical to [`neg_index`](Self::neg_index); it is an involution.
    pub fn pi_rotation_index(&self, j: usize) -> usize {
        self.neg_index(j)
    }

    pub fn num_masked(&self) -> usize {
        self.disc_mask.iter().filter(|&&b| b).count()
    }
}

/// Maps the 6-real parameterization to a rotation matrix via Gram–Schmidt.
/// The map is scale-invariant in both input vectors; the two orthonormalized
/// vectors become the first two columns and their cross product the third.
pub fn s2s2_to_rotation(p: &S2S2Param) -> Result<Rotation> {
    let u = Vector3::new(p.u[0], p.u[1], p.u[2]);
    let v = Vector3::new(p.v[0], p.v[1], p.v[2]);
    let nu = u.norm();
    let nv = v.norm();
    if nu <= GS_EPSILON || nv <= GS_EPSILON {
        return Err(Error::DegenerateRotation(format!(
            "input vector too small (|u| = {nu:.3e}, |v| = {nv:.3e})"
        )));
    }
    let e1 = u / nu;
    let w = v - e1 * e1.dot(&v);
    let nw = w.norm();
    if nw <= GS_EPSILON * nv {
        return Err(Error::DegenerateRotation(
            "u and v are collinear".to_string(),
        ));
    }
    let e2 = w / nw;
    let e3 = e1.cross(&e2);
    Ok(Rotation {
        m: Matrix3::from_columns(&[e1, e2, e3]),
    })
}

/// Rotates every lattice point by R. Output row j is R · coords[j].
pub fn rotate_plane(r: &Rotation, lat: &PlaneLattice) -> Array2<f64> {
    let m = r.matrix();
    let n = lat.coords.nrows();
    let mut out = Array2::zeros((n, 3));
    for j in 0..n {
        let k = Vector3::new(lat.coords[(j, 0)], lat.coords[(j, 1)], lat.coords[(j, 2)]);
        let rk = m * k;
        out[(j, 0)] = rk[0];
        out[(j, 1)] = rk[1];
        out[(j, 2)] = rk[2];
    }
    out
}

/// Draws a Haar-uniform rotation: Gram–Schmidt applied to two isotropic
/// Gaussian vectors.
pub fn random_rotation(rng: &mut impl rand::Rng) -> Rotation {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let mut draw = || {
            [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ]
        };
        let p = S2S2Param::new(draw(), draw());
        if let Ok(r) = s2s2_to_rotation(&p) {
            return r;
        }
    }
}

/// Angle in degrees between the viewing axes (third columns) of two rotations,
/// measured on oriented vectors, in [0, 180].
pub fn geodesic_angle(a: &Rotation, b: &Rotation) -> f64 {
    let va = a.view_axis();
    let vb = b.view_axis();
    // atan2 form stays accurate for tiny angles, where acos of the clamped
    // dot product loses half the significant digits
    va.cross(&vb).norm().atan2(va.dot(&vb)).to_degrees()
}
