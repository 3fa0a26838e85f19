//! Centered discrete Hartley transforms (1/2/3-D) and slice interpolation.
//!
//! All arrays are stored center-origin: real-space coordinate x = index − D/2
//! and frequency index m = index − D/2. The transform is unitary (1/√D per
//! axis), which makes it an involution: H(H(x)) = x.

use ndarray::{Array2, Array3, ArrayView2};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// A D×D real-space image with its pixel size in Å/pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    pub data: Array2<f64>,
    pub pixel_size: f64,
}

/// A D×D grid of real Hartley coefficients, center-origin.
#[derive(Debug, Clone, PartialEq)]
pub struct HtImage {
    pub data: Array2<f64>,
    pub pixel_size: f64,
}

/// A D×D×D real grid (real space or Hartley coefficients, by context).
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub data: Array3<f64>,
    pub pixel_size: f64,
}

impl RealImage {
    pub fn new(data: Array2<f64>, pixel_size: f64) -> Result<Self> {
        check_side(data.nrows(), data.ncols())?;
        Ok(RealImage { data, pixel_size })
    }

    pub fn side(&self) -> usize {
        self.data.nrows()
    }
}

impl HtImage {
    pub fn new(data: Array2<f64>, pixel_size: f64) -> Result<Self> {
        check_side(data.nrows(), data.ncols())?;
        Ok(HtImage { data, pixel_size })
    }

    pub fn side(&self) -> usize {
        self.data.nrows()
    }
}

impl VolumeGrid {
    pub fn new(data: Array3<f64>, pixel_size: f64) -> Result<Self> {
        let (a, b, c) = data.dim();
        check_side(a, b)?;
        check_side(a, c)?;
        Ok(VolumeGrid { data, pixel_size })
    }

    pub fn side(&self) -> usize {
        self.data.dim().0
    }
}

fn check_side(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("non-square grid {a}x{b}")));
    }
    if a == 0 || a % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "grid side must be even and positive, got {a}"
        )));
    }
    Ok(())
}

/// Centered DHT along every axis of a flat buffer with the given shape.
///
/// Summing over any complete residue system leaves the DFT kernel unchanged,
/// so the centered transform is computed as fftshift ∘ FFT ∘ ifftshift per
/// axis, followed by Re − Im and the unitary scale.
fn hartley_nd(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let n: usize = shape.iter().product();
    debug_assert_eq!(data.len(), n);
    let mut buf: Vec<Complex64> = data.iter().map(|&x| Complex64::new(x, 0.0)).collect();

    let mut planner = FftPlanner::new();
    // Process axes from last (contiguous) to first by permuting strides.
    // For simplicity operate on each axis with explicit gather/scatter.
    let ndim = shape.len();
    for axis in (0..ndim).rev() {
        let d = shape[axis];
        let fft = planner.plan_fft_forward(d);
        let stride: usize = shape[axis + 1..].iter().product();
        let outer: usize = n / d;
        let mut line = vec![Complex64::new(0.0, 0.0); d];
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        for o in 0..outer {
            // Decompose o into (pre, post) indices around the axis.
            let pre = o / stride;
            let post = o % stride;
            let base = pre * d * stride + post;
            // ifftshift: line[i] = buf[base + ((i + d/2) % d) * stride]
            for (i, l) in line.iter_mut().enumerate() {
                *l = buf[base + ((i + d / 2) % d) * stride];
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            // fftshift back into buf.
            for (i, l) in line.iter().enumerate() {
                buf[base + ((i + d / 2) % d) * stride] = *l;
            }
        }
    }

    let scale = 1.0 / (n as f64).sqrt();
    buf.iter().map(|c| (c.re - c.im) * scale).collect()
}

/// 2D centered unitary Hartley transform. Its own inverse.
pub fn hartley_2d(img: &RealImage) -> HtImage {
    let d = img.side();
    let out = hartley_nd(img.data.as_slice().unwrap(), &[d, d]);
    HtImage {
        data: Array2::from_shape_vec((d, d), out).unwrap(),
        pixel_size: img.pixel_size,
    }
}

/// Inverse of [`hartley_2d`] (identical computation; the transform is an
/// involution under the unitary convention).
pub fn inverse_hartley_2d(img: &HtImage) -> RealImage {
    let d = img.side();
    let out = hartley_nd(img.data.as_slice().unwrap(), &[d, d]);
    RealImage {
        data: Array2::from_shape_vec((d, d), out).unwrap(),
        pixel_size: img.pixel_size,
    }
}

/// 3D centered unitary Hartley transform of a volume.
pub fn hartley_3d(vol: &VolumeGrid) -> VolumeGrid {
    let d = vol.side();
    let out = hartley_nd(vol.data.as_slice().unwrap(), &[d, d, d]);
    VolumeGrid {
        data: Array3::from_shape_vec((d, d, d), out).unwrap(),
        pixel_size: vol.pixel_size,
    }
}

pub fn inverse_hartley_3d(vol: &VolumeGrid) -> VolumeGrid {
    hartley_3d(vol)
}

/// Trilinear interpolation of a centered 3D Hartley grid at arbitrary points
/// in normalized coordinates [−1, 1]³. Points outside the unit ball return 0.
///
/// `coords` is P×3; the result has one value per row.
pub fn interpolate_slice(vol_ht: &VolumeGrid, coords: ArrayView2<f64>) -> Vec<f64> {
    let d = vol_ht.side();
    let h = d as f64 / 2.0;
    let grid = &vol_ht.data;
    let mut out = Vec::with_capacity(coords.nrows());
    for row in coords.rows() {
        let (kx, ky, kz) = (row[0], row[1], row[2]);
        if kx * kx + ky * ky + kz * kz > 1.0 {
            out.push(0.0);
            continue;
        }
        // Normalized coordinate k maps to fractional index (k + 1) * D/2.
        // Grid axis order is (z, y, x) to match row-major volume layout.
        let fx = (kx + 1.0) * h;
        let fy = (ky + 1.0) * h;
        let fz = (kz + 1.0) * h;
        out.push(trilinear(grid, d, fz, fy, fx));
    }
    out
}

fn trilinear(grid: &Array3<f64>, d: usize, fz: f64, fy: f64, fx: f64) -> f64 {
    let sample = |iz: isize, iy: isize, ix: isize| -> f64 {
        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= d as isize || ix >= d as isize {
            0.0
        } else {
            grid[(iz as usize, iy as usize, ix as usize)]
        }
    };
    let z0 = fz.floor();
    let y0 = fy.floor();
    let x0 = fx.floor();
    let (wz, wy, wx) = (fz - z0, fy - y0, fx - x0);
    let (z0, y0, x0) = (z0 as isize, y0 as isize, x0 as isize);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dz == 0 { 1.0 - wz } else { wz })
                    * (if dy == 0 { 1.0 - wy } else { wy })
                    * (if dx == 0 { 1.0 - wx } else { wx });
                if w != 0.0 {
                    acc += w * sample(z0 + dz, y0 + dy, x0 + dx);
                }
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotate_plane, PlaneLattice, Rotation};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_image(d: usize, seed: u64) -> RealImage {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((d, d), |_| rng.gen::<f64>() - 0.5);
        RealImage::new(data, 1.0).unwrap()
    }

    /// Brute-force O(N²) centered DFT, Re − Im, unitary scale. Kept
    /// independent of the FFT-based implementation.
    fn dht_2d_oracle(img: &RealImage) -> Array2<f64> {
        let d = img.side() as isize;
        let h = d / 2;
        let mut out = Array2::zeros((d as usize, d as usize));
        for my in -h..h {
            for mx in -h..h {
                let mut re = 0.0;
                let mut im = 0.0;
                for y in -h..h {
                    for x in -h..h {
                        let v = img.data[((y + h) as usize, (x + h) as usize)];
                        let phase =
                            -2.0 * std::f64::consts::PI * (mx * x + my * y) as f64 / d as f64;
                        re += v * phase.cos();
                        im += v * phase.sin();
                    }
                }
                out[((my + h) as usize, (mx + h) as usize)] = (re - im) / d as f64;
            }
        }
        out
    }

    #[test]
    fn constant_image_has_single_dc_coefficient() {
        let d = 8;
        let img = RealImage::new(Array2::from_elem((d, d), 3.0), 1.0).unwrap();
        let ht = hartley_2d(&img);
        for iy in 0..d {
            for ix in 0..d {
                let expect = if iy == d / 2 && ix == d / 2 {
                    3.0 * d as f64
                } else {
                    0.0
                };
                assert_abs_diff_eq!(ht.data[(iy, ix)], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn hartley_2d_is_involution() {
        let img = random_image(16, 3);
        let back = inverse_hartley_2d(&hartley_2d(&img));
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn hartley_matches_brute_force_dft() {
        let img = random_image(4, 9);
        let ht = hartley_2d(&img);
        let oracle = dht_2d_oracle(&img);
        for (a, b) in ht.data.iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        // Also at a larger odd-content size.
        let img = random_image(8, 10);
        let ht = hartley_2d(&img);
        let oracle = dht_2d_oracle(&img);
        for (a, b) in ht.data.iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn parseval_and_linearity() {
        let x = random_image(16, 21);
        let y = random_image(16, 22);
        let hx = hartley_2d(&x);
        let hy = hartley_2d(&y);

        let n2 = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = (n2(&x.data) - n2(&hx.data)).abs() / n2(&x.data);
        assert!(rel < 1e-10, "Parseval violation {rel}");

        let combo = RealImage::new(&x.data * 2.5 + &y.data * (-0.75), 1.0).unwrap();
        let hcombo = hartley_2d(&combo);
        let expect = &hx.data * 2.5 + &hy.data * (-0.75);
        let err = n2(&(&hcombo.data - &expect)) / n2(&expect);
        assert!(err < 1e-12, "linearity violation {err}");
    }

    #[test]
    fn hartley_3d_is_involution() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let data = ndarray::Array3::from_shape_fn((8, 8, 8), |_| rng.gen::<f64>() - 0.5);
        let vol = VolumeGrid::new(data, 1.0).unwrap();
        let back = inverse_hartley_3d(&hartley_3d(&vol));
        for (a, b) in vol.data.iter().zip(back.data.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn interpolation_at_grid_nodes_is_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let d = 8;
        let data = ndarray::Array3::from_shape_fn((d, d, d), |_| rng.gen::<f64>() - 0.5);
        let vol = VolumeGrid::new(data, 1.0).unwrap();
        let lat = PlaneLattice::new(d).unwrap();
        let vals = interpolate_slice(&vol, lat.coords.view());
        for (j, &v) in vals.iter().enumerate() {
            let iy = j / d;
            let ix = j % d;
            if !lat.disc_mask[j] {
                assert_eq!(v, 0.0);
            } else {
                assert_abs_diff_eq!(v, vol.data[(d / 2, iy, ix)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_volume_gives_zero_slice() {
        let d = 8;
        let vol = VolumeGrid::new(ndarray::Array3::zeros((d, d, d)), 1.0).unwrap();
        let lat = PlaneLattice::new(d).unwrap();
        let vals = interpolate_slice(&vol, lat.coords.view());
        assert!(vals.iter().all(|&v| v == 0.0));
    }

    /// A centered Gaussian blob has a closed-form Hartley transform (real,
    /// positive Gaussian). Checks the interpolated rotated slice against the
    /// continuous transform at low frequency.
    #[test]
    fn gaussian_slice_matches_continuous_transform() {
        // Fine grid keeps the trilinear error under the tolerance; the
        // closed-form transform is the independent oracle.
        let d = 128;
        let sigma = 1.0; // pixels
        let data = ndarray::Array3::from_shape_fn((d, d, d), |(z, y, x)| {
            let h = d as f64 / 2.0;
            let (dz, dy, dx) = (z as f64 - h, y as f64 - h, x as f64 - h);
            (-(dx * dx + dy * dy + dz * dz) / (2.0 * sigma * sigma)).exp()
        });
        let vol = VolumeGrid::new(data, 1.0).unwrap();
        let vol_ht = hartley_3d(&vol);

        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let r = crate::geometry::random_rotation(&mut rng);
        let lat = PlaneLattice::new(d).unwrap();
        let coords = rotate_plane(&r, &lat);
        let vals = interpolate_slice(&vol_ht, coords.view());

        // Continuous transform of exp(-r²/2σ²) sampled on the grid, with the
        // discrete unitary normalization: (2πσ²)^{3/2} e^{-2π²σ²f²} / D^{3/2}.
        let two_pi = 2.0 * std::f64::consts::PI;
        for j in 0..coords.nrows() {
            let f2 = (coords[(j, 0)].powi(2) + coords[(j, 1)].powi(2) + coords[(j, 2)].powi(2))
                / 4.0; // normalized k -> cycles/pixel is k/2
            if f2.sqrt() > 0.2 {
                continue; // low-frequency check only
            }
            let cont = (two_pi * sigma * sigma).powf(1.5)
                * (-2.0 * std::f64::consts::PI.powi(2) * sigma * sigma * f2).exp()
                / (d as f64).powf(1.5);
            let rel = (vals[j] - cont).abs() / cont.abs();
            assert!(
                rel < 1e-3,
                "freq {:.3}: interp {} vs continuous {} (rel {rel:.2e})",
                f2.sqrt(),
                vals[j],
                cont
            );
        }
    }
}
