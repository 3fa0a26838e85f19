//! CTF evaluation, Hartley-domain translation kernels, and the noise model.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::PlaneLattice;
use crate::xform::RealImage;

/// Microscope parameters defining the contrast transfer function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CTFParams {
    /// Major defocus, Å.
    pub defocus_u: f64,
    /// Minor defocus, Å.
    pub defocus_v: f64,
    /// Astigmatism angle, radians.
    pub astig_angle: f64,
    /// Acceleration voltage, kV.
    pub voltage: f64,
    /// Spherical aberration, mm.
    pub cs: f64,
    /// Amplitude contrast fraction in [0, 1).
    pub amp_contrast: f64,
    /// Additional phase shift, radians.
    pub phase_shift: f64,
    /// Å per pixel.
    pub pixel_size: f64,
}

impl CTFParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.defocus_u >= self.defocus_v && self.defocus_v > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "defocus pair must satisfy u >= v > 0, got ({}, {})",
                self.defocus_u, self.defocus_v
            )));
        }
        if self.voltage <= 0.0 || self.pixel_size <= 0.0 {
            return Err(Error::InvalidArgument(
                "voltage and pixel size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.amp_contrast) {
            return Err(Error::InvalidArgument(format!(
                "amplitude contrast {} outside [0, 1)",
                self.amp_contrast
            )));
        }
        Ok(())
    }
}

/// Relativistic electron wavelength in Å for an acceleration voltage in kV.
pub fn electron_wavelength(voltage_kv: f64) -> f64 {
    let v = voltage_kv * 1e3;
    12.2639 / (v + 0.97845e-6 * v * v).sqrt()
}

/// Evaluates the weak-phase CTF on every lattice point.
///
/// CTF(k) = −√(1−w²)·sin(χ) − w·cos(χ) with
/// χ(k) = π λ |k|² d(θ) − (π/2) Cs λ³ |k|⁴ + phase_shift,
/// d(θ) the astigmatic defocus and |k| in 1/Å.
pub fn ctf_eval(p: &CTFParams, lat: &PlaneLattice) -> Vec<f64> {
    let lambda = electron_wavelength(p.voltage);
    let cs_a = p.cs * 1e7; // mm -> Å
    let w = p.amp_contrast;
    let pre = (1.0 - w * w).sqrt();
    let half_mean = 0.5 * (p.defocus_u + p.defocus_v);
    let half_diff = 0.5 * (p.defocus_u - p.defocus_v);
    let pi = std::f64::consts::PI;

    let mut out = Vec::with_capacity(lat.coords.nrows());
    for row in lat.coords.rows() {
        // Normalized lattice unit -> 1/Å: Nyquist (|k|=1) is 1/(2·pixel).
        let kx = row[0] / (2.0 * p.pixel_size);
        let ky = row[1] / (2.0 * p.pixel_size);
        let k2 = kx * kx + ky * ky;
        let theta = ky.atan2(kx);
        let defocus = half_mean + half_diff * (2.0 * (theta - p.astig_angle)).cos();
        let chi = pi * lambda * k2 * defocus - 0.5 * pi * cs_a * lambda.powi(3) * k2 * k2
            + p.phase_shift;
        out.push(-pre * chi.sin() - w * chi.cos());
    }
    out
}

/// Hartley-domain translation operator for a shift of `t` pixels.
///
/// The DHT shift theorem couples coefficients at k and −k:
/// H'(k) = cos(θ)·H(k) + sin(θ)·H(−k) with θ = π k·t in normalized lattice
/// units (equivalently the phase of the Fourier-pair multiplier e^{−iθ}).
///
/// Integer shifts are exact everywhere (the phases reduce to ±1). For
/// fractional shifts the aliased Nyquist lines (grid index 0 along either
/// axis) pair with themselves under k ↦ −k, so inverse/composition exactness
/// holds on coefficients off those lines; in the reconstruction pipeline the
/// operator only ever acts on disc-masked slices where this is immaterial.
#[derive(Debug, Clone)]
pub struct TranslationKernel {
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
    pub neg_idx: Vec<usize>,
}

pub fn translation_phase(t: [f64; 2], lat: &PlaneLattice) -> TranslationKernel {
    let n = lat.coords.nrows();
    let mut cos = Vec::with_capacity(n);
    let mut sin = Vec::with_capacity(n);
    let mut neg_idx = Vec::with_capacity(n);
    for j in 0..n {
        let theta =
            std::f64::consts::PI * (lat.coords[(j, 0)] * t[0] + lat.coords[(j, 1)] * t[1]);
        cos.push(theta.cos());
        sin.push(theta.sin());
        neg_idx.push(lat.neg_index(j));
    }
    TranslationKernel { cos, sin, neg_idx }
}

impl TranslationKernel {
    /// Applies the shift to a flat row-major D² Hartley coefficient buffer.
    pub fn apply(&self, ht: &[f64]) -> Vec<f64> {
        (0..ht.len())
            .map(|j| self.cos[j] * ht[j] + self.sin[j] * ht[self.neg_idx[j]])
            .collect()
    }
}

/// Adds i.i.d. Gaussian pixel noise of the given variance. Deterministic for
/// a fixed seed.
pub fn add_noise(img: &RealImage, sigma2: f64, rng_seed: u64) -> RealImage {
    if sigma2 == 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(0.0, sigma2.sqrt()).unwrap();
    let data = img.data.mapv(|v| v + normal.sample(&mut rng));
    RealImage {
        data,
        pixel_size: img.pixel_size,
    }
}

/// Derives a per-image noise seed from a dataset seed, so that records can be
/// generated independently in any order.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    // splitmix64 over the combined value
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
