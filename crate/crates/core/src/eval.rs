//! Evaluation metrics: global pose alignment with handedness resolution,
//! rotation/translation errors, PCA, confusion error, Spearman correlation,
//! Fourier shell correlation, and the pixel integration window used to make
//! ground-truth volumes comparable to reconstructions.

use crate::error::{Error, Result};
use crate::geometry::{Pose, Rotation};
use crate::xform::{hartley_3d, VolumeGrid};
use nalgebra::Matrix3;
use ndarray::{Array2, Array3, ArrayView2};

// ---------------------------------------------------------------------------
// Pose alignment

/// Result of the global rigid alignment between predicted and ground-truth
/// rotation sets.
#[derive(Debug, Clone)]
pub struct AlignmentResult {
    pub global_rotation: Rotation,
    pub mirrored: bool,
    pub residual_median_deg: f64,
}

fn mirror_conjugate(r: &Matrix3<f64>) -> Matrix3<f64> {
    // J R J with J = diag(1, 1, −1); projections cannot distinguish a
    // volume from its mirror, so predictions may land in this branch.
    let j = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, -1.0));
    j * r * j
}

/// Orthogonal-Procrustes solution of argmax_G tr(Gᵀ M) over SO(3).
fn procrustes(m: &Matrix3<f64>) -> Rotation {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let det = (u * vt).determinant();
    let s = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, det.signum()));
    Rotation::from_matrix(u * s * vt).expect("procrustes output is orthogonal")
}

fn branch_fit(pred_mats: &[Matrix3<f64>], gt: &[Pose]) -> (Rotation, Vec<f64>) {
    let mut m = Matrix3::zeros();
    for (p, g) in pred_mats.iter().zip(gt.iter()) {
        m += g.rotation.matrix() * p.transpose();
    }
    let g_rot = procrustes(&m);
    let angles = pred_mats
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| {
            let aligned = Rotation::from_matrix_unchecked(g_rot.matrix() * p);
            crate::geometry::geodesic_angle(&aligned, &g.rotation)
        })
        .collect();
    (g_rot, angles)
}

fn median(xs: &mut [f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Finds the global rotation G minimizing the Frobenius misfit between
/// G·R̂ᵢ and Rᵢ, tried both directly and with the predicted set conjugated
/// by the mirror J = diag(1,1,−1); returns whichever branch has the lower
/// mean geodesic angle.
pub fn align_poses(pred: &[Pose], gt: &[Pose]) -> Result<AlignmentResult> {
    if pred.len() != gt.len() {
        return Err(Error::invalid_argument("pose lists differ in length"));
    }
    if pred.len() < 3 {
        return Err(Error::invalid_argument("need at least 3 poses to align"));
    }
    let plain: Vec<Matrix3<f64>> = pred.iter().map(|p| *p.rotation.matrix()).collect();
    let flipped: Vec<Matrix3<f64>> = plain.iter().map(mirror_conjugate).collect();
    let (g_plain, ang_plain) = branch_fit(&plain, gt);
    let (g_flip, ang_flip) = branch_fit(&flipped, gt);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mirrored, g_rot, mut angles) = if mean(&ang_flip) < mean(&ang_plain) {
        (true, g_flip, ang_flip)
    } else {
        (false, g_plain, ang_plain)
    };
    Ok(AlignmentResult {
        global_rotation: g_rot,
        mirrored,
        residual_median_deg: median(&mut angles),
    })
}

/// Applies an alignment to one predicted rotation (mirror conjugation, when
/// selected, then the global rotation).
pub fn apply_alignment(alignment: &AlignmentResult, pred: &Rotation) -> Rotation {
    let m = if alignment.mirrored {
        mirror_conjugate(pred.matrix())
    } else {
        *pred.matrix()
    };
    Rotation::from_matrix_unchecked(alignment.global_rotation.matrix() * m)
}

/// Pose-error aggregates after alignment. Translation errors are reported
/// both raw and after subtracting the best constant offset (the global
/// origin of the reconstruction is arbitrary, so a shared offset is not a
/// model failure; both readings appear in reports).
#[derive(Debug, Clone)]
pub struct PoseErrors {
    /// Median / mean angular error of the view direction, degrees.
    pub rot_median_deg: f64,
    pub rot_mean_deg: f64,
    /// Median absolute / mean squared translation error, pixels.
    pub trans_median_pix: f64,
    pub trans_mse_pix: f64,
    /// Same, after removing the best constant offset.
    pub trans_median_offsub_pix: f64,
    pub trans_mse_offsub_pix: f64,
    /// The constant offset that was removed.
    pub trans_offset: [f64; 2],
}

pub fn pose_errors(pred: &[Pose], gt: &[Pose], alignment: &AlignmentResult) -> PoseErrors {
    assert_eq!(pred.len(), gt.len());
    let mut view_deg: Vec<f64> = pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| {
            let aligned = apply_alignment(alignment, &p.rotation);
            crate::geometry::geodesic_angle(&aligned, &g.rotation)
        })
        .collect();
    let rot_mean_deg = view_deg.iter().sum::<f64>() / view_deg.len() as f64;
    let rot_median_deg = median(&mut view_deg);

    // best constant offset in the L2 sense is the mean residual
    let n = pred.len() as f64;
    let mut off = [0.0f64; 2];
    for (p, g) in pred.iter().zip(gt.iter()) {
        off[0] += (p.translation[0] - g.translation[0]) / n;
        off[1] += (p.translation[1] - g.translation[1]) / n;
    }
    let trans_stats = |off: [f64; 2]| -> (f64, f64) {
        let mut abs_err = Vec::with_capacity(pred.len());
        let mut mse = 0.0;
        for (p, g) in pred.iter().zip(gt.iter()) {
            let ex = p.translation[0] - g.translation[0] - off[0];
            let ey = p.translation[1] - g.translation[1] - off[1];
            let e2 = ex * ex + ey * ey;
            abs_err.push(e2.sqrt());
            mse += e2 / n;
        }
        (median(&mut abs_err), mse)
    };
    let (trans_median_pix, trans_mse_pix) = trans_stats([0.0, 0.0]);
    let (trans_median_offsub_pix, trans_mse_offsub_pix) = trans_stats(off);
    PoseErrors {
        rot_median_deg,
        rot_mean_deg,
        trans_median_pix,
        trans_mse_pix,
        trans_median_offsub_pix,
        trans_mse_offsub_pix,
        trans_offset: off,
    }
}

// ---------------------------------------------------------------------------
// Latent-space metrics

/// Mean-centered principal component analysis.
#[derive(Debug, Clone)]
pub struct Pca {
    /// [d, d]; row i is the i-th component (unit norm, descending variance,
    /// largest-magnitude entry positive).
    pub components: Array2<f64>,
    /// [N, d] projections of the centered data onto the components.
    pub projections: Array2<f64>,
    pub explained_variance: Vec<f64>,
    pub mean: Vec<f64>,
}

pub fn pca(latents: ArrayView2<f64>) -> Result<Pca> {
    let (n, d) = latents.dim();
    if n <= d {
        return Err(Error::invalid_argument("pca needs more samples than dims"));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| latents.column(j).sum() / n as f64)
        .collect();
    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for row in latents.rows() {
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (row[a] - mean[a]) * (row[b] - mean[b]) / (n as f64 - 1.0);
            }
        }
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    // sort descending by eigenvalue
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb): (f64, f64) = (eig.eigenvalues[a], eig.eigenvalues[b]);
        eb.partial_cmp(&ea).unwrap()
    });
    let mut components = Array2::zeros((d, d));
    let mut explained_variance = Vec::with_capacity(d);
    for (ci, &ei) in order.iter().enumerate() {
        explained_variance.push(eig.eigenvalues[ei].max(0.0));
        let col = eig.eigenvectors.column(ei);
        // deterministic sign: largest-magnitude entry positive
        let lead = (0..d)
            .max_by(|&a, &b| col[a].abs().partial_cmp(&col[b].abs()).unwrap())
            .unwrap();
        let s = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[(ci, j)] = s * col[j];
        }
    }
    let mut projections = Array2::zeros((n, d));
    for (i, row) in latents.rows().into_iter().enumerate() {
        for ci in 0..d {
            projections[(i, ci)] = (0..d)
                .map(|j| (row[j] - mean[j]) * components[(ci, j)])
                .sum();
        }
    }
    Ok(Pca {
        components,
        projections,
        explained_variance,
        mean,
    })
}

/// Minimal misclassification ratio over all PC1 thresholds and label
/// permutations, for K = 2 or 3 classes.
pub fn confusion_error(pc1: &[f64], gt_class: &[u32]) -> Result<f64> {
    if pc1.len() != gt_class.len() || pc1.is_empty() {
        return Err(Error::invalid_argument("mismatched or empty inputs"));
    }
    let mut classes: Vec<u32> = gt_class.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len();
    if !(2..=3).contains(&k) {
        return Err(Error::invalid_argument(format!(
            "confusion_error needs 2 or 3 classes, got {k}"
        )));
    }
    let n = pc1.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pc1[a].partial_cmp(&pc1[b]).unwrap());
    // per-class prefix counts in PC1 order: counts[c][i] = members of class
    // c among the first i sorted points
    let mut counts = vec![vec![0usize; n + 1]; k];
    for (i, &idx) in order.iter().enumerate() {
        let c = classes.iter().position(|&l| l == gt_class[idx]).unwrap();
        for (ci, cc) in counts.iter_mut().enumerate() {
            cc[i + 1] = cc[i] + usize::from(ci == c);
        }
    }
    let mut best_correct = 0usize;
    let perms: Vec<Vec<usize>> = permutations(k);
    for perm in &perms {
        if k == 2 {
            let (a, b) = (perm[0], perm[1]);
            for i in 0..=n {
                let correct = counts[a][i] + (counts[b][n] - counts[b][i]);
                best_correct = best_correct.max(correct);
            }
        } else {
            // segments [0,i), [i,j), [j,n): maximize A[i] + B[j]−B[i] +
            // C[n]−C[j] with a running max over i ≤ j
            let (a, b, c) = (perm[0], perm[1], perm[2]);
            let mut run = isize::MIN;
            for j in 0..=n {
                run = run.max(counts[a][j] as isize - counts[b][j] as isize);
                let corr =
                    run + counts[b][j] as isize - counts[c][j] as isize + counts[c][n] as isize;
                best_correct = best_correct.max(corr as usize);
            }
        }
    }
    Ok(1.0 - best_correct as f64 / n as f64)
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..k).collect();
    heap_permute(&mut items, k, &mut out);
    out
}

fn heap_permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k <= 1 {
        out.push(items.clone());
        return;
    }
    for i in 0..k {
        heap_permute(items, k - 1, out);
        if k % 2 == 0 {
            items.swap(i, k - 1);
        } else {
            items.swap(0, k - 1);
        }
    }
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::invalid_argument("spearman needs ≥ 3 paired values"));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma).powi(2);
        db += (rb[i] - mb).powi(2);
    }
    if da == 0.0 || db == 0.0 {
        return Err(Error::invalid_argument(
            "spearman undefined for constant input",
        ));
    }
    Ok(num / (da * db).sqrt())
}

// ---------------------------------------------------------------------------
// Volume metrics

/// Fourier shell correlation curve; frequencies are normalized so Nyquist
/// is 1.
#[derive(Debug, Clone)]
pub struct FscCurve {
    pub shell_freqs: Vec<f64>,
    pub correlations: Vec<f64>,
}

/// Per-shell normalized cross-correlation of the volumes' 3D Fourier
/// coefficients, computed from their Hartley transforms (Re F and Im F are
/// the even/odd parts of H under k ↦ −k).
pub fn fsc(a: &VolumeGrid, b: &VolumeGrid) -> Result<FscCurve> {
    let d = a.side();
    if b.side() != d || a.pixel_size != b.pixel_size {
        return Err(Error::invalid_argument(
            "fsc needs matching side and pixel size",
        ));
    }
    let ha = hartley_3d(a);
    let hb = hartley_3d(b);
    let n_shell = d / 2;
    let mut num = vec![0.0; n_shell + 1];
    let mut den_a = vec![0.0; n_shell + 1];
    let mut den_b = vec![0.0; n_shell + 1];
    let half = (d / 2) as isize;
    let negi = |i: usize| (d - i) % d;
    for iz in 0..d {
        let kz = iz as isize - half;
        for iy in 0..d {
            let ky = iy as isize - half;
            for ix in 0..d {
                let kx = ix as isize - half;
                let r = ((kx * kx + ky * ky + kz * kz) as f64).sqrt();
                let shell = r.round() as usize;
                if shell > n_shell {
                    continue;
                }
                let (ca, cn) = (
                    ha.data[(iz, iy, ix)],
                    ha.data[(negi(iz), negi(iy), negi(ix))],
                );
                let (da, db) = (
                    hb.data[(iz, iy, ix)],
                    hb.data[(negi(iz), negi(iy), negi(ix))],
                );
                // F = E − iO with E,O the even/odd parts of H;
                // Re(Fa·conj(Fb)) = Ea·Eb + Oa·Ob
                let (ea, oa) = (0.5 * (ca + cn), 0.5 * (ca - cn));
                let (eb, ob) = (0.5 * (da + db), 0.5 * (da - db));
                num[shell] += ea * eb + oa * ob;
                den_a[shell] += ea * ea + oa * oa;
                den_b[shell] += eb * eb + ob * ob;
            }
        }
    }
    let mut shell_freqs = Vec::with_capacity(n_shell);
    let mut correlations = Vec::with_capacity(n_shell);
    for s in 1..=n_shell {
        shell_freqs.push(s as f64 / n_shell as f64);
        let den = (den_a[s] * den_b[s]).sqrt();
        correlations.push(if den == 0.0 { 0.0 } else { num[s] / den });
    }
    Ok(FscCurve {
        shell_freqs,
        correlations,
    })
}

/// Resolution in pixels from the 0.5 criterion: 1 / f* with f* the largest
/// frequency such that every shell up to f* is above 0.5. `None` when even
/// the first shell is at or below 0.5 ("unresolved"); full-band agreement
/// reports Nyquist (2.0 pixels).
pub fn resolution_at_half(curve: &FscCurve) -> Option<f64> {
    let mut last_good: Option<f64> = None;
    for (f, c) in curve.shell_freqs.iter().zip(curve.correlations.iter()) {
        if *c > 0.5 {
            last_good = Some(*f);
        } else {
            break;
        }
    }
    // normalized frequency f has period 2/f pixels
    last_good.map(|f| 2.0 / f)
}

/// Hartley/Fourier-domain attenuation of integrating over a width-`s` pixel
/// box, on the centered D³ lattice: ∏ᵢ sinc(π fᵢ s) with fᵢ in cycles per
/// pixel (±0.5 at Nyquist). Multiply a volume's Hartley grid by this before
/// FSC against a reconstruction.
pub fn pixel_window(d: usize, s: f64) -> Array3<f64> {
    assert!(s > 0.0);
    let profile: Vec<f64> = (0..d)
        .map(|i| {
            let f = (i as f64 - (d / 2) as f64) / d as f64; // cycles/pixel
            let x = std::f64::consts::PI * f * s;
            if x.abs() < 1e-12 {
                1.0
            } else {
                x.sin() / x
            }
        })
        .collect();
    Array3::from_shape_fn((d, d, d), |(iz, iy, ix)| {
        profile[iz] * profile[iy] * profile[ix]
    })
}

/// Applies the pixel window to a real-space volume (transform, attenuate,
/// transform back).
pub fn apply_pixel_window(vol: &VolumeGrid, s: f64) -> VolumeGrid {
    let mut ht = hartley_3d(vol);
    let w = pixel_window(vol.side(), s);
    ht.data *= &w;
    crate::xform::inverse_hartley_3d(&ht)
}

/// 1D K-means (Lloyd) on scalar values; returns (centroids ascending,
/// assignment per point).
pub fn kmeans_1d(values: &[f64], k: usize, iters: usize) -> (Vec<f64>, Vec<usize>) {
    assert!(k >= 1 && !values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // quantile initialization
    let mut centers: Vec<f64> = (0..k)
        .map(|i| sorted[(i * (values.len() - 1)) / k.max(1) + (values.len() - 1) / (2 * k)])
        .collect();
    let mut assign = vec![0usize; values.len()];
    for _ in 0..iters {
        for (i, &v) in values.iter().enumerate() {
            assign[i] = centers
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    (v - **a).abs().partial_cmp(&(v - **b).abs()).unwrap()
                })
                .unwrap()
                .0;
        }
        for (ci, c) in centers.iter_mut().enumerate() {
            let members: Vec<f64> = values
                .iter()
                .zip(assign.iter())
                .filter(|(_, &a)| a == ci)
                .map(|(&v, _)| v)
                .collect();
            if !members.is_empty() {
                *c = members.iter().sum::<f64>() / members.len() as f64;
            }
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centers[a].partial_cmp(&centers[b]).unwrap());
    let relabel: Vec<usize> = {
        let mut r = vec![0; k];
        for (new, &old) in order.iter().enumerate() {
            r[old] = new;
        }
        r
    };
    let centers_sorted: Vec<f64> = order.iter().map(|&i| centers[i]).collect();
    for a in assign.iter_mut() {
        *a = relabel[*a];
    }
    (centers_sorted, assign)
}
