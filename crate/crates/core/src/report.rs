//! Evaluation driver: runs a trained model over a dataset, computes the full
//! metric set (ground truth permitting), aligns reconstructions to the
//! ground-truth frame, and writes a report, a machine-readable summary row,
//! plots, and reconstructed volumes. Also hosts the PC1 traversal.

use crate::ad::Scalar;
use crate::error::{Error, Result};
use crate::eval::{
    align_poses, apply_alignment, apply_pixel_window, confusion_error, fsc, kmeans_1d, pca,
    pose_errors, resolution_at_half, spearman, AlignmentResult, FscCurve, Pca, PoseErrors,
};
use crate::geometry::{s2s2_to_rotation, Pose, Rotation};
use crate::sim::{write_volume_stack, Dataset};
use crate::train::Model;
use crate::xform::{hartley_3d, inverse_hartley_3d, VolumeGrid};
use nalgebra::Matrix3;
use ndarray::{Array2, Array3, ArrayView2};
use std::io::Write;
use std::path::Path;

// ---------------------------------------------------------------------------
// Volume alignment

/// Resamples `vol` so that `out(x) = vol(M·x)`, with coordinates measured
/// in voxels about the grid center D/2 and trilinear interpolation (zero
/// outside the grid). `M` acts on (x, y, z) vectors.
pub fn resample_volume(vol: &VolumeGrid, m: &Matrix3<f64>) -> VolumeGrid {
    let d = vol.side();
    let c = (d / 2) as f64;
    let sample = |x: f64, y: f64, z: f64| -> f64 {
        let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
        let (fx, fy, fz) = (x - x0, y - y0, z - z0);
        let mut acc = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let (ix, iy, iz) = (x0 as i64 + dx, y0 as i64 + dy, z0 as i64 + dz);
                    if ix < 0 || iy < 0 || iz < 0 {
                        continue;
                    }
                    let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
                    if ix >= d || iy >= d || iz >= d {
                        continue;
                    }
                    let w = (if dx == 1 { fx } else { 1.0 - fx })
                        * (if dy == 1 { fy } else { 1.0 - fy })
                        * (if dz == 1 { fz } else { 1.0 - fz });
                    acc += w * vol.data[(iz, iy, ix)];
                }
            }
        }
        acc
    };
    let data = Array3::from_shape_fn((d, d, d), |(iz, iy, ix)| {
        let p = nalgebra::Vector3::new(ix as f64 - c, iy as f64 - c, iz as f64 - c);
        let q = m * p;
        sample(q.x + c, q.y + c, q.z + c)
    });
    VolumeGrid::new(data, vol.pixel_size).expect("same side")
}

/// Maps a reconstruction into the ground-truth frame using the pose
/// alignment: the decoder volume V̂ satisfies V(x) = V̂(Gᵀx) (or V̂(J·Gᵀx)
/// when the handedness branch was mirrored, J = diag(1,1,−1)).
pub fn align_reconstruction(recon: &VolumeGrid, alignment: &AlignmentResult) -> VolumeGrid {
    let gt = alignment.global_rotation.matrix().transpose();
    let m = if alignment.mirrored {
        Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, -1.0)) * gt
    } else {
        gt
    };
    resample_volume(recon, &m)
}

/// Even/odd split of a Hartley transform under k ↦ −k gives Re F and Im F.
fn eo_split(h: &Array3<f64>, d: usize) -> (Array3<f64>, Array3<f64>) {
    let neg = |i: usize| (d - i) % d;
    let e = Array3::from_shape_fn((d, d, d), |(z, y, x)| {
        0.5 * (h[(z, y, x)] + h[(neg(z), neg(y), neg(x))])
    });
    let o = Array3::from_shape_fn((d, d, d), |(z, y, x)| {
        0.5 * (h[(z, y, x)] - h[(neg(z), neg(y), neg(x))])
    });
    (e, o)
}

/// Estimates the translation (in voxels, sub-voxel precision) that best maps
/// `a` onto `b`: shifting `a` by the returned vector maximizes the circular
/// cross-correlation with `b`.
pub fn estimate_shift(a: &VolumeGrid, b: &VolumeGrid) -> [f64; 3] {
    let d = a.side();
    let ha = hartley_3d(a);
    let hb = hartley_3d(b);
    let (ea, oa) = eo_split(&ha.data, d);
    let (eb, ob) = eo_split(&hb.data, d);
    // C = Fa·conj(Fb); the correlation map is real with Hartley transform
    // Re C − Im C.
    let hc = Array3::from_shape_fn((d, d, d), |i| {
        ea[i] * eb[i] + oa[i] * ob[i] - (oa[i] * eb[i] - ea[i] * ob[i])
    });
    let corr = inverse_hartley_3d(&VolumeGrid::new(hc, a.pixel_size).unwrap());
    let mut best = (f64::NEG_INFINITY, [0usize; 3]);
    for iz in 0..d {
        for iy in 0..d {
            for ix in 0..d {
                let v = corr.data[(iz, iy, ix)];
                if v > best.0 {
                    best = (v, [iz, iy, ix]);
                }
            }
        }
    }
    let [pz, py, px] = best.1;
    // parabolic sub-voxel refinement along each axis (circular neighbors)
    let refine = |m1: f64, c0: f64, p1: f64| -> f64 {
        let denom = m1 - 2.0 * c0 + p1;
        if denom.abs() < 1e-12 {
            0.0
        } else {
            (0.5 * (m1 - p1) / denom).clamp(-0.5, 0.5)
        }
    };
    let g = |z: usize, y: usize, x: usize| corr.data[(z % d, y % d, x % d)];
    let fz = refine(g(pz + d - 1, py, px), best.0, g(pz + 1, py, px));
    let fy = refine(g(pz, py + d - 1, px), best.0, g(pz, py + 1, px));
    let fx = refine(g(pz, py, px + d - 1), best.0, g(pz, py, px + 1));
    let c = (d / 2) as f64;
    // peak at the center index means zero shift; the sign convention is
    // fixed by shift_volume (verified against an integer roll in tests)
    [
        px as f64 + fx - c,
        py as f64 + fy - c,
        pz as f64 + fz - c,
    ]
}

/// Translates a volume by `t = [tx, ty, tz]` voxels (content moves toward
/// positive indices for positive components), via Hartley-domain phases.
pub fn shift_volume(vol: &VolumeGrid, t: [f64; 3]) -> VolumeGrid {
    let d = vol.side();
    let h = hartley_3d(vol);
    let neg = |i: usize| (d - i) % d;
    let two_pi = 2.0 * std::f64::consts::PI;
    let data = Array3::from_shape_fn((d, d, d), |(z, y, x)| {
        let kx = x as f64 - (d / 2) as f64;
        let ky = y as f64 - (d / 2) as f64;
        let kz = z as f64 - (d / 2) as f64;
        let theta = two_pi * (kx * t[0] + ky * t[1] + kz * t[2]) / d as f64;
        theta.cos() * h.data[(z, y, x)] + theta.sin() * h.data[(neg(z), neg(y), neg(x))]
    });
    inverse_hartley_3d(&VolumeGrid::new(data, vol.pixel_size).unwrap())
}

// ---------------------------------------------------------------------------
// Evaluation run

/// FSC of one reconstructed cluster volume against its ground-truth match.
#[derive(Debug, Clone)]
pub struct ClusterFsc {
    pub cluster: usize,
    pub gt_class: u32,
    pub resolution_px: Option<f64>,
    pub curve: FscCurve,
}

/// Everything evaluate_run computes; also serialized into report.txt and
/// summary.csv.
pub struct EvalSummary {
    pub n: usize,
    pub d: usize,
    pub d_conf: usize,
    pub pca: Pca,
    pub centroids: Vec<f64>,
    pub cluster_sizes: Vec<usize>,
    pub confusion: Option<f64>,
    pub spearman_pc1: Option<f64>,
    pub alignment: Option<AlignmentResult>,
    pub pose: Option<PoseErrors>,
    pub fsc: Vec<ClusterFsc>,
}

fn encode_all<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
) -> (Array2<f64>, Vec<Pose>) {
    let outs = model.encoder.encode_batch(&model.params, &dataset.images);
    let d_conf = model.cfg.d_conf;
    let mut z = Array2::zeros((outs.len(), d_conf));
    let mut poses = Vec::with_capacity(outs.len());
    for (i, o) in outs.iter().enumerate() {
        for j in 0..d_conf {
            z[(i, j)] = o.z[j];
        }
        let rot = s2s2_to_rotation(&o.rot6).unwrap_or_else(|_| Rotation::identity());
        poses.push(Pose::new(rot, o.t));
    }
    (z, poses)
}

fn gt_classes(dataset: &Dataset) -> Option<Vec<u32>> {
    dataset
        .rows
        .iter()
        .map(|r| r.gt_class)
        .collect::<Option<Vec<_>>>()
}

fn gt_poses(dataset: &Dataset) -> Option<Vec<Pose>> {
    dataset
        .rows
        .iter()
        .map(|r| {
            let rot = Rotation::from_flat(&r.rot?).ok()?;
            Some(Pose::new(rot, r.trans?))
        })
        .collect()
}

/// Maps a PC1 coordinate back to a full latent vector: mean + c·PC1, other
/// components zero.
pub fn z_from_pc1(p: &Pca, c: f64) -> Vec<f64> {
    p.mean
        .iter()
        .enumerate()
        .map(|(j, m)| m + c * p.components[(0, j)])
        .collect()
}

/// Runs the §4.1-style evaluation: encodes every image, computes latent,
/// cluster, pose, and FSC metrics (degrading gracefully when ground-truth
/// columns are absent), and writes report.txt, summary.csv, plots, and
/// reconstructed cluster volumes into `out_dir`.
pub fn evaluate_run<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<EvalSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (z, pred_poses) = encode_all(model, dataset);
    let p = pca(z.view())?;
    let pc1: Vec<f64> = p.projections.column(0).iter().cloned().collect();
    let classes = gt_classes(dataset);

    let k = classes
        .as_ref()
        .map(|c| {
            let mut u = c.clone();
            u.sort_unstable();
            u.dedup();
            u.len().clamp(2, 3)
        })
        .unwrap_or(2);
    let (centroids, assign) = kmeans_1d(&pc1, k, 100);
    let mut cluster_sizes = vec![0usize; k];
    for &a in &assign {
        cluster_sizes[a] += 1;
    }

    let confusion = classes
        .as_ref()
        .and_then(|c| confusion_error(&pc1, c).ok());
    let spearman_pc1 = classes.as_ref().and_then(|c| {
        let idx: Vec<f64> = c.iter().map(|&v| v as f64).collect();
        spearman(&pc1, &idx).ok()
    });

    let gtp = gt_poses(dataset);
    let alignment = gtp
        .as_ref()
        .and_then(|gt| align_poses(&pred_poses, gt).ok());
    let pose = match (&gtp, &alignment) {
        (Some(gt), Some(al)) => Some(pose_errors(&pred_poses, gt, al)),
        _ => None,
    };

    // cluster-centroid volumes, in the decoder frame
    let recon: Vec<VolumeGrid> = centroids
        .iter()
        .map(|&c| {
            model
                .field
                .extract_volume(&model.params, &z_from_pc1(&p, c), dataset.pixel_size)
        })
        .collect();
    write_volume_stack(&out_dir.join("recon_volumes.cfrk"), &recon)?;

    // windowed-FSC against ground truth, when class labels, poses, and the
    // ground-truth volume stack are all available
    let mut fsc_rows = Vec::new();
    if let (Some(classes), Some(al), Ok(gt_vols)) =
        (&classes, &alignment, dataset.gt_volumes())
    {
        for (ci, rv) in recon.iter().enumerate() {
            // match the cluster to a ground-truth class by majority vote
            let mut votes = std::collections::BTreeMap::new();
            for (i, &a) in assign.iter().enumerate() {
                if a == ci {
                    *votes.entry(classes[i]).or_insert(0usize) += 1;
                }
            }
            let Some((&cls, _)) = votes.iter().max_by_key(|(_, &v)| v) else {
                continue;
            };
            let Some(gt_vol) = gt_vols.get(cls as usize) else {
                continue;
            };
            let windowed = apply_pixel_window(gt_vol, 1.0);
            let aligned = align_reconstruction(rv, al);
            let shift = estimate_shift(&aligned, &windowed);
            let registered = shift_volume(&aligned, shift);
            let curve = fsc(&registered, &windowed)?;
            fsc_rows.push(ClusterFsc {
                cluster: ci,
                gt_class: cls,
                resolution_px: resolution_at_half(&curve),
                curve,
            });
        }
    }

    let summary = EvalSummary {
        n: dataset.n(),
        d: dataset.d(),
        d_conf: model.cfg.d_conf,
        pca: p,
        centroids,
        cluster_sizes,
        confusion,
        spearman_pc1,
        alignment,
        pose,
        fsc: fsc_rows,
    };
    write_report(&summary, out_dir)?;
    write_plots(&summary, &z, classes.as_deref(), &pred_poses, out_dir)?;
    Ok(summary)
}

/// Loads a checkpoint and evaluates it; the CLI entry point.
pub fn evaluate_checkpoint(ckpt: &Path, dataset: &Dataset, out_dir: &Path) -> Result<EvalSummary> {
    let (model, _) = crate::train::model_from_checkpoint(ckpt)?;
    evaluate_run(&model, dataset, out_dir)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |x| format!("{x:.6}"))
}

fn write_report(s: &EvalSummary, out_dir: &Path) -> Result<()> {
    let path = out_dir.join("report.txt");
    let mut t = String::new();
    t.push_str("[dataset]\n");
    t.push_str(&format!("n: {}\nd: {}\n\n", s.n, s.d));
    t.push_str("[latents]\n");
    t.push_str(&format!("d_conf: {}\n", s.d_conf));
    t.push_str(&format!(
        "explained_variance: {}\n",
        s.pca
            .explained_variance
            .iter()
            .map(|v| format!("{v:.6e}"))
            .collect::<Vec<_>>()
            .join(" ")
    ));
    t.push_str(&format!(
        "pc1_centroids: {}\n",
        s.centroids
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(" ")
    ));
    t.push_str(&format!(
        "cluster_sizes: {}\n\n",
        s.cluster_sizes
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    ));
    t.push_str("[clusters]\n");
    t.push_str(&format!("confusion_error: {}\n", fmt_opt(s.confusion)));
    t.push_str(&format!("spearman_pc1: {}\n\n", fmt_opt(s.spearman_pc1)));
    t.push_str("[poses]\n");
    match (&s.alignment, &s.pose) {
        (Some(al), Some(pe)) => {
            t.push_str(&format!("mirrored: {}\n", al.mirrored));
            t.push_str(&format!(
                "alignment_residual_median_deg: {:.6}\n",
                al.residual_median_deg
            ));
            t.push_str(&format!("rot_median_deg: {:.6}\n", pe.rot_median_deg));
            t.push_str(&format!("rot_mean_deg: {:.6}\n", pe.rot_mean_deg));
            t.push_str(&format!("trans_median_pix: {:.6}\n", pe.trans_median_pix));
            t.push_str(&format!("trans_mse_pix: {:.6}\n", pe.trans_mse_pix));
            // offset-subtracted figures remove the global shift ambiguity of
            // the alignment; both conventions are reported
            t.push_str(&format!(
                "trans_median_offsub_pix: {:.6}\n",
                pe.trans_median_offsub_pix
            ));
            t.push_str(&format!(
                "trans_mse_offsub_pix: {:.6}\n",
                pe.trans_mse_offsub_pix
            ));
            t.push_str(&format!(
                "trans_offset: {:.6} {:.6}\n",
                pe.trans_offset[0], pe.trans_offset[1]
            ));
        }
        _ => t.push_str("ground_truth: absent\n"),
    }
    t.push_str("\n[fsc]\n");
    if s.fsc.is_empty() {
        t.push_str("ground_truth: absent\n");
    }
    for row in &s.fsc {
        t.push_str(&format!(
            "cluster {} vs gt_class {}: resolution_px {}\n",
            row.cluster,
            row.gt_class,
            row.resolution_px
                .map_or("unresolved".to_string(), |v| format!("{v:.3}"))
        ));
    }
    std::fs::write(&path, t).map_err(|e| Error::io(&path, e))?;

    let csv_path = out_dir.join("summary.csv");
    let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(
        w,
        "n,d,d_conf,confusion,spearman_pc1,rot_median_deg,rot_mean_deg,\
         trans_median_pix,trans_mse_pix,trans_median_offsub_pix,trans_mse_offsub_pix,\
         best_resolution_px"
    )
    .map_err(|e| Error::io(&csv_path, e))?;
    let pe = s.pose.as_ref();
    writeln!(
        w,
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        s.n,
        s.d,
        s.d_conf,
        fmt_opt(s.confusion),
        fmt_opt(s.spearman_pc1),
        fmt_opt(pe.map(|p| p.rot_median_deg)),
        fmt_opt(pe.map(|p| p.rot_mean_deg)),
        fmt_opt(pe.map(|p| p.trans_median_pix)),
        fmt_opt(pe.map(|p| p.trans_mse_pix)),
        fmt_opt(pe.map(|p| p.trans_median_offsub_pix)),
        fmt_opt(pe.map(|p| p.trans_mse_offsub_pix)),
        fmt_opt(s.fsc.iter().filter_map(|r| r.resolution_px).fold(None, |a: Option<f64>, v| {
            Some(a.map_or(v, |x| x.min(v)))
        })),
    )
    .map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

fn write_plots(
    s: &EvalSummary,
    _z: &Array2<f64>,
    classes: Option<&[u32]>,
    pred_poses: &[Pose],
    out_dir: &Path,
) -> Result<()> {
    // PC1/PC2 scatter colored by ground-truth class (single color without)
    let proj = &s.pca.projections;
    let pts: Vec<(f64, f64, usize)> = (0..proj.nrows())
        .map(|i| {
            let y = if proj.ncols() > 1 { proj[(i, 1)] } else { 0.0 };
            let c = classes.map_or(0, |cl| cl[i] as usize);
            (proj[(i, 0)], y, c)
        })
        .collect();
    plot::scatter(&out_dir.join("pc1_scatter.png"), &pts)?;

    // view-direction density over (azimuth, z) — an equal-area unfolding
    let mut hist = Array2::<f64>::zeros((18, 36));
    for pose in pred_poses {
        let r = match &s.alignment {
            Some(al) => apply_alignment(al, &pose.rotation),
            None => pose.rotation.clone(),
        };
        let v = r.view_axis();
        let az = v[1].atan2(v[0]); // [−π, π]
        let zz = v[2].clamp(-1.0, 1.0);
        let bx = (((az + std::f64::consts::PI) / (2.0 * std::f64::consts::PI)) * 36.0)
            .min(35.0) as usize;
        let by = (((zz + 1.0) / 2.0) * 18.0).min(17.0) as usize;
        hist[(by, bx)] += 1.0;
    }
    plot::heatmap(&out_dir.join("view_directions.png"), &hist)?;

    // FSC curves with the 0.5 line
    if !s.fsc.is_empty() {
        let curves: Vec<Vec<(f64, f64)>> = s
            .fsc
            .iter()
            .map(|r| {
                r.curve
                    .shell_freqs
                    .iter()
                    .zip(r.curve.correlations.iter())
                    .map(|(&f, &c)| (f, c))
                    .collect()
            })
            .collect();
        plot::curves(&out_dir.join("fsc.png"), &curves, -0.2, 1.05, Some(0.5))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Traversal

/// Samples `n_points` equally spaced PC1 values spanning the observed
/// projection range, maps each back to z-space (other components zero), and
/// extracts a volume per point. Returns the PC1 values and the volumes.
pub fn traverse<T: Scalar>(
    model: &Model<T>,
    latents: ArrayView2<f64>,
    n_points: usize,
    pixel_size: f64,
) -> Result<(Vec<f64>, Vec<VolumeGrid>)> {
    if n_points < 2 {
        return Err(Error::invalid_argument("traverse needs at least 2 points"));
    }
    let p = pca(latents)?;
    let pc1 = p.projections.column(0);
    let lo = pc1.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = pc1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let vals: Vec<f64> = (0..n_points)
        .map(|i| lo + (hi - lo) * i as f64 / (n_points - 1) as f64)
        .collect();
    let vols = vals
        .iter()
        .map(|&c| {
            model
                .field
                .extract_volume(&model.params, &z_from_pc1(&p, c), pixel_size)
        })
        .collect();
    Ok((vals, vols))
}

/// Checkpoint-level traversal: encodes the dataset to get the observed PC1
/// range, then extracts and writes the volumes.
pub fn traverse_checkpoint(
    ckpt: &Path,
    dataset: &Dataset,
    n_points: usize,
    out_dir: &Path,
) -> Result<Vec<f64>> {
    let (model, _) = crate::train::model_from_checkpoint(ckpt)?;
    let (z, _) = encode_all(&model, dataset);
    let (vals, vols) = traverse(&model, z.view(), n_points, dataset.pixel_size)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_volume_stack(&out_dir.join("traverse_volumes.cfrk"), &vols)?;
    let list = out_dir.join("traverse_pc1.txt");
    let text: String = vals.iter().map(|v| format!("{v}\n")).collect();
    std::fs::write(&list, text).map_err(|e| Error::io(&list, e))?;
    Ok(vals)
}

// ---------------------------------------------------------------------------
// Minimal raster plotting

mod plot {
    use super::{Error, Result};
    use image::{Rgb, RgbImage};
    use ndarray::Array2;
    use std::path::Path;

    const W: u32 = 480;
    const H: u32 = 480;
    const MARGIN: u32 = 24;
    const PALETTE: [[u8; 3]; 6] = [
        [31, 119, 180],
        [255, 127, 14],
        [44, 160, 44],
        [214, 39, 40],
        [148, 103, 189],
        [127, 127, 127],
    ];

    fn save(img: &RgbImage, path: &Path) -> Result<()> {
        img.save(path)
            .map_err(|e| Error::format(path, format!("png save failed: {e}")))
    }

    fn frame() -> RgbImage {
        let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
        for x in MARGIN..W - MARGIN {
            img.put_pixel(x, MARGIN, Rgb([0, 0, 0]));
            img.put_pixel(x, H - MARGIN, Rgb([0, 0, 0]));
        }
        for y in MARGIN..=H - MARGIN {
            img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
            img.put_pixel(W - MARGIN, y, Rgb([0, 0, 0]));
        }
        img
    }

    fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in vals {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(lo.is_finite() && hi.is_finite()) || lo == hi {
            (lo - 1.0, lo + 1.0)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    }

    fn to_px(v: f64, lo: f64, hi: f64, size: u32) -> u32 {
        let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        MARGIN + (t * (size - 2 * MARGIN) as f64) as u32
    }

    pub fn scatter(path: &Path, pts: &[(f64, f64, usize)]) -> Result<()> {
        let mut img = frame();
        let (x0, x1) = span(pts.iter().map(|p| p.0));
        let (y0, y1) = span(pts.iter().map(|p| p.1));
        for &(x, y, c) in pts {
            let px = to_px(x, x0, x1, W);
            let py = H - to_px(y, y0, y1, H); // y axis upward
            let col = PALETTE[c % PALETTE.len()];
            for dx in -1i32..=1 {
                for dy in -1i32..=1 {
                    let (qx, qy) = (px as i32 + dx, py as i32 + dy);
                    if qx > 0 && qy > 0 && (qx as u32) < W && (qy as u32) < H {
                        img.put_pixel(qx as u32, qy as u32, Rgb(col));
                    }
                }
            }
        }
        save(&img, path)
    }

    pub fn heatmap(path: &Path, grid: &Array2<f64>) -> Result<()> {
        let (rows, cols) = grid.dim();
        let scale = 12u32;
        let mut img = RgbImage::new(cols as u32 * scale, rows as u32 * scale);
        let max = grid.iter().cloned().fold(0.0f64, f64::max).max(1.0);
        for r in 0..rows {
            for c in 0..cols {
                let t = (grid[(r, c)] / max).powf(0.5); // γ for visibility
                let v = (t * 255.0) as u8;
                let col = Rgb([v, v / 2, 255 - v]);
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(c as u32 * scale + dx, r as u32 * scale + dy, col);
                    }
                }
            }
        }
        save(&img, path)
    }

    pub fn curves(
        path: &Path,
        curves: &[Vec<(f64, f64)>],
        y_lo: f64,
        y_hi: f64,
        hline: Option<f64>,
    ) -> Result<()> {
        let mut img = frame();
        let (x0, x1) = span(curves.iter().flatten().map(|p| p.0));
        if let Some(h) = hline {
            let py = H - to_px(h, y_lo, y_hi, H);
            for x in MARGIN..W - MARGIN {
                img.put_pixel(x, py, Rgb([200, 200, 200]));
            }
        }
        for (ci, curve) in curves.iter().enumerate() {
            let col = PALETTE[ci % PALETTE.len()];
            let mut prev: Option<(i64, i64)> = None;
            for &(x, y) in curve {
                let px = to_px(x, x0, x1, W) as i64;
                let py = (H - to_px(y, y_lo, y_hi, H)) as i64;
                if let Some((ax, ay)) = prev {
                    // Bresenham-ish: dense parameterized segment
                    let steps = (px - ax).abs().max((py - ay).abs()).max(1);
                    for s in 0..=steps {
                        let qx = ax + (px - ax) * s / steps;
                        let qy = ay + (py - ay) * s / steps;
                        if qx > 0 && qy > 0 && (qx as u32) < W && (qy as u32) < H {
                            img.put_pixel(qx as u32, qy as u32, Rgb(col));
                        }
                    }
                }
                prev = Some((px, py));
            }
        }
        save(&img, path)
    }
}

// ---------------------------------------------------------------------------
