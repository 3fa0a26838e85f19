//! End-to-end optimization: the amortized forward operator (encoder →
//! rotation/translation/conformation → neural-field slice → CTF → shift),
//! the symmetric loss, the pose-only warm-up phase, the training loop, and
//! checkpointing.

use crate::ad::{Scalar, Var};
use crate::encoder::{s2s2_graph, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{align_poses, pose_errors};
use crate::field::{Field, FieldConfig};
use crate::geometry::{PlaneLattice, Pose};
use crate::nn::{Adam, Graph, Mode, ParamSet};
use crate::optics::{ctf_eval, derive_seed};
use crate::sim::{parse_key_values, Dataset};
use crate::xform::{hartley_2d, RealImage};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Training runs in single precision: fast on CPUs, and checkpoints (which
/// store f32 arrays) round-trip bit-exactly.
pub type TrainScalar = f32;

// ---------------------------------------------------------------------------
// Model

/// Architecture knobs shared by training, evaluation, and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub d_conf: usize,
    pub enc_width: usize,
    pub enc_base: usize,
    pub field_width: usize,
    pub hermitian: bool,
}

impl ModelConfig {
    pub fn to_key_values(&self) -> String {
        format!(
            "d = {}\nd_conf = {}\nenc_width = {}\nenc_base = {}\nfield_width = {}\nhermitian = {}\n",
            self.d, self.d_conf, self.enc_width, self.enc_base, self.field_width, self.hermitian
        )
    }

    pub fn from_key_values(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<&String> {
            map.get(k)
                .ok_or_else(|| Error::Config(format!("missing model key {k}")))
        };
        let parse = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("bad model value for {k}")))
        };
        Ok(ModelConfig {
            d: parse("d")?,
            d_conf: parse("d_conf")?,
            enc_width: parse("enc_width")?,
            enc_base: parse("enc_base")?,
            field_width: parse("field_width")?,
            hermitian: get("hermitian")? == "true",
        })
    }
}

/// Encoder + field sharing one parameter set.
pub struct Model<T: Scalar> {
    pub params: ParamSet<T>,
    pub encoder: Encoder,
    pub field: Field,
    pub cfg: ModelConfig,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, 100));
        let encoder = Encoder::new(
            &mut params,
            &mut rng,
            EncoderConfig::desk(cfg.d, cfg.d_conf, cfg.enc_width, cfg.enc_base),
        )?;
        let field = Field::new(
            &mut params,
            &mut rng,
            FieldConfig::new(cfg.d, cfg.d_conf, cfg.field_width),
        );
        Ok(Model {
            params,
            encoder,
            field,
            cfg: cfg.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// Train config

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Images seen before the conformation head activates.
    pub pose_only_images: u64,
    pub epochs: usize,
    pub seed: u64,
    pub mask_loss_to_disc: bool,
    /// Re-sample the pose-only z draws on every visit (vs. fixed per image).
    pub resample_z: bool,
    pub checkpoint_every: usize,
    /// Optional global step cap (for short deterministic runs).
    pub max_steps: Option<u64>,
    /// Images used for the per-epoch pose-error metric (0 disables).
    pub metric_subset: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig {
                d: 32,
                d_conf: 8,
                enc_width: 128,
                enc_base: 16,
                field_width: 128,
                hermitian: true,
            },
            batch_size: 64,
            learning_rate: 1e-4,
            pose_only_images: 0,
            epochs: 30,
            seed: 0,
            mask_loss_to_disc: true,
            resample_z: true,
            checkpoint_every: 1,
            max_steps: None,
            metric_subset: 1000,
        }
    }
}

impl TrainConfig {
    pub fn from_key_values(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in map {
            let bad = || Error::Config(format!("bad value for {k}: {v:?}"));
            match k.as_str() {
                "d" => cfg.model.d = v.parse().map_err(|_| bad())?,
                "d_conf" => cfg.model.d_conf = v.parse().map_err(|_| bad())?,
                "enc_width" => cfg.model.enc_width = v.parse().map_err(|_| bad())?,
                "enc_base" => cfg.model.enc_base = v.parse().map_err(|_| bad())?,
                "field_width" => cfg.model.field_width = v.parse().map_err(|_| bad())?,
                "hermitian" => cfg.model.hermitian = v == "true",
                "batch_size" => cfg.batch_size = v.parse().map_err(|_| bad())?,
                "learning_rate" => cfg.learning_rate = v.parse().map_err(|_| bad())?,
                "pose_only_images" => cfg.pose_only_images = v.parse().map_err(|_| bad())?,
                "epochs" => cfg.epochs = v.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                "mask_loss_to_disc" => cfg.mask_loss_to_disc = v == "true",
                "resample_z" => cfg.resample_z = v == "true",
                "checkpoint_every" => cfg.checkpoint_every = v.parse().map_err(|_| bad())?,
                "max_steps" => {
                    cfg.max_steps = if v == "none" {
                        None
                    } else {
                        Some(v.parse().map_err(|_| bad())?)
                    }
                }
                "metric_subset" => cfg.metric_subset = v.parse().map_err(|_| bad())?,
                other => return Err(Error::Config(format!("unknown train key {other:?}"))),
            }
        }
        if cfg.batch_size < 1 || cfg.learning_rate <= 0.0 {
            return Err(Error::Config(
                "batch_size must be ≥ 1 and learning_rate > 0".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> String {
        let mut s = self.model.to_key_values();
        s.push_str(&format!(
            "batch_size = {}\nlearning_rate = {}\npose_only_images = {}\nepochs = {}\nseed = {}\n\
             mask_loss_to_disc = {}\nresample_z = {}\ncheckpoint_every = {}\nmax_steps = {}\n\
             metric_subset = {}\n",
            self.batch_size,
            self.learning_rate,
            self.pose_only_images,
            self.epochs,
            self.seed,
            self.mask_loss_to_disc,
            self.resample_z,
            self.checkpoint_every,
            self.max_steps.map_or("none".to_string(), |v| v.to_string()),
            self.metric_subset
        ));
        s
    }

    /// SHA-256 digest of the canonical config text; stored in checkpoints
    /// so a resume with a different config fails loudly.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.to_key_values().as_bytes());
        h.finalize().into()
    }
}

// ---------------------------------------------------------------------------
// Forward pass

/// The 180° in-plane rotation: index i ↦ (D − i) mod D about the grid
/// center, on both axes. Exact and an involution.
pub fn rotate_pi_image(img: &Array2<f64>) -> Array2<f64> {
    let d = img.nrows();
    Array2::from_shape_fn((d, d), |(y, x)| img[((d - y) % d, (d - x) % d)])
}

/// Per-batch inputs for the symmetric loss.
pub struct LossBatch<T> {
    /// [B,1,D,D] measured images.
    pub images: ArrayD<T>,
    /// [B,1,D,D] π-rotated measured images.
    pub images_rot: ArrayD<T>,
    /// [B,D²] Hartley transforms of the measured images.
    pub targets: Array2<T>,
    /// [B,D²] Hartley transforms of the rotated images.
    pub targets_rot: Array2<T>,
    /// [B,D²] CTF values.
    pub ctf: Array2<T>,
}

impl<T: Clone> LossBatch<T> {
    /// The batch with every input π-rotated: images and targets swap roles
    /// with their rotated counterparts.
    pub fn rotated(&self) -> Self {
        LossBatch {
            images: self.images_rot.clone(),
            images_rot: self.images.clone(),
            targets: self.targets_rot.clone(),
            targets_rot: self.targets.clone(),
            ctf: self.ctf.clone(),
        }
    }
}

/// Everything constant across steps: lattice geometry, per-image caches.
pub struct TrainData<T: Scalar> {
    pub lat: PlaneLattice,
    images: Array3<f64>,
    /// [N, D²] Hartley-transformed measured images (cached once at load).
    ht: Array2<T>,
    /// [N, D²] CTF values.
    ctf: Array2<T>,
    /// π-rotation index map on the D² grid.
    pi_map: Vec<usize>,
    /// disc-mask multiplier (1 inside, 0 outside) as a [D²] array.
    mask: Vec<T>,
    pub gt_poses: Option<Vec<Pose>>,
}

impl<T: Scalar> TrainData<T> {
    pub fn new(dataset: &Dataset, mask_loss_to_disc: bool) -> Result<Self> {
        let d = dataset.d();
        let n = dataset.n();
        let lat = PlaneLattice::new(d)?;
        let mut ht = Array2::zeros((n, d * d));
        let mut ctf = Array2::zeros((n, d * d));
        for i in 0..n {
            let img = RealImage::new(
                dataset.images.index_axis(ndarray::Axis(0), i).to_owned(),
                dataset.pixel_size,
            )?;
            let h = hartley_2d(&img);
            let c = ctf_eval(&dataset.rows[i].ctf, &lat);
            for j in 0..d * d {
                ht[(i, j)] = <T as Scalar>::from_f64(h.data[(j / d, j % d)]);
                ctf[(i, j)] = <T as Scalar>::from_f64(c[j]);
            }
        }
        let pi_map = (0..d * d).map(|j| lat.pi_rotation_index(j)).collect();
        let mask = (0..d * d)
            .map(|j| {
                if !mask_loss_to_disc || lat.disc_mask[j] {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect();
        let gt_poses = if dataset.rows.iter().all(|r| r.rot.is_some() && r.trans.is_some()) {
            Some(
                dataset
                    .rows
                    .iter()
                    .map(|r| {
                        Ok(Pose::new(
                            crate::geometry::Rotation::from_flat(&r.rot.unwrap())?,
                            r.trans.unwrap(),
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(TrainData {
            lat,
            images: dataset.images.clone(),
            ht,
            ctf,
            pi_map,
            mask,
            gt_poses,
        })
    }

    pub fn n(&self) -> usize {
        self.images.dim().0
    }

    pub fn gather(&self, indices: &[usize]) -> LossBatch<T> {
        let d = self.lat.d;
        let b = indices.len();
        let mut images = ArrayD::zeros(IxDyn(&[b, 1, d, d]));
        let mut images_rot = ArrayD::zeros(IxDyn(&[b, 1, d, d]));
        let mut targets = Array2::zeros((b, d * d));
        let mut targets_rot = Array2::zeros((b, d * d));
        let mut ctf = Array2::zeros((b, d * d));
        for (bi, &i) in indices.iter().enumerate() {
            for y in 0..d {
                for x in 0..d {
                    let v = <T as Scalar>::from_f64(self.images[(i, y, x)]);
                    images[[bi, 0, y, x]] = v;
                    images_rot[[bi, 0, (d - y) % d, (d - x) % d]] = v;
                }
            }
            for j in 0..d * d {
                targets[(bi, j)] = self.ht[(i, j)];
                targets_rot[(bi, j)] = self.ht[(i, self.pi_map[j])];
                ctf[(bi, j)] = self.ctf[(i, j)];
            }
        }
        LossBatch {
            images,
            images_rot,
            targets,
            targets_rot,
            ctf,
        }
    }

    pub fn mask(&self) -> &[T] {
        &self.mask
    }
}

/// Records one branch of the forward operator on the graph and returns the
/// per-image masked squared reconstruction error [B,1].
#[allow(clippy::too_many_arguments)]
fn branch_error<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    lat: &PlaneLattice,
    images: ArrayD<T>,
    targets: &Array2<T>,
    ctf: &Array2<T>,
    mask: &[T],
    z_override: Option<&Array2<T>>,
) -> (Var, Var) {
    let d = lat.d;
    let img_leaf = g.tape.leaf(images);
    let ev = model.encoder.forward_graph(g, img_leaf, Mode::Train);
    let z = match z_override {
        // pose-only phase: z is an exogenous Gaussian draw, so no gradient
        // path touches the conformation head
        Some(zs) => g.tape.leaf2(zs.clone()),
        None => ev.z,
    };
    let rot9 = s2s2_graph(g, ev.rot6);
    let slice = model
        .field
        .slice_graph(g, rot9, z, lat, model.cfg.hermitian);
    let modulated = g.tape.mul_const(slice, ctf.clone().into_dyn());
    let kxy = Array2::from_shape_fn((d * d, 2), |(j, a)| {
        <T as Scalar>::from_f64(lat.coords[(j, a)])
    });
    let neg: Vec<usize> = (0..d * d).map(|j| lat.neg_index(j)).collect();
    let shifted = g.tape.apply_shift(modulated, ev.t, kxy, neg);
    let target_leaf = g.tape.leaf2(targets.clone());
    let diff = g.tape.sub(shifted, target_leaf);
    let mask_arr = ArrayD::from_shape_vec(IxDyn(&[d * d]), mask.to_vec()).unwrap();
    let masked = g.tape.mul_const(diff, mask_arr);
    let sq = g.tape.square(masked);
    (g.tape.sum_axis1(sq), ev.t)
}

/// Records the full symmetric loss (mean over the batch of the per-image
/// minimum between the plain and π-rotated branches) and returns the loss
/// variable plus the number of images whose rotated branch won.
pub fn symmetric_loss_graph<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    lat: &PlaneLattice,
    mask: &[T],
    batch: &LossBatch<T>,
    z_override: Option<&Array2<T>>,
) -> (Var, usize) {
    let b = batch.targets.nrows();
    let (err_plain, _) = branch_error(
        model,
        g,
        lat,
        batch.images.clone(),
        &batch.targets,
        &batch.ctf,
        mask,
        z_override,
    );
    let (err_rot, _) = branch_error(
        model,
        g,
        lat,
        batch.images_rot.clone(),
        &batch.targets_rot,
        &batch.ctf,
        mask,
        z_override,
    );
    let (pv, rv) = (g.tape.value(err_plain), g.tape.value(err_rot));
    let take_plain: Vec<bool> = (0..b).map(|i| pv[[i, 0]] <= rv[[i, 0]]).collect();
    let flips = take_plain.iter().filter(|t| !**t).count();
    let sel = g.tape.select_rows(err_plain, err_rot, take_plain);
    let total = g.tape.sum_all(sel);
    let loss = g.tape.scale(total, <T as Scalar>::from_f64(1.0 / b as f64));
    (loss, flips)
}

/// Forward-only symmetric loss value (no optimizer step).
pub fn symmetric_loss_value<T: Scalar>(
    model: &Model<T>,
    lat: &PlaneLattice,
    mask: &[T],
    batch: &LossBatch<T>,
    z_override: Option<&Array2<T>>,
) -> f64 {
    let mut g = Graph::new(&model.params);
    let (loss, _) = symmetric_loss_graph(model, &mut g, lat, mask, batch, z_override);
    g.tape.value(loss)[[0]].to_f64()
}

/// Per-step diagnostics.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    /// Fraction of images whose rotated branch won the symmetric min.
    pub branch_flip_frac: f64,
    pub conf_active: bool,
}

// ---------------------------------------------------------------------------
// Trainer

pub struct Trainer {
    pub model: Model<TrainScalar>,
    pub data: TrainData<TrainScalar>,
    pub cfg: TrainConfig,
    opt: Adam<TrainScalar>,
    pub images_seen: u64,
    pub epoch: u64,
    z_rng: ChaCha20Rng,
    z_rng_seed: u64,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        if dataset.d() != cfg.model.d {
            return Err(Error::Config(format!(
                "dataset side {} does not match config d {}",
                dataset.d(),
                cfg.model.d
            )));
        }
        let model = Model::new(&cfg.model, cfg.seed)?;
        let data = TrainData::new(dataset, cfg.mask_loss_to_disc)?;
        let opt = Adam::new(&model.params, cfg.learning_rate);
        let z_rng_seed = derive_seed(cfg.seed, 3);
        Ok(Trainer {
            model,
            data,
            cfg: cfg.clone(),
            opt,
            images_seen: 0,
            epoch: 0,
            z_rng: ChaCha20Rng::seed_from_u64(z_rng_seed),
            z_rng_seed,
        })
    }

    /// Whether the conformation head is active for the NEXT step (the
    /// threshold is evaluated on images seen so far).
    pub fn conf_active(&self) -> bool {
        self.images_seen >= self.cfg.pose_only_images
    }

    /// Deterministic shuffled index order for an epoch.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.n()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(
            derive_seed(self.cfg.seed, 4),
            epoch,
        ));
        // Fisher–Yates
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    fn pose_only_z(&mut self, indices: &[usize]) -> Array2<TrainScalar> {
        let d_conf = self.cfg.model.d_conf;
        if self.cfg.resample_z {
            // fresh N(0,1) draws every visit, from a dedicated stream whose
            // position is part of the checkpoint state
            Array2::from_shape_fn((indices.len(), d_conf), |_| {
                let v: f64 = self.z_rng.sample(StandardNormal);
                v as TrainScalar
            })
        } else {
            // one fixed draw per image, derived statelessly from its index
            let mut out = Array2::zeros((indices.len(), d_conf));
            for (bi, &i) in indices.iter().enumerate() {
                let mut rng =
                    ChaCha20Rng::seed_from_u64(derive_seed(self.z_rng_seed, i as u64));
                for j in 0..d_conf {
                    let v: f64 = rng.sample(StandardNormal);
                    out[(bi, j)] = v as TrainScalar;
                }
            }
            out
        }
    }

    /// One optimizer step on the given image indices.
    pub fn step(&mut self, indices: &[usize]) -> Result<StepStats> {
        let conf_active = self.conf_active();
        let b = indices.len();
        let inputs = self.data.gather(indices);
        let z_override = if conf_active {
            None
        } else {
            Some(self.pose_only_z(indices))
        };

        let mut g = Graph::new(&self.model.params);
        let (loss_var, flips) = symmetric_loss_graph(
            &self.model,
            &mut g,
            &self.data.lat,
            &self.data.mask,
            &inputs,
            z_override.as_ref(),
        );
        let loss = g.tape.value(loss_var)[[0]] as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.opt.step_count() + 1,
            });
        }
        let grads = g.tape.backward(loss_var);
        let res = g.collect(&grads);
        res.apply_bn_updates(&mut self.model.params, 0.1 as TrainScalar);
        let frozen = |name: &str| !conf_active && name.starts_with(Encoder::conf_param_prefix());
        self.opt.step(&mut self.model.params, &res, &frozen);
        self.images_seen += b as u64;
        Ok(StepStats {
            loss,
            branch_flip_frac: flips as f64 / b as f64,
            conf_active,
        })
    }

    /// Runs the full loop: shuffled mini-batches, per-epoch metrics, and
    /// checkpoints. Returns the metrics rows that were written.
    pub fn run(&mut self, out_dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let metrics_path = out_dir.join("metrics.csv");
        let fresh = self.epoch == 0;
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        let mut log = BufWriter::new(f);
        let mut rows = Vec::new();
        if fresh {
            let header = "epoch,images_seen,mean_loss,branch_flip_frac,wall_s,rot_median_deg,trans_median_pix";
            writeln!(log, "{header}").map_err(|e| Error::io(&metrics_path, e))?;
            rows.push(header.to_string());
        }
        let mut steps_done: u64 = 0;
        let mut capped = false;
        for epoch in self.epoch..self.cfg.epochs as u64 {
            let t0 = std::time::Instant::now();
            let order = self.epoch_order(epoch);
            let mut loss_sum = 0.0;
            let mut flip_sum = 0.0;
            let mut n_steps = 0usize;
            for chunk in order.chunks(self.cfg.batch_size) {
                if let Some(cap) = self.cfg.max_steps {
                    if steps_done >= cap {
                        capped = true;
                        break;
                    }
                }
                let stats = self.step(chunk)?;
                loss_sum += stats.loss;
                flip_sum += stats.branch_flip_frac;
                n_steps += 1;
                steps_done += 1;
            }
            if capped && n_steps == 0 {
                break;
            }
            self.epoch = epoch + 1;
            let (rot_med, trans_med) = self.metric_pose_errors();
            let row = format!(
                "{},{},{},{},{:.3},{},{}",
                self.epoch,
                self.images_seen,
                loss_sum / n_steps.max(1) as f64,
                flip_sum / n_steps.max(1) as f64,
                t0.elapsed().as_secs_f64(),
                rot_med.map_or("NA".into(), |v| format!("{v}")),
                trans_med.map_or("NA".into(), |v| format!("{v}")),
            );
            writeln!(log, "{row}").map_err(|e| Error::io(&metrics_path, e))?;
            log.flush().map_err(|e| Error::io(&metrics_path, e))?;
            rows.push(row);
            if self.epoch as usize % self.cfg.checkpoint_every == 0
                || self.epoch as usize == self.cfg.epochs
            {
                self.save_checkpoint(&out_dir.join(format!("ckpt_epoch_{}.cfck", self.epoch)))?;
                self.save_checkpoint(&out_dir.join("ckpt_last.cfck"))?;
            }
            if capped {
                break;
            }
        }
        self.save_checkpoint(&out_dir.join("ckpt_last.cfck"))?;
        Ok(rows)
    }

    /// Aligned pose errors on a fixed subset (ground truth permitting):
    /// (median view-direction degrees, median translation pixels after
    /// constant-offset removal).
    pub fn metric_pose_errors(&self) -> (Option<f64>, Option<f64>) {
        let gt_all = match &self.data.gt_poses {
            Some(g) => g,
            None => return (None, None),
        };
        let m = self.cfg.metric_subset.min(self.data.n());
        if m < 3 {
            return (None, None);
        }
        let images = self
            .data
            .images
            .slice(ndarray::s![0..m, .., ..])
            .to_owned();
        let outs = self.model.encoder.encode_batch(&self.model.params, &images);
        let pred: Vec<Pose> = outs
            .iter()
            .map(|o| {
                let rot = crate::geometry::s2s2_to_rotation(&o.rot6)
                    .unwrap_or_else(|_| crate::geometry::Rotation::identity());
                Pose::new(rot, o.t)
            })
            .collect();
        let gt = &gt_all[0..m];
        match align_poses(&pred, gt) {
            Ok(al) => {
                let e = pose_errors(&pred, gt, &al);
                (Some(e.rot_median_deg), Some(e.trans_median_offsub_pix))
            }
            Err(_) => (None, None),
        }
    }

    // -- checkpointing ------------------------------------------------------

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(f);
            write_checkpoint(
                &mut w,
                &self.cfg,
                &self.model.params,
                &self.opt,
                self.images_seen,
                self.epoch,
                self.z_rng_seed,
                self.z_rng.get_word_pos(),
            )
            .map_err(|e| Error::io(path, e))?;
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Restores a full training state. The checkpoint's config digest must
    /// match `cfg`.
    pub fn resume(cfg: &TrainConfig, dataset: &Dataset, path: &Path) -> Result<Self> {
        let mut t = Trainer::new(cfg, dataset)?;
        let ck = load_checkpoint(path)?;
        if ck.config_digest != cfg.digest() {
            return Err(Error::CheckpointMismatch(format!(
                "config digest in {} does not match the supplied config",
                path.display()
            )));
        }
        restore_params(&mut t.model.params, &ck)?;
        t.opt.restore_state(ck.adam_t, ck.adam_m, ck.adam_v);
        t.images_seen = ck.images_seen;
        t.epoch = ck.epoch;
        t.z_rng = ChaCha20Rng::seed_from_u64(ck.z_rng_seed);
        t.z_rng.set_word_pos(ck.z_rng_word_pos);
        t.z_rng_seed = ck.z_rng_seed;
        Ok(t)
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container

const CKPT_MAGIC: &[u8; 4] = b"CFCK";
const CKPT_VERSION: u32 = 1;

/// Raw checkpoint contents (model/optimizer arrays by name).
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub config_text: String,
    pub images_seen: u64,
    pub epoch: u64,
    pub adam_t: u64,
    pub z_rng_seed: u64,
    pub z_rng_word_pos: u128,
    /// name → (shape, data)
    pub arrays: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub adam_m: Vec<ArrayD<f32>>,
    pub adam_v: Vec<ArrayD<f32>>,
}

#[allow(clippy::too_many_arguments)]
fn write_checkpoint(
    w: &mut impl Write,
    cfg: &TrainConfig,
    params: &ParamSet<TrainScalar>,
    opt: &Adam<TrainScalar>,
    images_seen: u64,
    epoch: u64,
    z_rng_seed: u64,
    z_rng_word_pos: u128,
) -> std::io::Result<()> {
    w.write_all(CKPT_MAGIC)?;
    w.write_u32::<LittleEndian>(CKPT_VERSION)?;
    w.write_all(&cfg.digest())?;
    let text = cfg.to_key_values();
    w.write_u32::<LittleEndian>(text.len() as u32)?;
    w.write_all(text.as_bytes())?;
    w.write_u64::<LittleEndian>(images_seen)?;
    w.write_u64::<LittleEndian>(epoch)?;
    let (t, m, v) = opt.state_arrays();
    w.write_u64::<LittleEndian>(t)?;
    w.write_u64::<LittleEndian>(z_rng_seed)?;
    w.write_u128::<LittleEndian>(z_rng_word_pos)?;
    let ids: Vec<_> = params.ids().collect();
    w.write_u32::<LittleEndian>(ids.len() as u32)?;
    let write_array = |w: &mut dyn Write, a: &ArrayD<TrainScalar>| -> std::io::Result<()> {
        w.write_u8(a.ndim() as u8)?;
        for &s in a.shape() {
            w.write_u32::<LittleEndian>(s as u32)?;
        }
        for &x in a.iter() {
            w.write_f32::<LittleEndian>(x)?;
        }
        Ok(())
    };
    for &id in &ids {
        let name = params.name(id);
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(u8::from(params.is_trainable(id)))?;
        write_array(w, params.get(id))?;
    }
    for arr in m.iter().chain(v.iter()) {
        write_array(w, arr)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let io = |e: std::io::Error| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != CKPT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut config_digest = [0u8; 32];
    r.read_exact(&mut config_digest).map_err(io)?;
    let tl = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut tb = vec![0u8; tl];
    r.read_exact(&mut tb).map_err(io)?;
    let config_text =
        String::from_utf8(tb).map_err(|_| Error::format(path, "config text not UTF-8"))?;
    let images_seen = r.read_u64::<LittleEndian>().map_err(io)?;
    let epoch = r.read_u64::<LittleEndian>().map_err(io)?;
    let adam_t = r.read_u64::<LittleEndian>().map_err(io)?;
    let z_rng_seed = r.read_u64::<LittleEndian>().map_err(io)?;
    let z_rng_word_pos = r.read_u128::<LittleEndian>().map_err(io)?;
    let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let read_array = |r: &mut BufReader<std::fs::File>| -> Result<(Vec<usize>, Vec<f32>)> {
        let nd = r.read_u8().map_err(|e| Error::io(path, e))? as usize;
        let mut shape = Vec::with_capacity(nd);
        for _ in 0..nd {
            shape.push(r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(
                r.read_f32::<LittleEndian>()
                    .map_err(|e| Error::io(path, e))?,
            );
        }
        Ok((shape, data))
    };
    let mut arrays = Vec::with_capacity(n);
    for _ in 0..n {
        let nl = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut nb = vec![0u8; nl];
        r.read_exact(&mut nb).map_err(io)?;
        let name = String::from_utf8(nb).map_err(|_| Error::format(path, "name not UTF-8"))?;
        let _trainable = r.read_u8().map_err(io)?;
        let (shape, data) = read_array(&mut r)?;
        arrays.push((name, shape, data));
    }
    let mut moments = Vec::with_capacity(2 * n);
    for _ in 0..2 * n {
        let (shape, data) = read_array(&mut r)?;
        moments.push(ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
    }
    let adam_v = moments.split_off(n);
    Ok(Checkpoint {
        config_digest,
        config_text,
        images_seen,
        epoch,
        adam_t,
        z_rng_seed,
        z_rng_word_pos,
        arrays,
        adam_m: moments,
        adam_v,
    })
}

/// Overwrites a parameter set from checkpoint arrays; every name and shape
/// must match.
pub fn restore_params(params: &mut ParamSet<TrainScalar>, ck: &Checkpoint) -> Result<()> {
    let ids: Vec<_> = params.ids().collect();
    if ids.len() != ck.arrays.len() {
        return Err(Error::CheckpointMismatch(format!(
            "parameter count {} vs checkpoint {}",
            ids.len(),
            ck.arrays.len()
        )));
    }
    for (&id, (name, shape, data)) in ids.iter().zip(ck.arrays.iter()) {
        if params.name(id) != name {
            return Err(Error::CheckpointMismatch(format!(
                "parameter name {} vs checkpoint {name}",
                params.name(id)
            )));
        }
        if params.get(id).shape() != shape.as_slice() {
            return Err(Error::CheckpointMismatch(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                params.get(id).shape(),
                shape
            )));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(shape), data.clone()).unwrap();
        *params.get_mut(id) = arr;
    }
    Ok(())
}

/// Builds a model (no optimizer state) from a checkpoint, for evaluation.
pub fn model_from_checkpoint(path: &Path) -> Result<(Model<TrainScalar>, TrainConfig)> {
    let ck = load_checkpoint(path)?;
    let map = parse_key_values(&ck.config_text)?;
    let cfg = TrainConfig::from_key_values(&map)?;
    let mut model = Model::new(&cfg.model, cfg.seed)?;
    restore_params(&mut model.params, &ck)?;
    Ok((model, cfg))
}

/// High-level entry point used by the CLI.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<Vec<String>> {
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, dataset, p)?,
        None => Trainer::new(cfg, dataset)?,
    };
    trainer.run(out_dir)
}

// ---------------------------------------------------------------------------
