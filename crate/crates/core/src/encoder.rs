//! The amortized inference network q_ψ: image → (conformation z,
//! rotation as an S²×S² 6-vector, in-plane translation).
//!
//! A VGG-style CNN (7 conv layers with batch norm, 2×2 max-pools shrinking
//! the map to 4×4) feeds a shared MLP producing a feature vector y; a
//! conformation MLP maps y to z, and rotation/translation heads read the
//! concatenation (y ⧺ z) so pose prediction is conditioned on the
//! conformation estimate.

use crate::ad::{Scalar, Var};
use crate::error::{Error, Result};
use crate::geometry::S2S2Param;
use crate::nn::{BatchNorm, Conv3x3, Graph, Mlp, Mode, ParamSet};
use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;

/// Architecture hyper-parameters.
#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub d_img: usize,
    pub d_conf: usize,
    /// Output channels of the 7 conv layers; the last is the terminal
    /// feature-map depth (256 in the reference D=128 architecture).
    pub conv_channels: Vec<usize>,
    /// Width of the shared MLP, conformation MLP, and pose heads.
    pub width: usize,
}

impl EncoderConfig {
    /// Reference-scale architecture (256-wide, [32..256] channels).
    pub fn reference(d_img: usize, d_conf: usize) -> Self {
        EncoderConfig {
            d_img,
            d_conf,
            conv_channels: vec![32, 64, 128, 128, 256, 256, 256],
            width: 256,
        }
    }

    /// Compact architecture for small images / CPU training.
    pub fn desk(d_img: usize, d_conf: usize, width: usize, base: usize) -> Self {
        EncoderConfig {
            d_img,
            d_conf,
            conv_channels: vec![base, base * 2, base * 2, base * 4, base * 4, base * 4, base * 4],
            width,
        }
    }

    /// Number of 2×2 pools needed to shrink D down to a 4×4 map.
    pub fn num_pools(&self) -> usize {
        (self.d_img / 4).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() != 7 {
            return Err(Error::invalid_argument("encoder needs 7 conv layers"));
        }
        let red = self.d_img / 4;
        if self.d_img < 8 || !red.is_power_of_two() || red << 2 != self.d_img {
            return Err(Error::invalid_argument(
                "image side must be 4·2^p with p ≥ 1",
            ));
        }
        if self.num_pools() > 7 {
            return Err(Error::invalid_argument("image too large for 7 conv layers"));
        }
        Ok(())
    }
}

/// Point estimates for one image.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub z: Vec<f64>,
    pub rot6: S2S2Param,
    pub t: [f64; 2],
}

/// Tape variables of a batched forward pass.
pub struct EncoderVars {
    /// [B, d] conformation latents.
    pub z: Var,
    /// [B, 6] rotation parameters (two un-normalized 3-vectors).
    pub rot6: Var,
    /// [B, 2] translations in pixels.
    pub t: Var,
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    convs: Vec<Conv3x3>,
    bns: Vec<BatchNorm>,
    shared: Mlp,
    conf: Mlp,
    rot_head: Mlp,
    trans_head: Mlp,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        cfg: EncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut c_in = 1;
        for (i, &c_out) in cfg.conv_channels.iter().enumerate() {
            convs.push(Conv3x3::new(params, rng, &format!("enc.conv{i}"), c_in, c_out));
            bns.push(BatchNorm::new(params, &format!("enc.bn{i}"), c_out));
            c_in = c_out;
        }
        let flat = cfg.conv_channels[6] * 16;
        let w = cfg.width;
        let shared = Mlp::new(params, rng, "enc.shared", &[flat, w, w, w, w]);
        let conf = Mlp::new(params, rng, "enc.conf", &[w, w, w, w, cfg.d_conf]);
        let rot_head = Mlp::new(params, rng, "enc.rot", &[w + cfg.d_conf, w, w, 6]);
        let trans_head = Mlp::new(params, rng, "enc.trans", &[w + cfg.d_conf, w, w, 2]);
        Ok(Encoder {
            cfg,
            convs,
            bns,
            shared,
            conf,
            rot_head,
            trans_head,
        })
    }

    /// Records the batched forward pass on a graph. `images` is [B,1,D,D].
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        images: Var,
        mode: Mode,
    ) -> EncoderVars {
        let n_pool = self.cfg.num_pools();
        let mut h = images;
        for i in 0..self.convs.len() {
            h = self.convs[i].forward(g, h);
            h = self.bns[i].forward(g, h, mode);
            h = g.tape.relu(h);
            if i < n_pool {
                h = g.tape.max_pool2(h);
            }
        }
        let shape = g.tape.value(h).shape().to_vec();
        let (b, flat) = (shape[0], shape[1] * shape[2] * shape[3]);
        let h = g.tape.reshape(h, &[b, flat]);
        let y = self.shared.forward(g, h);
        let y = g.tape.relu(y);
        let z = self.conf.forward(g, y);
        let yz = g.tape.concat_cols(&[y, z]);
        let rot6 = self.rot_head.forward(g, yz);
        let t = self.trans_head.forward(g, yz);
        EncoderVars { z, rot6, t }
    }

    /// Inference-mode encoding of a stack of images ([N, D, D], already
    /// normalized like the training data).
    pub fn encode_batch<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        images: &Array3<f64>,
    ) -> Vec<EncoderOutput> {
        let (n, dh, dw) = images.dim();
        assert_eq!(dh, self.cfg.d_img);
        assert_eq!(dw, self.cfg.d_img);
        let mut out = Vec::with_capacity(n);
        // modest chunks keep conv buffers small
        let chunk = 64;
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let b = end - start;
            let x = ArrayD::from_shape_fn(IxDyn(&[b, 1, dh, dw]), |ix| {
                <T as Scalar>::from_f64(images[(start + ix[0], ix[2], ix[3])])
            });
            let mut g = Graph::new(params);
            let xv = g.tape.leaf(x);
            let ev = self.forward_graph(&mut g, xv, Mode::Eval);
            let zv = g.tape.value(ev.z);
            let rv = g.tape.value(ev.rot6);
            let tv = g.tape.value(ev.t);
            for i in 0..b {
                let z = (0..self.cfg.d_conf).map(|j| zv[[i, j]].to_f64()).collect();
                let u = [
                    rv[[i, 0]].to_f64(),
                    rv[[i, 1]].to_f64(),
                    rv[[i, 2]].to_f64(),
                ];
                let v = [
                    rv[[i, 3]].to_f64(),
                    rv[[i, 4]].to_f64(),
                    rv[[i, 5]].to_f64(),
                ];
                out.push(EncoderOutput {
                    z,
                    rot6: S2S2Param::new(u, v),
                    t: [tv[[i, 0]].to_f64(), tv[[i, 1]].to_f64()],
                });
            }
            start = end;
        }
        out
    }

    pub fn encode<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        image: &ndarray::Array2<f64>,
    ) -> EncoderOutput {
        let d = self.cfg.d_img;
        let stack = Array3::from_shape_fn((1, d, d), |(_, i, j)| image[(i, j)]);
        self.encode_batch(params, &stack).into_iter().next().unwrap()
    }

    /// Name prefixes of the conformation head, for pose-only freezing.
    pub fn conf_param_prefix() -> &'static str {
        "enc.conf"
    }
}

/// Gram–Schmidt map from [B,6] S²×S² parameters to [B,9] row-major rotation
/// matrices, recorded on the tape (columns e1, e2, e1×e2).
pub fn s2s2_graph<T: Scalar>(g: &mut Graph<'_, T>, rot6: Var) -> Var {
    // Guard against exactly-zero head outputs (dead-ReLU trunks at init):
    // √0 has an infinite derivative and 0/0 is NaN, and either poisons every
    // gradient in the batch. The epsilon is negligible for any healthy norm.
    let eps = ArrayD::from_elem(IxDyn(&[1, 1]), <T as Scalar>::from_f64(1e-8));
    let u = g.tape.slice_cols(rot6, 0, 3);
    let v = g.tape.slice_cols(rot6, 3, 6);
    let u2 = g.tape.square(u);
    let su = g.tape.sum_axis1(u2);
    let su = g.tape.add_const(su, eps.clone());
    let nu = g.tape.sqrt(su);
    let e1 = g.tape.div_col(u, nu);
    let ev = g.tape.mul(e1, v);
    let d = g.tape.sum_axis1(ev);
    let proj = g.tape.mul_col(e1, d);
    let w = g.tape.sub(v, proj);
    let w2 = g.tape.square(w);
    let sw = g.tape.sum_axis1(w2);
    let sw = g.tape.add_const(sw, eps);
    let nw = g.tape.sqrt(sw);
    let e2 = g.tape.div_col(w, nw);

    let c = |g: &mut Graph<'_, T>, m: Var, i: usize| g.tape.slice_cols(m, i, i + 1);
    let (e1x, e1y, e1z) = (c(g, e1, 0), c(g, e1, 1), c(g, e1, 2));
    let (e2x, e2y, e2z) = (c(g, e2, 0), c(g, e2, 1), c(g, e2, 2));
    let cross = |g: &mut Graph<'_, T>, a1: Var, b2: Var, a2: Var, b1: Var| {
        let p = g.tape.mul(a1, b2);
        let q = g.tape.mul(a2, b1);
        g.tape.sub(p, q)
    };
    let e3x = cross(g, e1y, e2z, e1z, e2y);
    let e3y = cross(g, e1z, e2x, e1x, e2z);
    let e3z = cross(g, e1x, e2y, e1y, e2x);

    // row-major R with columns (e1, e2, e3)
    g.tape
        .concat_cols(&[e1x, e2x, e3x, e1y, e2y, e3y, e1z, e2z, e3z])
}
