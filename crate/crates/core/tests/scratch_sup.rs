// Temporary diagnostic; not part of the suite.
use cryorec::encoder::s2s2_graph;
use cryorec::eval::{align_poses, pose_errors};
use cryorec::geometry::{Pose, Rotation};
use cryorec::nn::{Adam, Graph, Mode};
use cryorec::sim::Dataset;
use cryorec::train::{Model, ModelConfig};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::path::Path;

#[test]
#[ignore]
fn supervised_rotation_regression() {
    let dataset = Dataset::load(Path::new("/root/pilot/diag/data2")).unwrap();
    let d = 16;
    let cfg = ModelConfig {
        d,
        d_conf: 2,
        enc_width: 64,
        enc_base: 8,
        field_width: 32,
        hermitian: true,
    };
    let mut model: Model<f32> = Model::new(&cfg, 7).unwrap();
    let mut opt = Adam::new(&model.params, 1e-3);
    let n = dataset.images.dim().0;
    let gt: Vec<[f64; 9]> = dataset.rows.iter().map(|r| r.rot.unwrap()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let b = 32;
    for step in 0..3000 {
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
        let imgs = ArrayD::from_shape_fn(IxDyn(&[b, 1, d, d]), |ix| {
            dataset.images[(idx[ix[0]], ix[2], ix[3])] as f32
        });
        let tgt = Array2::from_shape_fn((b, 9), |(i, j)| gt[idx[i]][j] as f32);
        let mut g = Graph::new(&model.params);
        let xv = g.tape.leaf(imgs);
        let ev = model.encoder.forward_graph(&mut g, xv, Mode::Train);
        let rot9 = s2s2_graph(&mut g, ev.rot6);
        let tv = g.tape.leaf2(tgt);
        let diff = g.tape.sub(rot9, tv);
        let sq = g.tape.square(diff);
        let tot = g.tape.sum_all(sq);
        let loss = g.tape.scale(tot, 1.0 / b as f32);
        let lv = g.tape.value(loss)[[0]];
        let grads = g.tape.backward(loss);
        let res = g.collect(&grads);
        res.apply_bn_updates(&mut model.params, 0.1);
        opt.step(&mut model.params, &res, &|_| false);
        if step % 500 == 0 {
            println!("step {step}: loss {lv:.4}");
        }
    }
    // Evaluate on 500 images.
    let images = dataset.images.slice(ndarray::s![0..500, .., ..]).to_owned();
    let outs = model.encoder.encode_batch(&model.params, &images);
    let pred: Vec<Pose> = outs
        .iter()
        .map(|o| Pose::new(cryorec::geometry::s2s2_to_rotation(&o.rot6).unwrap(), o.t))
        .collect();
    let gtp: Vec<Pose> = (0..500)
        .map(|i| {
            Pose::new(
                Rotation::from_flat(&gt[i]).unwrap(),
                dataset.rows[i].trans.unwrap(),
            )
        })
        .collect();
    let a = align_poses(&pred, &gtp).unwrap();
    let pe = pose_errors(&pred, &gtp, &a);
    println!(
        "supervised: rot median {:.2}°, mirrored {}",
        pe.rot_median_deg, a.mirrored
    );
}
