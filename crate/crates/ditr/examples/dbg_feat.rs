// debug scratch: is the correspondence signal present in the dataset?
use ditr::iml::*;
use ditr::sampling::*;
use ditr::synth::*;
use ditr::transform::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg_s = SynthConfig {
        width: 64, height: 64, n_blobs: 8,
        perturbation: PerturbationRanges::zero(),
        n_landmarks: 30,
        ..Default::default()
    };
    let data: Vec<TrainingPair> = (0..3).map(|i| {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + i as u64);
        TrainingPair::from(make_case(&cfg_s, &mut rng).unwrap())
    }).collect();
    let pairs: Vec<AlignedPair> = data.iter().map(|p| AlignedPair {
        fixed: &p.fixed, moving: &p.moving,
        beta: TransformParams::identity_rigid(Point::new(32.0, 32.0)),
    }).collect();
    let mut scfg = SamplingConfig::default();
    scfg.patch_size = 9;
    scfg.n_total = 8000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ds = make_dataset(&pairs, &scfg, &mut rng).unwrap();

    // Feature: mean squared deviation of v from the tent remap of u,
    // where the remap's normalization constants are unknown; use a general
    // second feature set too: correlation of v with tent(u).
    let feat = |d: &LabeledPatchPair| -> (f64, f64) {
        let n = d.pair.u.len() as f64;
        let tu: Vec<f64> = d.pair.u.iter().map(|&x| 1.0 - (2.0 * x as f64 - 1.0).abs()).collect();
        let v: Vec<f64> = d.pair.v.iter().map(|&x| x as f64).collect();
        let mt = tu.iter().sum::<f64>() / n;
        let mv = v.iter().sum::<f64>() / n;
        let mut cov = 0.0; let mut vt = 0.0; let mut vv = 0.0; let mut mse = 0.0;
        for i in 0..tu.len() {
            cov += (tu[i]-mt)*(v[i]-mv); vt += (tu[i]-mt).powi(2); vv += (v[i]-mv).powi(2);
            mse += (tu[i]-v[i]).powi(2);
        }
        let corr = if vt > 1e-12 && vv > 1e-12 { cov/(vt*vv).sqrt() } else { 0.0 };
        (mse / n, corr)
    };
    let mut pos_mse = vec![]; let mut neg_mse = vec![];
    let mut pos_corr = vec![]; let mut neg_corr = vec![];
    for d in &ds {
        let (m, c) = feat(d);
        if d.z == 1 { pos_mse.push(m); pos_corr.push(c); } else { neg_mse.push(m); neg_corr.push(c); }
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    println!("mse:  pos {:.4} neg {:.4}", mean(&pos_mse), mean(&neg_mse));
    println!("corr: pos {:.4} neg {:.4}", mean(&pos_corr), mean(&neg_corr));
    // threshold accuracy on corr
    for thr in [0.2, 0.4, 0.6, 0.8] {
        let acc = (pos_corr.iter().filter(|&&c| c > thr).count()
                 + neg_corr.iter().filter(|&&c| c <= thr).count()) as f64 / ds.len() as f64;
        println!("corr>{thr}: acc {:.3}", acc);
    }
    // value ranges of u and v
    let umin = ds.iter().flat_map(|d| d.pair.u.iter()).cloned().fold(f32::INFINITY, f32::min);
    let umax = ds.iter().flat_map(|d| d.pair.u.iter()).cloned().fold(f32::NEG_INFINITY, f32::max);
    println!("u range [{umin}, {umax}]");
}
