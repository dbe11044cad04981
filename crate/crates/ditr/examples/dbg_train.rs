// debug scratch: momentum / centering probe
use ditr::classifier::*;
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

    // centered variant
    let centered: Vec<LabeledPatchPair> = ds.iter().map(|d| LabeledPatchPair {
        pair: PatchPair {
            u: d.pair.u.iter().map(|&x| x - 0.5).collect(),
            v: d.pair.v.iter().map(|&x| x - 0.5).collect(),
            size: d.pair.size,
        },
        z: d.z,
    }).collect();

    for (name, dset, lr, mom, epochs) in [
        ("raw  mom.9 lr.03", &ds, 0.03, 0.9, 10),
        ("raw  mom.9 lr.1 ", &ds, 0.1, 0.9, 10),
        ("cent mom0  lr.3 ", &centered, 0.3, 0.0, 20),
        ("cent mom.9 lr.03", &centered, 0.03, 0.9, 10),
        ("cent mom.9 lr.1 ", &centered, 0.1, 0.9, 10),
        ("cent mom.9 lr.1 e20", &centered, 0.1, 0.9, 20),
    ] {
        let arch = ArchDescriptor::two_channel_default(9);
        let mut c = Classifier::init(arch, 5).unwrap();
        let tc = TrainConfig { learning_rate: lr, batch_size: 128, weight_decay: 0.005, epochs, momentum: mom, seed: 7 };
        let trace = c.train(dset, &tc).unwrap();
        let acc = c.accuracy(dset).unwrap();
        println!("{name}: first {:.4} last {:.4} acc {:.3}", trace[0], trace.last().unwrap(), acc);
    }
}
