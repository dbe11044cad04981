// debug scratch: examine stage behavior on the drift test's data
use ditr::classifier::*;
use ditr::iml::*;
use ditr::optimizer::*;
use ditr::sampling::*;
use ditr::synth::*;
use ditr::transform::*;
use ditr::eval::*;
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

    let cfg = IMLConfig {
        arch: ArchDescriptor::two_channel_default(9),
        grid_stride: 4,
        ..Default::default()
    };
    let mut stage = IMLStageConfig::new(0, 0.0);
    stage.sampling.patch_size = 9;
    stage.sampling.n_total = 6000;
    stage.training.epochs = 4;
    stage.training.learning_rate = 3e-3;
    stage.training.batch_size = 128;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s0 = IMLState::rough_start(&data, TransformKind::Rigid);
    let s1 = iml_stage(&s0, &stage, &data, &cfg, &mut rng).unwrap();
    println!("s1 FRE: {:?}", s1.history[0].fre_per_pair);
    println!("s1 loss trace: {:?}", s1.history[0].loss_trace);
    let s2 = iml_stage(&s1, &stage, &data, &cfg, &mut rng).unwrap();
    println!("s2 FRE: {:?}", s2.history[1].fre_per_pair);
    println!("s2 loss trace: {:?}", s2.history[1].loss_trace);
    for i in 0..3 {
        println!("pair {i}: s1 {:?} -> s2 {:?}", s1.betas[i].to_params(), s2.betas[i].to_params());
    }
    // response sweep of the s2 classifier on pair of interest
    let theta = s2.classifier.as_ref().unwrap();
    let m = MetricBinding::Dmr { classifier: theta, stride: 4 };
    for i in 0..3 {
        let sweep = response_sweep(&m, &data[i].fixed, &data[i].moving,
            &s1.betas[i], SweepAxis::Tx, &offset_grid(20.0, 2.0), "").unwrap();
        println!("pair {i} tx sweep: {:?}", sweep.scores.iter().map(|v| (v*10.0).round()/10.0).collect::<Vec<_>>());
    }
}
