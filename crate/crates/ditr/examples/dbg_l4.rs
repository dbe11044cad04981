// debug scratch: learnability of the coarse-level task
use ditr::classifier::*;
use ditr::experiments::*;
use ditr::iml::*;
use ditr::sampling::*;
use ditr::synth::*;
use ditr::transform::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut synth = SynthConfig::default();
    synth.width = 160; synth.height = 160;
    let cases = make_cases(&synth, 6, 42).unwrap();
    let data: Vec<TrainingPair> = cases.into_iter().map(TrainingPair::from).collect();
    let l = 4usize; let patch = 17usize;
    let level: Vec<(ditr::Image, ditr::Image)> = data.iter()
        .map(|p| (p.fixed.downsample_for_patch(l, patch).unwrap(),
                  p.moving.downsample_for_patch(l, patch).unwrap()))
        .collect();

    // Variant A: identity beta + dither 10 (the real stage-1 task).
    // Variant B: true beta, no dither (aligned ceiling).
    for (name, use_truth, dither) in [("stage1", false, 10.0), ("aligned", true, 0.0)] {
        let aligned: Vec<AlignedPair> = level.iter().zip(&data).map(|((f, m), d)| AlignedPair {
            fixed: f, moving: m,
            beta: if use_truth { d.truth.as_ref().unwrap().beta_true }
                  else { TransformParams::identity_rigid(Point::new(80.0, 80.0)) },
        }).collect();
        let mut sampling = desk_sampling();
        sampling.dither = DitherConfig { sigma: dither };
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let ds = make_dataset(&aligned, &sampling, &mut rng).unwrap();
        for (lr, ep) in [(0.1, 8), (0.05, 30), (0.3, 16)] {
            let mut c = Classifier::init(ArchDescriptor::two_channel_default(patch), 7).unwrap();
            let tc = TrainConfig { learning_rate: lr, batch_size: 128, weight_decay: 0.005,
                                   epochs: ep, momentum: 0.9, seed: 9 };
            let trace = c.train(&ds, &tc).unwrap();
            println!("{name} lr={lr} ep={ep}: {:.4} -> {:.4}, acc {:.3}",
                trace[0], trace.last().unwrap(), c.accuracy(&ds).unwrap());
        }
    }
}
