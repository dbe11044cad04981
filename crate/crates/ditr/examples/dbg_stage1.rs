// debug scratch: dissect stage 1 of the staged study
use ditr::classifier::*;
use ditr::eval::*;
use ditr::experiments::*;
use ditr::iml::*;
use ditr::optimizer::*;
use ditr::sampling::*;
use ditr::synth::*;
use ditr::transform::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut synth = SynthConfig::default();
    synth.width = 160;
    synth.height = 160;
    let cases = make_cases(&synth, 6, 42).unwrap();
    let data: Vec<TrainingPair> = cases.into_iter().map(TrainingPair::from).collect();

    // Stage 1 setup: l=4, dither var 100 (sigma 10 phys = 2.5 level px).
    let l = 4usize;
    let patch = 17usize;
    let level: Vec<(ditr::Image, ditr::Image)> = data.iter()
        .map(|p| (p.fixed.downsample_for_patch(l, patch).unwrap(),
                  p.moving.downsample_for_patch(l, patch).unwrap()))
        .collect();
    let betas: Vec<TransformParams> = data.iter().map(|p| {
        TransformParams::identity_rigid(Point::new(80.0, 80.0))
    }).collect();
    let aligned: Vec<AlignedPair> = level.iter().zip(&betas).map(|((f, m), b)| AlignedPair {
        fixed: f, moving: m, beta: *b,
    }).collect();

    let mut sampling = desk_sampling();
    sampling.dither = DitherConfig { sigma: 10.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let ds = make_dataset(&aligned, &sampling, &mut rng).unwrap();

    let mut c = Classifier::init(ArchDescriptor::two_channel_default(patch), rng.gen()).unwrap();
    let mut tc = desk_training();
    tc.seed = rng.gen();
    let trace = c.train(&ds, &tc).unwrap();
    println!("loss: {:.4} -> {:.4}, acc {:.3}", trace[0], trace.last().unwrap(), c.accuracy(&ds).unwrap());

    // Response sweeps around beta_true at level 4, per pair, for stride 8 and 2.
    for stride in [8usize, 2] {
        println!("--- stride {stride}");
        for i in 0..3 {
            let m = MetricBinding::Dmr { classifier: &c, stride };
            let bt = data[i].truth.as_ref().unwrap().beta_true;
            let sweep = response_sweep(&m, &level[i].0, &level[i].1, &bt,
                SweepAxis::Tx, &offset_grid(24.0, 4.0), "").unwrap();
            let s: Vec<f64> = sweep.scores.iter().map(|v| (v * 10.0).round() / 10.0).collect();
            let pk = peak_analysis(&sweep);
            println!("pair {i} sweep around truth: {:?} argmax {}", s, pk.argmax_offset);
        }
    }

    // Register each pair at L4 from identity, stride 2.
    let m = MetricBinding::Dmr { classifier: &c, stride: 2 };
    for i in 0..6 {
        let t = data[i].truth.as_ref().unwrap();
        let pre = fre(&betas[i], &t.beta_true, &t.landmarks);
        let (b, r) = register_single_level(&data[i].fixed, &data[i].moving, &betas[i], &m, l, &PowellConfig::registration()).unwrap();
        let post = fre(&b, &t.beta_true, &t.landmarks);
        println!("pair {i}: FRE {:.2} -> {:.2} (evals {})", pre, post, r.evals);
    }
}
