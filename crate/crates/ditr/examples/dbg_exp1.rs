// debug scratch: scaled-down staged study with timing
use ditr::experiments::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let n_heldout: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);

    let mut cfg = StagedStudyConfig::rigid_default(42);
    cfg.n_train = n_train;
    cfg.n_heldout = n_heldout;

    let t0 = Instant::now();
    match run_staged_study(&cfg) {
        Ok(res) => {
            println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
            println!("train median FRE by stage: {:?}", res.train_median_by_stage());
            for (i, stage) in res.train_fre_by_stage.iter().enumerate() {
                let r: Vec<f64> = stage.iter().map(|v| (v * 100.0).round() / 100.0).collect();
                println!("stage {} FRE: {:?}", i + 1, r);
            }
            println!("heldout initial: {:?}", res.heldout_initial_fre.iter().map(|v| (v*10.0).round()/10.0).collect::<Vec<_>>());
            println!("heldout ditr:    {:?}", res.heldout_fre.iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>());
            println!("heldout median: {:.3}", res.heldout_report().median);
        }
        Err(e) => println!("ERROR after {:.1}s: {e}", t0.elapsed().as_secs_f64()),
    }
}
