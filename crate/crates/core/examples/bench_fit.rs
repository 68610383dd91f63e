//! Times semi-local fitting on one default-size lead and raw CSG CRPS evaluation.
//! Run with `cargo run --release --example bench_fit`.

use std::time::Instant;

use csg_emos::dist::{csg_crps, CsgParams};
use csg_emos::ensemble::MixtureConfig;
use csg_emos::pipeline::semilocal::run_semilocal;
use csg_emos::pipeline::{split_by_lead, EmosSettings};
use csg_emos::synth::{generate, ScenarioConfig};

fn main() {
    let data = generate(&ScenarioConfig {
        lead_days: vec![3],
        ..Default::default()
    })
    .unwrap();
    let leads = split_by_lead(&data.forecasts, 30).unwrap();
    for m in [MixtureConfig::new(50, 0).unwrap(), MixtureConfig::new(40, 40).unwrap()] {
        let t = Instant::now();
        let out = run_semilocal(&leads[0], &m, &EmosSettings::default(), 1, true).unwrap();
        let it: Vec<usize> = out.coefficients.iter().map(|c| c.iterations).collect();
        let cold: Vec<usize> = out.coefficients.iter().filter(|c| !c.warm_start).map(|c| c.iterations).collect();
        let n: usize = out.coefficients.iter().map(|c| c.n_cases).sum();
        println!(
            "{m}: {:?} fits={} mean_it={:.1} cold={cold:?} mean_cases={:.0}",
            t.elapsed(),
            it.len(),
            it.iter().sum::<usize>() as f64 / it.len() as f64,
            n as f64 / it.len() as f64
        );
    }
    let p = CsgParams::new(2.0, 3.0, 0.3).unwrap();
    let t = Instant::now();
    let mut s = 0.0;
    for i in 0..1_000_000 {
        s += csg_crps(&p, (i % 50) as f64 * 0.2);
    }
    println!("crps eval {:?} per call ({s})", t.elapsed() / 1_000_000);
}
