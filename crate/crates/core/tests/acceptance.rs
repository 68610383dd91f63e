//! Acceptance suite: runs every criterion, prints one PASS/FAIL line each and exits
//! nonzero if any failed.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use csg_emos::dist::{csg_crps, csg_crps_quadrature, empirical_crps, CsgParams, StepCdf};
use csg_emos::emos::{fit_summaries, link, EmosCoefficients, FitOptions};
use csg_emos::ensemble::{LeadTime, MixtureConfig};
use csg_emos::pipeline::{mixture_members, run_emos_stage, split_by_lead, PipelineSettings};
use csg_emos::qm::{quantile_map, ClimCdf};
use csg_emos::special::normal_cdf;
use csg_emos::synth::{emos_truth_cases, generate, ScenarioConfig};
use csg_emos::verify::{
    benjamini_hochberg, crps_bs_consistency_check, diebold_mariano, reliability, stationary_bootstrap_ci,
    BootstrapOptions,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for k in [0.5, 1.0, 2.0, 4.0, 8.0] {
        for theta in [0.2, 0.5, 1.0, 2.0, 5.0] {
            for delta in [0.1, 0.5, 1.0, 2.0, 4.0] {
                let p = CsgParams::new(k, theta, delta).map_err(|e| e.to_string())?;
                for y in [0.0, 0.1, 1.0, 5.0, 20.0] {
                    let q = csg_crps_quadrature(&p, y).map_err(|e| e.to_string())?;
                    worst = worst.max((csg_crps(&p, y) - q).abs());
                }
            }
        }
    }
    let t = start.elapsed();
    check(
        worst < 1e-8 && t < Duration::from_secs(10),
        format!("max |closed form - quadrature| = {worst:.2e} over 625 points in {t:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = CsgParams::new(rng.random_range(0.3..6.0), rng.random_range(0.2..4.0), rng.random_range(0.05..3.0))
            .map_err(|e| e.to_string())?;
        let y = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..15.0) };
        let d = crps_bs_consistency_check(&p, y).map_err(|e| e.to_string())?;
        worst = worst.max(d.abs_difference);
    }
    for _ in 0..100 {
        let m = rng.random_range(1..40);
        let points: Vec<f64> = (0..m)
            .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..20.0) })
            .collect();
        let weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
        let f = StepCdf::new(&points, &weights).map_err(|e| e.to_string())?;
        let y = rng.random_range(0.0..20.0);
        let d = crps_bs_consistency_check(&f, y).map_err(|e| e.to_string())?;
        worst = worst.max(d.abs_difference);
    }
    check(worst < 1e-6, format!("max |integrated BS - CRPS| = {worst:.2e} over 200 cases"))
}

fn criterion_3() -> Outcome {
    let truth = EmosCoefficients {
        a: 0.2f64.sqrt(),
        b_high: 0.9f64.sqrt(),
        b_low: 0.0,
        c: 0.3f64.sqrt(),
        d: 0.4f64.sqrt(),
        delta: 0.6,
    };
    let mixture = MixtureConfig::new(50, 0).map_err(|e| e.to_string())?;
    let train = emos_truth_cases(&truth, &mixture, 5000, 31);
    let held_out = emos_truth_cases(&truth, &mixture, 2000, 32);
    let fit = fit_summaries(&train, &mixture, None, &FitOptions::default()).map_err(|e| e.to_string())?;
    let (mut e_mu, mut e_sd) = (0.0, 0.0);
    for c in &held_out {
        let t = link(&truth, c.high_mean, c.low_mean, c.overall_mean);
        let f = link(&fit.coefficients, c.high_mean, c.low_mean, c.overall_mean);
        e_mu += ((f.gamma_mean() - t.gamma_mean()) / t.gamma_mean()).powi(2);
        e_sd += ((f.gamma_sd() - t.gamma_sd()) / t.gamma_sd()).powi(2);
    }
    let n = held_out.len() as f64;
    let (rms_mu, rms_sd) = ((e_mu / n).sqrt(), (e_sd / n).sqrt());
    check(
        fit.converged && rms_mu < 0.05 && rms_sd < 0.05,
        format!(
            "relative RMS error mu {:.2}%, sigma {:.2}%, converged {}",
            100.0 * rms_mu,
            100.0 * rms_sd,
            fit.converged
        ),
    )
}

/// Mean CRPS of raw and EMOS forecasts per (lead, mixture) on the underdispersed scenario.
struct MixtureRun {
    raw: BTreeMap<(LeadTime, MixtureConfig), f64>,
    emos: BTreeMap<(LeadTime, MixtureConfig), f64>,
    runtime: Duration,
}

fn mixture_run() -> Result<MixtureRun, String> {
    let start = Instant::now();
    let scenario = ScenarioConfig {
        lead_days: vec![1, 5, 10],
        ..Default::default()
    };
    let data = generate(&scenario).map_err(|e| e.to_string())?;
    let settings = PipelineSettings::default();
    let leads = split_by_lead(&data.forecasts, settings.emos.window_days).map_err(|e| e.to_string())?;
    let emos = run_emos_stage(&leads, &settings, true).map_err(|e| e.to_string())?;
    let mut out = MixtureRun {
        raw: BTreeMap::new(),
        emos: BTreeMap::new(),
        runtime: Duration::ZERO,
    };
    for e in &emos {
        let lc = leads.iter().find(|l| l.lead == e.lead).expect("lead present");
        let (mut raw, mut post, mut n) = (0.0, 0.0, 0.0);
        for (case, p) in lc.verification_cases().zip(&e.predictions) {
            raw += empirical_crps(&mixture_members(case, &e.mixture), case.observation);
            post += csg_crps(p, case.observation);
            n += 1.0;
        }
        out.raw.insert((e.lead, e.mixture), raw / n);
        out.emos.insert((e.lead, e.mixture), post / n);
    }
    out.runtime = start.elapsed();
    Ok(out)
}

fn criterion_4(run: &Result<MixtureRun, String>) -> Outcome {
    let run = run.as_ref()?;
    let worse: Vec<String> = run
        .raw
        .iter()
        .filter(|(k, raw)| run.emos[k] >= **raw)
        .map(|((lead, m), raw)| format!("{lead} {m}: emos {:.4} raw {raw:.4}", run.emos[&(*lead, *m)]))
        .collect();
    let min_gain = run
        .raw
        .iter()
        .map(|(k, raw)| 1.0 - run.emos[k] / raw)
        .fold(f64::INFINITY, f64::min);
    check(
        worse.is_empty() && run.raw.len() == 15 && run.runtime < Duration::from_secs(300),
        if worse.is_empty() {
            format!(
                "EMOS below raw for all {} (lead, mixture) pairs, smallest relative gain {:.1}%, {:.0?}",
                run.raw.len(),
                100.0 * min_gain,
                run.runtime
            )
        } else {
            format!("EMOS not below raw: {}", worse.join("; "))
        },
    )
}

fn criterion_5(run: &Result<MixtureRun, String>) -> Outcome {
    let run = run.as_ref()?;
    let spread = |scores: &BTreeMap<(LeadTime, MixtureConfig), f64>, lead: LeadTime| {
        let v: Vec<f64> = scores.iter().filter(|(k, _)| k.0 == lead).map(|(_, v)| *v).collect();
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let leads: Vec<LeadTime> = run.raw.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut details = Vec::new();
    let mut ok = true;
    for lead in leads {
        let (pre, post) = (spread(&run.raw, lead), spread(&run.emos, lead));
        ok &= post < pre;
        details.push(format!("{lead}: {pre:.4} -> {post:.4}"));
    }
    check(ok, format!("CRPS spread across mixtures, raw -> EMOS: {}", details.join(", ")))
}

fn criterion_6() -> Outcome {
    let normal = Normal::new(1.0, 0.1).expect("valid normal");
    let run = |seed: u64| -> Result<usize, String> {
        let mut covered = 0;
        for sim in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + sim);
            let rows: Vec<[f64; 1]> = (0..1000).map(|_| [normal.sample(&mut rng)]).collect();
            let opts = BootstrapOptions {
                seed: seed ^ sim,
                ..Default::default()
            };
            let ci = stationary_bootstrap_ci(&rows, |s| s[0] / 1000.0, &opts).map_err(|e| e.to_string())?;
            covered += (ci.lo <= 1.0 && 1.0 <= ci.hi) as usize;
        }
        Ok(covered)
    };
    let (a, b) = (run(6)?, run(6)?);
    check(
        a >= 180 && a == b,
        format!("95% CI covered the true mean in {a}/200 simulations; repeat run {b}/200"),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rejected = 0;
    for _ in 0..1000 {
        let d: Vec<f64> = (0..200).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let r = diebold_mariano(&d, 1).map_err(|e| e.to_string())?;
        rejected += (r.p_value < 0.05) as usize;
    }
    let size = rejected as f64 / 1000.0;

    let (m, m0) = (100, 90);
    let mut fdp = 0.0;
    for _ in 0..1000 {
        let p: Vec<f64> = (0..m)
            .map(|i| {
                if i < m0 {
                    rng.random::<f64>()
                } else {
                    let z: f64 = 3.0 + rng.sample::<f64, _>(StandardNormal);
                    1.0 - normal_cdf(z)
                }
            })
            .collect();
        let rej = benjamini_hochberg(&p, 0.05).map_err(|e| e.to_string())?;
        let false_rej = rej.iter().filter(|&&i| i < m0).count();
        fdp += false_rej as f64 / rej.len().max(1) as f64;
    }
    let fdr = fdp / 1000.0;
    check(
        (0.03..=0.07).contains(&size) && fdr <= 0.07,
        format!("DM size {:.1}% at nominal 5%; BH empirical FDR {:.2}%", 100.0 * size, 100.0 * fdr),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pairs: Vec<(f64, bool)> = (0..20_000)
        .map(|_| {
            let p: f64 = rng.random();
            (p, rng.random::<f64>() < p)
        })
        .collect();
    let diagram = reliability(&pairs, 10).map_err(|e| e.to_string())?;
    let verdicts: Vec<bool> = diagram.bins.iter().filter_map(|b| b.within_band(0.99)).collect();
    let inside = verdicts.iter().filter(|v| **v).count();
    check(
        verdicts.len() == 10 && inside >= 8,
        format!("{inside} of {} occupied bins inside the 99% binomial band", verdicts.len()),
    )
}

fn criterion_9() -> Outcome {
    let s: Vec<f64> = (0..200).map(|i| (i as f64 * 0.11).powf(1.4)).collect();
    let clim = ClimCdf::build(&s).map_err(|e| e.to_string())?;
    let tol = clim.max_spacing();
    let mut sup = 0.0f64;
    let top = *s.last().expect("non-empty");
    for i in 0..=2000 {
        let x = top * i as f64 / 2000.0;
        sup = sup.max((quantile_map(x, &clim, &clim) - x).abs());
    }
    let obs: Vec<f64> = (0..100).map(f64::from).collect();
    let fc: Vec<f64> = obs.iter().map(|v| 2.0 * v).collect();
    let (fo, ff) = (
        ClimCdf::build(&obs).map_err(|e| e.to_string())?,
        ClimCdf::build(&fc).map_err(|e| e.to_string())?,
    );
    let bias_err = fc
        .iter()
        .map(|&x| (quantile_map(x, &ff, &fo) - x / 2.0).abs())
        .fold(0.0f64, f64::max);
    let four = quantile_map(4.0, &ff, &fo);
    check(
        sup <= tol && bias_err == 0.0 && four == 2.0,
        format!(
            "identity sup error {sup:.2e} (interpolation tolerance {tol:.2e}); doubled climate: f=4 -> {four}, max error {bias_err:.1e}"
        ),
    )
}

fn bundle(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().expect("file name").to_string_lossy().into_owned();
        // The recorded configuration includes the thread count and output path.
        if name != "config.toml" {
            out.insert(name, std::fs::read(&path).map_err(|e| e.to_string())?);
        }
    }
    Ok(out)
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_csg-emos");
    let scenario = [
        "--set",
        "scenario.n_locations=16",
        "--set",
        "scenario.n_days=40",
        "--set",
        "scenario.lead_days=[1,4]",
        "--set",
        "verify.n_boot=300",
    ];
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin)
            .args(args)
            .args(scenario)
            .env("CSGEMOS_LOG", "error")
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&out.stderr).trim().to_string())
        }
    };
    let data = tmp.path().join("data");
    let data_s = data.to_string_lossy().into_owned();
    run(&["simulate", "-o", &data_s])?;
    let f = data.join("forecasts.csv").to_string_lossy().into_owned();
    let r = data.join("reforecasts.csv").to_string_lossy().into_owned();
    let mut bundles = Vec::new();
    for threads in ["1", "3", "1"] {
        let out = tmp.path().join(format!("report-{threads}-{}", bundles.len()));
        run(&[
            "report",
            "-j",
            threads,
            "-o",
            &out.to_string_lossy(),
            "--forecasts",
            &f,
            "--reforecasts",
            &r,
        ])?;
        bundles.push(bundle(&out)?);
    }
    let files = bundles[0].len();
    let bytes: usize = bundles[0].values().map(Vec::len).sum();
    check(
        files >= 8 && bundles.iter().all(|b| *b == bundles[0]),
        format!("3 report runs (1, 3, 1 threads): {files} files, {bytes} bytes, byte-identical"),
    )
}

fn main() {
    let mixtures = mixture_run();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("CSG CRPS closed form vs quadrature", Box::new(criterion_1)),
        ("CRPS equals integrated Brier score", Box::new(criterion_2)),
        ("CSG-EMOS parameter recovery", Box::new(criterion_3)),
        ("EMOS beats raw for every mixture and lead", Box::new(|| criterion_4(&mixtures))),
        ("EMOS narrows the spread across mixtures", Box::new(|| criterion_5(&mixtures))),
        ("stationary bootstrap coverage", Box::new(criterion_6)),
        ("DM size and BH false discovery rate", Box::new(criterion_7)),
        ("reliability of calibrated probabilities", Box::new(criterion_8)),
        ("quantile mapping identity and bias removal", Box::new(criterion_9)),
        ("end-to-end determinism across pool sizes", Box::new(criterion_10)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
