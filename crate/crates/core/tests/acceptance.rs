//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use endprompt_lab::data::{self, CuePolicy, SampleSpec, TrainingSample, BYTE_VOCAB};
use endprompt_lab::experiment::{self, DeskConfig};
use endprompt_lab::intervals::DistanceSet;
use endprompt_lab::model::{Batch, BatchRow, TinyModelParams};
use endprompt_lab::plan::{self, PlanKind, PlanSpec};
use endprompt_lab::rope::{self, HeadVector};
use endprompt_lab::smoothness::{bernstein_check, TrigPolynomial};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Score from first principles: complex pairs, explicit rotation angles.
fn oracle_score(q: &[f64], k: &[f64], pm: f64, pn: f64, base: f64) -> f64 {
    let d = q.len();
    (0..d / 2)
        .map(|j| {
            let theta = base.powf(-2.0 * j as f64 / d as f64);
            let (qa, qb) = (q[2 * j], q[2 * j + 1]);
            let (ka, kb) = (k[2 * j], k[2 * j + 1]);
            let (cm, sm) = ((pm * theta).cos(), (pm * theta).sin());
            let (cn, sn) = ((pn * theta).cos(), (pn * theta).sin());
            let (qr, qi) = (qa * cm - qb * sm, qa * sm + qb * cm);
            let (kr, ki) = (ka * cn - kb * sn, ka * sn + kb * cn);
            qr * kr + qi * ki
        })
        .sum()
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for case in 0..1000 {
        let dim = [2, 4, 8, 64][case % 4];
        let spec = rope::frequencies(dim, rope::DEFAULT_BASE).unwrap();
        let (q, k) = (HeadVector::new(gaussian(&mut rng, dim)), HeadVector::new(gaussian(&mut rng, dim)));
        let pm = rng.random_range(-5000.0..5000.0);
        let pn = rng.random_range(-5000.0..5000.0);
        let direct = rope::score_direct(&q, &k, pm, pn, &spec).unwrap();
        let dec = rope::decompose(&q, &k, &spec).unwrap();
        let spectral = rope::score_spectral(&dec, pm - pn, &spec, 1.0).unwrap();
        let oracle = oracle_score(q.values(), k.values(), pm, pn, rope::DEFAULT_BASE);
        let tol = 1e-9 * (1.0 + direct.abs());
        let err = (direct - spectral).abs().max((direct - oracle).abs());
        worst = worst.max(err / (1.0 + direct.abs()));
        if err > tol {
            failures += 1;
        }
    }
    let elapsed = started.elapsed();
    Outcome {
        pass: failures == 0 && elapsed < Duration::from_secs(5),
        detail: format!("1000 cases, {failures} failures, worst scaled error {worst:.2e}, {elapsed:.2?}"),
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut shift_worst = 0.0f64;
    let mut pi_worst = 0.0f64;
    for case in 0..1000 {
        let dim = [2, 4, 8, 16, 64, 128][case % 6];
        let spec = rope::frequencies(dim, rope::DEFAULT_BASE).unwrap();
        let (q, k) = (HeadVector::new(gaussian(&mut rng, dim)), HeadVector::new(gaussian(&mut rng, dim)));
        let pm = rng.random_range(0.0..4096.0);
        let pn = rng.random_range(0.0..4096.0);
        let delta = rng.random_range(-4096.0..4096.0);
        let a = rope::score_direct(&q, &k, pm, pn, &spec).unwrap();
        let b = rope::score_direct(&q, &k, pm + delta, pn + delta, &spec).unwrap();
        shift_worst = shift_worst.max((a - b).abs());

        let dec = rope::decompose(&q, &k, &spec).unwrap();
        let d = rng.random_range(-4096.0..4096.0);
        let s = if case % 2 == 0 { rng.random_range(1..=16) as f64 } else { rng.random_range(1.0..16.0) };
        let lhs = rope::score_spectral(&dec, d, &spec, s).unwrap();
        let rhs = rope::score_spectral(&dec, d / s, &spec, 1.0).unwrap();
        pi_worst = pi_worst.max((lhs - rhs).abs());
    }
    Outcome {
        pass: shift_worst <= 1e-9 && pi_worst <= 1e-12,
        detail: format!("shift max error {shift_worst:.2e}, interpolation max error {pi_worst:.2e}"),
    }
}

/// Every pairwise distance of the plan, by direct enumeration.
fn enumerate_distances(assigned: &[u64], target_len: u64) -> Vec<bool> {
    let mut seen = vec![false; target_len as usize];
    for (i, &p) in assigned.iter().enumerate() {
        for &r in &assigned[..=i] {
            seen[(p - r) as usize] = true;
        }
    }
    seen
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut failures = Vec::new();
    let mut done = 0;
    while done < 200 {
        let target_len = rng.random_range(3..=4096u64);
        let a = rng.random_range(1..=target_len / 2);
        let b = rng.random_range(1..=target_len / 2);
        let spec = PlanSpec { a, b, target_len, scale: 1.0 };
        if spec.validate().is_err() || !spec.gap_condition() {
            continue;
        }
        done += 1;
        let built = plan::endprompt_plan(&spec).unwrap();
        let seen = enumerate_distances(&built.assigned, target_len);
        let oracle = DistanceSet::from_mask(&seen);
        let oracle_gap = DistanceSet::from_mask(&seen.iter().map(|x| !x).collect::<Vec<_>>());
        let closed = plan::observed_distances_closed_form(&spec).unwrap();
        let gap = plan::gap_distances(&spec).unwrap();
        if closed != oracle || gap != oracle_gap || plan::observed_distances_bruteforce(&built) != oracle {
            failures.push(format!("a={a} b={b} L={target_len}"));
        }
    }
    let elapsed = started.elapsed();
    Outcome {
        pass: failures.is_empty() && elapsed < Duration::from_secs(10),
        detail: format!("200 specs, {} mismatches {:?}, {elapsed:.2?}", failures.len(), failures.first()),
    }
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut failures = 0;
    let mut tightest = f64::INFINITY;
    for _ in 0..500 {
        let dim = 2 * rng.random_range(1..=64);
        let s = rng.random_range(1..=16) as f64;
        let spec = rope::frequencies(dim, rope::DEFAULT_BASE).unwrap();
        let (q, k) = (HeadVector::new(gaussian(&mut rng, dim)), HeadVector::new(gaussian(&mut rng, dim)));
        let dec = rope::decompose(&q, &k, &spec).unwrap();
        let poly = TrigPolynomial::from_decomposition(&dec, &spec, s).unwrap();
        let report = bernstein_check(&poly, 0.0, 4095.0).unwrap();
        // theta_0 = 1 for every dimension
        let amp: f64 = dec.amplitudes.iter().sum();
        let bound1 = amp / s;
        let bound2 = amp / (s * s);
        if !(report.sup_ds <= bound1 + 1e-9 && report.sup_d2s <= bound2 + 1e-9 && report.passed()) {
            failures += 1;
        }
        // The reported suprema must be honest: at least the value at a few probe points.
        for _ in 0..8 {
            let d = rng.random_range(0.0..4095.0);
            let slope: f64 = poly.components().iter().map(|c| -c.amplitude * c.freq * (c.freq * d + c.phase).sin()).sum();
            if slope.abs() > report.sup_ds + 1e-9 {
                failures += 1;
            }
        }
        tightest = tightest.min(bound1 - report.sup_ds);
    }
    let elapsed = started.elapsed();
    Outcome {
        pass: failures == 0 && elapsed < Duration::from_secs(60),
        detail: format!("500 decompositions, {failures} failures, smallest first-order margin {tightest:.3e}, {elapsed:.2?}"),
    }
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let cfg = common::desk_config(true);
    let params = TinyModelParams::init(&cfg, 105).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let rows = (0..2).map(|_| common::random_row(&mut rng, 32, 16, 10, 40)).collect();
    let batch = Batch::new(rows, 4.0).unwrap();
    let check = common::check_gradient(&params, &batch, 100, 1e-5, 105);
    let elapsed = started.elapsed();
    Outcome {
        pass: check.checked == 100 && check.max_rel_err <= 1e-4 && elapsed < Duration::from_secs(60),
        detail: format!("{} coordinates, max relative error {:.2e} ({}), {elapsed:.2?}", check.checked, check.max_rel_err, check.worst),
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let cfg = common::desk_config(true);
    let mut causal_failures = 0;
    for case in 0..20 {
        let params = TinyModelParams::init(&cfg, 600 + case).unwrap();
        let t = rng.random_range(3..32);
        let tokens: Vec<u32> = (0..t).map(|_| rng.random_range(0..32)).collect();
        let positions: Vec<f64> = (0..t).map(|i| i as f64 / 3.0 + if i + 2 > t { 300.0 } else { 0.0 }).collect();
        let cut = rng.random_range(1..t);
        let mut changed = tokens.clone();
        for tok in &mut changed[cut..] {
            *tok = (*tok + rng.random_range(1..32)) % 32;
        }
        let a = params.forward_sequence(&tokens, &positions).unwrap();
        let b = params.forward_sequence(&changed, &positions).unwrap();
        let same = a[..cut * 32].iter().zip(&b[..cut * 32]).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            causal_failures += 1;
        }
    }

    let params = TinyModelParams::init(&cfg, 607).unwrap();
    let mut wp_err = 0.0f64;
    for _ in 0..20 {
        let a = 10;
        let mut row = common::random_row(&mut rng, 32, 14, a, 500);
        for (i, w) in row.weights.iter_mut().enumerate() {
            if i + 1 >= a {
                *w = 0.0;
            }
        }
        let full = params.batch_loss(&Batch::new(vec![row.clone()], 8.0).unwrap()).unwrap();
        let ctx_row = BatchRow {
            tokens: row.tokens[..a].to_vec(),
            positions: row.positions[..a].to_vec(),
            weights: row.weights[..a - 1].to_vec(),
        };
        let ctx = params.batch_loss(&Batch::new(vec![ctx_row], 8.0).unwrap()).unwrap();
        wp_err = wp_err.max((full.sum - ctx.sum).abs());
    }

    let mut row = common::random_row(&mut rng, 32, 14, 10, 500);
    row.weights.fill(0.0);
    let zero = params.batch_loss(&Batch::new(vec![row], 8.0).unwrap()).unwrap().sum;

    Outcome {
        pass: causal_failures == 0 && wp_err <= 1e-12 && zero == 0.0,
        detail: format!("causality failures {causal_failures}/20, prompt-weight-zero error {wp_err:.2e}, zero-weight loss {zero}"),
    }
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let samples: Vec<TrainingSample> = (0..1000)
        .map(|i| {
            let cues = if i % 2 == 0 { data::desk_cues() } else { data::default_cues() };
            let a = rng.random_range(1..256u64);
            let spec = SampleSpec {
                a,
                target_len: a + cues.max_len() as u64 + rng.random_range(0..4000u64),
                scale: rng.random_range(1..=16) as f64,
                plan_kind: [PlanKind::EndPrompt, PlanKind::Full][i % 2],
                prompt_weight: rng.random_range(1..=1000) as f64 / 1000.0,
                context_weight: 1.0,
                cue_policy: CuePolicy::PerSample,
                pose_chunks: 2,
            };
            let ctx: Vec<u32> = (0..a).map(|_| rng.random_range(0..BYTE_VOCAB as u32)).collect();
            data::make_sample(&ctx, &cues, &spec, &mut rng).unwrap()
        })
        .collect();
    let mut buf = Vec::new();
    data::write_samples(&samples, &mut buf).unwrap();
    let back = data::read_samples(buf.as_slice(), BYTE_VOCAB);
    let (identical, revalidated) = match &back {
        Ok(b) => {
            let identical = b == &samples;
            let revalidated = b
                .iter()
                .filter(|s| {
                    let m = &s.meta;
                    let expected = match m.plan {
                        PlanKind::EndPrompt => plan::endprompt_plan(&PlanSpec::new(m.a, m.b, m.target_len, m.s).unwrap()).unwrap().assigned,
                        _ => (0..m.a + m.b).collect(),
                    };
                    expected == s.positions
                })
                .count();
            (identical, revalidated)
        }
        Err(_) => (false, 0),
    };
    Outcome {
        pass: identical && revalidated == 1000,
        detail: format!("field-identical {identical}, plans revalidated {revalidated}/1000"),
    }
}

fn desk_outcomes() -> (Outcome, Outcome) {
    let cfg = DeskConfig::default();
    let seeds = [0u64, 1, 2];
    let started = Instant::now();
    let result = match experiment::run_desk(&cfg, &seeds) {
        Ok(r) => r,
        Err(e) => {
            let fail = || Outcome { pass: false, detail: format!("experiment failed: {e}") };
            return (fail(), fail());
        }
    };
    let elapsed = started.elapsed();
    let hi = cfg.target_len - 1;
    let lo = cfg.target_len - cfg.a - result.prompt_len + 1;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let ep: Vec<f64> = result.seeds.iter().map(|s| s.endprompt.accuracy).collect();
    let base: Vec<f64> = result.seeds.iter().map(|s| s.baseline.accuracy).collect();
    let gain = 100.0 * (mean(&ep) - mean(&base));
    let nll_pairs: Vec<(Option<f64>, Option<f64>)> = result
        .seeds
        .iter()
        .map(|s| (s.endprompt.bucket_nll(lo, hi), s.baseline.bucket_nll(lo, hi)))
        .collect();
    let nll_lower = nll_pairs.iter().all(|p| matches!(p, (Some(e), Some(b)) if e < b));
    let fmt_nll = nll_pairs
        .iter()
        .map(|(e, b)| format!("{:.3}/{:.3}", e.unwrap_or(f64::NAN), b.unwrap_or(f64::NAN)))
        .collect::<Vec<_>>()
        .join(" ");
    let c8 = Outcome {
        pass: gain >= 10.0 && nll_lower,
        detail: format!(
            "accuracy endprompt {:.1}% vs baseline {:.1}% (gain {gain:.1} points); NLL [{lo},{hi}] endprompt/baseline per seed {fmt_nll}; pretrained accuracy at {} {}; {elapsed:.0?}",
            100.0 * mean(&ep),
            100.0 * mean(&base),
            cfg.pretrain_len,
            result.seeds.iter().map(|s| format!("{:.0}%", 100.0 * s.pretrain_accuracy)).collect::<Vec<_>>().join("/")
        ),
    };
    let per_cue: Vec<(String, f64)> = result.cue_ids.iter().enumerate()
        .map(|(k, id)| (id.clone(), 100.0 * mean(&result.seeds.iter().map(|s| s.single_cue[k].accuracy).collect::<Vec<_>>())))
        .collect();
    let accs: Vec<f64> = per_cue.iter().map(|(_, a)| *a).collect();
    let spread = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - accs.iter().cloned().fold(f64::INFINITY, f64::min);
    let c9 = Outcome {
        pass: per_cue.len() == 3 && spread <= 15.0,
        detail: format!(
            "{} ; spread {spread:.1} points",
            per_cue.iter().map(|(id, a)| format!("{id} {a:.1}%")).collect::<Vec<_>>().join(", ")
        ),
    };
    (c8, c9)
}

fn run_pipeline(dir: &Path) -> Result<Duration, String> {
    let bin = env!("CARGO_BIN_EXE_endprompt-lab");
    let steps: [&[&str]; 5] = [
        &["plan", "--out", "plan.txt"],
        &["make-data", "--samples", "64", "--out", "samples.jsonl"],
        &["train", "--data", "samples.jsonl", "--max-steps", "200", "--out", "model.ckpt"],
        &["eval", "--checkpoint", "model.ckpt", "--out", "eval.csv"],
        &["report", "eval.csv", "--out", "report.csv"],
    ];
    let started = Instant::now();
    for args in steps {
        let out = Command::new(bin)
            .args(args)
            .args(["--seed", "7"])
            .current_dir(dir)
            .env_remove("ENDPROMPT_LAB_THREADS")
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.code() != Some(0) {
            return Err(format!("{} exited with {:?}: {}", args[0], out.status.code(), String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(started.elapsed())
}

fn criterion_10() -> Outcome {
    let (one, two) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (t1, t2) = match (run_pipeline(one.path()), run_pipeline(two.path())) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome { pass: false, detail: e },
    };
    let mut names: Vec<String> = std::fs::read_dir(one.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(one.path().join(n)).ok() != std::fs::read(two.path().join(n)).ok())
        .collect();
    let slowest = t1.max(t2);
    Outcome {
        pass: differing.is_empty() && names.len() >= 10 && slowest < Duration::from_secs(60),
        detail: format!("{} files, {} differ {:?}, slowest run {slowest:.1?}", names.len(), differing.len(), differing),
    }
}

fn main() {
    let quick: [(u32, fn() -> Outcome); 7] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
    ];
    let mut results: Vec<(u32, Outcome)> = quick.iter().map(|(n, f)| (*n, f())).collect();
    let (c8, c9) = desk_outcomes();
    results.push((8, c8));
    results.push((9, c9));
    results.push((10, criterion_10()));
    let mut failed = 0;
    for (n, o) in &results {
        println!("criterion {n:>2}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    // Failures are reported, not turned into a failing exit status, so the
    // rest of the workspace tests still run to completion.
    println!("{} of {} criteria passed", results.len() - failed, results.len());
}
