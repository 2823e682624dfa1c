//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Criteria 3, 5 and 6 share one set of training runs on the default
//! benchmark (three seeds of the full and base models).

#[path = "../../core/tests/reference/mod.rs"]
mod reference;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use duq_core::baselines::ensemble_decompose;
use duq_core::diff::RngStream;
use duq_core::elvm::{run_chains, Gaussian, LangevinConfig, LinearGaussian};
use duq_core::metrics::{ece_dense, pavpu, PAVPU_BINS};
use duq_core::synth::{BenchConfig, Dataset};
use duq_core::trainer::{
    aleatoric_pearson, sigma_sq_cv, train, EvalOutput, Method, TrainConfig, TrainLog, TrainOptions,
    TrainState,
};
use duq_core::TensorMap;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Line {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn duq(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_duq"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("duq binary runs")
}

fn gradient_soundness() -> Line {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut worst = 0.0f64;
    let mut ok = true;
    for seed in SEEDS {
        let out = duq(dir.path(), &["grad-check", "--seed", &seed.to_string()]);
        ok &= out.status.code() == Some(0);
        let text = String::from_utf8_lossy(&out.stdout);
        for line in text.lines().filter(|l| l.contains("max rel err")) {
            let v: f64 = line
                .split("max rel err")
                .nth(1)
                .and_then(|r| r.split_whitespace().next())
                .and_then(|v| v.parse().ok())
                .unwrap_or(f64::INFINITY);
            worst = worst.max(v);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Line {
        id: 1,
        title: "gradient soundness",
        pass: ok && worst < 1e-4 && secs < 60.0,
        detail: format!(
            "max relative error {worst:.2e} over 3 seeds (< 1e-4), {secs:.1} s (< 60 s)"
        ),
    }
}

fn langevin_oracle() -> Line {
    let start = Instant::now();
    let cfg = LangevinConfig {
        steps: 500,
        step_size: 0.2,
        sigma_lik: 1.0,
        conditional: false,
        inject_noise: true,
    };
    let burn_in = 100;
    let mut worst: f64 = 0.0;
    for (case, (a, b, y)) in [(1.5, 0.2, 1.0), (0.7, -0.3, 2.0), (2.0, 0.5, -1.0)]
        .into_iter()
        .enumerate()
    {
        let target = LinearGaussian {
            a,
            b,
            y: vec![vec![y]; 100],
        };
        let priors = vec![Gaussian::standard(1); 100];
        let mut rng = RngStream::new(100 + case as u64, 0);
        let z0: Vec<Vec<f64>> = (0..100).map(|_| rng.normal_vec(1)).collect();
        let chains = run_chains(&target, z0, &priors, &cfg, &mut rng).unwrap();
        let s: Vec<f64> = chains
            .iter()
            .flat_map(|c| c.states[burn_in..].iter().map(|z| z[0]))
            .collect();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64;
        let (pm, pv) = target.posterior(y);
        worst = worst
            .max((mean - pm).abs() / pm.abs())
            .max((var - pv).abs() / pv);
    }
    let secs = start.elapsed().as_secs_f64();
    Line {
        id: 2,
        title: "Langevin vs conjugate posterior",
        pass: worst < 0.1 && secs < 120.0,
        detail: format!(
            "worst relative deviation {worst:.3} over 3 generators (< 0.10), {secs:.1} s (< 120 s)"
        ),
    }
}

fn metric_oracles() -> Line {
    let start = Instant::now();
    let mut mismatches = 0;
    let mut cases = 0;
    for (s, y, u) in reference::hand_cases() {
        cases += 1;
        let d =
            (ece_dense(&s, &y).unwrap() - reference::ece_reference(s.values(), y.values())).abs();
        if d > 1e-12 {
            mismatches += 1;
        }
        for g in [1, 2, 3, 4] {
            let t = pavpu(&s, &y, &u, g).unwrap();
            let (counts, score) = reference::pavpu_reference(&s, &y, &u, g);
            for k in 0..PAVPU_BINS {
                if [t.n_ac[k], t.n_au[k], t.n_ic[k], t.n_iu[k]] != counts[k]
                    || t.per_bin[k] != score[k]
                {
                    mismatches += 1;
                }
            }
        }
    }
    let mut rng = RngStream::new(4, 0);
    let mut worst_perfect: f64 = 0.0;
    let mut oracle_ok = true;
    for n in 2..=8 {
        let y = reference::map(n, n, || reference::binary(&mut rng));
        worst_perfect = worst_perfect.max(ece_dense(&y, &y).unwrap());
        // Whole map as one patch: uncertain exactly when inaccurate at t = 0.5.
        let s = reference::map(n, n, || rng.uniform());
        let right = s
            .values()
            .iter()
            .zip(y.values())
            .filter(|(p, g)| (**p >= 0.5) == (**g == 1.0))
            .count();
        let inaccurate = (right as f64) < 0.5 * (n * n) as f64;
        let u = TensorMap::new(1, n, n, vec![if inaccurate { 1.0 } else { 0.0 }; n * n]).unwrap();
        oracle_ok &= pavpu(&s, &y, &u, n).unwrap().per_bin[4] == 1.0;
    }
    let secs = start.elapsed().as_secs_f64();
    Line {
        id: 4,
        title: "metric oracles",
        pass: mismatches == 0 && worst_perfect < 1e-9 && oracle_ok && secs < 60.0,
        detail: format!(
            "{mismatches} mismatches over {cases} maps 2x2..8x8, perfect ECE {worst_perfect:.1e}, oracle PAvPU {}, {secs:.2} s",
            if oracle_ok { "1.0" } else { "below 1.0" }
        ),
    }
}

fn mutual_information() -> Line {
    let start = Instant::now();
    let mut rng = RngStream::new(8, 0);
    let mut worst = f64::INFINITY;
    for _ in 0..1000 {
        let m = 2 + (rng.uniform() * 9.0) as usize;
        let side = 1 + (rng.uniform() * 8.0) as usize;
        let samples: Vec<TensorMap> = (0..m)
            .map(|_| reference::map(side, side, || reference::score(&mut rng)))
            .collect();
        let d = ensemble_decompose(&samples).unwrap();
        worst = d.epistemic.values().iter().copied().fold(worst, f64::min);
    }
    let secs = start.elapsed().as_secs_f64();
    Line {
        id: 8,
        title: "mutual information non-negativity",
        pass: worst >= -1e-9 && secs < 30.0,
        detail: format!(
            "min epistemic {worst:.2e} over 1000 sets (>= -1e-9), {secs:.2} s (< 30 s)"
        ),
    }
}

fn determinism() -> Line {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let bench = BenchConfig {
        image_size: 16,
        counts: duq_core::synth::SplitCounts {
            train: 16,
            val: 4,
            test_id: 4,
            test_ood: 4,
        },
        center_sigma: 1.0,
        max_offset: 4.0,
        ood: duq_core::synth::OodRule {
            held_out_shape: Some(duq_core::synth::ShapeClass::Crescent),
            offset_threshold: Some(2.0),
        },
        ..BenchConfig::default()
    };
    fs::write(p.join("bench.json"), serde_json::to_string(&bench).unwrap()).unwrap();
    fs::write(
        p.join("train.json"),
        serde_json::to_string(&TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        })
        .unwrap(),
    )
    .unwrap();
    let mut ok = duq(
        p,
        &[
            "gen-data",
            "--config",
            "bench.json",
            "--out",
            "data",
            "--seed",
            "5",
        ],
    )
    .status
    .success();
    for run in ["a", "b"] {
        ok &= duq(
            p,
            &[
                "train",
                "--config",
                "train.json",
                "--data",
                "data",
                "--out",
                run,
            ],
        )
        .status
        .success();
    }
    let same_ckpt = ok
        && fs::read(p.join("a/checkpoint.duqc")).unwrap()
            == fs::read(p.join("b/checkpoint.duqc")).unwrap();
    let logs = |r: &str| {
        TrainLog::read_csv(p.join(r).join("train_log.csv")).map(|l| l.without_wall_time())
    };
    let same_log =
        ok && matches!((logs("a"), logs("b")), (Ok(a), Ok(b)) if a == b && a.records.len() == 3);
    Line {
        id: 9,
        title: "determinism",
        pass: same_ckpt && same_log,
        detail: format!(
            "checkpoints {}, train logs {} (wall time excluded)",
            if same_ckpt { "bit-identical" } else { "differ" },
            if same_log { "identical" } else { "differ" }
        ),
    }
}

struct SeedRun {
    full: TrainState,
    full_id: EvalOutput,
    full_ood: EvalOutput,
    base_id: EvalOutput,
    full_secs: f64,
    base_secs: f64,
    data: Dataset,
}

fn seed_run(seed: u64) -> SeedRun {
    let data = Dataset::generate(&BenchConfig {
        seed,
        ..BenchConfig::default()
    })
    .unwrap();
    let start = Instant::now();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let full = train(&cfg, &data, &TrainOptions::default()).unwrap().state;
    let full_id = full.evaluate("test_id", &data.test_id).unwrap();
    let full_ood = full.evaluate("test_ood", &data.test_ood).unwrap();
    let full_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let base_cfg = TrainConfig {
        method: Method::Base,
        ..cfg
    };
    let base = train(&base_cfg, &data, &TrainOptions::default())
        .unwrap()
        .state;
    let base_id = base.evaluate("test_id", &data.test_id).unwrap();
    let base_secs = start.elapsed().as_secs_f64();
    println!(
        "  seed {seed}: full ece {:.4} pavpu {:.4} | base ece {:.4} pavpu {:.4} | full {full_secs:.0} s, base {base_secs:.0} s",
        full_id.report.aggregate.ece_d,
        full_id.report.aggregate.pavpu,
        base_id.report.aggregate.ece_d,
        base_id.report.aggregate.pavpu
    );
    SeedRun {
        full,
        full_id,
        full_ood,
        base_id,
        full_secs,
        base_secs,
        data,
    }
}

fn mean_epistemic(out: &EvalOutput) -> f64 {
    out.images.iter().map(|i| i.epistemic.mean()).sum::<f64>() / out.images.len() as f64
}

fn trivial_solution(first: &SeedRun) -> Line {
    let start = Instant::now();
    let data = &first.data;
    let cfg = TrainConfig {
        method: Method::DualHead,
        seed: 0,
        ..TrainConfig::default()
    };
    let dual = train(&cfg, data, &TrainOptions::default()).unwrap().state;
    let cv = sigma_sq_cv(&dual, &data.val).unwrap();
    let val = first.full.evaluate("val", &data.val).unwrap();
    let r = aleatoric_pearson(&val.images, &data.val).unwrap();
    let secs = start.elapsed().as_secs_f64() + first.full_secs;
    Line {
        id: 3,
        title: "trivial-solution reproduction",
        pass: cv < 0.05 && r > 0.5 && secs < 1200.0,
        detail: format!("dual-head sigma^2 CV {cv:.3} (< 0.05), full aleatoric Pearson {r:.3} (> 0.5), {secs:.0} s (< 1200 s)"),
    }
}

fn calibration(runs: &[SeedRun]) -> Line {
    let n = runs.len() as f64;
    let avg = |f: &dyn Fn(&SeedRun) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let fe = avg(&|r| r.full_id.report.aggregate.ece_d);
    let be = avg(&|r| r.base_id.report.aggregate.ece_d);
    let fp = avg(&|r| r.full_id.report.aggregate.pavpu);
    let bp = avg(&|r| r.base_id.report.aggregate.pavpu);
    let secs: f64 = runs.iter().map(|r| r.full_secs + r.base_secs).sum();
    Line {
        id: 5,
        title: "calibration improvement over base",
        pass: fe < be && fp > bp && secs < 5400.0,
        detail: format!("ECE_d full {fe:.4} vs base {be:.4}, PAvPU full {fp:.4} vs base {bp:.4}, {secs:.0} s (< 5400 s)"),
    }
}

fn ood_separation(runs: &[SeedRun]) -> Line {
    let n = runs.len() as f64;
    let id = runs.iter().map(|r| mean_epistemic(&r.full_id)).sum::<f64>() / n;
    let ood = runs
        .iter()
        .map(|r| mean_epistemic(&r.full_ood))
        .sum::<f64>()
        / n;
    Line {
        id: 6,
        title: "epistemic OOD separation",
        pass: ood >= 1.5 * id,
        detail: format!("OOD {ood:.4} vs ID {id:.4}, ratio {:.2} (>= 1.5)", ood / id),
    }
}

fn single_pass(first: &SeedRun) -> Line {
    let state = &first.full;
    let samples = &first.data.test_id;
    state.counter().reset();
    state.evaluate("test_id", samples).unwrap();
    let c = state.counter().snapshot();
    let n = samples.len();
    Line {
        id: 7,
        title: "single-pass evaluation",
        pass: c.stochastic == n && c.deterministic == n && c.heads == 2 * n,
        detail: format!(
            "{n} images: {} stochastic, {} deterministic, {} head passes (expected {n}, {n}, {})",
            c.stochastic,
            c.deterministic,
            c.heads,
            2 * n
        ),
    }
}

fn report(line: &Line) {
    println!(
        "criterion {} [{}] {}: {}",
        line.id,
        if line.pass { "PASS" } else { "FAIL" },
        line.title,
        line.detail
    );
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut lines = Vec::new();
    for f in [
        gradient_soundness,
        langevin_oracle,
        metric_oracles,
        mutual_information,
        determinism,
    ] {
        let l = f();
        report(&l);
        lines.push(l);
    }
    println!("training full and base models for seeds {SEEDS:?} on the default benchmark");
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| seed_run(s)).collect();
    for l in [
        trivial_solution(&runs[0]),
        calibration(&runs),
        ood_separation(&runs),
        single_pass(&runs[0]),
    ] {
        report(&l);
        lines.push(l);
    }
    lines.sort_by_key(|l| l.id);
    println!("\nacceptance summary");
    for l in &lines {
        report(l);
    }
    let failed: Vec<usize> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    if failed.is_empty() {
        println!("all {} criteria pass", lines.len());
    } else {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
