//! Acceptance run: one PASS/FAIL line per criterion. Criteria 4 to 8 train
//! the default desk configuration for seeds 7, 8 and 9 and take several
//! minutes per seed.
//!
//! The exit status is nonzero if a criterion outside `KNOWN_OPEN` fails.
//! Known-open criteria still print FAIL; `DFL_ACCEPTANCE_STRICT=1` makes
//! any failure fatal. `DFL_ACCEPTANCE=1,2,9` restricts the run to the
//! listed criteria.

#[path = "../../core/tests/common/mod.rs"]
#[allow(dead_code)]
mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::*;
use dfl_cli::config::RunConfig;
use dfl_cli::manifest::read_checksums;
use dfl_core::data::{decode_ppm, encode_ppm, generate};
use dfl_core::dflt;
use dfl_core::eval::{energy_shift, localize};
use dfl_core::geom::Rect;
use dfl_core::gradcheck::{composed_objective_error, kernel_suite};
use dfl_core::init::{fit_whitening, kmeans_detailed, nms_select, whiten_normalize};
use dfl_core::kernels;
use dfl_core::netdef::PoolMode;
use dfl_core::train::{ablate_with_full_run, AblationReport, TrainedRun, INIT_TABLE, POOLING_TABLE, STREAMS_TABLE};
use dfl_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [7, 8, 9];

/// Criteria that fail at the shipped defaults.
const KNOWN_OPEN: &[usize] = &[6];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn report(n: usize, name: &str, v: &Verdict, elapsed: Duration) -> bool {
    println!(
        "criterion {n} ({name}): {} [{:.1}s] {}",
        if v.pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        v.detail
    );
    v.pass
}

fn gradient_integrity() -> Verdict {
    const EPS: f64 = 1e-4;
    const TOL: f64 = 1e-5;
    let start = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut record = |name: String, e: f64| {
        if e >= worst.1 {
            worst = (name, e);
        }
    };
    match kernel_suite(EPS) {
        Ok(suite) => suite.into_iter().for_each(|(n, e)| record(n, e)),
        Err(e) => return verdict(false, format!("kernel suite failed: {e}")),
    }
    for (pool, sup) in [(PoolMode::Gmp, true), (PoolMode::Gmp, false), (PoolMode::Gap, true)] {
        match composed_objective_error(pool, sup, EPS) {
            Ok(e) => record(format!("three-loss objective ({pool}, supervision {sup})"), e),
            Err(e) => return verdict(false, format!("composed objective failed: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst.1 < TOL && secs < 30.0,
        format!("max relative error {:.2e} ({}) < 1e-5, {secs:.1}s < 30s", worst.1, worst.0),
    )
}

fn receptive_field_claim() -> Verdict {
    let start = Instant::now();
    let spec = Path::new(env!("CARGO_MANIFEST_DIR")).join("specs/vgg16.cfg");
    let out = match dfl_cli::run(["rf", "--spec", spec.to_str().unwrap(), "--tap", "conv4_3"]) {
        Ok(o) => o.stdout,
        Err(e) => return verdict(false, e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    let field = |key: &str| {
        out.split_whitespace()
            .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('=')?.parse::<usize>().ok())
    };
    verdict(
        field("size") == Some(92) && field("stride") == Some(8) && secs < 1.0,
        format!("vgg16 conv4_3: {}, {secs:.3}s", out.trim()),
    )
}

fn oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    for (n, &(c, h, w, o, k, s, p)) in
        [(3, 9, 9, 4, 3, 1, 1), (2, 8, 7, 5, 3, 2, 1), (4, 6, 6, 3, 1, 1, 0), (1, 10, 10, 2, 5, 3, 2)]
            .iter()
            .enumerate()
    {
        let x = random_tensor(&[c, h, w], n as u64);
        let wt = random_tensor(&[o, c, k, k], 100 + n as u64);
        let fast = kernels::conv2d(&x, &wt, s, p).unwrap();
        let slow = conv2d(&x, &wt, s, p);
        check(fast.shape() == slow.shape() && max_abs_diff(fast.data(), slow.data()) < 1e-10, "conv2d");
    }

    for (n, &(c, h, w, win, s, p)) in [(3, 8, 8, 2, 2, 0), (2, 7, 9, 3, 2, 1)].iter().enumerate() {
        let x = random_tensor(&[c, h, w], 7 + n as u64);
        let (fast, _) = kernels::max_pool2d(&x, win, s, p).unwrap();
        check(fast.data() == max_pool2d(&x, win, s, p).data(), "max_pool2d");
    }
    let x = random_tensor(&[5, 6, 7], 3);
    let (vals, locs) = kernels::global_max_pool(&x).unwrap();
    let (ov, ol) = global_max_pool(&x);
    check(vals.data() == ov.as_slice() && locs == ol, "global_max_pool");
    check(
        max_abs_diff(kernels::global_avg_pool(&x).unwrap().data(), &global_avg_pool(&x)) < 1e-10,
        "global_avg_pool",
    );

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..200 {
        let n = rng.gen_range(0..30);
        let cands: Vec<_> = (0..n)
            .map(|i| {
                let (x, y) = (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0));
                let side = rng.gen_range(4.0..16.0);
                candidate(i, (rng.gen_range(0..12) as f64) / 4.0, Rect::new(x, y, x + side, y + side))
            })
            .collect();
        let thr = [0.0, 0.1, 0.3, 0.7][trial % 4];
        let keep = rng.gen_range(1..8);
        let got: Vec<usize> = nms_select(&cands, thr, keep).iter().map(|c| c.location.1).collect();
        check(got == nms(&cands, thr, keep), "nms");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..20 {
        let k = rng.gen_range(2..4);
        let mut pts = Vec::new();
        for c in 0..k {
            for _ in 0..rng.gen_range(2..4) {
                pts.push(vec![10.0 * c as f64 + rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]);
            }
        }
        let r = kmeans_detailed(&pts, k, trial).unwrap();
        check((r.objective.last().unwrap() - kmeans_exhaustive(&pts, k)).abs() < 1e-10, "k-means");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let c = rng.gen_range(2..6);
        let feats: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..c).map(|i| rng.gen_range(-1.0..1.0) * (i + 1) as f64).collect())
            .collect();
        let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
        let stats = fit_whitening(&refs, 0.01).unwrap();
        let (mean, cov) = covariance(&feats);
        let center: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let got = whiten_normalize(&center, &stats).unwrap();
        check(max_abs_diff(&got, &whiten(&center, &mean, &cov, stats.ridge)) < 1e-10, "whitening");
    }

    let ds = generate(&dfl_core::data::SynthSpec {
        per_class_train: 2,
        per_class_test: 1,
        ..dfl_core::data::SynthSpec::desk(3)
    })
    .unwrap();
    for s in ds.train.iter().chain(&ds.test) {
        let bytes = encode_ppm(&s.image).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        check(back == s.image && encode_ppm(&back).unwrap() == bytes, "PPM round trip");
    }
    for (n, dims) in [vec![7], vec![3, 4, 5], vec![2, 1, 3, 3]].iter().enumerate() {
        let t = random_tensor(dims, n as u64);
        let back: Tensor<f64> = dflt::decode(&dflt::encode(&t)).unwrap();
        check(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "DFLT f64 round trip");
        let t32 = t.cast::<f32>();
        let back: Tensor<f32> = dflt::decode(&dflt::encode(&t32)).unwrap();
        check(back == t32, "DFLT f32 round trip");
    }

    let secs = start.elapsed().as_secs_f64();
    failures.dedup();
    let pass = failures.is_empty() && secs < 60.0;
    verdict(
        pass,
        if failures.is_empty() {
            format!("conv2d, pooling, NMS, k-means, whitening, PPM and DFLT agree with their oracles, {secs:.1}s")
        } else {
            format!("mismatches: {}", failures.join(", "))
        },
    )
}

struct SeedRun {
    report: AblationReport,
    full: TrainedRun<f32>,
    dataset: dfl_core::data::Dataset,
    seconds: f64,
}

fn desk_run(seed: u64) -> Result<SeedRun, String> {
    let mut config = RunConfig::default();
    config.set("seed", &seed.to_string()).map_err(|e| e.to_string())?;
    let spec = config.model_spec().map_err(|e| e.to_string())?;
    let train = config.train_config().map_err(|e| e.to_string())?;
    let dataset = generate(&config.synth_spec().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let (report, full) = ablate_with_full_run::<f32>(&spec, &dataset, &train).map_err(|e| e.to_string())?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(SeedRun {
        report,
        full,
        dataset,
        seconds,
    })
}

fn mean_of(runs: &[SeedRun], table: &str, setting: &str) -> f64 {
    runs.iter()
        .map(|r| r.report.accuracy(table, setting).unwrap_or(f64::NAN))
        .sum::<f64>()
        / runs.len() as f64
}

fn pts(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn complementarity(runs: &[SeedRun]) -> Verdict {
    let g = mean_of(runs, STREAMS_TABLE, "G-Stream Only");
    let p = mean_of(runs, STREAMS_TABLE, "P-Stream Only");
    let gp = mean_of(runs, STREAMS_TABLE, "G + P");
    let side = mean_of(runs, STREAMS_TABLE, "G + P + Side");
    // a 15 minute budget per training run: the ablation trains 5 models per seed
    let slowest = runs.iter().map(|r| r.seconds / 5.0).fold(0.0, f64::max);
    verdict(
        gp >= g.max(p) + 0.02 && side >= gp - 0.005 && slowest < 900.0,
        format!(
            "G {} P {} G+P {} G+P+Side {} (need G+P >= {} and G+P+Side >= {}), mean run {:.0}s",
            pts(g),
            pts(p),
            pts(gp),
            pts(side),
            pts(g.max(p) + 0.02),
            pts(gp - 0.005),
            slowest
        ),
    )
}

fn pooling_order(runs: &[SeedRun]) -> Verdict {
    let gmp = mean_of(runs, POOLING_TABLE, "GMP");
    let gap = mean_of(runs, POOLING_TABLE, "GAP");
    verdict(gmp >= gap + 0.02, format!("GMP {} GAP {} (need a 2 point lead)", pts(gmp), pts(gap)))
}

fn init_supervision_order(runs: &[SeedRun]) -> Verdict {
    let neither = mean_of(runs, INIT_TABLE, "- / -");
    let init = mean_of(runs, INIT_TABLE, "init / -");
    let both = mean_of(runs, INIT_TABLE, "init / supervision");
    let sup_only = mean_of(runs, INIT_TABLE, "- / supervision");
    verdict(
        init >= neither + 0.01 && both >= init + 0.01 && sup_only.is_finite(),
        format!(
            "neither {} init {} init+supervision {} (need 1 point gaps); supervision without init {}",
            pts(neither),
            pts(init),
            pts(both),
            pts(sup_only)
        ),
    )
}

fn localization(run: &SeedRun) -> Verdict {
    let classes = run.dataset.classes;
    let mut counts = Vec::new();
    for class in 0..classes {
        match localize(&run.full.model, &run.dataset.train, &run.dataset.test, class, 0, 10) {
            Ok(l) => counts.push(l.count_above(0.3)),
            Err(e) => return verdict(false, e.to_string()),
        }
    }
    let good = counts.iter().filter(|&&c| c >= 7).count();
    let list: Vec<String> = counts.iter().map(|c| format!("{c}/10")).collect();
    verdict(
        good == classes,
        format!("seed 7 top-10 IoU>0.3 hits per class: {} ({good}/{classes} classes at >= 70%)", list.join(" ")),
    )
}

fn energy(run: &SeedRun) -> Verdict {
    let shift = match energy_shift(&run.full.initial, &run.full.model, &run.dataset.test, "block3") {
        Ok(s) => s,
        Err(e) => return verdict(false, e.to_string()),
    };
    let per = shift.per_class(run.dataset.classes);
    let up = per.iter().filter(|v| matches!(v, Some((b, a)) if a > b)).count();
    let list: Vec<String> = per
        .iter()
        .map(|v| v.map_or("-".into(), |(b, a)| format!("{b:.3}->{a:.3}")))
        .collect();
    verdict(
        up >= 6,
        format!("seed 7 inside-box energy rose for {up}/{} classes: {}", per.len(), list.join(" ")),
    )
}

const SMALL: &[&str] = &[
    "--classes",
    "4",
    "--image-size",
    "32",
    "--patch-size",
    "8",
    "--per-class-train",
    "4",
    "--per-class-test",
    "2",
    "--k",
    "2",
    "--epochs",
    "2",
    "--batch-size",
    "4",
];

fn stage(out: &Path, workers: &str, args: &[&str]) -> Result<PathBuf, String> {
    let mut all: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    all.extend(SMALL.iter().map(|s| s.to_string()));
    all.extend(["--workers".into(), workers.into(), "--out".into(), out.display().to_string()]);
    dfl_cli::run(all)
        .map_err(|e| format!("{args:?}: {e}"))?
        .run_dir
        .ok_or_else(|| format!("{args:?} wrote no run directory"))
}

/// Runs every pipeline stage into a fresh directory and returns each
/// stage's run directory name and artifact checksums.
fn pipeline(workers: &str) -> Result<Vec<(String, Vec<(String, String)>)>, String> {
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut dirs = Vec::new();
    dirs.push(stage(out.path(), workers, &["gen-data"])?);
    dirs.push(stage(out.path(), workers, &["init-filters"])?);
    let train = stage(out.path(), workers, &["train"])?;
    let ckpt = train.join("model").display().to_string();
    dirs.push(train);
    dirs.push(stage(out.path(), workers, &["eval", "--checkpoint", &ckpt])?);
    dirs.push(stage(out.path(), workers, &["viz", "--checkpoint", &ckpt])?);
    dirs.push(stage(out.path(), workers, &["ablate"])?);
    dirs.iter()
        .map(|d| {
            let name = d.file_name().unwrap().to_string_lossy().into_owned();
            read_checksums(d).map(|c| (name, c)).map_err(|e| e.to_string())
        })
        .collect()
}

fn determinism() -> Verdict {
    let runs: Result<Vec<_>, String> = ["1", "1", "2", "3"].iter().map(|w| pipeline(w)).collect();
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return verdict(false, e),
    };
    let artifacts: usize = runs[0].iter().map(|(_, c)| c.len()).sum();
    let same = runs.iter().all(|r| r == &runs[0]);
    verdict(
        same,
        format!(
            "gen-data, init-filters, train, eval, viz and ablate: {artifacts} artifacts {} across reruns and 1/2/3 workers",
            if same { "identical" } else { "differ" }
        ),
    )
}

fn selected() -> Vec<usize> {
    match std::env::var("DFL_ACCEPTANCE") {
        Ok(list) => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        Err(_) => (1..=9).collect(),
    }
}

fn main() {
    let want = selected();
    let on = |n: usize| want.contains(&n);
    let strict = std::env::var("DFL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = Vec::new();
    let mut record = |n: usize, ok: bool| {
        if !ok {
            failed.push(n);
        }
    };
    if on(1) {
        let t = Instant::now();
        record(1, report(1, "gradient integrity", &gradient_integrity(), t.elapsed()));
    }
    if on(2) {
        let t = Instant::now();
        record(2, report(2, "receptive field", &receptive_field_claim(), t.elapsed()));
    }
    if on(3) {
        let t = Instant::now();
        record(3, report(3, "oracle equivalence", &oracle_equivalence(), t.elapsed()));
    }

    if (4..=8).any(on) {
        let t = Instant::now();
        let mut runs = Vec::new();
        for seed in SEEDS {
            match desk_run(seed) {
                Ok(r) => {
                    eprintln!("desk ablation for seed {seed} took {:.0}s", r.seconds);
                    runs.push(r);
                }
                Err(e) => eprintln!("desk ablation for seed {seed} failed: {e}"),
            }
        }
        let elapsed = t.elapsed();
        let checks: [(usize, &str, &dyn Fn(&[SeedRun]) -> Verdict); 5] = [
            (4, "stream complementarity", &complementarity),
            (5, "GMP over GAP", &pooling_order),
            (6, "init and supervision", &init_supervision_order),
            (7, "patch localization", &|r: &[SeedRun]| localization(&r[0])),
            (8, "energy shift", &|r: &[SeedRun]| energy(&r[0])),
        ];
        for (n, name, check) in checks {
            if !on(n) {
                continue;
            }
            let v = if runs.len() == SEEDS.len() {
                check(&runs)
            } else {
                verdict(false, "desk training failed")
            };
            record(n, report(n, name, &v, elapsed));
        }
    }

    if on(9) {
        let t = Instant::now();
        record(9, report(9, "determinism", &determinism(), t.elapsed()));
    }

    if failed.is_empty() {
        return;
    }
    let unexpected: Vec<usize> = failed.iter().copied().filter(|n| !KNOWN_OPEN.contains(n)).collect();
    println!("failed criteria {failed:?}, known open {KNOWN_OPEN:?}");
    if strict || !unexpected.is_empty() {
        std::process::exit(1);
    }
}
