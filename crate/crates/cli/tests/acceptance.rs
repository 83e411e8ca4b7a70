//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use num_rational::BigRational;
use pipenet_cli::config;
use pipenet_core::augment::modal_dropout;
use pipenet_core::dataset::load_manifest;
use pipenet_core::eval::{self, EvalConfig};
use pipenet_core::lfv::{limited_frame_vote, LfvConfig, Termination};
use pipenet_core::metrics::{acer_exact, apcer_exact, bpcer_exact, format_percent, MeanStd};
use pipenet_core::model::{
    build_pipenet, named_portfolio, named_portfolio_with, param_group, ArchWidths, Checkpoint, ModalBatch,
    ModelHandle, PORTFOLIO_NAMES,
};
use pipenet_core::nn::{softmax_cross_entropy, Tensor};
use pipenet_core::schedule::{advance_cycle, lr_at, DynamicMode, ScheduleConfig, ScheduleState};
use pipenet_core::{ConfusionCounts, ModalityId, PerModality};
use proptest::prelude::{prop, prop_oneof, Just};
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- metrics

fn metric_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let c = ConfusionCounts {
            tp: rng.random_range(0..5000),
            fn_: rng.random_range(0..5000),
            tn: rng.random_range(0..5000),
            fp: rng.random_range(0..5000),
        };
        if c.live() == 0 || c.attack() == 0 {
            continue;
        }
        let acer = acer_exact(&c).map_err(|e| e.to_string())?;
        let half_sum = (apcer_exact(&c).unwrap() + bpcer_exact(&c).unwrap()) / 2;
        ensure(acer == half_sum, || format!("{c:?}: {acer} != {half_sum}"))?;
        // Cross-multiplied against (fp/attack + fn/live) / 2.
        let (a, l) = (c.attack() as u128, c.live() as u128);
        let lhs = *acer.numer() as u128 * 2 * a * l;
        let rhs = *acer.denom() as u128 * (c.fp as u128 * l + c.fn_ as u128 * a);
        ensure(lhs == rhs, || format!("{c:?}: {acer} disagrees with the counts"))?;
    }
    // 13 of 900 attacks accepted, no live sample rejected.
    let row = ConfusionCounts {
        tp: 600,
        fn_: 0,
        tn: 887,
        fp: 13,
    };
    let shown = [
        format_percent(pipenet_core::metrics::apcer(&row).unwrap()),
        format_percent(pipenet_core::metrics::bpcer(&row).unwrap()),
        format_percent(pipenet_core::metrics::acer(&row).unwrap()),
    ];
    ensure(shown == ["1.44", "0.00", "0.72"], || format!("4@1 row printed as {shown:?}"))
}

fn aggregation_convention() -> Check {
    let values = [0.72, 2.80, 2.40];
    let got = MeanStd::of(&values).map_err(|e| e.to_string())?.format();
    let mean = values.iter().sum::<f64>() / 3.0;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let population = format!("{mean:.2}±{:.2}", (ss / 3.0).sqrt());
    ensure(population == "1.97±0.90", || format!("population oracle gave {population}"))?;
    ensure(got == "1.97±1.10", || format!("got {got}"))?;
    ensure(got != population, || "n-divisor variant produced".into())
}

// ---------------------------------------------------------------- lfv

struct Literal {
    e: f64,
    kept: Vec<bool>,
}

/// Step-by-step frame vote: filtered frames are set to zero and counted out,
/// inputs are strictly positive so zero means filtered. The band and stopping
/// tests run in exact rational arithmetic, so frames lying exactly on the band
/// edge are excluded as the open interval demands. Adds the fixpoint and
/// iteration-cap guards. `kept` is the set the returned expectation averages.
fn literal_vote(input: &[f64], lambda: f64, tau: f64) -> Literal {
    let q = |x: f64| BigRational::from_float(x).unwrap();
    let mut p = input.to_vec();
    let cap = p.len();
    let mut n = p.len();
    let mut rounds = 0;
    loop {
        rounds += 1;
        let mut sum = 0.0;
        for &v in &p {
            sum += v;
        }
        let e = sum / n as f64;

        let mut exact_sum = q(0.0);
        for &v in &p {
            exact_sum += q(v);
        }
        let exact_e = exact_sum / q(n as f64);
        let mut sq = q(0.0);
        for &v in &p {
            if v != 0.0 {
                let d = q(v) - &exact_e;
                sq += &d * &d;
            }
        }
        let var = sq / q(n as f64);
        let kept: Vec<bool> = p.iter().map(|&v| v != 0.0).collect();
        let band_sq = q(lambda) * q(lambda) * &var;
        let mut next = p.clone();
        for v in next.iter_mut() {
            let d = q(*v) - &exact_e;
            if d.clone() * d >= band_sq {
                *v = 0.0;
            }
        }
        let next_n = next.iter().filter(|&&v| v != 0.0).count();
        if var <= q(tau) * q(tau) || next_n == n || next_n == 0 || rounds >= cap {
            return Literal { e, kept };
        }
        p = next;
        n = next_n;
    }
}

fn lfv_oracle() -> Check {
    let cfg = LfvConfig::new(1.0, 0.05);
    let hand = limited_frame_vote(&[0.8, 0.82, 0.78, 0.81, 0.2], &cfg).map_err(|e| e.to_string())?;
    ensure((hand.expectation - 0.8025).abs() < 1e-12, || format!("E = {}", hand.expectation))?;
    ensure(hand.retained == [true, true, true, true, false], || format!("{:?}", hand.retained))?;
    let lit = literal_vote(&[0.8, 0.82, 0.78, 0.81, 0.2], 1.0, 0.05);
    ensure((lit.e - 0.8025).abs() < 1e-12 && lit.kept == hand.retained, || "literal hand case".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..500 {
        let len = rng.random_range(1..=50);
        let centre: f64 = rng.random_range(0.05..0.95);
        let probs: Vec<f64> = (0..len)
            .map(|_| {
                if rng.random_bool(0.2) {
                    rng.random_range(1e-6..=1.0)
                } else {
                    (centre + rng.random_range(-0.05..0.05)).clamp(1e-6, 1.0)
                }
            })
            .collect();
        let lambda = [1.0, 2.0, 3.0][rng.random_range(0..3)];
        let tau = [0.01, 0.05, 0.1][rng.random_range(0..3)];
        let lib = limited_frame_vote(&probs, &LfvConfig::new(lambda, tau)).map_err(|e| e.to_string())?;
        let lit = literal_vote(&probs, lambda, tau);
        ensure((lib.expectation - lit.e).abs() <= 1e-12, || {
            format!("case {case}: E {} vs {}", lib.expectation, lit.e)
        })?;
        ensure(lib.retained == lit.kept, || format!("case {case}: retained sets differ"))?;
    }
    Ok(())
}

fn lfv_termination() -> Check {
    let guard = limited_frame_vote(&[0.0, 1.0], &LfvConfig::new(3.0, 0.1)).map_err(|e| e.to_string())?;
    ensure(
        guard.termination == Termination::Fixpoint && guard.iterations == 1 && guard.expectation == 0.5,
        || format!("[0, 1] gave {guard:?}"),
    )?;

    let frame = prop_oneof![1 => Just(0.0), 1 => Just(1.0), 6 => 0.0..=1.0f64, 4 => 0.45..0.55f64];
    let probs = prop::collection::vec(frame, 1..=50);
    let strategy = (probs, 1.0..=5.0f64, 0.0..0.3f64);
    let mut runner = TestRunner::new(PropConfig {
        cases: 10_000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    runner
        .run(&strategy, |(probs, lambda, tau)| {
            let vote = limited_frame_vote(&probs, &LfvConfig::new(lambda, tau)).unwrap();
            if vote.iterations > probs.len() {
                return Err(TestCaseError::fail(format!("{} iterations for {} frames", vote.iterations, probs.len())));
            }
            // Every round but the last dropped at least one frame.
            for w in vote.sigmas.windows(2) {
                if !(w[1] < w[0]) {
                    return Err(TestCaseError::fail(format!("sigma went {} -> {}", w[0], w[1])));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- model

fn tiny_widths() -> ArchWidths {
    ArchWidths {
        stem_channels: 4,
        stage_channels: (8, 16),
        cardinality: 4,
        fusion_channels: 16,
        fusion_repeats: 1,
        srb_repeats: (1, 1),
    }
}

fn random_batch(n: usize, patch: usize, seed: u64) -> ModalBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PerModality::from_fn(|_| {
        Tensor::from_vec([n, 1, patch, patch], (0..n * patch * patch).map(|_| rng.random_range(-1.0..1.0)).collect())
    })
}

fn model_suite() -> Check {
    for name in PORTFOLIO_NAMES {
        let spec = named_portfolio(name).map_err(|e| e.to_string())?;
        let shapes: Vec<_> = ModalityId::ALL.iter().map(|&m| spec.pipelines[m].output_shape(64)).collect();
        ensure(shapes.windows(2).all(|w| w[0] == w[1]), || format!("{name}: pipeline shapes {shapes:?}"))?;
        let small = named_portfolio_with(name, &tiny_widths()).unwrap();
        let model = build_pipenet(&small, PerModality::new(1, 1, 1), 16, 1).map_err(|e| e.to_string())?;
        let logits = model.forward(&random_batch(3, 16, 2)).map_err(|e| e.to_string())?;
        ensure(logits.shape() == [3, 2, 1, 1], || format!("{name}: logits {:?}", logits.shape()))?;
    }

    let spec = named_portfolio_with("P5", &tiny_widths()).unwrap();
    let mut model = build_pipenet(&spec, PerModality::new(1, 1, 1), 16, 31).unwrap();
    let batch = random_batch(3, 16, 32);
    let targets = [0, 1, 1];
    model.zero_grad();
    let logits = model.forward_train(&batch).unwrap();
    model.backward(&softmax_cross_entropy(&logits, &targets).grad);

    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut picks: Vec<(String, usize, f64, f64)> = Vec::new();
    model.visit_params(&mut |name, p| {
        if p.trainable {
            for _ in 0..4 {
                let i = rng.random_range(0..p.value.len());
                picks.push((name.to_string(), i, p.value[i], p.grad[i]));
            }
        }
    });
    let mut per_group = std::collections::BTreeMap::<String, usize>::new();
    for (name, i, value, grad) in &picks {
        per_group.entry(param_group(name).to_string()).or_default();
        if grad.abs() < 1e-5 {
            continue;
        }
        let rel = [1e-6, 1e-7]
            .iter()
            .map(|&h| {
                let mut eval_at = |v: f64| {
                    set_param(&mut model, name, *i, v);
                    let l = softmax_cross_entropy(&model.forward_train(&batch).unwrap(), &targets).loss;
                    set_param(&mut model, name, *i, *value);
                    l
                };
                let numeric = (eval_at(value + h) - eval_at(value - h)) / (2.0 * h);
                (grad - numeric).abs() / grad.abs().max(numeric.abs())
            })
            .fold(f64::INFINITY, f64::min);
        ensure(rel < 1e-3, || format!("{name}[{i}]: relative error {rel:e}"))?;
        *per_group.get_mut(param_group(name)).unwrap() += 1;
    }
    ensure(per_group.len() == 5 && per_group.values().all(|&c| c >= 5), || format!("checked per group: {per_group:?}"))
}

fn set_param(model: &mut ModelHandle, name: &str, index: usize, value: f64) {
    model.visit_params_mut(&mut |n, p| {
        if n == name {
            p.value[index] = value;
        }
    });
}

// ---------------------------------------------------------------- augment, schedule

fn dropout_statistics() -> Check {
    let n = 3000;
    let ones = || PerModality::from_fn(|_| Tensor::from_vec([n, 1, 2, 2], vec![1.0; n * 4]));
    let mut batch = ones();
    let erased = modal_dropout(&mut batch, 1.0, 11);
    let mut counts = [0usize; 3];
    for i in 0..n {
        let zeroed: Vec<ModalityId> = ModalityId::ALL
            .into_iter()
            .filter(|&m| batch[m].sample(i).iter().all(|&v| v == 0.0))
            .collect();
        let intact = ModalityId::ALL.into_iter().filter(|&m| batch[m].sample(i).iter().all(|&v| v == 1.0)).count();
        ensure(zeroed.len() == 1 && intact == 2 && erased[i] == Some(zeroed[0]), || {
            format!("element {i}: erased {zeroed:?}")
        })?;
        counts[zeroed[0].index()] += 1;
    }
    for (m, c) in counts.iter().enumerate() {
        let f = *c as f64 / n as f64;
        ensure((f - 1.0 / 3.0).abs() <= 0.03, || format!("modality {m} erased with frequency {f:.4}"))?;
    }
    let mut same = ones();
    let none = modal_dropout(&mut same, 0.0, 11);
    ensure(none.iter().all(Option::is_none) && same == ones(), || "p = 0 altered the batch".into())
}

fn ulps(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

fn schedule_endpoints() -> Check {
    let cfg = ScheduleConfig::default();
    let s0 = ScheduleState::initial(&cfg);
    let closed = |t: f64| 0.001 + (0.1 - 0.001) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0;
    let (a, b) = (lr_at(&cfg, &s0, 0.0), lr_at(&cfg, &s0, 1.0));
    ensure(ulps(a, closed(0.0)) <= 1 && ulps(a, 0.1) <= 1, || format!("lr(0) = {a}"))?;
    ensure(ulps(b, closed(1.0)) <= 1 && ulps(b, 0.001) <= 1, || format!("lr(1) = {b}"))?;
    for mode in [DynamicMode::Geometric, DynamicMode::Fixed] {
        let cfg = ScheduleConfig {
            dynamic_mode: mode,
            cycles: 8,
            ..ScheduleConfig::default()
        };
        let mut state = ScheduleState::initial(&cfg);
        for _ in 1..cfg.cycles {
            let next = advance_cycle(&cfg, &state).map_err(|e| e.to_string())?;
            ensure(next.start_lr <= state.start_lr, || format!("{mode:?}: start lr rose to {}", next.start_lr))?;
            state = next;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- end to end

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn pipenet(args: &[&str], out: &Path) -> Check {
    let status = Command::new(env!("CARGO_BIN_EXE_pipenet"))
        .args(args)
        .arg("--config")
        .arg(desk_config())
        .arg("--out")
        .arg(out)
        .env_remove(config::SEED_ENV)
        .stderr(std::process::Stdio::null())
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    ensure(status.success(), || format!("pipenet {args:?} exited with {status}"))
}

fn full_run(out: &Path) -> Check {
    for cmd in ["synth", "train", "eval"] {
        pipenet(&[cmd], out)?;
    }
    Ok(())
}

const COMPARED: [&str; 5] = [
    "logs/train_metrics.tsv",
    "reports/training_summary.tsv",
    "reports/metrics.tsv",
    "reports/videos.tsv",
    "reports/frame_scores.tsv",
];

fn overall_acer(out: &Path) -> Result<f64, String> {
    let text = fs::read_to_string(out.join("reports/metrics.tsv")).map_err(|e| e.to_string())?;
    let row = text.lines().find(|l| l.starts_with("all\t")).ok_or("no overall row")?;
    row.rsplit('\t').next().unwrap().parse::<f64>().map_err(|e| e.to_string())
}

fn separability(a: &Path, b: &Path) -> Check {
    let (acer_a, acer_b) = (overall_acer(a)?, overall_acer(b)?);
    ensure(acer_a <= 5.0, || format!("video-level ACER {acer_a:.2}% above 5%"))?;
    ensure(acer_a == acer_b, || format!("repeat run gave ACER {acer_b:.2}% instead of {acer_a:.2}%"))
}

fn reproducibility(a: &Path, b: &Path) -> Check {
    for rel in COMPARED {
        let x = fs::read(a.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        let y = fs::read(b.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        ensure(!x.is_empty() && x == y, || format!("{rel} differs between runs"))?;
    }
    Ok(())
}

fn order_invariance(run: &Path) -> Check {
    let cfg = config::load(Some(&desk_config()), &[], None).map_err(|e| e.to_string())?;
    let ecfg = EvalConfig {
        lfv: cfg.lfv.clone(),
        augment: cfg.augment.clone(),
        shuffle_seed: 5,
        ..EvalConfig::default()
    };
    let videos = load_manifest(&run.join("data/test/manifest.txt"))
        .and_then(|i| i.load_all())
        .map_err(|e| e.to_string())?;
    let mut checked = 0;
    for ckpt in ["best.ckpt", "last.ckpt"] {
        let loaded = Checkpoint::load(&run.join("checkpoints").join(ckpt)).map_err(|e| e.to_string())?;
        let model = ModelHandle::from_checkpoint(&loaded).map_err(|e| e.to_string())?;
        for v in &videos {
            let p = eval::order_probe(&model, v, &ecfg).map_err(|e| e.to_string())?;
            ensure(p.original == p.reverse && p.original == p.shuffle, || {
                format!("{ckpt} {}: {p:?}", v.sample.sample_id)
            })?;
            checked += 1;
        }
    }
    ensure(checked > 0, || "no videos probed".into())
}

// ---------------------------------------------------------------- driver

struct Outcome {
    id: usize,
    name: &'static str,
    result: Check,
    elapsed: Duration,
    budget: Duration,
}

fn timed(id: usize, name: &'static str, budget_s: u64, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = f();
    Outcome {
        id,
        name,
        result,
        elapsed: start.elapsed(),
        budget: Duration::from_secs(budget_s),
    }
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let (run_a, run_b) = (work.path().join("a"), work.path().join("b"));

    // The end-to-end runs come first: order invariance probes their checkpoints.
    let t = Instant::now();
    let first = full_run(&run_a);
    let first_time = t.elapsed();
    let t = Instant::now();
    let second = first.clone().and_then(|_| full_run(&run_b));
    let second_time = t.elapsed();

    let mut outcomes = vec![
        timed(1, "metric identities", 1, metric_identities),
        timed(2, "mean±std convention", 1, aggregation_convention),
        timed(3, "frame vote oracle", 10, lfv_oracle),
        timed(4, "frame vote termination", 30, lfv_termination),
        timed(5, "model shapes and gradients", 120, model_suite),
        timed(6, "modal dropout statistics", 30, dropout_statistics),
        timed(7, "schedule endpoints", 1, schedule_endpoints),
        timed(8, "frame order invariance", 60, || first.clone().and_then(|_| order_invariance(&run_a))),
    ];
    let mut nine = timed(9, "desk-scale separability", 15 * 60, || {
        first.clone().and_then(|_| second.clone()).and_then(|_| separability(&run_a, &run_b))
    });
    nine.elapsed += first_time;
    outcomes.push(nine);
    let mut ten = timed(10, "end-to-end reproducibility", 30 * 60, || {
        second.clone().and_then(|_| reproducibility(&run_a, &run_b))
    });
    ten.elapsed += first_time + second_time;
    outcomes.push(ten);

    let mut failed = 0;
    for o in &outcomes {
        let result = o.result.clone().and_then(|_| {
            ensure(o.elapsed <= o.budget, || {
                format!("took {:.1}s, budget {}s", o.elapsed.as_secs_f64(), o.budget.as_secs())
            })
        });
        match result {
            Ok(()) => println!("criterion {:>2} PASS  {} ({:.2}s)", o.id, o.name, o.elapsed.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {} ({:.2}s): {msg}", o.id, o.name, o.elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
