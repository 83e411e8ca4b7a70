mod common;

use std::sync::OnceLock;

use common::{tiny_augment, tiny_model, tiny_train_config, tiny_widths, videos};
use pipenet_core::eval::{
    evaluate, frame_dump, metrics_report, order_probe, portfolio_sweep, predict_video, Aggregation, EvalConfig,
    FrameOrder, SweepConfig, SweepData,
};
use pipenet_core::lfv::{aggregate_mean, limited_frame_vote};
use pipenet_core::model::ModelHandle;
use pipenet_core::trainer::{train, TrainRun};
use pipenet_core::VideoSample;

struct Fixture {
    _dir: tempfile::TempDir,
    test: Vec<VideoSample>,
    model: ModelHandle,
}

/// A briefly trained model and a held-out set covering all three sub-protocols.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let train_set = videos(&dir.path().join("train"), 3, 3, 3, 10);
        let test = videos(&dir.path().join("test"), 3, 3, 5, 11);
        let aug = tiny_augment();
        let cfg = tiny_train_config(1, 3);
        let mut model = tiny_model("P5", 0);
        let ck = dir.path().join("ck");
        let run = TrainRun {
            train: &train_set,
            val: &train_set,
            augment: &aug,
            config: &cfg,
            checkpoint_dir: &ck,
            extra: serde_json::Value::Null,
        };
        train(&mut model, &run, None).unwrap();
        Fixture { _dir: dir, test, model }
    })
}

fn config(aggregation: Aggregation) -> EvalConfig {
    EvalConfig {
        aggregation,
        augment: tiny_augment(),
        ..EvalConfig::default()
    }
}

#[test]
fn aggregation_uses_the_emitted_frame_scores() {
    let f = fixture();
    let lfv_cfg = config(Aggregation::Lfv);
    for p in evaluate(&f.model, &f.test, &lfv_cfg).unwrap().predictions {
        let vote = limited_frame_vote(&p.frame_probs, &lfv_cfg.lfv).unwrap();
        assert_eq!(p.aggregated, vote.expectation);
        assert_eq!(p.vote.as_ref(), Some(&vote));
        assert!((0.0..=1.0).contains(&p.aggregated));
    }
    for p in evaluate(&f.model, &f.test, &config(Aggregation::Mean)).unwrap().predictions {
        assert_eq!(p.aggregated, aggregate_mean(&p.frame_probs).unwrap());
        assert!(p.vote.is_none());
    }
}

#[test]
fn single_and_repeated_frames_agree_across_modes() {
    let f = fixture();
    let one = f.test[0].reordered(&[2]);
    let repeated = f.test[0].reordered(&[1, 1, 1, 1]);
    for video in [one, repeated] {
        let values: Vec<f64> = [Aggregation::Lfv, Aggregation::Mean, Aggregation::Median]
            .iter()
            .map(|&m| predict_video(&f.model, &video, &config(m)).unwrap().aggregated)
            .collect();
        let frame = predict_video(&f.model, &video, &config(Aggregation::Mean)).unwrap().frame_probs[0];
        assert!(values.iter().all(|&v| v == frame), "{values:?} vs {frame}");
    }
}

#[test]
fn frame_order_never_changes_the_video_score() {
    let f = fixture();
    let base = config(Aggregation::Lfv);
    for video in &f.test {
        let probe = order_probe(&f.model, video, &base).unwrap();
        assert_eq!(probe.original, probe.reverse);
        assert_eq!(probe.original, probe.shuffle);
        let other_seed = EvalConfig {
            shuffle_seed: 1234,
            ..base.clone()
        };
        assert_eq!(order_probe(&f.model, video, &other_seed).unwrap().shuffle, probe.original);
        let n = video.frame_count();
        let twice = video.reordered(&FrameOrder::Reverse.permutation(n, 0)).reordered(&FrameOrder::Reverse.permutation(n, 0));
        assert_eq!(&twice, video);
    }
}

#[test]
fn evaluation_is_repeatable_and_reports_protocol_spread() {
    let f = fixture();
    let cfg = config(Aggregation::Lfv);
    let a = evaluate(&f.model, &f.test, &cfg).unwrap();
    let b = evaluate(&f.model, &f.test, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(metrics_report(&a), metrics_report(&b));
    assert_eq!(frame_dump(&a.predictions), frame_dump(&b.predictions));
    assert_eq!(a.per_protocol.len(), 3);
    let report = metrics_report(&a);
    let mean_row = report.lines().find(|l| l.starts_with("mean±std\t")).expect("aggregate row");
    for cell in mean_row.split('\t').skip(1) {
        let (m, s) = cell.split_once('±').unwrap();
        assert!(m.len() >= 4 && s.len() >= 4 && m.contains('.') && s.contains('.'), "{cell}");
    }
    assert_eq!(frame_dump(&a.predictions).lines().count(), f.test.len() * 5);
}

#[test]
fn portfolio_sweep_tables() {
    let dir = tempfile::tempdir().unwrap();
    let train_set = videos(&dir.path().join("train"), 2, 2, 2, 20);
    let test = videos(&dir.path().join("test"), 2, 2, 2, 21);
    let aug = tiny_augment();
    let train_cfg = tiny_train_config(1, 1);
    let eval_cfg = config(Aggregation::Lfv);
    let widths = tiny_widths();
    let data = SweepData {
        train: &train_set,
        val: &train_set,
        test: &test,
    };
    let run = |repeats, sub: &str| {
        let cfg = SweepConfig {
            widths: &widths,
            augment: &aug,
            train: &train_cfg,
            eval: &eval_cfg,
            repeats,
            work_dir: &dir.path().join(sub),
        };
        portfolio_sweep(&["P1", "P5"], &data, &cfg).unwrap()
    };
    let three = run(3, "a");
    assert_eq!(three.rows.len(), 2);
    assert!(three.rows.iter().all(|r| r.acers.len() == 3 && r.std.is_some()));
    assert_eq!(three.rows[1].pipelines.depth, "SRB");
    assert_eq!(three.to_tsv(), run(3, "b").to_tsv());

    let one = run(1, "c");
    assert!(one.to_tsv().lines().skip(1).all(|l| l.ends_with("±n/a")));
}
