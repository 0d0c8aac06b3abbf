use std::fmt::Write;

use xstab_core::data::synth_two_gaussians;
use xstab_core::{ActivationSpec, ExplainerSpec, Method};
use xstab_harness::config::{
    DatasetSource, ExperimentConfig, Mode, ModelSpec, SensitivityConfig, ShiftSpec, Sweep, SweepParam,
};
use xstab_harness::experiment::{max_metric_difference, replay, resolve_paths, run_experiment, summarize};
use xstab_harness::sensitivity::run_sensitivity;

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk_retrain();
    c.dataset = DatasetSource::Synthetic {
        n: 200,
        d: 5,
        separation: 2.0,
        label_balance: 0.5,
        seed: 4,
    };
    c.model = ModelSpec {
        hidden: vec![6],
        activations: vec![ActivationSpec::softplus(5.0)],
    };
    c.train.epochs = 5;
    c.shift = ShiftSpec::Gaussian { sigmas: vec![0.1] };
    c.n_trials = 3;
    c.explainers = vec![ExplainerSpec::default_for(Method::Saliency)];
    c.k_values = vec![2];
    c
}

#[test]
fn summary_averages_shift_seeds_before_trials() {
    let mut c = tiny();
    c.n_shift_seeds_per_trial = 2;
    let recs = run_experiment(&c).unwrap().records;
    assert_eq!(recs.len(), 6);
    let summary = summarize(&recs).unwrap();
    let row = &summary.rows[0];
    assert_eq!(row.n_trials, 3);
    let trial_means: Vec<f64> = (0..3)
        .map(|t| {
            let v: Vec<f64> = recs.iter().filter(|r| r.trial == t).map(|r| r.metrics["grad_l2"]).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    let want = trial_means.iter().sum::<f64>() / 3.0;
    assert!((row.metrics["grad_l2"].mean - want).abs() < 1e-15);
    let mut sorted = trial_means.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(row.metrics["grad_l2"].q25, 0.5 * (sorted[0] + sorted[1]));
}

#[test]
fn shift_seeds_are_shared_across_noise_levels() {
    let mut c = tiny();
    c.shift = ShiftSpec::Gaussian {
        sigmas: vec![0.05, 0.1],
    };
    let recs = run_experiment(&c).unwrap().records;
    for t in 0..3 {
        let seeds: Vec<_> = recs.iter().filter(|r| r.trial == t).map(|r| r.seeds).collect();
        assert_eq!(seeds.len(), 2);
        assert_eq!(seeds[0], seeds[1]);
    }
}

#[test]
fn replay_flags_tampered_records() {
    let recs = run_experiment(&tiny()).unwrap().records;
    let mut r = recs[1].clone();
    assert_eq!(max_metric_difference(&r, &replay(&r).unwrap()), 0.0);
    *r.metrics.get_mut("param_l2").unwrap() += 1e-9;
    assert!(max_metric_difference(&r, &replay(&r).unwrap()) > 1e-12);
}

#[test]
fn fine_tune_learning_rate_multiplier_matters() {
    let mut c = tiny();
    c.mode = Mode::FineTune;
    c.fine_tune = Some(c.train.clone());
    let plain = run_experiment(&c).unwrap().records;
    c.fine_tune_lr_multipliers = Some(vec![0.5]);
    let scaled = run_experiment(&c).unwrap().records;
    for (a, b) in plain.iter().zip(&scaled) {
        assert_eq!(a.metrics["base_test_acc"], b.metrics["base_test_acc"]);
        assert!(b.metrics["param_l2"] < a.metrics["param_l2"]);
    }
}

#[test]
fn temporal_shift_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_two_gaussians(150, 3, 2.0, 0.5, 8).unwrap();
    let mut csv = String::from("a,b,c,year,label\n");
    for (i, row) in ds.rows().enumerate() {
        writeln!(csv, "{},{},{},{},{}", row[0], row[1], row[2], 2000 + i % 10, ds.labels()[i]).unwrap();
    }
    std::fs::write(dir.path().join("t.csv"), csv).unwrap();
    let mut c = tiny();
    c.dataset = DatasetSource::Csv {
        path: "t.csv".into(),
        label_column: "label".into(),
        meta_column: Some("year".into()),
    };
    c.shift = ShiftSpec::Temporal { threshold: 2005.0 };
    c.validate().unwrap();
    resolve_paths(&mut c, Some(dir.path()));
    let recs = run_experiment(&c).unwrap().records;
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.cell.shift_kind == "threshold" && r.metrics["param_l2"] > 0.0));

    c.bounds = Some(Default::default());
    assert!(c.validate().is_err());
}

#[test]
fn sensitivity_without_noise_returns_to_the_base_model() {
    let mut c = SensitivityConfig::desk(Sweep {
        param: SweepParam::Lr,
        values: vec![0.1, 0.3],
    });
    c.dataset = DatasetSource::Synthetic {
        n: 200,
        d: 5,
        separation: 2.0,
        label_balance: 0.5,
        seed: 2,
    };
    c.hidden = vec![6];
    c.train.epochs = 4;
    c.sigma = 0.0;
    c.n_trials = 2;
    let res = run_sensitivity(&c).unwrap();
    assert_eq!(res.curves.len(), 2);
    assert_eq!(res.runs.len(), 4);
    for curve in &res.curves {
        assert_eq!(curve.points.len(), 4);
        assert_eq!(curve.last().epoch, 4);
        assert_eq!(curve.last().grad_l2.mean, 0.0);
        assert_eq!(curve.last().sa.mean, 1.0);
    }
    let csv = res.to_csv();
    assert!(csv.starts_with("lr,epoch,"));
    assert_eq!(csv.lines().count(), 1 + 2 * 4);

    let dir = tempfile::tempdir().unwrap();
    res.write(dir.path()).unwrap();
    for name in ["sensitivity.csv", "sensitivity.json", "plots/sensitivity_grad_l2.svg", "plots/sensitivity_sa.svg"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}
