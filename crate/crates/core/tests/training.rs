use std::fs;

use leap::autodiff::Graph;
use leap::checkpoint::Checkpoint;
use leap::config::{Method, RunConfig};
use leap::data::{Dataset, TaskConfig};
use leap::model::{GranularityProfile, ModelConfig};
use leap::report::report_layer_densities;
use leap::sweep::{sweep, SweepAxis};
use leap::train::{
    distillation_loss, run_training, train_teacher, MetricsRecord, RunSummary, CHECKPOINT_FILE, CONFIG_FILE,
    METRICS_FILE, SUMMARY_FILE,
};
use leap::Tensor;

fn tiny(method: Method) -> RunConfig {
    let mut c = RunConfig {
        method,
        profile: GranularityProfile::S1,
        target_density: 0.3,
        alpha: 0.0,
        init_from_teacher: false,
        epochs: 2,
        batch_size: 8,
        log_every: 1,
        model: ModelConfig {
            vocab: 8,
            seq_len: 6,
            hidden: 8,
            heads: 2,
            ffn: 16,
            layers: 1,
            classes: 2,
        },
        task: TaskConfig {
            train_size: 32,
            eval_size: 16,
            max_occurrences: 2,
            ..TaskConfig::default()
        },
        ..RunConfig::default()
    };
    c.schedule.warmup_steps = 1;
    c.schedule.cooldown_steps = 2;
    c.teacher.min_accuracy = 0.0;
    c.teacher.epochs = 2;
    c
}

fn read_metrics(dir: &std::path::Path) -> Vec<MetricsRecord> {
    fs::read_to_string(dir.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn leap_run_writes_outputs_and_keeps_invariants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Leap);
    let out = run_training(&cfg, None, Some(dir.path())).unwrap();
    for f in [METRICS_FILE, SUMMARY_FILE, CHECKPOINT_FILE, CONFIG_FILE] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let records = read_metrics(dir.path());
    assert_eq!(records, out.records);
    assert_eq!(records.len() as u64, cfg.total_steps());
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.step, i as u64 + 1);
        assert!((r.objective - (r.pure_loss + r.lambda_reg * r.reg_loss)).abs() <= 1e-12);
        assert!(r.lambda_reg >= cfg.lambda_min && r.lambda_reg <= cfg.lambda_max);
        assert!(r.r_sigma > 0.0 && r.r_sigma <= 1.0);
        assert_eq!(r.densities.len(), 6);
    }
    assert_eq!(records.iter().filter(|r| r.eval_accuracy.is_some()).count(), cfg.epochs);

    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary.steps, cfg.total_steps());
    assert_eq!(summary.final_ratio, records.last().unwrap().r_sigma);

    let echoed = RunConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(echoed.to_json(), cfg.to_json());
}

#[test]
fn full_target_is_a_dense_run() {
    let mut cfg = tiny(Method::Leap);
    cfg.target_density = 1.0;
    let out = run_training(&cfg, None, None).unwrap();
    for r in &out.records {
        assert_eq!(r.reg_loss, 0.0);
        assert_eq!(r.lambda_reg, cfg.lambda_min);
        assert_eq!(r.objective, r.pure_loss);
    }
    assert!((out.summary.final_ratio - 0.993_307).abs() < 0.01);
}

#[test]
fn flat_cubic_schedule_keeps_density_constant() {
    let mut cfg = tiny(Method::HardCubic);
    cfg.schedule.initial_sparsity = 0.6;
    cfg.target_density = 0.4;
    let out = run_training(&cfg, None, None).unwrap();
    let first = out.records[0].r_sigma;
    assert!((first - 0.4).abs() < 0.05, "{first}");
    for r in &out.records {
        assert_eq!(r.r_sigma, first);
        assert_eq!(r.densities, out.records[0].densities);
    }
}

#[test]
fn identical_runs_are_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Leap);
    run_training(&cfg, None, Some(a.path())).unwrap();
    run_training(&cfg, None, Some(b.path())).unwrap();
    for f in [METRICS_FILE, CHECKPOINT_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn distillation_needs_a_teacher() {
    let mut cfg = tiny(Method::Leap);
    cfg.alpha = 0.5;
    assert_eq!(run_training(&cfg, None, None).unwrap_err().kind(), "usage");
}

#[test]
fn distilled_run_from_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Method::Leap);
    let teacher = train_teacher(&cfg, Some(&dir.path().join("teacher"))).unwrap();
    cfg.alpha = 0.9;
    cfg.init_from_teacher = true;
    let out = run_training(&cfg, Some(&teacher.model), None).unwrap();
    assert_eq!(out.summary.teacher_accuracy, Some(teacher.accuracy));
    for (s, t) in out.checkpoint.model.layers[0]
        .query
        .weight()
        .data()
        .iter()
        .zip(teacher.model.layers[0].query.weight().data())
    {
        assert!(s.is_finite() && t.is_finite());
    }
}

#[test]
fn teacher_checkpoint_reproduces_logits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Leap);
    let teacher = train_teacher(&cfg, Some(dir.path())).unwrap();
    let loaded = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let probe = Dataset::generate(&cfg.task, 8, cfg.model.seq_len, cfg.model.vocab, 99).unwrap();
    let want = teacher.model.predict_all(&probe, 4).unwrap();
    let got = loaded.model.predict_all(&probe, 4).unwrap();
    assert_eq!(want, got);
    assert!(loaded.thresholds.is_none());
}

#[test]
fn report_weighted_mean_equals_final_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Method::Leap);
    cfg.target_density = 0.2;
    let out = run_training(&cfg, None, Some(dir.path())).unwrap();
    let report = report_layer_densities(&Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap()).unwrap();
    assert!(report.from_thresholds);
    assert!((report.weighted_density - out.records.last().unwrap().r_sigma).abs() <= 1e-9);
    let csv = report.to_csv().unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("matrix,")).count(), 6);
}

#[test]
fn block_profiles_keep_blocks_whole() {
    let mut cfg = tiny(Method::Leap);
    cfg.model.hidden = 16;
    cfg.model.ffn = 32;
    for profile in [GranularityProfile::S8, GranularityProfile::S16] {
        cfg.profile = profile;
        let out = run_training(&cfg, None, None).unwrap();
        for p in out.checkpoint.model.prunables() {
            let d = p.geometry().block();
            let w = p.effective_weight();
            for br in 0..p.geometry().grid_rows() {
                for bc in 0..p.geometry().grid_cols() {
                    let vals: Vec<f64> = (0..d)
                        .flat_map(|i| (0..d).map(move |j| (br * d + i, bc * d + j)))
                        .map(|(r, c)| w.get(r, c))
                        .collect();
                    let zeros = vals.iter().filter(|v| **v == 0.0).count();
                    if !p.mask().get(br, bc) {
                        assert_eq!(zeros, vals.len());
                    }
                }
            }
        }
    }
}

#[test]
fn single_value_sweep_matches_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Leap);
    let rows = sweep(&cfg, SweepAxis::Temperature, &["32".to_string()], None, Some(dir.path())).unwrap();
    assert_eq!(rows.len(), 1);
    let mut got = rows[0].summary.clone().unwrap();
    let mut want = run_training(&cfg, None, None).unwrap().summary;
    got.elapsed_ms = 0;
    want.elapsed_ms = 0;
    assert_eq!(got, want);
}

#[test]
fn sweep_records_child_failures() {
    let cfg = tiny(Method::Leap);
    let values: Vec<String> = ["16", "-1", "48"].iter().map(|s| s.to_string()).collect();
    let rows = sweep(&cfg, SweepAxis::Temperature, &values, None, None).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].summary.is_some() && rows[2].summary.is_some());
    assert!(rows[1].error.is_some());
}

#[test]
fn distillation_loss_recombines_terms() {
    let logits = Tensor::from_rows(&[&[0.3, -1.2], &[2.0, 0.5]]).unwrap();
    let teacher = Tensor::from_rows(&[&[1.0, 0.0], &[-0.5, 0.7]]).unwrap();
    let labels = [1, 0];
    let (alpha, temp) = (0.7, 2.0);

    let log_softmax = |row: &[f64], t: f64| -> Vec<f64> {
        let z: Vec<f64> = row.iter().map(|v| v / t).collect();
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        z.iter().map(|v| v - lse).collect()
    };
    let mut kl = 0.0;
    let mut ce = 0.0;
    for r in 0..2 {
        let ls = log_softmax(logits.row(r), temp);
        let lt = log_softmax(teacher.row(r), temp);
        kl += lt.iter().zip(&ls).map(|(t, s)| t.exp() * (t - s)).sum::<f64>();
        ce -= log_softmax(logits.row(r), 1.0)[labels[r]];
    }
    let want = alpha * kl / 2.0 + (1.0 - alpha) * ce / 2.0;

    let mut g = Graph::new();
    let l = g.leaf(logits);
    let loss = distillation_loss(&mut g, l, &teacher, &labels, alpha, temp).unwrap();
    assert!((g.scalar_value(loss) - want).abs() < 1e-12);

    let mut g = Graph::new();
    let l = g.leaf(Tensor::zeros(2, 2));
    assert!(distillation_loss(&mut g, l, &teacher, &labels, 1.5, temp).is_err());
}
