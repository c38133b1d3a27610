//! Training loop, metrics stream and run outputs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Checkpoint, SavedThresholds};
use crate::config::{Method, RunConfig};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::mask::MaskSet;
use crate::model::{accuracy, GranularityProfile, ToyModel};
use crate::schedule::{cubic_sparsity, magnitude_keep_mask, soft_threshold_mask, ScheduleParams};
use crate::tensor::Tensor;
use crate::threshold::{bind_thresholds, leap_objective, LambdaMode, ThresholdBank};

const EVAL_SEED_SALT: u64 = 0x5eed_0e7a_1000_0001;
const SHUFFLE_SEED_SALT: u64 = 0x5eed_5487_f1e0_0002;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";

/// One line of `metrics.jsonl`. Loss fields come from the step's forward
/// pass; `r_sigma`, the densities and `eval_accuracy` describe the model after
/// the step's update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// 1-based optimizer step.
    pub step: u64,
    /// 0-based epoch the step belongs to.
    pub epoch: usize,
    pub objective: f64,
    pub pure_loss: f64,
    pub reg_loss: f64,
    pub lambda_reg: f64,
    /// `R(σ)` for threshold methods, the kept weight fraction otherwise.
    pub r_sigma: f64,
    pub mask_density: f64,
    /// `k(σ_i)` per matrix for threshold methods, mask densities otherwise.
    pub densities: Vec<f64>,
    pub train_accuracy: f64,
    /// Held-out accuracy, only on the last step of an epoch.
    pub eval_accuracy: Option<f64>,
}

/// Written as the last line of the stream when a step produces a non-finite value.
#[derive(Clone, Debug, Serialize)]
struct FailureRecord<'a> {
    step: u64,
    epoch: usize,
    error: &'a str,
    message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub profile: GranularityProfile,
    pub seed: u64,
    pub target_density: f64,
    pub steps: u64,
    pub final_accuracy: f64,
    pub final_ratio: f64,
    pub final_mask_density: f64,
    pub matrices: Vec<String>,
    pub densities: Vec<f64>,
    pub mask_densities: Vec<f64>,
    pub teacher_accuracy: Option<f64>,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub summary: RunSummary,
    pub records: Vec<MetricsRecord>,
    pub checkpoint: Checkpoint,
}

#[derive(Clone, Debug)]
pub struct TeacherOutcome {
    pub model: ToyModel,
    pub accuracy: f64,
    pub records: Vec<MetricsRecord>,
}

/// `α · KL(teacher ‖ student) + (1 − α) · CE(student, labels)`.
pub fn distillation_loss(
    g: &mut Graph,
    student_logits: Var,
    teacher_logits: &Tensor,
    labels: &[usize],
    alpha: f64,
    temperature: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", format!("must lie in [0, 1], got {alpha}")));
    }
    let ce = g.softmax_cross_entropy(student_logits, labels)?;
    let teacher = g.constant(teacher_logits.clone());
    let kl = g.kl_divergence(student_logits, teacher, temperature)?;
    let kl = g.scale(kl, alpha);
    let ce = g.scale(ce, 1.0 - alpha);
    g.add(kl, ce)
}

/// Count-weighted fraction of weights kept by the current masks.
pub fn kept_ratio(model: &ToyModel) -> f64 {
    let (mut kept, mut total) = (0.0, 0.0);
    for p in model.prunables() {
        let n = p.geometry().element_count() as f64;
        kept += p.mask().density() * n;
        total += n;
    }
    kept / total
}

enum Rule {
    Dense,
    Threshold(LambdaMode),
    Magnitude(ScheduleParams),
    Soft(ScheduleParams, f64),
}

struct StepStats {
    objective: f64,
    pure_loss: f64,
    reg_loss: f64,
    lambda_reg: f64,
    train_accuracy: f64,
}

struct Engine<'a> {
    config: &'a RunConfig,
    rule: Rule,
    model: ToyModel,
    bank: Option<ThresholdBank>,
    masks: MaskSet,
    /// Dense parameters first, then prunable weights.
    velocity: Vec<Tensor>,
    weight_lr: f64,
}

fn subtract_scaled(param: &mut Tensor, grad: &Tensor, lr: f64) {
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
}

impl<'a> Engine<'a> {
    fn new(config: &'a RunConfig, rule: Rule, model: ToyModel, bank: Option<ThresholdBank>, weight_lr: f64) -> Self {
        let mut velocity: Vec<Tensor> = model
            .dense_params()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        velocity.extend(
            model
                .prunables()
                .iter()
                .map(|p| Tensor::zeros(p.weight().rows(), p.weight().cols())),
        );
        Self {
            config,
            rule,
            model,
            bank,
            masks: MaskSet::new(),
            velocity,
            weight_lr,
        }
    }

    /// Masks for the forward pass of 0-based step `t`.
    fn refresh(&mut self, t: u64) -> Result<()> {
        match &self.rule {
            Rule::Dense => self.model.reset_masks(),
            Rule::Threshold(_) => {
                let keep = self.bank.as_ref().expect("threshold rule has a bank").densities();
                let mut ps = self.model.prunables_mut();
                self.masks.refresh_topk(&mut ps, &keep)
            }
            Rule::Magnitude(params) => {
                let s = cubic_sparsity(t as f64, params)?;
                for p in self.model.prunables_mut() {
                    let mask = magnitude_keep_mask(p.weight(), p.geometry(), s)?;
                    p.set_mask(mask)?;
                }
                Ok(())
            }
            Rule::Soft(params, _) => {
                let s = cubic_sparsity(t as f64, params)?;
                for p in self.model.prunables_mut() {
                    let mask = soft_threshold_mask(p.score(), s);
                    p.set_mask(mask)?;
                }
                Ok(())
            }
        }
    }

    fn densities(&self) -> Vec<f64> {
        match &self.bank {
            Some(b) => b.densities(),
            None => self.model.prunables().iter().map(|p| p.mask().density()).collect(),
        }
    }

    fn ratio(&self) -> f64 {
        match &self.bank {
            Some(b) => crate::threshold::remaining_ratio(b),
            None => kept_ratio(&self.model),
        }
    }

    fn step(&mut self, t: u64, batch: &Batch, teacher_logits: Option<&Tensor>) -> Result<StepStats> {
        let cfg = self.config;
        self.refresh(t)?;
        let mut g = Graph::new();
        let mut bound = self.model.bind(&mut g, true);
        let thresholds = match &self.bank {
            Some(bank) => Some(bind_thresholds(&mut g, bank)?),
            None => None,
        };
        let learns_scores = matches!(self.rule, Rule::Threshold(_) | Rule::Soft(..));
        let mut score_vars = Vec::new();
        if learns_scores {
            for (i, p) in self.model.prunables().into_iter().enumerate() {
                let s = g.leaf(p.score().clone());
                bound.masked[i].gate = Some(s);
                if let Some(tv) = &thresholds {
                    bound.masked[i].keep = Some(tv.keep[i]);
                }
                score_vars.push(s);
            }
        }

        let logits = self.model.forward(&mut g, &bound, batch)?;
        let train_accuracy = accuracy(g.value(logits), &batch.labels);
        let pure = match teacher_logits {
            Some(tl) if cfg.alpha > 0.0 => {
                distillation_loss(&mut g, logits, tl, &batch.labels, cfg.alpha, cfg.distill_temperature)?
            }
            _ => g.softmax_cross_entropy(logits, &batch.labels)?,
        };
        let (objective, reg_loss, lambda_reg) = match &self.rule {
            Rule::Threshold(mode) => {
                let bank = self.bank.as_ref().expect("threshold rule has a bank");
                let o = leap_objective(&mut g, pure, bank, thresholds.as_ref().expect("bound"), *mode)?;
                (o.objective, o.state.reg_loss_value, o.state.lambda_reg)
            }
            Rule::Soft(_, lambda) => {
                let mut total = None;
                let mut count = 0usize;
                for &s in &score_vars {
                    count += g.value(s).len();
                    let sig = g.sigmoid(s);
                    let sum = g.sum(sig);
                    total = Some(match total {
                        Some(acc) => g.add(acc, sum)?,
                        None => sum,
                    });
                }
                let penalty = g.scale(total.expect("at least one matrix"), 1.0 / count as f64);
                let value = g.scalar_value(penalty);
                let weighted = g.scale(penalty, *lambda);
                (g.add(pure, weighted)?, value, *lambda)
            }
            Rule::Dense | Rule::Magnitude(_) => (pure, 0.0, 0.0),
        };
        let stats = StepStats {
            objective: g.scalar_value(objective),
            pure_loss: g.scalar_value(pure),
            reg_loss,
            lambda_reg,
            train_accuracy,
        };
        g.backward(objective)?;

        let warmup_steps = cfg.warmup_epochs * cfg.steps_per_epoch() as f64;
        let lr = if warmup_steps > 0.0 {
            self.weight_lr * ((t + 1) as f64 / warmup_steps).min(1.0)
        } else {
            self.weight_lr
        };
        let momentum = cfg.momentum;
        let weight_vars: Vec<Var> = bound
            .dense
            .iter()
            .copied()
            .chain(bound.masked.iter().map(|m| m.weight))
            .collect();
        let mut grads: Vec<Option<Tensor>> = weight_vars.iter().map(|&v| g.take_grad(v)).collect();
        if let Some(max_norm) = cfg.grad_clip {
            let norm = grads
                .iter()
                .flatten()
                .flat_map(|t| t.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                let factor = max_norm / norm;
                for t in grads.iter_mut().flatten() {
                    t.data_mut().iter_mut().for_each(|v| *v *= factor);
                }
            }
        }
        let n_dense = bound.dense.len();
        let apply = |vel: &mut Tensor, param: &mut Tensor, grad: &Tensor| {
            for (v, gr) in vel.data_mut().iter_mut().zip(grad.data()) {
                *v = momentum * *v + gr;
            }
            subtract_scaled(param, vel, lr);
        };
        for (i, param) in self.model.dense_params_mut().into_iter().enumerate() {
            if let Some(grad) = &grads[i] {
                apply(&mut self.velocity[i], param, grad);
            }
        }
        let mut prunables = self.model.prunables_mut();
        for (i, p) in prunables.iter_mut().enumerate() {
            if let Some(grad) = &grads[n_dense + i] {
                apply(&mut self.velocity[n_dense + i], p.weight_mut(), grad);
            }
        }
        if learns_scores {
            for (p, &s) in prunables.iter_mut().zip(&score_vars) {
                if let Some(grad) = g.grad(s) {
                    subtract_scaled(p.score_mut(), grad, cfg.learning_rates.scores);
                }
            }
        }
        if let (Some(bank), Some(tv)) = (self.bank.as_mut(), thresholds.as_ref()) {
            let lr_sigma = cfg.learning_rates.sigma;
            for (s, &v) in bank.sigma_mut().iter_mut().zip(&tv.sigma) {
                if let Some(grad) = g.grad(v) {
                    *s -= lr_sigma * grad.item();
                }
            }
            bank.check_finite()?;
        }
        Ok(stats)
    }
}

struct MetricsSink {
    writer: Option<BufWriter<fs::File>>,
}

impl MetricsSink {
    fn open(out_dir: Option<&Path>) -> Result<Self> {
        let writer = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?))
            }
            None => None,
        };
        Ok(Self { writer })
    }

    fn line<T: Serialize>(&mut self, value: &T) -> Result<()> {
        if let Some(w) = &mut self.writer {
            serde_json::to_writer(&mut *w, value)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }
}

fn datasets(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    let m = &config.model;
    let train = Dataset::generate(&config.task, config.task.train_size, m.seq_len, m.vocab, config.seed)?;
    let eval = Dataset::generate(
        &config.task,
        config.task.eval_size,
        m.seq_len,
        m.vocab,
        config.seed ^ EVAL_SEED_SALT,
    )?;
    Ok((train, eval))
}

/// Runs the epoch loop shared by teacher and student training.
fn drive(
    engine: &mut Engine<'_>,
    epochs: usize,
    train: &Dataset,
    eval: &Dataset,
    teacher_logits: Option<&Tensor>,
    sink: &mut MetricsSink,
    stop_at_perfect: bool,
) -> Result<(Vec<MetricsRecord>, f64)> {
    let cfg = engine.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SEED_SALT);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    let mut eval_accuracy = 0.0;
    let mut t = 0u64;
    let classes = cfg.model.classes;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (i, idx) in chunks.iter().enumerate() {
            let batch = train.batch(idx);
            let rows = teacher_logits.map(|tl| {
                let mut data = Vec::with_capacity(idx.len() * classes);
                for &j in *idx {
                    data.extend_from_slice(tl.row(j));
                }
                Tensor::from_vec(idx.len(), classes, data).expect("row count matches")
            });
            let stats = match engine.step(t, &batch, rows.as_ref()) {
                Ok(s) => s,
                Err(e @ Error::NonFinite(_)) => {
                    sink.line(&FailureRecord {
                        step: t + 1,
                        epoch,
                        error: e.kind(),
                        message: e.to_string(),
                    })?;
                    sink.finish()?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            t += 1;
            let last_in_epoch = i + 1 == chunks.len();
            if !t.is_multiple_of(cfg.log_every) && !last_in_epoch {
                continue;
            }
            let eval_now = if last_in_epoch {
                engine.refresh(t)?;
                eval_accuracy = engine.model.accuracy(eval, cfg.batch_size.max(64))?;
                Some(eval_accuracy)
            } else {
                None
            };
            let record = MetricsRecord {
                step: t,
                epoch,
                objective: stats.objective,
                pure_loss: stats.pure_loss,
                reg_loss: stats.reg_loss,
                lambda_reg: stats.lambda_reg,
                r_sigma: engine.ratio(),
                mask_density: kept_ratio(&engine.model),
                densities: engine.densities(),
                train_accuracy: stats.train_accuracy,
                eval_accuracy: eval_now,
            };
            sink.line(&record)?;
            records.push(record);
        }
        if stop_at_perfect && eval_accuracy >= 1.0 {
            break;
        }
    }
    engine.refresh(t)?;
    Ok((records, eval_accuracy))
}

/// Train a dense model on labels only. Fails with [`Error::NotConverged`]
/// when held-out accuracy stays below `teacher.min_accuracy`.
pub fn train_teacher(config: &RunConfig, out_dir: Option<&Path>) -> Result<TeacherOutcome> {
    config.validate()?;
    let (train, eval) = datasets(config)?;
    let model = ToyModel::new(config.model, GranularityProfile::S1, config.seed)?;
    let mut engine = Engine::new(config, Rule::Dense, model, None, config.teacher.learning_rate);
    let mut sink = MetricsSink::open(out_dir)?;
    let (records, accuracy) = drive(&mut engine, config.teacher.epochs, &train, &eval, None, &mut sink, true)?;
    sink.finish()?;
    if let Some(dir) = out_dir {
        Checkpoint {
            model: engine.model.clone(),
            thresholds: None,
        }
        .save(&dir.join(CHECKPOINT_FILE))?;
    }
    if accuracy < config.teacher.min_accuracy {
        return Err(Error::NotConverged {
            accuracy,
            required: config.teacher.min_accuracy,
        });
    }
    Ok(TeacherOutcome {
        model: engine.model,
        accuracy,
        records,
    })
}

/// Prune-while-training run. `teacher` is required when `alpha > 0`; when
/// `init_from_teacher` is set the student starts from its weights. With an
/// output directory the resolved config, the metrics stream, the summary and
/// the final checkpoint are written there.
pub fn run_training(config: &RunConfig, teacher: Option<&ToyModel>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let started = Instant::now();
    config.validate()?;
    if config.alpha > 0.0 && teacher.is_none() {
        return Err(Error::Usage("alpha > 0 needs a teacher model".into()));
    }
    let (train, eval) = datasets(config)?;
    let mut model = ToyModel::new(config.model, config.profile, config.seed)?;
    if let (Some(t), true) = (teacher, config.init_from_teacher) {
        model.copy_weights_from(t)?;
    }
    let teacher_logits = match teacher {
        Some(t) if config.alpha > 0.0 => {
            if t.config != config.model {
                return Err(Error::config("teacher_checkpoint", "teacher dimensions differ from the model"));
            }
            Some(t.predict_all(&train, 64)?)
        }
        _ => None,
    };
    let teacher_accuracy = teacher.map(|t| t.accuracy(&eval, 64)).transpose()?;

    let (rule, bank) = match config.method {
        Method::Leap | Method::LeapConstantLambda => {
            let mode = if config.method == Method::Leap {
                LambdaMode::Adaptive
            } else {
                LambdaMode::Constant(config.lambda_max)
            };
            let bank = ThresholdBank::new(
                model.element_counts(),
                config.temperature,
                config.target_density,
                config.lambda_max,
                config.lambda_min,
            )?;
            (Rule::Threshold(mode), Some(bank))
        }
        Method::HardCubic => (Rule::Magnitude(config.schedule_params()?), None),
        Method::SoftConstant => (Rule::Soft(config.schedule_params()?, config.lambda_max), None),
    };

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), config.to_json())?;
    }
    let mut engine = Engine::new(config, rule, model, bank, config.learning_rates.weights);
    let mut sink = MetricsSink::open(out_dir)?;
    let (records, final_accuracy) = drive(
        &mut engine,
        config.epochs,
        &train,
        &eval,
        teacher_logits.as_ref(),
        &mut sink,
        false,
    )?;
    sink.finish()?;

    let checkpoint = Checkpoint {
        model: engine.model.clone(),
        thresholds: engine.bank.as_ref().map(|b| SavedThresholds {
            temperature: b.temperature(),
            sigma: b.sigma().to_vec(),
        }),
    };
    let summary = RunSummary {
        method: config.method,
        profile: config.profile,
        seed: config.seed,
        target_density: config.target_density,
        steps: config.total_steps(),
        final_accuracy,
        final_ratio: engine.ratio(),
        final_mask_density: kept_ratio(&engine.model),
        matrices: engine.model.prunables().iter().map(|p| p.name().to_string()).collect(),
        densities: engine.densities(),
        mask_densities: engine.model.prunables().iter().map(|p| p.mask().density()).collect(),
        teacher_accuracy,
        elapsed_ms: started.elapsed().as_millis() as u64,
    };
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
        fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(TrainOutcome {
        summary,
        records,
        checkpoint,
    })
}

/// The teacher a run needs: none when neither distillation nor teacher
/// initialisation is requested, the configured checkpoint when given, and
/// otherwise a freshly trained one saved under `<out_dir>/teacher`.
pub fn provide_teacher(config: &RunConfig, out_dir: &Path) -> Result<Option<ToyModel>> {
    if config.alpha == 0.0 && !config.init_from_teacher {
        return Ok(None);
    }
    if let Some(path) = &config.teacher_checkpoint {
        return Ok(Some(Checkpoint::load(path)?.model));
    }
    Ok(Some(train_teacher(config, Some(&out_dir.join("teacher")))?.model))
}
