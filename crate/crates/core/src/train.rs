//! Optimizer, schedules and the epoch driver for teacher and student runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batchify, ParallelCorpus, Vocab};
use crate::distill::{total_loss, AamParams, DistillConfig, LossMetrics, TeacherRef};
use crate::error::{Error, Result};
use crate::eval;
use crate::numerics::{ParamSet, Tape};
use crate::transformer::{Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached at the end of warmup.
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Arithmetic precision. Only `"f64"` is supported.
    pub precision: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 200,
            grad_clip_norm: 1.0,
            seed: 0,
            precision: "f64".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must be in [0, 1), got {b}")));
            }
        }
        if self.precision != "f64" {
            return Err(Error::Config(format!(
                "train.precision `{}` is not supported; only `f64` is available",
                self.precision
            )));
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm < 0.0 {
            return Err(Error::Config("train.grad_clip_norm must be >= 0".into()));
        }
        Ok(())
    }
}

/// `λ(epoch) = λ0 · decay^epoch`
pub fn lambda_schedule(lambda0: f64, decay: f64, epoch: usize) -> f64 {
    lambda0 * decay.powi(epoch as i32)
}

/// Inverse-square-root schedule with linear warmup, normalized so that the
/// rate equals `base` at `step == warmup`. `step` counts from 1; a zero
/// warmup gives a constant rate.
pub fn warmup_lr(base: f64, step: u64, warmup: usize) -> f64 {
    if warmup == 0 {
        return base;
    }
    let s = step.max(1) as f64;
    let w = warmup as f64;
    base * w.sqrt() * (s.powf(-0.5)).min(s * w.powf(-1.5))
}

/// Bias-corrected Adam over one parameter set.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(set: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || set.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_config(set: &ParamSet, cfg: &TrainConfig) -> Self {
        Self::new(set, cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` using each tensor's `grad`.
    /// Tensors without a gradient are left untouched. Any non-finite gradient
    /// aborts before anything is modified.
    pub fn step(&mut self, set: &mut ParamSet, lr: f64) -> Result<()> {
        for (name, t) in set.iter() {
            if let Some(g) = &t.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(name.to_string()));
                }
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, t)) in set.iter_mut().enumerate() {
            let Some(g) = t.grad.take() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            t.grad = Some(g);
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients across `sets`.
pub fn grad_norm(sets: &[&mut ParamSet]) -> f64 {
    sets.iter()
        .flat_map(|s| s.tensors().iter())
        .filter_map(|t| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(sets: &mut [&mut ParamSet], max_norm: f64) -> f64 {
    let norm = grad_norm(sets);
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for set in sets.iter_mut() {
            for (_, t) in set.iter_mut() {
                if let Some(g) = &mut t.grad {
                    g.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
    }
    norm
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_att_enc: f64,
    pub l_att_dec_self: f64,
    pub l_att_dec_cross: f64,
    pub l_kd: f64,
    pub lambda: f64,
    pub val_acc: f64,
    pub val_bleu: f64,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    /// Alignment modules from the same epoch (distillation only).
    pub aams: Option<AamParams>,
    pub log: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// Data shared by a run.
pub struct Corpora<'a> {
    pub train: &'a ParallelCorpus,
    pub valid: &'a ParallelCorpus,
    pub vocab: &'a Vocab,
}

pub type EpochSink<'s> = &'s mut dyn FnMut(&EpochMetrics) -> Result<()>;

/// Trains a model on cross-entropy alone.
pub fn train_teacher(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &Corpora<'_>,
    sink: Option<EpochSink<'_>>,
) -> Result<TrainOutcome> {
    let model = Model::new(model_cfg.clone(), train_cfg.seed)?;
    let no_kd = DistillConfig {
        lambda_att: 0.0,
        mu_kd: 0.0,
        ..Default::default()
    };
    run(model, None, &no_kd, train_cfg, data, sink)
}

/// Distills `teacher` into a freshly initialized student, jointly training
/// the student and the alignment modules.
pub fn distill_run(
    teacher: &Model,
    student_cfg: &ModelConfig,
    distill_cfg: &DistillConfig,
    train_cfg: &TrainConfig,
    data: &Corpora<'_>,
    sink: Option<EpochSink<'_>>,
) -> Result<TrainOutcome> {
    distill_cfg.validate()?;
    if student_cfg.vocab_size != teacher.config().vocab_size {
        return Err(Error::Config(format!(
            "student vocab_size {} differs from teacher vocab_size {}",
            student_cfg.vocab_size,
            teacher.config().vocab_size
        )));
    }
    if data.vocab.len() > teacher.config().vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary of {} tokens exceeds the teacher's {}",
            data.vocab.len(),
            teacher.config().vocab_size
        )));
    }
    let student = Model::new(student_cfg.clone(), train_cfg.seed)?;
    let aams = AamParams::new(student_cfg, teacher.config(), distill_cfg)?;
    run(student, Some((teacher, aams)), distill_cfg, train_cfg, data, sink)
}

fn run(
    mut student: Model,
    teacher: Option<(&Model, AamParams)>,
    cfg: &DistillConfig,
    train_cfg: &TrainConfig,
    data: &Corpora<'_>,
    mut sink: Option<EpochSink<'_>>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    if data.vocab.len() > student.config().vocab_size {
        return Err(Error::Config(format!(
            "vocabulary of {} tokens exceeds model.vocab_size {}",
            data.vocab.len(),
            student.config().vocab_size
        )));
    }
    let (teacher, mut aams) = match teacher {
        Some((t, a)) => (Some(t), Some(a)),
        None => (None, None),
    };
    let mut opt = Adam::from_config(student.params(), train_cfg);
    let mut aam_opt = aams.as_ref().map(|a| Adam::from_config(a.params(), train_cfg));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x00d5_0bad_cafe);
    let max_len = student.config().max_len;

    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(f64, f64, usize, Model, Option<AamParams>)> = None;
    for epoch in 0..train_cfg.epochs {
        let lambda = lambda_schedule(cfg.lambda_att, cfg.lambda_decay, epoch);
        let shuffle = train_cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
        let batches = batchify(data.train, train_cfg.batch_size, data.vocab, Some(shuffle), max_len)?;
        let mut sums = LossMetrics::default();
        for batch in &batches {
            let mut tape = Tape::new();
            let teacher_ref = match (teacher, aams.as_ref()) {
                (Some(model), Some(aams)) => Some(TeacherRef { model, aams }),
                _ => None,
            };
            let (loss, m) = total_loss(
                &mut tape,
                batch,
                &student,
                teacher_ref,
                cfg,
                lambda,
                Some(&mut dropout_rng),
            )?;
            if !m.total.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}")));
            }
            accumulate(&mut sums, &m);

            student.params_mut().zero_grad();
            let mut sets: Vec<&mut ParamSet> = vec![student.params_mut()];
            if let Some(a) = aams.as_mut() {
                a.params_mut().zero_grad();
                sets.push(a.params_mut());
            }
            let grads = tape.backward(loss)?;
            for set in sets.iter_mut() {
                grads.accumulate_into(&tape, set);
            }
            clip_grad_norm(&mut sets, train_cfg.grad_clip_norm);
            let lr = warmup_lr(train_cfg.learning_rate, opt.steps() + 1, train_cfg.warmup_steps);
            opt.step(student.params_mut(), lr)?;
            if let (Some(a), Some(o)) = (aams.as_mut(), aam_opt.as_mut()) {
                o.step(a.params_mut(), lr)?;
            }
        }
        let n = batches.len() as f64;
        let val_acc = eval::teacher_forced_accuracy(&student, data.valid, data.vocab, 64)?;
        let val_bleu = eval::greedy_bleu(&student, data.valid, data.vocab, 64)?;
        let metrics = EpochMetrics {
            epoch,
            l_ce: sums.ce / n,
            l_att_enc: sums.att.components[0] / n,
            l_att_dec_self: sums.att.components[1] / n,
            l_att_dec_cross: sums.att.components[2] / n,
            l_kd: sums.kd / n,
            lambda,
            val_acc,
            val_bleu,
        };
        log::info!(
            "epoch {epoch}: ce {:.4} att {:.4}/{:.4}/{:.4} kd {:.4} lambda {:.4} val_acc {:.4} bleu {:.2}",
            metrics.l_ce,
            metrics.l_att_enc,
            metrics.l_att_dec_self,
            metrics.l_att_dec_cross,
            metrics.l_kd,
            lambda,
            val_acc,
            val_bleu
        );
        if let Some(sink) = sink.as_mut() {
            sink(&metrics)?;
        }
        let improved = match &best {
            None => true,
            Some((acc, bleu, ..)) => val_acc > *acc || (val_acc == *acc && val_bleu > *bleu),
        };
        if improved {
            best = Some((val_acc, val_bleu, epoch, student.clone(), aams.clone()));
        }
        log.push(metrics);
    }
    let (_, _, best_epoch, model, aams) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        model,
        aams,
        log,
        best_epoch,
    })
}

fn accumulate(sums: &mut LossMetrics, m: &LossMetrics) {
    sums.ce += m.ce;
    sums.kd += m.kd;
    for (s, v) in sums.att.components.iter_mut().zip(m.att.components) {
        *s += v;
    }
    sums.att.combined += m.att.combined;
    sums.total += m.total;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn lambda_schedule_values() {
        assert_eq!(lambda_schedule(1.0, 0.9, 0), 1.0);
        assert!((lambda_schedule(1.0, 0.9, 2) - 0.81).abs() < 1e-15);
        assert!((lambda_schedule(0.1, 0.9, 1) - 0.09).abs() < 1e-15);
        for e in 0..20 {
            assert!(lambda_schedule(1.0, 0.9, e + 1) < lambda_schedule(1.0, 0.9, e));
        }
    }

    #[test]
    fn warmup_peaks_at_base() {
        assert!((warmup_lr(1e-3, 100, 100) - 1e-3).abs() < 1e-15);
        assert!(warmup_lr(1e-3, 50, 100) < 1e-3);
        assert!(warmup_lr(1e-3, 400, 100) < 1e-3);
        assert_eq!(warmup_lr(1e-3, 7, 0), 1e-3);
    }

    fn scalar_set(v: f64) -> ParamSet {
        let mut s = ParamSet::new();
        s.add("x", Tensor::full(&[1], v));
        s
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut s = scalar_set(0.7);
        let mut adam = Adam::new(&s, 0.9, 0.98, 1e-9);
        for _ in 0..3 {
            s.iter_mut().for_each(|(_, t)| t.grad = Some(vec![0.0]));
            adam.step(&mut s, 0.1).unwrap();
        }
        assert_eq!(s.tensors()[0].data(), &[0.7]);
    }

    #[test]
    fn adam_first_step_by_hand() {
        // m̂ = v̂ = 1 after one step with g = 1, so Δ = −lr / (1 + eps).
        let (lr, eps) = (0.01, 1e-9);
        let mut s = scalar_set(0.5);
        let mut adam = Adam::new(&s, 0.9, 0.98, eps);
        s.iter_mut().for_each(|(_, t)| t.grad = Some(vec![1.0]));
        adam.step(&mut s, lr).unwrap();
        let expect = 0.5 - lr / (1.0 + eps);
        assert!((s.tensors()[0].data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_nan_and_names_param() {
        let mut s = scalar_set(0.5);
        let mut adam = Adam::new(&s, 0.9, 0.98, 1e-9);
        s.iter_mut().for_each(|(_, t)| t.grad = Some(vec![f64::NAN]));
        match adam.step(&mut s, 0.1) {
            Err(Error::NonFinite(name)) => assert_eq!(name, "x"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.tensors()[0].data(), &[0.5]);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut a = scalar_set(0.0);
        let mut b = ParamSet::new();
        b.add("y", Tensor::zeros(&[2]));
        a.iter_mut().for_each(|(_, t)| t.grad = Some(vec![3.0]));
        b.iter_mut().for_each(|(_, t)| t.grad = Some(vec![4.0, 12.0]));
        let mut sets = [&mut a, &mut b];
        let before = clip_grad_norm(&mut sets, 1.0);
        assert!((before - 13.0).abs() < 1e-12);
        assert!((grad_norm(&sets) - 1.0).abs() < 1e-12);
        // Below the ceiling nothing changes.
        let again = clip_grad_norm(&mut sets, 2.0);
        assert!((again - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.epochs = 0;
        assert!(c.validate().unwrap_err().to_string().contains("epochs"));
    }
}
