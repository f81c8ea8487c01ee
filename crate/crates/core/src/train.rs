//! Multi-stage loss, learning-rate schedule and the training loop.

use std::fmt;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, ForwardMode, ModelConfig, ModelParams, StageVars, TapeParams};
use crate::seqdata::LabeledVideo;
use crate::tensor::{Mat, Real};

/// Lower clamp applied to log-probabilities inside both loss terms.
pub const LOG_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Fixed,
    Cosine,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Fixed => "fixed",
            Schedule::Cosine => "cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(Schedule::Fixed),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(Error::Config(format!("unknown schedule {s:?}; expected fixed or cosine"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub decay_start_epoch: usize,
    pub schedule: Schedule,
    /// Weight of the smoothing term.
    pub lambda: f64,
    /// Truncation threshold of the smoothing term.
    pub tau: f64,
    /// Treat the previous frame as a constant in the smoothing term.
    pub stop_grad: bool,
    /// Videos per optimizer step.
    pub batch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::salads()
    }
}

impl TrainConfig {
    fn base(epochs: usize, base_lr: f64, final_lr: f64, schedule: Schedule) -> Self {
        Self {
            epochs,
            base_lr,
            final_lr,
            decay_start_epoch: 15,
            schedule,
            lambda: 0.15,
            // truncation on |delta log p|; the squared term is capped at 16
            tau: 4.0,
            stop_grad: true,
            batch: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn breakfast() -> Self {
        Self::base(150, 0.00025, 0.00005, Schedule::Cosine)
    }

    pub fn assembly() -> Self {
        Self::base(120, 0.00025, 0.00005, Schedule::Cosine)
    }

    pub fn salads() -> Self {
        Self::base(200, 0.00065, 0.00065, Schedule::Fixed)
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "breakfast" => Ok(Self::breakfast()),
            "assembly" | "assembly101" => Ok(Self::assembly()),
            "salads" | "50salads" => Ok(Self::salads()),
            _ => Err(Error::Config(format!(
                "unknown profile {name:?}; expected breakfast, assembly or salads"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.final_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 || self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Config("need lambda >= 0 and tau > 0".into()));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("final_lr", self.final_lr.to_string()),
            ("decay_start_epoch", self.decay_start_epoch.to_string()),
            ("schedule", self.schedule.to_string()),
            ("lambda", self.lambda.to_string()),
            ("tau", self.tau.to_string()),
            ("stop_grad", crate::model::on_off(self.stop_grad).to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Applies one setting; `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::model::{parse, parse_on_off};
        match key {
            "profile" => {
                let seed = self.seed;
                *self = Self::profile(value)?;
                self.seed = seed;
            }
            "epochs" => self.epochs = parse(key, value)?,
            "base_lr" | "lr" => self.base_lr = parse(key, value)?,
            "final_lr" => self.final_lr = parse(key, value)?,
            "decay_start_epoch" => self.decay_start_epoch = parse(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "lambda" => self.lambda = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "stop_grad" => self.stop_grad = parse_on_off(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Learning rate used throughout `epoch` (0-based).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.schedule {
        Schedule::Fixed => cfg.base_lr,
        Schedule::Cosine => {
            if epoch < cfg.decay_start_epoch {
                return cfg.base_lr;
            }
            let last = cfg.epochs.saturating_sub(1);
            if last <= cfg.decay_start_epoch {
                return cfg.final_lr;
            }
            let progress = ((epoch - cfg.decay_start_epoch) as f64
                / (last - cfg.decay_start_epoch) as f64)
                .min(1.0);
            cfg.final_lr
                + (cfg.base_lr - cfg.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

fn check_probs<R: Real>(probs: &Mat<R>, labels: Option<&[usize]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != probs.rows() {
            return Err(Error::Argument(format!(
                "{} probability rows but {} labels",
                probs.rows(),
                l.len()
            )));
        }
        if let Some(&c) = l.iter().find(|&&c| c >= probs.cols()) {
            return Err(Error::Argument(format!("label {c} outside {} classes", probs.cols())));
        }
    }
    Ok(())
}

fn floored_log<R: Real>(p: R) -> f64 {
    let v = p.as_f64();
    if v > 0.0 {
        v.ln().max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    }
}

/// `-(1/T) Σ_t log P[t, label_t]`.
pub fn loss_ce<R: Real>(probs: &Mat<R>, labels: &[usize]) -> Result<f64> {
    check_probs(probs, Some(labels))?;
    let total: f64 = labels.iter().enumerate().map(|(t, &c)| floored_log(probs.get(t, c))).sum();
    Ok(-total / labels.len().max(1) as f64)
}

/// Mean of `min(|Δ log P|, τ)²` over the `(T−1)·C` adjacent differences.
pub fn loss_smooth<R: Real>(probs: &Mat<R>, tau: f64) -> Result<f64> {
    check_probs(probs, None)?;
    let (t, c) = probs.shape();
    if t < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 1..t {
        for j in 0..c {
            let d = (floored_log(probs.get(i, j)) - floored_log(probs.get(i - 1, j))).abs().min(tau);
            total += d * d;
        }
    }
    Ok(total / ((t - 1) * c) as f64)
}

/// `Σ_stages [CE + λ·smooth]`.
pub fn total_loss<R: Real>(stage_probs: &[Mat<R>], labels: &[usize], lambda: f64, tau: f64) -> Result<f64> {
    if stage_probs.is_empty() {
        return Err(Error::Argument("loss needs at least one stage".into()));
    }
    let mut total = 0.0;
    for p in stage_probs {
        total += loss_ce(p, labels)? + lambda * loss_smooth(p, tau)?;
    }
    Ok(total)
}

/// Loss nodes recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub smooth: Var,
}

/// Records the multi-stage loss; `ce` and `smooth` are sums over stages.
pub fn loss_on_tape<R: Real>(
    tape: &mut Tape<R>,
    stages: &[StageVars],
    labels: &[usize],
    cfg: &TrainConfig,
) -> LossVars {
    let floor = R::lit(LOG_FLOOR);
    let mut ce_terms = Vec::new();
    let mut smooth_terms = Vec::new();
    for s in stages {
        ce_terms.push((tape.cross_entropy(s.log_probs, labels, floor), R::one()));
        smooth_terms.push((tape.smooth(s.log_probs, R::lit(cfg.tau), floor, cfg.stop_grad), R::one()));
    }
    let ce = tape.weighted_sum(&ce_terms);
    let smooth = tape.weighted_sum(&smooth_terms);
    let total = tape.weighted_sum(&[(ce, R::one()), (smooth, R::lit(cfg.lambda))]);
    LossVars { total, ce, smooth }
}

/// Loss values and parameter gradients for one video.
pub struct StepResult<R> {
    pub total: f64,
    pub ce: f64,
    pub smooth: f64,
    /// `(name, gradient)` in parameter order.
    pub grads: Vec<(String, Mat<R>)>,
}

/// Forward and backward pass over one labelled sequence.
pub fn loss_and_grads<R: Real>(
    params: &ModelParams<R>,
    features: &Mat<R>,
    labels: &[usize],
    cfg: &TrainConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<StepResult<R>> {
    let mut tape = Tape::new();
    let vars = TapeParams::register(&mut tape, params);
    let x = tape.leaf(features.clone());
    let stages = forward_on_tape(&mut tape, &params.config, &vars, x, ForwardMode { dropout_rng })?;
    if labels.len() != features.rows() {
        return Err(Error::Argument(format!(
            "{} labels for {} frames",
            labels.len(),
            features.rows()
        )));
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= params.config.classes) {
        return Err(Error::Argument(format!("label {c} outside {} classes", params.config.classes)));
    }
    let loss = loss_on_tape(&mut tape, &stages, labels, cfg);
    let total = tape.scalar(loss.total).as_f64();
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss is {total}")));
    }
    let mut g = tape.backward(loss.total);
    let grads = vars.collect_grads(params, &mut g);
    if let Some((name, _)) = grads.iter().find(|(_, m)| !m.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient in {name}")));
    }
    Ok(StepResult {
        total,
        ce: tape.scalar(loss.ce).as_f64(),
        smooth: tape.scalar(loss.smooth).as_f64(),
        grads,
    })
}

/// Adam with bias-corrected moments.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Mat<f32>>,
    v: Vec<Mat<f32>>,
}

impl Adam {
    pub fn new(params: &ModelParams<f32>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Mat<f32>> =
            params.named_tensors().iter().map(|(_, m)| Mat::zeros(m.rows(), m.cols())).collect();
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, params: &mut ModelParams<f32>, grads: &[Mat<f32>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step_size = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        let mut i = 0;
        params.for_each_mut(|_, p| {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (((w, m), v), &g) in p
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
                .zip(g.as_slice())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / (v.sqrt() + eps);
            }
            i += 1;
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Means over the optimizer steps of the epoch.
    pub total: f64,
    pub ce: f64,
    pub smooth: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Deterministic CSV; wall time is left out so reruns compare equal.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,total,ce,smooth\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:e},{:.8},{:.8},{:.8}", r.epoch, r.lr, r.total, r.ce, r.smooth);
        }
        s
    }
}

/// Options that do not affect the learned parameters.
#[derive(Default)]
pub struct FitOptions<'a> {
    /// Written after every epoch.
    pub checkpoint: Option<PathBuf>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Trains from a seeded initialisation with one pass over `videos` in the
/// given order per epoch.
pub fn fit(
    videos: &[LabeledVideo],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut opts: FitOptions<'_>,
) -> Result<(ModelParams<f32>, TrainHistory)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::Argument("no training videos".into()));
    }
    let mut params = ModelParams::<f32>::init(model_cfg, cfg.seed)?;
    let mut adam = Adam::new(&params, cfg);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg);
        let (mut total, mut ce, mut smooth) = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for batch in videos.chunks(cfg.batch) {
            let mut acc: Option<Vec<Mat<f32>>> = None;
            let scale = 1.0 / batch.len() as f32;
            for video in batch {
                let step = loss_and_grads(
                    &params,
                    &video.features.frames,
                    &video.labels.labels,
                    cfg,
                    Some(&mut dropout_rng),
                )
                .map_err(|e| e.in_video(video.id()))?;
                total += step.total;
                ce += step.ce;
                smooth += step.smooth;
                let grads = step.grads.into_iter().map(|(_, mut g)| {
                    g.scale(scale);
                    g
                });
                match &mut acc {
                    None => acc = Some(grads.collect()),
                    Some(a) => a.iter_mut().zip(grads).for_each(|(a, g)| a.add_assign(&g)),
                }
            }
            adam.update(&mut params, &acc.expect("non-empty batch"), lr);
            steps += batch.len();
        }
        if let Some((name, _)) = params.named_tensors().into_iter().find(|(_, m)| !m.is_finite()) {
            return Err(Error::Numeric(format!("parameter {name} became non-finite in epoch {epoch}")));
        }
        let n = steps as f64;
        let record = EpochRecord {
            epoch,
            lr,
            total: total / n,
            ce: ce / n,
            smooth: smooth / n,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        if let Some(path) = &opts.checkpoint {
            save_checkpoint(path, &params)?;
        }
        if let Some(cb) = opts.on_epoch.as_deref_mut() {
            cb(&record);
        }
        history.records.push(record);
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::model_forward;
    use crate::seqdata::{synth_generate, SynthSpec};
    use rand::Rng;

    fn random_probs(t: usize, c: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mat::from_fn(t, c, |_, _| rng.random_range(0.05..1.0));
        for i in 0..t {
            let s: f64 = m.row(i).iter().sum();
            m.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        m
    }

    #[test]
    fn ce_cases() {
        let onehot = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(loss_ce::<f64>(&onehot, &[0, 1]).unwrap().abs() < 1e-12);
        let uniform = Mat::filled(4, 5, 0.2);
        assert!((loss_ce::<f64>(&uniform, &[0, 1, 2, 3]).unwrap() - 5f64.ln()).abs() < 1e-12);
        let p = random_probs(5, 3, 1);
        let labels = [0, 2, 1, 1, 0];
        let direct = -(0..5).map(|t| p.get(t, labels[t]).ln()).sum::<f64>() / 5.0;
        assert!((loss_ce(&p, &labels).unwrap() - direct).abs() < 1e-14);
        assert!(loss_ce(&p, &labels[..4]).is_err());
    }

    #[test]
    fn smooth_cases() {
        assert_eq!(loss_smooth::<f64>(&Mat::filled(6, 3, 1.0 / 3.0), 16.0).unwrap(), 0.0);
        let tau = 0.5f64;
        let a = 1.0 / (1.0 + tau.exp());
        let b = 1.0 - a;
        // log-ratio between frames is exactly tau in each column
        let p = Mat::from_fn(5, 2, |t, c| if (t + c) % 2 == 0 { a } else { b });
        let lp = (b / a).ln();
        assert!((lp - tau).abs() < 1e-12);
        assert!((loss_smooth(&p, tau).unwrap() - tau * tau).abs() < 1e-9);
        let p = random_probs(4, 2, 3);
        let mut direct = 0.0;
        for t in 1..4 {
            for c in 0..2 {
                let d = (p.get(t, c).ln() - p.get(t - 1, c).ln()).abs().min(16.0);
                direct += d * d;
            }
        }
        assert!((loss_smooth(&p, 16.0).unwrap() - direct / 6.0).abs() < 1e-14);
        assert_eq!(loss_smooth(&Mat::<f64>::filled(1, 3, 0.3), 16.0).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_composition() {
        let p = random_probs(6, 3, 4);
        let labels = [0, 0, 1, 1, 2, 2];
        let one = total_loss(std::slice::from_ref(&p), &labels, 0.15, 16.0).unwrap();
        let three = total_loss(&[p.clone(), p.clone(), p.clone()], &labels, 0.15, 16.0).unwrap();
        assert!((three - 3.0 * one).abs() < 1e-12);
        let ce_only = total_loss(std::slice::from_ref(&p), &labels, 0.0, 16.0).unwrap();
        assert!((ce_only - loss_ce(&p, &labels).unwrap()).abs() < 1e-15);
        assert!(total_loss::<f64>(&[], &labels, 0.15, 16.0).is_err());
    }

    #[test]
    fn tape_loss_matches_pure_loss() {
        let mut cfg = ModelConfig::new(4, 3);
        (cfg.d1, cfg.d2, cfg.layers, cfg.stages) = (6, 4, 2, 3);
        (cfg.attention.window, cfg.attention.stride) = (4, 4);
        let params = ModelParams::<f64>::init(&cfg, 2).unwrap();
        let x = Mat::from_fn(10, 4, |t, d| ((t * 7 + d * 3) % 5) as f64 - 2.0);
        let labels: Vec<usize> = (0..10).map(|t| t / 4).collect();
        let tc = TrainConfig::default();
        let step = loss_and_grads(&params, &x, &labels, &tc, None).unwrap();
        let probs: Vec<Mat<f64>> = model_forward(&params, &x).unwrap().into_iter().map(|s| s.probs).collect();
        let pure = total_loss(&probs, &labels, tc.lambda, tc.tau).unwrap();
        assert!((step.total - pure).abs() < 1e-10);
        assert_eq!(step.grads.len(), params.named_tensors().len());
    }

    #[test]
    fn gradients_scale_with_loss() {
        let mut cfg = ModelConfig::new(4, 3);
        (cfg.d1, cfg.d2, cfg.layers, cfg.stages) = (4, 4, 1, 2);
        (cfg.attention.window, cfg.attention.stride) = (4, 4);
        let params = ModelParams::<f64>::init(&cfg, 2).unwrap();
        let x = Mat::from_fn(8, 4, |t, d| (t as f64 - d as f64) * 0.3);
        let labels = [0, 0, 1, 1, 1, 2, 2, 2];
        let mut tc = TrainConfig::default();
        let a = loss_and_grads(&params, &x, &labels, &tc, None).unwrap();
        tc.lambda *= 2.0;
        let mut tape = Tape::new();
        let vars = TapeParams::register(&mut tape, &params);
        let xv = tape.leaf(x.clone());
        let stages =
            forward_on_tape(&mut tape, &cfg, &vars, xv, ForwardMode::<ChaCha8Rng> { dropout_rng: None }).unwrap();
        tc.lambda /= 2.0;
        let loss = loss_on_tape(&mut tape, &stages, &labels, &tc);
        let doubled = tape.weighted_sum(&[(loss.total, 2.0)]);
        let mut g = tape.backward(doubled);
        let grads = vars.collect_grads(&params, &mut g);
        for ((name, g2), (_, g1)) in grads.iter().zip(&a.grads) {
            let mut expect = g1.clone();
            expect.scale(2.0);
            assert!(g2.max_abs_diff(&expect) < 1e-12, "{name}");
        }
    }

    #[test]
    fn identity_blocks_have_finite_gradients() {
        let mut cfg = ModelConfig::new(4, 3);
        (cfg.d1, cfg.d2, cfg.layers, cfg.stages) = (4, 4, 2, 1);
        let mut params = ModelParams::<f64>::init(&cfg, 0).unwrap();
        params.for_each_mut(|n, m| {
            if n.contains(".conv.") || n.contains(".out.") {
                m.scale(0.0);
            }
        });
        let x = Mat::from_fn(6, 4, |t, d| (t + d) as f64 * 0.1);
        let step = loss_and_grads(&params, &x, &[0, 0, 1, 1, 2, 2], &TrainConfig::default(), None).unwrap();
        assert!(step.grads.iter().all(|(_, g)| g.is_finite()));
        let attn = step.grads.iter().find(|(n, _)| n == "stage1.block0.attn0.value.weight").unwrap();
        assert!(attn.1.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn schedules() {
        let s = TrainConfig::salads();
        assert!((0..200).all(|e| lr_at(e, &s) == 0.00065));
        let b = TrainConfig::breakfast();
        assert_eq!(lr_at(0, &b), 0.00025);
        assert_eq!(lr_at(15, &b), 0.00025);
        assert!((lr_at(149, &b) - 0.00005).abs() < 1e-15);
        let mut odd = b.clone();
        odd.epochs = 16 + 20 + 1;
        // decay span 15..=36 has midpoint 25.5; check symmetry around it
        let mid = (lr_at(25, &odd) + lr_at(26, &odd)) / 2.0;
        assert!((mid - 0.00015).abs() < 1e-12);
        odd.epochs = 15 + 20 + 1;
        assert!((lr_at(25, &odd) - 0.00015).abs() < 1e-15);
        for e in 1..b.epochs {
            assert!(lr_at(e, &b) <= lr_at(e - 1, &b));
        }
    }

    #[test]
    fn config_round_trip() {
        let mut a = TrainConfig::assembly();
        a.seed = 42;
        a.stop_grad = false;
        let mut b = TrainConfig::default();
        for (k, v) in a.to_pairs() {
            assert!(b.set(k, &v).unwrap());
        }
        assert_eq!(a, b);
        assert!(!b.set("d1", "3").unwrap());
    }

    fn tiny() -> (Vec<LabeledVideo>, ModelConfig) {
        let spec = SynthSpec {
            num_videos: 2,
            frames_per_video: 40,
            num_classes: 3,
            mean_segment_length: 10,
            feature_dim: 4,
            ..SynthSpec::default()
        };
        let data = synth_generate(&spec, 3).unwrap();
        let mut cfg = ModelConfig::new(4, 3);
        (cfg.d1, cfg.d2, cfg.layers, cfg.stages) = (8, 4, 2, 2);
        (cfg.attention.window, cfg.attention.stride) = (8, 8);
        (data.videos, cfg)
    }

    #[test]
    fn fit_descends_and_is_deterministic() {
        let (videos, cfg) = tiny();
        let mut tc = TrainConfig::salads();
        tc.epochs = 4;
        tc.base_lr = 0.003;
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("m.ckpt");
        let mut seen = 0;
        let mut cb = |_: &EpochRecord| seen += 1;
        let opts = FitOptions { checkpoint: Some(ckpt.clone()), on_epoch: Some(&mut cb) };
        let (p1, h1) = fit(&videos, &cfg, &tc, opts).unwrap();
        assert_eq!(seen, 4);
        assert_eq!(crate::checkpoint::load_checkpoint(&ckpt).unwrap(), p1);
        let (p2, h2) = fit(&videos, &cfg, &tc, FitOptions::default()).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1.to_csv(), h2.to_csv());
        assert!(h1.records[3].total < h1.records[0].total);
        assert_eq!(h1.to_csv().lines().count(), 5);
    }

    #[test]
    fn fit_batches_and_reports_video_errors() {
        let (mut videos, cfg) = tiny();
        let mut tc = TrainConfig::salads();
        tc.epochs = 1;
        tc.batch = 2;
        assert!(fit(&videos, &cfg, &tc, FitOptions::default()).is_ok());
        videos[1].labels.labels[0] = 7;
        let err = fit(&videos, &cfg, &tc, FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Video { .. }), "{err}");
    }
}
