//! Mini-batch ascent on the evidence lower bound: Adam on the negated
//! batch-mean of per-example estimates, with either joint updates of
//! both parameter sets or alternating phases that freeze one set — the
//! inference-only phase tightens the bound toward the evidence, the
//! generative-only phase pushes the evidence itself.
//!
//! Determinism contract: a (schedule, seed, model) triple fixes the
//! batch order, every noise draw, and therefore the full metrics log,
//! byte for byte. Evaluation draws its noise from a dedicated stream
//! keyed by dataset row index, so eval curves are comparable across
//! steps and runs.

use crate::data::DataSplit;
use crate::error::{Error, Result};
use crate::models::{Batch, LatentModel};
use crate::nn::ParamSet;
use crate::tensor::{SeededRng, Tape, Tensor};

const STEP_STREAM: u64 = 0x7374_6570;
const SHUFFLE_STREAM: u64 = 0x7368_7566;
const EVAL_STREAM: u64 = 0x6576_616c;

/// Rows scored per tape during whole-split evaluation, to bound graph
/// memory.
pub const EVAL_CHUNK: usize = 200;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> AdamConfig {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second-moment accumulators for one parameter set, in the set's
/// canonical order. The step counter advances only when this set is
/// updated, so a frozen set resumes exactly where it left off.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> AdamState {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One descent update (gradients point uphill on the loss). The
    /// caller supplies gradients aligned with the set's order.
    pub fn apply(
        &mut self,
        cfg: &AdamConfig,
        params: &mut ParamSet,
        grads: &[Tensor],
    ) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                shapes: vec![vec![grads.len()], vec![params.len()], vec![self.m.len()]],
                detail: "gradients, parameters, and moments must align".into(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    shapes: vec![g.shape().to_vec(), p.shape().to_vec()],
                    detail: "gradient shape differs from its parameter".into(),
                });
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((pv, gv), (mv, vv)) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

/// Which parameter set an alternating schedule starts with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Inference-only: update phi, freeze theta (tightens the bound).
    E,
    /// Generative-only: update theta, freeze phi (raises the evidence).
    M,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleMode {
    /// Update both sets every step.
    Joint,
    /// Blocks of `phase_length` steps alternating between the phases.
    Alternating { phase_length: usize, starting_phase: Phase },
}

#[derive(Clone, Debug)]
pub struct TrainSchedule {
    pub mode: ScheduleMode,
    pub total_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Stop after this many consecutive evaluations without an ELBO
    /// improvement (None: always run the full budget).
    pub patience: Option<usize>,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn joint(total_steps: usize, batch_size: usize, eval_every: usize, seed: u64) -> TrainSchedule {
        TrainSchedule {
            mode: ScheduleMode::Joint,
            total_steps,
            batch_size,
            eval_every,
            patience: None,
            seed,
        }
    }

    /// (update theta, update phi) at a given step index.
    pub fn updates_at(&self, step: usize) -> (bool, bool) {
        match self.mode {
            ScheduleMode::Joint => (true, true),
            ScheduleMode::Alternating { phase_length, starting_phase } => {
                let even_block = (step / phase_length) % 2 == 0;
                let phase = match (even_block, starting_phase) {
                    (true, p) => p,
                    (false, Phase::E) => Phase::M,
                    (false, Phase::M) => Phase::E,
                };
                match phase {
                    Phase::E => (false, true),
                    Phase::M => (true, false),
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::Config { detail });
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if let ScheduleMode::Alternating { phase_length, .. } = self.mode {
            if phase_length == 0 {
                return bad("phase_length must be at least 1".into());
            }
        }
        Ok(())
    }
}

/// One logged evaluation: the CSV columns plus the per-example spread
/// of the ELBO estimate (kept out of the CSV).
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    pub elbo: f64,
    pub evidence: Option<f64>,
    pub cond_entropy: Option<f64>,
    pub cluster_acc: Option<f64>,
    pub elbo_se: f64,
}

impl MetricsRow {
    fn csv_line(&self) -> String {
        let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.split,
            self.elbo,
            opt(&self.evidence),
            opt(&self.cond_entropy),
            opt(&self.cluster_acc)
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,split,elbo,evidence,cond_entropy,cluster_acc\n");
        for row in &self.rows {
            out.push_str(&row.csv_line());
            out.push('\n');
        }
        out
    }
}

/// The training loop: owns the model, both optimizers, the batch
/// order, and the metrics log. `run` covers the whole schedule;
/// `train_one_step`/`evaluate_now` expose the same machinery for
/// callers that interleave their own checks.
pub struct Trainer<M: LatentModel> {
    model: M,
    train_split: DataSplit,
    eval_split: DataSplit,
    schedule: TrainSchedule,
    adam: AdamConfig,
    theta_opt: AdamState,
    phi_opt: AdamState,
    step: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
    log: MetricsLog,
}

impl<M: LatentModel> Trainer<M> {
    pub fn new(
        model: M,
        train_split: DataSplit,
        eval_split: DataSplit,
        schedule: TrainSchedule,
        adam: AdamConfig,
    ) -> Result<Trainer<M>> {
        schedule.validate()?;
        if train_split.len() == 0 {
            return Err(Error::EmptyData { what: "training split" });
        }
        if eval_split.len() == 0 {
            return Err(Error::EmptyData { what: "evaluation split" });
        }
        let theta_opt = AdamState::new(model.theta());
        let phi_opt = AdamState::new(model.phi());
        let mut trainer = Trainer {
            model,
            train_split,
            eval_split,
            schedule,
            adam,
            theta_opt,
            phi_opt,
            step: 0,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
            log: MetricsLog::default(),
        };
        trainer.new_epoch();
        Ok(trainer)
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut M {
        &mut self.model
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn schedule(&self) -> &TrainSchedule {
        &self.schedule
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn take_log(&mut self) -> MetricsLog {
        std::mem::take(&mut self.log)
    }

    fn new_epoch(&mut self) {
        let mut order: Vec<usize> = (0..self.train_split.len()).collect();
        let mut rng = SeededRng::new(self.schedule.seed)
            .derive(SHUFFLE_STREAM)
            .derive(self.epoch);
        rng.shuffle(&mut order);
        self.order = order;
        self.pos = 0;
    }

    fn next_batch(&mut self) -> Batch {
        let mut indices = Vec::with_capacity(self.schedule.batch_size);
        while indices.len() < self.schedule.batch_size {
            if self.pos >= self.order.len() {
                self.epoch += 1;
                self.new_epoch();
            }
            indices.push(self.order[self.pos]);
            self.pos += 1;
        }
        let (x, y) = self.train_split.gather(&indices);
        let base_rng = SeededRng::new(self.schedule.seed)
            .derive(STEP_STREAM)
            .derive(self.step as u64);
        Batch { x, y, indices, base_rng, train: true }
    }

    /// One gradient step on the schedule's current phase. Returns the
    /// (negated-ELBO) training loss.
    pub fn train_one_step(&mut self) -> Result<f64> {
        let (upd_theta, upd_phi) = self.schedule.updates_at(self.step);
        let batch = self.next_batch();
        let tape = Tape::new();
        let theta = self.model.theta().bind(&tape, upd_theta);
        let phi = self.model.phi().bind(&tape, upd_phi);
        let elbo = self.model.per_example_elbo(&tape, &theta, &phi, &batch)?;
        let loss = -elbo.mean_all();
        let loss_value = loss.value().scalar_value();
        if !loss_value.is_finite() {
            return Err(Error::NanLoss { step: self.step as u64 });
        }
        let grads = tape.backward(loss)?;
        if upd_theta {
            let g: Vec<Tensor> =
                theta.vars_in_order().iter().map(|&v| grads.get_or_zeros(v)).collect();
            self.theta_opt.apply(&self.adam, self.model.theta_mut(), &g)?;
        }
        if upd_phi {
            let g: Vec<Tensor> =
                phi.vars_in_order().iter().map(|&v| grads.get_or_zeros(v)).collect();
            self.phi_opt.apply(&self.adam, self.model.phi_mut(), &g)?;
        }
        self.step += 1;
        Ok(loss_value)
    }

    /// Scores a whole split: one noise draw per example from the fixed
    /// evaluation stream, keyed by dataset row index.
    pub fn evaluate_split(&self, split_name: &str, split: &DataSplit) -> Result<MetricsRow> {
        let n = split.len();
        let base_rng = SeededRng::new(self.schedule.seed).derive(EVAL_STREAM);
        let mut values = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let indices: Vec<usize> = (start..end).collect();
            let (x, y) = split.gather(&indices);
            let batch = Batch { x, y, indices, base_rng: base_rng.clone(), train: false };
            let tape = Tape::new();
            let theta = self.model.theta().bind(&tape, false);
            let phi = self.model.phi().bind(&tape, false);
            let elbo = self.model.per_example_elbo(&tape, &theta, &phi, &batch)?;
            values.extend_from_slice(elbo.value().data());
            start = end;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        let extra = self.model.extra_metrics(split)?;
        Ok(MetricsRow {
            step: self.step,
            split: split_name.to_string(),
            elbo: mean,
            evidence: extra.evidence,
            cond_entropy: extra.cond_entropy,
            cluster_acc: extra.cluster_acc,
            elbo_se: se,
        })
    }

    /// Evaluates the held-out split and appends the row to the log.
    pub fn evaluate_now(&mut self) -> Result<MetricsRow> {
        let row = self.evaluate_split("test", &self.eval_split)?;
        self.log.push(row.clone());
        Ok(row)
    }

    /// Advances exactly `k` training steps, evaluating whenever the step
    /// counter crosses an eval_every boundary.
    pub fn run_steps(&mut self, k: usize) -> Result<()> {
        for _ in 0..k {
            self.train_one_step()?;
            if self.step % self.schedule.eval_every == 0 {
                self.evaluate_now()?;
            }
        }
        Ok(())
    }

    /// The full schedule: an initial evaluation, `total_steps` updates
    /// with periodic evaluation, a final evaluation if the last step
    /// didn't land on one, honoring the patience window if set.
    pub fn run(&mut self) -> Result<()> {
        let mut best = self.evaluate_now()?.elbo;
        let mut stale = 0usize;
        while self.step < self.schedule.total_steps {
            self.train_one_step()?;
            if self.step % self.schedule.eval_every == 0 {
                let row = self.evaluate_now()?;
                if let Some(patience) = self.schedule.patience {
                    if row.elbo > best {
                        best = row.elbo;
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale >= patience {
                            return Ok(());
                        }
                    }
                }
            }
        }
        if self.log.rows().last().map(|r| r.step) != Some(self.step) {
            self.evaluate_now()?;
        }
        Ok(())
    }
}
