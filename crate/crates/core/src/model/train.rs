use std::time::Instant;

use super::{Batch, LossValue, ModelConfig, ModelError, TinyModelParams};
use crate::report::fmt_sig;

pub const METRICS_HEADER: &str = "step,lr,loss_sum,loss_mean,wall_ms";

/// Linear warmup to `peak` over `warmup_steps`, then constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    /// Learning rate of update number `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.peak
        } else {
            self.peak * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Adam without weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub schedule: LrSchedule,
    pub max_steps: u64,
    pub seed: u64,
    /// Rows of a batch are evaluated on a rayon pool when above 1; the
    /// reduction order is fixed, so results do not depend on this value.
    pub threads: usize,
    /// Record real wall-clock milliseconds in the metrics log; otherwise the
    /// column is written as 0 so logs are reproducible byte-for-byte.
    pub record_wall_clock: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            schedule: LrSchedule { peak: 3e-4, warmup_steps: 20 },
            max_steps: 200,
            seed: 0,
            threads: 1,
            record_wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_sum: f64,
    pub loss_mean: Option<f64>,
    pub wall_ms: u64,
}

impl StepMetrics {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step,
            fmt_sig(self.lr, 9),
            fmt_sig(self.loss_sum, 9),
            self.loss_mean.map_or_else(|| "NA".to_string(), |m| fmt_sig(m, 9)),
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: TinyModelParams,
    pub optimizer: Adam,
    pub step: u64,
    pub seed: u64,
    pub config: ModelConfig,
}

impl TrainState {
    pub fn new(params: TinyModelParams, seed: u64) -> Self {
        let optimizer = Adam::new(params.num_params());
        let config = params.config.clone();
        Self { params, optimizer, step: 0, seed, config }
    }
}

/// Initializes parameters from `opts.seed` and trains on `data`.
///
/// Each item of `data` is the work of one optimizer step: one or more
/// equal-length batches whose gradients are summed.
pub fn train<I>(config: &ModelConfig, data: I, opts: &TrainOptions) -> Result<(TrainState, Vec<StepMetrics>), ModelError>
where
    I: IntoIterator<Item = Vec<Batch>>,
{
    let params = TinyModelParams::init(config, opts.seed)?;
    let mut state = TrainState::new(params, opts.seed);
    let log = continue_training(&mut state, data, opts)?;
    Ok((state, log))
}

/// Runs up to `opts.max_steps` further updates on an existing state. Stops
/// early when `data` runs out.
pub fn continue_training<I>(
    state: &mut TrainState,
    data: I,
    opts: &TrainOptions,
) -> Result<Vec<StepMetrics>, ModelError>
where
    I: IntoIterator<Item = Vec<Batch>>,
{
    let pool = if opts.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(opts.threads)
                .build()
                .map_err(|e| ModelError::InvalidConfig(e.to_string()))?,
        )
    } else {
        None
    };
    let mut log = Vec::new();
    let mut data = data.into_iter();
    for local in 1..=opts.max_steps {
        let Some(batches) = data.next() else { break };
        let started = Instant::now();
        let mut loss = LossValue { sum: 0.0, weight_sum: 0.0 };
        let mut grad = state.params.zeros_like();
        for batch in &batches {
            let (l, g) = match &pool {
                Some(pool) => pool.install(|| state.params.backward_parallel(batch))?,
                None => state.params.backward(batch)?,
            };
            loss.add(l);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        if !loss.sum.is_finite() {
            return Err(ModelError::Diverged { step: state.step + 1, loss: loss.sum });
        }
        let lr = opts.schedule.lr_at(local);
        state.optimizer.step(&mut state.params.data, &grad, lr);
        state.step += 1;
        if !state.params.all_finite() {
            return Err(ModelError::Diverged { step: state.step, loss: loss.sum });
        }
        log.push(StepMetrics {
            step: state.step,
            lr,
            loss_sum: loss.sum,
            loss_mean: loss.mean(),
            wall_ms: if opts.record_wall_clock { started.elapsed().as_millis() as u64 } else { 0 },
        });
    }
    Ok(log)
}

/// Appends `n_new` argmax tokens to `prompt`. `positions` holds the effective
/// position of every token that will be fed, so it needs at least
/// `prompt.len() + n_new - 1` entries.
pub fn greedy_decode(
    params: &TinyModelParams,
    prompt: &[u32],
    positions: &[f64],
    n_new: usize,
) -> Result<Vec<u32>, ModelError> {
    if prompt.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let mut seq = prompt.to_vec();
    if n_new == 0 {
        return Ok(seq);
    }
    let needed = prompt.len() + n_new - 1;
    if positions.len() < needed {
        return Err(ModelError::PositionsExhausted { needed, available: positions.len() });
    }
    for _ in 0..n_new {
        let n = seq.len();
        let logits = params.logits_for_rows(&seq, &positions[..n], n - 1..n)?;
        seq.push(argmax(&logits) as u32);
    }
    Ok(seq)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl TrainState {
    /// Continues training this state; see [`continue_training`].
    pub fn train_more<I>(&mut self, data: I, opts: &TrainOptions) -> Result<Vec<StepMetrics>, ModelError>
    where
        I: IntoIterator<Item = Vec<Batch>>,
    {
        continue_training(self, data, opts)
    }
}
