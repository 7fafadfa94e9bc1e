//! The desk experiment: pretrain a small model on short retrieval episodes,
//! extend it with interpolation under two position plans that see the same
//! tokens, then compare long-range retrieval.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{self, CuePolicy, CueSet, SampleSpec, TrainingSample};
use crate::eval::{self, EvalOptions, EvalReport, NiahConfig, NiahTask};
use crate::intervals::Interval;
use crate::model::{self, Batch, BatchRow, LrSchedule, ModelConfig, StepMetrics, TinyModelParams, TrainOptions, TrainState};
use crate::plan::{PlanKind, PlanSpec};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Plan(#[from] crate::plan::PlanError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
}

/// One stage of the pretraining curriculum. Each step holds `recall_rows`
/// dense recall blocks of `recall_len` tokens plus `batch_size - recall_rows`
/// sparse rows of `len` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumStage {
    pub steps: u64,
    pub len: usize,
    pub recall_rows: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeskConfig {
    pub model: ModelConfig,
    pub pretrain_len: usize,
    pub curriculum: Vec<CurriculumStage>,
    pub pretrain_batch: usize,
    pub recall_len: usize,
    /// Key/value pairs in a sparse recall row.
    pub scattered_pairs: usize,
    /// Loss weight of filler targets during pretraining.
    pub filler_weight: f64,
    pub a: u64,
    pub target_len: u64,
    pub scale: f64,
    pub prompt_weight: f64,
    pub finetune: PhaseConfig,
    pub t_eval: usize,
    pub eval_tasks: usize,
    pub filler: Vec<u32>,
    /// Key/value pairs per fine-tuning context.
    pub needles: usize,
    pub threads: usize,
}

impl Default for DeskConfig {
    fn default() -> Self {
        let stage = |steps, len, recall_rows, lr| CurriculumStage { steps, len, recall_rows, lr };
        Self {
            model: ModelConfig::default(),
            pretrain_len: 128,
            curriculum: vec![stage(1500, 32, 16, 3e-3), stage(1000, 64, 8, 1e-3), stage(1000, 128, 8, 1e-3)],
            pretrain_batch: 16,
            recall_len: 32,
            scattered_pairs: 8,
            filler_weight: 0.1,
            a: 120,
            target_len: 1024,
            scale: 8.0,
            prompt_weight: 0.1,
            finetune: PhaseConfig { steps: 300, batch_size: 16, lr: 1e-3, warmup_steps: 20 },
            t_eval: 1024,
            eval_tasks: 200,
            filler: (b'a'..=b'z').map(u32::from).collect(),
            needles: 2,
            threads: 1,
        }
    }
}

impl DeskConfig {
    pub fn train_spec(&self, cues: &CueSet) -> PlanSpec {
        PlanSpec { a: self.a, b: cues.max_len() as u64, target_len: self.target_len, scale: self.scale }
    }

    fn options(&self, steps: u64, lr: f64, warmup_steps: u64, seed: u64) -> TrainOptions {
        TrainOptions {
            schedule: LrSchedule { peak: lr, warmup_steps },
            max_steps: steps,
            seed,
            threads: self.threads,
            record_wall_clock: false,
        }
    }
}

fn infeasible(msg: String) -> ExperimentError {
    eval::EvalError::Infeasible(msg).into()
}

/// Dense associative recall: `len / 4` key/value pairs with distinct keys
/// that never occur as values, then every pair again in random order. Only
/// the repeated values are scored.
pub fn recall_block<R: Rng + ?Sized>(rng: &mut R, len: usize, letters: &[u32]) -> Result<BatchRow, ExperimentError> {
    let pairs = len / 4;
    if pairs == 0 || len % 4 != 0 || letters.len() <= pairs {
        return Err(infeasible(format!("recall block of {len} tokens over {} letters", letters.len())));
    }
    let keys: Vec<u32> = letters.choose_multiple(rng, pairs).copied().collect();
    let rest: Vec<u32> = letters.iter().copied().filter(|c| !keys.contains(c)).collect();
    let values: Vec<u32> = (0..pairs).map(|_| rest[rng.random_range(0..rest.len())]).collect();
    let mut tokens: Vec<u32> = keys.iter().zip(&values).flat_map(|(&k, &v)| [k, v]).collect();
    let mut order: Vec<usize> = (0..pairs).collect();
    order.shuffle(rng);
    tokens.extend(order.iter().flat_map(|&i| [keys[i], values[i]]));
    // Target t is scored through weight t - 1.
    let weights = (1..len).map(|t| if t > 2 * pairs && t % 2 == 1 { 1.0 } else { 0.0 }).collect();
    Ok(BatchRow { tokens, positions: (0..len as u64).collect(), weights })
}

/// Sparse recall: `pairs` key/value tokens scattered through filler, a
/// separator, then every pair again in random order. Keys never occur as
/// filler; filler targets get `filler_weight`, repeated values get 1.
pub fn scattered_recall<R: Rng + ?Sized>(
    rng: &mut R,
    len: usize,
    letters: &[u32],
    pairs: usize,
    filler_weight: f64,
) -> Result<BatchRow, ExperimentError> {
    let head = len.checked_sub(1 + 2 * pairs).filter(|&h| h >= 2 * pairs);
    let Some(head) = head.filter(|_| pairs > 0 && letters.len() > pairs) else {
        return Err(infeasible(format!("{pairs} scattered pairs in {len} tokens")));
    };
    let keys: Vec<u32> = letters.choose_multiple(rng, pairs).copied().collect();
    let filler: Vec<u32> = letters.iter().copied().filter(|c| !keys.contains(c)).collect();
    let values: Vec<u32> = (0..pairs).map(|_| filler[rng.random_range(0..filler.len())]).collect();
    let free = head - 2 * pairs;
    let mut cuts: Vec<usize> = (0..pairs).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut tokens = Vec::with_capacity(len);
    let mut used = 0;
    for (i, &cut) in cuts.iter().enumerate() {
        tokens.extend((used..cut).map(|_| filler[rng.random_range(0..filler.len())]));
        used = cut;
        tokens.extend([keys[i], values[i]]);
    }
    tokens.extend((used..free).map(|_| filler[rng.random_range(0..filler.len())]));
    tokens.push(eval::SEPARATOR);
    let mut order: Vec<usize> = (0..pairs).collect();
    order.shuffle(rng);
    tokens.extend(order.iter().flat_map(|&i| [keys[i], values[i]]));
    let weights = (1..len).map(|t| if t > head && (t - head) % 2 == 0 { 1.0 } else { filler_weight }).collect();
    Ok(BatchRow { tokens, positions: (0..len as u64).collect(), weights })
}

/// A retrieval episode of `len` tokens: `needles` key/value pairs at
/// random non-overlapping places in a filler haystack, then one query per
/// needle (separator, key, value) in random order. Key and value letters are
/// distinct and never used as filler.
pub fn episode<R: Rng + ?Sized>(
    rng: &mut R,
    len: usize,
    letters: &[u32],
    needles: usize,
) -> Result<Vec<u32>, ExperimentError> {
    let (kl, vl) = (2, 2);
    let item = kl + vl;
    let tail = needles * (1 + item);
    if needles == 0 || letters.len() <= needles * item || len < tail + needles * item {
        return Err(eval::EvalError::Infeasible(format!("{needles} needles in {len} tokens")).into());
    }
    let mut pool = letters.to_vec();
    pool.shuffle(rng);
    let (special, filler) = pool.split_at(needles * item);
    let haystack = len - tail;
    // Spread the free filler slots among the needles: draw the gaps before
    // each needle as sorted uniform cut points.
    let free = haystack - needles * item;
    let mut cuts: Vec<usize> = (0..needles).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut tokens = Vec::with_capacity(len);
    let mut used = 0;
    for (i, &cut) in cuts.iter().enumerate() {
        tokens.extend((used..cut).map(|_| filler[rng.random_range(0..filler.len())]));
        used = cut;
        tokens.extend_from_slice(&special[i * item..(i + 1) * item]);
    }
    tokens.extend((used..free).map(|_| filler[rng.random_range(0..filler.len())]));
    let mut order: Vec<usize> = (0..needles).collect();
    order.shuffle(rng);
    for i in order {
        tokens.push(eval::SEPARATOR);
        tokens.extend_from_slice(&special[i * item..(i + 1) * item]);
    }
    Ok(tokens)
}

/// An episode row for pretraining: the queries are scored in full, the
/// haystack with `filler_weight`.
fn episode_row<R: Rng + ?Sized>(rng: &mut R, cfg: &DeskConfig, len: usize) -> Result<BatchRow, ExperimentError> {
    let tokens = episode(rng, len, &cfg.filler, 1)?;
    let head = len - 5;
    let weights = (1..len).map(|t| if t >= head { 1.0 } else { cfg.filler_weight }).collect();
    Ok(BatchRow { tokens, positions: (0..len as u64).collect(), weights })
}

fn curriculum_step<R: Rng + ?Sized>(rng: &mut R, cfg: &DeskConfig, stage: &CurriculumStage) -> Result<Vec<Batch>, ExperimentError> {
    let dense = stage.recall_rows.min(cfg.pretrain_batch);
    let mut step = Vec::new();
    if dense > 0 {
        let rows = (0..dense).map(|_| recall_block(rng, cfg.recall_len, &cfg.filler)).collect::<Result<_, _>>()?;
        step.push(Batch::new(rows, 1.0)?);
    }
    if dense < cfg.pretrain_batch {
        let rows = (dense..cfg.pretrain_batch)
            .map(|_| {
                if rng.random_bool(0.5) {
                    scattered_recall(rng, stage.len, &cfg.filler, cfg.scattered_pairs, cfg.filler_weight)
                } else {
                    episode_row(rng, cfg, stage.len)
                }
            })
            .collect::<Result<_, _>>()?;
        step.push(Batch::new(rows, 1.0)?);
    }
    Ok(step)
}

/// Pretrains at unit scale through the curriculum. Every stage restarts the
/// warmup and keeps the optimizer state.
pub fn pretrain(cfg: &DeskConfig, seed: u64) -> Result<(TrainState, Vec<StepMetrics>), ExperimentError> {
    if let Some(s) = cfg.curriculum.iter().find(|s| s.len > cfg.pretrain_len) {
        return Err(infeasible(format!("curriculum length {} exceeds {}", s.len, cfg.pretrain_len)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut state = TrainState::new(TinyModelParams::init(&cfg.model, seed)?, seed);
    let mut log = Vec::new();
    for stage in &cfg.curriculum {
        let steps: Vec<Vec<Batch>> =
            (0..stage.steps).map(|_| curriculum_step(&mut rng, cfg, stage)).collect::<Result<_, _>>()?;
        log.extend(state.train_more(steps, &cfg.options(stage.steps, stage.lr, 20, seed))?);
    }
    Ok((state, log))
}

/// Fine-tuning samples: the same contexts and cue draws for every plan kind.
pub fn finetune_samples(
    cfg: &DeskConfig,
    cues: &CueSet,
    kind: PlanKind,
    seed: u64,
) -> Result<Vec<Vec<TrainingSample>>, ExperimentError> {
    let spec = SampleSpec {
        a: cfg.a,
        target_len: cfg.target_len,
        scale: cfg.scale,
        plan_kind: kind,
        prompt_weight: cfg.prompt_weight,
        context_weight: 1.0,
        cue_policy: CuePolicy::PerSample,
        pose_chunks: 2,
    };
    spec.validate(cues)?;
    let mut ctx_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let mut cue_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0003);
    (0..cfg.finetune.steps)
        .map(|_| {
            (0..cfg.finetune.batch_size)
                .map(|_| {
                    let ctx = episode(&mut ctx_rng, cfg.a as usize, &cfg.filler, cfg.needles)?;
                    Ok(data::make_sample(&ctx, cues, &spec, &mut cue_rng)?)
                })
                .collect()
        })
        .collect()
}

pub fn finetune(
    cfg: &DeskConfig,
    base: &TinyModelParams,
    cues: &CueSet,
    kind: PlanKind,
    seed: u64,
) -> Result<(TrainState, Vec<StepMetrics>), ExperimentError> {
    let steps = finetune_samples(cfg, cues, kind, seed)?;
    let batches: Vec<Vec<Batch>> = steps.iter().map(|s| data::step_batches(s)).collect::<Result<_, _>>()?;
    let mut state = TrainState::new(base.clone(), seed);
    let ft = &cfg.finetune;
    let log = state.train_more(batches, &cfg.options(ft.steps, ft.lr, ft.warmup_steps, seed))?;
    Ok((state, log))
}

fn niah_tasks(cfg: &DeskConfig, t_eval: usize, seed: u64) -> Result<Vec<NiahTask>, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut niah = NiahConfig::new(t_eval);
    niah.filler_vocab = cfg.filler.clone();
    Ok(eval::gen_tasks(&mut rng, &niah, cfg.eval_tasks)?)
}

/// Depth-0 retrieval tasks at the evaluation length.
pub fn eval_tasks(cfg: &DeskConfig, seed: u64) -> Result<Vec<NiahTask>, ExperimentError> {
    niah_tasks(cfg, cfg.t_eval, seed ^ 0x5eed_0004)
}

pub fn evaluate(
    cfg: &DeskConfig,
    name: &str,
    params: &TinyModelParams,
    tasks: &[NiahTask],
    buckets: &[Interval],
) -> Result<EvalReport, ExperimentError> {
    let opts = EvalOptions { scale: cfg.scale, max_len: cfg.target_len, shift: 0 };
    Ok(eval::eval_retrieval(name, params, tasks, &opts, buckets)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    /// Depth-0 retrieval of the pretrained model at its own length and scale 1.
    pub pretrain_accuracy: f64,
    pub endprompt: EvalReport,
    pub baseline: EvalReport,
    /// One EndPrompt run per cue, in the order of `DeskResult::cue_ids`.
    pub single_cue: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeskResult {
    /// Longest cue, the `b` of the training plan.
    pub prompt_len: u64,
    pub cue_ids: Vec<String>,
    pub seeds: Vec<SeedResult>,
}

/// Pretrains one model per seed, fine-tunes it under the local baseline,
/// the mixed-cue EndPrompt plan and one EndPrompt plan per cue, and scores
/// every copy on the same retrieval tasks.
pub fn run_desk(cfg: &DeskConfig, seeds: &[u64]) -> Result<DeskResult, ExperimentError> {
    let cues = data::desk_cues();
    let spec = cfg.train_spec(&cues);
    let buckets = eval::clip_buckets(&eval::region_buckets(&spec)?, cfg.t_eval as u64 - 1);
    let cue_ids: Vec<String> = cues.cues().iter().map(|c| c.id.clone()).collect();
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (base, _) = pretrain(cfg, seed)?;
        let short = niah_tasks(cfg, cfg.pretrain_len, seed ^ 0x5eed_0005)?;
        let unit = EvalOptions { scale: 1.0, max_len: cfg.pretrain_len as u64, shift: 0 };
        let whole = [Interval { lo: 0, hi: cfg.pretrain_len as u64 - 1 }];
        let pretrain_accuracy = eval::eval_retrieval("pretrained", &base.params, &short, &unit, &whole)?.accuracy;
        let tasks = eval_tasks(cfg, seed)?;
        let arm = |name: &str, set: &CueSet, kind: PlanKind| -> Result<EvalReport, ExperimentError> {
            let (state, _) = finetune(cfg, &base.params, set, kind, seed)?;
            evaluate(cfg, name, &state.params, &tasks, &buckets)
        };
        let baseline = arm("baseline", &cues, PlanKind::Full)?;
        let endprompt = arm("endprompt", &cues, PlanKind::EndPrompt)?;
        let single_cue = cue_ids
            .iter()
            .map(|id| arm(&format!("endprompt_{id}"), &cues.only(id)?, PlanKind::EndPrompt))
            .collect::<Result<_, _>>()?;
        out.push(SeedResult { seed, pretrain_accuracy, endprompt, baseline, single_cue });
    }
    Ok(DeskResult { prompt_len: spec.b, cue_ids, seeds: out })
}
