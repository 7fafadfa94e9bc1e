//! Synthetic long-context retrieval: needle-in-a-haystack task generation,
//! exact-match accuracy, distance-bucketed answer loss and model comparison.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::RESERVED_TOKEN;
use crate::intervals::Interval;
use crate::model::{token_nll, ModelError, TinyModelParams};
use crate::plan::{PlanError, PlanSpec};
use crate::report::fmt_opt;

/// Query separator; never drawn as filler.
pub const SEPARATOR: u32 = RESERVED_TOKEN;
pub const NIAH_FAMILY: &str = "niah_single";
pub const DEFAULT_FILLER: &str = "abcdefghijklmnop";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("infeasible task layout: {0}")]
    Infeasible(String),
    #[error("evaluation length {t_eval} exceeds supported length {max_len}")]
    Range { t_eval: usize, max_len: u64 },
    #[error("buckets must partition [0, {0}]")]
    BadBuckets(u64),
    #[error("cannot compare: {0}")]
    Mismatch(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiahConfig {
    pub t_eval: usize,
    pub key_len: usize,
    pub value_len: usize,
    pub filler_vocab: Vec<u32>,
    /// 0 puts the needle at the start, 1 right before the query.
    pub depth_fraction: f64,
}

impl NiahConfig {
    pub fn new(t_eval: usize) -> Self {
        Self {
            t_eval,
            key_len: 2,
            value_len: 2,
            filler_vocab: DEFAULT_FILLER.bytes().map(u32::from).collect(),
            depth_fraction: 0.0,
        }
    }

    pub fn query_len(&self) -> usize {
        1 + self.key_len
    }

    fn haystack_len(&self) -> usize {
        self.t_eval.saturating_sub(self.query_len() + self.value_len)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.key_len == 0 || self.value_len == 0 {
            return Err(EvalError::Infeasible("key and value must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.depth_fraction) {
            return Err(EvalError::Infeasible(format!("depth fraction {}", self.depth_fraction)));
        }
        let mut distinct = self.filler_vocab.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() != self.filler_vocab.len() || distinct.contains(&SEPARATOR) {
            return Err(EvalError::Infeasible("filler vocabulary must be distinct and exclude the separator".into()));
        }
        if distinct.len() <= self.key_len + self.value_len {
            return Err(EvalError::Infeasible("filler vocabulary too small for key and value".into()));
        }
        let reserved = self.key_len + self.value_len + self.query_len() + self.value_len;
        if self.t_eval < reserved {
            return Err(EvalError::Infeasible(format!("T_eval {} < {reserved} reserved tokens", self.t_eval)));
        }
        Ok(())
    }

    /// Needle start for this configuration's depth.
    pub fn needle_offset(&self) -> usize {
        let room = self.haystack_len() - self.key_len - self.value_len;
        (self.depth_fraction * room as f64).floor() as usize
    }
}

/// One retrieval episode. `tokens` is the full teacher-forcing sequence:
/// haystack (containing key then value at `needle_offset`), separator, key,
/// then the answer.
#[derive(Debug, Clone, PartialEq)]
pub struct NiahTask {
    pub tokens: Vec<u32>,
    pub key: Vec<u32>,
    pub value: Vec<u32>,
    pub needle_offset: usize,
}

impl NiahTask {
    pub fn t_eval(&self) -> usize {
        self.tokens.len()
    }

    pub fn haystack(&self) -> &[u32] {
        &self.tokens[..self.answer_start() - 1 - self.key.len()]
    }

    pub fn query(&self) -> &[u32] {
        &self.tokens[self.answer_start() - 1 - self.key.len()..self.answer_start()]
    }

    pub fn answer_start(&self) -> usize {
        self.tokens.len() - self.value.len()
    }

    /// Distance from the first answer token back to the first value token in
    /// the haystack, i.e. the span the copy has to bridge.
    pub fn retrieval_distance(&self) -> u64 {
        (self.answer_start() - (self.needle_offset + self.key.len())) as u64
    }
}

pub fn gen_niah<R: Rng + ?Sized>(rng: &mut R, cfg: &NiahConfig) -> Result<NiahTask, EvalError> {
    cfg.validate()?;
    let mut vocab = cfg.filler_vocab.clone();
    vocab.shuffle(rng);
    let key = vocab[..cfg.key_len].to_vec();
    let value = vocab[cfg.key_len..cfg.key_len + cfg.value_len].to_vec();
    let filler = &vocab[cfg.key_len + cfg.value_len..];
    let offset = cfg.needle_offset();
    let mut tokens: Vec<u32> = (0..cfg.haystack_len()).map(|_| filler[rng.random_range(0..filler.len())]).collect();
    tokens[offset..offset + cfg.key_len].copy_from_slice(&key);
    tokens[offset + cfg.key_len..offset + cfg.key_len + cfg.value_len].copy_from_slice(&value);
    tokens.push(SEPARATOR);
    tokens.extend_from_slice(&key);
    tokens.extend_from_slice(&value);
    Ok(NiahTask { tokens, key, value, needle_offset: offset })
}

pub fn gen_tasks<R: Rng + ?Sized>(rng: &mut R, cfg: &NiahConfig, n: usize) -> Result<Vec<NiahTask>, EvalError> {
    (0..n).map(|_| gen_niah(rng, cfg)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub scale: f64,
    /// Longest supported length (the `L` of the training plan).
    pub max_len: u64,
    /// Added to every position before scaling.
    pub shift: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskResult {
    pub correct: bool,
    /// Mean negative log-likelihood of the answer tokens.
    pub answer_nll: f64,
    pub distance: u64,
}

/// Scores one task with a single teacher-forced pass. Because attention is
/// causal, all answer argmaxes matching the value is the same event as
/// greedy decoding reproducing the value.
pub fn score_task(params: &TinyModelParams, task: &NiahTask, opts: &EvalOptions) -> Result<TaskResult, EvalError> {
    let t = task.t_eval();
    if t as u64 > opts.max_len {
        return Err(EvalError::Range { t_eval: t, max_len: opts.max_len });
    }
    let positions: Vec<f64> = (0..t as u64).map(|i| (i + opts.shift) as f64 / opts.scale).collect();
    let start = task.answer_start();
    let logits = params.logits_for_rows(&task.tokens, &positions, start - 1..t - 1)?;
    let vocab = params.config.vocab_size;
    let correct = logits
        .chunks_exact(vocab)
        .zip(&task.value)
        .all(|(row, &v)| crate::model::argmax(row) == v as usize);
    let nll = token_nll(&logits, vocab, &task.value)?;
    Ok(TaskResult {
        correct,
        answer_nll: nll.iter().sum::<f64>() / nll.len() as f64,
        distance: task.retrieval_distance(),
    })
}

pub fn score_tasks(params: &TinyModelParams, tasks: &[NiahTask], opts: &EvalOptions) -> Result<Vec<TaskResult>, EvalError> {
    tasks.par_iter().map(|t| score_task(params, t, opts)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketStat {
    pub bucket: Interval,
    pub count: usize,
    pub mean_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub family: String,
    pub t_eval: usize,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub buckets: Vec<BucketStat>,
}

impl EvalReport {
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["model".to_string(), "family".into(), "T_eval".into(), "n".into(), "accuracy".into()];
        cols.extend(self.buckets.iter().map(|b| bucket_column(&b.bucket)));
        cols.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        let mut cols = vec![
            self.model.clone(),
            self.family.clone(),
            self.t_eval.to_string(),
            self.n.to_string(),
            format!("{:.6}", self.accuracy),
        ];
        cols.extend(self.buckets.iter().map(|b| fmt_opt(b.mean_nll, 6)));
        cols.join(",")
    }

    pub fn bucket_nll(&self, lo: u64, hi: u64) -> Option<f64> {
        self.buckets.iter().find(|b| b.bucket.lo == lo && b.bucket.hi == hi).and_then(|b| b.mean_nll)
    }
}

pub fn bucket_column(b: &Interval) -> String {
    format!("nll_{}_{}", b.lo, b.hi)
}

fn parse_bucket_column(col: &str) -> Option<Interval> {
    let (lo, hi) = col.strip_prefix("nll_")?.split_once('_')?;
    Some(Interval { lo: lo.parse().ok()?, hi: hi.parse().ok()? })
}

/// Reads the reports in an evaluation CSV (one header line, one row per
/// model). Bucket counts are not stored in the file and read back as zero;
/// `correct` is recovered from the rounded accuracy.
pub fn parse_eval_csv(text: &str) -> Result<Vec<EvalReport>, EvalError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(EvalError::Parse { line: 1, message: "empty file".into() })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 5 || cols[..5] != ["model", "family", "T_eval", "n", "accuracy"] {
        return Err(EvalError::Parse { line: 1, message: format!("unexpected header {header:?}") });
    }
    let buckets = cols[5..]
        .iter()
        .map(|c| parse_bucket_column(c).ok_or(EvalError::Parse { line: 1, message: format!("bad bucket column {c:?}") }))
        .collect::<Result<Vec<_>, _>>()?;
    lines
        .map(|(i, line)| {
            let err = |message: String| EvalError::Parse { line: i + 1, message };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(err(format!("expected {} fields, found {}", cols.len(), f.len())));
            }
            let t_eval = f[2].parse().map_err(|_| err(format!("bad T_eval {:?}", f[2])))?;
            let n: usize = f[3].parse().map_err(|_| err(format!("bad n {:?}", f[3])))?;
            let accuracy: f64 = f[4].parse().map_err(|_| err(format!("bad accuracy {:?}", f[4])))?;
            if !(0.0..=1.0).contains(&accuracy) {
                return Err(err(format!("accuracy {accuracy} outside [0, 1]")));
            }
            let stats = buckets
                .iter()
                .zip(&f[5..])
                .map(|(&bucket, v)| {
                    let mean_nll = match *v {
                        "NA" => None,
                        v => Some(v.parse().map_err(|_| err(format!("bad NLL {v:?}")))?),
                    };
                    Ok(BucketStat { bucket, count: 0, mean_nll })
                })
                .collect::<Result<Vec<_>, EvalError>>()?;
            Ok(EvalReport {
                model: f[0].to_string(),
                family: f[1].to_string(),
                t_eval,
                n,
                correct: (accuracy * n as f64).round() as usize,
                accuracy,
                buckets: stats,
            })
        })
        .collect()
}

/// Checks that `buckets` are sorted, contiguous and cover `[0, last]`.
pub fn check_partition(buckets: &[Interval], last: u64) -> Result<(), EvalError> {
    let mut next = 0;
    for b in buckets {
        if b.lo != next || b.hi < b.lo {
            return Err(EvalError::BadBuckets(last));
        }
        next = b.hi + 1;
    }
    if next != last + 1 {
        return Err(EvalError::BadBuckets(last));
    }
    Ok(())
}

/// Local, gap and cross-segment distance regions of a two-segment plan:
/// `[0, max(a,b)-1]`, `[max(a,b), L-a-b]`, `[L-a-b+1, L-1]`.
pub fn region_buckets(spec: &PlanSpec) -> Result<Vec<Interval>, EvalError> {
    spec.validate()?;
    if !spec.gap_condition() {
        return Err(PlanError::GapConditionNotMet { a: spec.a, b: spec.b, target_len: spec.target_len }.into());
    }
    let m = spec.a.max(spec.b);
    let far = spec.target_len - spec.a - spec.b;
    Ok(vec![Interval { lo: 0, hi: m - 1 }, Interval { lo: m, hi: far }, Interval { lo: far + 1, hi: spec.target_len - 1 }])
}

/// Restricts `buckets` to `[0, last]`, dropping the ones left empty.
pub fn clip_buckets(buckets: &[Interval], last: u64) -> Vec<Interval> {
    buckets
        .iter()
        .filter(|b| b.lo <= last)
        .map(|b| Interval { lo: b.lo, hi: b.hi.min(last) })
        .collect()
}

/// Mean answer NLL per distance bucket.
pub fn bucket_stats(results: &[TaskResult], buckets: &[Interval]) -> Vec<BucketStat> {
    buckets
        .iter()
        .map(|&bucket| {
            let inside: Vec<f64> = results.iter().filter(|r| bucket.contains(r.distance)).map(|r| r.answer_nll).collect();
            BucketStat {
                bucket,
                count: inside.len(),
                mean_nll: (!inside.is_empty()).then(|| inside.iter().sum::<f64>() / inside.len() as f64),
            }
        })
        .collect()
}

pub fn eval_retrieval(
    model: &str,
    params: &TinyModelParams,
    tasks: &[NiahTask],
    opts: &EvalOptions,
    buckets: &[Interval],
) -> Result<EvalReport, EvalError> {
    let t_eval = tasks.first().map_or(0, |t| t.t_eval());
    if tasks.iter().any(|t| t.t_eval() != t_eval) {
        return Err(EvalError::Mismatch("tasks of different lengths".into()));
    }
    if t_eval as u64 > opts.max_len {
        return Err(EvalError::Range { t_eval, max_len: opts.max_len });
    }
    if t_eval > 0 {
        check_partition(buckets, t_eval as u64 - 1)?;
    }
    let results = score_tasks(params, tasks, opts)?;
    let correct = results.iter().filter(|r| r.correct).count();
    Ok(EvalReport {
        model: model.to_string(),
        family: NIAH_FAMILY.to_string(),
        t_eval,
        n: tasks.len(),
        correct,
        accuracy: if tasks.is_empty() { 0.0 } else { correct as f64 / tasks.len() as f64 },
        buckets: bucket_stats(&results, buckets),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceRegion {
    Observed,
    Gap,
    Mixed,
}

impl DistanceRegion {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistanceRegion::Observed => "observed",
            DistanceRegion::Gap => "gap",
            DistanceRegion::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub stat: BucketStat,
    pub region: DistanceRegion,
}

pub const PROFILE_HEADER: &str = "lo,hi,count,mean_nll,region";

impl ProfileRow {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.stat.bucket.lo,
            self.stat.bucket.hi,
            self.stat.count,
            fmt_opt(self.stat.mean_nll, 6),
            self.region.as_str()
        )
    }
}

/// Answer NLL bucketed by retrieval distance, each bucket tagged by whether
/// the training plan `train` observed its distances.
pub fn distance_profile(
    params: &TinyModelParams,
    tasks: &[NiahTask],
    opts: &EvalOptions,
    buckets: &[Interval],
    train: &PlanSpec,
) -> Result<Vec<ProfileRow>, EvalError> {
    check_partition(buckets, train.target_len - 1)?;
    let observed = crate::plan::observed_distances_closed_form(train)?;
    let results = score_tasks(params, tasks, opts)?;
    Ok(bucket_stats(&results, buckets)
        .into_iter()
        .map(|stat| {
            let inside = crate::intervals::DistanceSet::range(stat.bucket.lo, stat.bucket.hi);
            let hit = inside.intersection(&observed).count();
            let region = if hit == inside.count() {
                DistanceRegion::Observed
            } else if hit == 0 {
                DistanceRegion::Gap
            } else {
                DistanceRegion::Mixed
            };
            ProfileRow { stat, region }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub header: String,
    pub rows: Vec<String>,
    /// For each report, the metric columns where it is best.
    pub best: Vec<Vec<String>>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},best\n", self.header);
        for (row, best) in self.rows.iter().zip(&self.best) {
            let marker = if best.is_empty() { "-".to_string() } else { best.join(";") };
            out.push_str(&format!("{row},{marker}\n"));
        }
        out
    }
}

/// One row per report; accuracy is best when highest, bucket NLLs when
/// lowest. Ties mark every tied report.
pub fn compare(reports: &[EvalReport]) -> Result<Comparison, EvalError> {
    let first = reports.first().ok_or_else(|| EvalError::Mismatch("no reports".into()))?;
    let header = first.csv_header();
    for r in reports {
        if r.family != first.family || r.t_eval != first.t_eval || r.csv_header() != header {
            return Err(EvalError::Mismatch(format!("{} differs from {} in family, length or buckets", r.model, first.model)));
        }
    }
    let mut best = vec![Vec::new(); reports.len()];
    let top = reports.iter().map(|r| r.accuracy).fold(f64::NEG_INFINITY, f64::max);
    for (i, r) in reports.iter().enumerate() {
        if r.accuracy == top {
            best[i].push("accuracy".to_string());
        }
    }
    for (k, b) in first.buckets.iter().enumerate() {
        let values: Vec<Option<f64>> = reports.iter().map(|r| r.buckets[k].mean_nll).collect();
        let Some(low) = values.iter().flatten().copied().reduce(f64::min) else { continue };
        for (i, v) in values.iter().enumerate() {
            if *v == Some(low) {
                best[i].push(bucket_column(&b.bucket));
            }
        }
    }
    Ok(Comparison { header, rows: reports.iter().map(|r| r.to_csv_row()).collect(), best })
}
