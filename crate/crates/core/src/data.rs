//! Byte corpus ingestion, two-segment sample construction and the JSONL
//! sample format.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{self, BufRead, Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{Batch, BatchRow, ModelError};
use crate::plan::{self, PlanError, PlanKind, PlanSpec, PositionPlan};

/// Token id reserved beyond the byte range; used as the single-token cue
/// and as the retrieval query separator.
pub const RESERVED_TOKEN: u32 = 256;
pub const BYTE_VOCAB: usize = 257;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid cue set: {0}")]
    InvalidCues(String),
    #[error("unknown cue '{0}'")]
    UnknownCue(String),
    #[error("cue '{cue_id}' of length {b} does not fit: a + b = {} > L = {target_len}", .a + .b)]
    CueTooLong { cue_id: String, a: u64, b: u64, target_len: u64 },
    #[error("invalid sample spec: {0}")]
    InvalidSpec(String),
    #[error("context window has {got} tokens, expected {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid sample: {message}")]
    Validation { line: usize, message: String },
    #[error("mixed sample lengths in one batch ({first} and {other})")]
    MixedLengths { first: usize, other: usize },
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Splits a byte stream into non-overlapping windows of `a` tokens, one
/// token per byte. A trailing partial window is dropped.
pub fn ingest<R: Read>(mut reader: R, a: usize) -> io::Result<Vec<Vec<u32>>> {
    if a == 0 {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "window length must be positive"));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    Ok(bytes.chunks_exact(a).map(|w| w.iter().map(|&b| u32::from(b)).collect()).collect())
}

pub fn bytes_to_tokens(s: &str) -> Vec<u32> {
    s.bytes().map(u32::from).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cue {
    pub id: String,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CueSet {
    cues: Vec<Cue>,
}

impl CueSet {
    pub fn new(cues: Vec<Cue>) -> Result<Self, DataError> {
        if cues.is_empty() {
            return Err(DataError::InvalidCues("no cues".into()));
        }
        let mut seen = HashSet::new();
        for cue in &cues {
            if cue.tokens.is_empty() {
                return Err(DataError::InvalidCues(format!("cue '{}' is empty", cue.id)));
            }
            if !seen.insert(cue.id.as_str()) {
                return Err(DataError::InvalidCues(format!("duplicate id '{}'", cue.id)));
            }
        }
        Ok(Self { cues })
    }

    pub fn cues(&self) -> &[Cue] {
        &self.cues
    }

    pub fn get(&self, id: &str) -> Option<&Cue> {
        self.cues.iter().find(|c| c.id == id)
    }

    pub fn max_len(&self) -> usize {
        self.cues.iter().map(|c| c.tokens.len()).max().unwrap_or(0)
    }

    /// The subset holding only `id`.
    pub fn only(&self, id: &str) -> Result<Self, DataError> {
        let cue = self.get(id).ok_or_else(|| DataError::UnknownCue(id.to_string()))?;
        Ok(Self { cues: vec![cue.clone()] })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &Cue {
        &self.cues[rng.random_range(0..self.cues.len())]
    }
}

pub const EP1_TEXT: &str = "This is the end of text, please pay attention here";
pub const EP3_TEXT: &str = "End.";

/// The three reference end prompts: a sentence, a single reserved token and
/// a minimal string.
pub fn default_cues() -> CueSet {
    CueSet::new(vec![
        Cue { id: "EP_1".into(), tokens: bytes_to_tokens(EP1_TEXT) },
        Cue { id: "EP_2".into(), tokens: vec![RESERVED_TOKEN] },
        Cue { id: "EP_3".into(), tokens: bytes_to_tokens(EP3_TEXT) },
    ])
    .expect("static cues are valid")
}

/// Short stand-ins for [`default_cues`] that fit the 128-token desk budget
/// (at most 8 tokens each).
pub fn desk_cues() -> CueSet {
    CueSet::new(vec![
        Cue { id: "EP_1".into(), tokens: bytes_to_tokens("The end:") },
        Cue { id: "EP_2".into(), tokens: vec![RESERVED_TOKEN] },
        Cue { id: "EP_3".into(), tokens: bytes_to_tokens(EP3_TEXT) },
    ])
    .expect("static cues are valid")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CuePolicy {
    /// A fresh uniform draw for every sample.
    PerSample,
    /// The same cue for the whole run.
    Fixed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub a: u64,
    pub target_len: u64,
    pub scale: f64,
    pub plan_kind: PlanKind,
    pub prompt_weight: f64,
    pub context_weight: f64,
    pub cue_policy: CuePolicy,
    /// Chunk count for the chunked plan.
    pub pose_chunks: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            a: 120,
            target_len: 1024,
            scale: 8.0,
            plan_kind: PlanKind::EndPrompt,
            prompt_weight: 0.1,
            context_weight: 1.0,
            cue_policy: CuePolicy::PerSample,
            pose_chunks: 2,
        }
    }
}

impl SampleSpec {
    pub fn validate(&self, cues: &CueSet) -> Result<(), DataError> {
        if self.a == 0 {
            return Err(DataError::InvalidSpec("a must be at least 1".into()));
        }
        if !(self.prompt_weight > 0.0 && self.prompt_weight <= 1.0) {
            return Err(DataError::InvalidSpec(format!("prompt weight {} outside (0, 1]", self.prompt_weight)));
        }
        if !(self.context_weight > 0.0 && self.context_weight.is_finite()) {
            return Err(DataError::InvalidSpec(format!("context weight {}", self.context_weight)));
        }
        plan::check_scale(self.scale)?;
        if let CuePolicy::Fixed(id) = &self.cue_policy {
            cues.get(id).ok_or_else(|| DataError::UnknownCue(id.clone()))?;
        }
        for cue in cues.cues() {
            let b = cue.tokens.len() as u64;
            if self.a + b > self.target_len {
                return Err(DataError::CueTooLong { cue_id: cue.id.clone(), a: self.a, b, target_len: self.target_len });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub plan: PlanKind,
    pub a: u64,
    pub b: u64,
    #[serde(rename = "L")]
    pub target_len: u64,
    pub s: f64,
    pub cue_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub tokens: Vec<u32>,
    pub positions: Vec<u64>,
    /// `weights[l]` weighs the prediction of `tokens[l + 1]`.
    pub weights: Vec<f64>,
    pub meta: SampleMeta,
}

impl TrainingSample {
    pub fn to_row(&self) -> BatchRow {
        BatchRow { tokens: self.tokens.clone(), positions: self.positions.clone(), weights: self.weights.clone() }
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Target-aligned weights: a target inside the context gets
/// `context_weight`, a target inside the prompt gets `prompt_weight`. The
/// boundary prediction (last context token to first cue token) therefore
/// takes the prompt weight.
pub fn sample_weights(a: u64, b: u64, context_weight: f64, prompt_weight: f64) -> Vec<f64> {
    let (cw, pw) = (round6(context_weight), round6(prompt_weight));
    (1..a + b).map(|target| if target < a { cw } else { pw }).collect()
}

pub fn make_sample<R: Rng + ?Sized>(
    context: &[u32],
    cues: &CueSet,
    spec: &SampleSpec,
    rng: &mut R,
) -> Result<TrainingSample, DataError> {
    if context.len() as u64 != spec.a {
        return Err(DataError::WindowLength { expected: spec.a as usize, got: context.len() });
    }
    let cue = match &spec.cue_policy {
        CuePolicy::PerSample => cues.sample(rng),
        CuePolicy::Fixed(id) => cues.get(id).ok_or_else(|| DataError::UnknownCue(id.clone()))?,
    };
    let b = cue.tokens.len() as u64;
    if spec.a + b > spec.target_len {
        return Err(DataError::CueTooLong { cue_id: cue.id.clone(), a: spec.a, b, target_len: spec.target_len });
    }
    let n = spec.a + b;
    let plan = match spec.plan_kind {
        PlanKind::EndPrompt => plan::endprompt_plan(&PlanSpec::new(spec.a, b, spec.target_len, spec.scale)?)?,
        PlanKind::Full => plan::full_plan(n, spec.scale)?,
        PlanKind::Pose => plan::pose_plan(n, spec.pose_chunks, spec.target_len, spec.scale, rng)?,
    };
    let mut tokens = context.to_vec();
    tokens.extend_from_slice(&cue.tokens);
    Ok(TrainingSample {
        tokens,
        positions: plan.assigned,
        weights: sample_weights(spec.a, b, spec.context_weight, spec.prompt_weight),
        meta: SampleMeta {
            plan: spec.plan_kind,
            a: spec.a,
            b,
            target_len: spec.target_len,
            s: spec.scale,
            cue_id: cue.id.clone(),
        },
    })
}

/// Checks a sample against its own metadata. EndPrompt and contiguous plans
/// are recomputed and compared exactly; chunked plans draw random skips, so
/// only their structure is checked.
pub fn validate_sample(sample: &TrainingSample, vocab: usize) -> Result<(), String> {
    let m = &sample.meta;
    let n = (m.a + m.b) as usize;
    if m.a == 0 {
        return Err("a must be at least 1".into());
    }
    if sample.tokens.len() != n || sample.positions.len() != n {
        return Err(format!(
            "expected {n} tokens and positions, found {} and {}",
            sample.tokens.len(),
            sample.positions.len()
        ));
    }
    if sample.weights.len() + 1 != n {
        return Err(format!("expected {} weights, found {}", n - 1, sample.weights.len()));
    }
    if let Some(t) = sample.tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(format!("token {t} outside vocabulary"));
    }
    if let Some(w) = sample.weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return Err(format!("invalid weight {w}"));
    }
    plan::check_scale(m.s).map_err(|e| e.to_string())?;
    match m.plan {
        PlanKind::EndPrompt => {
            let spec = PlanSpec::new(m.a, m.b, m.target_len, m.s).map_err(|e| e.to_string())?;
            let expected = plan::endprompt_plan(&spec).map_err(|e| e.to_string())?;
            if expected.assigned != sample.positions {
                return Err("positions do not match the endprompt plan".into());
            }
        }
        PlanKind::Full => {
            if n as u64 > m.target_len || !sample.positions.iter().copied().eq(0..n as u64) {
                return Err("positions do not match the contiguous plan".into());
            }
        }
        PlanKind::Pose => {
            let p = PositionPlan { kind: PlanKind::Pose, assigned: sample.positions.clone(), scale: m.s, prompt_len: 0 };
            if sample.positions[0] != 0 || !p.is_strictly_increasing() || sample.positions[n - 1] >= m.target_len {
                return Err("positions are not a valid chunked plan".into());
            }
        }
    }
    Ok(())
}

/// One JSON object per line with keys `tokens, positions, weights, meta`
/// in that order; weights use six decimals.
pub fn sample_to_line(sample: &TrainingSample) -> String {
    let join = |xs: &mut dyn Iterator<Item = String>| xs.collect::<Vec<_>>().join(",");
    let mut line = String::new();
    let m = &sample.meta;
    let _ = write!(
        line,
        "{{\"tokens\":[{}],\"positions\":[{}],\"weights\":[{}],\"meta\":{{\"plan\":\"{}\",\"a\":{},\"b\":{},\"L\":{},\"s\":{},\"cue_id\":{}}}}}",
        join(&mut sample.tokens.iter().map(|t| t.to_string())),
        join(&mut sample.positions.iter().map(|p| p.to_string())),
        join(&mut sample.weights.iter().map(|w| format!("{w:.6}"))),
        m.plan,
        m.a,
        m.b,
        m.target_len,
        serde_json::to_string(&m.s).expect("finite scale"),
        serde_json::to_string(&m.cue_id).expect("string"),
    );
    line
}

pub fn write_samples<W: Write>(samples: &[TrainingSample], mut sink: W) -> io::Result<()> {
    for s in samples {
        writeln!(sink, "{}", sample_to_line(s))?;
    }
    sink.flush()
}

fn expect_keys(obj: &serde_json::Map<String, Value>, keys: &[&str]) -> Result<(), String> {
    let found: Vec<&str> = obj.keys().map(String::as_str).collect();
    if found != keys {
        return Err(format!("expected keys {keys:?} in order, found {found:?}"));
    }
    Ok(())
}

fn parse_line(text: &str) -> Result<TrainingSample, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("record is not an object")?;
    expect_keys(obj, &["tokens", "positions", "weights", "meta"])?;
    let meta_obj = obj["meta"].as_object().ok_or("meta is not an object")?;
    expect_keys(meta_obj, &["plan", "a", "b", "L", "s", "cue_id"])?;
    let field = |k: &str| obj[k].clone();
    Ok(TrainingSample {
        tokens: serde_json::from_value(field("tokens")).map_err(|e| format!("tokens: {e}"))?,
        positions: serde_json::from_value(field("positions")).map_err(|e| format!("positions: {e}"))?,
        weights: serde_json::from_value(field("weights")).map_err(|e| format!("weights: {e}"))?,
        meta: serde_json::from_value(field("meta")).map_err(|e| format!("meta: {e}"))?,
    })
}

/// Reads and revalidates every record; errors carry 1-based line numbers.
pub fn read_samples<R: BufRead>(source: R, vocab: usize) -> Result<Vec<TrainingSample>, DataError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_line(&line).map_err(|message| DataError::Parse { line: line_no, message })?;
        validate_sample(&sample, vocab).map_err(|message| DataError::Validation { line: line_no, message })?;
        out.push(sample);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadPolicy {
    /// Every batch must hold equal-length samples.
    Reject,
    /// Samples are grouped by length; groups keep input order and are
    /// emitted in order of first appearance.
    GroupByShape,
}

/// Cuts `samples` into batches of at most `batch_size` rows.
pub fn batcher(samples: &[TrainingSample], batch_size: usize, pad: PadPolicy) -> Result<Vec<Batch>, DataError> {
    if batch_size == 0 {
        return Err(DataError::ZeroBatch);
    }
    let groups: Vec<Vec<&TrainingSample>> = match pad {
        PadPolicy::Reject => vec![samples.iter().collect()],
        PadPolicy::GroupByShape => group_by_len(samples),
    };
    let mut batches = Vec::new();
    for group in groups {
        for chunk in group.chunks(batch_size) {
            batches.push(to_batch(chunk)?);
        }
    }
    Ok(batches)
}

fn group_by_len(samples: &[TrainingSample]) -> Vec<Vec<&TrainingSample>> {
    let mut groups: Vec<Vec<&TrainingSample>> = Vec::new();
    for s in samples {
        match groups.iter_mut().find(|g| g[0].tokens.len() == s.tokens.len()) {
            Some(g) => g.push(s),
            None => groups.push(vec![s]),
        }
    }
    groups
}

fn to_batch(chunk: &[&TrainingSample]) -> Result<Batch, DataError> {
    let first = chunk[0];
    for s in chunk {
        if s.tokens.len() != first.tokens.len() {
            return Err(DataError::MixedLengths { first: first.tokens.len(), other: s.tokens.len() });
        }
        if s.meta.s != first.meta.s {
            return Err(DataError::InvalidSpec("mixed scales in one batch".into()));
        }
    }
    Ok(Batch::new(chunk.iter().map(|s| s.to_row()).collect(), first.meta.s)?)
}

/// The work of one optimizer step: `samples` split into equal-length
/// batches (see [`PadPolicy::GroupByShape`]).
pub fn step_batches(samples: &[TrainingSample]) -> Result<Vec<Batch>, DataError> {
    group_by_len(samples).iter().map(|g| to_batch(g)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ingest_windows() {
        assert_eq!(ingest(&b"abc"[..], 3).unwrap(), vec![vec![97, 98, 99]]);
        assert_eq!(ingest(&b"abcdefg"[..], 3).unwrap().len(), 2);
        assert!(ingest(&b""[..], 3).unwrap().is_empty());
    }

    #[test]
    fn reference_cues() {
        let cues = default_cues();
        assert_eq!(cues.get("EP_3").unwrap().tokens, vec![69, 110, 100, 46]);
        assert_eq!(cues.get("EP_2").unwrap().tokens.len(), 1);
        assert_eq!(cues.get("EP_1").unwrap().tokens.len(), EP1_TEXT.chars().count());
        assert!(desk_cues().max_len() <= 8);
    }

    fn spec(kind: PlanKind) -> SampleSpec {
        SampleSpec {
            a: 6,
            target_len: 32,
            scale: 1.0,
            plan_kind: kind,
            prompt_weight: 0.1,
            context_weight: 1.0,
            cue_policy: CuePolicy::Fixed("EP_3".into()),
            pose_chunks: 2,
        }
    }

    #[test]
    fn endprompt_sample_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ctx: Vec<u32> = (0..6).collect();
        let s = make_sample(&ctx, &default_cues(), &spec(PlanKind::EndPrompt), &mut rng).unwrap();
        assert_eq!(s.positions, vec![0, 1, 2, 3, 4, 5, 28, 29, 30, 31]);
        assert_eq!(s.weights, vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 0.1]);
        let full = make_sample(&ctx, &default_cues(), &spec(PlanKind::Full), &mut rng).unwrap();
        assert_eq!(full.positions, (0..10).collect::<Vec<u64>>());
    }

    #[test]
    fn cue_too_long_names_the_cue() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sp = spec(PlanKind::EndPrompt);
        sp.target_len = 8;
        let err = make_sample(&[1, 2, 3, 4, 5, 6], &default_cues(), &sp, &mut rng).unwrap_err();
        assert!(err.to_string().contains("EP_3"));
    }

    #[test]
    fn line_format_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = make_sample(&[97, 98], &default_cues(), &SampleSpec { a: 2, target_len: 8, ..spec(PlanKind::EndPrompt) }, &mut rng)
            .unwrap();
        assert_eq!(
            sample_to_line(&s),
            r#"{"tokens":[97,98,69,110,100,46],"positions":[0,1,4,5,6,7],"weights":[1.000000,0.100000,0.100000,0.100000,0.100000],"meta":{"plan":"endprompt","a":2,"b":4,"L":8,"s":1.0,"cue_id":"EP_3"}}"#
        );
    }

    #[test]
    fn read_rejects_bad_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = make_sample(&[1, 2, 3, 4, 5, 6], &default_cues(), &spec(PlanKind::EndPrompt), &mut rng).unwrap();
        let line = sample_to_line(&s);
        let truncated = format!("{line}\n{}", &line[..line.len() - 5]);
        match read_samples(truncated.as_bytes(), BYTE_VOCAB) {
            Err(DataError::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        let shifted = line.replace("\"positions\":[0,", "\"positions\":[1,");
        assert!(matches!(read_samples(shifted.as_bytes(), BYTE_VOCAB), Err(DataError::Validation { line: 1, .. })));
        let reordered = line.replacen("{\"tokens\"", "{\"extra\":1,\"tokens\"", 1);
        assert!(matches!(read_samples(reordered.as_bytes(), BYTE_VOCAB), Err(DataError::Parse { .. })));
    }

    #[test]
    fn batcher_sizes_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<_> = (0..10)
            .map(|i| make_sample(&[i, 1, 2, 3, 4, 5], &default_cues(), &spec(PlanKind::EndPrompt), &mut rng).unwrap())
            .collect();
        let batches = batcher(&samples, 4, PadPolicy::Reject).unwrap();
        assert_eq!(batches.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let firsts: Vec<u32> = batches.iter().flat_map(|b| b.rows().iter().map(|r| r.tokens[0])).collect();
        assert_eq!(firsts, (0..10).collect::<Vec<u32>>());
    }

    #[test]
    fn mixed_lengths_are_rejected_or_grouped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sp = spec(PlanKind::EndPrompt);
        sp.cue_policy = CuePolicy::PerSample;
        sp.target_len = 64;
        let samples: Vec<_> = (0..30)
            .map(|_| make_sample(&[1, 2, 3, 4, 5, 6], &default_cues(), &sp, &mut rng).unwrap())
            .collect();
        assert!(matches!(batcher(&samples, 30, PadPolicy::Reject), Err(DataError::MixedLengths { .. })));
        let grouped = batcher(&samples, 30, PadPolicy::GroupByShape).unwrap();
        assert_eq!(grouped.iter().map(|b| b.len()).sum::<usize>(), 30);
        assert_eq!(grouped.len(), 3);
    }
}
