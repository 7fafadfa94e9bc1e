#![allow(dead_code)]

use endprompt_lab::model::{Batch, BatchRow, ModelConfig, TinyModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn desk_config(tie_head: bool) -> ModelConfig {
    ModelConfig { vocab_size: 32, model_dim: 16, num_heads: 2, num_layers: 2, tie_head, ..Default::default() }
}

pub fn random_row(rng: &mut ChaCha8Rng, vocab: u32, t: usize, gap_at: usize, jump: u64) -> BatchRow {
    let tokens = (0..t).map(|_| rng.random_range(0..vocab)).collect();
    let positions = (0..t as u64).map(|i| if (i as usize) < gap_at { i } else { i + jump }).collect();
    let weights = (0..t - 1).map(|i| if i + 1 < gap_at { 1.0 } else { 0.1 + rng.random::<f64>() }).collect();
    BatchRow { tokens, positions, weights }
}

pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Compares the analytic gradient with central differences of the
/// forward-only loss at `coords` sampled coordinates.
pub fn check_gradient(params: &TinyModelParams, batch: &Batch, coords: usize, h: f64, seed: u64) -> GradCheck {
    let (_, analytic) = params.backward(batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut out = GradCheck { checked: 0, max_rel_err: 0.0, worst: String::new() };
    for _ in 0..coords {
        let i = rng.random_range(0..params.num_params());
        let x = params.data[i];
        probe.data[i] = x + h;
        let plus = probe.batch_loss(batch).unwrap().sum;
        probe.data[i] = x - h;
        let minus = probe.batch_loss(batch).unwrap().sum;
        probe.data[i] = x;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs()).max(1e-6);
        let rel = (a - numeric).abs() / scale;
        out.checked += 1;
        if rel > out.max_rel_err {
            out.max_rel_err = rel;
            let name = params.layout.owner(i).map_or("?", |t| t.name.as_str());
            out.worst = format!("{name}[{i}] analytic={a:e} numeric={numeric:e}");
        }
    }
    out
}
