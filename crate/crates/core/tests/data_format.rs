use endprompt_lab::data::{
    self, default_cues, desk_cues, make_sample, read_samples, sample_to_line, validate_sample, write_samples, CuePolicy,
    DataError, SampleSpec, TrainingSample, BYTE_VOCAB,
};
use endprompt_lab::plan::PlanKind;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sample(rng: &mut ChaCha8Rng) -> TrainingSample {
    let cues = if rng.random_bool(0.5) { desk_cues() } else { default_cues() };
    let a = rng.random_range(1..200u64);
    let target_len = a + cues.max_len() as u64 + rng.random_range(0..2000u64);
    let kind = [PlanKind::EndPrompt, PlanKind::Full, PlanKind::Pose][rng.random_range(0..3)];
    let n_max = a + cues.max_len() as u64;
    let spec = SampleSpec {
        a,
        target_len: target_len.max(n_max + 2),
        scale: [1.0, 2.0, 8.0, 3.5][rng.random_range(0..4)],
        plan_kind: kind,
        prompt_weight: (rng.random_range(1..=1_000_000u32) as f64) / 1e6,
        context_weight: 1.0,
        cue_policy: CuePolicy::PerSample,
        pose_chunks: 2,
    };
    let context: Vec<u32> = (0..a).map(|_| rng.random_range(0..BYTE_VOCAB as u32)).collect();
    make_sample(&context, &cues, &spec, rng).unwrap()
}

#[test]
fn thousand_samples_round_trip_and_revalidate() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let samples: Vec<TrainingSample> = (0..1000).map(|_| random_sample(&mut rng)).collect();
    let mut buf = Vec::new();
    write_samples(&samples, &mut buf).unwrap();
    let back = read_samples(buf.as_slice(), BYTE_VOCAB).unwrap();
    assert_eq!(back, samples);
    for s in &back {
        validate_sample(s, BYTE_VOCAB).unwrap();
    }
    // Files may be concatenated.
    let twice = [buf.clone(), buf].concat();
    assert_eq!(read_samples(twice.as_slice(), BYTE_VOCAB).unwrap().len(), 2000);
}

#[test]
fn tampered_positions_fail_with_line_number() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = SampleSpec { a: 10, target_len: 64, ..SampleSpec::default() };
    let ctx: Vec<u32> = (0..10).map(|i| 97 + i).collect();
    let good = make_sample(&ctx, &desk_cues(), &spec, &mut rng).unwrap();
    let mut bad = good.clone();
    let last = bad.positions.len() - 1;
    bad.positions[last] -= 1;
    let text = format!("{}\n{}\n", sample_to_line(&good), sample_to_line(&bad));
    match read_samples(text.as_bytes(), BYTE_VOCAB) {
        Err(DataError::Validation { line, .. }) => assert_eq!(line, 2),
        other => panic!("unexpected {other:?}"),
    }
    let mut meta_lie = good.clone();
    meta_lie.meta.target_len = 65;
    assert!(validate_sample(&meta_lie, BYTE_VOCAB).is_err());
    let reordered = sample_to_line(&good).replacen("\"tokens\"", "\"tokenz\"", 1);
    assert!(matches!(read_samples(reordered.as_bytes(), BYTE_VOCAB), Err(DataError::Parse { line: 1, .. })));
}

#[test]
fn fixed_cue_policy_uses_one_cue() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = SampleSpec { a: 16, cue_policy: CuePolicy::Fixed("EP_3".into()), ..SampleSpec::default() };
    let ctx = vec![97; 16];
    for _ in 0..50 {
        let s = make_sample(&ctx, &desk_cues(), &spec, &mut rng).unwrap();
        assert_eq!(s.meta.cue_id, "EP_3");
        assert_eq!(&s.tokens[16..], b"End.".map(u32::from).as_slice());
        assert_eq!(s.positions[16..], [1020, 1021, 1022, 1023]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_follow_their_targets(a in 1u64..300, extra in 0u64..2000, wp in 1u32..=1000, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = SampleSpec {
            a,
            target_len: a + 8 + extra,
            prompt_weight: wp as f64 / 1000.0,
            ..SampleSpec::default()
        };
        let ctx: Vec<u32> = (0..a).map(|_| rng.random_range(0..256)).collect();
        let s = make_sample(&ctx, &desk_cues(), &spec, &mut rng).unwrap();
        let b = s.meta.b as usize;
        prop_assert_eq!(s.weights.len(), a as usize + b - 1);
        for (i, &w) in s.weights.iter().enumerate() {
            let target = i + 1;
            prop_assert_eq!(w, if target < a as usize { 1.0 } else { wp as f64 / 1000.0 });
        }
        prop_assert_eq!(*s.positions.last().unwrap(), spec.target_len - 1);
        prop_assert_eq!(s.positions[..a as usize].to_vec(), (0..a).collect::<Vec<_>>());
    }

    #[test]
    fn cue_draws_are_near_uniform(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cues = desk_cues();
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            let id = &cues.sample(&mut rng).id;
            counts[cues.cues().iter().position(|c| &c.id == id).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            prop_assert!((0.30..=0.37).contains(&f), "{:?}", counts);
        }
    }

    #[test]
    fn batches_never_mix_lengths(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = SampleSpec { a: 12, target_len: 256, ..SampleSpec::default() };
        let samples: Vec<TrainingSample> = (0..n)
            .map(|_| {
                let ctx: Vec<u32> = (0..12).map(|_| rng.random_range(0..256)).collect();
                make_sample(&ctx, &desk_cues(), &spec, &mut rng).unwrap()
            })
            .collect();
        let batches = data::step_batches(&samples).unwrap();
        prop_assert_eq!(batches.iter().map(|b| b.len()).sum::<usize>(), n);
        for b in &batches {
            prop_assert!(b.rows().iter().all(|r| r.tokens.len() == b.seq_len()));
        }
    }
}
