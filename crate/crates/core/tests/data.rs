use mmdiff::data::{deserialize_shard, generate_sample, load_dataset, registry, serialize_shard, write_dataset};

#[test]
fn identity_coverage_is_uniform_within_three_sigma() {
    let n_ids = registry().len();
    let mut counts = vec![0usize; n_ids];
    let mut total = 0usize;
    for seed in 0..10_000u64 {
        for e in generate_sample(seed, 1).unwrap().entities {
            counts[e.spec.identity] += 1;
            total += 1;
        }
    }
    let p = 1.0 / n_ids as f64;
    let mean = total as f64 * p;
    let sigma = (total as f64 * p * (1.0 - p)).sqrt();
    for (id, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 3.0 * sigma, "identity {id}: {c} draws, expected {mean:.1} ± {:.1}", 3.0 * sigma);
    }
}

#[test]
fn thousand_sample_shard_round_trips() {
    let samples: Vec<_> = (0..1000u64).map(|s| generate_sample(s, 1 + (s % 2) as usize).unwrap()).collect();
    let bytes = serialize_shard(&samples);
    assert_eq!(deserialize_shard(&bytes).unwrap(), samples);

    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &samples, 256).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), samples);
}
