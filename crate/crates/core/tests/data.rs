use letlab_core::data::{
    detokenize, empirical_entropy_rate, gen_markov_corpus, load_corpus, read_token_file, sequential_batches,
    tokenize_bytes, write_token_file, Batches, BatchCursor, Corpus, MarkovSpec, Provenance,
};
use proptest::prelude::*;
use std::collections::HashSet;

fn binary_entropy(p: f64) -> f64 {
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

#[test]
fn cycle_source_is_deterministic() {
    let spec = MarkovSpec::cycle(3, 11).unwrap();
    let c = gen_markov_corpus(&spec, 300).unwrap();
    for w in c.tokens().windows(2) {
        assert_eq!(w[1], (w[0] + 1) % 3);
    }
    assert!(spec.entropy_rate().abs() < 1e-12);
    let pi = spec.stationary();
    for p in pi {
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn uniform_source_entropy() {
    let spec = MarkovSpec::uniform(16, 0).unwrap();
    assert!((spec.entropy_rate() - 16f64.ln()).abs() < 1e-12);
    assert!((spec.entropy_rate() - 2.7726).abs() < 1e-4);
}

#[test]
fn two_state_entropy_matches_closed_form_and_sample() {
    let spec = MarkovSpec::two_state(0.9, 5).unwrap();
    let h = spec.entropy_rate();
    assert!((h - binary_entropy(0.1)).abs() < 1e-12);
    assert!((h - 0.3251).abs() < 1e-4);
    let c = gen_markov_corpus(&spec, 1_000_000).unwrap();
    let emp = empirical_entropy_rate(&c, 1);
    assert!((emp - h).abs() / h < 0.02, "{emp} vs {h}");
}

#[test]
fn asymmetric_chain_stationary_distribution() {
    // P = [[0.7, 0.3], [0.6, 0.4]] has π = (2/3, 1/3).
    let spec = MarkovSpec::new(1, vec![vec![0.7, 0.3], vec![0.6, 0.4]], 0).unwrap();
    let pi = spec.stationary();
    assert!((pi[0] - 2.0 / 3.0).abs() < 1e-12 && (pi[1] - 1.0 / 3.0).abs() < 1e-12);
    let expected = 2.0 / 3.0 * binary_entropy(0.3) + 1.0 / 3.0 * binary_entropy(0.4);
    assert!((spec.entropy_rate() - expected).abs() < 1e-12);
}

#[test]
fn order_two_source_frequencies_converge() {
    // Next token is the XOR of the previous two with probability 0.8.
    let rows = (0..4)
        .map(|s| {
            let x = ((s >> 1) ^ (s & 1)) as usize;
            let mut r = vec![0.2, 0.2];
            r[x] = 0.8;
            r
        })
        .collect();
    let spec = MarkovSpec::new(2, rows, 3).unwrap();
    assert!((spec.entropy_rate() - binary_entropy(0.2)).abs() < 1e-12);
    let c = gen_markov_corpus(&spec, 200_000).unwrap();
    let t = c.tokens();
    let hits = (2..t.len()).filter(|&i| t[i] == t[i - 2] ^ t[i - 1]).count();
    let freq = hits as f64 / (t.len() - 2) as f64;
    assert!((freq - 0.8).abs() < 0.01, "{freq}");
}

#[test]
fn generation_is_seeded() {
    let a = gen_markov_corpus(&MarkovSpec::two_state(0.9, 1).unwrap(), 1000).unwrap();
    let b = gen_markov_corpus(&MarkovSpec::two_state(0.9, 1).unwrap(), 1000).unwrap();
    let c = gen_markov_corpus(&MarkovSpec::two_state(0.9, 2).unwrap(), 1000).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.provenance(), Provenance::Synthetic);
    assert!(gen_markov_corpus(&MarkovSpec::two_state(0.9, 1).unwrap(), 1).is_err());
}

#[test]
fn batch_count_and_shape() {
    let c = Corpus::new((0..1025).map(|i| (i % 7) as u32).collect(), 7, Provenance::File).unwrap();
    let mut it = Batches::new(&c, 2, 64, 0).unwrap();
    assert_eq!(it.batches_per_epoch(), 8);
    let b = it.next_batch();
    assert_eq!((b.batch_size, b.seq_len, b.inputs.len(), b.targets.len()), (2, 64, 128, 128));
}

#[test]
fn one_epoch_covers_prefix_without_overlap() {
    let n = 1000;
    let c = Corpus::new((0..n).map(|i| i as u32).collect(), n, Provenance::File).unwrap();
    let (bsz, t) = (3, 10);
    let mut it = Batches::new(&c, bsz, t, 9).unwrap();
    let nb = it.batches_per_epoch();
    assert_eq!(nb, (n - 1) / (bsz * t));
    let mut seen = HashSet::new();
    for _ in 0..nb {
        let b = it.next_batch();
        for (&x, &y) in b.inputs.iter().zip(&b.targets) {
            assert_eq!(y, x + 1);
            assert!(seen.insert(x), "token {x} emitted twice");
        }
    }
    let expected: HashSet<u32> = (0..(bsz * t * nb) as u32).collect();
    assert_eq!(seen, expected);
    assert_eq!(it.cursor(), BatchCursor { epoch: 1, index: 0 });
}

#[test]
fn epochs_reshuffle_and_cursor_resumes() {
    let c = Corpus::new((0..2000).map(|i| (i % 50) as u32 + (i / 50 % 2) as u32).collect(), 51, Provenance::File)
        .unwrap();
    let all: Vec<_> = Batches::new(&c, 4, 16, 3).unwrap().take(90).collect();
    let again: Vec<_> = Batches::new(&c, 4, 16, 3).unwrap().take(90).collect();
    assert_eq!(all, again);
    let other: Vec<_> = Batches::new(&c, 4, 16, 4).unwrap().take(90).collect();
    assert_ne!(all, other);

    let mut it = Batches::new(&c, 4, 16, 3).unwrap();
    for _ in 0..45 {
        it.next_batch();
    }
    let resumed: Vec<_> = Batches::new(&c, 4, 16, 3).unwrap().with_cursor(it.cursor()).take(45).collect();
    assert_eq!(resumed, all[45..]);
}

#[test]
fn sequential_batches_cover_corpus_in_order() {
    let c = Corpus::new((0..101).map(|i| i as u32).collect(), 101, Provenance::File).unwrap();
    let bs = sequential_batches(&c, 3, 10).unwrap();
    let sizes: Vec<_> = bs.iter().map(|b| b.batch_size).collect();
    assert_eq!(sizes, vec![3, 3, 3, 1]);
    let inputs: Vec<u32> = bs.iter().flat_map(|b| b.inputs.clone()).collect();
    assert_eq!(inputs, (0..100).collect::<Vec<u32>>());
}

#[test]
fn token_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toks.bin");
    let c = gen_markov_corpus(&MarkovSpec::two_state(0.9, 1).unwrap(), 500).unwrap();
    write_token_file(&path, &c).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"LETTOK01");
    assert_eq!(bytes.len(), 12 + 4 * 500);
    let back = read_token_file(&path).unwrap();
    assert_eq!(back.tokens(), c.tokens());
    assert_eq!(back.vocab_size(), 2);
    assert_eq!(load_corpus(&path).unwrap().tokens(), c.tokens());

    let raw = dir.path().join("raw.txt");
    std::fs::write(&raw, vec![7u8; 1 << 20]).unwrap();
    assert_eq!(load_corpus(&raw).unwrap().len(), 1_048_576);

    std::fs::write(&path, b"LETTOK01\x02\x00\x00\x00\x05\x00\x00\x00\x00\x00\x00\x00").unwrap();
    let err = read_token_file(&path).unwrap_err().to_string();
    assert!(err.contains("toks.bin"), "{err}");
    assert!(read_token_file(&dir.path().join("missing")).is_err());
}

proptest! {
    #[test]
    fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 2..200)) {
        let c = tokenize_bytes(&bytes).unwrap();
        prop_assert_eq!(detokenize(&c).unwrap(), bytes);
    }

    #[test]
    fn batches_respect_shift_relation(seed in any::<u64>(), bsz in 1usize..5, t in 1usize..20) {
        // Distinct tokens make every corpus position recoverable from its value.
        let mut ids: Vec<u32> = (0..400).collect();
        use rand::{seq::SliceRandom, SeedableRng};
        ids.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let c = Corpus::new(ids, 400, Provenance::File).unwrap();
        let pos: std::collections::HashMap<u32, usize> =
            c.tokens().iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let mut it = Batches::new(&c, bsz, t, seed).unwrap();
        for _ in 0..it.batches_per_epoch() + 2 {
            let b = it.next_batch();
            for w in 0..bsz {
                let start = pos[&b.inputs[w * t]];
                prop_assert_eq!(start % t, 0);
                for j in 0..t {
                    prop_assert_eq!(b.inputs[w * t + j], c.tokens()[start + j]);
                    prop_assert_eq!(b.targets[w * t + j], c.tokens()[start + j + 1]);
                }
            }
        }
    }
}
