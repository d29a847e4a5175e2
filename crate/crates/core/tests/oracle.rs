mod common;

use common::*;
use improbable_core::{count_legal_bigrams, viable_bigrams, CountingPolicy, EncodeMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn legal_bigrams_match_brute_force() {
    for seed in 0..4 {
        let s = synthetic_model(seed, 200);
        assert!(s.model.len() <= 500, "vocabulary too large: {}", s.model.len());
        let expected = brute_force_legal(&s);
        assert!(!expected.is_empty(), "seed {seed} produced no legal bigrams");
        let got = count_legal_bigrams(&s.model, CountingPolicy::default(), EncodeMode::MergeOnly);
        println!("seed {seed}: {} tokens, {} legal bigrams", s.model.len(), got);
        assert_eq!(got, expected.len(), "seed {seed}");
        let mut listed: Vec<(u32, u32)> = viable_bigrams(&s.model, CountingPolicy::default(), EncodeMode::MergeOnly)
            .iter()
            .map(|c| (c.prefix.0, c.suffix.0))
            .collect();
        listed.sort_unstable();
        let mut expected = expected;
        expected.sort_unstable();
        assert_eq!(listed, expected, "seed {seed}");
    }
}

#[test]
fn encoder_matches_naive_bpe() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..3 {
        let s = synthetic_model(seed, 200);
        let vocab = vocab_map(&s.model);
        for _ in 0..500 {
            let text = if rand::Rng::random_bool(&mut rng, 0.5) {
                random_text(&mut rng, 12)
            } else {
                // mostly alphabet characters so merges actually fire
                let chars: Vec<char> = ALPHABET.chars().collect();
                (0..rand::Rng::random_range(&mut rng, 0..16))
                    .map(|_| chars[rand::Rng::random_range(&mut rng, 0..chars.len())])
                    .collect()
            };
            let got: Vec<u32> = s
                .model
                .encode_with(text.as_bytes(), EncodeMode::MergeOnly)
                .unwrap()
                .iter()
                .map(|t| t.0)
                .collect();
            assert_eq!(got, naive_encode(&s.merges, &vocab, text.as_bytes()), "{text:?}");
        }
    }
}

#[test]
fn planted_worked_example_is_legal() {
    let s = synthetic_model(0, 200);
    let p = s.model.id_of(&[0xE3, 0x82, 0xB5, 0xE3, 0x83, 0xBC, 0xE3, 0x83]).unwrap();
    let q = s.model.id_of(&[0x9F, 0xE8, 0x83, 0xBD]).unwrap();
    let legal = brute_force_legal(&s);
    let natural = s.model.encode_with("サーミ能".as_bytes(), EncodeMode::MergeOnly).unwrap();
    assert_eq!(legal.contains(&(p.0, q.0)), natural == [p, q]);
}
