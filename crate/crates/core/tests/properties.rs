use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use clips::eval::{retrieval_metrics, Pairing};
use clips::model::{build_combination_mask, ClipsModel, ModelConfig};
use clips::nn::Session;
use clips::objectives::{caption_loss, info_nce};
use clips::tensor::Matrix;
use clips::text::{
    block_mask, pad_to_length, random_mask, subcaption_mask, subcaption_mask_trace, truncate, Reduction,
    SentenceSplit, TokenId, TokenSequence,
};

fn split_strategy() -> impl Strategy<Value = SentenceSplit> {
    prop::collection::vec(prop::collection::vec(4u32..200, 1..10), 1..8).prop_map(SentenceSplit::new)
}

fn is_subsequence(sub: &[TokenId], seq: &[TokenId]) -> bool {
    let mut it = seq.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

fn contains_block(haystack: &[TokenId], needle: &[TokenId]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

proptest! {
    #[test]
    fn reductions_respect_length_and_order(split in split_strategy(), l in 0usize..80, seed in any::<u64>()) {
        let src = split.concat();
        let want = l.min(src.len());
        let t = truncate(&src, l);
        prop_assert_eq!(&t[..], &src[..want]);
        let r = random_mask(&src, l, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(r.len(), want);
        prop_assert!(is_subsequence(&r, &src));
        let b = block_mask(&src, l, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(b.len(), want);
        prop_assert!(contains_block(&src, &b));
        let s = subcaption_mask(&split, l, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(s.len(), want);
        prop_assert!(s.iter().all(|x| src.contains(x)));
    }

    #[test]
    fn subcaption_is_a_prefix_of_whole_drawn_sentences(split in split_strategy(), l in 1usize..80, seed in any::<u64>()) {
        let tr = subcaption_mask_trace(&split, l, &mut ChaCha8Rng::seed_from_u64(seed));
        let whole: Vec<TokenId> = tr.drawn.iter().flat_map(|&d| split.segments()[d].clone()).collect();
        prop_assert!(whole.starts_with(&tr.tokens));
        let mut sorted = tr.drawn.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), tr.drawn.len());
    }

    #[test]
    fn full_reduction_is_identity(split in split_strategy(), seed in any::<u64>()) {
        let out = Reduction::Full.apply(&split, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(out, split.concat());
    }

    #[test]
    fn combination_mask_structure(lc in 1usize..24, ll in 1usize..24) {
        let m = build_combination_mask(lc, ll).unwrap();
        for i in 0..lc + ll {
            for j in 0..lc + ll {
                // every row can see the whole condition block; nothing sees a later learnable token
                if j < lc {
                    prop_assert!(m.allowed(i, j));
                } else if j > i {
                    prop_assert!(!m.allowed(i, j));
                } else {
                    prop_assert_eq!(m.allowed(i, j), i >= lc);
                }
            }
        }
    }

    #[test]
    fn retrieval_ignores_monotone_rescaling(
        vals in prop::collection::vec(-1.0f64..1.0, 64),
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let sim = Matrix::from_vec(8, 8, vals);
        let warped = sim.map(|x| (a * x + b).exp());
        let p = Pairing::identity(8);
        prop_assert_eq!(retrieval_metrics(&sim, &p).unwrap(), retrieval_metrics(&warped, &p).unwrap());
    }

    #[test]
    fn info_nce_invariant_to_joint_permutation(
        vals in prop::collection::vec(-1.0f64..1.0, 48),
        rot in 1usize..6,
    ) {
        let img = Matrix::from_vec(6, 4, vals[..24].to_vec()).l2_normalize_rows();
        let txt = Matrix::from_vec(6, 4, vals[24..].to_vec()).l2_normalize_rows();
        let perm = |m: &Matrix<f64>| Matrix::from_fn(6, 4, |r, c| m.get((r + rot) % 6, c));
        let a = info_nce(&img, &txt, 0.1).unwrap();
        let b = info_nce(&perm(&img), &perm(&txt), 0.1).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn caption_loss_ignores_pad_positions(valid in 1usize..8, junk in -50.0f64..50.0, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<TokenId> = (0..valid).map(|_| rng.gen_range(4..20)).collect();
        let t = pad_to_length(&ids, 8, 0);
        let logits = Matrix::from_fn(8, 20, |_, _| rng.gen_range(-3.0..3.0));
        let mut dirty = logits.clone();
        for p in valid..8 {
            dirty.row_mut(p).iter_mut().for_each(|x| *x += junk);
        }
        prop_assert_eq!(caption_loss(&logits, &t).unwrap(), caption_loss(&dirty, &t).unwrap());
    }
}

fn text_model() -> ClipsModel<f64> {
    let cfg = ModelConfig {
        image_size: 16,
        embed_dim: 16,
        n_heads: 2,
        n_layers_vision: 1,
        n_layers_text: 2,
        n_layers_decoder: 1,
        input_token_len: 12,
        output_token_len: 4,
        n_learnable_tokens: 4,
        ..ModelConfig::default()
    };
    ClipsModel::new(cfg, 3).unwrap()
}

fn embed(model: &ClipsModel<f64>, seqs: &[TokenSequence]) -> Matrix<f64> {
    let mut s = Session::eval(model.params());
    let f = model.encode_text(&mut s, seqs).unwrap();
    let e = model.embed_text(&mut s, &f);
    s.graph.value(e).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn text_embedding_ignores_padding_and_batchmates(
        ids in prop::collection::vec(4u32..48, 1..12),
        other in prop::collection::vec(4u32..48, 1..12),
    ) {
        let model = text_model();
        let alone = embed(&model, &[pad_to_length(&ids, 12, 0)]);
        let with_other = embed(&model, &[pad_to_length(&ids, 12, 0), pad_to_length(&other, 12, 0)]);
        let diff = alone.row(0).iter().zip(with_other.row(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-12, "difference {}", diff);
    }
}
