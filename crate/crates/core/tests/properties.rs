use proptest::prelude::*;
use textguard_core::autodiff::{layer_norm, softmax_rows, AdamConfig, AdamState, Tensor};
use textguard_core::contextual::{init_bilstm, lstm_step, mean_pool, BiLstmConfig};
use textguard_core::corpus::{parse_tsv, stratified_split, write_tsv, LabelSchema, Language, LabeledPost, Split, Task};
use textguard_core::encoder::{init_model, ForwardMode, TransformerConfig};
use textguard_core::features::fit_tfidf;
use textguard_core::metrics::{confusion, evaluate};
use textguard_core::svm::{hinge_objective, train_svm, LinearModel, SvmParams};
use textguard_core::tokenizer::{train_bpe, TokenSequence, CLS, PAD, SEP};

const TASK_PAIRS: [(&str, &str); 4] = [("NOT", "NONE"), ("HOF", "HATE"), ("HOF", "OFFN"), ("HOF", "PRFN")];

fn posts_strategy(max: usize) -> impl Strategy<Value = Vec<LabeledPost>> {
    prop::collection::vec(("[a-z]{1,8}( [a-z]{1,8}){0,4}", 0..4usize), 1..max).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (text, l))| {
                let (a, b) = TASK_PAIRS[l];
                LabeledPost::new(format!("p{i}"), text, a, b, Language::English, Split::Train).unwrap()
            })
            .collect()
    })
}

fn sequence(body: &[u32], max_len: usize) -> TokenSequence {
    let mut ids = vec![CLS];
    ids.extend_from_slice(body);
    ids.push(SEP);
    let used = ids.len();
    ids.resize(max_len, PAD);
    let mut mask = vec![1u8; used];
    mask.resize(max_len, 0);
    TokenSequence { ids, mask }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn not_count_equals_none_count(posts in posts_strategy(40)) {
        let not = posts.iter().filter(|p| p.task_a == 0).count();
        let none = posts.iter().filter(|p| p.task_b == 0).count();
        prop_assert_eq!(not, none);
    }

    #[test]
    fn stratified_split_partitions(posts in posts_strategy(60), fraction in 0.1f64..0.9, seed in any::<u64>()) {
        if let Ok((a, b)) = stratified_split(&posts, fraction, Task::A, seed) {
            prop_assert_eq!(a.len() + b.len(), posts.len());
            let mut ids: Vec<&str> = a.iter().chain(&b).map(|p| p.id.as_str()).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), posts.len());
        }
    }

    #[test]
    fn tsv_round_trip(posts in posts_strategy(30)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        write_tsv(&path, &posts).unwrap();
        let back = parse_tsv(&std::fs::read_to_string(&path).unwrap(), Language::English, Split::Train).unwrap();
        prop_assert_eq!(back, posts);
    }

    #[test]
    fn bpe_round_trip_and_size(words in prop::collection::vec("[a-f]{1,7}", 1..30), extra in 1usize..40) {
        let text = words.join(" ");
        let chars: std::collections::BTreeSet<char> = text.chars().filter(|c| *c != ' ').collect();
        let target = chars.len() + 5 + extra;
        let vocab = train_bpe(&[text.clone()], target).unwrap();
        prop_assert!(vocab.len() <= target);
        let seq = vocab.encode(&text, 256);
        prop_assert_eq!(vocab.decode(&seq.ids).unwrap(), text.clone());
        // Encoding does not depend on training-corpus order.
        let mut shuffled = words.clone();
        shuffled.reverse();
        let other = train_bpe(&[shuffled.join(" ")], target).unwrap();
        prop_assert_eq!(other.encode(&text, 256), seq);
    }

    #[test]
    fn tfidf_norm_and_scale_invariance(docs in prop::collection::vec(prop::collection::vec(4u32..30, 0..10), 1..12), k in 2usize..4) {
        let seqs: Vec<TokenSequence> = docs.iter().map(|d| sequence(d, 64)).collect();
        let model = fit_tfidf(&seqs, 30).unwrap();
        for (d, s) in docs.iter().zip(&seqs) {
            let v = model.transform(s);
            let n = v.norm();
            prop_assert!(n.abs() < 1e-9 || (n - 1.0).abs() < 1e-9);
            let repeated: Vec<u32> = d.iter().flat_map(|&t| std::iter::repeat_n(t, k)).collect();
            let w = model.transform(&sequence(&repeated, 64));
            for (a, b) in v.to_dense().iter().zip(w.to_dense()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
        // df reconstructed from the nonzero pattern of each training vector.
        let mut df = vec![0usize; 30];
        for s in &seqs {
            for (i, _) in model.transform(s).entries {
                df[i] += 1;
            }
        }
        prop_assert_eq!(df, model.df.clone());
    }

    #[test]
    fn svm_argmax_scale_invariance(w in prop::collection::vec(-5.0f64..5.0, 8), b in prop::collection::vec(-2.0f64..2.0, 2), x in prop::collection::vec(-3.0f64..3.0, 4), c in 0.01f64..100.0) {
        let model = LinearModel { schema: LabelSchema::TASK_A, weights: vec![w[..4].to_vec(), w[4..].to_vec()], bias: b.clone() };
        let mut scaled = model.clone();
        scaled.weights.iter_mut().flatten().for_each(|v| *v *= c);
        scaled.bias.iter_mut().for_each(|v| *v *= c);
        prop_assert_eq!(model.predict(&x).unwrap(), scaled.predict(&x).unwrap());
    }

    #[test]
    fn svm_training_lowers_objective(points in prop::collection::vec((prop::collection::vec(-2.0f64..2.0, 3), any::<bool>()), 4..30)) {
        let mut x: Vec<Vec<f64>> = points.iter().map(|(v, _)| v.clone()).collect();
        let mut y: Vec<usize> = points.iter().map(|&(_, l)| l as usize).collect();
        // Both classes must be present; separate them so the comparison is meaningful.
        x.push(vec![3.0, 0.0, 0.0]);
        y.push(1);
        x.push(vec![-3.0, 0.0, 0.0]);
        y.push(0);
        for (v, &l) in x.iter_mut().zip(&y) {
            v[0] += if l == 1 { 2.0 } else { -2.0 };
        }
        let params = SvmParams { lambda: 0.01, epochs: 100, seed: 3 };
        let model = train_svm(&x, &y, LabelSchema::TASK_A, 3, &params).unwrap();
        let zero = LinearModel::zeros(LabelSchema::TASK_A, 3);
        prop_assert!(hinge_objective(&model, &x, &y, 0.01).unwrap() <= hinge_objective(&zero, &x, &y, 0.01).unwrap());
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..20, data in prop::collection::vec(-15.0f64..15.0, 100)) {
        let t = Tensor::new(&[rows, cols], data[..rows * cols].to_vec()).unwrap();
        let p = softmax_rows(&t).unwrap();
        for r in 0..rows {
            let row = &p.data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0 || cols == 1));
        }
    }

    #[test]
    fn layer_norm_standardizes(data in prop::collection::vec(-50.0f64..50.0, 16), shift in -100.0f64..100.0) {
        let x: Vec<f64> = data.iter().map(|v| v + shift).collect();
        prop_assume!({
            let m = x.iter().sum::<f64>() / 16.0;
            x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0 > 1.0
        });
        let y = layer_norm(&Tensor::new(&[1, 16], x).unwrap(), &Tensor::full(&[16], 1.0), &Tensor::zeros(&[16]), 1e-12).unwrap();
        let mean = y.data().iter().sum::<f64>() / 16.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        prop_assert!(mean.abs() < 1e-6);
        prop_assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn adam_zero_gradient_is_identity(values in prop::collection::vec(-10.0f64..10.0, 1..20), steps in 1usize..5) {
        let mut p = Tensor::new(&[values.len()], values.clone()).unwrap();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
        let zeros = vec![0.0; values.len()];
        for _ in 0..steps {
            adam.update(&mut [&mut p], &[&zeros]).unwrap();
        }
        prop_assert_eq!(p.data(), values.as_slice());
    }

    #[test]
    fn lstm_step_is_bounded(seed in any::<u64>(), x in prop::collection::vec(-5.0f64..5.0, 4), h in prop::collection::vec(-1.0f64..1.0, 3), c in prop::collection::vec(-5.0f64..5.0, 3)) {
        let mut cfg = BiLstmConfig::new(10);
        cfg.embedding_size = 4;
        cfg.hidden_size = 3;
        let w = init_bilstm::<f64>(&cfg, seed).unwrap();
        let (h2, _) = lstm_step(&w.params.forward, &h, &c, &x);
        prop_assert!(h2.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn embedding_width_and_pool_permutation(body in prop::collection::vec(4u32..20, 1..8), seed in 0u64..50) {
        let mut cfg = BiLstmConfig::new(20);
        cfg.embedding_size = 6;
        cfg.hidden_size = 5;
        let w = init_bilstm::<f64>(&cfg, seed).unwrap();
        let e = w.embed_sequence(&sequence(&body, 12)).unwrap();
        prop_assert_eq!(e.shape()[1], 10);
        let n = e.shape()[0];
        let mask: Vec<bool> = (0..n).map(|i| i % 2 == 0 || i == 1).collect();
        let pooled = mean_pool(&e, &mask).unwrap();
        let rows: Vec<Vec<f64>> = (0..n).rev().map(|i| e.row(i).to_vec()).collect();
        let rev_mask: Vec<bool> = mask.iter().rev().copied().collect();
        let reversed = mean_pool(&Tensor::from_rows(&rows).unwrap(), &rev_mask).unwrap();
        for (a, b) in pooled.iter().zip(&reversed) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictions_score_one(gold in prop::collection::vec(0usize..4, 1..50)) {
        let r = evaluate(&confusion(&gold, &gold, LabelSchema::TASK_B).unwrap()).unwrap();
        prop_assert_eq!(r.accuracy, 1.0);
        // Classes absent from gold and predictions score 0 and pull the mean down.
        let present = (0..4).filter(|c| gold.contains(c)).count() as f64;
        prop_assert!((r.macro_f1 - present / 4.0).abs() < 1e-12);
    }

    #[test]
    fn class_relabeling_preserves_summary(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
        let gold: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let r = evaluate(&confusion(&gold, &pred, LabelSchema::TASK_B).unwrap()).unwrap();
        let g2: Vec<usize> = gold.iter().map(|&c| perm[c]).collect();
        let p2: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
        let r2 = evaluate(&confusion(&g2, &p2, LabelSchema::TASK_B).unwrap()).unwrap();
        prop_assert_eq!(r.accuracy, r2.accuracy);
        prop_assert!((r.macro_f1 - r2.macro_f1).abs() < 1e-12);
        for c in 0..4 {
            prop_assert_eq!(r.per_class[c], r2.per_class[perm[c]]);
        }
    }
}

fn tiny_encoder() -> TransformerConfig {
    TransformerConfig {
        num_layers: 2,
        hidden: 8,
        num_heads: 2,
        ff_size: 16,
        max_len: 10,
        vocab_size: 20,
        num_classes: 4,
        dropout: 0.1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn padding_content_never_changes_logits(body in prop::collection::vec(4u32..20, 0..6), junk in prop::collection::vec(0u32..20, 10), seed in 0u64..20) {
        let model = init_model::<f64>(&tiny_encoder(), seed).unwrap();
        let clean = sequence(&body, 10);
        let mut dirty = clean.clone();
        for (i, m) in dirty.mask.iter().enumerate() {
            if *m == 0 {
                dirty.ids[i] = junk[i];
            }
        }
        let (a, _) = model.forward(&[&clean], ForwardMode::Eval).unwrap();
        let (b, _) = model.forward(&[&dirty], ForwardMode::Eval).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_logits(body in prop::collection::vec(4u32..20, 0..8), seed in 0u64..20) {
        let model = init_model::<f32>(&tiny_encoder(), seed).unwrap();
        let back = textguard_core::encoder::EncoderModel::<f32>::from_checkpoint(
            &textguard_core::checkpoint::Checkpoint::from_bytes(&model.to_checkpoint().to_bytes()).unwrap(),
        )
        .unwrap();
        let s = sequence(&body, 10);
        prop_assert_eq!(model.forward(&[&s], ForwardMode::Eval).unwrap().0, back.forward(&[&s], ForwardMode::Eval).unwrap().0);
    }
}
