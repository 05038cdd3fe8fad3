use phenoscribe::cohort::Task;
use phenoscribe::evalkit::balanced_accuracy_at;
use phenoscribe::fusion::loss::MtlLossConfig;
use phenoscribe::landmarks::Symbol;
use phenoscribe::lm::lora::{self, merged_weight, plain_forward};
use phenoscribe::lm::vocab::{self, Token, BOS, EOS, PAD, SEP, VOCAB_SIZE};
use phenoscribe::lm::{AlignedPair, ClassExample, LmConfig, LmError, LmStage, TinyLm};
use phenoscribe::nn::{Graph, Linear, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> LmConfig {
    LmConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, prompt_len: 4, ..LmConfig::default() }
}

fn logits(lm: &TinyLm, ids: &[usize]) -> Tensor {
    let mut g = Graph::inference();
    let z = lm.lm_logits(&mut g, ids).unwrap();
    g.value(z).clone()
}

fn snapshot(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn changed(before: &[(String, Vec<u64>)], after: &[(String, Vec<u64>)]) -> Vec<String> {
    before
        .iter()
        .zip(after)
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0.clone())
        .collect()
}

const WORDS: [&str; 10] = ["sun", "tree", "apple", "stone", "river", "cold", "bright", "echo", "moss", "ink"];

/// Landmarks that follow from the words by a fixed rule, so the mapping is
/// learnable from the transcript alone.
fn rule_pairs(n: usize, seed: u64) -> Vec<AlignedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let words: Vec<&str> = (0..2).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            let landmarks = words
                .iter()
                .flat_map(|w| {
                    let mut s = vec![Symbol::GlottisOn];
                    if !w.starts_with(['a', 'e', 'i', 'o', 'u']) {
                        s.insert(0, Symbol::BurstOn);
                    }
                    s.push(Symbol::GlottisOff);
                    s
                })
                .collect();
            AlignedPair { transcript: words.join(" "), landmarks }
        })
        .collect()
}

#[test]
fn vocab_ids_are_dense_and_invertible() {
    let all: Vec<_> = vocab::all_tokens().collect();
    assert_eq!(all.len(), VOCAB_SIZE);
    for (id, tok) in all {
        assert_eq!(tok.id(), id);
    }
    assert_eq!(Token::from_id(VOCAB_SIZE), None);
    let specials = [BOS, EOS, SEP, PAD];
    for s in Symbol::ALL {
        let id = vocab::landmark_id(s);
        assert!(vocab::is_landmark(id));
        assert!(!specials.contains(&id));
    }
    assert!(!vocab::is_landmark(usize::from(b'g')));
    let text = "i feel ôkay, mostly.";
    assert_eq!(vocab::decode_text(&vocab::encode_text(text)), text);
}

#[test]
fn zero_initialized_adapter_leaves_outputs_unchanged() {
    let lm = TinyLm::new(small_cfg()).unwrap();
    let ids = lm.base_ids("the weather is fine");
    let before = logits(&lm, &ids);
    let mut adapted = lm.clone();
    adapted.attach_lora().unwrap();
    assert!(adapted.has_lora());
    assert_eq!(adapted.adapted_layers().len(), 2);
    assert_eq!(logits(&adapted, &ids).data(), before.data());
}

fn assert_merge_equivalent(lm: &TinyLm, rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for layer in lm.adapted_layers() {
        let merged = merged_weight(&lm.store, layer);
        for _ in 0..100 {
            let x = Tensor::new(1, layer.d_in, (0..layer.d_in).map(|_| rng.random_range(-2.0..2.0)).collect());
            let mut g = Graph::inference();
            let xv = g.constant(x.clone());
            let y = layer.forward(&mut g, &lm.store, xv).unwrap();
            let plain = plain_forward(&lm.store, &merged, layer.b, &x);
            for (a, b) in g.value(y).data().iter().zip(plain.data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst < 1e-5, "merge mismatch {worst}");
    worst
}

#[test]
fn merged_weight_matches_adapter_before_and_after_training() {
    let mut lm = TinyLm::new(small_cfg()).unwrap();
    lm.attach_lora().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_merge_equivalent(&lm, &mut rng);
    let b_before = lm.store.checksum("lora.");
    lm.crossmodal_finetune(&rule_pairs(8, 1), 2).unwrap();
    assert_ne!(lm.store.checksum("lora."), b_before, "training moved the adapters");
    assert_merge_equivalent(&lm, &mut rng);
}

#[test]
fn adapter_rank_is_bounded_by_layer_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let mut layer = Linear::new(&mut store, "w", 4, 3, true, &mut rng);
    let err = lora::attach(&mut store, &mut layer, "lora.w", 4, 8.0, &mut rng).unwrap_err();
    assert!(matches!(err, LmError::RankTooLarge { rank: 4, d_in: 4, d_out: 3 }));
    lora::attach(&mut store, &mut layer, "lora.w", 0, 8.0, &mut rng).unwrap();
    assert!(layer.lora.is_none());
    lora::attach(&mut store, &mut layer, "lora.w", 3, 6.0, &mut rng).unwrap();
    assert_eq!(layer.lora.as_ref().unwrap().scaling(), 2.0);

    let mut lm = TinyLm::new(LmConfig { lora_rank: 0, ..small_cfg() }).unwrap();
    lm.attach_lora().unwrap();
    assert!(!lm.has_lora());
    let mut lm = TinyLm::new(LmConfig { lora_rank: 17, ..small_cfg() }).unwrap();
    assert!(matches!(lm.attach_lora(), Err(LmError::RankTooLarge { .. })));
}

#[test]
fn next_token_logits_ignore_future_tokens() {
    let lm = TinyLm::new(small_cfg()).unwrap();
    let a = lm.base_ids("abcdefgh");
    let mut b = a.clone();
    b[5] = usize::from(b'z');
    let (la, lb) = (logits(&lm, &a), logits(&lm, &b));
    for r in 0..5 {
        assert_eq!(la.row_slice(r), lb.row_slice(r), "row {r}");
    }
    assert_ne!(la.row_slice(5), lb.row_slice(5));
}

#[test]
fn empty_inputs_are_rejected() {
    let mut lm = TinyLm::new(small_cfg()).unwrap();
    assert!(matches!(lm.pretrain(&[], 1), Err(LmError::EmptyCorpus)));
    assert!(matches!(lm.crossmodal_finetune(&rule_pairs(2, 0), 1), Err(LmError::NoAdapter)));
    assert!(matches!(lm.embed(&[]), Err(LmError::EmptyInput)));
    let cfg = MtlLossConfig::new([1.0; 3], 0.25);
    assert!(matches!(lm.p_tune(&[], 1, &cfg), Err(LmError::EmptyCorpus)));
}

#[test]
fn each_stage_moves_only_its_own_parameters() {
    let mut lm = TinyLm::new(small_cfg()).unwrap();
    let before = snapshot(&lm.store);
    lm.pretrain(&["hello there".to_string()], 1).unwrap();
    let moved = changed(&before, &snapshot(&lm.store));
    assert!(!moved.is_empty());
    assert!(moved.iter().all(|n| n.starts_with("lm.")), "{moved:?}");

    lm.attach_lora().unwrap();
    let before = snapshot(&lm.store);
    lm.crossmodal_finetune(&rule_pairs(1, 5), 1).unwrap();
    let moved = changed(&before, &snapshot(&lm.store));
    assert!(!moved.is_empty());
    assert!(moved.iter().all(|n| n.starts_with("lora.")), "{moved:?}");

    let before = snapshot(&lm.store);
    let ex = ClassExample { ids: lm.classification_ids("i am fine", None), labels: [true, false, true] };
    lm.p_tune(&[ex], 1, &MtlLossConfig::new([1.0; 3], 0.25)).unwrap();
    let moved = changed(&before, &snapshot(&lm.store));
    assert!(moved.contains(&"prompt.emb".to_string()));
    assert!(moved.iter().all(|n| n.starts_with("prompt.") || n.starts_with("clf.")), "{moved:?}");
}

#[test]
fn crossmodal_finetuning_learns_a_transcript_to_landmark_rule() {
    let cfg = LmConfig { d_model: 32, n_heads: 2, d_ff: 64, n_layers: 1, lora_rank: 8, lr_lora: 1e-2, ..LmConfig::default() };
    let pairs = rule_pairs(50, 11);
    let mut lm = TinyLm::new(cfg).unwrap();
    let corpus: Vec<String> = pairs.iter().map(|p| p.transcript.clone()).collect();
    lm.pretrain(&corpus, 3).unwrap();
    lm.attach_lora().unwrap();
    let before = lm.landmark_accuracy(&pairs).unwrap();
    let losses = lm.crossmodal_finetune(&pairs, 12).unwrap();
    let after = lm.landmark_accuracy(&pairs).unwrap();
    assert!(losses.last() < losses.first());
    assert!(after > 0.8, "accuracy {before} -> {after}");
}

#[test]
fn prompt_tuning_separates_clearly_labelled_visits() {
    let cfg = LmConfig { lr_ptune: 1e-2, ..small_cfg() };
    let mut lm = TinyLm::new(cfg).unwrap();
    let data: Vec<ClassExample> = (0..40)
        .map(|i| {
            let pos = i % 2 == 0;
            let text = if pos { "i feel hopeless and tired" } else { "i feel great and rested" };
            ClassExample { ids: lm.classification_ids(&format!("{text} {i}"), None), labels: [pos, pos, !pos] }
        })
        .collect();
    lm.p_tune(&data, 15, &MtlLossConfig::new([1.0; 3], 0.5)).unwrap();
    for t in Task::ALL {
        let k = t.index();
        let scores: Vec<f64> = data.iter().map(|e| lm.class_probs(&e.ids).unwrap()[k]).collect();
        let labels: Vec<bool> = data.iter().map(|e| e.labels[k]).collect();
        let ba = balanced_accuracy_at(&scores, &labels, 0.5);
        assert!(ba > 0.9, "{t}: {ba}");
    }
}

#[test]
fn prompt_stage_parameter_count() {
    for (p, d) in [(4, 16), (8, 32), (0, 8)] {
        let lm = TinyLm::new(LmConfig { prompt_len: p, d_model: d, n_heads: 2, ..small_cfg() }).unwrap();
        assert_eq!(lm.stage_param_count(LmStage::Ptune), p * d + 3 * d + 3);
    }
}

#[test]
fn embeddings_are_deterministic_and_input_dependent() {
    let a = TinyLm::new(small_cfg()).unwrap();
    let b = TinyLm::new(small_cfg()).unwrap();
    let x = a.classification_ids("nothing much", Some(&[Symbol::GlottisOn, Symbol::GlottisOff]));
    let y = a.classification_ids("nothing much", None);
    let ex = a.embed(&x).unwrap();
    assert_eq!(ex.len(), 16);
    assert!(ex.iter().all(|v| v.is_finite()));
    assert_eq!(ex, b.embed(&x).unwrap());
    assert_ne!(ex, a.embed(&y).unwrap());
    let other = TinyLm::new(LmConfig { seed: 1, ..small_cfg() }).unwrap();
    assert_ne!(ex, other.embed(&x).unwrap());
}

#[test]
fn stage_checkpoints_restore_trained_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = TinyLm::new(small_cfg()).unwrap();
    base.pretrain(&["abc def".to_string()], 1).unwrap();
    let mut tuned = base.clone();
    tuned.attach_lora().unwrap();
    tuned.crossmodal_finetune(&rule_pairs(4, 2), 1).unwrap();
    let path = dir.path().join("crossmodal.phsc");
    tuned.save_stage(LmStage::Crossmodal, &path).unwrap();

    let mut restored = base.clone();
    let ck = restored.load_stage(&path).unwrap();
    assert!(ck.params.iter().all(|(n, _, _)| n.starts_with("lora.")));
    let ids = tuned.crossmodal_ids(&rule_pairs(1, 9)[0]).0;
    let (a, b) = (logits(&tuned, &ids), logits(&restored, &ids));
    let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    // checkpoints store f32 values
    assert!(worst < 1e-4, "{worst}");
    assert!(matches!(restored.load_stage(&dir.path().join("missing.phsc")), Err(LmError::Nn(_))));
}
