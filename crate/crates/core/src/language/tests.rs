use super::*;
use crate::datamodel::{Session, TaskInstance, TaskKind, Utterance};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn vocab() -> Vocab {
    Vocab::from_words(
        ["why", "are", "you", "lying", "i", "think", "was", "the", "werewolf", "fine", "ok"]
            .into_iter()
            .map(str::to_string),
    )
}

fn session_with_utterances(token_lists: &[&[&str]]) -> Session {
    let utterances = token_lists
        .iter()
        .enumerate()
        .map(|(k, toks)| Utterance {
            index: k,
            speaker_anon_id: 1,
            start_ms: k as i64 * 3200,
            end_ms: (k + 1) as i64 * 3200,
            tokens: toks.iter().map(|t| t.to_string()).collect(),
        })
        .collect();
    Session {
        session_id: "lang-test".to_string(),
        player_count: 2,
        name_table: BTreeMap::new(),
        tracks: vec![
            crate::datamodel::PlayerTrack { track_id: 0, anon_id: 1, frames: BTreeMap::new() },
            crate::datamodel::PlayerTrack { track_id: 1, anon_id: 2, frames: BTreeMap::new() },
        ],
        utterances,
        frame_interval_ms: 400,
    }
}

fn instance(k: usize, tokens: &[&str], mask_index: usize) -> TaskInstance {
    TaskInstance {
        kind: TaskKind::Sti,
        session_id: "lang-test".to_string(),
        target_index: k,
        masked_tokens: tokens.iter().map(|t| t.to_string()).collect(),
        mask_index,
        occurrence: 0,
        label: None,
    }
}

#[test]
fn vocab_specials_are_stable() {
    let v = vocab();
    assert_eq!(v.id(PAD), PAD_ID);
    assert_eq!(v.id(CLS), CLS_ID);
    assert_eq!(v.id(SEP), SEP_ID);
    assert_eq!(v.id("[MASK]"), MASK_ID);
    assert_eq!(v.id(AGG), AGG_ID);
    assert_eq!(v.id("Player1"), 6);
    assert_eq!(v.id("Player6"), 11);
    assert_eq!(v.id("never-seen-word"), UNK_ID);
}

#[test]
fn vocab_file_round_trips_with_line_number_ids() {
    let dir = tempfile::tempdir().unwrap();
    let v = vocab();
    let path = dir.path().join("vocab.txt");
    v.save(&path).unwrap();
    let loaded = Vocab::load(&path).unwrap();
    assert_eq!(v, loaded);
    let text = std::fs::read_to_string(&path).unwrap();
    let first = text.lines().next().unwrap();
    assert_eq!(first, PAD);
}

#[test]
fn window_is_cls_plus_sep_terminated_utterances() {
    let session = session_with_utterances(&[
        &["fine"],
        &["why", "are", "you", "lying"],
        &["ok"],
    ]);
    let inst = instance(1, &["why", "are", "you", "lying", "(", "To", "[MASK]", ")"], 6);
    let v = vocab();
    let w = build_context(&session, &inst, 5, &v, 128, None).unwrap();
    assert_eq!(w.ids[0], CLS_ID);
    assert_eq!(w.mask_count(), 1);
    assert_eq!(w.ids[w.mask_position], MASK_ID);
    // utterances 0, 1 (target), 2 each end with [SEP]
    assert_eq!(w.segments.len(), 3);
    for &(_, end) in &w.segments {
        assert_eq!(w.ids[end - 1], SEP_ID);
    }
}

#[test]
fn edge_clamp_keeps_only_available_context() {
    let session = session_with_utterances(&[
        &["why", "are", "you", "lying"],
        &["ok"],
        &["fine"],
    ]);
    let inst = instance(0, &["why", "are", "you", "lying", "(", "To", "[MASK]", ")"], 6);
    let v = vocab();
    let w = build_context(&session, &inst, 5, &v, 128, None).unwrap();
    // k=0: no preceding, up to 5 following; target is the first segment.
    assert_eq!(w.segments.len(), 3);
    assert_eq!(w.segments[0].0, 1);
}

#[test]
fn n_zero_is_target_only() {
    let session = session_with_utterances(&[&["fine"], &["you", "lying"], &["ok"]]);
    let inst = instance(1, &["you", "lying", "(", "To", "[MASK]", ")"], 4);
    let v = vocab();
    let w = build_context(&session, &inst, 0, &v, 128, None).unwrap();
    assert_eq!(w.segments.len(), 1);
    assert_eq!(w.ids.len(), 1 + 6 + 1); // [CLS] + target + [SEP]
}

#[test]
fn truncation_drops_outermost_context_first() {
    let session = session_with_utterances(&[
        &["fine", "fine", "fine"],
        &["ok", "ok", "ok"],
        &["you", "lying"],
        &["ok", "ok"],
        &["fine", "fine", "fine", "fine"],
    ]);
    let inst = instance(2, &["you", "lying", "(", "To", "[MASK]", ")"], 4);
    let v = vocab();
    // Budget: [CLS](1) + target(7) = 8; remaining 9 fits u1(4) + u3(3) but not u0/u4.
    let w = build_context(&session, &inst, 5, &v, 17, None).unwrap();
    assert_eq!(w.segments.len(), 3);
    assert!(w.ids.len() <= 17);
    assert_eq!(w.mask_count(), 1);
}

#[test]
fn oversized_target_is_tail_truncated_but_keeps_mask() {
    let long: Vec<&str> = std::iter::repeat("ok").take(30).collect();
    let mut tokens = vec!["[MASK]"];
    tokens.extend(long);
    let session = session_with_utterances(&[&["fine"]]);
    let inst = instance(0, &tokens, 0);
    let v = vocab();
    let w = build_context(&session, &inst, 5, &v, 16, None).unwrap();
    assert!(w.ids.len() <= 16);
    assert_eq!(w.mask_count(), 1);
    assert_eq!(*w.ids.last().unwrap(), SEP_ID);
}

#[test]
fn mask_that_cannot_fit_is_a_window_overflow_error() {
    let mut tokens: Vec<&str> = std::iter::repeat("ok").take(30).collect();
    tokens.push("[MASK]");
    let session = session_with_utterances(&[&["fine"]]);
    let inst = instance(0, &tokens, 30);
    let v = vocab();
    let err = build_context(&session, &inst, 5, &v, 16, None).unwrap_err();
    assert!(err.to_string().contains("window overflow"), "{err}");
}

#[test]
fn permutation_remaps_player_ids_in_target_and_context() {
    let session = session_with_utterances(&[&["Player1", "fine"], &["you", "lying"]]);
    let inst = instance(1, &["you", "lying", "(", "To", "[MASK]", ")"], 4);
    let v = vocab();
    let perm = crate::Permutation::from_map(vec![2, 1]);
    let w = build_context(&session, &inst, 5, &v, 128, None).unwrap();
    let wp = build_context(&session, &inst, 5, &v, 128, Some(&perm)).unwrap();
    let find = |w: &ContextWindow, id: u32| w.ids.iter().position(|&x| x == id);
    let p1 = v.player_id(1);
    let p2 = v.player_id(2);
    assert_eq!(find(&w, p1), find(&wp, p2));
    assert_eq!(find(&w, p2), None);
    assert_eq!(find(&wp, p1), None);
}

fn tiny_setup() -> (Vocab, ParamStore, ModelDims) {
    let v = vocab();
    let dims = ModelDims::fd_tiny();
    let mut store = ParamStore::new();
    init_params(&mut store, 7, &dims, &v);
    (v, store, dims)
}

#[test]
fn output_width_matches_the_shared_channel() {
    let (v, store, dims) = tiny_setup();
    let session = session_with_utterances(&[&["you", "lying"]]);
    let inst = instance(0, &["you", "lying", "(", "To", "[MASK]", ")"], 4);
    let w = build_context(&session, &inst, 5, &v, 128, None).unwrap();
    let mut g = Graph::eval();
    let f = encode_masked_context(&mut g, &store, &w, &dims);
    assert_eq!(g.shape(f), (1, dims.d));
}

#[test]
fn padding_beyond_the_mask_does_not_change_the_feature() {
    let (v, store, dims) = tiny_setup();
    let session = session_with_utterances(&[&["you", "lying"]]);
    let inst = instance(0, &["you", "lying", "(", "To", "[MASK]", ")"], 4);
    let w = build_context(&session, &inst, 5, &v, 128, None).unwrap();
    let mut padded = w.clone();
    padded.ids.extend([PAD_ID; 7]);
    let run = |win: &ContextWindow| {
        let mut g = Graph::eval();
        let f = encode_masked_context(&mut g, &store, win, &dims);
        g.value(f).to_vec()
    };
    let a = run(&w);
    let b = run(&padded);
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn swapping_player_tokens_changes_the_feature() {
    let (v, store, dims) = tiny_setup();
    let session = session_with_utterances(&[&["Player2", "fine"], &["you", "lying"]]);
    let inst = instance(1, &["you", "lying", "(", "To", "[MASK]", ")"], 4);
    let run = |perm: Option<&crate::Permutation>| {
        let w = build_context(&session, &inst, 5, &v, 128, perm).unwrap();
        let mut g = Graph::eval();
        let f = encode_masked_context(&mut g, &store, &w, &dims);
        g.value(f).to_vec()
    };
    let swap = crate::Permutation::from_map(vec![5, 4, 3, 2, 1]).inverse();
    // Player2 <-> Player4 under this map; embeddings differ, so must the feature.
    assert_ne!(run(None), run(Some(&swap)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn exactly_one_mask_survives_every_truncation(
        max_len in 10usize..40,
        n in 0usize..6,
        ctx_len in 1usize..8,
    ) {
        let filler: Vec<&str> = std::iter::repeat("ok").take(ctx_len).collect();
        let lists: Vec<&[&str]> = vec![&filler, &["you", "lying"], &filler, &filler];
        let session = session_with_utterances(&lists);
        let inst = instance(1, &["you", "lying", "(", "To", "[MASK]", ")"], 4);
        let v = vocab();
        if let Ok(w) = build_context(&session, &inst, n, &v, max_len, None) {
            prop_assert_eq!(w.mask_count(), 1);
            prop_assert_eq!(w.ids[w.mask_position], MASK_ID);
            prop_assert!(w.ids.len() <= max_len);
            prop_assert_eq!(w.ids[0], CLS_ID);
        }
    }
}
