use super::*;
use proptest::prelude::*;

fn word(w: &str) -> RawToken {
    RawToken::Word(w.to_string())
}

fn name(n: &str) -> RawToken {
    RawToken::Name(n.to_string())
}

fn toks(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

fn track(anon_id: u8) -> PlayerTrack {
    let mut frames = BTreeMap::new();
    let mut kp = Keypoints17::invalid();
    kp.parts[NOSE] = [0.5, 0.5];
    kp.valid[NOSE] = true;
    frames.insert(0, kp);
    PlayerTrack { track_id: anon_id as i64 * 100, anon_id, frames }
}

fn raw_session() -> RawSession {
    RawSession {
        session_id: "raw-1".to_string(),
        roster: vec!["David".into(), "Alice".into(), "Thomas".into()],
        tracks: vec![track(1), track(2), track(3)],
        utterances: vec![
            RawUtterance {
                index: 0,
                speaker_name: "Alice".into(),
                start_ms: 0,
                end_ms: 3200,
                tokens: vec![word("i"), word("think"), name("David"), word("is"), word("lying")],
            },
            RawUtterance {
                index: 1,
                speaker_name: "David".into(),
                start_ms: 3200,
                end_ms: 6400,
                tokens: vec![word("why"), word("are"), word("you"), word("lying")],
            },
        ],
        frame_interval_ms: 400,
    }
}

#[test]
fn anonymize_maps_roster_order_to_slots() {
    let s = anonymize(&raw_session()).unwrap();
    assert_eq!(s.name_table["David"], 1);
    assert_eq!(s.name_table["Alice"], 2);
    assert_eq!(s.name_table["Thomas"], 3);
    assert_eq!(s.utterances[0].tokens, toks(&["i", "think", "Player1", "is", "lying"]));
    assert_eq!(s.utterances[0].speaker_anon_id, 2);
    s.validate().unwrap();
}

#[test]
fn anonymize_without_names_is_token_identical() {
    let mut raw = raw_session();
    raw.utterances.truncate(1);
    raw.utterances[0].tokens = vec![word("no"), word("names"), word("here")];
    let s = anonymize(&raw).unwrap();
    assert_eq!(s.utterances[0].tokens, toks(&["no", "names", "here"]));
    assert_eq!(s.name_table.len(), 3);
}

#[test]
fn anonymize_round_trips_through_name_table() {
    let raw = raw_session();
    let s = anonymize(&raw).unwrap();
    let back = deanonymize(&s).unwrap();
    assert_eq!(back.roster, raw.roster);
    for (a, b) in raw.utterances.iter().zip(back.utterances.iter()) {
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.speaker_name, b.speaker_name);
    }
}

#[test]
fn unknown_name_is_an_alignment_error_naming_token_and_index() {
    let mut raw = raw_session();
    raw.utterances[1].tokens.push(name("Zoe"));
    let err = anonymize(&raw).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("Zoe") && msg.contains('1'), "{msg}");
    assert_eq!(err.exit_code(), 3);
}

fn session_for_instances() -> (Session, LabelTable) {
    let mut raw = raw_session();
    raw.utterances = vec![
        RawUtterance {
            index: 0,
            speaker_name: "Alice".into(),
            start_ms: 0,
            end_ms: 3200,
            tokens: vec![word("why"), word("are"), word("you"), word("lying")],
        },
        RawUtterance {
            index: 1,
            speaker_name: "David".into(),
            start_ms: 3200,
            end_ms: 6400,
            tokens: vec![word("i"), word("think"), word("he"), word("was"), word("the"), word("Werewolf")],
        },
        RawUtterance {
            index: 2,
            speaker_name: "Alice".into(),
            start_ms: 6400,
            end_ms: 9600,
            tokens: vec![word("i"), word("switched"), name("David"), word("with"), word("somebody")],
        },
    ];
    let session = anonymize(&raw).unwrap();
    let mut labels = LabelTable::new();
    labels.insert(0, TaskKind::Sti, 0, Gold::Known(Label::Player(3)));
    labels.insert(1, TaskKind::Pcr, 0, Gold::Known(Label::Player(2)));
    (session, labels)
}

#[test]
fn sti_instances_append_the_to_mask_suffix() {
    let (session, labels) = session_for_instances();
    let instances = build_task_instances(&session, TaskKind::Sti, &labels);
    assert_eq!(instances.len(), 1);
    let inst = &instances[0];
    assert_eq!(inst.masked_tokens, toks(&["why", "are", "you", "lying", "(", "To", "[MASK]", ")"]));
    assert_eq!(inst.label, Some(Label::Player(3)));
    assert_eq!(inst.mask_count(), 1);
    assert_eq!(inst.masked_tokens[inst.mask_index], MASK_TOKEN);
}

#[test]
fn pcr_instances_replace_the_pronoun() {
    let (session, labels) = session_for_instances();
    let instances = build_task_instances(&session, TaskKind::Pcr, &labels);
    assert_eq!(instances.len(), 1);
    let inst = &instances[0];
    assert_eq!(inst.masked_tokens, toks(&["i", "think", "[MASK]", "was", "the", "Werewolf"]));
    assert_eq!(inst.label, Some(Label::Player(2)));
    assert_eq!(inst.mask_count(), 1);
}

#[test]
fn mpp_instances_mask_the_mention_and_self_label() {
    let (session, labels) = session_for_instances();
    let instances = build_task_instances(&session, TaskKind::Mpp, &labels);
    assert_eq!(instances.len(), 1);
    let inst = &instances[0];
    assert_eq!(inst.masked_tokens, toks(&["i", "switched", "[MASK]", "with", "somebody"]));
    assert_eq!(inst.label, Some(Label::Player(1)));
}

#[test]
fn unlabeled_pronouns_yield_no_instance() {
    let (session, _) = session_for_instances();
    let instances = build_task_instances(&session, TaskKind::Pcr, &LabelTable::new());
    assert!(instances.is_empty());
}

#[test]
fn unknown_gold_keeps_instance_but_marks_it() {
    let (session, mut labels) = session_for_instances();
    labels.insert(0, TaskKind::Sti, 0, Gold::Unknown);
    let instances = build_task_instances(&session, TaskKind::Sti, &labels);
    assert_eq!(instances.len(), 1);
    assert!(instances[0].label_is_unknown());
}

#[test]
fn identity_permutation_changes_nothing() {
    let (session, labels) = session_for_instances();
    let inst = &build_task_instances(&session, TaskKind::Sti, &labels)[0];
    let positions = [[0.1, 0.2]; MAX_PLAYERS];
    let perm = Permutation::identity(3);
    let (out, pos, spk) = apply_permutation(inst, &positions, 2, &perm);
    assert_eq!(&out, inst);
    assert_eq!(pos, positions);
    assert_eq!(spk, 2);
}

#[test]
fn cycle_permutation_relabels_consistently() {
    let (session, labels) = session_for_instances();
    let mut inst = build_task_instances(&session, TaskKind::Sti, &labels)[0].clone();
    inst.masked_tokens.insert(0, player_token(1));
    inst.label = Some(Label::Player(1));
    let perm = Permutation::from_map(vec![3, 1, 2]); // 1->3, 2->1, 3->2
    let mut positions = [[0.0, 0.0]; MAX_PLAYERS];
    positions[0] = [1.0, 1.0];
    positions[1] = [2.0, 2.0];
    positions[2] = [3.0, 3.0];
    let (out, pos, spk) = apply_permutation(&inst, &positions, 2, &perm);
    assert_eq!(out.label, Some(Label::Player(3)));
    assert_eq!(out.masked_tokens[0], player_token(3));
    assert_eq!(pos[2], [1.0, 1.0]); // slot 1's value now sits at slot 3
    assert_eq!(pos[0], [2.0, 2.0]);
    assert_eq!(spk, 1);
}

#[test]
fn everyone_label_is_fixed_under_permutation() {
    let perm = Permutation::from_map(vec![2, 3, 1]);
    assert_eq!(perm.apply_label(Label::Everyone), Label::Everyone);
}

#[test]
#[should_panic(expected = "not bijective")]
fn non_bijective_mapping_panics() {
    Permutation::from_map(vec![1, 1, 3]);
}

#[test]
fn split_is_deterministic_and_partitions() {
    let ids: Vec<String> = (0..10).map(|i| format!("s{i:02}")).collect();
    let (train, test) = split_sessions(&ids, 0.2, 99).unwrap();
    assert_eq!(train.len(), 8);
    assert_eq!(test.len(), 2);
    let again = split_sessions(&ids, 0.2, 99).unwrap();
    assert_eq!((train.clone(), test.clone()), again);
    let mut all: Vec<String> = train.iter().chain(test.iter()).cloned().collect();
    all.sort();
    assert_eq!(all, ids);
}

#[test]
fn split_of_151_sessions_at_a_fifth_holds_out_about_30() {
    let ids: Vec<String> = (0..151).map(|i| format!("s{i:03}")).collect();
    let (_, test) = split_sessions(&ids, 0.2, 1).unwrap();
    assert_eq!(test.len(), 30);
}

#[test]
fn bad_fraction_is_a_config_error() {
    let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
    assert_eq!(split_sessions(&ids, 0.0, 1).unwrap_err().exit_code(), 2);
    assert_eq!(split_sessions(&ids, 1.0, 1).unwrap_err().exit_code(), 2);
}

#[test]
fn session_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let session = anonymize(&raw_session()).unwrap();
    let path = dir.path().join("s.json");
    save_session(&session, &path).unwrap();
    let loaded = load_session(&path).unwrap();
    assert_eq!(loaded.session_id, session.session_id);
    assert_eq!(loaded.name_table, session.name_table);
    assert_eq!(loaded.utterances, session.utterances);
    assert_eq!(loaded.tracks.len(), session.tracks.len());
    for (a, b) in loaded.tracks.iter().zip(session.tracks.iter()) {
        assert_eq!(a.frames, b.frames);
    }
    // Serialization is stable byte for byte.
    assert_eq!(session_to_json_bytes(&session), session_to_json_bytes(&loaded));
}

proptest! {
    #[test]
    fn permutations_form_a_group_action(p in 2u8..=6, seed in 0u64..1000) {
        let mut r1 = crate::rng::stream(seed, "prop/perm1");
        let mut r2 = crate::rng::stream(seed, "prop/perm2");
        let a = Permutation::random(p, &mut r1);
        let b = Permutation::random(p, &mut r2);
        let composed = b.compose(&a);
        for slot in 1..=p {
            prop_assert_eq!(composed.apply_slot(slot), b.apply_slot(a.apply_slot(slot)));
        }
        // Inverse undoes.
        let inv = a.inverse();
        for slot in 1..=p {
            prop_assert_eq!(inv.apply_slot(a.apply_slot(slot)), slot);
        }
    }

    #[test]
    fn permutation_round_trip_restores_instances(seed in 0u64..500) {
        let (session, labels) = session_for_instances();
        let inst = build_task_instances(&session, TaskKind::Sti, &labels)[0].clone();
        let mut r = crate::rng::stream(seed, "prop/perm3");
        let perm = Permutation::random(3, &mut r);
        let positions = [[0.3, 0.1], [0.2, 0.9], [0.7, 0.7], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        let (p1, pos1, spk1) = apply_permutation(&inst, &positions, 2, &perm);
        let (p2, pos2, spk2) = apply_permutation(&p1, &pos1, spk1, &perm.inverse());
        prop_assert_eq!(p2, inst);
        prop_assert_eq!(pos2, positions);
        prop_assert_eq!(spk2, 2);
    }

    #[test]
    fn split_always_partitions(n in 2usize..40, frac in 0.05f64..0.95, seed in 0u64..100) {
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let (train, test) = split_sessions(&ids, frac, seed).unwrap();
        prop_assert!(!train.is_empty() && !test.is_empty());
        let mut all: Vec<String> = train.iter().chain(test.iter()).cloned().collect();
        all.sort();
        let mut want = ids.clone();
        want.sort();
        prop_assert_eq!(all, want);
    }
}
