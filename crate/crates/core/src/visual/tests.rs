use super::*;
use crate::datamodel::{Keypoints17, PlayerTrack, Session, TaskInstance, TaskKind, Utterance};
use crate::presets::ModelDims;
use std::collections::BTreeMap;

const DT: TimestampMs = 400;

/// Static session: P players with fixed noses, full skeleton on the speaker.
fn static_session(noses: &[[f64; 2]], utterance_count: usize) -> Session {
    let p = noses.len() as u8;
    let ticks = utterance_count * 8;
    let tracks = noses
        .iter()
        .enumerate()
        .map(|(i, nose)| {
            let mut frames = BTreeMap::new();
            for tick in 0..ticks {
                let mut kp = Keypoints17::invalid();
                for part in 0..17 {
                    kp.parts[part] = [nose[0] + 0.001 * part as f64, nose[1] + 0.002 * part as f64];
                    kp.valid[part] = true;
                }
                frames.insert(tick as TimestampMs * DT, kp);
            }
            PlayerTrack { track_id: i as i64, anon_id: i as u8 + 1, frames }
        })
        .collect();
    let utterances = (0..utterance_count)
        .map(|k| Utterance {
            index: k,
            speaker_anon_id: (k % noses.len()) as u8 + 1,
            start_ms: (k * 8) as TimestampMs * DT,
            end_ms: ((k + 1) * 8) as TimestampMs * DT,
            tokens: vec!["you".to_string(), "there".to_string()],
        })
        .collect();
    Session {
        session_id: "vis-test".to_string(),
        player_count: p,
        name_table: BTreeMap::new(),
        tracks,
        utterances,
        frame_interval_ms: DT,
    }
}

fn sti_instance(k: usize) -> TaskInstance {
    TaskInstance {
        kind: TaskKind::Sti,
        session_id: "vis-test".to_string(),
        target_index: k,
        masked_tokens: vec!["you".into(), "there".into(), "(".into(), "To".into(), "[MASK]".into(), ")".into()],
        mask_index: 4,
        occurrence: 0,
        label: None,
    }
}

#[test]
fn normalization_subtracts_the_speaker_nose() {
    // Speaker nose at (0.4, 0.6); l-wrist offset puts it at (0.5, 0.7).
    let mut session = static_session(&[[0.4, 0.6], [0.2, 0.2]], 1);
    let track = &mut session.tracks[0];
    for kp in track.frames.values_mut() {
        kp.parts[9] = [0.5, 0.7]; // l-wrist
    }
    let w = extract_windows(&session, &sti_instance(0), 8, DT).unwrap();
    let l_wrist = w.kinesics.frames[0][7]; // l-wrist is kinesics part 7
    assert!((l_wrist[0] - 0.1).abs() < 1e-12, "{l_wrist:?}");
    assert!((l_wrist[1] - 0.1).abs() < 1e-12, "{l_wrist:?}");
    // Nose entry is exactly the origin at every frame.
    for frame in &w.kinesics.frames {
        assert_eq!(frame[0], [0.0, 0.0]);
    }
}

#[test]
fn missing_slots_are_zero_padded() {
    let session = static_session(&[[0.3, 0.3], [0.5, 0.5], [0.7, 0.7], [0.2, 0.6]], 1);
    let w = extract_windows(&session, &sti_instance(0), 8, DT).unwrap();
    assert_eq!(w.positions.slots[4], [0.0, 0.0]);
    assert_eq!(w.positions.slots[5], [0.0, 0.0]);
    assert_eq!(w.positions.presence[4], SlotPresence::Absent);
    assert_eq!(w.positions.presence[5], SlotPresence::Absent);
    assert_eq!(w.positions.presence[0], SlotPresence::Observed);
}

#[test]
fn static_scene_gives_identical_positions_for_a_speakers_utterances() {
    let session = static_session(&[[0.3, 0.3], [0.5, 0.5], [0.7, 0.7]], 6);
    // Utterances 0 and 3 share speaker 1.
    let a = extract_windows(&session, &sti_instance(0), 8, DT).unwrap();
    let b = extract_windows(&session, &sti_instance(3), 8, DT).unwrap();
    assert_eq!(a.positions, b.positions);
}

#[test]
fn speakers_own_slot_is_the_origin() {
    let session = static_session(&[[0.3, 0.3], [0.5, 0.5]], 1);
    let w = extract_windows(&session, &sti_instance(0), 8, DT).unwrap();
    assert_eq!(w.positions.speaker_slot, 1);
    assert_eq!(w.positions.slots[0], [0.0, 0.0]);
}

#[test]
fn short_utterance_clamps_to_last_frame() {
    let mut session = static_session(&[[0.3, 0.3], [0.5, 0.5]], 1);
    // Truncate the speaker's track to 3 frames.
    let keep: Vec<TimestampMs> = session.tracks[0].frames.keys().copied().take(3).collect();
    session.tracks[0].frames.retain(|t, _| keep.contains(t));
    for track in &mut session.tracks[1..] {
        track.frames.retain(|t, _| keep.contains(t));
    }
    let w = extract_windows(&session, &sti_instance(0), 8, DT).unwrap();
    assert!(w.kinesics.clamped);
    assert_eq!(w.kinesics.timestamps.last(), Some(&(2 * DT)));
    assert_eq!(w.kinesics.frames[2], w.kinesics.frames[7]);
}

#[test]
fn missing_speaker_track_is_an_alignment_error() {
    let mut session = static_session(&[[0.3, 0.3], [0.5, 0.5]], 1);
    session.tracks.remove(0);
    let err = extract_windows(&session, &sti_instance(0), 8, DT).unwrap_err();
    assert!(matches!(err, crate::error::Error::Alignment(_)), "{err}");
}

#[test]
fn correction_fills_from_buffer_and_is_identity_when_nothing_missing() {
    let mut session = static_session(&[[0.3, 0.3], [0.5, 0.5], [0.7, 0.4]], 2);
    let buffer = PositionBuffer::from_session(&session);
    // Slot 3 vanishes at the second utterance's start.
    let t0 = 8 * DT;
    session.tracks[2].frames.retain(|t, _| *t != t0);
    let w = extract_windows(&session, &sti_instance(1), 8, DT).unwrap();
    assert_eq!(w.positions.presence[2], SlotPresence::Absent);

    let corrected = correct_positions(&w.positions, &buffer, w.t0, w.speaker_nose_abs);
    assert_eq!(corrected.presence[2], SlotPresence::Corrected);
    let expect = [0.7 - 0.5, 0.4 - 0.5]; // speaker at t0 is player 2
    assert!((corrected.slots[2][0] - expect[0]).abs() < 1e-12);
    assert!((corrected.slots[2][1] - expect[1]).abs() < 1e-12);

    // Nothing missing: output identical to input.
    let full = extract_windows(&session, &sti_instance(0), 8, DT).unwrap();
    let same = correct_positions(&full.positions, &buffer, full.t0, full.speaker_nose_abs);
    assert_eq!(same, full.positions);
}

#[test]
fn never_observed_slots_stay_zero_padded_after_correction() {
    let session = static_session(&[[0.3, 0.3], [0.5, 0.5]], 1);
    let buffer = PositionBuffer::from_session(&session);
    let w = extract_windows(&session, &sti_instance(0), 8, DT).unwrap();
    let corrected = correct_positions(&w.positions, &buffer, w.t0, w.speaker_nose_abs);
    for idx in 2..MAX_PLAYERS {
        assert_eq!(corrected.presence[idx], SlotPresence::Absent);
        assert_eq!(corrected.slots[idx], [0.0, 0.0]);
    }
}

#[test]
fn translation_leaves_windows_bit_identical_on_a_dyadic_grid() {
    // Coordinates on a 2^-20 grid stay exact under dyadic translation, so
    // (k + delta) - (nose + delta) == k - nose bit for bit.
    let grid = |x: f64| (x * 1048576.0).round() / 1048576.0;
    let base = static_session(&[[grid(0.3), grid(0.4)], [grid(0.6), grid(0.55)]], 1);
    let mut shifted = base.clone();
    let delta = [0.25, -0.125];
    for track in &mut shifted.tracks {
        for kp in track.frames.values_mut() {
            for part in kp.parts.iter_mut() {
                part[0] += delta[0];
                part[1] += delta[1];
            }
        }
    }
    let a = extract_windows(&base, &sti_instance(0), 8, DT).unwrap();
    let b = extract_windows(&shifted, &sti_instance(0), 8, DT).unwrap();
    assert_eq!(a.kinesics, b.kinesics);
    assert_eq!(a.positions, b.positions);
}

#[test]
fn ablation_masks_zero_gradients_exactly() {
    let dims = ModelDims::fd_tiny();
    let mut store = ParamStore::new();
    init_params(&mut store, 1, &dims);

    let session = static_session(&[[0.3, 0.3], [0.5, 0.5]], 1);
    let mut w = extract_windows(&session, &sti_instance(0), 4, DT).unwrap();
    w.kinesics.part_mask = part_mask(false, true); // no-gaze: head parts masked out

    let mut g = Graph::eval();
    let enc = encode_kinesics(&mut g, &store, &w.kinesics, &dims);
    let loss = g.sum_all(enc.features);
    g.backward(loss);
    let grads = g.grad(enc.input);
    let mut saw_nonzero = false;
    for (row, chunk) in grads.chunks(2).enumerate() {
        let part = row % 9;
        if GAZE_PART_IDX.contains(&part) {
            assert_eq!(chunk, &[0.0, 0.0], "gaze part {part} leaked gradient");
        } else {
            saw_nonzero |= chunk.iter().any(|v| *v != 0.0);
        }
    }
    assert!(saw_nonzero, "gesture parts should receive gradient");
}

#[test]
fn changing_the_speaker_slot_changes_the_position_feature() {
    let dims = ModelDims::fd_tiny();
    let mut store = ParamStore::new();
    init_params(&mut store, 2, &dims);
    let session = static_session(&[[0.3, 0.3], [0.5, 0.5], [0.7, 0.7]], 1);
    let w = extract_windows(&session, &sti_instance(0), 4, DT).unwrap();
    let feat = |speaker: u8| {
        let mut pos = w.positions.clone();
        pos.speaker_slot = speaker;
        let mut g = Graph::eval();
        let enc = encode_positions(&mut g, &store, &pos, &dims);
        g.value(enc.feature).to_vec()
    };
    assert_ne!(feat(1), feat(2));
}

#[test]
fn paper_dims_give_the_documented_concat_widths() {
    let dims = ModelDims::paper();
    let mut store = ParamStore::new();
    init_params(&mut store, 3, &dims);
    // Kinesics: 9 parts x d_point=64 concatenated into the 4-layer MLP.
    assert_eq!(store.get("visual.kin.fc0.w").unwrap().shape, (576, 512));
    // Positions: 6 slots x 64 into the position MLP.
    assert_eq!(store.get("visual.pos.fc0.w").unwrap().shape, (384, 512));
    assert_eq!(store.get("visual.point.fc0.w").unwrap().shape, (2, 64));
}

#[test]
fn interaction_output_is_t_plus_one_by_d() {
    let dims = ModelDims::desk();
    let mut store = ParamStore::new();
    init_params(&mut store, 4, &dims);
    let session = static_session(&[[0.3, 0.3], [0.5, 0.5]], 1);
    let w = extract_windows(&session, &sti_instance(0), 8, DT).unwrap();
    let mut g = Graph::eval();
    let kin = encode_kinesics(&mut g, &store, &w.kinesics, &dims);
    let pos = encode_positions(&mut g, &store, &w.positions, &dims);
    let out = visual_interaction_encode(&mut g, &store, kin.features, pos.feature, &dims);
    assert_eq!(g.shape(out), (9, 64));
}

#[test]
fn unpositioned_attention_is_permutation_equivariant() {
    let dims = ModelDims::desk();
    let mut store = ParamStore::new();
    init_params(&mut store, 5, &dims);
    let session = static_session(&[[0.3, 0.3], [0.5, 0.5]], 1);
    let mut w = extract_windows(&session, &sti_instance(0), 4, DT).unwrap();
    // Make two frames distinct.
    w.kinesics.frames[1][7] = [0.05, -0.02];
    w.kinesics.frames[2][7] = [-0.03, 0.04];

    let run = |win: &KinesicsWindow, positions: &PlayerPositions| {
        let mut g = Graph::eval();
        let kin = encode_kinesics(&mut g, &store, win, &dims);
        let pos = encode_positions(&mut g, &store, positions, &dims);
        let out = visual_interaction_encode(&mut g, &store, kin.features, pos.feature, &dims);
        g.value(out).to_vec()
    };
    let base = run(&w.kinesics, &w.positions);
    let mut swapped = w.kinesics.clone();
    swapped.frames.swap(1, 2);
    let perm = run(&swapped, &w.positions);

    let d = dims.d;
    let row = |v: &[f64], i: usize| v[i * d..(i + 1) * d].to_vec();
    let close = |a: &[f64], b: &[f64]| {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-9)
    };
    assert!(close(&row(&base, 1), &row(&perm, 2)));
    assert!(close(&row(&base, 2), &row(&perm, 1)));
    assert!(close(&row(&base, 0), &row(&perm, 0)));
    assert!(close(&row(&base, 4), &row(&perm, 4)));
    // And the swap genuinely changed row order.
    assert!(!close(&row(&base, 1), &row(&base, 2)));
}
