//! The non-verbal path: keypoint window extraction and normalization, speaker
//! kinesics encoding, player position encoding with speaker-label injection,
//! position correction from a last-observed buffer, and the visual interaction
//! transformer.
//!
//! All coordinates entering the encoders are speaker-nose-relative, so the
//! whole path is invariant to translating the scene.

use crate::datamodel::{Session, TaskInstance, TimestampMs, NOSE};
use crate::encoder::{linear, Mlp, TransformerStack};
use crate::error::{Error, Result};
use crate::presets::{ModelDims, GAZE_PART_IDX, GESTURE_PART_IDX, KINESICS_PARTS, MAX_PLAYERS};
use crate::tensorcore::{Graph, ParamStore, TensorRef};
use crate::Permutation;

/// Fixed gain on nose-relative coordinates entering the point encoder.
/// Relative offsets live in roughly +/-0.1 normalized units; the gain brings
/// them to unit scale so the first linear layer sees well-conditioned inputs.
pub const COORD_SCALE: f64 = 2.0;

/// Speaker keypoint window: T frames x 9 parts x (x, y), nose-relative.
#[derive(Debug, Clone, PartialEq)]
pub struct KinesicsWindow {
    pub frames: Vec<[[f64; 2]; 9]>,
    /// Which of the 9 parts feed the encoder (ablation masks).
    pub part_mask: [bool; 9],
    pub timestamps: Vec<TimestampMs>,
    /// True when the utterance was shorter than the window and sampling
    /// clamped to the last available frame.
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotPresence {
    Observed,
    /// Filled from the last-observed buffer.
    Corrected,
    Absent,
}

/// Player representative positions at the utterance start, speaker-relative.
/// Absent slots are zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerPositions {
    pub slots: [[f64; 2]; MAX_PLAYERS],
    pub presence: [SlotPresence; MAX_PLAYERS],
    pub speaker_slot: u8,
    pub player_count: u8,
}

impl PlayerPositions {
    pub fn permuted(&self, perm: &Permutation) -> PlayerPositions {
        PlayerPositions {
            slots: perm.apply_slot_values(&self.slots),
            presence: perm.apply_slot_values(&self.presence),
            speaker_slot: perm.apply_slot(self.speaker_slot),
            player_count: self.player_count,
        }
    }
}

/// Everything extracted for one instance's visual path.
#[derive(Debug, Clone)]
pub struct Windows {
    pub kinesics: KinesicsWindow,
    pub positions: PlayerPositions,
    /// Speaker's absolute nose at the utterance start (carried when missing
    /// there); reference point for position correction.
    pub speaker_nose_abs: [f64; 2],
    pub t0: TimestampMs,
}

/// Last observed absolute nose point per slot, in timestamp order.
#[derive(Debug, Clone, Default)]
pub struct PositionBuffer {
    observations: Vec<Vec<(TimestampMs, [f64; 2])>>,
}

impl PositionBuffer {
    pub fn from_session(session: &Session) -> Self {
        let mut observations = vec![Vec::new(); MAX_PLAYERS];
        for track in &session.tracks {
            let slot = track.anon_id as usize;
            if slot == 0 || slot > MAX_PLAYERS {
                continue;
            }
            let obs = &mut observations[slot - 1];
            for (t, kp) in &track.frames {
                if kp.valid[NOSE] {
                    obs.push((*t, kp.parts[NOSE]));
                }
            }
        }
        PositionBuffer { observations }
    }

    /// Most recent absolute nose observation of `slot` at or before `t`.
    pub fn last_at_or_before(&self, slot: u8, t: TimestampMs) -> Option<[f64; 2]> {
        let obs = self.observations.get(slot as usize - 1)?;
        let idx = obs.partition_point(|(ot, _)| *ot <= t);
        (idx > 0).then(|| obs[idx - 1].1)
    }
}

/// Sample the speaker window and player positions for one instance.
///
/// Kinesics frames are sampled at `t0, t0+dt, ...`, clamped to the speaker
/// track's last frame; per-part gaps carry the last observed value. Positions
/// are nose points at exactly `t0`; slots without a valid nose there stay
/// absent until [`correct_positions`].
pub fn extract_windows(
    session: &Session,
    instance: &TaskInstance,
    frames: usize,
    frame_interval_ms: TimestampMs,
) -> Result<Windows> {
    let utt = session.utterance(instance.target_index).ok_or_else(|| {
        Error::Data(format!(
            "session {}: no utterance {}",
            session.session_id, instance.target_index
        ))
    })?;
    let speaker_slot = utt.speaker_anon_id;
    let speaker = session.track_for(speaker_slot).ok_or_else(|| {
        Error::Alignment(format!(
            "session {}: speaker Player{speaker_slot} of utterance {} has no track",
            session.session_id, instance.target_index
        ))
    })?;
    let t0 = utt.start_ms;
    let last = speaker.last_timestamp().ok_or_else(|| {
        Error::Alignment(format!(
            "session {}: speaker Player{speaker_slot} track is empty",
            session.session_id
        ))
    })?;

    let mut window_frames = Vec::with_capacity(frames);
    let mut timestamps = Vec::with_capacity(frames);
    let mut clamped = false;
    for i in 0..frames {
        let wanted = t0 + i as TimestampMs * frame_interval_ms;
        let t = if wanted > last {
            clamped = true;
            last
        } else {
            wanted
        };
        timestamps.push(t);
        let nose = speaker.part_at_or_before(t, NOSE).unwrap_or([0.0, 0.0]);
        let mut parts = [[0.0f64; 2]; 9];
        for (slot_idx, &part) in KINESICS_PARTS.iter().enumerate() {
            if let Some(p) = speaker.part_at_or_before(t, part) {
                parts[slot_idx] = [p[0] - nose[0], p[1] - nose[1]];
            }
        }
        window_frames.push(parts);
    }

    // Representative positions at t0, normalized by the speaker's nose there.
    let speaker_nose_abs = speaker
        .frame_at(t0)
        .filter(|kp| kp.valid[NOSE])
        .map(|kp| kp.parts[NOSE])
        .or_else(|| speaker.part_at_or_before(t0.min(last), NOSE))
        .unwrap_or([0.0, 0.0]);

    let mut slots = [[0.0f64; 2]; MAX_PLAYERS];
    let mut presence = [SlotPresence::Absent; MAX_PLAYERS];
    for slot in 1..=session.player_count {
        let idx = slot as usize - 1;
        if slot == speaker_slot {
            // The speaker's own relative position is the origin.
            presence[idx] = SlotPresence::Observed;
            continue;
        }
        let observed = session
            .track_for(slot)
            .and_then(|tr| tr.frame_at(t0))
            .filter(|kp| kp.valid[NOSE])
            .map(|kp| kp.parts[NOSE]);
        if let Some(nose) = observed {
            slots[idx] = [nose[0] - speaker_nose_abs[0], nose[1] - speaker_nose_abs[1]];
            presence[idx] = SlotPresence::Observed;
        }
    }

    Ok(Windows {
        kinesics: KinesicsWindow {
            frames: window_frames,
            part_mask: [true; 9],
            timestamps,
            clamped,
        },
        positions: PlayerPositions {
            slots,
            presence,
            speaker_slot,
            player_count: session.player_count,
        },
        speaker_nose_abs,
        t0,
    })
}

/// Fill slots that are absent at `t0` but were observed earlier from the
/// buffer; never-observed slots stay zero-padded. Total function.
pub fn correct_positions(
    positions: &PlayerPositions,
    buffer: &PositionBuffer,
    t0: TimestampMs,
    speaker_nose_abs: [f64; 2],
) -> PlayerPositions {
    let mut out = positions.clone();
    for slot in 1..=positions.player_count {
        let idx = slot as usize - 1;
        if out.presence[idx] != SlotPresence::Absent {
            continue;
        }
        if let Some(nose) = buffer.last_at_or_before(slot, t0) {
            out.slots[idx] = [nose[0] - speaker_nose_abs[0], nose[1] - speaker_nose_abs[1]];
            out.presence[idx] = SlotPresence::Corrected;
        }
    }
    out
}

/// Ablation mask over the 9 kinesics parts.
pub fn part_mask(no_gesture: bool, no_gaze: bool) -> [bool; 9] {
    let mut mask = [true; 9];
    if no_gesture {
        mask = [false; 9];
        for &i in &GAZE_PART_IDX {
            mask[i] = true;
        }
    }
    if no_gaze {
        let mut m = [false; 9];
        for &i in &GESTURE_PART_IDX {
            m[i] = true;
        }
        for (out, keep) in mask.iter_mut().zip(m.iter()) {
            *out &= *keep;
        }
        if no_gesture {
            // Both ablations would leave nothing; callers reject this combo.
            mask = [false; 9];
        }
    }
    mask
}

fn point_encoder(dims: &ModelDims, for_positions: bool) -> Mlp {
    let prefix = if for_positions && !dims.share_point_encoder {
        "visual.point_pos"
    } else {
        "visual.point"
    };
    let mut layer_dims = vec![2];
    layer_dims.extend(std::iter::repeat(dims.d_point).take(dims.point_layers));
    Mlp::new(prefix, layer_dims)
}

fn kinesics_encoder(dims: &ModelDims) -> Mlp {
    let mut layer_dims = vec![9 * dims.d_point];
    layer_dims.extend(std::iter::repeat(dims.d).take(dims.kin_layers));
    Mlp::new("visual.kin", layer_dims)
}

fn position_encoder(dims: &ModelDims) -> Mlp {
    let mut layer_dims = vec![MAX_PLAYERS * dims.d_point];
    layer_dims.extend(std::iter::repeat(dims.d).take(dims.pos_layers));
    Mlp::new("visual.pos", layer_dims)
}

fn interaction_stack(dims: &ModelDims) -> TransformerStack {
    TransformerStack {
        prefix: "visual.encoder".to_string(),
        layers: dims.visual_layers,
        width: dims.d,
        ffn: dims.visual_ffn,
        heads: dims.visual_heads,
        dropout: dims.dropout,
    }
}

/// Register every visual-path parameter (prefix `visual.`).
pub fn init_params(store: &mut ParamStore, seed: u64, dims: &ModelDims) {
    point_encoder(dims, false).init(store, seed);
    if !dims.share_point_encoder {
        point_encoder(dims, true).init(store, seed);
    }
    kinesics_encoder(dims).init(store, seed);
    position_encoder(dims).init(store, seed);
    crate::encoder::init_linear(store, seed, "visual.speaker_label", MAX_PLAYERS, dims.d);
    crate::encoder::init_linear(store, seed, "visual.pos_out", dims.d, dims.d);
    interaction_stack(dims).init(store, seed);
}

/// Per-frame kinesics features: each part pair through the shared point
/// encoder, concatenated, then through the kinesics MLP. Returns the (T, d)
/// feature matrix plus the raw input leaf (for gradient diagnostics).
pub struct KinesicsEncoding {
    pub features: TensorRef,
    /// (T*9, 2) leaf of nose-relative coordinates, before the part mask.
    pub input: TensorRef,
}

pub fn encode_kinesics(
    g: &mut Graph,
    store: &ParamStore,
    window: &KinesicsWindow,
    dims: &ModelDims,
) -> KinesicsEncoding {
    let t = window.frames.len();
    let mut coords = Vec::with_capacity(t * 9 * 2);
    for frame in &window.frames {
        for part in frame {
            coords.extend_from_slice(part);
        }
    }
    let input = g.leaf(t * 9, 2, coords, true);
    let mut mask = Vec::with_capacity(t * 9 * 2);
    for _ in 0..t {
        for keep in window.part_mask {
            let m = if keep { COORD_SCALE } else { 0.0 };
            mask.push(m);
            mask.push(m);
        }
    }
    let masked = g.mask_mul(input, mask);
    let point_feats = point_encoder(dims, false).forward(g, store, masked);
    let per_frame = g.reshape(point_feats, t, 9 * dims.d_point);
    let features = kinesics_encoder(dims).forward(g, store, per_frame);
    KinesicsEncoding { features, input }
}

/// Player position feature: per-slot point features concatenated through the
/// position MLP, speaker one-hot added, final affine. Returns the (1, d)
/// feature plus the raw (6, 2) input leaf.
pub struct PositionEncoding {
    pub feature: TensorRef,
    pub input: TensorRef,
}

pub fn encode_positions(
    g: &mut Graph,
    store: &ParamStore,
    positions: &PlayerPositions,
    dims: &ModelDims,
) -> PositionEncoding {
    assert!(
        positions.speaker_slot >= 1 && positions.speaker_slot as usize <= MAX_PLAYERS,
        "encode_positions: speaker slot {} out of range",
        positions.speaker_slot
    );
    let mut coords = Vec::with_capacity(MAX_PLAYERS * 2);
    for slot in &positions.slots {
        coords.extend_from_slice(slot);
    }
    let input = g.leaf(MAX_PLAYERS, 2, coords, true);
    let scaled = g.scale(input, COORD_SCALE);
    let point_feats = point_encoder(dims, true).forward(g, store, scaled);
    let flat = g.reshape(point_feats, 1, MAX_PLAYERS * dims.d_point);
    let pos_feat = position_encoder(dims).forward(g, store, flat);

    let mut one_hot = vec![0.0; MAX_PLAYERS];
    one_hot[positions.speaker_slot as usize - 1] = 1.0;
    let label = g.constant(1, MAX_PLAYERS, one_hot);
    let label_feat = linear(g, store, "visual.speaker_label", label);

    let combined = g.add(pos_feat, label_feat);
    let feature = linear(g, store, "visual.pos_out", combined);
    PositionEncoding { feature, input }
}

/// Self-attention over the T kinesics tokens plus the position token.
/// Output is the full (T+1, d) sequence; order information is injected later
/// by the fusion positional encoding, not here.
pub fn visual_interaction_encode(
    g: &mut Graph,
    store: &ParamStore,
    kinesics: TensorRef,
    position: TensorRef,
    dims: &ModelDims,
) -> TensorRef {
    let (t, d) = g.shape(kinesics);
    assert_eq!(d, dims.d, "visual_interaction_encode: kinesics width {d} != {}", dims.d);
    assert_eq!(g.shape(position), (1, dims.d), "visual_interaction_encode: position width mismatch");
    let seq = g.concat_rows(&[kinesics, position]);
    let out = interaction_stack(dims).forward(g, store, seq, None);
    debug_assert_eq!(g.shape(out), (t + 1, d));
    out
}

#[cfg(test)]
mod tests;
