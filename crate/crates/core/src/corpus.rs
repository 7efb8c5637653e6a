//! Synthetic social-deduction-game corpus generator.
//!
//! Sessions place P players on a circle and fill a timeline of templated
//! utterances. Every utterance has a speaker and a referent; directed
//! utterances point: the speaker's wrists displace toward the referent's nose
//! (ramping over the utterance) and the head keypoints shift by a small gaze
//! offset. `language_informativeness` (lambda) controls the fraction of events
//! whose referent is recoverable from the transcript alone — via a vocative
//! name, a repeated mention, or a recent-antecedent pattern — while the rest
//! are resolvable only from the pointing geometry.
//!
//! Extensions beyond the base knobs, all default-off: `drop_rate` removes
//! contiguous frame runs per player (missing detections), `habit_strength`
//! biases referent choice toward the speaker's successor slot (identity
//! habits that permutation learning is meant to neutralize), and
//! `flavor_weights` shifts the utterance mix toward one task.

pub mod agreement;
pub mod templates;

pub use agreement::{
    krippendorff_alpha, read_ratings_csv, RatingMatrix, ALPHA_RELIABILITY_THRESHOLD,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

use crate::datamodel::{
    self, player_token, Keypoints17, Label, Manifest, ManifestLabel, ManifestSession,
    PlayerTrack, Session, TaskInstance, TaskKind, TimestampMs, Utterance, NOSE,
};
use crate::error::{Error, Result};
use crate::language::Vocab;
use crate::rng;
use crate::tensorcore::params::gaussian;

// Scene geometry, normalized frame coordinates.
const FRAME_CENTER: [f64; 2] = [0.5, 0.5];
const SEAT_RADIUS: f64 = 0.3;
/// Wrist displacement at full gesture extension.
pub const GESTURE_AMPLITUDE: f64 = 0.08;
/// Head keypoint shift toward the referent while speaking.
pub const GAZE_OFFSET: f64 = 0.01;
/// Dropped-detection runs cover this many consecutive utterances.
const DROP_BLOCK_UTTERANCES: usize = 3;

/// Canonical rest skeleton: per-part offsets from the nose, about 0.15 frame
/// heights tall, arms hanging.
pub const REST_POSE: [[f64; 2]; 17] = [
    [0.000, 0.000],   // nose
    [0.012, -0.008],  // l-eye
    [-0.012, -0.008], // r-eye
    [0.022, -0.004],  // l-ear
    [-0.022, -0.004], // r-ear
    [0.035, 0.030],   // l-shoulder
    [-0.035, 0.030],  // r-shoulder
    [0.040, 0.070],   // l-elbow
    [-0.040, 0.070],  // r-elbow
    [0.046, 0.108],   // l-wrist
    [-0.046, 0.108],  // r-wrist
    [0.020, 0.095],   // l-hip
    [-0.020, 0.095],  // r-hip
    [0.022, 0.125],   // l-knee
    [-0.022, 0.125],  // r-knee
    [0.024, 0.150],   // l-ankle
    [-0.024, 0.150],  // r-ankle
];

const L_EYE: usize = 1;
const R_EYE: usize = 2;
const L_WRIST: usize = 9;
const R_WRIST: usize = 10;

/// Mix of utterance flavors emitted by the scheduler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlavorWeights {
    pub address: f64,
    pub pronoun: f64,
    pub mention: f64,
    pub filler: f64,
}

impl FlavorWeights {
    pub fn balanced() -> Self {
        FlavorWeights { address: 0.3, pronoun: 0.25, mention: 0.25, filler: 0.2 }
    }

    pub fn focus(task: TaskKind) -> Self {
        match task {
            TaskKind::Sti => FlavorWeights { address: 0.6, pronoun: 0.1, mention: 0.1, filler: 0.2 },
            TaskKind::Pcr => FlavorWeights { address: 0.1, pronoun: 0.6, mention: 0.1, filler: 0.2 },
            TaskKind::Mpp => FlavorWeights { address: 0.1, pronoun: 0.1, mention: 0.6, filler: 0.2 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    /// Players at the table, 3..=6.
    pub player_count: u8,
    /// Utterances per session.
    pub utterances: usize,
    /// Probability an event's referent is recoverable from text alone.
    pub language_informativeness: f64,
    /// Std dev of keypoint jitter, normalized units.
    pub gesture_noise: f64,
    /// Fraction of address events directed at the whole table.
    pub everyone_rate: f64,
    pub frame_interval_ms: TimestampMs,
    pub frames_per_utterance: usize,
    pub seed: u64,
    /// Fraction of non-speaking frames removed in contiguous runs.
    pub drop_rate: f64,
    /// Probability a referent is the speaker's successor slot instead of
    /// uniform; leaves marginals uniform but plants a joint identity habit.
    pub habit_strength: f64,
    /// Seat mixing: each slot is swapped with a random seat with this
    /// probability. 1.0 approximates a fresh shuffle per session; lower
    /// values model habitual seating (players mostly in their usual spots).
    pub seat_swap_rate: f64,
    pub flavor_weights: FlavorWeights,
}

impl GenConfig {
    pub fn new(player_count: u8, utterances: usize, seed: u64) -> Self {
        GenConfig {
            player_count,
            utterances,
            language_informativeness: 0.5,
            gesture_noise: 0.005,
            everyone_rate: 0.0,
            frame_interval_ms: 400,
            frames_per_utterance: 8,
            seed,
            drop_rate: 0.0,
            habit_strength: 0.0,
            seat_swap_rate: 1.0,
            flavor_weights: FlavorWeights::balanced(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=6).contains(&self.player_count) {
            return Err(Error::Config(format!(
                "player_count {} outside 3..=6 (referent ambiguity needs at least 2 candidates)",
                self.player_count
            )));
        }
        if self.utterances == 0 {
            return Err(Error::Config("utterances must be positive".into()));
        }
        for (name, v) in [
            ("language_informativeness", self.language_informativeness),
            ("everyone_rate", self.everyone_rate),
            ("drop_rate", self.drop_rate),
            ("habit_strength", self.habit_strength),
            ("seat_swap_rate", self.seat_swap_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0,1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.seat_swap_rate) {
            return Err(Error::Config(format!(
                "seat_swap_rate {} outside [0,1]",
                self.seat_swap_rate
            )));
        }
        if self.everyone_rate >= 1.0 {
            return Err(Error::Config("everyone_rate must be below 1".into()));
        }
        if self.gesture_noise < 0.0 {
            return Err(Error::Config(format!("gesture_noise {} negative", self.gesture_noise)));
        }
        if self.frames_per_utterance == 0 {
            return Err(Error::Config("frames_per_utterance must be >= 1".into()));
        }
        if self.frame_interval_ms <= 0 {
            return Err(Error::Config("frame_interval must be positive".into()));
        }
        let w = self.flavor_weights;
        if w.address < 0.0 || w.pronoun < 0.0 || w.mention < 0.0 || w.filler < 0.0
            || w.address + w.pronoun + w.mention + w.filler <= 0.0
        {
            return Err(Error::Config("flavor weights must be non-negative and sum > 0".into()));
        }
        Ok(())
    }
}

/// Closed vocabulary over the template library.
pub fn vocabulary() -> Vocab {
    Vocab::from_words(templates::word_types())
}

#[derive(Debug)]
pub struct GeneratedSession {
    pub session: Session,
    pub labels: ManifestSession,
}

// ---------------------------------------------------------------------------
// Utterance planning
// ---------------------------------------------------------------------------

struct PlannedUtterance {
    speaker: u8,
    /// None means addressed to everyone (no directed gesture).
    referent: Option<u8>,
    tokens: Vec<String>,
}

struct Plan {
    utterances: Vec<PlannedUtterance>,
    sti: Vec<(usize, Label)>,
    pcr: Vec<(usize, u8)>,
}

fn pick<'a>(rng: &mut ChaCha8Rng, set: &'a [&'a str]) -> &'a str {
    set[rng.random_range(0..set.len())]
}

fn plan_session(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Plan {
    let p = cfg.player_count;
    let m = cfg.utterances;
    let mut plan = Plan { utterances: Vec::with_capacity(m), sti: Vec::new(), pcr: Vec::new() };
    // Earliest slot where the next unrelated mention may appear; keeps the
    // nearest-mention reading of paired mentions unambiguous.
    let mut next_mention_ok = 0usize;

    let pick_speaker = |rng: &mut ChaCha8Rng| rng.random_range(1..=p);
    let pick_other = |rng: &mut ChaCha8Rng, not: u8| {
        let others: Vec<u8> = (1..=p).filter(|&x| x != not).collect();
        others[rng.random_range(0..others.len())]
    };
    let pick_referent = |rng: &mut ChaCha8Rng, speaker: u8| {
        if cfg.habit_strength > 0.0 && rng.random::<f64>() < cfg.habit_strength {
            speaker % p + 1
        } else {
            pick_other(rng, speaker)
        }
    };

    while plan.utterances.len() < m {
        let remaining = m - plan.utterances.len();
        let w = cfg.flavor_weights;
        let total = w.address + w.pronoun + w.mention + w.filler;
        let draw = rng.random::<f64>() * total;
        let resolvable = rng.random::<f64>() < cfg.language_informativeness;
        let speaker = pick_speaker(rng);

        let push_filler = |plan: &mut Plan, rng: &mut ChaCha8Rng| {
            let s = pick_speaker(rng);
            let r = pick_referent(rng, s);
            plan.utterances.push(PlannedUtterance {
                speaker: s,
                referent: Some(r),
                tokens: templates::tokenize(pick(rng, templates::FILLER)),
            });
        };

        if draw < w.address {
            let everyone = rng.random::<f64>() < cfg.everyone_rate;
            if everyone {
                let set = if resolvable { templates::ADDRESS_EVERYONE } else { templates::ADDRESS_PLAIN };
                plan.utterances.push(PlannedUtterance {
                    speaker,
                    referent: None,
                    tokens: templates::tokenize(pick(rng, set)),
                });
                plan.sti.push((plan.utterances.len() - 1, Label::Everyone));
            } else {
                let referent = pick_referent(rng, speaker);
                if resolvable {
                    let pad = next_mention_ok.saturating_sub(plan.utterances.len());
                    if pad + 2 > remaining {
                        push_filler(&mut plan, rng);
                        continue;
                    }
                    for _ in 0..pad {
                        push_filler(&mut plan, rng);
                    }
                    // Sibling mention keeps the vocative's own masked form
                    // resolvable from context.
                    let s2 = pick_other(rng, referent);
                    plan.utterances.push(PlannedUtterance {
                        speaker: s2,
                        referent: Some(referent),
                        tokens: templates::instantiate(
                            pick(rng, templates::MENTION),
                            &player_token(referent),
                        ),
                    });
                    let mut tokens = vec![player_token(referent), ",".to_string()];
                    tokens.extend(templates::tokenize(pick(rng, templates::ADDRESS_PLAIN)));
                    plan.utterances.push(PlannedUtterance { speaker, referent: Some(referent), tokens });
                    plan.sti.push((plan.utterances.len() - 1, Label::Player(referent)));
                    next_mention_ok = plan.utterances.len() + 1;
                } else {
                    plan.utterances.push(PlannedUtterance {
                        speaker,
                        referent: Some(referent),
                        tokens: templates::tokenize(pick(rng, templates::ADDRESS_PLAIN)),
                    });
                    plan.sti.push((plan.utterances.len() - 1, Label::Player(referent)));
                }
            }
        } else if draw < w.address + w.pronoun {
            let referent = {
                let r = pick_referent(rng, speaker);
                if r == speaker { pick_other(rng, speaker) } else { r }
            };
            if resolvable {
                let gap = rng.random_range(2..=4usize);
                let pad = next_mention_ok.saturating_sub(plan.utterances.len());
                if pad + 2 + (gap - 1) + 1 > remaining {
                    push_filler(&mut plan, rng);
                    continue;
                }
                for _ in 0..pad {
                    push_filler(&mut plan, rng);
                }
                for _ in 0..2 {
                    let s = pick_other(rng, referent);
                    plan.utterances.push(PlannedUtterance {
                        speaker: s,
                        referent: Some(referent),
                        tokens: templates::instantiate(
                            pick(rng, templates::MENTION),
                            &player_token(referent),
                        ),
                    });
                }
                next_mention_ok = plan.utterances.len() + 1;
                for _ in 0..gap - 1 {
                    push_filler(&mut plan, rng);
                }
                plan.utterances.push(PlannedUtterance {
                    speaker,
                    referent: Some(referent),
                    tokens: templates::tokenize(pick(rng, templates::PRONOUN)),
                });
                plan.pcr.push((plan.utterances.len() - 1, referent));
            } else {
                plan.utterances.push(PlannedUtterance {
                    speaker,
                    referent: Some(referent),
                    tokens: templates::tokenize(pick(rng, templates::PRONOUN)),
                });
                plan.pcr.push((plan.utterances.len() - 1, referent));
            }
        } else if draw < w.address + w.pronoun + w.mention {
            let referent = pick_other(rng, speaker);
            let count = if resolvable { 2 } else { 1 };
            let pad = next_mention_ok.saturating_sub(plan.utterances.len());
            if pad + count > remaining {
                push_filler(&mut plan, rng);
                continue;
            }
            for _ in 0..pad {
                push_filler(&mut plan, rng);
            }
            plan.utterances.push(PlannedUtterance {
                speaker,
                referent: Some(referent),
                tokens: templates::instantiate(pick(rng, templates::MENTION), &player_token(referent)),
            });
            if resolvable {
                let s2 = pick_other(rng, referent);
                plan.utterances.push(PlannedUtterance {
                    speaker: s2,
                    referent: Some(referent),
                    tokens: templates::instantiate(pick(rng, templates::MENTION), &player_token(referent)),
                });
            }
            next_mention_ok = plan.utterances.len() + 1;
        } else {
            push_filler(&mut plan, rng);
        }
    }
    plan
}

// ---------------------------------------------------------------------------
// Frame synthesis
// ---------------------------------------------------------------------------

fn normalize(v: [f64; 2]) -> [f64; 2] {
    let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if norm == 0.0 {
        [0.0, 0.0]
    } else {
        [v[0] / norm, v[1] / norm]
    }
}

/// Generate one session plus its gold labels. Deterministic in
/// `(cfg, session_index)`.
pub fn generate_session(cfg: &GenConfig, session_index: usize) -> Result<GeneratedSession> {
    cfg.validate()?;
    let mut rng = rng::stream2(cfg.seed, "corpus/session", session_index as u64, 0);
    let p = cfg.player_count as usize;
    let t_frames = cfg.frames_per_utterance;
    let dt = cfg.frame_interval_ms;

    // Seats: evenly spaced at canonical angles (table geometry is stable
    // across sessions, like a fixed camera setup); the slot-to-seat
    // assignment is shuffled per session, so a slot's position still varies
    // and referents can only be recovered through the position channel.
    let mut seat_of_slot: Vec<usize> = (0..p).collect();
    for i in 0..p {
        if rng.random::<f64>() < cfg.seat_swap_rate {
            let j = rng.random_range(0..p);
            seat_of_slot.swap(i, j);
        }
    }
    let seat_nose = |slot: u8| -> [f64; 2] {
        let seat = seat_of_slot[slot as usize - 1];
        let angle = std::f64::consts::TAU * seat as f64 / p as f64;
        [FRAME_CENTER[0] + SEAT_RADIUS * angle.cos(), FRAME_CENTER[1] + SEAT_RADIUS * angle.sin()]
    };

    let plan = plan_session(cfg, &mut rng);
    let m = plan.utterances.len();
    debug_assert_eq!(m, cfg.utterances);

    let mut tracks: Vec<PlayerTrack> = (1..=cfg.player_count)
        .map(|slot| PlayerTrack { track_id: 1000 + slot as i64, anon_id: slot, frames: BTreeMap::new() })
        .collect();

    for (k, utt) in plan.utterances.iter().enumerate() {
        let direction = utt.referent.map(|r| {
            let s_nose = seat_nose(utt.speaker);
            let r_nose = seat_nose(r);
            normalize([r_nose[0] - s_nose[0], r_nose[1] - s_nose[1]])
        });
        for i in 0..t_frames {
            let t = ((k * t_frames + i) as i64) * dt;
            for slot in 1..=cfg.player_count {
                let speaking = slot == utt.speaker;
                // Non-speakers are keyframed at utterance starts only.
                if !speaking && i != 0 {
                    continue;
                }
                let base = seat_nose(slot);
                let mut kp = Keypoints17::invalid();
                for part in 0..17 {
                    let mut x = base[0] + REST_POSE[part][0];
                    let mut y = base[1] + REST_POSE[part][1];
                    if speaking {
                        if let Some(u) = direction {
                            if part == L_WRIST || part == R_WRIST {
                                let ramp = if t_frames > 1 {
                                    i as f64 / (t_frames - 1) as f64
                                } else {
                                    1.0
                                };
                                x += ramp * GESTURE_AMPLITUDE * u[0];
                                y += ramp * GESTURE_AMPLITUDE * u[1];
                            }
                            if part == NOSE || part == L_EYE || part == R_EYE {
                                x += GAZE_OFFSET * u[0];
                                y += GAZE_OFFSET * u[1];
                            }
                        }
                    }
                    x += cfg.gesture_noise * gaussian(&mut rng);
                    y += cfg.gesture_noise * gaussian(&mut rng);
                    kp.parts[part] = [x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)];
                    kp.valid[part] = true;
                }
                tracks[slot as usize - 1].frames.insert(t, kp);
            }
        }
    }

    // Missing-detection injection: per (player, utterance block), drop all of
    // the player's frames, skipping utterances where they speak.
    if cfg.drop_rate > 0.0 {
        let mut drop_rng = rng::stream2(cfg.seed, "corpus/drops", session_index as u64, 0);
        for slot in 1..=cfg.player_count {
            let mut block_start = 0usize;
            while block_start < m {
                let block_end = (block_start + DROP_BLOCK_UTTERANCES).min(m);
                let dropped = drop_rng.random::<f64>() < cfg.drop_rate;
                if dropped {
                    for k in block_start..block_end {
                        if plan.utterances[k].speaker == slot {
                            continue;
                        }
                        let lo = (k * t_frames) as i64 * dt;
                        let hi = ((k + 1) * t_frames) as i64 * dt;
                        tracks[slot as usize - 1].frames.retain(|t, _| *t < lo || *t >= hi);
                    }
                }
                block_start = block_end;
            }
        }
    }

    let utterances: Vec<Utterance> = plan
        .utterances
        .iter()
        .enumerate()
        .map(|(k, u)| Utterance {
            index: k,
            speaker_anon_id: u.speaker,
            start_ms: (k * t_frames) as i64 * dt,
            end_ms: ((k + 1) * t_frames) as i64 * dt,
            tokens: u.tokens.clone(),
        })
        .collect();

    let session_id = format!("session-{session_index:03}");
    let session = Session {
        session_id: session_id.clone(),
        player_count: cfg.player_count,
        name_table: BTreeMap::new(),
        tracks,
        utterances,
        frame_interval_ms: dt,
    };
    session.validate()?;

    let mut labels = Vec::new();
    for (k, label) in &plan.sti {
        labels.push(ManifestLabel {
            k: *k,
            kind: TaskKind::Sti,
            occurrence: 0,
            label: label.as_string(),
        });
    }
    for (k, referent) in &plan.pcr {
        labels.push(ManifestLabel {
            k: *k,
            kind: TaskKind::Pcr,
            occurrence: 0,
            label: player_token(*referent),
        });
    }
    // Mention gold is the masked token itself; rows recorded for completeness.
    for u in &session.utterances {
        let mut occurrence = 0;
        for tok in &u.tokens {
            if let Some(slot) = datamodel::parse_player_token(tok) {
                labels.push(ManifestLabel {
                    k: u.index,
                    kind: TaskKind::Mpp,
                    occurrence,
                    label: player_token(slot),
                });
                occurrence += 1;
            }
        }
    }
    labels.sort_by_key(|l| (l.k, l.kind as u8, l.occurrence));

    Ok(GeneratedSession { session, labels: ManifestSession { session_id, labels } })
}

/// Generate `count` sessions in memory.
pub fn generate_sessions(cfg: &GenConfig, count: usize) -> Result<Vec<GeneratedSession>> {
    (0..count).map(|i| generate_session(cfg, i)).collect()
}

/// Generate a corpus directory: one JSON file per session plus
/// `manifest.json` with the gold labels.
pub fn generate_corpus_to_dir(cfg: &GenConfig, count: usize, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for generated in generate_sessions(cfg, count)? {
        let path = dir.join(format!("{}.json", generated.session.session_id));
        datamodel::save_session(&generated.session, &path)?;
        manifest.sessions.push(generated.labels);
    }
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Load a corpus directory written by [`generate_corpus_to_dir`].
pub fn load_corpus(dir: &Path) -> Result<(Vec<Session>, Manifest)> {
    let manifest = Manifest::load(&dir.join("manifest.json"))?;
    let mut sessions = Vec::with_capacity(manifest.sessions.len());
    for entry in &manifest.sessions {
        sessions.push(datamodel::load_session(&dir.join(format!("{}.json", entry.session_id)))?);
    }
    Ok((sessions, manifest))
}

// ---------------------------------------------------------------------------
// Text-only reference resolver
// ---------------------------------------------------------------------------

/// Rule-based resolver using only the transcript: the deterministic ceiling
/// for text-resolvable events, and the oracle under full language
/// informativeness. Returns None when the text does not determine a referent.
pub fn resolve_by_text(session: &Session, instance: &TaskInstance) -> Option<Label> {
    let find_player = |tokens: &[String]| -> Option<u8> {
        tokens.iter().find_map(|t| datamodel::parse_player_token(t))
    };
    match instance.kind {
        TaskKind::Sti => {
            if instance.masked_tokens.iter().any(|t| t == "everyone") {
                return Some(Label::Everyone);
            }
            find_player(&instance.masked_tokens).map(Label::Player)
        }
        TaskKind::Pcr => {
            let k = instance.target_index;
            for back in 1..=5usize {
                let idx = k.checked_sub(back)?;
                if let Some(slot) = find_player(&session.utterances[idx].tokens) {
                    return Some(Label::Player(slot));
                }
            }
            None
        }
        TaskKind::Mpp => {
            // The masked mention's sibling: another name in the same
            // utterance or in an adjacent one.
            if let Some(slot) = find_player(&instance.masked_tokens) {
                return Some(Label::Player(slot));
            }
            let k = instance.target_index;
            if let Some(prev) = k.checked_sub(1) {
                if let Some(slot) = find_player(&session.utterances[prev].tokens) {
                    return Some(Label::Player(slot));
                }
            }
            if let Some(next) = session.utterances.get(k + 1) {
                if let Some(slot) = find_player(&next.tokens) {
                    return Some(Label::Player(slot));
                }
            }
            None
        }
    }
}
