//! Canonical in-memory and on-disk representation of game sessions: player
//! tracks with keypoint frames, anonymized utterances, task instances, and
//! player-slot permutations.
//!
//! Timestamps are integer milliseconds internally and seconds (millisecond
//! precision) in JSON. Coordinates are normalized to [0,1] by frame size at
//! ingest.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::presets::MAX_PLAYERS;
use crate::rng;

pub type TimestampMs = i64;

pub fn seconds_to_ms(t: f64) -> TimestampMs {
    (t * 1000.0).round() as TimestampMs
}

pub fn ms_to_seconds(t: TimestampMs) -> f64 {
    t as f64 / 1000.0
}

/// Keypoint part names in canonical order.
pub const PART_NAMES: [&str; 17] = [
    "nose", "l-eye", "r-eye", "l-ear", "r-ear", "l-shoulder", "r-shoulder", "l-elbow", "r-elbow",
    "l-wrist", "r-wrist", "l-hip", "r-hip", "l-knee", "r-knee", "l-ankle", "r-ankle",
];

pub const NOSE: usize = 0;

pub const MASK_TOKEN: &str = "[MASK]";
pub const SECOND_PERSON_TOKENS: [&str; 2] = ["you", "your"];
pub const THIRD_PERSON_PRONOUNS: [&str; 5] = ["he", "she", "him", "her", "his"];

pub fn player_token(slot: u8) -> String {
    format!("Player{slot}")
}

/// Parse `PlayerK` for slot K in 1..=6.
pub fn parse_player_token(token: &str) -> Option<u8> {
    let rest = token.strip_prefix("Player")?;
    let k: u8 = rest.parse().ok()?;
    (1..=MAX_PLAYERS as u8).contains(&k).then_some(k)
}

// ---------------------------------------------------------------------------
// Core types
// ---------------------------------------------------------------------------

/// 17 body keypoints in normalized frame coordinates. Invalid parts carry the
/// (0,0) sentinel with `valid = false`.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints17 {
    pub parts: [[f64; 2]; 17],
    pub valid: [bool; 17],
}

impl Keypoints17 {
    pub fn invalid() -> Self {
        Keypoints17 { parts: [[0.0, 0.0]; 17], valid: [false; 17] }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (p, v)) in self.parts.iter().zip(self.valid.iter()).enumerate() {
            if *v {
                if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                    return Err(Error::Data(format!(
                        "keypoint {} at ({}, {}) outside [0,1]x[0,1]",
                        PART_NAMES[i], p[0], p[1]
                    )));
                }
            } else if *p != [0.0, 0.0] {
                return Err(Error::Data(format!(
                    "invalid keypoint {} must carry the (0,0) sentinel",
                    PART_NAMES[i]
                )));
            }
        }
        Ok(())
    }
}

/// One player's detector track: frames keyed by timestamp.
#[derive(Debug, Clone)]
pub struct PlayerTrack {
    pub track_id: i64,
    pub anon_id: u8,
    pub frames: BTreeMap<TimestampMs, Keypoints17>,
}

impl PlayerTrack {
    /// Keypoints at exactly `t`, if a frame exists there.
    pub fn frame_at(&self, t: TimestampMs) -> Option<&Keypoints17> {
        self.frames.get(&t)
    }

    /// Latest valid observation of one part at or before `t`.
    pub fn part_at_or_before(&self, t: TimestampMs, part: usize) -> Option<[f64; 2]> {
        self.frames
            .range(..=t)
            .rev()
            .find_map(|(_, kp)| kp.valid[part].then_some(kp.parts[part]))
    }

    pub fn last_timestamp(&self) -> Option<TimestampMs> {
        self.frames.keys().next_back().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub index: usize,
    pub speaker_anon_id: u8,
    pub start_ms: TimestampMs,
    pub end_ms: TimestampMs,
    pub tokens: Vec<String>,
}

/// One game video's worth of aligned utterances, tracks and keypoint frames.
#[derive(Debug, Clone)]
pub struct Session {
    pub session_id: String,
    pub player_count: u8,
    /// Original-name -> anon slot bijection.
    pub name_table: BTreeMap<String, u8>,
    pub tracks: Vec<PlayerTrack>,
    pub utterances: Vec<Utterance>,
    /// Keypoint sampling interval, for bookkeeping.
    pub frame_interval_ms: TimestampMs,
}

impl Session {
    pub fn track_for(&self, anon_id: u8) -> Option<&PlayerTrack> {
        self.tracks.iter().find(|t| t.anon_id == anon_id)
    }

    pub fn utterance(&self, k: usize) -> Option<&Utterance> {
        self.utterances.get(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_PLAYERS as u8).contains(&self.player_count) {
            return Err(Error::Data(format!("player_count {} out of range", self.player_count)));
        }
        let mut seen = vec![false; self.player_count as usize];
        for (name, &slot) in &self.name_table {
            if slot == 0 || slot > self.player_count {
                return Err(Error::Data(format!("name '{name}' maps to bad slot {slot}")));
            }
            if seen[slot as usize - 1] {
                return Err(Error::Data(format!("slot {slot} mapped twice in name_table")));
            }
            seen[slot as usize - 1] = true;
        }
        let mut track_slots = std::collections::BTreeSet::new();
        for tr in &self.tracks {
            if !track_slots.insert(tr.anon_id) {
                return Err(Error::Data(format!("duplicate anon_id {} among tracks", tr.anon_id)));
            }
            for kp in tr.frames.values() {
                kp.validate()?;
            }
        }
        let mut expected = 0usize;
        for u in &self.utterances {
            if u.index != expected {
                return Err(Error::Data(format!(
                    "utterance indices not contiguous: expected {expected}, found {}",
                    u.index
                )));
            }
            expected += 1;
            if u.start_ms >= u.end_ms {
                return Err(Error::Data(format!("utterance {}: start >= end", u.index)));
            }
            if self.track_for(u.speaker_anon_id).is_none() {
                return Err(Error::Alignment(format!(
                    "utterance {}: speaker Player{} has no track",
                    u.index, u.speaker_anon_id
                )));
            }
            for tok in &u.tokens {
                if self.name_table.contains_key(tok) {
                    return Err(Error::Data(format!(
                        "raw name '{tok}' survives in utterance {}",
                        u.index
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Sti,
    Pcr,
    Mpp,
}

impl TaskKind {
    pub fn all() -> [TaskKind; 3] {
        [TaskKind::Sti, TaskKind::Pcr, TaskKind::Mpp]
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sti" => Ok(TaskKind::Sti),
            "pcr" => Ok(TaskKind::Pcr),
            "mpp" => Ok(TaskKind::Mpp),
            other => Err(Error::Config(format!("unknown task '{other}' (sti|pcr|mpp)"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::Sti => write!(f, "sti"),
            TaskKind::Pcr => write!(f, "pcr"),
            TaskKind::Mpp => write!(f, "mpp"),
        }
    }
}

/// Gold referent: a player slot or (STI only) everyone at the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Player(u8),
    Everyone,
}

impl Label {
    pub fn as_string(&self) -> String {
        match self {
            Label::Player(k) => player_token(*k),
            Label::Everyone => "EVERYONE".to_string(),
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        if s == "EVERYONE" {
            return Some(Label::Everyone);
        }
        parse_player_token(s).map(Label::Player)
    }
}

/// One masked target utterance. `label == None` means the gold referent is
/// unknown; such instances are kept in files but excluded from training and
/// accuracy denominators.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub session_id: String,
    pub target_index: usize,
    pub masked_tokens: Vec<String>,
    /// Position of the single [MASK] within `masked_tokens`.
    pub mask_index: usize,
    /// Which candidate position in the utterance this instance masks
    /// (0-based per kind).
    pub occurrence: usize,
    pub label: Option<Label>,
}

impl TaskInstance {
    pub fn label_is_unknown(&self) -> bool {
        self.label.is_none()
    }

    pub fn mask_count(&self) -> usize {
        self.masked_tokens.iter().filter(|t| *t == MASK_TOKEN).count()
    }
}

// ---------------------------------------------------------------------------
// Gold labels
// ---------------------------------------------------------------------------

/// Annotated gold for one candidate position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gold {
    Known(Label),
    Unknown,
}

/// Gold labels for one session, keyed by (utterance index, kind, occurrence).
#[derive(Debug, Clone, Default)]
pub struct LabelTable {
    entries: HashMap<(usize, TaskKind, usize), Gold>,
}

impl LabelTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, k: usize, kind: TaskKind, occurrence: usize, gold: Gold) {
        self.entries.insert((k, kind, occurrence), gold);
    }

    pub fn get(&self, k: usize, kind: TaskKind, occurrence: usize) -> Option<Gold> {
        self.entries.get(&(k, kind, occurrence)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Raw sessions and anonymization
// ---------------------------------------------------------------------------

/// Token in a raw (pre-anonymization) transcript. Names are marked explicitly
/// so anonymization never has to guess.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawToken {
    Word(String),
    Name(String),
}

#[derive(Debug, Clone)]
pub struct RawUtterance {
    pub index: usize,
    pub speaker_name: String,
    pub start_ms: TimestampMs,
    pub end_ms: TimestampMs,
    pub tokens: Vec<RawToken>,
}

/// A session before anonymization: real names in the roster and transcripts.
#[derive(Debug, Clone)]
pub struct RawSession {
    pub session_id: String,
    /// Player names in slot order: roster[0] becomes Player1.
    pub roster: Vec<String>,
    pub tracks: Vec<PlayerTrack>,
    pub utterances: Vec<RawUtterance>,
    pub frame_interval_ms: TimestampMs,
}

/// Replace every name token with its PlayerK token per a stored bijection.
/// The inverse mapping (`name_table`) round-trips the original transcript.
pub fn anonymize(raw: &RawSession) -> Result<Session> {
    let mut name_table = BTreeMap::new();
    for (i, name) in raw.roster.iter().enumerate() {
        if name_table.insert(name.clone(), (i + 1) as u8).is_some() {
            return Err(Error::Data(format!("duplicate roster name '{name}'")));
        }
    }
    let mut utterances = Vec::with_capacity(raw.utterances.len());
    for u in &raw.utterances {
        let speaker = *name_table.get(&u.speaker_name).ok_or_else(|| {
            Error::Alignment(format!(
                "unknown speaker name '{}' in utterance {}",
                u.speaker_name, u.index
            ))
        })?;
        let mut tokens = Vec::with_capacity(u.tokens.len());
        for tok in &u.tokens {
            match tok {
                RawToken::Word(w) => tokens.push(w.clone()),
                RawToken::Name(n) => {
                    let slot = *name_table.get(n).ok_or_else(|| {
                        Error::Alignment(format!("unknown name token '{n}' in utterance {}", u.index))
                    })?;
                    tokens.push(player_token(slot));
                }
            }
        }
        utterances.push(Utterance {
            index: u.index,
            speaker_anon_id: speaker,
            start_ms: u.start_ms,
            end_ms: u.end_ms,
            tokens,
        });
    }
    Ok(Session {
        session_id: raw.session_id.clone(),
        player_count: raw.roster.len() as u8,
        name_table,
        tracks: raw.tracks.clone(),
        utterances,
        frame_interval_ms: raw.frame_interval_ms,
    })
}

/// Invert `anonymize` using the stored name table.
pub fn deanonymize(session: &Session) -> Result<RawSession> {
    let mut inverse: HashMap<u8, &str> = HashMap::new();
    for (name, &slot) in &session.name_table {
        inverse.insert(slot, name.as_str());
    }
    let mut roster = vec![String::new(); session.player_count as usize];
    for (name, &slot) in &session.name_table {
        roster[slot as usize - 1] = name.clone();
    }
    let mut utterances = Vec::with_capacity(session.utterances.len());
    for u in &session.utterances {
        let speaker_name = inverse
            .get(&u.speaker_anon_id)
            .ok_or_else(|| Error::Data(format!("slot {} missing from name_table", u.speaker_anon_id)))?
            .to_string();
        let tokens = u
            .tokens
            .iter()
            .map(|tok| match parse_player_token(tok) {
                Some(slot) => match inverse.get(&slot) {
                    Some(name) => Ok(RawToken::Name(name.to_string())),
                    None => Err(Error::Data(format!("slot {slot} missing from name_table"))),
                },
                None => Ok(RawToken::Word(tok.clone())),
            })
            .collect::<Result<Vec<_>>>()?;
        utterances.push(RawUtterance {
            index: u.index,
            speaker_name,
            start_ms: u.start_ms,
            end_ms: u.end_ms,
            tokens,
        });
    }
    Ok(RawSession {
        session_id: session.session_id.clone(),
        roster,
        tracks: session.tracks.clone(),
        utterances,
        frame_interval_ms: session.frame_interval_ms,
    })
}

// ---------------------------------------------------------------------------
// Task instance construction
// ---------------------------------------------------------------------------

/// Derive task instances of one kind from a session.
///
/// STI: every utterance containing "you"/"your" yields one instance with the
/// `( To [MASK] )` suffix appended. PCR: every annotated third-person pronoun
/// yields one instance with the pronoun replaced; pronouns without a label
/// entry do not refer to a player and yield nothing. MPP: every PlayerK
/// mention yields one instance, gold derived from the token itself.
pub fn build_task_instances(
    session: &Session,
    kind: TaskKind,
    labels: &LabelTable,
) -> Vec<TaskInstance> {
    let mut out = Vec::new();
    for u in &session.utterances {
        match kind {
            TaskKind::Sti => {
                let has_second_person =
                    u.tokens.iter().any(|t| SECOND_PERSON_TOKENS.contains(&t.as_str()));
                if !has_second_person {
                    continue;
                }
                let mut tokens = u.tokens.clone();
                tokens.extend(["(", "To", MASK_TOKEN, ")"].map(str::to_string));
                let label = match labels.get(u.index, TaskKind::Sti, 0) {
                    Some(Gold::Known(l)) => Some(l),
                    Some(Gold::Unknown) | None => None,
                };
                out.push(TaskInstance {
                    kind,
                    session_id: session.session_id.clone(),
                    target_index: u.index,
                    mask_index: u.tokens.len() + 2,
                    masked_tokens: tokens,
                    occurrence: 0,
                    label,
                });
            }
            TaskKind::Pcr => {
                let mut occurrence = 0;
                for (pos, tok) in u.tokens.iter().enumerate() {
                    if !THIRD_PERSON_PRONOUNS.contains(&tok.as_str()) {
                        continue;
                    }
                    let gold = labels.get(u.index, TaskKind::Pcr, occurrence);
                    occurrence += 1;
                    let label = match gold {
                        Some(Gold::Known(l)) => Some(l),
                        Some(Gold::Unknown) => None,
                        None => continue, // pronoun does not refer to a player
                    };
                    let mut tokens = u.tokens.clone();
                    tokens[pos] = MASK_TOKEN.to_string();
                    out.push(TaskInstance {
                        kind,
                        session_id: session.session_id.clone(),
                        target_index: u.index,
                        mask_index: pos,
                        masked_tokens: tokens,
                        occurrence: occurrence - 1,
                        label,
                    });
                }
            }
            TaskKind::Mpp => {
                let mut occurrence = 0;
                for (pos, tok) in u.tokens.iter().enumerate() {
                    let Some(slot) = parse_player_token(tok) else { continue };
                    let mut tokens = u.tokens.clone();
                    tokens[pos] = MASK_TOKEN.to_string();
                    out.push(TaskInstance {
                        kind,
                        session_id: session.session_id.clone(),
                        target_index: u.index,
                        mask_index: pos,
                        masked_tokens: tokens,
                        occurrence,
                        label: Some(Label::Player(slot)),
                    });
                    occurrence += 1;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Permutations
// ---------------------------------------------------------------------------

/// Bijection on player slots 1..=P.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    map: Vec<u8>,
}

impl Permutation {
    pub fn identity(p: u8) -> Self {
        Permutation { map: (1..=p).collect() }
    }

    /// Panics unless `map` is a bijection on 1..=map.len().
    pub fn from_map(map: Vec<u8>) -> Self {
        let p = map.len() as u8;
        let mut seen = vec![false; p as usize];
        for &v in &map {
            assert!(
                v >= 1 && v <= p && !std::mem::replace(&mut seen[v as usize - 1], true),
                "permutation: mapping {map:?} is not bijective on 1..={p}"
            );
        }
        Permutation { map }
    }

    pub fn random(p: u8, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        use rand::seq::SliceRandom;
        let mut map: Vec<u8> = (1..=p).collect();
        map.shuffle(rng);
        Permutation { map }
    }

    pub fn len(&self) -> u8 {
        self.map.len() as u8
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &v)| v == i as u8 + 1)
    }

    pub fn apply_slot(&self, slot: u8) -> u8 {
        assert!(
            slot >= 1 && slot <= self.len(),
            "permutation: slot {slot} outside 1..={}",
            self.len()
        );
        self.map[slot as usize - 1]
    }

    pub fn apply_label(&self, label: Label) -> Label {
        match label {
            Label::Player(k) => Label::Player(self.apply_slot(k)),
            Label::Everyone => Label::Everyone,
        }
    }

    /// Remap PlayerK tokens; slots beyond this permutation's size pass through.
    pub fn apply_tokens(&self, tokens: &[String]) -> Vec<String> {
        tokens
            .iter()
            .map(|tok| match parse_player_token(tok) {
                Some(k) if k <= self.len() => player_token(self.apply_slot(k)),
                _ => tok.clone(),
            })
            .collect()
    }

    /// Reassign per-slot values: output slot pi(j) receives input slot j.
    /// Slots beyond the permutation keep their values (zero padding).
    pub fn apply_slot_values<T: Copy>(&self, values: &[T; MAX_PLAYERS]) -> [T; MAX_PLAYERS] {
        let mut out = *values;
        for j in 1..=self.len() {
            out[self.apply_slot(j) as usize - 1] = values[j as usize - 1];
        }
        out
    }

    /// `self` after `first`: (self.compose(first))(x) = self(first(x)).
    pub fn compose(&self, first: &Permutation) -> Permutation {
        assert_eq!(self.len(), first.len(), "permutation: size mismatch in compose");
        Permutation {
            map: (1..=self.len()).map(|s| self.apply_slot(first.apply_slot(s))).collect(),
        }
    }

    pub fn inverse(&self) -> Permutation {
        let mut map = vec![0u8; self.map.len()];
        for (i, &v) in self.map.iter().enumerate() {
            map[v as usize - 1] = i as u8 + 1;
        }
        Permutation { map }
    }
}

/// Jointly remap an instance's tokens and label, per-slot position values,
/// and the speaker slot by the same permutation.
pub fn apply_permutation(
    instance: &TaskInstance,
    positions: &[[f64; 2]; MAX_PLAYERS],
    speaker_slot: u8,
    perm: &Permutation,
) -> (TaskInstance, [[f64; 2]; MAX_PLAYERS], u8) {
    let mut out = instance.clone();
    out.masked_tokens = perm.apply_tokens(&instance.masked_tokens);
    out.label = instance.label.map(|l| perm.apply_label(l));
    (out, perm.apply_slot_values(positions), perm.apply_slot(speaker_slot))
}

// ---------------------------------------------------------------------------
// Session splitting
// ---------------------------------------------------------------------------

/// Partition session ids into train/test at the video level. Deterministic
/// for a fixed seed; each side is non-empty.
pub fn split_sessions(
    session_ids: &[String],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test_fraction {test_fraction} outside (0,1)")));
    }
    if session_ids.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 sessions to split, got {}",
            session_ids.len()
        )));
    }
    use rand::seq::SliceRandom;
    let mut ids: Vec<String> = session_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != session_ids.len() {
        return Err(Error::Data("duplicate session ids".to_string()));
    }
    let mut rng = rng::stream(seed, "split");
    ids.shuffle(&mut rng);
    let n_test = ((ids.len() as f64 * test_fraction).round() as usize).clamp(1, ids.len() - 1);
    let test: Vec<String> = ids[..n_test].to_vec();
    let train: Vec<String> = ids[n_test..].to_vec();
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FrameJson {
    t: f64,
    parts: Vec<[f64; 2]>,
    valid: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct TrackJson {
    track_id: i64,
    anon_id: u8,
    frames: Vec<FrameJson>,
}

#[derive(Serialize, Deserialize)]
struct UtteranceJson {
    k: usize,
    speaker: u8,
    t0: f64,
    t1: f64,
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SessionJson {
    session_id: String,
    player_count: u8,
    name_table: BTreeMap<String, u8>,
    frame_interval: f64,
    tracks: Vec<TrackJson>,
    utterances: Vec<UtteranceJson>,
}

impl From<&Session> for SessionJson {
    fn from(s: &Session) -> Self {
        SessionJson {
            session_id: s.session_id.clone(),
            player_count: s.player_count,
            name_table: s.name_table.clone(),
            frame_interval: ms_to_seconds(s.frame_interval_ms),
            tracks: s
                .tracks
                .iter()
                .map(|tr| TrackJson {
                    track_id: tr.track_id,
                    anon_id: tr.anon_id,
                    frames: tr
                        .frames
                        .iter()
                        .map(|(t, kp)| FrameJson {
                            t: ms_to_seconds(*t),
                            parts: kp.parts.to_vec(),
                            valid: kp.valid.to_vec(),
                        })
                        .collect(),
                })
                .collect(),
            utterances: s
                .utterances
                .iter()
                .map(|u| UtteranceJson {
                    k: u.index,
                    speaker: u.speaker_anon_id,
                    t0: ms_to_seconds(u.start_ms),
                    t1: ms_to_seconds(u.end_ms),
                    tokens: u.tokens.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<SessionJson> for Session {
    type Error = Error;
    fn try_from(j: SessionJson) -> Result<Session> {
        let mut tracks = Vec::with_capacity(j.tracks.len());
        for tj in j.tracks {
            let mut frames = BTreeMap::new();
            for f in tj.frames {
                if f.parts.len() != 17 || f.valid.len() != 17 {
                    return Err(Error::Data(format!(
                        "track {}: frame at t={} must carry 17 parts",
                        tj.track_id, f.t
                    )));
                }
                let mut kp = Keypoints17::invalid();
                kp.parts.copy_from_slice(&f.parts);
                kp.valid.copy_from_slice(&f.valid);
                frames.insert(seconds_to_ms(f.t), kp);
            }
            tracks.push(PlayerTrack { track_id: tj.track_id, anon_id: tj.anon_id, frames });
        }
        let utterances = j
            .utterances
            .into_iter()
            .map(|u| Utterance {
                index: u.k,
                speaker_anon_id: u.speaker,
                start_ms: seconds_to_ms(u.t0),
                end_ms: seconds_to_ms(u.t1),
                tokens: u.tokens,
            })
            .collect();
        let session = Session {
            session_id: j.session_id,
            player_count: j.player_count,
            name_table: j.name_table,
            tracks,
            utterances,
            frame_interval_ms: seconds_to_ms(j.frame_interval),
        };
        session.validate()?;
        Ok(session)
    }
}

pub fn session_to_json_bytes(session: &Session) -> Vec<u8> {
    serde_json::to_vec(&SessionJson::from(session)).expect("session serialization cannot fail")
}

pub fn save_session(session: &Session, path: &Path) -> Result<()> {
    std::fs::write(path, session_to_json_bytes(session)).map_err(|e| Error::io(path, e))
}

pub fn load_session(path: &Path) -> Result<Session> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let j: SessionJson = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
    Session::try_from(j)
}

// ---------------------------------------------------------------------------
// Gold manifest (one per corpus directory)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestLabel {
    pub k: usize,
    pub kind: TaskKind,
    pub occurrence: usize,
    pub label: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSession {
    pub session_id: String,
    pub labels: Vec<ManifestLabel>,
}

/// Gold labels for every instance of every session in a corpus.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub sessions: Vec<ManifestSession>,
}

impl Manifest {
    pub fn label_table(&self, session_id: &str) -> LabelTable {
        let mut table = LabelTable::new();
        for s in self.sessions.iter().filter(|s| s.session_id == session_id) {
            for l in &s.labels {
                let gold = if l.label == "UNKNOWN" {
                    Gold::Unknown
                } else {
                    match Label::parse(&l.label) {
                        Some(lab) => Gold::Known(lab),
                        None => continue,
                    }
                };
                table.insert(l.k, l.kind, l.occurrence, gold);
            }
        }
        table
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self).expect("manifest serialization cannot fail");
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
    }
}

#[cfg(test)]
mod tests;
