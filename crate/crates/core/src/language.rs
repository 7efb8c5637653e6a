//! The verbal path: closed-vocabulary tokenization, context-window assembly
//! around the masked target utterance, and a small trainable masked-context
//! transformer encoder. The hidden state at the [MASK] position, projected to
//! the shared channel width, is the conversation context feature.

use std::collections::HashMap;
use std::path::Path;

use crate::datamodel::{parse_player_token, player_token, Session, TaskInstance, MASK_TOKEN};
use crate::encoder::{linear, TransformerStack};
use crate::error::{Error, Result};
use crate::presets::{ModelDims, MAX_PLAYERS};
use crate::tensorcore::{Graph, ParamStore, TensorRef};
use crate::Permutation;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const AGG: &str = "[AGG]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const AGG_ID: u32 = 5;
const PLAYER_BASE: u32 = 6;

/// Token ids are dense and stable for a given word list: specials first, then
/// the sorted corpus vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build from the corpus word list. Player tokens, brackets and the
    /// address-tag words are specials and need not be supplied.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Vocab {
        let mut tokens: Vec<String> =
            vec![PAD.into(), UNK.into(), CLS.into(), SEP.into(), MASK_TOKEN.into(), AGG.into()];
        for slot in 1..=MAX_PLAYERS as u8 {
            tokens.push(player_token(slot));
        }
        tokens.push("(".into());
        tokens.push(")".into());
        tokens.push("To".into());
        let mut rest: Vec<String> =
            words.into_iter().filter(|w| !tokens.iter().any(|t| t == w)).collect();
        rest.sort();
        rest.dedup();
        tokens.extend(rest);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a token; unknown words map to [UNK].
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn player_id(&self, slot: u8) -> u32 {
        PLAYER_BASE + slot as u32 - 1
    }

    /// Stable content hash, mixed into the checkpoint config hash.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tokens {
            for &b in t.as_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tokens.join("\n") + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.first().map(String::as_str) != Some(PAD) {
            return Err(Error::Data(format!("{}: vocabulary must start with {PAD}", path.display())));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(Vocab { tokens, index })
    }
}

/// Tokenized `[CLS] u_{k-n} [SEP] ... u_k ... u_{k+n} [SEP]` window around one
/// masked target utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow {
    pub ids: Vec<u32>,
    /// Index of the single [MASK] in `ids`.
    pub mask_position: usize,
    /// (start, end) id ranges of each included utterance, in order.
    pub segments: Vec<(usize, usize)>,
}

impl ContextWindow {
    pub fn mask_count(&self) -> usize {
        self.ids.iter().filter(|&&id| id == MASK_ID).count()
    }
}

fn ids_for_tokens(vocab: &Vocab, tokens: &[String], perm: Option<&Permutation>) -> Vec<u32> {
    tokens
        .iter()
        .map(|tok| match (perm, parse_player_token(tok)) {
            (Some(p), Some(slot)) if slot <= p.len() => vocab.player_id(p.apply_slot(slot)),
            _ => vocab.id(tok),
        })
        .collect()
}

/// Assemble the context window: up to `n` utterances on each side of the
/// target (fewer at session edges), every utterance [SEP]-terminated, at most
/// `max_len` ids. Context is added nearest-first in whole utterances, so
/// truncation drops outermost context; the target utterance itself is only
/// trimmed (tail first, never the [MASK]) when it alone exceeds the budget.
pub fn build_context(
    session: &Session,
    instance: &TaskInstance,
    n: usize,
    vocab: &Vocab,
    max_len: usize,
    perm: Option<&Permutation>,
) -> Result<ContextWindow> {
    let k = instance.target_index;
    if session.utterance(k).is_none() {
        return Err(Error::Data(format!(
            "session {}: instance targets missing utterance {k}",
            session.session_id
        )));
    }
    let mut target = ids_for_tokens(vocab, &instance.masked_tokens, perm);
    target.push(SEP_ID);
    let mut mask_in_target = instance.mask_index;

    // Degenerate case: the target alone exceeds the budget.
    if 1 + target.len() > max_len {
        let budget = max_len - 2; // [CLS] plus the kept [SEP]
        if mask_in_target >= budget {
            return Err(Error::Data(format!(
                "window overflow: [MASK] at {mask_in_target} cannot fit max_len {max_len}"
            )));
        }
        target.truncate(budget);
        target.push(SEP_ID);
    }

    let mut budget = max_len - 1 - target.len();
    let utt_ids = |idx: usize| -> Vec<u32> {
        let u = &session.utterances[idx];
        let mut ids = ids_for_tokens(vocab, &u.tokens, perm);
        ids.push(SEP_ID);
        ids
    };

    let mut before: Vec<Vec<u32>> = Vec::new();
    let mut after: Vec<Vec<u32>> = Vec::new();
    let mut before_open = true;
    let mut after_open = true;
    for dist in 1..=n {
        if before_open {
            if let Some(idx) = k.checked_sub(dist) {
                let ids = utt_ids(idx);
                if ids.len() <= budget {
                    budget -= ids.len();
                    before.push(ids);
                } else {
                    before_open = false;
                }
            } else {
                before_open = false;
            }
        }
        if after_open {
            let idx = k + dist;
            if idx < session.utterances.len() {
                let ids = utt_ids(idx);
                if ids.len() <= budget {
                    budget -= ids.len();
                    after.push(ids);
                } else {
                    after_open = false;
                }
            } else {
                after_open = false;
            }
        }
    }

    let mut ids = vec![CLS_ID];
    let mut segments = Vec::new();
    for utt in before.iter().rev() {
        let start = ids.len();
        ids.extend_from_slice(utt);
        segments.push((start, ids.len()));
    }
    let start = ids.len();
    mask_in_target += ids.len();
    ids.extend_from_slice(&target);
    segments.push((start, ids.len()));
    for utt in &after {
        let start = ids.len();
        ids.extend_from_slice(utt);
        segments.push((start, ids.len()));
    }

    debug_assert!(ids.len() <= max_len);
    debug_assert_eq!(ids[mask_in_target], MASK_ID);
    Ok(ContextWindow { ids, mask_position: mask_in_target, segments })
}

fn language_stack(dims: &ModelDims) -> TransformerStack {
    TransformerStack {
        prefix: "language.encoder".to_string(),
        layers: dims.lang_layers,
        width: dims.lang_width,
        ffn: dims.lang_ffn,
        heads: dims.lang_heads,
        dropout: dims.dropout,
    }
}

/// Register every language-path parameter (prefix `language.`).
pub fn init_params(store: &mut ParamStore, seed: u64, dims: &ModelDims, vocab: &Vocab) {
    store.insert_embedding(seed, "language.embed.table", vocab.len(), dims.lang_width);
    language_stack(dims).init(store, seed);
    crate::encoder::init_linear(store, seed, "language.project", dims.lang_width, dims.d);
}

/// Encode the window and project the hidden state at the [MASK] position to
/// the shared width d. [PAD] positions are excluded from attention, so
/// trailing padding cannot change the output.
pub fn encode_masked_context(
    g: &mut Graph,
    store: &ParamStore,
    window: &ContextWindow,
    dims: &ModelDims,
) -> TensorRef {
    assert!(
        window.mask_position < window.ids.len(),
        "encode_masked_context: mask position {} out of {} ids",
        window.mask_position,
        window.ids.len()
    );
    let ids: Vec<usize> = window.ids.iter().map(|&i| i as usize).collect();
    let table = g.param(store, "language.embed.table");
    let emb = g.embedding_lookup(table, &ids);
    let pos = g.positional_encoding_add(emb, 0, ids.len(), 0);
    let key_valid: Vec<bool> = window.ids.iter().map(|&id| id != PAD_ID).collect();
    let hidden = language_stack(dims).forward(g, store, pos, Some(&key_valid));
    let at_mask = g.select_row(hidden, window.mask_position);
    linear(g, store, "language.project", at_mask)
}

#[cfg(test)]
mod tests;
