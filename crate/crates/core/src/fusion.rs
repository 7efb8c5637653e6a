//! Aligned multimodal fusion and the end-to-end model: aggregation-token
//! fusion of the visual interaction sequence with the masked-context feature,
//! the classification head, the full forward pass, and the permutation
//! training step.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, HashMap};

use crate::datamodel::{Label, Permutation, Session, TaskInstance, TaskKind, TimestampMs};
use crate::error::{Error, Result};
use crate::language::{self, Vocab};
use crate::presets::{ModelDims, MAX_PLAYERS};
use crate::rng;
use crate::tensorcore::params::AdamConfig;
use crate::tensorcore::{Graph, ParamStore, TensorRef};
use crate::visual::{self, PositionBuffer};
use crate::encoder::{linear, TransformerStack};

/// Which parts of the model are switched off for an ablation row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationSet {
    /// Replace the whole visual sequence with a learned null token.
    pub no_visual: bool,
    /// Feed only head keypoints to the kinesics encoder.
    pub no_gesture: bool,
    /// Feed only limb keypoints to the kinesics encoder.
    pub no_gaze: bool,
    /// Train without player permutation.
    pub no_permutation: bool,
    /// Skip position correction from the last-observed buffer.
    pub no_correction: bool,
}

impl AblationSet {
    pub fn parse(list: &str) -> Result<AblationSet> {
        let mut set = AblationSet::default();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "no-visual" => set.no_visual = true,
                "no-gesture" => set.no_gesture = true,
                "no-gaze" => set.no_gaze = true,
                "no-permutation" => set.no_permutation = true,
                "no-correction" => set.no_correction = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation '{other}' (no-visual|no-gesture|no-gaze|no-permutation|no-correction)"
                    )))
                }
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.no_gesture && self.no_gaze {
            return Err(Error::Config(
                "no-gesture and no-gaze together leave no kinesics input".to_string(),
            ));
        }
        Ok(())
    }

    pub fn to_list(&self) -> String {
        let mut parts = Vec::new();
        if self.no_visual {
            parts.push("no-visual");
        }
        if self.no_gesture {
            parts.push("no-gesture");
        }
        if self.no_gaze {
            parts.push("no-gaze");
        }
        if self.no_permutation {
            parts.push("no-permutation");
        }
        if self.no_correction {
            parts.push("no-correction");
        }
        parts.join(",")
    }
}

/// Dimensions plus task-level wiring of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub task: TaskKind,
    pub context_n: usize,
    pub frames: usize,
    pub frame_interval_ms: TimestampMs,
    pub ablation: AblationSet,
}

impl ModelConfig {
    /// STI classifies into player slots plus EVERYONE; PCR/MPP into slots only.
    pub fn classes(&self) -> usize {
        match self.task {
            TaskKind::Sti => MAX_PLAYERS + 1,
            _ => MAX_PLAYERS,
        }
    }

    pub fn label_class(&self, label: Label) -> Result<usize> {
        match label {
            Label::Player(k) => Ok(k as usize - 1),
            Label::Everyone if self.task == TaskKind::Sti => Ok(MAX_PLAYERS),
            Label::Everyone => {
                Err(Error::Data("EVERYONE label outside the speaking-target task".to_string()))
            }
        }
    }

    pub fn class_label(&self, class: usize) -> Label {
        if class == MAX_PLAYERS {
            Label::Everyone
        } else {
            Label::Player(class as u8 + 1)
        }
    }

    /// Stable description hashed into checkpoints; any architectural change
    /// must show up here.
    pub fn description(&self, vocab: &Vocab) -> String {
        format!(
            "task={} classes={} n={} frames={} interval={} vocab={:#018x} dims={:?}",
            self.task,
            self.classes(),
            self.context_n,
            self.frames,
            self.frame_interval_ms,
            vocab.hash(),
            self.dims,
        )
    }
}

/// Class scores for one instance. The argmax breaks ties toward the lowest
/// class index.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub class: usize,
    pub label: Label,
}

impl Prediction {
    pub fn from_logits(logits: &[f64], cfg: &ModelConfig) -> Prediction {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        let probs: Vec<f64> = exp.iter().map(|v| v / sum).collect();
        let mut class = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[class] {
                class = i;
            }
        }
        Prediction { logits: logits.to_vec(), probs, class, label: cfg.class_label(class) }
    }
}

/// Register every trainable parameter of the full model.
pub fn init_params(store: &mut ParamStore, seed: u64, cfg: &ModelConfig, vocab: &Vocab) {
    visual::init_params(store, seed, &cfg.dims);
    language::init_params(store, seed, &cfg.dims, vocab);
    store.insert_embedding(seed, "fusion.agg", 1, cfg.dims.d);
    store.insert_embedding(seed, "fusion.null_visual", 1, cfg.dims.d);
    fusion_stack(&cfg.dims).init(store, seed);
    crate::encoder::init_linear(store, seed, "fusion.head", cfg.dims.d, cfg.classes());
}

fn fusion_stack(dims: &ModelDims) -> TransformerStack {
    TransformerStack {
        prefix: "fusion.encoder".to_string(),
        layers: dims.fusion_layers,
        width: dims.d,
        ffn: dims.fusion_ffn,
        heads: dims.fusion_heads,
        dropout: dims.dropout,
    }
}

pub struct FuseOutput {
    pub aggregated: TensorRef,
    pub fused_len: usize,
}

/// Concatenate [aggregation token; visual sequence; context feature], add
/// positional encodings to the visual rows only (indices 1..=T+1), run the
/// multimodal transformer, and read the aggregation row.
pub fn fuse(
    g: &mut Graph,
    store: &ParamStore,
    visual_seq: TensorRef,
    context_feat: TensorRef,
    dims: &ModelDims,
) -> FuseOutput {
    let (vis_rows, vis_d) = g.shape(visual_seq);
    assert_eq!(vis_d, dims.d, "fuse: visual width {vis_d} != {}", dims.d);
    assert_eq!(g.shape(context_feat), (1, dims.d), "fuse: context width mismatch");
    let agg = g.param(store, "fusion.agg");
    let seq = g.concat_rows(&[agg, visual_seq, context_feat]);
    let seq = g.positional_encoding_add(seq, 1, vis_rows, 1);
    let out = fusion_stack(dims).forward(g, store, seq, None);
    FuseOutput { aggregated: g.select_row(out, 0), fused_len: vis_rows + 2 }
}

/// Affine head over the aggregated feature.
pub fn classify(g: &mut Graph, store: &ParamStore, aggregated: TensorRef) -> TensorRef {
    linear(g, store, "fusion.head", aggregated)
}

/// Everything the composed forward pass exposes for training, evaluation and
/// gradient diagnostics.
pub struct ForwardArtifacts {
    pub loss: Option<TensorRef>,
    pub logits: TensorRef,
    pub prediction: Prediction,
    pub gold_class: Option<usize>,
    pub fused_len: usize,
    /// Raw kinesics input leaf (frames x parts, nose-relative), when the
    /// visual path ran.
    pub kin_input: Option<TensorRef>,
    /// Raw position input leaf (slots x 2), when the visual path ran.
    pub pos_input: Option<TensorRef>,
}

/// Compose the full model on one instance: window extraction, position
/// correction, kinesics/position encoders, visual interaction encoder,
/// context window, masked-context encoder, fusion and the classification
/// head. `perm` remaps player tokens, position slots, the speaker label and
/// the gold label jointly.
pub fn forward_full(
    g: &mut Graph,
    store: &ParamStore,
    session: &Session,
    buffer: &PositionBuffer,
    instance: &TaskInstance,
    vocab: &Vocab,
    cfg: &ModelConfig,
    perm: Option<&Permutation>,
) -> Result<ForwardArtifacts> {
    let mut kin_input = None;
    let mut pos_input = None;

    let visual_seq = if cfg.ablation.no_visual {
        None
    } else {
        let mut windows = visual::extract_windows(session, instance, cfg.frames, cfg.frame_interval_ms)?;
        let mut positions = if cfg.ablation.no_correction {
            windows.positions.clone()
        } else {
            visual::correct_positions(&windows.positions, buffer, windows.t0, windows.speaker_nose_abs)
        };
        if let Some(p) = perm {
            positions = positions.permuted(p);
        }
        windows.kinesics.part_mask = visual::part_mask(cfg.ablation.no_gesture, cfg.ablation.no_gaze);
        let kin = visual::encode_kinesics(g, store, &windows.kinesics, &cfg.dims);
        let pos = visual::encode_positions(g, store, &positions, &cfg.dims);
        kin_input = Some(kin.input);
        pos_input = Some(pos.input);
        Some(visual::visual_interaction_encode(g, store, kin.features, pos.feature, &cfg.dims))
    };

    let window = language::build_context(session, instance, cfg.context_n, vocab, cfg.dims.max_len, perm)?;
    let context_feat = language::encode_masked_context(g, store, &window, &cfg.dims);

    let visual_seq = match visual_seq {
        Some(seq) => seq,
        None => {
            // Learned null token stands in for every visual position, keeping
            // the fused sequence shape and parameter count comparable.
            let null = g.param(store, "fusion.null_visual");
            let rows = vec![null; cfg.frames + 1];
            g.concat_rows(&rows)
        }
    };

    let fused = fuse(g, store, visual_seq, context_feat, &cfg.dims);
    let logits = classify(g, store, fused.aggregated);
    let prediction = Prediction::from_logits(g.value(logits), cfg);

    let gold = match (instance.label, perm) {
        (Some(label), Some(p)) => Some(p.apply_label(label)),
        (Some(label), None) => Some(label),
        (None, _) => None,
    };
    let gold_class = gold.map(|l| cfg.label_class(l)).transpose()?;
    let loss = gold_class.map(|c| g.cross_entropy(logits, c));

    Ok(ForwardArtifacts {
        loss,
        logits,
        prediction,
        gold_class,
        fused_len: fused.fused_len,
        kin_input,
        pos_input,
    })
}

/// Sessions indexed by id, each with its precomputed position buffer.
pub struct CorpusIndex {
    sessions: HashMap<String, (Session, PositionBuffer)>,
}

impl CorpusIndex {
    pub fn build(sessions: Vec<Session>) -> Self {
        let sessions = sessions
            .into_iter()
            .map(|s| {
                let buffer = PositionBuffer::from_session(&s);
                (s.session_id.clone(), (s, buffer))
            })
            .collect();
        CorpusIndex { sessions }
    }

    pub fn get(&self, session_id: &str) -> Result<&(Session, PositionBuffer)> {
        self.sessions.get(session_id).ok_or_else(|| {
            Error::Data(format!("instance references unknown session '{session_id}'"))
        })
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }
}

/// How the per-iteration player permutation is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermMode {
    /// Plain step, no permutation machinery.
    Disabled,
    /// Run the permutation path with the identity map (bit-equal to Disabled).
    ForcedIdentity,
    /// Fresh random permutation per instance per iteration.
    Random,
}

pub struct TrainSettings<'a> {
    pub cfg: &'a ModelConfig,
    pub vocab: &'a Vocab,
    pub lr_map: &'a [(&'a str, f64)],
    pub adam: AdamConfig,
    pub seed: u64,
    pub perm_mode: PermMode,
    /// Scan graphs for non-finite values after backward.
    pub strict_numerics: bool,
    /// Multiplier on every learning rate this step (schedules).
    pub lr_scale: f64,
}

fn instance_perm(
    mode: PermMode,
    player_count: u8,
    seed: u64,
    step: u64,
    index: usize,
) -> Option<Permutation> {
    match mode {
        PermMode::Disabled => None,
        PermMode::ForcedIdentity => Some(Permutation::identity(player_count)),
        PermMode::Random => {
            let mut r: ChaCha8Rng = rng::stream2(seed, "perm", step, index as u64);
            Some(Permutation::random(player_count, &mut r))
        }
    }
}

/// One training iteration over a batch: per instance, sample a permutation,
/// apply it jointly to tokens, position slots, speaker label and gold label,
/// run the forward pass, and take one Adam step on the mean loss. Gradients
/// are reduced in batch order, so the step is deterministic under any thread
/// count.
pub fn train_step_with_permutation(
    store: &mut ParamStore,
    corpus: &CorpusIndex,
    batch: &[&TaskInstance],
    step: u64,
    settings: &TrainSettings,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".to_string()));
    }
    let per_instance: Vec<Result<(f64, BTreeMap<String, Vec<f64>>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, instance)| {
            let (session, buffer) = corpus.get(&instance.session_id)?;
            if instance.label.is_none() {
                return Err(Error::Data(format!(
                    "unlabeled instance in training batch (session {}, k={})",
                    instance.session_id, instance.target_index
                )));
            }
            let perm =
                instance_perm(settings.perm_mode, session.player_count, settings.seed, step, i);
            let mut g = Graph::train(rng::stream2(settings.seed, "dropout", step, i as u64));
            let artifacts = forward_full(
                &mut g,
                store,
                session,
                buffer,
                instance,
                settings.vocab,
                settings.cfg,
                perm.as_ref(),
            )?;
            let loss = artifacts.loss.expect("labeled instance always has a loss");
            let loss_value = g.value(loss)[0];
            g.backward(loss);
            if settings.strict_numerics {
                g.assert_all_finite()?;
            }
            Ok((loss_value, g.param_grads()))
        })
        .collect();

    let scale = 1.0 / batch.len() as f64;
    let mut mean_loss = 0.0;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for result in per_instance {
        let (loss_value, instance_grads) = result?;
        mean_loss += loss_value * scale;
        for (name, grad) in instance_grads {
            match grads.get_mut(&name) {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(grad.iter()) {
                        *a += v * scale;
                    }
                }
                None => {
                    grads.insert(name, grad.iter().map(|v| v * scale).collect());
                }
            }
        }
    }
    if !mean_loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at training step {step}")));
    }
    // Parameters untouched this step (ablated paths) get explicit zero
    // gradients; Adam requires a complete gradient map.
    for name in store.names().map(str::to_owned).collect::<Vec<_>>() {
        grads.entry(name.clone()).or_insert_with(|| {
            let p = store.get(&name).expect("name enumerated from store");
            vec![0.0; p.value.len()]
        });
    }
    let scaled: Vec<(String, f64)> = settings
        .lr_map
        .iter()
        .map(|(prefix, lr)| (prefix.to_string(), lr * settings.lr_scale))
        .collect();
    let scaled_refs: Vec<(&str, f64)> = scaled.iter().map(|(p, lr)| (p.as_str(), *lr)).collect();
    store.adam_step(&grads, &scaled_refs, settings.adam)?;
    Ok(mean_loss)
}

/// Evaluation-mode forward pass: prediction plus the (possibly permuted)
/// gold class.
pub fn predict(
    store: &ParamStore,
    corpus: &CorpusIndex,
    instance: &TaskInstance,
    vocab: &Vocab,
    cfg: &ModelConfig,
    perm: Option<&Permutation>,
) -> Result<(Prediction, Option<usize>)> {
    let (session, buffer) = corpus.get(&instance.session_id)?;
    let mut g = Graph::eval();
    let artifacts = forward_full(&mut g, store, session, buffer, instance, vocab, cfg, perm)?;
    Ok((artifacts.prediction, artifacts.gold_class))
}
