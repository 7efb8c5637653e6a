//! Corpus loading, the epoch loop, evaluation and checkpointing.

use rayon::prelude::*;
use std::path::PathBuf;
use std::time::Instant;

use super::config::RunConfig;
use super::metrics::{ConfusionMatrix, MetricsCsv, MetricsRecord};
use crate::corpus;
use crate::datamodel::{build_task_instances, Permutation, TaskInstance, TaskKind};
use crate::error::{Error, Result};
use crate::fusion::{
    self, CorpusIndex, ModelConfig, PermMode, TrainSettings,
};
use crate::language::Vocab;
use crate::rng;
use crate::tensorcore::params::AdamConfig;
use crate::tensorcore::{checkpoint, ParamStore};

/// Corpus plus derived instances, split at the session level.
pub struct PreparedData {
    pub corpus: CorpusIndex,
    pub train_instances: Vec<TaskInstance>,
    pub test_instances: Vec<TaskInstance>,
    pub train_unknown: usize,
    pub test_unknown: usize,
}

/// Load a corpus directory and derive one task's instances, split at the
/// video level. Unknown-gold instances are counted and excluded.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (sessions, manifest) = corpus::load_corpus(&cfg.corpus_dir)?;
    prepare_data_in_memory(cfg, sessions, &manifest)
}

pub fn prepare_data_in_memory(
    cfg: &RunConfig,
    sessions: Vec<crate::datamodel::Session>,
    manifest: &crate::datamodel::Manifest,
) -> Result<PreparedData> {
    let ids: Vec<String> = sessions.iter().map(|s| s.session_id.clone()).collect();
    let (train_ids, test_ids) =
        crate::datamodel::split_sessions(&ids, cfg.test_fraction, cfg.seed)?;
    let mut train_instances = Vec::new();
    let mut test_instances = Vec::new();
    let mut train_unknown = 0;
    let mut test_unknown = 0;
    for session in &sessions {
        let table = manifest.label_table(&session.session_id);
        let instances = build_task_instances(session, cfg.task, &table);
        let is_train = train_ids.contains(&session.session_id);
        for inst in instances {
            let unknown = inst.label_is_unknown();
            if is_train {
                if unknown {
                    train_unknown += 1;
                } else {
                    train_instances.push(inst);
                }
            } else if unknown {
                test_unknown += 1;
            } else {
                test_instances.push(inst);
            }
        }
    }
    let _ = test_ids;
    if train_instances.is_empty() {
        return Err(Error::Data(format!(
            "no labeled {} instances in the training split of {}",
            cfg.task,
            cfg.corpus_dir.display()
        )));
    }
    Ok(PreparedData {
        corpus: CorpusIndex::build(sessions),
        train_instances,
        test_instances,
        train_unknown,
        test_unknown,
    })
}

/// Evaluate a parameter snapshot over instances. Parameters are snapped to
/// checkpoint (f32) precision first, so metrics are identical before and
/// after a save/load round trip. With `shuffle_seed`, every instance is
/// evaluated under its own random identity permutation.
pub fn evaluate(
    store: &ParamStore,
    corpus_index: &CorpusIndex,
    instances: &[TaskInstance],
    model: &ModelConfig,
    vocab: &Vocab,
    shuffle_seed: Option<u64>,
) -> Result<(ConfusionMatrix, f64)> {
    let snapped = store.snapped_to_f32();
    let results: Vec<Result<(usize, usize, f64)>> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let perm = shuffle_seed.map(|seed| {
                let (session, _) = corpus_index.get(&inst.session_id)?;
                let mut r = rng::stream2(seed, "evalperm", i as u64, 0);
                Ok::<Permutation, Error>(Permutation::random(session.player_count, &mut r))
            });
            let perm = match perm {
                Some(Ok(p)) => Some(p),
                Some(Err(e)) => return Err(e),
                None => None,
            };
            let (prediction, gold_class) =
                fusion::predict(&snapped, corpus_index, inst, vocab, model, perm.as_ref())?;
            let gold = gold_class.ok_or_else(|| {
                Error::Data("unlabeled instance reached evaluation".to_string())
            })?;
            let loss = -prediction.probs[gold].max(f64::MIN_POSITIVE).ln();
            Ok((gold, prediction.class, loss))
        })
        .collect();

    let mut confusion = ConfusionMatrix::new(model.classes());
    let mut loss_sum = 0.0;
    let mut n = 0usize;
    for r in results {
        let (gold, pred, loss) = r?;
        confusion.record(gold, pred);
        loss_sum += loss;
        n += 1;
    }
    let mean_loss = if n == 0 { 0.0 } else { loss_sum / n as f64 };
    Ok((confusion, mean_loss))
}

pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub store: ParamStore,
}

impl TrainOutcome {
    /// Test-split records only, in epoch order.
    pub fn test_records(&self) -> Vec<&MetricsRecord> {
        self.records.iter().filter(|r| r.split == "test").collect()
    }
}

/// Full training run: shuffled permutation-training batches, per-epoch
/// evaluation, append-only metrics CSV, best-accuracy checkpoint. With
/// `epochs = 0`, the initialized model is evaluated once and checkpointed.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let data = prepare_data(cfg)?;
    train_prepared(cfg, data)
}

pub fn train_prepared(cfg: &RunConfig, data: PreparedData) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let vocab = corpus::vocabulary();
    let model = cfg.model_config();
    let mut store = ParamStore::new();
    fusion::init_params(&mut store, cfg.seed, &model, &vocab);

    vocab.save(&cfg.out_dir.join("vocab.txt"))?;
    std::fs::write(cfg.out_dir.join("config.txt"), cfg.to_kv())
        .map_err(|e| Error::io(cfg.out_dir.join("config.txt"), e))?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let csv = MetricsCsv::create(&metrics_path)?;
    let checkpoint_path = cfg.out_dir.join("checkpoint.rfo");
    let hash = checkpoint::config_hash(&model.description(&vocab));

    let perm_mode =
        if cfg.ablation.no_permutation { PermMode::Disabled } else { PermMode::Random };
    let mut settings = TrainSettings {
        cfg: &model,
        vocab: &vocab,
        lr_map: &cfg.lr_map(),
        adam: AdamConfig::default(),
        seed: cfg.seed,
        perm_mode,
        strict_numerics: cfg.strict_numerics,
        lr_scale: 1.0,
    };
    let batches_per_epoch = data.train_instances.len().div_ceil(cfg.batch);
    let total_steps = (batches_per_epoch * cfg.epochs) as u64;

    let shuffle_seed = cfg.eval_shuffled.then_some(cfg.seed);
    let mut records = Vec::new();
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut step: u64 = 0;

    let eval_epoch = |epoch: usize,
                          store: &ParamStore,
                          records: &mut Vec<MetricsRecord>,
                          best_accuracy: &mut f64,
                          best_epoch: &mut usize,
                          wall: f64|
     -> Result<()> {
        let started = Instant::now();
        let (confusion, loss) =
            evaluate(store, &data.corpus, &data.test_instances, &model, &vocab, shuffle_seed)?;
        let record = MetricsRecord::from_confusion(
            epoch,
            "test",
            cfg.task,
            confusion,
            loss,
            data.test_unknown,
            wall + started.elapsed().as_secs_f64(),
        );
        csv.append(&record)?;
        if record.accuracy > *best_accuracy {
            *best_accuracy = record.accuracy;
            *best_epoch = epoch;
            checkpoint::save(store, hash, &checkpoint_path)?;
        }
        records.push(record);
        Ok(())
    };

    if cfg.epochs == 0 {
        eval_epoch(0, &store, &mut records, &mut best_accuracy, &mut best_epoch, 0.0)?;
    }

    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        settings.perm_mode = if cfg.ablation.no_permutation || epoch <= cfg.perm_warmup_epochs {
            PermMode::Disabled
        } else {
            PermMode::Random
        };
        let mut order: Vec<usize> = (0..data.train_instances.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut r = rng::stream2(cfg.seed, "shuffle", epoch as u64, 0);
            order.shuffle(&mut r);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&TaskInstance> =
                chunk.iter().map(|&i| &data.train_instances[i]).collect();
            settings.lr_scale = lr_schedule(step, total_steps);
            let loss = fusion::train_step_with_permutation(
                &mut store,
                &data.corpus,
                &batch,
                step,
                &settings,
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => {
                    let ids: Vec<String> = batch
                        .iter()
                        .map(|b| format!("{}#{}", b.session_id, b.target_index))
                        .collect();
                    Error::Numeric(format!(
                        "{msg} (epoch {epoch}, batch {batches}: {})",
                        ids.join(" ")
                    ))
                }
                other => other,
            })?;
            loss_sum += loss;
            step += 1;
            batches += 1;
        }
        let train_wall = epoch_start.elapsed().as_secs_f64();
        let train_record = MetricsRecord {
            epoch,
            split: "train".to_string(),
            task: cfg.task,
            n_eval: data.train_instances.len(),
            n_unknown: data.train_unknown,
            loss: loss_sum / batches.max(1) as f64,
            accuracy: 0.0,
            macro_precision: 0.0,
            macro_recall: 0.0,
            accuracy_without_everyone: None,
            confusion: ConfusionMatrix::new(model.classes()),
            wall_seconds: train_wall,
        };
        csv.append(&train_record)?;
        records.push(train_record);
        eval_epoch(epoch, &store, &mut records, &mut best_accuracy, &mut best_epoch, train_wall)?;
    }

    Ok(TrainOutcome {
        records,
        best_accuracy,
        best_epoch,
        checkpoint_path,
        metrics_path,
        store,
    })
}

/// Linear warmup over the first steps, then cosine decay to a floor; keeps
/// early updates stable and consolidates late training.
fn lr_schedule(step: u64, total_steps: u64) -> f64 {
    const WARMUP: u64 = 150;
    const FLOOR: f64 = 0.1;
    if step < WARMUP.min(total_steps / 10 + 1) {
        let warm = WARMUP.min(total_steps / 10 + 1);
        return (step + 1) as f64 / warm as f64;
    }
    if total_steps <= 1 {
        return 1.0;
    }
    let progress = step as f64 / total_steps as f64;
    FLOOR + (1.0 - FLOOR) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Load a checkpoint against a run config, verifying the config hash and the
/// parameter shapes.
pub fn load_checkpoint(cfg: &RunConfig, path: &std::path::Path) -> Result<(ParamStore, Vocab)> {
    let vocab = corpus::vocabulary();
    let model = cfg.model_config();
    let hash = checkpoint::config_hash(&model.description(&vocab));
    let store = checkpoint::load(path, hash)?;
    let mut reference = ParamStore::new();
    fusion::init_params(&mut reference, cfg.seed, &model, &vocab);
    checkpoint::check_shapes(&store, &reference)?;
    Ok((store, vocab))
}

/// Evaluate a checkpoint over a corpus' test split (or the whole corpus).
pub fn evaluate_run(cfg: &RunConfig, checkpoint_path: &std::path::Path) -> Result<MetricsRecord> {
    let (store, vocab) = load_checkpoint(cfg, checkpoint_path)?;
    let data = prepare_data(cfg)?;
    let model = cfg.model_config();
    let started = Instant::now();
    let (confusion, loss) = evaluate(
        &store,
        &data.corpus,
        &data.test_instances,
        &model,
        &vocab,
        cfg.eval_shuffled.then_some(cfg.seed),
    )?;
    Ok(MetricsRecord::from_confusion(
        0,
        "eval",
        cfg.task,
        confusion,
        loss,
        data.test_unknown,
        started.elapsed().as_secs_f64(),
    ))
}

/// Task kinds that have at least one labeled instance in a corpus.
pub fn tasks_present(dir: &std::path::Path) -> Result<Vec<TaskKind>> {
    let manifest = crate::datamodel::Manifest::load(&dir.join("manifest.json"))?;
    let mut present = Vec::new();
    for kind in TaskKind::all() {
        if manifest.sessions.iter().any(|s| s.labels.iter().any(|l| l.kind == kind)) {
            present.push(kind);
        }
    }
    Ok(present)
}
