//! Run configuration and the flat key=value config-file format.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::corpus::{FlavorWeights, GenConfig};
use crate::datamodel::{seconds_to_ms, TaskKind, TimestampMs};
use crate::error::{Error, Result};
use crate::fusion::{AblationSet, ModelConfig};
use crate::presets::{ModelDims, Preset};

/// Parse flat `key = value` text: one pair per line, `#` comments, blank
/// lines ignored.
pub fn parse_kv_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key=value, got '{raw}'", lineno + 1)));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

pub fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv_text(&text)
}

fn get_parsed<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse::<T>()
            .map(Some)
            .map_err(|_| Error::Config(format!("bad value '{v}' for key '{key}'"))),
    }
}

/// Full configuration of one training or evaluation run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: TaskKind,
    pub preset: Preset,
    pub context_n: usize,
    pub frames: usize,
    pub frame_interval_ms: TimestampMs,
    pub ablation: AblationSet,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub lr_language: f64,
    pub lr_rest: f64,
    pub test_fraction: f64,
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Evaluate under per-instance shuffled identity mappings.
    pub eval_shuffled: bool,
    pub strict_numerics: bool,
    /// Overrides the preset's transformer dropout when set.
    pub dropout: Option<f64>,
    /// Initial epochs trained without player permutation; the per-iteration
    /// permutation switches on afterwards. 0 = permute from the start.
    pub perm_warmup_epochs: usize,
}

impl RunConfig {
    /// Desk-scale defaults. The two-bucket learning-rate scheme keeps the
    /// paper preset's 1:10 language:rest ratio, scaled up because the
    /// from-scratch language encoder trains from random init.
    pub fn new(task: TaskKind, seed: u64) -> Self {
        RunConfig {
            task,
            preset: Preset::Desk,
            context_n: 5,
            frames: 8,
            frame_interval_ms: 400,
            ablation: AblationSet::default(),
            epochs: 15,
            batch: 16,
            seed,
            lr_language: 1e-4,
            lr_rest: 1e-3,
            test_fraction: 0.2,
            corpus_dir: PathBuf::from("corpus"),
            out_dir: PathBuf::from("out"),
            eval_shuffled: false,
            strict_numerics: true,
            dropout: None,
            perm_warmup_epochs: 0,
        }
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.preset = preset;
        if preset == Preset::Paper {
            self.lr_language = 5e-6;
            self.lr_rest = 5e-5;
        }
        self
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<RunConfig> {
        let task: TaskKind = map
            .get("task")
            .ok_or_else(|| Error::Config("missing mandatory key 'task'".to_string()))?
            .parse()?;
        let seed: u64 = get_parsed(map, "seed")?
            .ok_or_else(|| Error::Config("missing mandatory key 'seed'".to_string()))?;
        let mut cfg = RunConfig::new(task, seed);
        if let Some(preset) = map.get("preset") {
            cfg = cfg.with_preset(preset.parse()?);
        }
        cfg.apply_kv(map)?;
        Ok(cfg)
    }

    /// Apply overriding keys; unknown keys are config errors.
    pub fn apply_kv(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        const KNOWN: &[&str] = &[
            "task", "preset", "seed", "context_n", "frames", "frame_interval", "ablation",
            "epochs", "batch", "lr_language", "lr_rest", "test_fraction", "corpus_dir",
            "out_dir", "eval_shuffled", "strict_numerics", "dropout", "perm_warmup_epochs",
        ];
        for key in map.keys() {
            if !KNOWN.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key '{key}'")));
            }
        }
        if let Some(v) = get_parsed(map, "context_n")? {
            self.context_n = v;
        }
        if let Some(v) = get_parsed::<usize>(map, "frames")? {
            self.frames = v;
        }
        if let Some(v) = get_parsed::<f64>(map, "frame_interval")? {
            self.frame_interval_ms = seconds_to_ms(v);
        }
        if let Some(v) = map.get("ablation") {
            self.ablation = AblationSet::parse(v)?;
        }
        if let Some(v) = get_parsed(map, "epochs")? {
            self.epochs = v;
        }
        if let Some(v) = get_parsed(map, "batch")? {
            self.batch = v;
        }
        if let Some(v) = get_parsed(map, "lr_language")? {
            self.lr_language = v;
        }
        if let Some(v) = get_parsed(map, "lr_rest")? {
            self.lr_rest = v;
        }
        if let Some(v) = get_parsed(map, "test_fraction")? {
            self.test_fraction = v;
        }
        if let Some(v) = map.get("corpus_dir") {
            self.corpus_dir = PathBuf::from(v);
        }
        if let Some(v) = map.get("out_dir") {
            self.out_dir = PathBuf::from(v);
        }
        if let Some(v) = get_parsed(map, "eval_shuffled")? {
            self.eval_shuffled = v;
        }
        if let Some(v) = get_parsed(map, "strict_numerics")? {
            self.strict_numerics = v;
        }
        if let Some(v) = get_parsed(map, "dropout")? {
            self.dropout = Some(v);
        }
        if let Some(v) = get_parsed(map, "perm_warmup_epochs")? {
            self.perm_warmup_epochs = v;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".to_string()));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be positive".to_string()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction {} outside (0,1)",
                self.test_fraction
            )));
        }
        if self.lr_language <= 0.0 || self.lr_rest <= 0.0 {
            return Err(Error::Config("learning rates must be positive".to_string()));
        }
        self.ablation.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut dims = ModelDims::for_preset(self.preset);
        if let Some(p) = self.dropout {
            dims.dropout = p;
        }
        ModelConfig {
            dims,
            task: self.task,
            context_n: self.context_n,
            frames: self.frames,
            frame_interval_ms: self.frame_interval_ms,
            ablation: self.ablation,
        }
    }

    pub fn lr_map(&self) -> [(&'static str, f64); 2] {
        [("language.", self.lr_language), ("", self.lr_rest)]
    }

    /// Resolved key=value dump, written next to the run outputs.
    pub fn to_kv(&self) -> String {
        format!(
            "task = {}\npreset = {}\nseed = {}\ncontext_n = {}\nframes = {}\nframe_interval = {}\n\
             ablation = {}\nepochs = {}\nbatch = {}\nlr_language = {}\nlr_rest = {}\n\
             test_fraction = {}\ncorpus_dir = {}\nout_dir = {}\neval_shuffled = {}\nstrict_numerics = {}{}\n",
            self.task,
            match self.preset {
                Preset::Desk => "desk",
                Preset::Paper => "paper",
            },
            self.seed,
            self.context_n,
            self.frames,
            crate::datamodel::ms_to_seconds(self.frame_interval_ms),
            self.ablation.to_list(),
            self.epochs,
            self.batch,
            self.lr_language,
            self.lr_rest,
            self.test_fraction,
            self.corpus_dir.display(),
            self.out_dir.display(),
            self.eval_shuffled,
            self.strict_numerics,
            self.dropout.map(|d| format!("\ndropout = {d}")).unwrap_or_default(),
        )
    }
}

/// Corpus-generation run: the per-session knobs plus the session count.
#[derive(Debug, Clone)]
pub struct GenRunConfig {
    pub gen: GenConfig,
    pub sessions: usize,
}

impl GenRunConfig {
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<GenRunConfig> {
        const KNOWN: &[&str] = &[
            "players", "utterances", "lambda", "gesture_noise", "everyone_rate",
            "frame_interval", "frames_per_utterance", "seed", "sessions", "drop_rate",
            "habit_strength", "seat_swap_rate", "task_focus",
        ];
        for key in map.keys() {
            if !KNOWN.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown gen config key '{key}'")));
            }
        }
        let seed: u64 = get_parsed(map, "seed")?
            .ok_or_else(|| Error::Config("missing mandatory key 'seed'".to_string()))?;
        let players: u8 = get_parsed(map, "players")?.unwrap_or(5);
        let utterances: usize = get_parsed(map, "utterances")?.unwrap_or(90);
        let mut gen = GenConfig::new(players, utterances, seed);
        if let Some(v) = get_parsed(map, "lambda")? {
            gen.language_informativeness = v;
        }
        if let Some(v) = get_parsed(map, "gesture_noise")? {
            gen.gesture_noise = v;
        }
        if let Some(v) = get_parsed(map, "everyone_rate")? {
            gen.everyone_rate = v;
        }
        if let Some(v) = get_parsed::<f64>(map, "frame_interval")? {
            gen.frame_interval_ms = seconds_to_ms(v);
        }
        if let Some(v) = get_parsed(map, "frames_per_utterance")? {
            gen.frames_per_utterance = v;
        }
        if let Some(v) = get_parsed(map, "drop_rate")? {
            gen.drop_rate = v;
        }
        if let Some(v) = get_parsed(map, "habit_strength")? {
            gen.habit_strength = v;
        }
        if let Some(v) = get_parsed(map, "seat_swap_rate")? {
            gen.seat_swap_rate = v;
        }
        if let Some(v) = map.get("task_focus") {
            gen.flavor_weights = match v.as_str() {
                "balanced" => FlavorWeights::balanced(),
                task => FlavorWeights::focus(task.parse()?),
            };
        }
        let sessions: usize = get_parsed(map, "sessions")?.unwrap_or(10);
        gen.validate()?;
        if sessions == 0 {
            return Err(Error::Config("sessions must be positive".to_string()));
        }
        Ok(GenRunConfig { gen, sessions })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parsing_handles_comments_and_spacing() {
        let map = parse_kv_text("# run\n task = sti \n\nseed=7\nepochs = 3\n").unwrap();
        assert_eq!(map["task"], "sti");
        let cfg = RunConfig::from_kv(&map).unwrap();
        assert_eq!(cfg.task, TaskKind::Sti);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.context_n, 5);
        assert_eq!(cfg.frames, 8);
        assert_eq!(cfg.batch, 16);
    }

    #[test]
    fn missing_seed_is_rejected() {
        let map = parse_kv_text("task = sti\n").unwrap();
        let err = RunConfig::from_kv(&map).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let map = parse_kv_text("task = sti\nseed = 1\nbogus = 2\n").unwrap();
        assert_eq!(RunConfig::from_kv(&map).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn paper_preset_switches_learning_rates() {
        let map = parse_kv_text("task = pcr\nseed = 1\npreset = paper\n").unwrap();
        let cfg = RunConfig::from_kv(&map).unwrap();
        assert_eq!(cfg.lr_language, 5e-6);
        assert_eq!(cfg.lr_rest, 5e-5);
        assert_eq!(cfg.model_config().dims, ModelDims::paper());
    }

    #[test]
    fn gen_config_round_trip() {
        let map = parse_kv_text(
            "seed = 9\nplayers = 5\nutterances = 40\nlambda = 0.0\ngesture_noise = 0.005\n\
             sessions = 4\ntask_focus = sti\ndrop_rate = 0.2\n",
        )
        .unwrap();
        let cfg = GenRunConfig::from_kv(&map).unwrap();
        assert_eq!(cfg.sessions, 4);
        assert_eq!(cfg.gen.player_count, 5);
        assert_eq!(cfg.gen.language_informativeness, 0.0);
        assert_eq!(cfg.gen.drop_rate, 0.2);
    }

    #[test]
    fn config_dump_reparses_identically() {
        let cfg = RunConfig::new(TaskKind::Mpp, 123);
        let map = parse_kv_text(&cfg.to_kv()).unwrap();
        let back = RunConfig::from_kv(&map).unwrap();
        assert_eq!(back.task, cfg.task);
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.epochs, cfg.epochs);
        assert_eq!(back.lr_rest, cfg.lr_rest);
    }
}
