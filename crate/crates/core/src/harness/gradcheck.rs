//! The `gradcheck` operation: every tensor primitive against central finite
//! differences, then the composed end-to-end model (parameters and raw
//! keypoint inputs) on a tiny configuration.

use std::time::{Duration, Instant};

use crate::corpus::{self, FlavorWeights, GenConfig};
use crate::datamodel::{build_task_instances, Manifest, TaskKind};
use crate::error::{Error, Result};
use crate::fusion::{self, AblationSet, CorpusIndex, ModelConfig};
use crate::presets::ModelDims;
use crate::rng;
use crate::tensorcore::fd::{self, FdReport};
use crate::tensorcore::{Graph, ParamStore};
use rand::Rng;

pub struct GradcheckReport {
    pub primitives: Vec<FdReport>,
    pub end_to_end: Vec<FdReport>,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.primitives.iter().chain(self.end_to_end.iter()).all(|r| r.pass)
    }
}

fn tiny_fixture(seed: u64) -> Result<(CorpusIndex, Vec<crate::datamodel::TaskInstance>, ModelConfig, ParamStore)> {
    let mut gen = GenConfig::new(4, 12, seed);
    gen.language_informativeness = 0.3;
    gen.flavor_weights = FlavorWeights::focus(TaskKind::Sti);
    let generated = corpus::generate_sessions(&gen, 1)?;
    let manifest = Manifest { sessions: generated.iter().map(|g| g.labels.clone()).collect() };
    let session = &generated[0].session;
    let table = manifest.label_table(&session.session_id);
    let mut instances = build_task_instances(session, TaskKind::Sti, &table);
    instances.retain(|i| i.label.is_some());
    if instances.is_empty() {
        return Err(Error::Data("gradcheck fixture produced no instances".to_string()));
    }
    let cfg = ModelConfig {
        dims: ModelDims::fd_tiny(),
        task: TaskKind::Sti,
        context_n: 2,
        frames: 4,
        frame_interval_ms: 400,
        ablation: AblationSet::default(),
    };
    let vocab = corpus::vocabulary();
    let mut store = ParamStore::new();
    fusion::init_params(&mut store, seed, &cfg, &vocab);
    Ok((CorpusIndex::build(generated.into_iter().map(|g| g.session).collect()), instances, cfg, store))
}

/// Finite differences of the end-to-end loss against backprop, over a random
/// sample of parameter coordinates plus every raw keypoint-input coordinate.
fn end_to_end_checks(seed: u64) -> Result<Vec<FdReport>> {
    let (corpus_index, instances, cfg, store) = tiny_fixture(seed)?;
    let vocab = corpus::vocabulary();
    let instance = instances[0].clone();
    let (session, buffer) = corpus_index.get(&instance.session_id)?;

    // Analytic pass.
    let mut g = Graph::eval();
    let art = fusion::forward_full(&mut g, &store, session, buffer, &instance, &vocab, &cfg, None)?;
    let loss = art.loss.expect("fixture instance is labeled");
    g.backward(loss);
    let param_grads = g.param_grads();
    let kin_grad = g.grad(art.kin_input.expect("visual path ran")).to_vec();
    let pos_grad = g.grad(art.pos_input.expect("visual path ran")).to_vec();

    let loss_with_store = |s: &ParamStore| -> f64 {
        let mut g = Graph::eval();
        let art = fusion::forward_full(&mut g, s, session, buffer, &instance, &vocab, &cfg, None)
            .expect("forward on perturbed parameters");
        g.value(art.loss.expect("labeled")) [0]
    };

    // Sample coordinates across every parameter.
    let mut r = rng::stream(seed, "gradcheck/sample");
    let mut worst_param = 0.0f64;
    let h = fd::FD_STEP;
    for name in store.names().map(str::to_owned).collect::<Vec<_>>() {
        let len = store.get(&name).unwrap().value.len();
        let samples = 2.min(len);
        for _ in 0..samples {
            let idx = r.random_range(0..len);
            let mut plus = store.clone();
            plus.get_mut(&name).unwrap().value[idx] += h;
            let mut minus = store.clone();
            minus.get_mut(&name).unwrap().value[idx] -= h;
            let numeric = (loss_with_store(&plus) - loss_with_store(&minus)) / (2.0 * h);
            // Parameters outside the active paths (e.g. the null visual
            // token) never enter the graph; their gradient is zero.
            let analytic = param_grads.get(&name).map(|g| g[idx]).unwrap_or(0.0);
            worst_param = worst_param.max(fd::rel_err(analytic, numeric));
        }
    }
    let params_report = FdReport {
        name: "end_to_end_parameters".to_string(),
        max_rel_err: worst_param,
        tolerance: fd::END_TO_END_TOL,
        pass: worst_param < fd::END_TO_END_TOL,
    };

    // Keypoint inputs: perturb the raw track frames and re-extract.
    let utt = session.utterance(instance.target_index).unwrap();
    let speaker = utt.speaker_anon_id;
    let t0 = utt.start_ms;
    let mut worst_input = 0.0f64;
    let loss_with_session = |s: &crate::datamodel::Session| -> f64 {
        let index = CorpusIndex::build(vec![s.clone()]);
        let (sess, buf) = index.get(&instance.session_id).unwrap();
        let mut g = Graph::eval();
        let art = fusion::forward_full(&mut g, &store, sess, buf, &instance, &vocab, &cfg, None)
            .expect("forward on perturbed session");
        g.value(art.loss.expect("labeled"))[0]
    };
    // Non-nose kinesics parts map one-to-one onto window coordinates; the
    // nose also recenters everything, so it is checked through the others.
    for (frame_idx, part, kin_idx) in [(1usize, 9usize, 7usize), (3, 10, 8), (0, 5, 3)] {
        let t = t0 + frame_idx as i64 * cfg.frame_interval_ms;
        for coord in 0..2 {
            let mut plus = session.clone();
            let mut minus = session.clone();
            for (s, sign) in [(&mut plus, 1.0), (&mut minus, -1.0)] {
                let track = s.tracks.iter_mut().find(|tr| tr.anon_id == speaker).unwrap();
                track.frames.get_mut(&t).unwrap().parts[part][coord] += sign * h;
            }
            let numeric = (loss_with_session(&plus) - loss_with_session(&minus)) / (2.0 * h);
            let analytic = kin_grad[(frame_idx * 9 + kin_idx) * 2 + coord];
            worst_input = worst_input.max(fd::rel_err(analytic, numeric));
        }
    }
    // One non-speaker position coordinate (nose at the utterance start).
    let other = (1..=session.player_count).find(|&s| s != speaker).unwrap();
    for coord in 0..2 {
        let mut plus = session.clone();
        let mut minus = session.clone();
        for (s, sign) in [(&mut plus, 1.0), (&mut minus, -1.0)] {
            let track = s.tracks.iter_mut().find(|tr| tr.anon_id == other).unwrap();
            track.frames.get_mut(&t0).unwrap().parts[0][coord] += sign * h;
        }
        let numeric = (loss_with_session(&plus) - loss_with_session(&minus)) / (2.0 * h);
        let analytic = pos_grad[(other as usize - 1) * 2 + coord];
        worst_input = worst_input.max(fd::rel_err(analytic, numeric));
    }
    let inputs_report = FdReport {
        name: "end_to_end_keypoints".to_string(),
        max_rel_err: worst_input,
        tolerance: fd::END_TO_END_TOL,
        pass: worst_input < fd::END_TO_END_TOL,
    };

    Ok(vec![params_report, inputs_report])
}

/// Run the primitive battery and the end-to-end checks.
pub fn run_gradcheck() -> Result<GradcheckReport> {
    let started = Instant::now();
    let primitives = fd::primitive_battery(10);
    let end_to_end = end_to_end_checks(0x9c)?;
    Ok(GradcheckReport { primitives, end_to_end, elapsed: started.elapsed() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_passes_quickly() {
        let report = run_gradcheck().unwrap();
        for r in report.primitives.iter().chain(report.end_to_end.iter()) {
            assert!(r.pass, "{r}");
        }
        assert!(report.elapsed < Duration::from_secs(60), "took {:?}", report.elapsed);
    }
}
