//! Scratch diagnostic: train the visual path alone (no language, no fusion)
//! on the pointing corpus to see whether the geometry is learnable.

use refero::corpus::{self, FlavorWeights, GenConfig};
use refero::datamodel::{build_task_instances, Label, Manifest, TaskKind};
use refero::fusion::CorpusIndex;
use refero::presets::ModelDims;
use refero::tensorcore::params::AdamConfig;
use refero::tensorcore::{Graph, ParamStore};
use refero::visual;
use rand::seq::SliceRandom;
use rand::Rng;

fn main() {
    let sessions: usize = std::env::var("DIAG_SESSIONS").ok().and_then(|v| v.parse().ok()).unwrap_or(12);
    let lr: f64 = std::env::var("DIAG_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let epochs: usize = std::env::var("DIAG_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(30);
    let mut gen = GenConfig::new(5, 90, 11);
    if let Ok(v) = std::env::var("DIAG_SEATSWAP") { gen.seat_swap_rate = v.parse().unwrap(); }
    gen.language_informativeness = 0.0;
    gen.gesture_noise = 0.005;
    gen.flavor_weights = FlavorWeights::focus(TaskKind::Sti);
    let generated = corpus::generate_sessions(&gen, sessions).unwrap();
    let manifest = Manifest { sessions: generated.iter().map(|g| g.labels.clone()).collect() };
    let mut instances = Vec::new();
    for g in &generated {
        let table = manifest.label_table(&g.session.session_id);
        instances.extend(build_task_instances(&g.session, TaskKind::Sti, &table));
    }
    instances.retain(|i| i.label.is_some());
    let corpus_index = CorpusIndex::build(generated.into_iter().map(|g| g.session).collect());
    eprintln!("{} instances", instances.len());

    // Geometric oracle: direction of wrist displacement vs positions.
    {
        let mut correct = 0usize;
        let mut total = 0usize;
        for inst in &instances {
            let (session, buffer) = corpus_index.get(&inst.session_id).unwrap();
            let w = visual::extract_windows(session, inst, 8, 400).unwrap();
            let positions =
                visual::correct_positions(&w.positions, buffer, w.t0, w.speaker_nose_abs);
            let first = &w.kinesics.frames[0];
            let last = &w.kinesics.frames[7];
            let du = [
                (last[7][0] - first[7][0]) + (last[8][0] - first[8][0]),
                (last[7][1] - first[7][1]) + (last[8][1] - first[8][1]),
            ];
            let mut best = None;
            let mut best_cos = f64::NEG_INFINITY;
            for slot in 1..=session.player_count {
                if slot == positions.speaker_slot {
                    continue;
                }
                let p = positions.slots[slot as usize - 1];
                let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
                if norm == 0.0 {
                    continue;
                }
                let cos = (du[0] * p[0] + du[1] * p[1]) / norm;
                if cos > best_cos {
                    best_cos = cos;
                    best = Some(slot);
                }
            }
            if let (Some(slot), Some(Label::Player(gold))) = (best, inst.label) {
                total += 1;
                if slot == gold {
                    correct += 1;
                }
            }
        }
        eprintln!("geometric oracle: {}/{} = {:.4}", correct, total, correct as f64 / total as f64);
    }

    let mut dims = ModelDims::desk();
    if let Ok(v) = std::env::var("DIAG_DROPOUT") { dims.dropout = v.parse().unwrap(); }
    let mut store = ParamStore::new();
    visual::init_params(&mut store, 7, &dims);
    let dirbin = std::env::var("DIAG_DIRBIN").map(|v| v == "1").unwrap_or(false);
    let classes = if dirbin { 8 } else { 6 };
    store.insert_linear(7, "head.w", dims.d, classes, false);
    store.insert_bias(7, "head.b", dims.d, classes);

    // Train/test split by instance (diagnostic only).
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut r = refero::rng::stream(3, "diag");
    order.shuffle(&mut r);
    let split = order.len() * 8 / 10;
    let (train_idx, test_idx) = order.split_at(split);

    let use_perm = std::env::var("DIAG_PERM").map(|v| v == "1").unwrap_or(false);
    let forward = |g: &mut Graph, store: &ParamStore, idx: usize, perm_seed: Option<u64>| {
        let inst = &instances[idx];
        let (session, buffer) = corpus_index.get(&inst.session_id).unwrap();
        let mut w = visual::extract_windows(session, inst, 8, 400).unwrap();
        if std::env::var("DIAG_WRISTS_ONLY").map(|v| v == "1").unwrap_or(false) {
            w.kinesics.part_mask = [false, false, false, false, false, false, false, true, true];
        }
        let mut positions =
            visual::correct_positions(&w.positions, buffer, w.t0, w.speaker_nose_abs);
        let mut label = inst.label.unwrap();
        if let Some(ps) = perm_seed {
            let mut pr = refero::rng::stream2(31, "diagperm", ps, idx as u64);
            let perm = refero::datamodel::Permutation::random(session.player_count, &mut pr);
            positions = positions.permuted(&perm);
            label = perm.apply_label(label);
        }
        let kin = visual::encode_kinesics(g, store, &w.kinesics, &dims);
        let pos = visual::encode_positions(g, store, &positions, &dims);
        let seq = visual::visual_interaction_encode(g, store, kin.features, pos.feature, &dims);
        // Head over the position-token output (last row) or mean.
        let feat = {
            let (rows, _) = g.shape(seq);
            g.select_row(seq, rows - 1)
        };
        let wh = g.param(store, "head.w");
        let bh = g.param(store, "head.b");
        let l = g.matmul(feat, wh);
        let logits = g.add(l, bh);
        let gold = if dirbin {
            let utt = session.utterance(inst.target_index).unwrap();
            let spk = session.track_for(utt.speaker_anon_id).unwrap();
            let Label::Player(r) = inst.label.unwrap() else { unreachable!() };
            let rt = session.track_for(r).unwrap();
            let sn = spk.frame_at(utt.start_ms).unwrap().parts[0];
            let rn = rt.frame_at(utt.start_ms).unwrap().parts[0];
            let ang = (rn[1] - sn[1]).atan2(rn[0] - sn[0]);
            (((ang + std::f64::consts::PI) / (2.0 * std::f64::consts::PI) * 8.0) as usize).min(7)
        } else {
            match label {
                Label::Player(k) => k as usize - 1,
                Label::Everyone => unreachable!(),
            }
        };
        (logits, gold)
    };

    let mut rng = refero::rng::stream(5, "diag/shuffle");
    let mut step = 0u64;
    for epoch in 1..=epochs {
        let mut idxs: Vec<usize> = train_idx.to_vec();
        idxs.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in idxs.chunks(16) {
            let mut grads: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let mut g = Graph::train(refero::rng::stream2(9, "drop", step, idx as u64));
                let (logits, gold) = forward(&mut g, &store, idx, if use_perm { Some(step) } else { None });
                let loss = g.cross_entropy(logits, gold);
                batch_loss += g.value(loss)[0];
                g.backward(loss);
                for (name, grad) in g.param_grads() {
                    let e = grads.entry(name).or_insert_with(|| vec![0.0; grad.len()]);
                    for (a, v) in e.iter_mut().zip(grad.iter()) {
                        *a += v / chunk.len() as f64;
                    }
                }
            }
            if step % 400 == 0 {
                let mut by_prefix: std::collections::BTreeMap<&str, f64> = Default::default();
                for (name, g) in &grads {
                    let prefix = if name.starts_with("visual.point") { "point" }
                        else if name.starts_with("visual.kin") { "kin" }
                        else if name.starts_with("visual.pos") { "pos" }
                        else if name.starts_with("visual.encoder") { "venc" }
                        else if name.starts_with("visual.speaker") { "spk" }
                        else { "head" };
                    *by_prefix.entry(prefix).or_insert(0.0) += g.iter().map(|v| v*v).sum::<f64>();
                }
                let line: Vec<String> = by_prefix.iter().map(|(k,v)| format!("{k}={:.2e}", v.sqrt())).collect();
                eprintln!("step {step} gradnorm {}", line.join(" "));
            }
            for name in store.names().map(str::to_owned).collect::<Vec<_>>() {
                let len = store.get(&name).unwrap().value.len();
                grads.entry(name).or_insert_with(|| vec![0.0; len]);
            }
            let warmup: u64 = std::env::var("DIAG_WARMUP").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
            let lr_now = if warmup > 0 && step < warmup { lr * (step + 1) as f64 / warmup as f64 } else { lr };
            store.adam_step(&grads, &[("", lr_now)], AdamConfig::default()).unwrap();
            loss_sum += batch_loss / chunk.len() as f64;
            batches += 1;
            step += 1;
        }
        // Eval
        let mut correct = 0;
        for &idx in test_idx {
            let mut g = Graph::eval();
            let (logits, gold) = forward(&mut g, &store, idx, None);
            let v = g.value(logits);
            let mut arg = 0;
            for (i, x) in v.iter().enumerate() {
                if *x > v[arg] {
                    arg = i;
                }
            }
            if arg == gold {
                correct += 1;
            }
        }
        eprintln!(
            "epoch {epoch:>2} train-loss {:.4} test-acc {:.4}",
            loss_sum / batches as f64,
            correct as f64 / test_idx.len() as f64
        );
    }
    let _ = Rng::random::<f64>(&mut rng);
}
