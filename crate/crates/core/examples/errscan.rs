//! Scratch: break down a trained checkpoint's test-split errors by whether
//! the referent sits at their home seat (shortcut-predictable) or displaced
//! (needs the real gesture-position matching).

use refero::corpus;
use refero::datamodel::{split_sessions, Label};
use refero::fusion::{self, CorpusIndex};
use refero::harness::config::RunConfig;
use refero::harness::train::prepare_data;
use refero::tensorcore::checkpoint;

fn main() {
    let corpus_dir = std::env::args().nth(1).expect("corpus dir");
    let ckpt = std::env::args().nth(2).expect("checkpoint");
    let mut cfg = RunConfig::new(refero::datamodel::TaskKind::Sti, 3);
    cfg.corpus_dir = corpus_dir.clone().into();
    cfg.ablation.no_permutation = true;
    cfg.dropout = Some(0.1);

    let vocab = corpus::vocabulary();
    let model = cfg.model_config();
    let hash = checkpoint::config_hash(&model.description(&vocab));
    let store = checkpoint::load(ckpt.as_ref(), hash).unwrap();

    let data = prepare_data(&cfg).unwrap();
    let (sessions, _) = corpus::load_corpus(cfg.corpus_dir.as_path()).unwrap();
    let ids: Vec<String> = sessions.iter().map(|s| s.session_id.clone()).collect();
    let (_, test_ids) = split_sessions(&ids, cfg.test_fraction, cfg.seed).unwrap();
    eprintln!("test sessions: {test_ids:?}");
    let index = CorpusIndex::build(sessions.clone());

    // Home seat: nose closest to the canonical angle for that slot.
    let seat_of = |session: &refero::datamodel::Session, slot: u8| -> usize {
        let track = session.track_for(slot).unwrap();
        let t0 = *track.frames.keys().next().unwrap();
        let nose = track.frames[&t0].parts[0];
        let ang = (nose[1] - 0.5).atan2(nose[0] - 0.5);
        let p = session.player_count as f64;
        let idx = (ang / std::f64::consts::TAU * p).round();
        ((idx as i64).rem_euclid(session.player_count as i64)) as usize
    };

    let mut home = [0usize; 2];
    let mut disp = [0usize; 2];
    let mut by_session: std::collections::BTreeMap<String, (usize, usize)> = Default::default();
    for inst in &data.test_instances {
        let (session, _) = index.get(&inst.session_id).unwrap();
        let Some(Label::Player(r)) = inst.label else { continue };
        let (pred, gold) = fusion::predict(&store, &index, inst, &vocab, &model, None).unwrap();
        let correct = Some(pred.class) == gold;
        let at_home = seat_of(session, r) == (r as usize - 1);
        if at_home {
            home[correct as usize] += 1;
        } else {
            disp[correct as usize] += 1;
        }
        let e = by_session.entry(inst.session_id.clone()).or_insert((0, 0));
        e.1 += 1;
        if correct {
            e.0 += 1;
        }
    }
    eprintln!(
        "home-seat referents: {}/{} = {:.3}",
        home[1],
        home[0] + home[1],
        home[1] as f64 / (home[0] + home[1]) as f64
    );
    eprintln!(
        "displaced referents: {}/{} = {:.3}",
        disp[1],
        disp[0] + disp[1],
        disp[1] as f64 / (disp[0] + disp[1]) as f64
    );
    for (sid, (c, t)) in by_session {
        eprintln!("  {sid}: {c}/{t} = {:.3}", c as f64 / t as f64);
    }
}
