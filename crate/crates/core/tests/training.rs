use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use frontal_core::data::{build_manifest, DatasetManifest, SynthOptions, POSES};
use frontal_core::nets::Embedder;
use frontal_core::train::{ffwm_step, fingerprints, to_f32_vec, train_batch, TrainState};
use frontal_core::Config;

const RES: usize = 32;

fn manifest(dir: &std::path::Path) -> DatasetManifest {
    let opts = SynthOptions {
        resolution: RES,
        illum_per_pose: 1,
    };
    build_manifest(dir, 3, &POSES, 5, opts).unwrap()
}

fn state(lambdas: [f64; 5], warmup: u64) -> TrainState {
    let cfg = Config {
        resolution: RES,
        batch_size: 2,
        lambdas,
        gfilter_warmup_steps: warmup,
        ..Config::default()
    };
    let embedder = Embedder::new(RES, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    TrainState::new(cfg, embedder).unwrap()
}

fn changed(before: &std::collections::BTreeMap<&str, u64>, after: &std::collections::BTreeMap<&str, u64>) -> Vec<String> {
    before
        .iter()
        .filter(|(k, v)| after[*k] != **v)
        .map(|(k, _)| k.to_string())
        .collect()
}

#[test]
fn step_updates_every_network_except_the_frozen_embedder() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path());
    let mut s = state(Config::default().lambdas, 0);
    let before = fingerprints(&s).unwrap();
    ffwm_step(&mut s, &train_batch(&m, 0, 0, 2).unwrap()).unwrap();
    let after = fingerprints(&s).unwrap();
    assert_eq!(changed(&before, &after), ["disc", "flow_f", "flow_r", "gen"]);
    assert_eq!(s.step, 1);
}

#[test]
fn reverse_flow_learns_only_from_the_illumination_term() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path());
    let b = train_batch(&m, 0, 0, 2).unwrap();

    let mut without = state([5.0, 1.0, 0.1, 0.0, 1.0], 0);
    let before = fingerprints(&without).unwrap();
    ffwm_step(&mut without, &b).unwrap();
    assert!(!changed(&before, &fingerprints(&without).unwrap()).contains(&"flow_r".to_string()));

    // The illumination term alone reaches the generator and both flows.
    let mut only = state([0.0, 0.0, 0.0, 1.0, 0.0], 0);
    let before = fingerprints(&only).unwrap();
    ffwm_step(&mut only, &b).unwrap();
    let moved = changed(&before, &fingerprints(&only).unwrap());
    for net in ["flow_f", "flow_r", "gen"] {
        assert!(moved.contains(&net.to_string()), "{net} not updated: {moved:?}");
    }
}

#[test]
fn filter_is_bypassed_exactly_during_warmup() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path());
    let mut s = state(Config::default().lambdas, 2);
    for step in 0..3 {
        let out = ffwm_step(&mut s, &train_batch(&m, 0, step, 2).unwrap()).unwrap();
        let same = to_f32_vec(&out.filtered).unwrap() == to_f32_vec(&out.synth).unwrap();
        assert_eq!(same, step < 2, "step {step}");
    }
}

#[test]
fn checkpoint_round_trip_continues_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path());
    let mut a = state(Config::default().lambdas, 1);
    ffwm_step(&mut a, &train_batch(&m, 0, 0, 2).unwrap()).unwrap();
    let path = dir.path().join("s.ckpt");
    a.save(&path).unwrap();
    let mut b = TrainState::load(&path).unwrap();
    assert_eq!(fingerprints(&a).unwrap(), fingerprints(&b).unwrap());
    for step in 1..3 {
        let batch = train_batch(&m, 0, step, 2).unwrap();
        let ra = ffwm_step(&mut a, &batch).unwrap();
        let rb = ffwm_step(&mut b, &batch).unwrap();
        assert_eq!(ra.report.to_json_line(step), rb.report.to_json_line(step));
        assert_eq!(to_f32_vec(&ra.synth).unwrap(), to_f32_vec(&rb.synth).unwrap());
    }
    assert_eq!(fingerprints(&a).unwrap(), fingerprints(&b).unwrap());
}

#[test]
fn loading_under_another_resolution_is_rejected() {
    let s = state(Config::default().lambdas, 0);
    let ck = s.to_checkpoint().unwrap();
    let other = Config {
        resolution: 64,
        ..s.cfg.clone()
    };
    assert!(TrainState::from_checkpoint(&ck, Some(other)).is_err());
}

#[test]
fn embedder_separates_training_identities() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path());
    let cfg = Config {
        resolution: RES,
        embedder_steps: 80,
        embedder_aux_identities: 6,
        ..Config::default()
    };
    let (e, losses) = frontal_core::train::train_embedder(&cfg, &m).unwrap();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
    // Distinct identities must not collapse onto one embedding.
    let frontals: Vec<_> = m.train_ids.iter().map(|&id| m.frontal(id).unwrap().into_tensor()).collect();
    let x = candle_core::Tensor::stack(&frontals, 0).unwrap();
    let p = e.forward(&x, frontal_core::nn::Mode::Frozen).unwrap().pool;
    let cos: Vec<Vec<f32>> = p.matmul(&p.t().unwrap()).unwrap().to_vec2().unwrap();
    assert!(cos[0][1] < 0.99, "{cos:?}");
}

#[test]
fn trained_embedder_ranks_same_identity_above_others_on_test_identities() {
    use rand::Rng;
    let dir = tempfile::tempdir().unwrap();
    let opts = SynthOptions {
        resolution: RES,
        illum_per_pose: 3,
    };
    let m = build_manifest(dir.path(), 20, &POSES, 8, opts).unwrap();
    let cfg = Config {
        resolution: RES,
        embedder_steps: 250,
        embedder_aux_identities: 24,
        ..Config::default()
    };
    let (e, _) = frontal_core::train::train_embedder(&cfg, &m).unwrap();
    let frontal: Vec<_> = m
        .records
        .iter()
        .filter(|r| r.pose_deg == 0 && m.test_ids.contains(&r.identity))
        .copied()
        .collect();
    let b = frontal_core::train::load_batch(&m, &frontal).unwrap();
    let p = e.forward(&b.profile, frontal_core::nn::Mode::Frozen).unwrap().pool;
    let cos: Vec<Vec<f32>> = p.matmul(&p.t().unwrap()).unwrap().to_vec2().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let (mut wins, trials) = (0, 500);
    for _ in 0..trials {
        let a = r.gen_range(0..frontal.len());
        let same: Vec<usize> = (0..frontal.len())
            .filter(|&i| i != a && frontal[i].identity == frontal[a].identity)
            .collect();
        let other: Vec<usize> = (0..frontal.len())
            .filter(|&i| frontal[i].identity != frontal[a].identity)
            .collect();
        let pos = same[r.gen_range(0..same.len())];
        let neg = other[r.gen_range(0..other.len())];
        wins += usize::from(cos[a][pos] > cos[a][neg]);
    }
    assert!(wins * 10 >= trials * 9, "{wins}/{trials}");
}
