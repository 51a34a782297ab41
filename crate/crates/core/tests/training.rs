use latmark::error::Error;
use latmark::nn::Params;
use latmark::train::{load_checkpoint, load_for_key, Trainer};
use latmark::{synth, RunConfig};

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.backbone.feature_dim = 16;
    c.backbone.resolution = Some(16);
    c.backbone.radial_bins = 3;
    c.backbone.orientation_bins = 4;
    c.codec.message_bits = 8;
    c.embed.phi_hidden = 16;
    c.embed.steer_hidden = 16;
    c.extractor.hidden = 16;
    c.attacker.hidden = [8, 8];
    c.train.batch_size = 4;
    c.train.epochs = 2;
    c.train.synthetic_images = 12;
    c
}

fn data() -> Vec<latmark::Image> {
    synth::dataset(12, 16, 3)
}

fn all_params(t: &Trainer) -> Vec<f64> {
    let m = &t.model;
    [m.generator.flat(), m.embedder.flat(), m.extractor.flat(), m.policy.flat()].concat()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("half.lmk");

    let mut straight = Trainer::new(&tiny(), "resume-key", data()).unwrap();
    straight.train(None).unwrap();

    let mut first = tiny();
    first.train.epochs = 1;
    let mut a = Trainer::new(&first, "resume-key", data()).unwrap();
    a.train(Some(&ckpt)).unwrap();
    let mut b = Trainer::resume(&ckpt, "resume-key", data()).unwrap();
    assert_eq!(b.epoch, 1);
    b.model.cfg.train.epochs = 2;
    b.train(None).unwrap();

    assert_eq!(b.history, straight.history);
    assert_eq!(all_params(&b), all_params(&straight));
    assert_eq!(b.model.memory.to_tensor().data, straight.model.memory.to_tensor().data);
}

#[test]
fn same_seed_same_run() {
    let mut a = Trainer::new(&tiny(), "k", data()).unwrap();
    let mut b = Trainer::new(&tiny(), "k", data()).unwrap();
    a.train(None).unwrap();
    b.train(None).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(all_params(&a), all_params(&b));
}

#[test]
fn checkpoint_round_trip_preserves_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.lmk");
    let mut t = Trainer::new(&tiny(), "round-trip", data()).unwrap();
    t.train_epoch().unwrap();
    t.save(&p).unwrap();

    let (m, meta, _) = load_checkpoint(&p, Some("round-trip")).unwrap();
    assert_eq!(meta.epoch, 1);
    assert_eq!(meta.history, t.history);
    assert_eq!(meta.config, t.model.cfg);
    assert_eq!(m.embedder.flat(), t.model.embedder.flat());
    assert_eq!(m.extractor.flat(), t.model.extractor.flat());

    let (m2, dirs) = load_for_key(&p, "round-trip").unwrap();
    let want = t.model.directions("round-trip").unwrap();
    assert_eq!(dirs, want);
    let img = &data()[0];
    let msg = latmark::Message::new(vec![1, 0, 1, 1, 0, 0, 1, 0]).unwrap();
    assert_eq!(m2.embed(img, &msg, &dirs).unwrap(), t.model.embed(img, &msg, &dirs).unwrap());
}

#[test]
fn checkpoint_never_contains_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.lmk");
    let key = "a-rather-distinctive-secret";
    let t = Trainer::new(&tiny(), key, data()).unwrap();
    t.save(&p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert!(!bytes.windows(key.len()).any(|w| w == key.as_bytes()));
}

#[test]
fn wrong_key_is_rejected_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.lmk");
    Trainer::new(&tiny(), "right", data()).unwrap().save(&p).unwrap();
    assert!(matches!(load_for_key(&p, "wrong"), Err(Error::Validation(_))));
}

#[test]
fn non_finite_weights_abort_with_divergence() {
    let mut t = Trainer::new(&tiny(), "k", data()).unwrap();
    t.model.extractor.visit_mut(&mut |_, w| w.data.iter_mut().for_each(|v| *v = f64::NAN));
    assert!(matches!(t.train_step(&[0, 1, 2, 3], 0, 0), Err(Error::Divergence(_))));
}
