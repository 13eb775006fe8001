use orthocare::alignment::{label_loss, LabelTerms};
use orthocare::config::ExperimentConfig;
use orthocare::datagen::{generate, PatientRecord};
use orthocare::diffcore::{Adam, AdamConfig, Graph};
use orthocare::model::Model;
use orthocare::saecore::metric;
use orthocare::trainer::{
    predict, predict_target, run_baseline, strip_labels, train, zero_domain_head, BaselineKind, Checkpoint,
    EpochLog, TrainConfig, TrainData, Variant,
};
use orthocare::Error;
use rand::seq::SliceRandom;

fn small_config(variant: Variant, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default().with_seed(seed);
    cfg.data.n_patients = 120;
    cfg.model.embed_dim = 12;
    cfg.model.hidden_dim = 12;
    cfg.model.repr_dim = 8;
    cfg.model.sae_dim = 16;
    cfg.model.domain_hidden = (12, 8);
    cfg.train.stage_boundaries = (2, 4, 6);
    cfg.train.lr_milestones = vec![5];
    cfg.train.batch_size = 32;
    cfg.train.target_pool = 60;
    cfg.train.variant = variant;
    cfg.loss.lambda1 = 0.01;
    cfg
}

struct Run {
    log: Vec<EpochLog>,
    snapshots: Vec<Checkpoint>,
    selected: Checkpoint,
}

fn run(cfg: &ExperimentConfig, selection: bool) -> (Run, Vec<PatientRecord>) {
    let (src, tgt) = generate(&cfg.data).unwrap();
    let pool = strip_labels(&tgt.train.records);
    let mut snapshots = Vec::new();
    let out = train(
        cfg,
        &TrainData {
            source: &src.train.records,
            target_pool: &pool,
            selection: selection.then_some(tgt.valid.records.as_slice()),
        },
        |_, c| {
            snapshots.push(c.clone());
            Ok(())
        },
    )
    .unwrap();
    (Run { log: out.log, snapshots, selected: out.selected }, tgt.test.records)
}

#[test]
fn stage_gating_of_gradients() {
    let cfg = small_config(Variant::Full, 1);
    let (r, _) = run(&cfg, false);
    assert_eq!(r.log.len(), 6);
    for line in &r.log {
        let g = line.max_grad_norm;
        assert_eq!(line.stage, cfg.train.stage(line.epoch));
        match line.stage {
            1 => {
                assert_eq!(g.sae, 0.0);
                assert_eq!(g.domain_head, 0.0);
                assert!(line.recon.is_none() && line.domain.is_none());
            }
            2 => {
                assert!(g.sae > 0.0);
                assert_eq!(g.domain_head, 0.0);
                assert!(line.recon.is_some() && line.domain.is_none());
            }
            _ => {
                assert!(g.sae > 0.0 && g.domain_head > 0.0);
                assert!(line.recon.is_some() && line.domain.is_some());
            }
        }
        assert!(g.encoder > 0.0 && g.label_head > 0.0);
    }
}

#[test]
fn logged_total_is_the_weighted_sum() {
    for variant in [Variant::Full, Variant::EuclideanMetric, Variant::NoDcl] {
        let (r, _) = run(&small_config(variant, 2), false);
        for line in &r.log {
            assert!((line.total - line.weighted_sum).abs() < 1e-10, "{variant:?} epoch {}", line.epoch);
        }
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let cfg = small_config(Variant::Full, 3);
    let (a, _) = run(&cfg, true);
    let (b, _) = run(&cfg, true);
    assert_eq!(a.selected.to_bytes(), b.selected.to_bytes());
    for (x, y) in a.snapshots.iter().zip(&b.snapshots) {
        assert_eq!(x.to_bytes(), y.to_bytes());
    }
    assert_eq!(serde_json::to_string(&a.log).unwrap(), serde_json::to_string(&b.log).unwrap());
}

#[test]
fn target_labels_are_never_read() {
    let cfg = small_config(Variant::Full, 4);
    let (src, tgt) = generate(&cfg.data).unwrap();
    let stripped = strip_labels(&tgt.train.records);
    let mut scrambled = tgt.train.records.clone();
    for r in &mut scrambled {
        r.label.iter_mut().for_each(|y| *y = 1 - *y);
    }
    let a = train(&cfg, &TrainData { source: &src.train.records, target_pool: &stripped, selection: None }, |_, _| Ok(()))
        .unwrap();
    let b = train(&cfg, &TrainData { source: &src.train.records, target_pool: &scrambled, selection: None }, |_, _| Ok(()))
        .unwrap();
    assert_eq!(a.selected.to_bytes(), b.selected.to_bytes());
}

#[test]
fn only_the_configured_target_pool_is_used() {
    let cfg = small_config(Variant::Full, 5);
    let (src, tgt) = generate(&cfg.data).unwrap();
    let pool = strip_labels(&tgt.train.records);
    let mut extended = pool.clone();
    let extra = strip_labels(&tgt.test.records);
    extended.truncate(cfg.train.target_pool);
    extended.extend(extra);
    let a = train(&cfg, &TrainData { source: &src.train.records, target_pool: &pool, selection: None }, |_, _| Ok(()))
        .unwrap();
    let b = train(&cfg, &TrainData { source: &src.train.records, target_pool: &extended, selection: None }, |_, _| Ok(()))
        .unwrap();
    assert_eq!(a.selected.to_bytes(), b.selected.to_bytes());
}

/// Plain loop over the label objective alone, written independently of the trainer.
fn standalone_label_training(cfg: &ExperimentConfig, source: &[PatientRecord], pool: &[PatientRecord]) -> Model {
    let tc = &cfg.train;
    let mut model = Model::init(cfg.model_config(), tc.seed).unwrap();
    let mut opt = Adam::new(AdamConfig::default(), &model.store);
    let pool: Vec<&PatientRecord> = pool.iter().take(tc.target_pool).collect();
    let mut s_order: Vec<usize> = (0..source.len()).collect();
    let mut t_order: Vec<usize> = (0..pool.len()).collect();
    for epoch in 1..=tc.stage_boundaries.2 {
        let lr = tc.learning_rate * tc.lr_decay.powi(tc.lr_milestones.iter().filter(|&&m| epoch > m).count() as i32);
        s_order.shuffle(&mut orthocare::rng::indexed_stream(tc.seed, "shuffle/source", epoch as u64));
        t_order.shuffle(&mut orthocare::rng::indexed_stream(tc.seed, "shuffle/target", epoch as u64));
        let mut cursor = 0;
        for chunk in s_order.chunks(tc.batch_size).filter(|c| c.len() >= 2) {
            let src: Vec<&PatientRecord> = chunk.iter().map(|&i| &source[i]).collect();
            let tgt: Vec<&PatientRecord> = (0..tc.batch_size.min(pool.len()))
                .map(|_| {
                    cursor += 1;
                    pool[t_order[(cursor - 1) % pool.len()]]
                })
                .collect();
            model.store.zero_grad();
            let mut g = Graph::new();
            let bound = model.store.bind(&mut g);
            let LabelTerms { total, .. } =
                label_loss(&mut g, &bound, &model, &src, &tgt, cfg.loss.lambda1, &cfg.mmd).unwrap();
            g.backward(total).unwrap();
            model.store.accumulate(&g, &bound);
            opt.step(&mut model.store, lr);
        }
    }
    model
}

#[test]
fn no_rec_no_dcl_is_the_label_objective_alone() {
    let cfg = small_config(Variant::NoRecNoDcl, 6);
    let (src, tgt) = generate(&cfg.data).unwrap();
    let pool = strip_labels(&tgt.train.records);
    let out = train(&cfg, &TrainData { source: &src.train.records, target_pool: &pool, selection: None }, |_, _| Ok(()))
        .unwrap();
    let reference = standalone_label_training(&cfg, &src.train.records, &pool);
    for p in out.selected.model.store.ids() {
        assert_eq!(
            out.selected.model.store.value(p).data(),
            reference.store.value(p).data(),
            "{}",
            reference.store.name(p)
        );
    }
}

#[test]
fn metric_is_valid_at_every_checkpoint() {
    let (r, _) = run(&small_config(Variant::Full, 7), false);
    for c in &r.snapshots {
        metric(c.model.store.value(c.model.sae.dictionary)).check().unwrap();
    }
}

#[test]
fn prediction_ignores_the_domain_head() {
    let (r, test) = run(&small_config(Variant::Full, 8), false);
    let before = predict_target(&r.selected, &test).unwrap();
    let mut zeroed = r.selected.clone();
    zero_domain_head(&mut zeroed.model);
    let after = predict_target(&zeroed, &test).unwrap();
    assert_eq!(before, after);
    assert_eq!(before.len(), test.len());
    assert!(before.iter().all(|p| p.len() == 8 && p.iter().all(|x| (0.0..=1.0).contains(x))));
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let (r, mut test) = run(&small_config(Variant::NoDcl, 9), false);
    test[0].visits[0].push(200);
    assert!(matches!(predict(&r.selected.model, &test), Err(Error::Input(_))));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (r, _) = run(&small_config(Variant::Full, 10), false);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    r.selected.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), r.selected.to_bytes());
    assert_eq!(loaded.epoch, r.selected.epoch);
    assert_eq!(loaded.optimizer.steps, r.selected.optimizer.steps);
    let mut bytes = r.selected.to_bytes();
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint"), Err(Error::Checkpoint(_))));
}

#[test]
fn base_has_no_sae_or_domain_history_and_oracle_needs_labels() {
    let cfg = small_config(Variant::Full, 11);
    let (src, tgt) = generate(&cfg.data).unwrap();
    let base = run_baseline(BaselineKind::Base, &cfg, &src.train.records, &[], None).unwrap().selected;
    let m = &base.model;
    for p in m.sae.ids().into_iter().chain(m.domain_head.ids()) {
        assert_eq!(base.optimizer.steps[p.0], 0);
        assert!(base.optimizer.first[p.0].data().iter().all(|&x| x == 0.0));
        assert!(base.optimizer.second[p.0].data().iter().all(|&x| x == 0.0));
    }
    assert!(base.optimizer.steps[m.encoder.embeddings.0] > 0);

    let unlabeled = strip_labels(&tgt.train.records);
    assert!(matches!(
        run_baseline(BaselineKind::Oracle, &cfg, &src.train.records, &unlabeled, None),
        Err(Error::Input(_))
    ));
    assert!(run_baseline(BaselineKind::Oracle, &cfg, &src.train.records, &tgt.train.records, None).is_ok());
}

#[test]
fn invalid_training_inputs() {
    let cfg = small_config(Variant::Full, 12);
    let (src, tgt) = generate(&cfg.data).unwrap();
    let pool = strip_labels(&tgt.train.records);
    let empty = train(&cfg, &TrainData { source: &[], target_pool: &pool, selection: None }, |_, _| Ok(()));
    assert!(matches!(empty, Err(Error::Input(_))));
    let no_target = train(&cfg, &TrainData { source: &src.train.records, target_pool: &[], selection: None }, |_, _| Ok(()));
    assert!(matches!(no_target, Err(Error::Input(_))));
    let mut bad = cfg.clone();
    bad.train.stage_boundaries = (4, 2, 6);
    let r = train(&bad, &TrainData { source: &src.train.records, target_pool: &pool, selection: None }, |_, _| Ok(()));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn schedule_helpers() {
    let tc = TrainConfig::default();
    assert_eq!((tc.stage(1), tc.stage(5), tc.stage(6), tc.stage(15), tc.stage(16), tc.stage(30)), (1, 1, 2, 2, 3, 3));
    assert_eq!(tc.learning_rate_at(15), 1e-3);
    assert!((tc.learning_rate_at(16) - 1e-4).abs() < 1e-18);
    assert!((tc.learning_rate_at(30) - 1e-6).abs() < 1e-20);
    let two_stage = TrainConfig { stage_boundaries: (0, 10, 30), ..TrainConfig::default() };
    assert_eq!(two_stage.stage(1), 2);
    assert_eq!(Variant::parse("euclidean_metric").unwrap(), Variant::EuclideanMetric);
    assert!(Variant::parse("bogus").is_err());
}

#[test]
fn selection_picks_the_best_validation_epoch() {
    let (r, _) = run(&small_config(Variant::Full, 13), true);
    let eligible: Vec<_> = r.log.iter().filter(|l| l.stage == 3).collect();
    let best = eligible.iter().map(|l| l.selection_w_f1.unwrap()).fold(f64::NEG_INFINITY, f64::max);
    let first_best = eligible.iter().find(|l| l.selection_w_f1.unwrap() == best).unwrap();
    assert_eq!(r.selected.epoch, first_best.epoch);
    assert!(r.log.iter().filter(|l| l.stage < 3).all(|l| !l.selected && l.selection_w_f1.is_some()));
    let (label_only, _) = run(&small_config(Variant::NoRecNoDcl, 13), true);
    assert!(label_only.log[0].selected);
    let (no_sel, _) = run(&small_config(Variant::Full, 13), false);
    assert_eq!(no_sel.selected.epoch, 6);
}

/// Stage-one loss on the default synthetic config falls between epoch 1 and epoch E1.
#[test]
fn stage_one_loss_decreases_on_default_config() {
    let mut wins = 0;
    for seed in 0..5 {
        let mut cfg = ExperimentConfig::default().with_seed(seed);
        let e1 = cfg.train.stage_boundaries.0;
        cfg.train.stage_boundaries = (e1, e1, e1);
        let (src, tgt) = generate(&cfg.data).unwrap();
        let pool = strip_labels(&tgt.train.records);
        let out = train(&cfg, &TrainData { source: &src.train.records, target_pool: &pool, selection: None }, |_, _| Ok(()))
            .unwrap();
        if out.log[e1 - 1].total < out.log[0].total {
            wins += 1;
        }
    }
    assert!(wins >= 4, "stage-one loss decreased in {wins}/5 seeds");
}

fn mean_active(ckpt: &Checkpoint, records: &[PatientRecord]) -> f64 {
    let dictionary = ckpt.model.store.value(ckpt.model.sae.dictionary);
    let total: usize = records
        .iter()
        .map(|r| {
            let v = orthocare::encoder::encode(&ckpt.model.store, &ckpt.model.encoder, r).unwrap();
            let s = orthocare::saecore::sae_encode(dictionary, &v).unwrap();
            s.0.iter().filter(|&&x| x > 1e-8).count()
        })
        .sum();
    total as f64 / records.len() as f64
}

/// A stronger sparsity penalty never yields more active dimensions after equal training.
#[test]
fn sparsity_penalty_reduces_active_dimensions() {
    let mut monotone = 0;
    for seed in 0..5 {
        let counts: Vec<f64> = [0.0, 0.1, 1.0]
            .iter()
            .map(|&gamma| {
                let mut cfg = small_config(Variant::NoDcl, seed);
                cfg.loss.gamma = gamma;
                let (r, eval) = run(&cfg, false);
                mean_active(&r.selected, &eval)
            })
            .collect();
        if counts.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone >= 3, "monotone in {monotone}/5 seeds");
}
