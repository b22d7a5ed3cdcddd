mod common;

use std::collections::BTreeMap;

use ddan_core::data_synth::{generate_dataset, Dataset, GenerateConfig, ImageShape};
use ddan_core::losses;
use ddan_core::model::{Group, Mode, Model};
use ddan_core::trainer::{checkpoint_name, train, Batch, SubUpdate, Trainer};
use ddan_core::TrainConfig;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_dataset(dir: &std::path::Path, domains: usize, ids: usize, seed: u64) -> Dataset {
    let manifest = generate_dataset(
        &GenerateConfig {
            num_domains: domains,
            ids_per_domain: ids,
            images_per_id: 4,
            shape: ImageShape::new(3, 16, 16),
            seed,
        },
        dir,
    )
    .unwrap();
    Dataset::load(&manifest).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_p: 4,
        batch_k: 2,
        encoder_widths: vec![4, 8],
        embedding_dim: 8,
        domain_hidden: 8,
        se_start_epoch: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 2, 4, 1);
    let config = TrainConfig {
        epochs: 0,
        ..small_config()
    };
    assert!(train(&data, &config, None, None).is_err());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(&dir.path().join("data"), 3, 6, 2);
    let config = TrainConfig {
        epochs: 3,
        checkpoint_every: 1,
        seed: 9,
        ..small_config()
    };
    let full = train(&data, &config, Some(&dir.path().join("full")), None).unwrap();

    let ckpt = dir.path().join("full").join(checkpoint_name(2));
    let resumed_from = Trainer::load_checkpoint(&ckpt).unwrap();
    assert_eq!(resumed_from.epoch, 2);
    let resumed = train(&data, &config, None, Some(resumed_from)).unwrap();

    let tail: Vec<_> = full.traces.iter().filter(|t| t.epoch == 3).collect();
    assert_eq!(tail.len(), resumed.traces.len());
    assert!(tail.iter().any(|t| t.se_active), "SE should be active in epoch 3");
    for (a, b) in tail.iter().zip(&resumed.traces) {
        assert_eq!((a.epoch, a.step), (b.epoch, b.step));
        for (x, y) in [
            (a.terms.ide, b.terms.ide),
            (a.terms.triplet, b.terms.triplet),
            (a.terms.da_transfer, b.terms.da_transfer),
            (a.terms.da_disc, b.terms.da_disc),
            (a.terms.se, b.terms.se),
        ] {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }
    let pa = &full.trainer.model.params;
    let pb = &resumed.trainer.model.params;
    for g in Group::ALL {
        for (x, y) in pa.group(g).values.iter().zip(&pb.group(g).values) {
            assert!(x.iter().zip(y.iter()).all(|(u, v)| (u - v).abs() <= 1e-6));
        }
    }
}

#[test]
fn smoke_run_learns_and_gates_similarity_enhancement() {
    let dir = tempfile::tempdir().unwrap();
    // 5 domains x 20 identities, the benchmark's shape
    let manifest = generate_dataset(&GenerateConfig::default(), dir.path()).unwrap();
    let data = Dataset::load(&manifest).unwrap();
    let mut first = 0.0;
    let mut last = 0.0;
    for seed in [0, 1] {
        let config = TrainConfig {
            epochs: 20,
            seed,
            ..TrainConfig::default()
        };
        let out = train(&data, &config, None, None).unwrap();
        for t in &out.traces {
            let terms = [t.terms.ide, t.terms.triplet, t.terms.da_transfer, t.terms.da_disc, t.terms.se];
            assert!(terms.iter().all(|v| v.is_finite()), "{t:?}");
            if t.epoch <= 4 {
                assert_eq!(t.terms.se, 0.0, "epoch {}", t.epoch);
                assert!(!t.se_active);
            } else {
                assert!(t.se_active);
            }
        }
        let epoch_ide = |e: usize| {
            let v: Vec<f64> = out.traces.iter().filter(|t| t.epoch == e).map(|t| t.terms.ide).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        first += epoch_ide(1) / 2.0;
        last += epoch_ide(20) / 2.0;
    }
    assert!(last < first, "IDE loss {first} -> {last}");
}

fn micro_trainer(config: TrainConfig) -> (Trainer, Batch) {
    let ids: BTreeMap<u32, u32> = (0..4).map(|i| (i, i % 2)).collect();
    let trainer = Trainer::new(ImageShape::new(1, 8, 8), config, &ids, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let identities = vec![0, 0, 1, 1, 2, 2, 3, 3];
    let domains: Vec<u32> = identities.iter().map(|i| i % 2).collect();
    let batch = Batch {
        images: Array4::from_shape_simple_fn((8, 1, 8, 8), || rng.random_range(0.0..1.0)),
        is_central: domains.iter().map(|&d| d == 0).collect(),
        identities,
        domains,
    };
    (trainer, batch)
}

fn micro_config() -> TrainConfig {
    TrainConfig {
        encoder_widths: vec![2],
        embedding_dim: 3,
        domain_hidden: 4,
        batch_p: 4,
        batch_k: 2,
        ..TrainConfig::default()
    }
}

fn flat(model: &Model, g: Group) -> Vec<f64> {
    model.params.group(g).values.iter().flat_map(|a| a.iter().copied()).collect()
}

fn disc_loss(model: &Model, batch: &Batch) -> f64 {
    let (emb, _) = model.forward_features(&batch.images, Mode::Train).unwrap();
    let (logits, _) = model.domain_logits(&emb, Mode::Train).unwrap();
    losses::da_disc_loss(&logits, &batch.is_central).unwrap().value
}

#[test]
fn discriminator_update_is_the_l3_gradient_alone() {
    let (mut trainer, batch) = micro_trainer(micro_config());
    let before = trainer.model.clone();
    let lr = trainer.config.base_lr;
    let mut after_disc = None;
    let mut after_all = None;
    trainer
        .train_step_observed(&batch, |u, m| match u {
            SubUpdate::Discriminator => after_disc = Some(flat(m, Group::Domain)),
            SubUpdate::Mapping => after_all = Some(flat(m, Group::Domain)),
            SubUpdate::Identity => {}
        })
        .unwrap();
    let after_disc = after_disc.unwrap();
    // L1 and L2 leave θ_d alone
    assert_eq!(after_all.unwrap(), after_disc);

    // first step with zero momentum: Δθ_d = -lr · ∇L3
    let p0 = flat(&before, Group::Domain);
    let eps = 1e-6;
    let mut idx = 0;
    let mut worst = 0.0f64;
    for a in 0..before.params.group(Group::Domain).values.len() {
        for e in 0..before.params.group(Group::Domain).values[a].len() {
            let probe = |delta: f64| {
                let mut m = before.clone();
                *m.params.group_mut(Group::Domain).values[a].iter_mut().nth(e).unwrap() += delta;
                disc_loss(&m, &batch)
            };
            let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
            let applied = (p0[idx] - after_disc[idx]) / lr;
            worst = worst.max((fd - applied).abs() / fd.abs().max(1e-3));
            idx += 1;
        }
    }
    assert!(worst < 1e-4, "relative error {worst}");
}

#[test]
fn without_transfer_or_enhancement_the_mapping_update_is_skipped() {
    let mut config = micro_config();
    config.weights.lambda2 = 0.0;
    config.weights.lambda3 = 0.0;
    let (mut trainer, batch) = micro_trainer(config);
    for step in 0..3 {
        let mut after_identity = None;
        let mut after_mapping = None;
        trainer
            .train_step_observed(&batch, |u, m| match u {
                SubUpdate::Identity => after_identity = Some(flat(m, Group::Mapping)),
                SubUpdate::Mapping => after_mapping = Some(flat(m, Group::Mapping)),
                SubUpdate::Discriminator => {}
            })
            .unwrap();
        assert_eq!(after_identity, after_mapping, "step {step}");
        trainer.finish_epoch();
    }
}

#[test]
fn identical_seeds_give_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 3, 6, 4);
    let config = TrainConfig {
        epochs: 3,
        seed: 17,
        ..small_config()
    };
    let a = train(&data, &config, None, None).unwrap().traces;
    let b = train(&data, &config, None, None).unwrap().traces;
    assert_eq!(a, b);
    let c = train(&data, &TrainConfig { seed: 18, ..config }, None, None).unwrap().traces;
    assert_ne!(a, c);
}
