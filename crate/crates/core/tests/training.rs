use fedcka::data::{generate_synthetic, LabeledDataset, SyntheticSpec};
use fedcka::fl::{evaluate, local_train, AlaConfig, FlConfig, MoonConfig, Strategy, TrainContext};
use fedcka::model::{build_model, ArchSpec, ModelSpec};

fn small_spec(arch: ArchSpec) -> ModelSpec {
    ModelSpec {
        arch,
        input_shape: [3, 8, 8],
        num_classes: 10,
        proj_dim: 8,
    }
}

fn specs() -> Vec<ModelSpec> {
    vec![
        small_spec(ArchSpec::TinyMlp { hidden: vec![32, 16] }),
        small_spec(ArchSpec::TinyCnn {
            num_stages: 2,
            base_channels: 8,
        }),
        small_spec(ArchSpec::TinyVit {
            patch_size: 2,
            embed_dim: 16,
            num_heads: 2,
            num_blocks: 2,
            mlp_ratio: 2,
        }),
    ]
}

fn data(per_class: usize, seed: u64) -> LabeledDataset {
    generate_synthetic(&SyntheticSpec {
        per_class,
        ..SyntheticSpec::small(10, seed)
    })
    .unwrap()
}

#[test]
fn loss_falls_on_a_single_class_shard() {
    let ds = data(40, 3);
    let shard: Vec<usize> = ds.indices_with_labels(&[4])[..32].to_vec();
    for spec in specs() {
        for seed in 0..3 {
            let model = build_model(&spec, seed).unwrap();
            let mut cfg = FlConfig::for_spec(&spec);
            cfg.optimizer.learning_rate = if spec.arch.is_transformer() { 1e-3 } else { 1e-2 };
            cfg.seed = seed;
            let (moon, ala) = (MoonConfig::default(), AlaConfig::default());
            let ctx = TrainContext {
                arch: &model.arch,
                train: &ds,
                validation: &ds,
                cfg: &cfg,
                moon: &moon,
                ala: &ala,
            };
            // one full-batch step per call: mean_loss is the loss before that step
            let mut params = model.params.clone();
            let mut losses = Vec::new();
            for round in 1..=10 {
                let out = local_train(&ctx, 0, &shard, params, &model.params, None, round).unwrap();
                assert_eq!(out.steps, 1);
                losses.push(out.mean_loss);
                params = out.params;
            }
            for w in losses.windows(2) {
                assert!(w[1] < w[0], "{} seed {seed}: {losses:?}", spec.arch.name());
            }
        }
    }
}

#[test]
fn random_init_is_near_chance() {
    let ds = data(50, 8);
    for spec in specs() {
        let mean: f64 = (0..5)
            .map(|seed| {
                let m = build_model(&spec, seed).unwrap();
                evaluate(&m.arch, &m.params, &ds).unwrap()
            })
            .sum::<f64>()
            / 5.0;
        assert!((mean - 0.1).abs() <= 0.05, "{}: {mean}", spec.arch.name());
    }
}

#[test]
fn ten_samples_are_memorized() {
    let full = data(1, 5);
    let idx: Vec<usize> = (0..10).collect();
    for spec in specs() {
        let model = build_model(&spec, 1).unwrap();
        let mut cfg = FlConfig::for_spec(&spec);
        cfg.client_epochs = 200;
        cfg.strategy = Strategy::FedAvg;
        if spec.arch.is_transformer() {
            cfg.optimizer.learning_rate = 1e-3;
        }
        let (moon, ala) = (MoonConfig::default(), AlaConfig::default());
        let ctx = TrainContext {
            arch: &model.arch,
            train: &full,
            validation: &full,
            cfg: &cfg,
            moon: &moon,
            ala: &ala,
        };
        let out = local_train(&ctx, 0, &idx, model.params.clone(), &model.params, None, 1).unwrap();
        assert_eq!(evaluate(&model.arch, &out.params, &full).unwrap(), 1.0, "{}", spec.arch.name());
    }
}
