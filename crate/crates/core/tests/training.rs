use cinn::cli::tasks::{generate, ToyTask, ToyTaskSpec};
use cinn::conditioning::{ConditioningSpec, PREFIX};
use cinn::flow::ArchSpec;
use cinn::model::VectorArch;
use cinn::rng::{normal_tensor, Seed};
use cinn::training::{self, train, Dataset, TrainConfig, TrainOutputs, CHECKPOINT_VERSION};
use cinn::{Cinn, Error, Tensor};

fn arch(dim: usize, cond: usize, width: usize) -> ArchSpec {
    vector(dim, cond, width).build()
}

fn vector(dim: usize, cond: usize, width: usize) -> VectorArch {
    VectorArch {
        dim,
        conditioning: ConditioningSpec::Mlp {
            input: cond,
            hidden: 16,
            width,
        },
        blocks: 3,
        hidden: 16,
        batch_norm: false,
        permute: true,
        clamp: true,
    }
}

fn affine_data(samples: usize, seed: u64) -> Dataset {
    generate(&ToyTaskSpec {
        task: ToyTask::affine_gaussian(),
        seed,
        samples,
    })
    .unwrap()
}

fn short_config(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        steps,
        lr: 2e-3,
        noise_fraction: 0.0,
        ..TrainConfig::default()
    }
}

fn trained(steps: usize, seed: u64) -> (Cinn, training::TrainReport) {
    let mut model = Cinn::new(arch(1, 1, 4), Seed(seed)).unwrap();
    let report = train(&mut model, &affine_data(256, 1), &short_config(steps), &TrainOutputs::default()).unwrap();
    (model, report)
}

#[test]
fn training_lowers_the_loss() {
    let (_, report) = trained(150, 0);
    let first = report.records[0].cml;
    let last = report.final_cml().unwrap();
    assert!(last < first - 0.3, "{first} -> {last}");
    assert!(report.divergence.is_none());
}

#[test]
fn checkpoint_round_trip_reproduces_the_forward_pass() {
    let (model, report) = trained(40, 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    training::save(&path, &model, Some(&report.optimizer), 40, Some(&short_config(40))).unwrap();
    let ckpt = training::load(&path).unwrap();
    assert_eq!(ckpt.step, 40);
    assert_eq!(ckpt.version, CHECKPOINT_VERSION);
    let back = ckpt.model().unwrap();
    let data = affine_data(20, 9);
    let (a, b) = (model.density(&data.x, &data.y).unwrap(), back.density(&data.x, &data.y).unwrap());
    assert_eq!(a.z, b.z);
    assert_eq!(a.logdet, b.logdet);
    let adam = ckpt.optimizer(&back).unwrap().unwrap();
    assert_eq!(adam.steps(), report.optimizer.steps());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let model = Cinn::new(arch(2, 1, 4), Seed(0)).unwrap();
    let bytes = training::encode(&model, None, 0, None).unwrap();
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(training::decode(&bytes[..cut]), Err(Error::Parse { .. })),
            "cut at {cut}"
        );
    }
    let mut wrong = bytes.clone();
    wrong[4..8].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(
        training::decode(&wrong),
        Err(Error::Version { found: 99, expected: CHECKPOINT_VERSION })
    ));
    let mut extra = bytes;
    extra.push(0);
    assert!(matches!(training::decode(&extra), Err(Error::Parse { .. })));
}

#[test]
fn loading_into_a_different_architecture_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let small = Cinn::new(arch(2, 1, 4), Seed(0)).unwrap();
    training::save(&path, &small, None, 0, None).unwrap();
    let mut other = Cinn::new(arch(2, 1, 6), Seed(0)).unwrap();
    match training::load_into(&path, &mut other) {
        Err(Error::Architecture { stage }) => assert!(stage.contains("cond"), "{stage}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = affine_data(128, 3);
    let mut bytes = Vec::new();
    for run in 0..2 {
        let path = dir.path().join(format!("run{run}.ckpt"));
        let mut model = Cinn::new(arch(1, 1, 4), Seed(5)).unwrap();
        let outputs = TrainOutputs {
            checkpoint: Some(path.clone()),
            metrics: None,
        };
        train(&mut model, &data, &short_config(30), &outputs).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn metrics_log_has_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    let mut model = Cinn::new(arch(1, 1, 4), Seed(0)).unwrap();
    let outputs = TrainOutputs {
        checkpoint: None,
        metrics: Some(csv.clone()),
    };
    train(&mut model, &affine_data(64, 1), &short_config(12), &outputs).unwrap();
    let text = std::fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,cml,nll_nats_per_dim,lr,wall_ms");
    assert_eq!(lines.len(), 13);
}

fn cond_params(model: &Cinn) -> Vec<Tensor> {
    model
        .params()
        .iter()
        .filter(|(_, p)| p.name().starts_with(PREFIX))
        .map(|(_, p)| p.value().clone())
        .collect()
}

#[test]
fn conditioning_learns_unless_frozen() {
    let mut rng = Seed(4).stream("data");
    let y = normal_tensor(&[128, 16], 1.0, &mut rng);
    let x = normal_tensor(&[128, 2], 1.0, &mut rng);
    let data = Dataset::new(x, y).unwrap();
    let mut config = short_config(3);
    for frozen in [false, true] {
        config.freeze_conditioning = frozen;
        let mut model = Cinn::new(arch(2, 16, 2), Seed(1)).unwrap();
        let before = cond_params(&model);
        train(&mut model, &data, &config, &TrainOutputs::default()).unwrap();
        let after = cond_params(&model);
        let moved = before.iter().zip(&after).any(|(a, b)| a != b);
        assert_eq!(moved, !frozen, "frozen = {frozen}");
    }
}

#[test]
fn divergence_rolls_back_and_saves_the_last_good_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let unclamped = VectorArch {
        clamp: false,
        ..vector(1, 1, 4)
    };
    let mut model = Cinn::new(unclamped.build(), Seed(0)).unwrap();
    let data = affine_data(128, 1).x.map(|v| v * 1e3);
    let data = Dataset::new(data, affine_data(128, 1).y).unwrap();
    let config = TrainConfig {
        lr: 5.0,
        snapshot_every: 10,
        ..short_config(400)
    };
    let outputs = TrainOutputs {
        checkpoint: Some(path.clone()),
        metrics: None,
    };
    let report = train(&mut model, &data, &config, &outputs).unwrap();
    let d = report.divergence.clone().expect("diverges");
    assert!(d.restored_step <= d.step);
    assert!(path.exists());
    let ckpt = training::load(&path).unwrap();
    assert_eq!(ckpt.step, d.restored_step as u64);
    assert!(matches!(report.into_result(), Err(Error::Divergence { .. })));
}
