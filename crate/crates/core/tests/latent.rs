use cinn::cli::tasks::one_hot;
use cinn::conditioning::ConditioningSpec;
use cinn::latent::{
    alpha_strip, encode, encode_batch, interpolate, interpolation_grid, latent_pca, scale_latent, transfer,
    LatentCode, Provenance, ALPHA_STRIP,
};
use cinn::model::{ImageArch, VectorArch};
use cinn::rng::{normal_tensor, Seed};
use cinn::wavelet::Downsampling;
use cinn::{Cinn, Error, Tensor};

fn image_model() -> Cinn {
    let arch = ImageArch {
        input: [2, 4, 4],
        condition: [1, 4, 4],
        conv_blocks: vec![1, 1],
        dense_blocks: 2,
        conv_hidden: 6,
        dense_hidden: 12,
        cond_width: 3,
        batch_norm: true,
        permute: true,
        clamp: true,
        downsampling: Downsampling::Haar,
        split: true,
    }
    .build();
    let mut m = Cinn::new(arch, Seed(2)).unwrap();
    m.randomize(0.3, &mut Seed(2).stream("perturb"));
    m
}

fn class_model() -> Cinn {
    let arch = VectorArch {
        dim: 6,
        conditioning: ConditioningSpec::Mlp {
            input: 10,
            hidden: 12,
            width: 4,
        },
        blocks: 4,
        hidden: 12,
        batch_norm: false,
        permute: true,
        clamp: true,
    }
    .build();
    let mut m = Cinn::new(arch, Seed(3)).unwrap();
    m.randomize(0.3, &mut Seed(3).stream("perturb"));
    m
}

fn pair(model: &Cinn, seed: u64) -> (Tensor, Tensor) {
    let mut rng = Seed(seed).stream("data");
    let mut xs = vec![1];
    xs.extend_from_slice(model.input_shape());
    let mut ys = vec![1];
    ys.extend(model.condition_shape());
    (normal_tensor(&xs, 1.0, &mut rng), normal_tensor(&ys, 1.0, &mut rng))
}

#[test]
fn transfer_under_the_same_condition_reconstructs() {
    let m = image_model();
    for seed in 0..5 {
        let (x, y) = pair(&m, seed);
        let code = encode(&m, &x, &y).unwrap();
        assert!(matches!(code.provenance, Provenance::Encoded { .. }));
        assert!(transfer(&m, &code, &y).unwrap().max_abs_diff(&x) < 1e-6);
    }
}

#[test]
fn encoding_matches_the_forward_pass() {
    let m = image_model();
    let (x, y) = pair(&m, 7);
    let code = encode(&m, &x, &y).unwrap();
    let z = m.density(&x, &y).unwrap().z;
    assert_eq!(code.z.data(), z.data());
}

#[test]
fn distinct_inputs_give_distinct_codes() {
    let m = image_model();
    let (x1, y) = pair(&m, 1);
    let (x2, _) = pair(&m, 2);
    let (a, b) = (encode(&m, &x1, &y).unwrap(), encode(&m, &x2, &y).unwrap());
    assert!(a.z.max_abs_diff(&b.z) > 1e-3);
}

#[test]
fn batch_encoding_agrees_with_single_encoding() {
    let m = image_model();
    let (x1, y1) = pair(&m, 1);
    let (x2, y2) = pair(&m, 2);
    let xs = Tensor::stack_rows(&[x1.clone(), x2]).unwrap();
    let ys = Tensor::stack_rows(&[y1.clone(), y2]).unwrap();
    let codes = encode_batch(&m, &xs, &ys).unwrap();
    assert_eq!(codes.len(), 2);
    assert!(codes[0].z.max_abs_diff(&encode(&m, &x1, &y1).unwrap().z) < 1e-12);
}

#[test]
fn one_code_decodes_under_every_class() {
    let m = class_model();
    let (x, _) = pair(&m, 4);
    let code = encode(&m, &x, &one_hot(3, 10)).unwrap();
    let mut outputs = Vec::new();
    for k in 0..10 {
        let y = one_hot(k, 10);
        let out = transfer(&m, &code, &y).unwrap();
        assert!(out.is_finite());
        let again = encode(&m, &out, &y).unwrap();
        assert!(again.z.max_abs_diff(&code.z) < 1e-8);
        outputs.push(out);
    }
    assert!(outputs[0].max_abs_diff(&outputs[9]) > 1e-6);
}

#[test]
fn interpolation_and_scaling_contracts() {
    let m = image_model();
    let z1 = LatentCode::sample(m.dim(), 1.0, Seed(1));
    let z2 = LatentCode::sample(m.dim(), 1.0, Seed(2));
    assert_eq!(interpolate(&z1, &z2, 1.0, 0.0).unwrap().z, z1.z);
    assert_eq!(interpolate(&z1, &z2, 0.0, 1.0).unwrap().z, z2.z);
    let grid = interpolation_grid(&z1, &z2, &[-0.9, 0.0, 0.9]).unwrap();
    assert_eq!(grid.len(), 9);
    assert_eq!(grid[4].z, Tensor::zeros(&[m.dim()]));
    for a in ALPHA_STRIP {
        let s = scale_latent(&z1, a);
        assert!((s.norm() - a * z1.norm()).abs() < 1e-12);
    }
    let (_, y) = pair(&m, 0);
    let strip = alpha_strip(&m, &z1, &y, &ALPHA_STRIP).unwrap();
    assert_eq!(strip.len(), 5);
    assert!(strip.iter().all(|t| t.shape() == [1, 2, 4, 4]));
}

#[test]
fn zero_temperature_code_is_the_origin() {
    let c = LatentCode::sample(8, 0.0, Seed(9));
    assert_eq!(c.norm(), 0.0);
}

#[test]
fn dimension_mismatches_are_typed_errors() {
    let m = image_model();
    let (_, y) = pair(&m, 0);
    let short = LatentCode::new(Tensor::zeros(&[3]));
    assert!(matches!(transfer(&m, &short, &y), Err(Error::Shape { .. })));
    assert!(matches!(encode(&m, &Tensor::zeros(&[1, 5]), &y), Err(Error::Shape { .. })));
    let other = LatentCode::new(Tensor::zeros(&[m.dim()]));
    assert!(interpolate(&short, &other, 0.5, 0.5).is_err());
}

#[test]
fn isotropic_cloud_has_even_variances() {
    let mut rng = Seed(11).stream("pca");
    let codes: Vec<LatentCode> = (0..4000)
        .map(|_| LatentCode::new(normal_tensor(&[4], 1.0, &mut rng)))
        .collect();
    let pca = latent_pca(&codes).unwrap();
    for r in pca.explained_ratio() {
        assert!((r - 0.25).abs() < 0.02, "{r}");
    }
}

#[test]
fn pca_is_reproducible() {
    let m = image_model();
    let codes: Vec<LatentCode> = (0..30)
        .map(|s| {
            let (x, y) = pair(&m, s);
            encode(&m, &x, &y).unwrap()
        })
        .collect();
    let (a, b) = (latent_pca(&codes).unwrap(), latent_pca(&codes).unwrap());
    assert_eq!(a.axes, b.axes);
    assert_eq!(a.project(&codes[0]).unwrap(), b.project(&codes[0]).unwrap());
}

#[test]
fn codes_of_held_out_data_have_unit_energy() {
    use cinn::cli::tasks::{generate, ToyTask, ToyTaskSpec};
    use cinn::training::{train, TrainConfig, TrainOutputs};

    let spec = |seed, samples| ToyTaskSpec {
        task: ToyTask::affine_gaussian(),
        seed,
        samples,
    };
    let (data, test) = (generate(&spec(1, 4000)).unwrap(), generate(&spec(2, 4000)).unwrap());
    let arch = VectorArch {
        dim: 1,
        conditioning: ConditioningSpec::Mlp {
            input: 1,
            hidden: 32,
            width: 8,
        },
        blocks: 2,
        hidden: 32,
        batch_norm: false,
        permute: false,
        clamp: true,
    };
    let mut m = Cinn::new(arch.build(), Seed(0)).unwrap();
    let config = TrainConfig {
        batch_size: 128,
        steps: 2000,
        lr: 3e-3,
        milestones: vec![1200, 1700],
        noise_fraction: 0.0,
        ..TrainConfig::default()
    };
    train(&mut m, &data, &config, &TrainOutputs::default()).unwrap().into_result().unwrap();
    let codes = encode_batch(&m, &test.x, &test.y).unwrap();
    let energy = codes.iter().map(|c| c.z.sq_norm()).sum::<f64>() / (codes.len() * m.dim()) as f64;
    assert!((energy - 1.0).abs() < 0.1, "mean |z|^2/dim = {energy}");
}
