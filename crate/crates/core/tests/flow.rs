use cinn::cli::diagnostics::{gradient_check, invertibility_error, logdet_error};
use cinn::conditioning::ConditioningSpec;
use cinn::flow::ArchSpec;
use cinn::model::{ImageArch, VectorArch};
use cinn::rng::{normal_tensor, Seed};
use cinn::wavelet::Downsampling;
use cinn::{Cinn, Tensor};

fn vector_arch(batch_norm: bool) -> ArchSpec {
    VectorArch {
        dim: 5,
        conditioning: ConditioningSpec::Mlp {
            input: 3,
            hidden: 8,
            width: 4,
        },
        blocks: 3,
        hidden: 8,
        batch_norm,
        permute: true,
        clamp: true,
    }
    .build()
}

fn image_arch(downsampling: Downsampling, split: bool) -> ArchSpec {
    ImageArch {
        input: [3, 2, 2],
        condition: [1, 2, 2],
        conv_blocks: vec![2, 1],
        dense_blocks: 2,
        conv_hidden: 4,
        dense_hidden: 6,
        cond_width: 3,
        batch_norm: true,
        permute: true,
        clamp: true,
        downsampling,
        split,
    }
    .build()
}

fn random_model(arch: ArchSpec, seed: u64) -> Cinn {
    let mut m = Cinn::new(arch, Seed(seed)).unwrap();
    m.randomize(0.3, &mut Seed(seed).stream("perturb"));
    m
}

fn batch(model: &Cinn, n: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = Seed(seed).stream("data");
    let mut xs = vec![n];
    xs.extend_from_slice(model.input_shape());
    let mut ys = vec![n];
    ys.extend(model.condition_shape());
    (normal_tensor(&xs, 1.0, &mut rng), normal_tensor(&ys, 1.0, &mut rng))
}

fn architectures() -> Vec<ArchSpec> {
    vec![
        vector_arch(true),
        image_arch(Downsampling::Haar, true),
        image_arch(Downsampling::Haar, false),
        image_arch(Downsampling::Squeeze, true),
    ]
}

#[test]
fn round_trip_is_exact_on_random_models() {
    for (i, arch) in architectures().into_iter().enumerate() {
        let m = random_model(arch, 10 + i as u64);
        let (x, y) = batch(&m, 100, i as u64);
        let err = invertibility_error(&m, &x, &y).unwrap();
        assert!(err < 1e-10, "architecture {i}: {err}");
    }
}

#[test]
fn logdet_matches_finite_difference_jacobian() {
    for (i, arch) in architectures().into_iter().enumerate() {
        assert!(arch.input.iter().product::<usize>() <= 12);
        let m = random_model(arch, 20 + i as u64);
        let (x, y) = batch(&m, 4, 100 + i as u64);
        let err = logdet_error(&m, &x, &y).unwrap();
        assert!(err < 1e-6, "architecture {i}: {err}");
    }
}

#[test]
fn fresh_model_has_zero_logdet() {
    let m = Cinn::new(image_arch(Downsampling::Haar, true), Seed(3)).unwrap();
    let (x, y) = batch(&m, 5, 1);
    let d = m.density(&x, &y).unwrap();
    assert!(d.logdet.data().iter().all(|&v| v == 0.0));
}

#[test]
fn tape_gradient_matches_central_differences() {
    let m = random_model(vector_arch(true), 5);
    assert!(m.params().num_trainable() > 0);
    let (x, y) = batch(&m, 6, 9);
    let check = gradient_check(&m, &x, &y, 1e-5).unwrap();
    assert!(check.relative_error < 1e-6, "{check:?}");
}

#[test]
fn conditioning_changes_the_map() {
    let m = random_model(vector_arch(false), 8);
    let (x, y) = batch(&m, 1, 2);
    let (_, y2) = batch(&m, 1, 3);
    let z1 = m.density(&x, &y).unwrap().z;
    let z2 = m.density(&x, &y2).unwrap().z;
    assert!(z1.max_abs_diff(&z2) > 1e-6);
}

#[test]
fn image_model_gradient_matches_central_differences() {
    let m = random_model(image_arch(Downsampling::Haar, true), 6);
    let (x, y) = batch(&m, 4, 11);
    let check = gradient_check(&m, &x, &y, 1e-5).unwrap();
    assert!(check.relative_error < 1e-6, "{check:?}");
}
