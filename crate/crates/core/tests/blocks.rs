use cinn::blocks::{ChannelPermutation, CouplingBlock, Direction, SubnetKind, SubnetSpec, GAMMA_INIT};
use cinn::cli::diagnostics::log_abs_det;
use cinn::graph::{Graph, Mode};
use cinn::numerics::{ParamStore, Tensor};
use cinn::rng::{normal_tensor, Seed};
use proptest::prelude::*;

const DENSE: SubnetSpec = SubnetSpec {
    kind: SubnetKind::Dense,
    hidden: 6,
    batch_norm: false,
};

fn block(channels: usize, cond: usize, clamp: bool, seed: u64) -> (ParamStore, CouplingBlock) {
    let mut store = ParamStore::new();
    let mut rng = Seed(seed).stream("init");
    let b = CouplingBlock::new(&mut store, "b", channels, cond, DENSE, clamp, &mut rng).unwrap();
    (store, b)
}

/// Replace every trainable parameter with fresh Gaussian noise.
fn randomize(store: &mut ParamStore, seed: u64, std: f64) {
    let mut rng = Seed(seed).stream("perturb");
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, normal_tensor(&shape, std, &mut rng)).unwrap();
    }
}

fn run(store: &ParamStore, b: &CouplingBlock, u: &Tensor, c: Option<&Tensor>, inverse: bool) -> (Tensor, Tensor) {
    let mut g = Graph::new(store, Mode::Eval);
    let uv = g.constant(u.clone());
    let cv = c.map(|c| g.constant(c.clone()));
    let out = if inverse { b.inverse(&mut g, uv, cv) } else { b.forward(&mut g, uv, cv) }.unwrap();
    (g.value(out.out).clone(), g.value(out.logdet).clone())
}

/// Central-difference Jacobian of the forward map at one sample.
fn jacobian(store: &ParamStore, b: &CouplingBlock, u: &Tensor, c: &Tensor) -> Vec<f64> {
    let d = u.len();
    let h = 1e-5;
    let mut jac = vec![0.0; d * d];
    for j in 0..d {
        let mut up = u.clone();
        up.data_mut()[j] += h;
        let mut um = u.clone();
        um.data_mut()[j] -= h;
        let (vp, _) = run(store, b, &up, Some(c), false);
        let (vm, _) = run(store, b, &um, Some(c), false);
        for i in 0..d {
            jac[i * d + j] = (vp.data()[i] - vm.data()[i]) / (2.0 * h);
        }
    }
    jac
}

fn set_output_bias(store: &mut ParamStore, name: &str, values: Vec<f64>) {
    let id = store.id(name).unwrap();
    store.set_value(id, Tensor::from_vec(values)).unwrap();
}

#[test]
fn hand_example_forward_and_inverse() {
    let (mut store, b) = block(2, 0, false, 1);
    let ln2 = 2f64.ln();
    set_output_bias(&mut store, "b.net1.l2.bias", vec![ln2, 0.5]);
    set_output_bias(&mut store, "b.net2.l2.bias", vec![0.0, -1.0]);
    let u = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
    let (v, ld) = run(&store, &b, &u, None, false);
    assert!((v.data()[0] - 2.5).abs() < 1e-15 && (v.data()[1] - 1.0).abs() < 1e-15, "{v:?}");
    assert!((ld.item() - ln2).abs() < 1e-15);
    let (back, ld_inv) = run(&store, &b, &v, None, true);
    assert!(back.max_abs_diff(&u) < 1e-15);
    assert!((ld_inv.item() + ln2).abs() < 1e-15);
}

#[test]
fn fresh_block_is_identity() {
    let (store, b) = block(5, 3, true, 2);
    let mut rng = Seed(0).stream("x");
    let u = normal_tensor(&[4, 5], 1.0, &mut rng);
    let c = normal_tensor(&[4, 3], 1.0, &mut rng);
    let (v, ld) = run(&store, &b, &u, Some(&c), false);
    assert_eq!(v, u);
    assert!(ld.data().iter().all(|&x| x == 0.0));
    let (back, _) = run(&store, &b, &u, Some(&c), true);
    assert_eq!(back, u);
}

#[test]
fn gamma_starts_at_init_value() {
    let (store, b) = block(3, 1, true, 0);
    for id in b.gammas() {
        assert!(store.value(id).data().iter().all(|&g| g == GAMMA_INIT));
    }
}

#[test]
fn logdet_matches_jacobian_and_is_triangular() {
    for seed in 0..10 {
        let (mut store, b) = block(6, 2, true, seed);
        randomize(&mut store, seed, 0.7);
        let mut rng = Seed(seed).stream("x");
        let u = normal_tensor(&[1, 6], 1.0, &mut rng);
        let c = normal_tensor(&[1, 2], 1.0, &mut rng);
        let jac = jacobian(&store, &b, &u, &c);
        let (_, ld) = run(&store, &b, &u, Some(&c), false);
        assert!((ld.item() - log_abs_det(&jac, 6).unwrap()).abs() < 1e-6);
        // ∂v1/∂u1 is diagonal, ∂v1/∂u2 is dense.
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(jac[i * 6 + j].abs() < 1e-9, "({i},{j}) = {}", jac[i * 6 + j]);
                }
            }
            for j in 3..6 {
                assert!(jac[i * 6 + j].abs() > 1e-9, "({i},{j}) vanished");
            }
        }
    }
}

#[test]
fn clamped_scale_stays_within_gamma() {
    let (mut store, b) = block(4, 1, true, 3);
    randomize(&mut store, 3, 5.0);
    for id in b.gammas().collect::<Vec<_>>() {
        store.set_value(id, Tensor::full(&[2], 5.0)).unwrap();
    }
    let mut rng = Seed(1).stream("x");
    let u = normal_tensor(&[50, 4], 10.0, &mut rng);
    let c = normal_tensor(&[50, 1], 10.0, &mut rng);
    let (v, ld) = run(&store, &b, &u, Some(&c), false);
    assert!(v.is_finite());
    // Four scale entries per sample, each bounded by |γ| = 5 (tanh rounds
    // to exactly ±1 when saturated, so the bound is attained in f64).
    assert!(ld.data().iter().all(|l| l.abs() <= 20.0));
}

#[test]
fn condition_shape_is_checked() {
    let (store, b) = block(4, 2, true, 0);
    let mut g = Graph::new(&store, Mode::Eval);
    let u = g.constant(Tensor::zeros(&[2, 4]));
    let c = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(b.forward(&mut g, u, Some(c)), Err(cinn::Error::Shape { .. })));
    assert!(b.forward(&mut g, u, None).is_err());
}

#[test]
fn single_channel_block_conditions_on_c_only() {
    let (mut store, b) = block(1, 2, true, 4);
    randomize(&mut store, 4, 0.5);
    assert_eq!(b.split(), (1, 0));
    let u = Tensor::new(&[1, 1], vec![0.3]).unwrap();
    let c = Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap();
    let (v, _) = run(&store, &b, &u, Some(&c), false);
    let (back, _) = run(&store, &b, &v, Some(&c), true);
    assert!(back.max_abs_diff(&u) < 1e-12);
}

fn permute(p: &ChannelPermutation, x: &Tensor, dir: Direction) -> Tensor {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let v = g.constant(x.clone());
    let out = p.apply(&mut g, v, dir).unwrap();
    g.value(out).clone()
}

#[test]
fn permutation_example() {
    let p = ChannelPermutation::from_indices(vec![2, 0, 1], 0).unwrap();
    let x = Tensor::new(&[1, 3], vec![10.0, 20.0, 30.0]).unwrap();
    let y = permute(&p, &x, Direction::Forward);
    assert_eq!(y.data(), &[30.0, 10.0, 20.0]);
    assert_eq!(permute(&p, &y, Direction::Inverse), x);
    assert_eq!(permute(&ChannelPermutation::identity(3), &x, Direction::Forward), x);
    assert!(ChannelPermutation::from_indices(vec![0, 0, 1], 0).is_err());
}

#[test]
fn permutation_size_mismatch_is_an_error() {
    let p = ChannelPermutation::identity(3);
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let v = g.constant(Tensor::zeros(&[1, 4]));
    assert!(p.apply(&mut g, v, Direction::Forward).is_err());
}

proptest! {
    #[test]
    fn random_permutation_round_trips(seed in any::<u64>()) {
        let p = ChannelPermutation::random(16, seed);
        let x = Tensor::from_fn(&[2, 16, 1, 1], |i| i as f64);
        let y = permute(&p, &x, Direction::Forward);
        prop_assert_eq!(permute(&p, &y, Direction::Inverse), x);
    }

    #[test]
    fn block_round_trip(seed in 0u64..1000, channels in 1usize..8, cond in 1usize..4) {
        let (mut store, b) = block(channels, cond, true, seed);
        randomize(&mut store, seed, 1.0);
        let mut rng = Seed(seed).stream("x");
        let u = normal_tensor(&[3, channels], 2.0, &mut rng);
        let c = normal_tensor(&[3, cond], 1.0, &mut rng);
        let (v, ld) = run(&store, &b, &u, Some(&c), false);
        let (back, ld_inv) = run(&store, &b, &v, Some(&c), true);
        prop_assert!(back.max_abs_diff(&u) < 1e-8);
        prop_assert!(ld.add(&ld_inv).unwrap().data().iter().all(|x| x.abs() < 1e-12));
    }
}
