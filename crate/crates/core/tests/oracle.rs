use gtn::oracle::{
    brute_contract, fg_marginal, fg_partition, fg_to_tn, rbm_factor_graph, rbm_partition, rbm_prob,
    rbm_prob_enumerated, FlatNetwork,
};
use gtn::tensor::{trace_product, DenseTensor};
use gtn::verify::{duality, kronecker_equivalence, rbm_triangle, snake_adjacency, EXACT_TOL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseTensor {
    DenseTensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

#[test]
fn duality_holds_on_random_factor_graphs() {
    for seed in [1, 2] {
        let worst = duality(20, seed).unwrap();
        assert!(worst < EXACT_TOL, "{worst:e}");
    }
}

#[test]
fn rbm_paths_agree() {
    let worst = rbm_triangle(20, 5).unwrap();
    assert!(worst < EXACT_TOL, "{worst:e}");
}

#[test]
fn rbm_hand_evaluation() {
    let w = DenseTensor::matrix(&[&[2f64.ln(), 3f64.ln()]]).unwrap();
    for (x, expected) in [([1, 1], 7.0), ([1, 0], 3.0), ([0, 1], 4.0), ([0, 0], 2.0)] {
        assert!((rbm_prob(&w, &x).unwrap() - expected).abs() < 1e-12);
    }
    assert!((rbm_partition(&w).unwrap() - 16.0).abs() < 1e-12);

    let zero = DenseTensor::zeros(&[2, 3]);
    for bits in 0..8usize {
        let x: Vec<usize> = (0..3).map(|j| (bits >> j) & 1).collect();
        assert_eq!(rbm_prob(&zero, &x).unwrap(), 4.0);
    }
    assert_eq!(rbm_partition(&zero).unwrap(), 32.0);
    let fg = rbm_factor_graph(&zero).unwrap();
    assert_eq!(fg_partition(&fg).unwrap(), 32.0);
}

#[test]
fn rbm_product_form_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random_tensor(&[3, 4], &mut rng);
    let fg = rbm_factor_graph(&w).unwrap();
    let net = fg_to_tn(&fg).unwrap();
    for bits in 0..16usize {
        let x: Vec<usize> = (0..4).map(|j| (bits >> j) & 1).collect();
        let fast = rbm_prob(&w, &x).unwrap();
        let slow = rbm_prob_enumerated(&w, &x).unwrap();
        assert!((fast - slow).abs() <= 1e-12 * fast);
        assert!((fg_marginal(&fg, &x).unwrap() - fast).abs() <= 1e-10 * fast);
        assert!((brute_contract(&net, &x).unwrap() - fast).abs() <= 1e-10 * fast);
    }
}

#[test]
fn ring_of_three_matches_trace_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a: Vec<DenseTensor> = (0..3).map(|_| random_tensor(&[2, 2, 2], &mut rng)).collect();
    let mut net = FlatNetwork::new();
    let ids: Vec<usize> = a.iter().map(|t| net.add(t.clone())).collect();
    for j in 0..3 {
        net.connect((ids[j], 2), (ids[(j + 1) % 3], 1));
        net.open_leg((ids[j], 0), j);
    }
    for bits in 0..8usize {
        let x: Vec<usize> = (0..3).map(|j| (bits >> j) & 1).collect();
        let mats: Vec<DenseTensor> = (0..3)
            .map(|j| DenseTensor::from_fn(&[2, 2], |i| a[j].get(&[x[j], i[0], i[1]])))
            .collect();
        let expected = trace_product(&mats, true).unwrap();
        assert!((brute_contract(&net, &x).unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn fixing_one_copy_leg_fixes_them_all() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (u, v) = (random_tensor(&[2], &mut rng), random_tensor(&[2], &mut rng));
    let mut copied = FlatNetwork::new();
    let c = copied.add_copy(3, 2).unwrap();
    let (iu, iv) = (copied.add(u.clone()), copied.add(v.clone()));
    copied.connect((c, 1), (iu, 0));
    copied.connect((c, 2), (iv, 0));
    copied.open_leg((c, 0), 0);
    let mut separate = FlatNetwork::new();
    let (iu, iv) = (separate.add(u), separate.add(v));
    separate.open_leg((iu, 0), 0);
    separate.open_leg((iv, 0), 1);
    for value in 0..2 {
        assert_eq!(
            brute_contract(&copied, &[value]).unwrap(),
            brute_contract(&separate, &[value, value]).unwrap()
        );
    }
}

#[test]
fn two_strings_are_one_kronecker_ring() {
    let worst = kronecker_equivalence(9).unwrap();
    assert!(worst < EXACT_TOL, "{worst:e}");
}

#[test]
fn snakes_cover_every_grid_edge() {
    assert_eq!(snake_adjacency(6), None);
}
