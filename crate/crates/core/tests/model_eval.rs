use gtn::data::{Dataset, Geometry};
use gtn::eval::{gradient, loss, posterior, score, scores, Evaluator, Posterior};
use gtn::features::{FeatureKind, FeatureSpec};
use gtn::network::{build, eps_layout, rbm_to_sbs, ArchitectureKind, ArchitectureSpec, Model};
use gtn::tensor::{contract, DenseTensor};
use gtn::verify::{engine_matches_oracle, gradient_suite_stencil, random_batch, Stencil, EXACT_TOL, GRAD_TOL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn spec(kind: ArchitectureKind, learnable: bool) -> ArchitectureSpec {
    let mut spec = ArchitectureSpec::new(kind, [3, 3], 2, 3);
    if kind == ArchitectureKind::RbmSbs {
        spec.num_strings = Some(2);
    }
    if learnable {
        spec.features = FeatureSpec {
            kind: FeatureKind::LearnableTable,
            bins: 8,
            per_variable: false,
        };
    }
    spec
}

/// Adds noise of scale `scale` to every tensor, breaking the symmetric start.
fn perturbed(mut model: Model, scale: f64, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..model.num_tensors() {
        for v in model.tensor_mut(i).data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    model
}

fn random_input(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn identity_chain_scores_its_label_weight() {
    let s = ArchitectureSpec::new(ArchitectureKind::Mps, [1, 3], 1, 3);
    let mut model = build(&s, 0).unwrap();
    let label = model.layout().label_param().unwrap();
    for i in 0..model.params().len() {
        let shape = model.tensor(i).shape().to_vec();
        let t = if i == label {
            DenseTensor::from_fn(&shape, |idx| (idx[0] + 1) as f64)
        } else {
            DenseTensor::filled(&shape, 1.0)
        };
        *model.tensor_mut(i) = t;
    }
    for x in [[0.0, 0.3, 1.0], [0.5, 0.5, 0.5]] {
        for k in 0..3 {
            let s = score(&model, &x, k).unwrap();
            assert!((s - (k + 1) as f64).abs() < 1e-12, "class {k}: {s}");
        }
    }
}

#[test]
fn posterior_examples() {
    let uniform = Posterior::from_scores(vec![2.5; 4]).unwrap();
    assert!(uniform.probs.iter().all(|p| (p - 0.25).abs() < 1e-15));

    let p = Posterior::from_scores(vec![0.0, 3f64.ln()]).unwrap();
    assert!((p.probs[0] - 0.25).abs() < 1e-15 && (p.probs[1] - 0.75).abs() < 1e-15);
    for c in [-50.0, 50.0] {
        let shifted = Posterior::from_scores(vec![c, 3f64.ln() + c]).unwrap();
        assert!((shifted.probs[0] - 0.25).abs() < 1e-12 && (shifted.probs[1] - 0.75).abs() < 1e-12);
        assert_eq!(shifted.predicted(), 1);
    }
    assert!(Posterior::from_scores(vec![0.0, f64::INFINITY]).is_err());
}

#[test]
fn loss_examples() {
    assert_eq!(Posterior::from_scores(vec![0.0, 1000.0]).unwrap().nll(1), 0.0);
    let uniform = Posterior::from_scores(vec![0.0; 10]).unwrap();
    assert!((uniform.nll(3) - 10f64.ln()).abs() < 1e-12);
    assert!((uniform.nll(3) - 2.302585).abs() < 1e-6);
    let p = Posterior::from_scores(vec![0.0, 3f64.ln()]).unwrap();
    assert!((p.nll(0) - 4f64.ln()).abs() < 1e-12);
    assert!((p.nll(0) - 1.386294).abs() < 1e-6);
}

#[test]
fn symmetric_start_has_vanishing_gradient_off_the_label() {
    for kind in ArchitectureKind::ALL {
        if kind == ArchitectureKind::EpsLinear {
            continue;
        }
        let model = build(&spec(kind, true), 5).unwrap();
        let batch = random_batch(Geometry::grid(3, 3), 3, 4, 6).unwrap();
        let g = gradient(&model, &batch).unwrap();
        let label = model.layout().label_param().unwrap();
        for i in (0..model.num_tensors()).filter(|&i| i != label) {
            let m = g.tensors[i].data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            let gl = g.tensors[label].data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            // The cancellation of sum_y (p_y - [y = label]) is exact in real
            // arithmetic; in f64 it leaves a few ulps of the label gradient.
            assert!(m <= 64.0 * f64::EPSILON * gl, "{kind}: {} off-label gradient {m:e}", model.tensor_name(i));
        }
    }
}

#[test]
fn duplicated_samples_give_the_single_sample_gradient() {
    let model = perturbed(build(&spec(ArchitectureKind::SbsSnake, true), 1).unwrap(), 0.2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_input(9, &mut rng);
    let one = Dataset::new(Geometry::grid(3, 3), x.clone(), vec![1], 3).unwrap();
    let three = Dataset::new(Geometry::grid(3, 3), x.repeat(3), vec![1; 3], 3).unwrap();
    let (g1, g3) = (gradient(&model, &one).unwrap(), gradient(&model, &three).unwrap());
    for (a, b) in g1.tensors.iter().zip(&g3.tensors) {
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-14 * u.abs().max(1e-300) + 1e-300, "{u} vs {v}");
        }
    }
    assert!((loss(&model, &one).unwrap() - loss(&model, &three).unwrap()).abs() < 1e-14);
}

#[test]
fn environments_reproduce_every_string_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in ArchitectureKind::ALL {
        if kind == ArchitectureKind::EpsLinear {
            continue;
        }
        let model = perturbed(build(&spec(kind, false), 2).unwrap(), 0.3, 3);
        let evaluator = Evaluator::new(&model);
        for y in 0..3 {
            let cache = evaluator.cache(&random_input(9, &mut rng), y).unwrap();
            let err = cache.environment_error().unwrap();
            assert!(err < EXACT_TOL, "{kind}: {err:e}");
        }
    }
}

#[test]
fn score_is_linear_in_each_string_tensor() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in ArchitectureKind::ALL {
        let base = perturbed(build(&spec(kind, false), 3).unwrap(), 0.3, 4);
        let x = random_input(9, &mut rng);
        for i in (0..base.params().len()).filter(|&i| base.tensor_name(i).starts_with("string")) {
            let other = perturbed(base.clone(), 0.5, 10 + i as u64);
            let mut b = base.clone();
            *b.tensor_mut(i) = other.tensor(i).clone();
            let (t, alpha) = (0.3, -1.7);
            let mut mix = base.clone();
            *mix.tensor_mut(i) = base.tensor(i).map(|v| v * (1.0 - t)).scaled_add(t, b.tensor(i)).unwrap();
            let mut scaled = base.clone();
            *scaled.tensor_mut(i) = base.tensor(i).map(|v| v * alpha);
            for y in 0..3 {
                let (sa, sb) = (score(&base, &x, y).unwrap(), score(&b, &x, y).unwrap());
                let interpolated = (1.0 - t) * sa + t * sb;
                let sm = score(&mix, &x, y).unwrap();
                assert!(
                    (sm - interpolated).abs() < 1e-10 * sa.abs().max(sb.abs()).max(1.0),
                    "{kind} {}: {sm} vs {interpolated} ({sa}, {sb})",
                    base.tensor_name(i)
                );
                assert!(rel(score(&scaled, &x, y).unwrap(), alpha * sa) < 1e-10, "{kind} {}", base.tensor_name(i));
            }
        }
    }
}

#[test]
fn learnable_features_are_piecewise_constant() {
    let model = perturbed(build(&spec(ArchitectureKind::Sbs2d, true), 1).unwrap(), 0.2, 6);
    // 8 bins: 0.26 and 0.37 share bin 2.
    let a = [0.26, 0.9, 0.1, 0.5, 0.5, 0.0, 1.0, 0.7, 0.3];
    let mut b = a;
    b[0] = 0.37;
    assert_eq!(scores(&model, &a).unwrap(), scores(&model, &b).unwrap());
    b[0] = 0.38;
    assert_ne!(scores(&model, &a).unwrap(), scores(&model, &b).unwrap());
}

#[test]
fn analytic_gradients_match_finite_differences_for_every_kind() {
    // Five-point rule at 1e-4. The step-1e-5 central rule loses about 1e-5
    // relative accuracy to roundoff on positive-variant entries with
    // gradients near 1e-7, and its h^2 truncation reaches 1e-5 on the most
    // curved sbs-2d entries. Both are properties of the probe.
    for (bond_dim, seed) in [(1, 7), (2, 8), (3, 9)] {
        for (name, check) in gradient_suite_stencil(bond_dim, seed, Stencil::FivePoint(1e-4), |_| {}).unwrap() {
            assert!(check.checked > 0);
            assert!(
                check.max_rel_error < GRAD_TOL,
                "D = {bond_dim}, {name}: {:e} at {:?}",
                check.max_rel_error,
                check.worst
            );
        }
    }
}

#[test]
fn engine_matches_flattened_oracle_on_binary_inputs() {
    let worst = engine_matches_oracle(21).unwrap();
    assert!(worst < EXACT_TOL, "{worst:e}");
}

#[test]
fn rbm_string_bond_scores() {
    let zero = rbm_to_sbs(&DenseTensor::zeros(&[2, 3])).unwrap();
    for bits in 0..8 {
        let x: Vec<f64> = (0..3).map(|j| ((bits >> j) & 1) as f64).collect();
        assert!((score(&zero, &x, 0).unwrap() - 4.0).abs() < 1e-12);
    }
    let w = DenseTensor::matrix(&[&[2f64.ln(), 3f64.ln()]]).unwrap();
    let model = rbm_to_sbs(&w).unwrap();
    assert!((score(&model, &[1.0, 1.0], 0).unwrap() - 7.0).abs() < 1e-12);
}

#[test]
fn rbm_score_ignores_hidden_unit_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = DenseTensor::from_fn(&[3, 4], |_| rng.sample(StandardNormal));
    let swapped = DenseTensor::from_fn(&[3, 4], |i| w.get(&[[2, 0, 1][i[0]], i[1]]));
    let (a, b) = (rbm_to_sbs(&w).unwrap(), rbm_to_sbs(&swapped).unwrap());
    for bits in 0..16 {
        let x: Vec<f64> = (0..4).map(|j| ((bits >> j) & 1) as f64).collect();
        assert!(rel(score(&a, &x, 0).unwrap(), score(&b, &x, 0).unwrap()) < 1e-12);
    }
}

/// Identity strings with a label tensor that sums its inputs leave a product
/// of per-plaquette scalars.
#[test]
fn eps_sbs_with_identity_strings_is_a_plaquette_product() {
    let mut s = ArchitectureSpec::new(ArchitectureKind::EpsSbs, [3, 3], 2, 3);
    s.eps_out_dim = 2;
    let mut model = perturbed(build(&s, 4).unwrap(), 0.3, 5);
    let label = model.layout().label_param().unwrap();
    for i in 0..model.params().len() {
        let shape = model.tensor(i).shape().to_vec();
        if i == label {
            *model.tensor_mut(i) = DenseTensor::from_fn(&shape, |idx| ((idx[0] + 1) * usize::from(idx[2] == idx[3])) as f64);
        } else if model.tensor_name(i).starts_with("string") {
            *model.tensor_mut(i) = DenseTensor::from_fn(&shape, |idx| f64::from(u8::from(idx[1] == idx[2])));
        }
    }
    assert_eq!(model.layout().strings.len(), 4);
    let plaquette = model.tensor(model.tensor_index("plaquette").unwrap()).clone();
    let fm = model.feature_map().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let x = random_input(9, &mut rng);
        let mut product = 1.0;
        for sites in eps_layout(3, 3, [2, 2]).unwrap() {
            let mut t = plaquette.clone();
            for &site in &sites {
                t = contract(&DenseTensor::vector(&fm.map_input(x[site])), &t, &[(0, 0).into()]).unwrap();
            }
            product *= t.data().iter().sum::<f64>();
        }
        for k in 0..3 {
            let expected = (k + 1) as f64 * 2f64.powi(4) * product.powi(4);
            assert!(rel(score(&model, &x, k).unwrap(), expected) < 1e-12);
        }
    }
}

#[test]
fn positive_models_score_strictly_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for kind in ArchitectureKind::ALL {
        let model = perturbed(build(&spec(kind, true), 1).unwrap().into_positive(1e-4), 2.0, 3);
        for _ in 0..20 {
            let x = random_input(9, &mut rng);
            let p = posterior(&model, &x).unwrap();
            if kind != ArchitectureKind::EpsLinear {
                assert!(p.log_scores.iter().all(|&s| s > 0.0), "{kind}: {:?}", p.log_scores);
            }
        }
    }
}
