//! Finite-difference gradient checks and the property battery behind the
//! `verify` command.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, Geometry};
use crate::error::Result;
use crate::eval::{Evaluator, Gradient};
use crate::features::{FeatureKind, FeatureSpec};
use crate::network::{build, rbm_to_sbs, snake_orderings, ArchitectureKind, ArchitectureSpec, Model};
use crate::oracle::{
    brute_contract, fg_marginal, fg_to_tn, flatten_model, rbm_factor_graph, rbm_prob, rbm_prob_enumerated, Factor,
    FactorGraph, FgVariable,
};
use crate::tensor::{increment, trace_product, DenseTensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so entries whose true gradient
/// vanishes are compared in absolute terms.
pub const FD_REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, FD_REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR)
}

/// Finite-difference rule for the numeric side of a gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stencil {
    /// `(L(+h) - L(-h)) / 2h`.
    Central(f64),
    /// `(-L(+2h) + 8 L(+h) - 8 L(-h) + L(-2h)) / 12h`. Truncation error is
    /// O(h^4), so a step near 1e-4 keeps it small while cutting the roundoff
    /// that dominates the central rule for gradients near `FD_REL_FLOOR`.
    FivePoint(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Tensor name and element index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
}

/// Compares the analytic batch gradient with central differences on every
/// stored element. `corrupt` lets callers inject faults into the analytic
/// side.
pub fn gradient_check_with(model: &Model, batch: &Dataset, corrupt: impl Fn(&mut Gradient)) -> Result<GradCheck> {
    gradient_check_stencil(model, batch, Stencil::Central(FD_STEP), corrupt)
}

pub fn gradient_check_stencil(
    model: &Model,
    batch: &Dataset,
    stencil: Stencil,
    corrupt: impl Fn(&mut Gradient),
) -> Result<GradCheck> {
    let indices: Vec<usize> = (0..batch.len()).collect();
    let (_, mut grad) = Evaluator::new(model).batch_gradient(batch, &indices, None)?;
    corrupt(&mut grad);
    let mut probe = model.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    for t in 0..model.num_tensors() {
        for e in 0..model.tensor(t).len() {
            let orig = model.tensor(t).data()[e];
            let mut at = |offset: f64| -> Result<f64> {
                probe.tensor_mut(t).data_mut()[e] = orig + offset;
                let l = Evaluator::new(&probe).loss_and_accuracy(batch)?.0;
                probe.tensor_mut(t).data_mut()[e] = orig;
                Ok(l)
            };
            let numeric = match stencil {
                Stencil::Central(h) => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint(h) => (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h),
            };
            let err = relative_error(grad.tensors[t].data()[e], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (model.tensor_name(t), e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

pub fn gradient_check(model: &Model, batch: &Dataset) -> Result<GradCheck> {
    gradient_check_with(model, batch, |_| {})
}

/// `n` random samples in `[0, 1]` over `geometry` with labels below `classes`.
pub fn random_batch(geometry: Geometry, classes: usize, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (0..n * geometry.sample_len()).map(|_| rng.random::<f64>()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Dataset::new(geometry, inputs, labels, classes)
}

/// Tolerance of the exact (non-differenced) agreement properties.
pub const EXACT_TOL: f64 = 1e-10;

/// Tolerance of the finite-difference gradient checks.
pub const GRAD_TOL: f64 = 1e-5;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn binary_inputs(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..1usize << n).map(move |bits| (0..n).map(|j| (bits >> j) & 1).collect())
}

fn as_reals(x: &[usize]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> DenseTensor {
    let noise = Normal::new(0.0, std).expect("positive std-dev");
    DenseTensor::from_fn(shape, |_| noise.sample(rng))
}

/// Largest pairwise relative disagreement between the closed-form RBM
/// probability, the hidden-state enumeration, the brute-forced dual network of
/// the RBM factor graph, and the score of the string-bond form, over `count`
/// random RBMs (`M <= 3`, `N <= 4`) and all their binary inputs.
pub fn rbm_triangle(count: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let m = rng.random_range(1..=3);
        let n = rng.random_range(1..=4);
        let w = normal_tensor(&[m, n], 1.0, &mut rng);
        let net = fg_to_tn(&rbm_factor_graph(&w)?)?;
        let model = rbm_to_sbs(&w)?;
        let evaluator = Evaluator::new(&model);
        for x in binary_inputs(n) {
            let paths = [
                rbm_prob(&w, &x)?,
                rbm_prob_enumerated(&w, &x)?,
                brute_contract(&net, &x)?,
                evaluator.score(&as_reals(&x), 0)?,
            ];
            for a in 0..paths.len() {
                for b in a + 1..paths.len() {
                    worst = worst.max(rel(paths[a], paths[b]));
                }
            }
        }
    }
    Ok(worst)
}

/// A random factor graph with up to 5 visible and 3 hidden variables of
/// cardinality at most 3, and up to 4 factors of order 1 to 3.
pub fn random_factor_graph(rng: &mut ChaCha8Rng) -> Result<FactorGraph> {
    let visible = rng.random_range(1..=5);
    let hidden = rng.random_range(0..=3);
    let variables: Vec<FgVariable> = (0..visible + hidden)
        .map(|i| FgVariable {
            card: rng.random_range(1..=3),
            visible: i < visible,
        })
        .collect();
    let n_factors = rng.random_range(1..=4);
    let mut factors = Vec::with_capacity(n_factors);
    for _ in 0..n_factors {
        let order = rng.random_range(1..=3.min(variables.len()));
        let mut pool: Vec<usize> = (0..variables.len()).collect();
        pool.shuffle(rng);
        let vars = pool[..order].to_vec();
        let shape: Vec<usize> = vars.iter().map(|&v| variables[v].card).collect();
        let table = DenseTensor::from_fn(&shape, |_| rng.random::<f64>());
        factors.push(Factor { vars, table });
    }
    FactorGraph::new(variables, factors)
}

/// Largest relative gap between the marginal of a factor graph and the
/// brute-forced contraction of its dual network, over `count` random graphs
/// and every visible assignment.
pub fn duality(count: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let fg = random_factor_graph(&mut rng)?;
        let net = fg_to_tn(&fg)?;
        let cards: Vec<usize> = fg.visible().iter().map(|&v| fg.variables[v].card).collect();
        let mut values = vec![0; cards.len()];
        loop {
            worst = worst.max(rel(fg_marginal(&fg, &values)?, brute_contract(&net, &values)?));
            if !increment(&mut values, &cards) {
                break;
            }
        }
    }
    Ok(worst)
}

fn kron(a: &DenseTensor, b: &DenseTensor) -> DenseTensor {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    DenseTensor::from_fn(&[ar * br, ac * bc], |i| {
        a.get(&[i[0] / br, i[1] / bc]) * b.get(&[i[0] % br, i[1] % bc])
    })
}

/// A two-string SBS (`D = 2`, five sites, both strings in the same order)
/// against the single ring whose site matrices are Kronecker products of the
/// two strings' matrices (`D = 4`); largest relative gap over all binary
/// inputs and both classes.
pub fn kronecker_equivalence(seed: u64) -> Result<f64> {
    let n = 5;
    let mut spec = ArchitectureSpec::new(ArchitectureKind::RbmSbs, [1, n], 2, 2);
    spec.num_strings = Some(2);
    let mut model = build(&spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..model.num_params() {
        let shape = model.tensor(i).shape().to_vec();
        *model.tensor_mut(i) = normal_tensor(&shape, 0.7, &mut rng);
    }
    let layout = model.layout().clone();
    let label = layout.label.expect("rbm-sbs carries a label site");
    let evaluator = Evaluator::new(&model);
    let mut worst: f64 = 0.0;
    for x in binary_inputs(n) {
        for y in 0..2 {
            let mut ring = Vec::with_capacity(n);
            for j in 0..n {
                let site = |s: usize| -> Result<DenseTensor> {
                    let t = model.tensor(layout.string_params[s][j]);
                    let offset = if label.string == s && label.position == j {
                        (y * 2 + x[j]) * 4
                    } else {
                        x[j] * 4
                    };
                    DenseTensor::new(vec![2, 2], t.data()[offset..offset + 4].to_vec())
                };
                ring.push(kron(&site(0)?, &site(1)?));
            }
            let expected = trace_product(&ring, true)?;
            worst = worst.max(rel(evaluator.score(&as_reals(&x), y)?, expected));
        }
    }
    Ok(worst)
}

/// First pair of grid neighbours that no snake string places next to each
/// other, over every grid up to `max_side x max_side`.
pub fn snake_adjacency(max_side: usize) -> Option<(usize, usize, usize, usize)> {
    for h in 1..=max_side {
        for w in 1..=max_side {
            let mut adjacent = vec![false; h * w * h * w];
            for order in snake_orderings(h, w) {
                for pair in order.windows(2) {
                    adjacent[pair[0] * h * w + pair[1]] = true;
                    adjacent[pair[1] * h * w + pair[0]] = true;
                }
            }
            for u in 0..h * w {
                let (r, c) = (u / w, u % w);
                for v in [(c + 1 < w).then_some(u + 1), (r + 1 < h).then_some(u + w)].into_iter().flatten() {
                    if !adjacent[u * h * w + v] {
                        return Some((h, w, u, v));
                    }
                }
            }
        }
    }
    None
}

fn check_spec(kind: ArchitectureKind, bond_dim: usize, learnable: bool) -> ArchitectureSpec {
    let mut spec = ArchitectureSpec::new(kind, [3, 3], bond_dim, 3);
    if kind == ArchitectureKind::RbmSbs {
        spec.bond_dim = 2;
        spec.num_strings = Some(2);
    }
    if learnable {
        spec.features = FeatureSpec {
            kind: FeatureKind::LearnableTable,
            bins: 4,
            per_variable: false,
        };
    }
    spec
}

/// Largest relative gap between the engine's scores and brute-force
/// contraction of the flattened network, for every kind on a 3x3 grid with
/// fixed and learnable features, over all binary inputs and classes.
pub fn engine_matches_oracle(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for kind in ArchitectureKind::ALL {
        for learnable in [false, true] {
            let model = build(&check_spec(kind, 2, learnable), seed)?;
            let flat = flatten_model(&model)?;
            let evaluator = Evaluator::new(&model);
            for x in binary_inputs(9).step_by(7) {
                for y in 0..3 {
                    worst = worst.max(rel(evaluator.score(&as_reals(&x), y)?, flat.score(&x, y)?));
                }
            }
        }
    }
    Ok(worst)
}

/// Gradient checks for every kind on a 3x3 grid with bond dimension
/// `bond_dim`: fixed features, learnable tables, and learnable tables under
/// the positive parameterization. `corrupt` is applied to every analytic
/// gradient.
pub fn gradient_suite(bond_dim: usize, seed: u64, corrupt: impl Fn(&mut Gradient)) -> Result<Vec<(String, GradCheck)>> {
    gradient_suite_stencil(bond_dim, seed, Stencil::Central(FD_STEP), corrupt)
}

pub fn gradient_suite_stencil(
    bond_dim: usize,
    seed: u64,
    stencil: Stencil,
    corrupt: impl Fn(&mut Gradient),
) -> Result<Vec<(String, GradCheck)>> {
    let batch = random_batch(Geometry::grid(3, 3), 3, 3, seed)?;
    let mut out = Vec::new();
    for kind in ArchitectureKind::ALL {
        for (variant, learnable, positive) in [("fixed", false, false), ("table", true, false), ("positive", true, true)] {
            let mut model = build(&check_spec(kind, bond_dim, learnable), seed)?;
            if positive {
                model = model.into_positive(1e-3);
            }
            let report = gradient_check_stencil(&model, &batch, stencil, &corrupt)?;
            out.push((format!("{kind}/{variant}"), report));
        }
    }
    Ok(out)
}

/// How thoroughly the battery searches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Small,
    Full,
}

/// A deliberate defect, used to confirm that the battery can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    GradientSignFlip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, result: Result<(bool, String)>) -> PropertyOutcome {
    match result {
        Ok((passed, detail)) => PropertyOutcome { name, passed, detail },
        Err(e) => PropertyOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn within(worst: f64, tol: f64) -> (bool, String) {
    (worst < tol, format!("max rel. error {worst:.2e} (tol {tol:.0e})"))
}

/// Runs every property and reports each one; nothing short-circuits.
pub fn run_battery(scale: Scale, fault: Option<Fault>) -> Vec<PropertyOutcome> {
    let (count, max_side, bond_dim) = match scale {
        Scale::Small => (20, 6, 2),
        Scale::Full => (200, 12, 3),
    };
    let corrupt = |g: &mut Gradient| {
        if fault == Some(Fault::GradientSignFlip) {
            g.scale(-1.0);
        }
    };
    vec![
        outcome("duality", duality(count, 1).map(|w| within(w, EXACT_TOL))),
        outcome("rbm-triangle", rbm_triangle(count, 2).map(|w| within(w, EXACT_TOL))),
        outcome(
            "gradient-check",
            gradient_suite(bond_dim, 3, corrupt).map(|rows| {
                let failing: Vec<String> = rows
                    .iter()
                    .filter(|(_, r)| !(r.max_rel_error < GRAD_TOL))
                    .map(|(name, r)| format!("{name} {:.2e}", r.max_rel_error))
                    .collect();
                let worst = rows.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
                if failing.is_empty() {
                    (true, format!("{} models, max rel. error {worst:.2e} (tol {GRAD_TOL:.0e})", rows.len()))
                } else {
                    (false, format!("failing: {}", failing.join(", ")))
                }
            }),
        ),
        outcome("kronecker-equivalence", kronecker_equivalence(4).map(|w| within(w, EXACT_TOL))),
        outcome(
            "snake-adjacency",
            Ok(match snake_adjacency(max_side) {
                None => (true, format!("all grids up to {max_side}x{max_side}")),
                Some((h, w, u, v)) => (false, format!("sites {u} and {v} never adjacent on {h}x{w}")),
            }),
        ),
        outcome("engine-vs-oracle", engine_matches_oracle(5).map(|w| within(w, EXACT_TOL))),
    ]
}
