//! Brute-force references: literal contraction loops, factor graphs and their
//! dual tensor networks, exact RBM probabilities, and flattening of models
//! into explicit networks over discrete inputs.
//!
//! Everything here trades speed for transparency. Sums are literal loops
//! over index assignments, guarded by [`STATE_LIMIT`].

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::Effective;
use crate::network::{ArchitectureKind, Model};
use crate::tensor::{contract, copy_tensor, increment, AxisPair, DenseTensor};

/// Largest number of index assignments any single enumeration may visit.
pub const STATE_LIMIT: u128 = 10_000_000;

fn guard(states: u128) -> Result<()> {
    if states > STATE_LIMIT {
        return Err(Error::Resource {
            states,
            limit: STATE_LIMIT,
        });
    }
    Ok(())
}

fn state_count(dims: impl IntoIterator<Item = usize>) -> u128 {
    dims.into_iter().fold(1u128, |acc, d| acc.saturating_mul(d as u128))
}

/// Pairwise contraction by a literal loop over every output index and every
/// summed index. Same axis conventions as [`crate::tensor::contract`].
pub fn reference_contract(a: &DenseTensor, b: &DenseTensor, pairs: &[AxisPair]) -> Result<DenseTensor> {
    for p in pairs {
        if p.axis_a >= a.ndim() || p.axis_b >= b.ndim() || a.shape()[p.axis_a] != b.shape()[p.axis_b] {
            return Err(Error::Dimension(format!("bad axis pair ({}, {})", p.axis_a, p.axis_b)));
        }
    }
    let free_a: Vec<usize> = (0..a.ndim()).filter(|i| pairs.iter().all(|p| p.axis_a != *i)).collect();
    let free_b: Vec<usize> = (0..b.ndim()).filter(|i| pairs.iter().all(|p| p.axis_b != *i)).collect();
    let out_shape: Vec<usize> = free_a
        .iter()
        .map(|&i| a.shape()[i])
        .chain(free_b.iter().map(|&i| b.shape()[i]))
        .collect();
    let sum_shape: Vec<usize> = pairs.iter().map(|p| a.shape()[p.axis_a]).collect();
    guard(state_count(out_shape.iter().chain(&sum_shape).copied()))?;
    let mut out = DenseTensor::zeros(&out_shape);
    let mut oi = vec![0; out_shape.len()];
    let mut ia = vec![0; a.ndim()];
    let mut ib = vec![0; b.ndim()];
    loop {
        for (k, &ax) in free_a.iter().enumerate() {
            ia[ax] = oi[k];
        }
        for (k, &ax) in free_b.iter().enumerate() {
            ib[ax] = oi[free_a.len() + k];
        }
        let mut total = 0.0;
        let mut si = vec![0; sum_shape.len()];
        loop {
            for (k, p) in pairs.iter().enumerate() {
                ia[p.axis_a] = si[k];
                ib[p.axis_b] = si[k];
            }
            total += a.get(&ia) * b.get(&ib);
            if !increment(&mut si, &sum_shape) {
                break;
            }
        }
        out.set(&oi, total);
        if !increment(&mut oi, &out_shape) {
            break;
        }
    }
    Ok(out)
}

/// One axis of one tensor in a [`FlatNetwork`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub tensor: usize,
    pub axis: usize,
}

impl From<(usize, usize)> for Slot {
    fn from((tensor, axis): (usize, usize)) -> Self {
        Slot { tensor, axis }
    }
}

/// An explicit tensor network: tensors (repeated to encode sharing), edges
/// between axis slots, and open legs identified by leg ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlatNetwork {
    pub tensors: Vec<DenseTensor>,
    /// Marks copy tensors, whose legs all carry one shared value.
    pub is_copy: Vec<bool>,
    pub edges: Vec<(Slot, Slot)>,
    pub open: Vec<(Slot, usize)>,
}

impl FlatNetwork {
    pub fn new() -> Self {
        FlatNetwork::default()
    }

    pub fn add(&mut self, t: DenseTensor) -> usize {
        self.tensors.push(t);
        self.is_copy.push(false);
        self.tensors.len() - 1
    }

    pub fn add_copy(&mut self, order: usize, dim: usize) -> Result<usize> {
        let t = copy_tensor(order, dim)?;
        self.tensors.push(t);
        self.is_copy.push(true);
        Ok(self.tensors.len() - 1)
    }

    pub fn connect(&mut self, a: impl Into<Slot>, b: impl Into<Slot>) {
        self.edges.push((a.into(), b.into()));
    }

    pub fn open_leg(&mut self, slot: impl Into<Slot>, leg: usize) {
        self.open.push((slot.into(), leg));
    }

    /// Every axis is used exactly once and paired extents agree.
    pub fn validate(&self) -> Result<()> {
        let mut used: Vec<Vec<bool>> = self.tensors.iter().map(|t| vec![false; t.ndim()]).collect();
        let mut mark = |s: Slot| -> Result<usize> {
            let t = self
                .tensors
                .get(s.tensor)
                .ok_or_else(|| Error::InvalidArgument(format!("no tensor {}", s.tensor)))?;
            if s.axis >= t.ndim() {
                return Err(Error::Dimension(format!("tensor {} has no axis {}", s.tensor, s.axis)));
            }
            if std::mem::replace(&mut used[s.tensor][s.axis], true) {
                return Err(Error::InvalidArgument(format!("axis {} of tensor {} used twice", s.axis, s.tensor)));
            }
            Ok(t.shape()[s.axis])
        };
        for &(a, b) in &self.edges {
            let (da, db) = (mark(a)?, mark(b)?);
            if da != db {
                return Err(Error::Dimension(format!(
                    "edge ({}, {})-({}, {}) joins extents {da} and {db}",
                    a.tensor, a.axis, b.tensor, b.axis
                )));
            }
        }
        for &(s, _) in &self.open {
            mark(s)?;
        }
        for (t, axes) in used.iter().enumerate() {
            if let Some(axis) = axes.iter().position(|u| !u) {
                return Err(Error::InvalidArgument(format!("axis {axis} of tensor {t} is unconnected")));
            }
        }
        Ok(())
    }

    /// Number of distinct leg ids (one past the largest).
    pub fn num_legs(&self) -> usize {
        self.open.iter().map(|&(_, l)| l + 1).max().unwrap_or(0)
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Exhaustive contraction with open legs fixed by `assignment[leg]`.
///
/// Indices joined through copy tensors carry one value and are enumerated
/// once; the remaining sum factorizes over connected groups of tensors,
/// each summed by a literal loop over its bound indices.
pub fn brute_contract(net: &FlatNetwork, assignment: &[usize]) -> Result<f64> {
    net.validate()?;
    // One index variable per edge and per open leg.
    let n_vars = net.edges.len() + net.open.len();
    let mut slot_var: Vec<Vec<usize>> = net.tensors.iter().map(|t| vec![0; t.ndim()]).collect();
    let mut dim = vec![0; n_vars];
    for (v, &(a, b)) in net.edges.iter().enumerate() {
        slot_var[a.tensor][a.axis] = v;
        slot_var[b.tensor][b.axis] = v;
        dim[v] = net.tensors[a.tensor].shape()[a.axis];
    }
    for (k, &(s, _)) in net.open.iter().enumerate() {
        let v = net.edges.len() + k;
        slot_var[s.tensor][s.axis] = v;
        dim[v] = net.tensors[s.tensor].shape()[s.axis];
    }

    let mut parent: Vec<usize> = (0..n_vars).collect();
    for (t, vars) in slot_var.iter().enumerate() {
        if net.is_copy[t] {
            for w in vars.windows(2) {
                let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
                parent[a] = b;
            }
        }
    }
    let class: Vec<usize> = (0..n_vars).map(|v| find(&mut parent, v)).collect();

    let mut fixed: Vec<Option<usize>> = vec![None; n_vars];
    for (k, &(_, leg)) in net.open.iter().enumerate() {
        let v = net.edges.len() + k;
        let value = *assignment
            .get(leg)
            .ok_or_else(|| Error::InvalidArgument(format!("no value for leg {leg}")))?;
        if value >= dim[v] {
            return Err(Error::InvalidArgument(format!("leg {leg} value {value} exceeds extent {}", dim[v])));
        }
        let c = class[v];
        match fixed[c] {
            Some(prev) if prev != value => return Ok(0.0),
            _ => fixed[c] = Some(value),
        }
    }

    // Group free classes that share a tensor.
    let mut group: Vec<usize> = (0..n_vars).collect();
    let factors: Vec<usize> = (0..net.tensors.len()).filter(|&t| !net.is_copy[t]).collect();
    for &t in &factors {
        let free: Vec<usize> = slot_var[t].iter().map(|&v| class[v]).filter(|&c| fixed[c].is_none()).collect();
        for w in free.windows(2) {
            let (a, b) = (find(&mut group, w[0]), find(&mut group, w[1]));
            group[a] = b;
        }
    }

    let roots: Vec<usize> = (0..n_vars).filter(|&v| class[v] == v).collect();
    let mut total = 1.0;
    // Tensors whose indices are all fixed.
    for &t in &factors {
        if slot_var[t].iter().all(|&v| fixed[class[v]].is_some()) {
            let index: Vec<usize> = slot_var[t].iter().map(|&v| fixed[class[v]].expect("fixed")).collect();
            total *= net.tensors[t].get(&index);
        }
    }
    let free_roots: Vec<usize> = roots.iter().copied().filter(|&c| fixed[c].is_none()).collect();
    let mut components: Vec<usize> = free_roots.iter().map(|&c| find(&mut group, c)).collect();
    components.sort_unstable();
    components.dedup();
    for comp in components {
        let classes: Vec<usize> = free_roots.iter().copied().filter(|&c| find(&mut group, c) == comp).collect();
        let members: Vec<usize> = factors
            .iter()
            .copied()
            .filter(|&t| slot_var[t].iter().any(|&v| classes.contains(&class[v])))
            .collect();
        let shape: Vec<usize> = classes.iter().map(|&c| dim[c]).collect();
        guard(state_count(shape.iter().copied()))?;
        let position = |c: usize| classes.iter().position(|&x| x == c);
        let mut values = vec![0; classes.len()];
        let mut sum = 0.0;
        let mut index = Vec::new();
        loop {
            let mut prod = 1.0;
            for &t in &members {
                index.clear();
                for &v in &slot_var[t] {
                    let c = class[v];
                    index.push(match position(c) {
                        Some(p) => values[p],
                        None => fixed[c].expect("class is fixed or in this component"),
                    });
                }
                prod *= net.tensors[t].get(&index);
                if prod == 0.0 {
                    break;
                }
            }
            sum += prod;
            if !increment(&mut values, &shape) {
                break;
            }
        }
        total *= sum;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FgVariable {
    pub card: usize,
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub vars: Vec<usize>,
    pub table: DenseTensor,
}

/// A discrete factor graph with nonnegative factors over visible and hidden
/// variables.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorGraph {
    pub variables: Vec<FgVariable>,
    pub factors: Vec<Factor>,
}

impl FactorGraph {
    pub fn new(variables: Vec<FgVariable>, factors: Vec<Factor>) -> Result<Self> {
        for (i, v) in variables.iter().enumerate() {
            if v.card == 0 {
                return Err(Error::validation("card", format!("variable {i} has cardinality 0")));
            }
        }
        for (f, factor) in factors.iter().enumerate() {
            let mut seen = vec![false; variables.len()];
            for &v in &factor.vars {
                if v >= variables.len() || std::mem::replace(&mut seen[v], true) {
                    return Err(Error::validation("factor", format!("factor {f} lists variable {v} invalidly")));
                }
            }
            let shape: Vec<usize> = factor.vars.iter().map(|&v| variables[v].card).collect();
            if factor.table.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "factor {f} has shape {:?}, variables need {shape:?}",
                    factor.table.shape()
                )));
            }
            if factor.table.data().iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::validation("factor", format!("factor {f} has a negative entry")));
            }
        }
        Ok(FactorGraph { variables, factors })
    }

    pub fn visible(&self) -> Vec<usize> {
        (0..self.variables.len()).filter(|&i| self.variables[i].visible).collect()
    }

    pub fn hidden(&self) -> Vec<usize> {
        (0..self.variables.len()).filter(|&i| !self.variables[i].visible).collect()
    }

    fn product(&self, values: &[usize]) -> f64 {
        let mut p = 1.0;
        let mut index = Vec::new();
        for f in &self.factors {
            index.clear();
            index.extend(f.vars.iter().map(|&v| values[v]));
            p *= f.table.get(&index);
        }
        p
    }

    /// Text form: `variables n`, one `v<id> card=<c> visible|hidden` line
    /// per variable, then per factor a `factor <ids>` line followed by its
    /// row-major entries.
    pub fn to_text(&self) -> String {
        let mut out = format!("variables {}\n", self.variables.len());
        for (i, v) in self.variables.iter().enumerate() {
            let tag = if v.visible { "visible" } else { "hidden" };
            let _ = writeln!(out, "v{i} card={} {tag}", v.card);
        }
        for f in &self.factors {
            out.push_str("factor");
            for v in &f.vars {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
            let entries: Vec<String> = f.table.data().iter().map(|x| format!("{x:?}")).collect();
            out.push_str(&entries.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (ln, header) = lines.next().ok_or_else(|| Error::parse("line 1", "empty factor graph"))?;
        let n: usize = header
            .strip_prefix("variables ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::parse(format!("line {ln}"), "expected `variables <n>`"))?;
        let mut variables = Vec::with_capacity(n);
        for i in 0..n {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::parse("end of input", format!("missing variable {i}")))?;
            let loc = format!("line {ln}");
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 || parts[0] != format!("v{i}") {
                return Err(Error::parse(loc, format!("expected `v{i} card=<c> visible|hidden`")));
            }
            let card = parts[1]
                .strip_prefix("card=")
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| Error::parse(loc.clone(), "bad cardinality"))?;
            let visible = match parts[2] {
                "visible" => true,
                "hidden" => false,
                other => return Err(Error::parse(loc, format!("unknown tag {other:?}"))),
            };
            variables.push(FgVariable { card, visible });
        }
        let mut factors = Vec::new();
        let mut pending: Option<(usize, Vec<usize>, Vec<f64>)> = None;
        let finish = |p: (usize, Vec<usize>, Vec<f64>), variables: &[FgVariable]| -> Result<Factor> {
            let (ln, vars, values) = p;
            let shape: Vec<usize> = vars
                .iter()
                .map(|&v| variables.get(v).map(|x| x.card))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::parse(format!("line {ln}"), "unknown variable id"))?;
            let table = DenseTensor::new(shape, values).map_err(|e| Error::parse(format!("line {ln}"), e.to_string()))?;
            Ok(Factor { vars, table })
        };
        for (ln, line) in lines {
            if let Some(rest) = line.strip_prefix("factor") {
                if let Some(p) = pending.take() {
                    factors.push(finish(p, &variables)?);
                }
                let vars = rest
                    .split_whitespace()
                    .map(|t| t.trim_start_matches('v').parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::parse(format!("line {ln}"), e.to_string()))?;
                pending = Some((ln, vars, Vec::new()));
            } else {
                let Some((_, _, values)) = pending.as_mut() else {
                    return Err(Error::parse(format!("line {ln}"), "entries before any factor"));
                };
                for tok in line.split_whitespace() {
                    values.push(
                        tok.parse()
                            .map_err(|_| Error::parse(format!("line {ln}"), format!("bad number {tok:?}")))?,
                    );
                }
            }
        }
        if let Some(p) = pending.take() {
            factors.push(finish(p, &variables)?);
        }
        FactorGraph::new(variables, factors)
    }
}

/// `sum_h prod_C f_C(x_C, h_C)` with `visible_values` in the order of
/// [`FactorGraph::visible`].
pub fn fg_marginal(fg: &FactorGraph, visible_values: &[usize]) -> Result<f64> {
    let visible = fg.visible();
    let hidden = fg.hidden();
    if visible_values.len() != visible.len() {
        return Err(Error::InvalidArgument(format!(
            "{} visible values for {} visible variables",
            visible_values.len(),
            visible.len()
        )));
    }
    let mut values = vec![0; fg.variables.len()];
    for (&v, &x) in visible.iter().zip(visible_values) {
        if x >= fg.variables[v].card {
            return Err(Error::InvalidArgument(format!("value {x} for variable {v}")));
        }
        values[v] = x;
    }
    let shape: Vec<usize> = hidden.iter().map(|&h| fg.variables[h].card).collect();
    guard(state_count(shape.iter().copied()))?;
    let mut h = vec![0; hidden.len()];
    let mut total = 0.0;
    loop {
        for (&var, &val) in hidden.iter().zip(&h) {
            values[var] = val;
        }
        total += fg.product(&values);
        if !increment(&mut h, &shape) {
            break;
        }
    }
    Ok(total)
}

/// Normalization: the sum of the factor product over every variable.
pub fn fg_partition(fg: &FactorGraph) -> Result<f64> {
    let shape: Vec<usize> = fg.variables.iter().map(|v| v.card).collect();
    guard(state_count(shape.iter().copied()))?;
    let mut values = vec![0; shape.len()];
    let mut total = 0.0;
    loop {
        total += fg.product(&values);
        if !increment(&mut values, &shape) {
            break;
        }
    }
    Ok(total)
}

/// The dual network: one tensor per factor, hidden variables joined through
/// copy tensors (or summed by all-ones vectors at degree one), visible
/// variables as open legs whose ids follow [`FactorGraph::visible`].
pub fn fg_to_tn(fg: &FactorGraph) -> Result<FlatNetwork> {
    let mut net = FlatNetwork::new();
    let factor_ids: Vec<usize> = fg.factors.iter().map(|f| net.add(f.table.clone())).collect();
    let mut uses: Vec<Vec<Slot>> = vec![Vec::new(); fg.variables.len()];
    for (f, factor) in fg.factors.iter().enumerate() {
        for (axis, &v) in factor.vars.iter().enumerate() {
            uses[v].push(Slot {
                tensor: factor_ids[f],
                axis,
            });
        }
    }
    let mut leg = 0;
    for (v, var) in fg.variables.iter().enumerate() {
        let slots = &uses[v];
        if var.visible {
            if slots.len() == 1 {
                net.open_leg(slots[0], leg);
            } else {
                let c = net.add_copy(slots.len() + 1, var.card)?;
                for (axis, &s) in slots.iter().enumerate() {
                    net.connect((c, axis), s);
                }
                net.open_leg((c, slots.len()), leg);
            }
            leg += 1;
        } else {
            match slots.len() {
                0 => {
                    net.add(DenseTensor::scalar(var.card as f64));
                }
                1 => {
                    let ones = net.add(DenseTensor::filled(&[var.card], 1.0));
                    net.connect((ones, 0), slots[0]);
                }
                n => {
                    let c = net.add_copy(n, var.card)?;
                    for (axis, &s) in slots.iter().enumerate() {
                        net.connect((c, axis), s);
                    }
                }
            }
        }
    }
    Ok(net)
}

fn check_rbm(w: &DenseTensor, x: &[usize]) -> Result<()> {
    if w.ndim() != 2 {
        return Err(Error::Dimension("rbm weights must be an M x N matrix".into()));
    }
    if x.len() != w.shape()[1] || x.iter().any(|&v| v > 1) {
        return Err(Error::InvalidArgument(format!(
            "expected {} binary visible values",
            w.shape()[1]
        )));
    }
    Ok(())
}

/// Unnormalized RBM probability with hidden units summed in closed form:
/// `prod_i (1 + exp(sum_j w_ij x_j))`.
pub fn rbm_prob(w: &DenseTensor, x: &[usize]) -> Result<f64> {
    check_rbm(w, x)?;
    let (m, n) = (w.shape()[0], w.shape()[1]);
    Ok((0..m)
        .map(|i| {
            let field: f64 = (0..n).map(|j| w.get(&[i, j]) * x[j] as f64).sum();
            1.0 + field.exp()
        })
        .product())
}

/// The same quantity by enumerating hidden states: `sum_h exp(sum_ij w_ij h_i x_j)`.
pub fn rbm_prob_enumerated(w: &DenseTensor, x: &[usize]) -> Result<f64> {
    check_rbm(w, x)?;
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let shape = vec![2; m];
    guard(state_count(shape.iter().copied()))?;
    let mut h = vec![0; m];
    let mut total = 0.0;
    loop {
        let mut energy = 0.0;
        for i in 0..m {
            for j in 0..n {
                energy += w.get(&[i, j]) * (h[i] * x[j]) as f64;
            }
        }
        total += energy.exp();
        if !increment(&mut h, &shape) {
            break;
        }
    }
    Ok(total)
}

/// Sum of [`rbm_prob`] over all `2^N` visible states.
pub fn rbm_partition(w: &DenseTensor) -> Result<f64> {
    let n = w.shape().get(1).copied().unwrap_or(0);
    if n > 20 {
        return Err(Error::Resource {
            states: 1u128 << n,
            limit: 1 << 20,
        });
    }
    let shape = vec![2; n];
    let mut x = vec![0; n];
    let mut total = 0.0;
    loop {
        total += rbm_prob(w, &x)?;
        if !increment(&mut x, &shape) {
            break;
        }
    }
    Ok(total)
}

/// The RBM as a factor graph: visible `x_0..x_{N-1}`, then hidden
/// `h_0..h_{M-1}`, and one pairwise factor `exp(w_ij h_i x_j)` per weight.
pub fn rbm_factor_graph(w: &DenseTensor) -> Result<FactorGraph> {
    check_rbm(w, &vec![0; w.shape().get(1).copied().unwrap_or(0)])?;
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let mut variables = vec![FgVariable { card: 2, visible: true }; n];
    variables.extend(vec![FgVariable { card: 2, visible: false }; m]);
    let mut factors = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let e = w.get(&[i, j]).exp();
            factors.push(Factor {
                vars: vec![n + i, j],
                table: DenseTensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, e])?,
            });
        }
    }
    FactorGraph::new(variables, factors)
}

/// A model over binary inputs written as a sum of explicit networks. Leg
/// `i < N` is input site `i`; leg `N` is the label.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatModel {
    pub terms: Vec<FlatNetwork>,
    pub num_inputs: usize,
}

impl FlatModel {
    /// Brute-force score of binary input `x` for class `y`.
    pub fn score(&self, x: &[usize], y: usize) -> Result<f64> {
        let mut assignment = x.to_vec();
        assignment.push(y);
        self.terms.iter().map(|t| brute_contract(t, &assignment)).sum()
    }
}

/// Contracts axis `axis` of `t` with the feature axis of `phi` (`2 x d`),
/// leaving the binary input axis in its place.
fn absorb(t: &DenseTensor, axis: usize, phi: &DenseTensor) -> Result<DenseTensor> {
    let c = contract(t, phi, &[AxisPair::new(axis, 1)])?;
    let last = c.ndim() - 1;
    let mut perm: Vec<usize> = (0..last).collect();
    perm.insert(axis, last);
    c.permute(&perm)
}

struct InputCopies {
    /// Per input site, the copy tensor and its next free axis.
    copies: Vec<(usize, usize)>,
}

impl InputCopies {
    fn new(net: &mut FlatNetwork, uses: &[usize]) -> Result<Self> {
        let mut copies = Vec::with_capacity(uses.len());
        for (i, &u) in uses.iter().enumerate() {
            let c = net.add_copy(u + 1, 2)?;
            net.open_leg((c, u), i);
            copies.push((c, 0));
        }
        Ok(InputCopies { copies })
    }

    fn attach(&mut self, net: &mut FlatNetwork, site: usize, slot: Slot) {
        let (c, next) = &mut self.copies[site];
        net.connect((*c, *next), slot);
        *next += 1;
    }
}

/// Flattens a model for binary inputs: feature vectors of `0` and `1` are
/// absorbed into the tensors that consume them, inputs are shared through
/// copy tensors, and plaquette outputs consumed by several strings are
/// realized by duplicating the plaquette per consumer.
pub fn flatten_model(model: &Model) -> Result<FlatModel> {
    let spec = model.spec();
    let layout = model.layout();
    let eff = Effective::new(model, None);
    let params = eff.params();
    let n = spec.sites();
    let d = spec.feature_dim;
    let phis: Vec<DenseTensor> = (0..n)
        .map(|i| {
            let mut rows = vec![0.0; 2 * d];
            eff.features().map_into(i, 0.0, &mut rows[..d]);
            eff.features().map_into(i, 1.0, &mut rows[d..]);
            DenseTensor::new(vec![2, d], rows)
        })
        .collect::<Result<_>>()?;
    let label_leg = n;

    let plaquette_tensor = |p: usize| -> Result<DenseTensor> {
        let mut t = params[layout.plaquette_params[p]].clone();
        for (m, &site) in layout.plaquettes[p].iter().enumerate() {
            t = absorb(&t, m, &phis[site])?;
        }
        Ok(t)
    };

    if spec.kind == ArchitectureKind::EpsLinear {
        let (wi, bi) = layout.head.expect("eps-linear has a head");
        let w = &params[wi];
        let (k, out) = (spec.num_classes, spec.eps_out_dim);
        let mut terms = Vec::new();
        for (p, members) in layout.plaquettes.iter().enumerate() {
            let mut net = FlatNetwork::new();
            let mut uses = vec![0; n];
            for &s in members {
                uses[s] += 1;
            }
            let mut inputs = InputCopies::new(&mut net, &uses)?;
            let t = net.add(plaquette_tensor(p)?);
            for (m, &site) in members.iter().enumerate() {
                inputs.attach(&mut net, site, Slot { tensor: t, axis: m });
            }
            let head = DenseTensor::from_fn(&[k, out], |i| w.get(&[i[0], p, i[1]]));
            let h = net.add(head);
            net.connect((h, 1), (t, members.len()));
            net.open_leg((h, 0), label_leg);
            // Inputs outside the plaquette stay as dangling copies.
            terms.push(net);
        }
        let mut bias = FlatNetwork::new();
        let b = bias.add(params[bi].clone());
        bias.open_leg((b, 0), label_leg);
        terms.push(bias);
        return Ok(FlatModel { terms, num_inputs: n });
    }

    let composite = spec.kind == ArchitectureKind::EpsSbs;
    let mut uses = vec![0; n];
    for string in &layout.strings {
        for &site in &string.sites {
            if composite {
                for &s in &layout.plaquettes[site] {
                    uses[s] += 1;
                }
            } else {
                uses[site] += 1;
            }
        }
    }
    let mut net = FlatNetwork::new();
    let mut inputs = InputCopies::new(&mut net, &uses)?;
    let label = layout.label.expect("string models carry a label site");
    for (s, string) in layout.strings.iter().enumerate() {
        let len = string.sites.len();
        let mut ids = Vec::with_capacity(len);
        for (j, &site) in string.sites.iter().enumerate() {
            let a = &params[layout.string_params[s][j]];
            let is_label = label.string == s && label.position == j;
            let phys = usize::from(is_label);
            let t = if composite {
                net.add(a.clone())
            } else {
                net.add(absorb(a, phys, &phis[site])?)
            };
            if is_label {
                net.open_leg((t, 0), label_leg);
            }
            if composite {
                let pt = net.add(plaquette_tensor(site)?);
                let members = &layout.plaquettes[site];
                for (m, &input) in members.iter().enumerate() {
                    inputs.attach(&mut net, input, Slot { tensor: pt, axis: m });
                }
                net.connect((pt, members.len()), (t, phys));
            } else {
                inputs.attach(&mut net, site, Slot { tensor: t, axis: phys });
            }
            ids.push((t, phys));
        }
        for j in 0..len {
            let (t, phys) = ids[j];
            if j + 1 < len {
                let (u, uphys) = ids[j + 1];
                net.connect((t, phys + 2), (u, uphys + 1));
            } else if string.closed {
                let (u, uphys) = ids[0];
                net.connect((t, phys + 2), (u, uphys + 1));
            } else {
                let cap = net.add(DenseTensor::filled(&[1], 1.0));
                net.connect((t, phys + 2), (cap, 0));
                let (u, uphys) = ids[0];
                let cap = net.add(DenseTensor::filled(&[1], 1.0));
                net.connect((u, uphys + 1), (cap, 0));
            }
        }
    }
    Ok(FlatModel {
        terms: vec![net],
        num_inputs: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_matrix_entry() {
        let m = DenseTensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let mut net = FlatNetwork::new();
        let t = net.add(m);
        net.open_leg((t, 0), 0);
        net.open_leg((t, 1), 1);
        assert_eq!(brute_contract(&net, &[1, 0]).unwrap(), 3.0);
    }

    #[test]
    fn unconnected_axis_is_rejected() {
        let mut net = FlatNetwork::new();
        let t = net.add(DenseTensor::identity(2));
        net.open_leg((t, 0), 0);
        assert!(brute_contract(&net, &[0]).is_err());
    }

    #[test]
    fn guard_refuses_large_sums() {
        let mut net = FlatNetwork::new();
        let a = net.add(DenseTensor::filled(&[10; 4], 1.0));
        let b = net.add(DenseTensor::filled(&[10; 4], 1.0));
        for k in 0..4 {
            net.connect((a, k), (b, k));
        }
        assert_eq!(brute_contract(&net, &[]).unwrap(), 1e4);
        let a = net.add(DenseTensor::filled(&[10; 4], 1.0));
        let b = net.add(DenseTensor::filled(&[10; 4], 1.0));
        let c = net.add(DenseTensor::filled(&[10; 4], 1.0));
        for k in 0..4 {
            net.connect((a, k), (b, k));
        }
        let cc = net.add(DenseTensor::filled(&[10; 4], 1.0));
        for k in 0..4 {
            net.connect((c, k), (cc, k));
        }
        // Three independent groups of 1e4 states each stay below the limit.
        assert_eq!(brute_contract(&net, &[]).unwrap(), 1e12);
        let mut big = FlatNetwork::new();
        let a = big.add(DenseTensor::filled(&[10; 8], 1.0));
        let b = big.add(DenseTensor::filled(&[10; 8], 1.0));
        for k in 0..8 {
            big.connect((a, k), (b, k));
        }
        assert!(matches!(brute_contract(&big, &[]), Err(Error::Resource { .. })));
    }

    #[test]
    fn reference_matches_fast_contraction() {
        let a = DenseTensor::from_fn(&[2, 3, 4], |i| (i[0] * 12 + i[1] * 4 + i[2]) as f64 * 0.1 - 1.0);
        let b = DenseTensor::from_fn(&[4, 3, 5], |i| ((i[0] + 2 * i[1] + 3 * i[2]) % 7) as f64 - 2.5);
        let pairs = [AxisPair::new(2, 0), AxisPair::new(1, 1)];
        let fast = contract(&a, &b, &pairs).unwrap();
        let slow = reference_contract(&a, &b, &pairs).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn all_ones_factor_graph_counts_states() {
        let variables = vec![
            FgVariable { card: 2, visible: true },
            FgVariable { card: 3, visible: false },
            FgVariable { card: 2, visible: false },
        ];
        let factors = vec![
            Factor { vars: vec![0, 1], table: DenseTensor::filled(&[2, 3], 1.0) },
            Factor { vars: vec![1, 2], table: DenseTensor::filled(&[3, 2], 1.0) },
        ];
        let fg = FactorGraph::new(variables, factors).unwrap();
        assert_eq!(fg_marginal(&fg, &[1]).unwrap(), 6.0);
        assert_eq!(fg_partition(&fg).unwrap(), 12.0);
    }

    #[test]
    fn single_factor_without_hidden_is_the_entry() {
        let fg = FactorGraph::new(
            vec![FgVariable { card: 2, visible: true }, FgVariable { card: 2, visible: true }],
            vec![Factor { vars: vec![0, 1], table: DenseTensor::matrix(&[&[0.1, 0.2], &[0.3, 0.4]]).unwrap() }],
        )
        .unwrap();
        assert_eq!(fg_marginal(&fg, &[1, 1]).unwrap(), 0.4);
    }

    #[test]
    fn hidden_in_two_factors_becomes_identity() {
        let fg = FactorGraph::new(
            vec![
                FgVariable { card: 2, visible: true },
                FgVariable { card: 3, visible: false },
                FgVariable { card: 2, visible: true },
            ],
            vec![
                Factor { vars: vec![0, 1], table: DenseTensor::filled(&[2, 3], 0.5) },
                Factor { vars: vec![1, 2], table: DenseTensor::filled(&[3, 2], 2.0) },
            ],
        )
        .unwrap();
        let net = fg_to_tn(&fg).unwrap();
        let copies: Vec<&DenseTensor> =
            net.tensors.iter().zip(&net.is_copy).filter(|(_, c)| **c).map(|(t, _)| t).collect();
        assert_eq!(copies, vec![&DenseTensor::identity(3)]);
    }

    #[test]
    fn text_round_trip() {
        let fg = FactorGraph::new(
            vec![FgVariable { card: 2, visible: true }, FgVariable { card: 3, visible: false }],
            vec![Factor {
                vars: vec![1, 0],
                table: DenseTensor::from_fn(&[3, 2], |i| 0.1 * (i[0] * 2 + i[1]) as f64 + 1.0 / 3.0),
            }],
        )
        .unwrap();
        let text = fg.to_text();
        assert!(text.starts_with("variables 2\nv0 card=2 visible\nv1 card=3 hidden\nfactor 1 0\n"));
        assert_eq!(FactorGraph::parse(&text).unwrap(), fg);
        assert!(matches!(FactorGraph::parse("variables 1\nv0 card=x visible"), Err(Error::Parse { .. })));
        assert!(FactorGraph::parse("variables 1\nv0 card=2 visible\nfactor 0\n1 2 3").is_err());
    }

    #[test]
    fn rbm_hand_values() {
        let w = DenseTensor::matrix(&[&[2f64.ln(), 3f64.ln()]]).unwrap();
        let expect = [([1, 1], 7.0), ([1, 0], 3.0), ([0, 1], 4.0), ([0, 0], 2.0)];
        for (x, p) in expect {
            assert!((rbm_prob(&w, &x).unwrap() - p).abs() < 1e-12);
            assert!((rbm_prob_enumerated(&w, &x).unwrap() - p).abs() < 1e-12);
        }
        assert!((rbm_partition(&w).unwrap() - 16.0).abs() < 1e-12);
        let zero = DenseTensor::zeros(&[2, 3]);
        assert_eq!(rbm_prob(&zero, &[1, 0, 1]).unwrap(), 4.0);
        assert_eq!(rbm_partition(&zero).unwrap(), 32.0);
    }
}
