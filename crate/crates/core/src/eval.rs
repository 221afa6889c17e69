//! Scores, posteriors, loss and analytic gradients.
//!
//! A class score is the raw product of string traces (or the linear head of
//! an `eps-linear` model); the posterior is the softmax of the scores. Each
//! sample is contracted once up to the label tensor: the environment around
//! it yields all `K` scores.
//!
//! Evaluation runs on *effective* tensors: stored values after the positive
//! reparameterization and the dropout mask are applied. [`Evaluator`] holds
//! them; [`Gradient`]s it produces are with respect to the stored values.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::features::{argmax, FeatureMap};
use crate::network::{ArchitectureKind, Model};
use crate::tensor::{matmul_into, DenseTensor};
use crate::train::DropoutMask;

/// Class posterior of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub probs: Vec<f64>,
    /// Raw class scores `s_k`; the posterior is their softmax.
    pub log_scores: Vec<f64>,
}

impl Posterior {
    /// Max-shifted softmax of `scores`.
    pub fn from_scores(scores: Vec<f64>) -> Result<Posterior> {
        if let Some(k) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NumericOverflow {
                message: format!("score of class {k} is {}", scores[k]),
                traces: scores.clone(),
            });
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= z;
        }
        Ok(Posterior {
            probs,
            log_scores: scores,
        })
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }

    /// `-log p(label)`, computed from the shifted scores.
    pub fn nll(&self, label: usize) -> f64 {
        let max = self.log_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = self.log_scores.iter().map(|s| (s - max).exp()).sum();
        z.ln() - (self.log_scores[label] - max)
    }
}

/// One tensor per trainable tensor of a model, in [`Model::tensor`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub tensors: Vec<DenseTensor>,
}

impl Gradient {
    pub fn zeros_like(model: &Model) -> Gradient {
        Gradient {
            tensors: (0..model.num_tensors())
                .map(|i| DenseTensor::zeros(model.tensor(i).shape()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x *= alpha;
            }
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(0.0);
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flat_map(|t| t.data()).all(|x| x.is_finite())
    }
}

/// Effective tensors of a model: `exp` applied to log-parameterized tensors,
/// masked elements zeroed.
#[derive(Clone, Debug)]
pub struct Effective {
    params: Vec<DenseTensor>,
    features: FeatureMap,
}

impl Effective {
    pub fn new(model: &Model, mask: Option<&DropoutMask>) -> Effective {
        let mut params = model.params().to_vec();
        let mut features = model.feature_map().clone();
        let n_params = params.len();
        for i in 0..model.num_tensors() {
            let t = if i < n_params {
                &mut params[i]
            } else {
                &mut features.tables_mut()[i - n_params]
            };
            if model.is_log_parameterized(i) {
                for v in t.data_mut() {
                    *v = v.exp();
                }
            }
            if let Some(mask) = mask {
                for (v, &keep) in t.data_mut().iter_mut().zip(mask.tensor(i)) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
        }
        Effective { params, features }
    }

    pub fn params(&self) -> &[DenseTensor] {
        &self.params
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }
}

/// Converts a gradient with respect to effective tensors into one with
/// respect to stored values: `exp(theta)` factors for log-parameterized
/// tensors, zero for masked elements.
pub fn chain_to_stored(model: &Model, mask: Option<&DropoutMask>, grad: &mut Gradient) {
    for (i, g) in grad.tensors.iter_mut().enumerate() {
        if model.is_log_parameterized(i) {
            for (gv, theta) in g.data_mut().iter_mut().zip(model.tensor(i).data()) {
                *gv *= theta.exp();
            }
        }
        if let Some(mask) = mask {
            for (gv, &keep) in g.data_mut().iter_mut().zip(mask.tensor(i)) {
                if !keep {
                    *gv = 0.0;
                }
            }
        }
    }
}

/// Per-string intermediate products of one sample.
struct StringState {
    /// Offsets of each site matrix `M_j` in `mats`; the label position holds
    /// the effective label matrix after the backward setup.
    mat_off: Vec<usize>,
    mats: Vec<f64>,
    /// Left environments `L_j = M_0 .. M_{j-1}` (all `j` for plain strings,
    /// `j <= j0` for the label string).
    left_off: Vec<usize>,
    left: Vec<f64>,
    /// Right environments `R_j = M_j .. M_{n-1}` for `j > j0` on the label
    /// string, with `R_n` the identity.
    right_off: Vec<usize>,
    right: Vec<f64>,
    trace: f64,
}

/// Forward state of one sample.
struct Forward {
    /// `sites x d` feature vectors of the inputs.
    inputs: Vec<f64>,
    /// Bin of each input for table maps.
    bins: Vec<usize>,
    /// Per-plaquette product weights, `P x d^(h w)`.
    plaq_w: Vec<f64>,
    /// Per-plaquette outputs, `P x eps_out_dim`.
    plaq_v: Vec<f64>,
    strings: Vec<StringState>,
    /// Label-tensor slices `M^k` (`K` matrices) and their environment.
    label_mats: Vec<f64>,
    label_env: Vec<f64>,
    label_traces: Vec<f64>,
    scores: Vec<f64>,
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// `out = sum_c f_c slice_c`.
fn mix(slices: &[f64], f: &[f64], out: &mut [f64]) {
    let len = out.len();
    out.fill(0.0);
    for (c, &fc) in f.iter().enumerate() {
        if fc == 0.0 {
            continue;
        }
        for (o, &a) in out.iter_mut().zip(&slices[c * len..(c + 1) * len]) {
            *o += fc * a;
        }
    }
}

fn trace_of_product(a: &[f64], b_transposed_env: &[f64]) -> f64 {
    // Tr(M E) with M: a x b and E: b x a equals sum_{a,b} M[a,b] E[b,a]; the
    // caller passes E already transposed so this is a plain dot product.
    a.iter().zip(b_transposed_env).map(|(x, y)| x * y).sum()
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

/// Evaluates one model on effective tensors.
pub struct Evaluator<'m> {
    model: &'m Model,
    eff: Effective,
}

impl<'m> Evaluator<'m> {
    pub fn new(model: &'m Model) -> Self {
        Evaluator {
            model,
            eff: Effective::new(model, None),
        }
    }

    pub fn with_mask(model: &'m Model, mask: Option<&DropoutMask>) -> Self {
        Evaluator {
            model,
            eff: Effective::new(model, mask),
        }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn effective(&self) -> &Effective {
        &self.eff
    }

    fn check_input(&self, x: &[f64]) -> Result<bool> {
        let spec = self.model.spec();
        let sites = spec.sites();
        if x.len() == sites {
            Ok(false)
        } else if x.len() == sites * spec.feature_dim {
            Ok(true)
        } else {
            Err(Error::validation(
                "input",
                format!(
                    "expected {sites} scalars or {sites} x {} feature vectors, got {} values",
                    spec.feature_dim,
                    x.len()
                ),
            ))
        }
    }

    fn forward(&self, x: &[f64]) -> Result<Forward> {
        let vectors = self.check_input(x)?;
        let spec = self.model.spec();
        let layout = self.model.layout();
        let params = &self.eff.params;
        let d = spec.feature_dim;
        let sites = spec.sites();

        let mut inputs = vec![0.0; sites * d];
        let mut bins = Vec::new();
        if vectors {
            inputs.copy_from_slice(x);
        } else {
            for (v, (&xv, out)) in x.iter().zip(inputs.chunks_mut(d)).enumerate() {
                if let Some(bin) = self.eff.features.map_into(v, xv, out) {
                    bins.push(bin);
                }
            }
        }

        let mut plaq_w = Vec::new();
        let mut plaq_v = Vec::new();
        if spec.kind.has_plaquettes() {
            let out = spec.eps_out_dim;
            let n_in = spec.plaquette[0] * spec.plaquette[1];
            let width = d.pow(n_in as u32);
            plaq_w = vec![0.0; layout.plaquettes.len() * width];
            plaq_v = vec![0.0; layout.plaquettes.len() * out];
            for (p, members) in layout.plaquettes.iter().enumerate() {
                let w = &mut plaq_w[p * width..(p + 1) * width];
                w[0] = 1.0;
                let mut len = 1;
                for &site in members {
                    let f = &inputs[site * d..(site + 1) * d];
                    // Outer product in place, last factor varying fastest.
                    for i in (0..len).rev() {
                        let base = w[i];
                        for c in (0..d).rev() {
                            w[i * d + c] = base * f[c];
                        }
                    }
                    len *= d;
                }
                let t = params[layout.plaquette_params[p]].data();
                let v = &mut plaq_v[p * out..(p + 1) * out];
                matmul_into(w, t, v, 1, width, out);
            }
        }

        let (site_feats, site_dim): (&[f64], usize) = if spec.kind == ArchitectureKind::EpsSbs {
            (&plaq_v, spec.eps_out_dim)
        } else {
            (&inputs, d)
        };

        let k = spec.num_classes;
        let mut strings = Vec::with_capacity(layout.strings.len());
        let mut label_mats = Vec::new();
        let mut label_env = Vec::new();
        let mut label_traces = Vec::new();
        for (s, string) in layout.strings.iter().enumerate() {
            let dims = &layout.bond_dims[s];
            let n = string.sites.len();
            let j0 = layout.label.filter(|l| l.string == s).map(|l| l.position);

            let mut mat_off = Vec::with_capacity(n + 1);
            let mut total = 0;
            for j in 0..n {
                mat_off.push(total);
                total += dims[j] * dims[j + 1];
            }
            mat_off.push(total);
            let mut mats = vec![0.0; total];
            for j in 0..n {
                if Some(j) == j0 {
                    continue;
                }
                let site = string.sites[j];
                let f = &site_feats[site * site_dim..(site + 1) * site_dim];
                let a = params[layout.string_params[s][j]].data();
                mix(a, f, &mut mats[mat_off[j]..mat_off[j + 1]]);
            }

            let left_end = j0.unwrap_or(n);
            let d0 = dims[0];
            let mut left_off = Vec::with_capacity(left_end + 1);
            let mut left = identity(d0);
            left_off.push(0);
            for j in 0..left_end {
                let start = left_off[j];
                let next = left.len();
                left.resize(next + d0 * dims[j + 1], 0.0);
                let (prev, cur) = left.split_at_mut(next);
                matmul_into(
                    &prev[start..],
                    &mats[mat_off[j]..mat_off[j + 1]],
                    cur,
                    d0,
                    dims[j],
                    dims[j + 1],
                );
                left_off.push(next);
            }

            let mut right_off = Vec::new();
            let mut right = Vec::new();
            let trace = if let Some(j0) = j0 {
                // R_j for j = n down to j0 + 1, stored with R_n first.
                let dn = dims[n];
                right = identity(dn);
                right_off = vec![0; n + 1];
                for j in (j0 + 1..n).rev() {
                    let start = right_off[j + 1];
                    let next = right.len();
                    right.resize(next + dims[j] * dn, 0.0);
                    let (prev, cur) = right.split_at_mut(next);
                    matmul_into(
                        &mats[mat_off[j]..mat_off[j + 1]],
                        &prev[start..start + dims[j + 1] * dn],
                        cur,
                        dims[j],
                        dims[j + 1],
                        dn,
                    );
                    right_off[j] = next;
                }
                // E = R_{j0+1} L_{j0}: dims[j0+1] x dims[j0].
                let (a, b) = (dims[j0], dims[j0 + 1]);
                let r = &right[right_off[j0 + 1]..right_off[j0 + 1] + b * dn];
                let l = &left[left_off[j0]..left_off[j0] + d0 * a];
                let mut env = vec![0.0; b * a];
                matmul_into(r, l, &mut env, b, dn, a);
                label_env = transpose(&env, b, a);

                let site = string.sites[j0];
                let f = &site_feats[site * site_dim..(site + 1) * site_dim];
                let t = params[layout.string_params[s][j0]].data();
                let per_class = site_dim * a * b;
                label_mats = vec![0.0; k * a * b];
                for (kk, m) in label_mats.chunks_mut(a * b).enumerate() {
                    mix(&t[kk * per_class..(kk + 1) * per_class], f, m);
                    label_traces.push(trace_of_product(m, &label_env));
                }
                f64::NAN
            } else {
                let l = &left[left_off[n]..];
                (0..d0).map(|i| l[i * d0 + i]).sum()
            };
            strings.push(StringState {
                mat_off,
                mats,
                left_off,
                left,
                right_off,
                right,
                trace,
            });
        }

        let scores = if let Some((wi, bi)) = layout.head {
            let w = params[wi].data();
            let b = params[bi].data();
            let per_class = plaq_v.len();
            (0..k)
                .map(|kk| {
                    b[kk]
                        + w[kk * per_class..(kk + 1) * per_class]
                            .iter()
                            .zip(&plaq_v)
                            .map(|(a, v)| a * v)
                            .sum::<f64>()
                })
                .collect()
        } else {
            let others: f64 = strings
                .iter()
                .filter(|st| !st.trace.is_nan())
                .map(|st| st.trace)
                .product();
            label_traces.iter().map(|t| t * others).collect()
        };
        let forward = Forward {
            inputs,
            bins,
            plaq_w,
            plaq_v,
            strings,
            label_mats,
            label_env,
            label_traces,
            scores,
        };
        if forward.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NumericOverflow {
                message: "non-finite class score".into(),
                traces: forward.diagnostic_traces(),
            });
        }
        Ok(forward)
    }

    /// All `K` class scores of `x`.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.scores)
    }

    pub fn score(&self, x: &[f64], y: usize) -> Result<f64> {
        self.check_label(y)?;
        Ok(self.scores(x)?[y])
    }

    pub fn posterior(&self, x: &[f64]) -> Result<Posterior> {
        let fwd = self.forward(x)?;
        Posterior::from_scores(fwd.scores)
    }

    fn check_label(&self, y: usize) -> Result<()> {
        let k = self.model.spec().num_classes;
        if y >= k {
            return Err(Error::validation("label", format!("class {y} of {k}")));
        }
        Ok(())
    }

    /// Loss of one sample and its gradient with respect to effective tensors,
    /// accumulated into `grad`.
    pub fn accumulate_sample(&self, x: &[f64], y: usize, grad: &mut Gradient) -> Result<f64> {
        self.check_label(y)?;
        let fwd = self.forward(x)?;
        let post = Posterior::from_scores(fwd.scores.clone())?;
        let mut coef = post.probs.clone();
        coef[y] -= 1.0;
        self.backward(&fwd, &coef, grad)?;
        Ok(post.nll(y))
    }

    /// Gradient of `sum_k coef_k s_k` with respect to effective tensors.
    fn backward(&self, fwd: &Forward, coef: &[f64], grad: &mut Gradient) -> Result<()> {
        let spec = self.model.spec();
        let layout = self.model.layout();
        let params = &self.eff.params;
        let d = spec.feature_dim;
        let site_dim = layout.site_dim;
        let k = spec.num_classes;

        // Gradient with respect to each string-site feature vector.
        let string_sites = if spec.kind == ArchitectureKind::EpsSbs {
            layout.plaquettes.len()
        } else {
            spec.sites()
        };
        let mut g_site = vec![0.0; string_sites * site_dim];
        let mut g_plaq = vec![0.0; fwd.plaq_v.len()];

        if let Some((wi, bi)) = layout.head {
            let per_class = fwd.plaq_v.len();
            let w = params[wi].data();
            for kk in 0..k {
                let c = coef[kk];
                let gw = &mut grad.tensors[wi].data_mut()[kk * per_class..(kk + 1) * per_class];
                for (g, v) in gw.iter_mut().zip(&fwd.plaq_v) {
                    *g += c * v;
                }
                grad.tensors[bi].data_mut()[kk] += c;
                for (g, wv) in g_plaq.iter_mut().zip(&w[kk * per_class..(kk + 1) * per_class]) {
                    *g += c * wv;
                }
            }
        } else {
            let site_feats: &[f64] = if spec.kind == ArchitectureKind::EpsSbs {
                &fwd.plaq_v
            } else {
                &fwd.inputs
            };
            let label = layout.label.expect("string models carry a label site");
            let s0 = label.string;
            let j0 = label.position;
            let g_label: f64 = coef.iter().zip(&fwd.label_traces).map(|(c, t)| c * t).sum();

            // Products of all plain-string traces but one, without division.
            let plain: Vec<usize> = (0..fwd.strings.len()).filter(|&s| s != s0).collect();
            let mut prefix = vec![1.0; plain.len() + 1];
            for (i, &s) in plain.iter().enumerate() {
                prefix[i + 1] = prefix[i] * fwd.strings[s].trace;
            }
            let mut suffix = vec![1.0; plain.len() + 1];
            for (i, &s) in plain.iter().enumerate().rev() {
                suffix[i] = suffix[i + 1] * fwd.strings[s].trace;
            }
            let p0 = prefix[plain.len()];

            // Label tensor.
            let dims0 = &layout.bond_dims[s0];
            let (a, b) = (dims0[j0], dims0[j0 + 1]);
            let ab = a * b;
            let lp = layout.string_params[s0][j0];
            let site = layout.strings[s0].sites[j0];
            let f = &site_feats[site * site_dim..(site + 1) * site_dim];
            {
                let t = params[lp].data();
                let g = grad.tensors[lp].data_mut();
                let gf = &mut g_site[site * site_dim..(site + 1) * site_dim];
                for kk in 0..k {
                    let ck = coef[kk] * p0;
                    if ck == 0.0 {
                        continue;
                    }
                    for c in 0..site_dim {
                        let off = (kk * site_dim + c) * ab;
                        let fc = f[c] * ck;
                        for (gv, e) in g[off..off + ab].iter_mut().zip(&fwd.label_env) {
                            *gv += fc * e;
                        }
                        gf[c] += ck * trace_of_product(&t[off..off + ab], &fwd.label_env);
                    }
                }
            }

            // Effective label matrix sum_k coef_k M^k.
            let mut m_eff = vec![0.0; ab];
            for (kk, m) in fwd.label_mats.chunks(ab).enumerate() {
                for (e, v) in m_eff.iter_mut().zip(m) {
                    *e += coef[kk] * v;
                }
            }
            self.label_string_backward(fwd, s0, j0, &m_eff, p0, site_feats, &mut g_site, grad);

            for (i, &s) in plain.iter().enumerate() {
                let c = g_label * prefix[i] * suffix[i + 1];
                self.plain_string_backward(fwd, s, c, site_feats, &mut g_site, grad);
            }
            if spec.kind == ArchitectureKind::EpsSbs {
                g_plaq = g_site;
                g_site = Vec::new();
            }
        }

        let mut g_input = if spec.kind.has_plaquettes() {
            self.plaquette_backward(fwd, &g_plaq, grad)
        } else {
            g_site
        };

        if !fwd.bins.is_empty() {
            let n_params = params.len();
            let fm = &self.eff.features;
            for (v, g) in g_input.chunks_mut(d).enumerate() {
                let table = n_params + fm.table_index(v);
                let bin = fwd.bins[v];
                let row = &mut grad.tensors[table].data_mut()[bin * d..(bin + 1) * d];
                for (r, gv) in row.iter_mut().zip(g.iter()) {
                    *r += gv;
                }
            }
        }
        Ok(())
    }

    /// Accumulates `coef * (R_{j+1} L_j)^T` into site `j` of string `s`.
    #[allow(clippy::too_many_arguments)]
    fn site_update(
        &self,
        s: usize,
        j: usize,
        env: &[f64],
        coef: f64,
        site_feats: &[f64],
        g_site: &mut [f64],
        grad: &mut Gradient,
    ) {
        let layout = self.model.layout();
        let site_dim = layout.site_dim;
        let pi = layout.string_params[s][j];
        let site = layout.strings[s].sites[j];
        let f = &site_feats[site * site_dim..(site + 1) * site_dim];
        let a = self.eff.params[pi].data();
        let ab = env.len();
        let g = grad.tensors[pi].data_mut();
        let gf = &mut g_site[site * site_dim..(site + 1) * site_dim];
        for c in 0..site_dim {
            let fc = f[c] * coef;
            for (gv, e) in g[c * ab..(c + 1) * ab].iter_mut().zip(env) {
                *gv += fc * e;
            }
            gf[c] += coef * trace_of_product(&a[c * ab..(c + 1) * ab], env);
        }
    }

    fn plain_string_backward(
        &self,
        fwd: &Forward,
        s: usize,
        coef: f64,
        site_feats: &[f64],
        g_site: &mut [f64],
        grad: &mut Gradient,
    ) {
        let layout = self.model.layout();
        let dims = &layout.bond_dims[s];
        let st = &fwd.strings[s];
        let n = layout.strings[s].sites.len();
        let (d0, dn) = (dims[0], dims[n]);
        let mut right = identity(dn);
        let mut x = Vec::new();
        let mut next = Vec::new();
        for j in (0..n).rev() {
            let (a, b) = (dims[j], dims[j + 1]);
            // X = R_{j+1} L_j: b x a.
            x.resize(b * a, 0.0);
            matmul_into(&right, &st.left[st.left_off[j]..st.left_off[j] + d0 * a], &mut x, b, dn, a);
            let env = transpose(&x, b, a);
            self.site_update(s, j, &env, coef, site_feats, g_site, grad);
            if j > 0 {
                next.resize(a * dn, 0.0);
                matmul_into(&st.mats[st.mat_off[j]..st.mat_off[j + 1]], &right, &mut next, a, b, dn);
                std::mem::swap(&mut right, &mut next);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn label_string_backward(
        &self,
        fwd: &Forward,
        s0: usize,
        j0: usize,
        m_eff: &[f64],
        coef: f64,
        site_feats: &[f64],
        g_site: &mut [f64],
        grad: &mut Gradient,
    ) {
        let layout = self.model.layout();
        let dims = &layout.bond_dims[s0];
        let st = &fwd.strings[s0];
        let n = layout.strings[s0].sites.len();
        let (d0, dn) = (dims[0], dims[n]);
        let mut x = Vec::new();

        // Sites left of the label: R~_{j+1} grows leftwards from M~ R_{j0+1}.
        let rj = &st.right[st.right_off[j0 + 1]..st.right_off[j0 + 1] + dims[j0 + 1] * dn];
        let mut right = vec![0.0; dims[j0] * dn];
        matmul_into(m_eff, rj, &mut right, dims[j0], dims[j0 + 1], dn);
        let mut next = Vec::new();
        for j in (0..j0).rev() {
            let (a, b) = (dims[j], dims[j + 1]);
            x.resize(b * a, 0.0);
            matmul_into(&right, &st.left[st.left_off[j]..st.left_off[j] + d0 * a], &mut x, b, dn, a);
            let env = transpose(&x, b, a);
            self.site_update(s0, j, &env, coef, site_feats, g_site, grad);
            if j > 0 {
                next.resize(a * dn, 0.0);
                matmul_into(&st.mats[st.mat_off[j]..st.mat_off[j + 1]], &right, &mut next, a, b, dn);
                std::mem::swap(&mut right, &mut next);
            }
        }

        // Sites right of the label: L~_j grows rightwards from L_{j0} M~.
        let lj = &st.left[st.left_off[j0]..st.left_off[j0] + d0 * dims[j0]];
        let mut left = vec![0.0; d0 * dims[j0 + 1]];
        matmul_into(lj, m_eff, &mut left, d0, dims[j0], dims[j0 + 1]);
        for j in j0 + 1..n {
            let (a, b) = (dims[j], dims[j + 1]);
            let r = &st.right[st.right_off[j + 1]..st.right_off[j + 1] + b * dn];
            x.resize(b * a, 0.0);
            matmul_into(r, &left, &mut x, b, dn, a);
            let env = transpose(&x, b, a);
            self.site_update(s0, j, &env, coef, site_feats, g_site, grad);
            next.resize(d0 * b, 0.0);
            matmul_into(&left, &st.mats[st.mat_off[j]..st.mat_off[j + 1]], &mut next, d0, a, b);
            std::mem::swap(&mut left, &mut next);
        }
    }

    /// Routes plaquette-output gradients to plaquette tensors; returns the
    /// gradient with respect to input feature vectors.
    fn plaquette_backward(&self, fwd: &Forward, g_v: &[f64], grad: &mut Gradient) -> Vec<f64> {
        let spec = self.model.spec();
        let layout = self.model.layout();
        let d = spec.feature_dim;
        let out = spec.eps_out_dim;
        let n_in = spec.plaquette[0] * spec.plaquette[1];
        let width = d.pow(n_in as u32);
        let mut g_input = vec![0.0; spec.sites() * d];
        let mut g_w = vec![0.0; width];
        for (p, members) in layout.plaquettes.iter().enumerate() {
            let gv = &g_v[p * out..(p + 1) * out];
            let w = &fwd.plaq_w[p * width..(p + 1) * width];
            let ti = layout.plaquette_params[p];
            let t = self.eff.params[ti].data();
            {
                let gt = grad.tensors[ti].data_mut();
                for idx in 0..width {
                    let wv = w[idx];
                    for o in 0..out {
                        gt[idx * out + o] += wv * gv[o];
                    }
                }
            }
            for idx in 0..width {
                g_w[idx] = (0..out).map(|o| t[idx * out + o] * gv[o]).sum();
            }
            // d w[idx] / d f_m[c] = prod of the other factors when idx_m = c.
            for (m, &site) in members.iter().enumerate() {
                let stride = d.pow((n_in - 1 - m) as u32);
                for idx in 0..width {
                    if g_w[idx] == 0.0 {
                        continue;
                    }
                    let c = (idx / stride) % d;
                    let mut others = 1.0;
                    for (m2, &site2) in members.iter().enumerate() {
                        if m2 != m {
                            let c2 = (idx / d.pow((n_in - 1 - m2) as u32)) % d;
                            others *= fwd.inputs[site2 * d + c2];
                        }
                    }
                    g_input[site * d + c] += g_w[idx] * others;
                }
            }
        }
        g_input
    }

    /// Mean loss and stored-value gradient over `indices` of `ds`, with
    /// per-sample work in parallel and a fixed summation order.
    pub fn batch_gradient(&self, ds: &Dataset, indices: &[usize], mask: Option<&DropoutMask>) -> Result<(f64, Gradient)> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut total = Gradient::zeros_like(self.model);
        let mut loss = 0.0;
        if rayon::current_num_threads() <= 1 {
            let mut scratch = Gradient::zeros_like(self.model);
            for &i in indices {
                scratch.fill_zero();
                loss += self.accumulate_sample(ds.sample(i), ds.label(i), &mut scratch)?;
                total.add_assign(&scratch);
            }
        } else {
            let parts: Vec<Result<(f64, Gradient)>> = indices
                .par_iter()
                .map(|&i| {
                    let mut g = Gradient::zeros_like(self.model);
                    let l = self.accumulate_sample(ds.sample(i), ds.label(i), &mut g)?;
                    Ok((l, g))
                })
                .collect();
            for part in parts {
                let (l, g) = part?;
                loss += l;
                total.add_assign(&g);
            }
        }
        let scale = 1.0 / indices.len() as f64;
        total.scale(scale);
        chain_to_stored(self.model, mask, &mut total);
        Ok((loss * scale, total))
    }

    /// Mean loss and accuracy over a dataset.
    pub fn loss_and_accuracy(&self, ds: &Dataset) -> Result<(f64, f64)> {
        if ds.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let per: Vec<Result<(f64, bool)>> = (0..ds.len())
            .into_par_iter()
            .map(|i| {
                let post = self.posterior(ds.sample(i))?;
                Ok((post.nll(ds.label(i)), post.predicted() == ds.label(i)))
            })
            .collect();
        let mut loss = 0.0;
        let mut correct = 0usize;
        for r in per {
            let (l, ok) = r?;
            loss += l;
            correct += ok as usize;
        }
        Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
    }

    /// Intermediate products of `x` with the label slice fixed to `label`.
    pub fn cache(&self, x: &[f64], label: usize) -> Result<EvalCache> {
        self.check_label(label)?;
        let fwd = self.forward(x)?;
        let layout = self.model.layout();
        let out = self.model.spec().eps_out_dim;
        let mut cache = EvalCache {
            site_matrices: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            traces: Vec::new(),
            plaquette_outputs: fwd.plaq_v.chunks(out.max(1)).map(|c| c.to_vec()).collect(),
            scores: fwd.scores.clone(),
        };
        for (s, st) in fwd.strings.iter().enumerate() {
            let dims = &layout.bond_dims[s];
            let n = layout.strings[s].sites.len();
            let mut mats = Vec::with_capacity(n);
            for j in 0..n {
                let data = if layout.label.is_some_and(|l| l.string == s && l.position == j) {
                    let ab = dims[j] * dims[j + 1];
                    fwd.label_mats[label * ab..(label + 1) * ab].to_vec()
                } else {
                    st.mats[st.mat_off[j]..st.mat_off[j + 1]].to_vec()
                };
                mats.push(DenseTensor::new(vec![dims[j], dims[j + 1]], data)?);
            }
            let mut left = vec![DenseTensor::identity(dims[0])];
            for j in 0..n {
                left.push(crate::tensor::contract(&left[j], &mats[j], &[(1, 0).into()])?);
            }
            let mut right = vec![DenseTensor::identity(dims[n]); n + 1];
            for j in (0..n).rev() {
                right[j] = crate::tensor::contract(&mats[j], &right[j + 1], &[(1, 0).into()])?;
            }
            let d0 = dims[0];
            cache.traces.push((0..d0).map(|i| left[n].get(&[i, i])).sum());
            cache.site_matrices.push(mats);
            cache.left.push(left);
            cache.right.push(right);
        }
        Ok(cache)
    }
}

impl Forward {
    fn diagnostic_traces(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.strings.iter().map(|s| s.trace).filter(|t| !t.is_nan()).collect();
        out.extend(&self.label_traces);
        if self.strings.is_empty() {
            out.extend(&self.scores);
        }
        out
    }
}

/// Environments of one sample, for inspection and tests.
#[derive(Clone, Debug)]
pub struct EvalCache {
    /// Per string, the site matrices `M_j = sum_c f_c A_j[c]`.
    pub site_matrices: Vec<Vec<DenseTensor>>,
    /// Per string, `L_0 = I, L_{j+1} = L_j M_j`.
    pub left: Vec<Vec<DenseTensor>>,
    /// Per string, `R_n = I, R_j = M_j R_{j+1}`.
    pub right: Vec<Vec<DenseTensor>>,
    pub traces: Vec<f64>,
    pub plaquette_outputs: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

impl EvalCache {
    /// Largest relative deviation of `Tr(L_j M_j R_{j+1})` from the string
    /// trace over all strings and positions.
    pub fn environment_error(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (s, mats) in self.site_matrices.iter().enumerate() {
            let t = self.traces[s];
            for (j, m) in mats.iter().enumerate() {
                let lm = crate::tensor::contract(&self.left[s][j], m, &[(1, 0).into()])?;
                let lmr = crate::tensor::contract(&lm, &self.right[s][j + 1], &[(1, 0).into()])?;
                let n = lmr.shape()[0];
                let tr: f64 = (0..n).map(|i| lmr.get(&[i, i])).sum();
                worst = worst.max((tr - t).abs() / t.abs().max(1e-300));
            }
        }
        Ok(worst)
    }
}

/// `GTN(x, y)` of a model.
pub fn score(model: &Model, x: &[f64], y: usize) -> Result<f64> {
    Evaluator::new(model).score(x, y)
}

pub fn scores(model: &Model, x: &[f64]) -> Result<Vec<f64>> {
    Evaluator::new(model).scores(x)
}

pub fn posterior(model: &Model, x: &[f64]) -> Result<Posterior> {
    Evaluator::new(model).posterior(x)
}

/// Mean negative log-likelihood over a batch.
pub fn loss(model: &Model, batch: &Dataset) -> Result<f64> {
    Ok(Evaluator::new(model).loss_and_accuracy(batch)?.0)
}

/// Gradient of the mean loss over `batch` with respect to stored values.
pub fn gradient(model: &Model, batch: &Dataset) -> Result<Gradient> {
    let indices: Vec<usize> = (0..batch.len()).collect();
    Ok(Evaluator::new(model).batch_gradient(batch, &indices, None)?.1)
}

/// Fraction of samples whose most probable class is the label.
pub fn accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    Ok(Evaluator::new(model).loss_and_accuracy(ds)?.1)
}
