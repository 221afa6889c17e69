//! Architecture descriptions and the parameterized models built from them.
//!
//! Every architecture is a set of closed (or, for `mps`, open) strings of
//! site tensors, optionally fed by a layer of plaquette tensors. Site tensors
//! have shape `d x D_left x D_right`; the label site carries an extra leading
//! class axis, `K x d x D_left x D_right`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMap, FeatureSpec};
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchitectureKind {
    #[serde(rename = "mps")]
    Mps,
    #[serde(rename = "eps-linear")]
    EpsLinear,
    #[serde(rename = "sbs-2d")]
    Sbs2d,
    #[serde(rename = "sbs-snake")]
    SbsSnake,
    #[serde(rename = "eps-sbs")]
    EpsSbs,
    #[serde(rename = "rbm-sbs")]
    RbmSbs,
}

impl ArchitectureKind {
    pub const ALL: [ArchitectureKind; 6] = [
        ArchitectureKind::Mps,
        ArchitectureKind::EpsLinear,
        ArchitectureKind::Sbs2d,
        ArchitectureKind::SbsSnake,
        ArchitectureKind::EpsSbs,
        ArchitectureKind::RbmSbs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchitectureKind::Mps => "mps",
            ArchitectureKind::EpsLinear => "eps-linear",
            ArchitectureKind::Sbs2d => "sbs-2d",
            ArchitectureKind::SbsSnake => "sbs-snake",
            ArchitectureKind::EpsSbs => "eps-sbs",
            ArchitectureKind::RbmSbs => "rbm-sbs",
        }
    }

    pub fn has_plaquettes(self) -> bool {
        matches!(self, ArchitectureKind::EpsLinear | ArchitectureKind::EpsSbs)
    }
}

impl std::fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which site tensor carries the class axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSite {
    pub string: usize,
    pub position: usize,
}

/// Declarative network description; the JSON form is the `architecture`
/// section of a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub kind: ArchitectureKind,
    /// `[H, W]`; a length-N sequence is `[1, N]`.
    pub grid: [usize; 2],
    pub bond_dim: usize,
    #[serde(default = "default_two")]
    pub feature_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_plaquette")]
    pub plaquette: [usize; 2],
    #[serde(default = "default_two")]
    pub eps_out_dim: usize,
    /// Defaults to the middle site of the first string.
    #[serde(default)]
    pub label_site: Option<LabelSite>,
    #[serde(default = "default_true")]
    pub share_plaquettes: bool,
    /// Number of strings (hidden units) for `rbm-sbs`.
    #[serde(default)]
    pub num_strings: Option<usize>,
    #[serde(default)]
    pub features: FeatureSpec,
}

fn default_two() -> usize {
    2
}

fn default_plaquette() -> [usize; 2] {
    [2, 2]
}

fn default_true() -> bool {
    true
}

impl ArchitectureSpec {
    /// A spec with defaults for everything but the essentials.
    pub fn new(kind: ArchitectureKind, grid: [usize; 2], bond_dim: usize, num_classes: usize) -> Self {
        ArchitectureSpec {
            kind,
            grid,
            bond_dim,
            feature_dim: 2,
            num_classes,
            plaquette: [2, 2],
            eps_out_dim: 2,
            label_site: None,
            share_plaquettes: true,
            num_strings: None,
            features: FeatureSpec::default(),
        }
    }

    pub fn sites(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    /// Grid covered by the strings: the input grid, or the plaquette output
    /// grid for composite kinds.
    pub fn string_grid(&self) -> [usize; 2] {
        if self.kind.has_plaquettes() {
            [
                self.grid[0] + 1 - self.plaquette[0],
                self.grid[1] + 1 - self.plaquette[1],
            ]
        } else {
            self.grid
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid[0] == 0 || self.grid[1] == 0 {
            return Err(Error::validation("grid", "extents must be positive"));
        }
        if self.bond_dim == 0 {
            return Err(Error::validation("bond_dim", "must be at least 1"));
        }
        if self.feature_dim == 0 {
            return Err(Error::validation("feature_dim", "must be at least 1"));
        }
        if self.num_classes == 0 {
            return Err(Error::validation("num_classes", "must be at least 1"));
        }
        if self.features.kind == FeatureKind::Linear && self.feature_dim != 2 {
            return Err(Error::validation("feature_dim", "the linear feature map has dimension 2"));
        }
        if self.kind.has_plaquettes() {
            let [h, w] = self.plaquette;
            if h == 0 || w == 0 {
                return Err(Error::validation("plaquette", "extents must be positive"));
            }
            if self.grid[0] < h || self.grid[1] < w {
                return Err(Error::validation(
                    "plaquette",
                    format!("{h}x{w} plaquette does not fit a {:?} grid", self.grid),
                ));
            }
            if self.eps_out_dim == 0 {
                return Err(Error::validation("eps_out_dim", "must be at least 1"));
            }
        }
        match self.kind {
            ArchitectureKind::Mps if self.sites() < 2 => {
                return Err(Error::validation("grid", "an open mps needs at least two sites"));
            }
            ArchitectureKind::RbmSbs => {
                if self.bond_dim != 2 {
                    return Err(Error::validation("bond_dim", "rbm-sbs strings have bond dimension 2"));
                }
                if self.num_strings.unwrap_or(0) == 0 {
                    return Err(Error::validation("num_strings", "rbm-sbs needs at least one string"));
                }
            }
            _ => {}
        }
        if let Some(site) = self.label_site {
            if self.kind == ArchitectureKind::EpsLinear {
                return Err(Error::validation("label_site", "eps-linear carries labels in its linear head"));
            }
            let strings = string_layouts(self)?;
            let Some(s) = strings.get(site.string) else {
                return Err(Error::validation(
                    "label_site",
                    format!("string {} of {}", site.string, strings.len()),
                ));
            };
            if site.position >= s.sites.len() {
                return Err(Error::validation(
                    "label_site",
                    format!("position {} of a {}-site string", site.position, s.sites.len()),
                ));
            }
        }
        Ok(())
    }
}

/// An ordered subset of sites carrying one chain of matrices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StringLayout {
    pub sites: Vec<usize>,
    /// Trace boundary; open strings have one-dimensional end bonds.
    pub closed: bool,
}

/// The four snake orderings of an `h x w` grid: row-major boustrophedon,
/// column-major boustrophedon, and their reverses.
pub fn snake_orderings(h: usize, w: usize) -> [Vec<usize>; 4] {
    let mut rows = Vec::with_capacity(h * w);
    for r in 0..h {
        if r % 2 == 0 {
            rows.extend((0..w).map(|c| r * w + c));
        } else {
            rows.extend((0..w).rev().map(|c| r * w + c));
        }
    }
    let mut cols = Vec::with_capacity(h * w);
    for c in 0..w {
        if c % 2 == 0 {
            cols.extend((0..h).map(|r| r * w + c));
        } else {
            cols.extend((0..h).rev().map(|r| r * w + c));
        }
    }
    let rows_rev = rows.iter().rev().copied().collect();
    let cols_rev = cols.iter().rev().copied().collect();
    [rows, cols, rows_rev, cols_rev]
}

/// Site lists (row-major within each plaquette) of all stride-1 plaquettes of
/// size `plaquette` on an `h x w` grid, ordered row-major by top-left corner.
pub fn eps_layout(h: usize, w: usize, plaquette: [usize; 2]) -> Result<Vec<Vec<usize>>> {
    let [ph, pw] = plaquette;
    if ph == 0 || pw == 0 || h < ph || w < pw {
        return Err(Error::validation(
            "plaquette",
            format!("{ph}x{pw} plaquette does not fit a {h}x{w} grid"),
        ));
    }
    let mut out = Vec::with_capacity((h - ph + 1) * (w - pw + 1));
    for r in 0..=h - ph {
        for c in 0..=w - pw {
            let mut sites = Vec::with_capacity(ph * pw);
            for dr in 0..ph {
                for dc in 0..pw {
                    sites.push((r + dr) * w + c + dc);
                }
            }
            out.push(sites);
        }
    }
    Ok(out)
}

fn string_layouts(spec: &ArchitectureSpec) -> Result<Vec<StringLayout>> {
    let [h, w] = spec.string_grid();
    let closed = |sites: Vec<usize>| StringLayout { sites, closed: true };
    Ok(match spec.kind {
        ArchitectureKind::Mps => vec![StringLayout {
            sites: (0..h * w).collect(),
            closed: false,
        }],
        ArchitectureKind::EpsLinear => Vec::new(),
        ArchitectureKind::Sbs2d => {
            let mut strings: Vec<StringLayout> =
                (0..h).map(|r| closed((0..w).map(|c| r * w + c).collect())).collect();
            strings.extend((0..w).map(|c| closed((0..h).map(|r| r * w + c).collect())));
            strings
        }
        ArchitectureKind::SbsSnake | ArchitectureKind::EpsSbs => {
            snake_orderings(h, w).into_iter().map(closed).collect()
        }
        ArchitectureKind::RbmSbs => {
            let m = spec
                .num_strings
                .ok_or_else(|| Error::validation("num_strings", "required for rbm-sbs"))?;
            (0..m).map(|_| closed((0..h * w).collect())).collect()
        }
    })
}

/// Where each parameter tensor is used.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub strings: Vec<StringLayout>,
    /// Parameter index of the tensor at each string position.
    pub string_params: Vec<Vec<usize>>,
    /// Bond dimension left of each position, plus the closing bond, per string.
    pub bond_dims: Vec<Vec<usize>>,
    pub label: Option<LabelSite>,
    /// Input sites of each plaquette.
    pub plaquettes: Vec<Vec<usize>>,
    /// Parameter index of each plaquette's tensor.
    pub plaquette_params: Vec<usize>,
    /// `(weight, bias)` parameter indices of the linear head.
    pub head: Option<(usize, usize)>,
    /// Input dimension of string sites.
    pub site_dim: usize,
}

impl Layout {
    pub fn label_param(&self) -> Option<usize> {
        self.label.map(|l| self.string_params[l.string][l.position])
    }
}

/// A parameterized network: its spec, layout, tensors and feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ArchitectureSpec,
    layout: Layout,
    names: Vec<String>,
    params: Vec<DenseTensor>,
    feature_map: FeatureMap,
    positive: bool,
}

/// Std-dev of the initial noise on site tensor slices, `0.1 / sqrt(D n)` for
/// strings of at most `n` sites, so the drift of a string trace away from
/// its identity value stays small however long the string is.
pub fn site_init_std(bond_dim: usize, max_string_len: usize) -> f64 {
    0.1 / ((bond_dim * max_string_len.max(1)) as f64).sqrt()
}

fn rectangular_identity(rows: usize, cols: usize) -> Vec<f64> {
    let mut m = vec![0.0; rows * cols];
    for i in 0..rows.min(cols) {
        m[i * cols + i] = 1.0;
    }
    m
}

/// Builds `spec` with seeded initialization: every site slice is identity
/// plus Gaussian noise (std-dev `0.1 / sqrt(D)`); the label tensor holds `K`
/// copies of one such initialization.
pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strings = string_layouts(spec)?;
    let d = spec.feature_dim;
    let site_dim = if spec.kind == ArchitectureKind::EpsSbs {
        spec.eps_out_dim
    } else {
        d
    };
    let label = if spec.kind == ArchitectureKind::EpsLinear {
        None
    } else {
        Some(spec.label_site.unwrap_or(LabelSite {
            string: 0,
            position: strings[0].sites.len() / 2,
        }))
    };

    let mut names = Vec::new();
    let mut params = Vec::new();
    let max_len = strings.iter().map(|l| l.sites.len()).max().unwrap_or(1);
    let site_noise = Normal::new(0.0, site_init_std(spec.bond_dim, max_len)).expect("positive std-dev");
    let label_scale: f64 = strings
        .iter()
        .map(|l| if l.closed { 1.0 / spec.bond_dim as f64 } else { 1.0 })
        .product();
    let mut string_params = Vec::with_capacity(strings.len());
    let mut bond_dims = Vec::with_capacity(strings.len());
    for (s, layout) in strings.iter().enumerate() {
        let n = layout.sites.len();
        let dims: Vec<usize> = (0..=n)
            .map(|j| {
                if !layout.closed && (j == 0 || j == n) {
                    1
                } else {
                    spec.bond_dim
                }
            })
            .collect();
        let mut indices = Vec::with_capacity(n);
        for j in 0..n {
            let (dl, dr) = (dims[j], dims[j + 1]);
            let mut slices = Vec::with_capacity(site_dim * dl * dr);
            for _ in 0..site_dim {
                let mut slice = rectangular_identity(dl, dr);
                for v in slice.iter_mut() {
                    *v += site_noise.sample(&mut rng);
                }
                slices.extend(slice);
            }
            let is_label = label.is_some_and(|l| l.string == s && l.position == j);
            let tensor = if is_label {
                let k = spec.num_classes;
                let scaled: Vec<f64> = slices.iter().map(|v| v * label_scale).collect();
                DenseTensor::new(vec![k, site_dim, dl, dr], scaled.repeat(k))?
            } else {
                DenseTensor::new(vec![site_dim, dl, dr], slices)?
            };
            indices.push(params.len());
            names.push(format!("string{s}.site{j}"));
            params.push(tensor);
        }
        string_params.push(indices);
        bond_dims.push(dims);
    }

    let mut plaquettes = Vec::new();
    let mut plaquette_params = Vec::new();
    let mut head = None;
    if spec.kind.has_plaquettes() {
        plaquettes = eps_layout(spec.grid[0], spec.grid[1], spec.plaquette)?;
        let n_in = spec.plaquette[0] * spec.plaquette[1];
        let out = spec.eps_out_dim;
        let mut shape = vec![d; n_in];
        shape.push(out);
        let fan_in = d.pow(n_in as u32) as f64;
        let noise = Normal::new(0.0, 0.1 / fan_in.sqrt()).expect("positive std-dev");
        let make_plaquette = |rng: &mut ChaCha8Rng| {
            DenseTensor::from_fn(&shape, |_| 1.0 / out as f64 + noise.sample(rng))
        };
        if spec.share_plaquettes {
            let index = params.len();
            names.push("plaquette".into());
            params.push(make_plaquette(&mut rng));
            plaquette_params = vec![index; plaquettes.len()];
        } else {
            for p in 0..plaquettes.len() {
                plaquette_params.push(params.len());
                names.push(format!("plaquette{p}"));
                params.push(make_plaquette(&mut rng));
            }
        }
        if spec.kind == ArchitectureKind::EpsLinear {
            let k = spec.num_classes;
            let fan = (plaquettes.len() * out) as f64;
            let noise = Normal::new(0.0, 0.1 / fan.sqrt()).expect("positive std-dev");
            let weight = DenseTensor::from_fn(&[k, plaquettes.len(), out], |_| noise.sample(&mut rng));
            head = Some((params.len(), params.len() + 1));
            names.push("head.weight".into());
            params.push(weight);
            names.push("head.bias".into());
            params.push(DenseTensor::zeros(&[k]));
        }
    }

    let feature_map = FeatureMap::from_spec(&spec.features, d, spec.sites(), seed ^ 0x5eed_f00d)?;
    Ok(Model {
        spec: spec.clone(),
        layout: Layout {
            strings,
            string_params,
            bond_dims,
            label,
            plaquettes,
            plaquette_params,
            head,
            site_dim,
        },
        names,
        params,
        feature_map,
        positive: false,
    })
}

/// Builds an `eps-sbs` model: a plaquette layer whose output vectors feed a
/// snake string-bond layer, each output copied to every string visiting it.
pub fn compose_eps_sbs(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
    if spec.kind != ArchitectureKind::EpsSbs {
        return Err(Error::validation("kind", format!("expected eps-sbs, got {}", spec.kind)));
    }
    build(spec, seed)
}

/// The string-bond form of an RBM with weights `w` (`M x N`, no biases):
/// `M` closed strings over all `N` sites with site matrices
/// `diag(1, exp(w_sj x_j))` for binary `x_j`. The score of input `x` is
/// `prod_s (1 + exp(sum_j w_sj x_j))`.
pub fn rbm_to_sbs(w: &DenseTensor) -> Result<Model> {
    if w.ndim() != 2 {
        return Err(Error::Dimension("rbm weights must be an M x N matrix".into()));
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let mut spec = ArchitectureSpec::new(ArchitectureKind::RbmSbs, [1, n], 2, 1);
    spec.num_strings = Some(m);
    let mut model = build(&spec, 0)?;
    for s in 0..m {
        for j in 0..n {
            let e = w.get(&[s, j]).exp();
            let slices = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, e];
            let index = model.layout.string_params[s][j];
            let t = &mut model.params[index];
            for (dst, src) in t.data_mut().chunks_mut(8).zip(std::iter::repeat(&slices)) {
                dst.copy_from_slice(src);
            }
        }
    }
    Ok(model)
}

/// Chain rule from site-tensor gradients of an RBM-form model to its weights:
/// `d/dw_sj = exp(w_sj) * d/dA_sj[1][1,1]`.
pub fn rbm_weight_gradient(model: &Model, site_grads: &[DenseTensor], w: &DenseTensor) -> Result<DenseTensor> {
    if model.spec.kind != ArchitectureKind::RbmSbs {
        return Err(Error::validation("kind", "rbm weight gradient needs an rbm-sbs model"));
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let mut out = DenseTensor::zeros(&[m, n]);
    for s in 0..m {
        for j in 0..n {
            let index = model.layout.string_params[s][j];
            let g = &site_grads[index];
            // Label tensors carry K slices of the same entry.
            let entry: f64 = g.data().chunks(8).map(|c| c[7]).sum();
            out.set(&[s, j], entry * w.get(&[s, j]).exp());
        }
    }
    Ok(out)
}

impl Model {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.feature_map
    }

    pub fn feature_map_mut(&mut self) -> &mut FeatureMap {
        &mut self.feature_map
    }

    /// Replaces the feature map; its output dimension must match `feature_dim`.
    pub fn set_feature_map(&mut self, fm: FeatureMap) -> Result<()> {
        if fm.out_dim() != self.spec.feature_dim {
            return Err(Error::Dimension(format!(
                "feature map of dimension {} for feature_dim {}",
                fm.out_dim(),
                self.spec.feature_dim
            )));
        }
        self.feature_map = fm;
        Ok(())
    }

    /// Whether stored values are logs of the network's tensor elements.
    pub fn is_positive(&self) -> bool {
        self.positive
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[DenseTensor] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Number of trainable tensors: network parameters, then feature tables
    /// when the map is learnable.
    pub fn num_tensors(&self) -> usize {
        self.params.len() + self.num_feature_tables()
    }

    pub fn num_feature_tables(&self) -> usize {
        if self.feature_map.is_learnable() {
            self.feature_map.tables().len()
        } else {
            0
        }
    }

    pub fn tensor(&self, i: usize) -> &DenseTensor {
        if i < self.params.len() {
            &self.params[i]
        } else {
            &self.feature_map.tables()[i - self.params.len()]
        }
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut DenseTensor {
        if i < self.params.len() {
            &mut self.params[i]
        } else {
            let offset = self.params.len();
            &mut self.feature_map.tables_mut()[i - offset]
        }
    }

    pub fn tensor_name(&self, i: usize) -> String {
        if i < self.params.len() {
            self.names[i].clone()
        } else {
            format!("features.table{}", i - self.params.len())
        }
    }

    pub fn tensor_index(&self, name: &str) -> Option<usize> {
        (0..self.num_tensors()).find(|&i| self.tensor_name(i) == name)
    }

    /// Total number of trainable scalars.
    pub fn num_elements(&self) -> usize {
        (0..self.num_tensors()).map(|i| self.tensor(i).len()).sum()
    }

    /// Overwrites a named tensor, keeping its shape.
    pub fn set_tensor(&mut self, name: &str, value: DenseTensor) -> Result<()> {
        let i = self
            .tensor_index(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no tensor named {name:?}")))?;
        if self.tensor(i).shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "{name} has shape {:?}, got {:?}",
                self.tensor(i).shape(),
                value.shape()
            )));
        }
        *self.tensor_mut(i) = value;
        Ok(())
    }

    /// Whether tensor `i` is stored as logs under the positive
    /// reparameterization. The linear head is left unconstrained.
    pub fn is_log_parameterized(&self, i: usize) -> bool {
        self.positive && !self.layout.head.is_some_and(|(w, b)| i == w || i == b)
    }

    /// Switches to storing logs of tensor elements: the network then uses
    /// `exp(theta)` elementwise. Existing elements are mapped through
    /// `ln(max(w, floor))`: entries at or below `floor`, negative ones
    /// included, start at `floor`.
    pub fn into_positive(mut self, floor: f64) -> Model {
        if self.positive {
            return self;
        }
        self.positive = true;
        for i in 0..self.num_tensors() {
            if self.is_log_parameterized(i) {
                let t = self.tensor(i).map(|v| v.max(floor).ln());
                *self.tensor_mut(i) = t;
            }
        }
        self
    }

    /// Reassembles a model from its spec, network parameters in build
    /// order, and feature map.
    pub(crate) fn from_parts(
        spec: ArchitectureSpec,
        named: Vec<(String, DenseTensor)>,
        feature_map: FeatureMap,
        positive: bool,
    ) -> Result<Model> {
        let mut model = build(&spec, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tensors supplied for a model with {} parameters",
                named.len(),
                model.params.len()
            )));
        }
        for (i, (name, tensor)) in named.into_iter().enumerate() {
            if model.names[i] != name {
                return Err(Error::InvalidArgument(format!(
                    "tensor {i} is {name:?}, expected {:?}",
                    model.names[i]
                )));
            }
            if model.params[i].shape() != tensor.shape() {
                return Err(Error::Dimension(format!(
                    "{name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    model.params[i].shape()
                )));
            }
            model.params[i] = tensor;
        }
        model.set_feature_map(feature_map)?;
        model.positive = positive;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mps_shapes() {
        let spec = ArchitectureSpec::new(ArchitectureKind::Mps, [1, 4], 1, 3);
        let model = build(&spec, 0).unwrap();
        assert_eq!(model.num_params(), 4);
        for j in [0, 1, 3] {
            assert_eq!(model.params()[j].shape(), &[2, 1, 1]);
        }
        assert_eq!(model.params()[2].shape(), &[3, 2, 1, 1]);
        assert_eq!(model.layout().label, Some(LabelSite { string: 0, position: 2 }));
    }

    #[test]
    fn open_mps_boundaries_are_vectors() {
        let spec = ArchitectureSpec::new(ArchitectureKind::Mps, [1, 5], 3, 2);
        let model = build(&spec, 0).unwrap();
        assert_eq!(model.params()[0].shape(), &[2, 1, 3]);
        assert_eq!(model.params()[1].shape(), &[2, 3, 3]);
        assert_eq!(model.params()[4].shape(), &[2, 3, 1]);
        assert_eq!(model.layout().bond_dims[0], vec![1, 3, 3, 3, 3, 1]);
    }

    #[test]
    fn snake_on_three_by_three_has_four_permutations() {
        let spec = ArchitectureSpec::new(ArchitectureKind::SbsSnake, [3, 3], 2, 2);
        let model = build(&spec, 1).unwrap();
        assert_eq!(model.layout().strings.len(), 4);
        for s in &model.layout().strings {
            let mut sorted = s.sites.clone();
            sorted.sort();
            assert_eq!(sorted, (0..9).collect::<Vec<_>>());
            assert!(s.closed);
        }
    }

    #[test]
    fn sbs_2d_has_rows_and_columns() {
        let spec = ArchitectureSpec::new(ArchitectureKind::Sbs2d, [2, 3], 2, 2);
        let model = build(&spec, 1).unwrap();
        let strings = &model.layout().strings;
        assert_eq!(strings.len(), 5);
        assert_eq!(strings[0].sites, vec![0, 1, 2]);
        assert_eq!(strings[1].sites, vec![3, 4, 5]);
        assert_eq!(strings[2].sites, vec![0, 3]);
        assert_eq!(strings[4].sites, vec![2, 5]);
    }

    #[test]
    fn snake_orderings_by_hand() {
        let [a, _, c, _] = snake_orderings(1, 5);
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        assert_eq!(c, vec![4, 3, 2, 1, 0]);
        let [a, b, _, _] = snake_orderings(2, 2);
        assert_eq!(a, vec![0, 1, 3, 2]);
        assert_eq!(b, vec![0, 2, 3, 1]);
    }

    #[test]
    fn snake_covers_every_grid_edge_on_3x3() {
        let orders = snake_orderings(3, 3);
        let mut edges = Vec::new();
        for r in 0..3 {
            for c in 0..3 {
                if c + 1 < 3 {
                    edges.push((r * 3 + c, r * 3 + c + 1));
                }
                if r + 1 < 3 {
                    edges.push((r * 3 + c, (r + 1) * 3 + c));
                }
            }
        }
        assert_eq!(edges.len(), 12);
        for (u, v) in edges {
            let adjacent = orders
                .iter()
                .any(|o| o.windows(2).any(|p| (p[0] == u && p[1] == v) || (p[0] == v && p[1] == u)));
            assert!(adjacent, "edge {u}-{v}");
        }
    }

    #[test]
    fn plaquette_counts() {
        assert_eq!(eps_layout(2, 2, [2, 2]).unwrap(), vec![vec![0, 1, 2, 3]]);
        assert_eq!(eps_layout(3, 3, [2, 2]).unwrap().len(), 4);
        assert_eq!(eps_layout(28, 28, [2, 2]).unwrap().len(), 729);
        assert!(eps_layout(1, 3, [2, 2]).is_err());
    }

    #[test]
    fn shared_plaquettes_reference_one_tensor() {
        let spec = ArchitectureSpec::new(ArchitectureKind::EpsLinear, [3, 3], 1, 2);
        let model = build(&spec, 0).unwrap();
        let idx = &model.layout().plaquette_params;
        assert_eq!(idx.len(), 4);
        assert!(idx.iter().all(|&i| i == idx[0]));
        let mut unshared = spec.clone();
        unshared.share_plaquettes = false;
        let model = build(&unshared, 0).unwrap();
        let idx = &model.layout().plaquette_params;
        assert_eq!(idx, &vec![0, 1, 2, 3]);
    }

    #[test]
    fn eps_sbs_second_layer_runs_on_output_grid() {
        let mut spec = ArchitectureSpec::new(ArchitectureKind::EpsSbs, [3, 3], 2, 2);
        spec.eps_out_dim = 2;
        let model = compose_eps_sbs(&spec, 0).unwrap();
        assert_eq!(spec.string_grid(), [2, 2]);
        assert_eq!(model.layout().strings.len(), 4);
        assert!(model.layout().strings.iter().all(|s| s.sites.len() == 4));
        assert_eq!(model.layout().site_dim, 2);
        let spec = ArchitectureSpec::new(ArchitectureKind::SbsSnake, [3, 3], 2, 2);
        assert!(compose_eps_sbs(&spec, 0).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let mut spec = ArchitectureSpec::new(ArchitectureKind::RbmSbs, [1, 3], 3, 2);
        spec.num_strings = Some(2);
        let err = build(&spec, 0).unwrap_err();
        assert!(matches!(&err, Error::Validation { field, .. } if field == "bond_dim"), "{err}");
        let mut spec = ArchitectureSpec::new(ArchitectureKind::SbsSnake, [3, 3], 2, 2);
        spec.label_site = Some(LabelSite { string: 4, position: 0 });
        let err = build(&spec, 0).unwrap_err();
        assert!(matches!(&err, Error::Validation { field, .. } if field == "label_site"), "{err}");
        let spec = ArchitectureSpec::new(ArchitectureKind::SbsSnake, [3, 3], 0, 2);
        assert!(matches!(build(&spec, 0), Err(Error::Validation { field, .. }) if field == "bond_dim"));
    }

    #[test]
    fn build_is_deterministic() {
        let spec = ArchitectureSpec::new(ArchitectureKind::SbsSnake, [3, 3], 3, 4);
        assert_eq!(build(&spec, 7).unwrap(), build(&spec, 7).unwrap());
        assert_ne!(build(&spec, 7).unwrap(), build(&spec, 8).unwrap());
    }

    #[test]
    fn label_slices_start_identical() {
        let spec = ArchitectureSpec::new(ArchitectureKind::SbsSnake, [3, 3], 2, 5);
        let model = build(&spec, 3).unwrap();
        let t = &model.params()[model.layout().label_param().unwrap()];
        let per_class = t.len() / 5;
        let first = &t.data()[..per_class];
        for k in 1..5 {
            assert_eq!(&t.data()[k * per_class..(k + 1) * per_class], first);
        }
    }

    #[test]
    fn spec_json_round_trip_and_unknown_keys() {
        let json = r#"{"kind":"sbs-snake","grid":[28,28],"bond_dim":4,"num_classes":10}"#;
        let spec: ArchitectureSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec, ArchitectureSpec::new(ArchitectureKind::SbsSnake, [28, 28], 4, 10));
        let back: ArchitectureSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        let bad = r#"{"kind":"sbs-snake","grid":[2,2],"bond_dim":4,"num_classes":10,"bond":3}"#;
        assert!(serde_json::from_str::<ArchitectureSpec>(bad).is_err());
        let kind: ArchitectureKind = serde_json::from_str("\"sbs-2d\"").unwrap();
        assert_eq!(kind, ArchitectureKind::Sbs2d);
    }

    #[test]
    fn positive_reparam_with_zero_logs_is_all_ones() {
        let spec = ArchitectureSpec::new(ArchitectureKind::SbsSnake, [2, 2], 2, 2);
        let mut model = build(&spec, 0).unwrap().into_positive(1e-3);
        assert!(model.is_positive());
        for i in 0..model.num_tensors() {
            let zeros = DenseTensor::zeros(model.tensor(i).shape());
            *model.tensor_mut(i) = zeros;
        }
        let eff = crate::eval::Effective::new(&model, None);
        assert!(eff.params().iter().all(|t| t.data().iter().all(|&v| v == 1.0)));
    }
}
