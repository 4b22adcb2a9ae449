use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;

use super::{stage_cost, step, Grid, Input, ModelError, PolicyTable, SystemModel};

#[derive(Clone, Debug, PartialEq)]
pub struct GridOptions {
    /// Samples per input dimension for box-shaped input sets.
    pub input_samples: usize,
    /// Absorption radius in σ units. `None` means half a cell measured through σ.
    pub sigma_abs: Option<f64>,
    /// Inputs added to the samples wherever they are admissible.
    pub anchors: Vec<Input>,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            input_samples: 201,
            sigma_abs: None,
            anchors: Vec::new(),
        }
    }
}

/// A [`SystemModel`] tabulated on a state grid: input samples, stage costs and
/// interpolation stencils of the successor for every (node, input) pair.
#[derive(Clone, Debug)]
pub struct GridModel {
    pub model: Arc<SystemModel>,
    pub grid: Arc<Grid>,
    input_offsets: Vec<usize>,
    input_values: Vec<f64>,
    shared_inputs: bool,
    cost: Vec<f64>,
    next: Vec<f64>,
    stencil_offsets: Vec<usize>,
    stencil_nodes: Vec<u32>,
    stencil_weights: Vec<f64>,
    clamped: Vec<bool>,
    absorbing: Vec<bool>,
    sigma: Vec<f64>,
    sigma_abs: f64,
}

struct NodeTable {
    inputs: Vec<Input>,
    cost: Vec<f64>,
    next: Vec<Vec<f64>>,
    stencils: Vec<Vec<(usize, f64)>>,
    clamped: Vec<bool>,
}

impl GridModel {
    pub fn build(model: Arc<SystemModel>, grid: Arc<Grid>, opts: &GridOptions) -> Result<Self, ModelError> {
        if model.n_x != grid.dim() {
            return Err(ModelError::Config(format!(
                "grid has {} dimensions but the model state has {}",
                grid.dim(),
                model.n_x
            )));
        }
        let nodes: Vec<NodeTable> = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let x = grid.state(i);
                let set = model.inputs(&x);
                if !set.is_bounded() {
                    return Err(ModelError::Config(format!(
                        "unbounded input set at x = {x:?} cannot be sampled"
                    )));
                }
                let mut inputs = set.samples(opts.input_samples);
                for u in &opts.anchors {
                    if set.contains(u) && !inputs.contains(u) {
                        inputs.push(u.clone());
                    }
                }
                inputs.sort_by(|a, b| {
                    a.iter()
                        .zip(b)
                        .map(|(p, q)| p.total_cmp(q))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
                if inputs.is_empty() || set.is_empty() {
                    return Err(ModelError::EmptyInputs { x });
                }
                let mut t = NodeTable {
                    cost: Vec::with_capacity(inputs.len()),
                    next: Vec::with_capacity(inputs.len()),
                    stencils: Vec::with_capacity(inputs.len()),
                    clamped: Vec::with_capacity(inputs.len()),
                    inputs: Vec::new(),
                };
                for u in &inputs {
                    let y = step(&model, &x, u)?;
                    t.cost.push(stage_cost(&model, &x, u)?);
                    let (st, clamped) = grid.stencil(&y);
                    t.stencils.push(st.entries);
                    t.clamped.push(clamped);
                    t.next.push(y);
                }
                t.inputs = inputs;
                Ok(t)
            })
            .collect::<Result<_, _>>()?;

        let shared_inputs = nodes.windows(2).all(|w| w[0].inputs == w[1].inputs);
        let mut gm = GridModel {
            model: model.clone(),
            grid: grid.clone(),
            input_offsets: Vec::with_capacity(grid.len() + 1),
            input_values: Vec::new(),
            shared_inputs,
            cost: Vec::new(),
            next: Vec::new(),
            stencil_offsets: vec![0],
            stencil_nodes: Vec::new(),
            stencil_weights: Vec::new(),
            clamped: Vec::new(),
            absorbing: Vec::new(),
            sigma: Vec::new(),
            sigma_abs: 0.0,
        };
        gm.input_offsets.push(0);
        for t in nodes {
            for u in &t.inputs {
                gm.input_values.extend_from_slice(u);
            }
            gm.input_offsets.push(gm.input_offsets.last().unwrap() + t.inputs.len());
            gm.cost.extend(t.cost);
            for y in t.next {
                gm.next.extend(y);
            }
            for st in t.stencils {
                for (j, w) in st {
                    gm.stencil_nodes.push(j as u32);
                    gm.stencil_weights.push(w);
                }
                gm.stencil_offsets.push(gm.stencil_nodes.len());
            }
            gm.clamped.extend(t.clamped);
        }
        gm.sigma = (0..grid.len()).map(|i| model.sigma(&grid.state(i))).collect();
        gm.sigma_abs = opts
            .sigma_abs
            .unwrap_or_else(|| default_sigma_abs(&model, &grid, &gm.sigma));
        gm.absorbing = gm.sigma.iter().map(|&s| s <= gm.sigma_abs).collect();
        Ok(gm)
    }

    pub fn n_states(&self) -> usize {
        self.grid.len()
    }

    pub fn n_actions(&self, s: usize) -> usize {
        self.input_offsets[s + 1] - self.input_offsets[s]
    }

    pub fn total_actions(&self) -> usize {
        self.cost.len()
    }

    /// Global action ids of node `s`.
    pub fn actions(&self, s: usize) -> Range<usize> {
        self.input_offsets[s]..self.input_offsets[s + 1]
    }

    pub fn inputs_shared(&self) -> bool {
        self.shared_inputs
    }

    pub fn input(&self, s: usize, a: usize) -> &[f64] {
        let n_u = self.model.n_u;
        let g = self.input_offsets[s] + a;
        &self.input_values[g * n_u..(g + 1) * n_u]
    }

    pub fn inputs_at(&self, s: usize) -> Vec<Input> {
        (0..self.n_actions(s)).map(|a| self.input(s, a).to_vec()).collect()
    }

    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.cost[self.input_offsets[s] + a]
    }

    /// Successor f(x_s, u_a) before clamping.
    pub fn next_state(&self, s: usize, a: usize) -> &[f64] {
        let n_x = self.model.n_x;
        let g = self.input_offsets[s] + a;
        &self.next[g * n_x..(g + 1) * n_x]
    }

    pub fn is_clamped(&self, s: usize, a: usize) -> bool {
        self.clamped[self.input_offsets[s] + a]
    }

    /// Stencil of the successor as (node, weight) pairs.
    pub fn successors(&self, s: usize, a: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let g = self.input_offsets[s] + a;
        let r = self.stencil_offsets[g]..self.stencil_offsets[g + 1];
        self.stencil_nodes[r.clone()]
            .iter()
            .zip(&self.stencil_weights[r])
            .map(|(&j, &w)| (j as usize, w))
    }

    /// Interpolated V at the successor.
    pub fn next_value(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (j, w) in self.successors(s, a) {
            if w > 0.0 {
                acc += w * values[j];
            }
        }
        acc
    }

    /// ℓ(x_s, u_a) + V(f(x_s, u_a)).
    pub fn q_value(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        self.cost(s, a) + self.next_value(s, a, values)
    }

    pub fn is_absorbing(&self, s: usize) -> bool {
        self.absorbing[s]
    }

    pub fn sigma_at(&self, s: usize) -> f64 {
        self.sigma[s]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn sigma_abs(&self) -> f64 {
        self.sigma_abs
    }

    pub fn max_sigma(&self) -> f64 {
        self.sigma.iter().copied().fold(0.0, f64::max)
    }

    /// Index of the input sample at node `s` closest to `u` (lowest on ties).
    pub fn nearest_input(&self, s: usize, u: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for a in 0..self.n_actions(s) {
            let d: f64 = self.input(s, a).iter().zip(u).map(|(p, q)| (p - q) * (p - q)).sum();
            if d < best.0 {
                best = (d, a);
            }
        }
        best.1
    }

    /// Map a state-feedback law onto the input samples.
    pub fn policy_from_fn(&self, h: impl Fn(&[f64]) -> Input + Sync) -> PolicyTable {
        let sel = (0..self.n_states())
            .into_par_iter()
            .map(|s| self.nearest_input(s, &h(&self.grid.state(s))))
            .collect();
        PolicyTable::singleton(sel)
    }

    /// Nodes whose selected successor left the grid box.
    pub fn clamped_nodes(&self, policy: &PolicyTable) -> Vec<bool> {
        (0..self.n_states())
            .map(|s| policy.sets[s].iter().any(|&a| self.is_clamped(s, a)))
            .collect()
    }
}

fn default_sigma_abs(model: &SystemModel, grid: &Grid, sigma: &[f64]) -> f64 {
    let centre = sigma
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let x = grid.state(centre.0);
    let mut out = centre.1;
    for d in 0..grid.dim() {
        for sign in [-1.0, 1.0] {
            let mut y = x.clone();
            y[d] += sign * 0.5 * grid.spacing()[d];
            out = out.max(model.sigma(&y));
        }
    }
    out
}
