use super::{cartesian, linspace, ModelError, State};

/// Fractional cell positions closer than this to a node are snapped onto it.
const SNAP: f64 = 1e-9;

/// Regular tensor-product grid over a box.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    n: Vec<usize>,
    step: Vec<f64>,
    strides: Vec<usize>,
    len: usize,
}

/// Interpolation weights over the corners of a grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Stencil {
    pub entries: Vec<(usize, f64)>,
}

impl Stencil {
    /// Weighted sum over the corners with positive weight.
    pub fn apply(&self, values: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &(i, w) in &self.entries {
            if w > 0.0 {
                acc += w * values[i];
            }
        }
        acc
    }
}

impl Grid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, n: Vec<usize>) -> Result<Self, ModelError> {
        if lo.len() != hi.len() || lo.len() != n.len() || lo.is_empty() {
            return Err(ModelError::Config(
                "grid bounds and resolutions must have equal, nonzero length".into(),
            ));
        }
        for d in 0..lo.len() {
            if !(lo[d].is_finite() && hi[d].is_finite()) || lo[d] > hi[d] || n[d] == 0 {
                return Err(ModelError::Config(format!("invalid grid axis {d}")));
            }
            if n[d] == 1 && lo[d] != hi[d] {
                return Err(ModelError::Config(format!("axis {d} has one node but a nonzero width")));
            }
        }
        let step = (0..lo.len())
            .map(|d| {
                if n[d] > 1 {
                    (hi[d] - lo[d]) / (n[d] - 1) as f64
                } else {
                    0.0
                }
            })
            .collect();
        let mut strides = vec![1; n.len()];
        for d in (0..n.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * n[d + 1];
        }
        let len = n.iter().product();
        Ok(Grid {
            lo,
            hi,
            n,
            step,
            strides,
            len,
        })
    }

    pub fn uniform_1d(lo: f64, hi: f64, n: usize) -> Result<Self, ModelError> {
        Self::new(vec![lo], vec![hi], vec![n])
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.n.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn resolution(&self) -> &[usize] {
        &self.n
    }

    pub fn spacing(&self) -> &[f64] {
        &self.step
    }

    /// Euclidean diameter of one cell.
    pub fn cell_diameter(&self) -> f64 {
        self.step.iter().map(|h| h * h).sum::<f64>().sqrt()
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        self.strides.iter().zip(&self.n).map(|(s, n)| (flat / s) % n).collect()
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn coord(&self, d: usize, i: usize) -> f64 {
        if i + 1 == self.n[d] {
            self.hi[d]
        } else {
            self.lo[d] + self.step[d] * i as f64
        }
    }

    pub fn state(&self, flat: usize) -> State {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(d, &i)| self.coord(d, i))
            .collect()
    }

    pub fn states(&self) -> Vec<State> {
        let axes: Vec<Vec<f64>> = (0..self.dim())
            .map(|d| {
                let mut a = linspace(self.lo[d], self.hi[d], self.n[d]);
                for (i, v) in a.iter_mut().enumerate() {
                    *v = self.coord(d, i);
                }
                a
            })
            .collect();
        cartesian(&axes)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(d, &v)| {
            v >= self.lo[d] - SNAP * self.step[d].max(1.0) && v <= self.hi[d] + SNAP * self.step[d].max(1.0)
        })
    }

    /// Clamp into the box; the flag reports whether anything moved.
    pub fn clamp(&self, x: &[f64]) -> (State, bool) {
        let inside = self.contains(x);
        let y = x
            .iter()
            .enumerate()
            .map(|(d, &v)| v.clamp(self.lo[d], self.hi[d]))
            .collect();
        (y, !inside)
    }

    fn axis_position(&self, d: usize, v: f64) -> (usize, f64) {
        if self.n[d] == 1 {
            return (0, 0.0);
        }
        let pos = ((v - self.lo[d]) / self.step[d]).clamp(0.0, (self.n[d] - 1) as f64);
        let mut i = pos.floor() as usize;
        if i >= self.n[d] - 1 {
            i = self.n[d] - 2;
        }
        let mut t = pos - i as f64;
        if t < SNAP {
            t = 0.0;
        } else if t > 1.0 - SNAP {
            t = 1.0;
        }
        (i, t)
    }

    /// Nearest node (lowest index on exact ties) and the clamp flag.
    pub fn nearest(&self, x: &[f64]) -> (usize, bool) {
        let (y, clamped) = self.clamp(x);
        let multi: Vec<usize> = (0..self.dim())
            .map(|d| {
                let (i, t) = self.axis_position(d, y[d]);
                if t > 0.5 {
                    i + 1
                } else {
                    i
                }
            })
            .collect();
        (self.flat_index(&multi), clamped)
    }

    /// Multilinear interpolation weights at `x` (clamped into the box).
    pub fn stencil(&self, x: &[f64]) -> (Stencil, bool) {
        let (y, clamped) = self.clamp(x);
        let pos: Vec<(usize, f64)> = (0..self.dim()).map(|d| self.axis_position(d, y[d])).collect();
        let corners = 1usize << self.dim();
        let mut entries = Vec::with_capacity(corners);
        for c in 0..corners {
            let mut w = 1.0;
            let mut flat = 0;
            for (d, &(i, t)) in pos.iter().enumerate() {
                let up = (c >> d) & 1 == 1;
                if self.n[d] == 1 {
                    if up {
                        w = 0.0;
                    }
                    continue;
                }
                w *= if up { t } else { 1.0 - t };
                flat += (i + usize::from(up)) * self.strides[d];
            }
            if w > 0.0 {
                entries.push((flat, w));
            }
        }
        (Stencil { entries }, clamped)
    }

    /// Nodes within Euclidean distance `radius` of node `flat` (itself included).
    pub fn neighbors_within(&self, flat: usize, radius: f64) -> Vec<usize> {
        let center = self.multi_index(flat);
        let reach: Vec<isize> = self
            .step
            .iter()
            .map(|&h| {
                if h > 0.0 {
                    (radius / h * (1.0 + 1e-12)).floor() as isize
                } else {
                    0
                }
            })
            .collect();
        let mut out = Vec::new();
        let mut offset: Vec<isize> = reach.iter().map(|r| -r).collect();
        loop {
            let mut dist2 = 0.0;
            let mut ok = true;
            let mut multi = Vec::with_capacity(self.dim());
            for d in 0..self.dim() {
                let j = center[d] as isize + offset[d];
                if j < 0 || j >= self.n[d] as isize {
                    ok = false;
                    break;
                }
                dist2 += (offset[d] as f64 * self.step[d]).powi(2);
                multi.push(j as usize);
            }
            if ok && dist2.sqrt() <= radius * (1.0 + 1e-12) {
                out.push(self.flat_index(&multi));
            }
            let mut d = self.dim();
            loop {
                if d == 0 {
                    out.sort_unstable();
                    return out;
                }
                d -= 1;
                if offset[d] < reach[d] {
                    offset[d] += 1;
                    break;
                }
                offset[d] = -reach[d];
            }
        }
    }

    /// Indices of the immediate axis neighbours of a node.
    pub fn adjacent(&self, flat: usize) -> Vec<usize> {
        let multi = self.multi_index(flat);
        let mut out = Vec::with_capacity(2 * self.dim());
        for d in 0..self.dim() {
            if multi[d] > 0 {
                out.push(flat - self.strides[d]);
            }
            if multi[d] + 1 < self.n[d] {
                out.push(flat + self.strides[d]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let g = Grid::new(vec![-1.0, 0.0], vec![1.0, 2.0], vec![5, 3]).unwrap();
        assert_eq!(g.len(), 15);
        for i in 0..g.len() {
            assert_eq!(g.flat_index(&g.multi_index(i)), i);
            assert_eq!(g.nearest(&g.state(i)).0, i);
        }
        assert_eq!(g.states().len(), 15);
        assert_eq!(g.states()[7], g.state(7));
    }

    #[test]
    fn stencil_weights_sum_to_one() {
        let g = Grid::new(vec![-1.0, 0.0], vec![1.0, 2.0], vec![5, 3]).unwrap();
        let (s, clamped) = g.stencil(&[0.3, 1.7]);
        assert!(!clamped);
        let total: f64 = s.entries.iter().map(|e| e.1).sum();
        assert!((total - 1.0).abs() < 1e-14);
        let (s, clamped) = g.stencil(&[3.0, 1.0]);
        assert!(clamped);
        assert_eq!(s.entries.len(), 1);
    }

    #[test]
    fn neighborhoods() {
        let g = Grid::uniform_1d(0.0, 1.0, 11).unwrap();
        assert_eq!(g.neighbors_within(5, g.cell_diameter()), vec![4, 5, 6]);
        assert_eq!(g.neighbors_within(0, g.cell_diameter()), vec![0, 1]);
        assert_eq!(g.neighbors_within(5, 0.0), vec![5]);
        let g2 = Grid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![3, 3]).unwrap();
        assert_eq!(g2.neighbors_within(4, g2.cell_diameter()).len(), 9);
        assert_eq!(g2.adjacent(4).len(), 4);
    }

    #[test]
    fn rejects_bad_axes() {
        assert!(Grid::new(vec![1.0], vec![0.0], vec![3]).is_err());
        assert!(Grid::new(vec![0.0], vec![1.0], vec![1]).is_err());
        assert!(Grid::new(vec![0.0], vec![0.0], vec![1]).is_ok());
    }
}
