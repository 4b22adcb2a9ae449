use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use super::{Grid, Input, InputSet, ModelError, State, SystemModel};

const MATCH: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
struct Row {
    x: State,
    u: Input,
    next: State,
    cost: f64,
}

/// Finite model given as a table of transitions (x, u, f(x, u), ℓ(x, u)).
///
/// The listed states must form a full regular grid; U(x) is the set of inputs
/// listed for x. Queries that do not match a row evaluate to NaN, which the
/// checked accessors report as model errors.
#[derive(Clone, Debug, PartialEq)]
pub struct TableModel {
    pub n_x: usize,
    pub n_u: usize,
    rows: Vec<Row>,
    grid: Grid,
    /// Row indices per grid node.
    by_node: Vec<Vec<usize>>,
}

impl TableModel {
    pub fn from_rows(n_x: usize, n_u: usize, rows: Vec<(State, Input, State, f64)>) -> Result<Self, ModelError> {
        if rows.is_empty() {
            return Err(ModelError::Config("transition table is empty".into()));
        }
        let rows: Vec<Row> = rows
            .into_iter()
            .map(|(x, u, next, cost)| Row { x, u, next, cost })
            .collect();
        for (i, r) in rows.iter().enumerate() {
            if r.x.len() != n_x || r.next.len() != n_x || r.u.len() != n_u {
                return Err(ModelError::Config(format!("row {i} has the wrong number of columns")));
            }
        }
        let grid = infer_grid(&rows, n_x)?;
        let mut by_node = vec![Vec::new(); grid.len()];
        for (i, r) in rows.iter().enumerate() {
            let (node, _) = grid.nearest(&r.x);
            if !close(&grid.state(node), &r.x) {
                return Err(ModelError::Config(format!(
                    "row {i}: state {:?} is not a grid node",
                    r.x
                )));
            }
            by_node[node].push(i);
        }
        if let Some(node) = by_node.iter().position(Vec::is_empty) {
            return Err(ModelError::EmptyInputs { x: grid.state(node) });
        }
        Ok(TableModel {
            n_x,
            n_u,
            rows,
            grid,
            by_node,
        })
    }

    /// Read a CSV with a header row and columns (state…, input…, next_state…, cost).
    pub fn from_reader(reader: impl Read, n_x: usize, n_u: usize) -> Result<Self, ModelError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let width = 2 * n_x + n_u + 1;
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| ModelError::Config(format!("csv: {e}")))?;
            if rec.len() != width {
                return Err(ModelError::Config(format!(
                    "csv record {} has {} fields, expected {width}",
                    line + 1,
                    rec.len()
                )));
            }
            let vals = rec
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ModelError::Config(format!("csv record {}: {e}", line + 1)))?;
            rows.push((
                vals[..n_x].to_vec(),
                vals[n_x..n_x + n_u].to_vec(),
                vals[n_x + n_u..2 * n_x + n_u].to_vec(),
                vals[width - 1],
            ));
        }
        Self::from_rows(n_x, n_u, rows)
    }

    pub fn from_csv_path(path: impl AsRef<Path>, n_x: usize, n_u: usize) -> Result<Self, ModelError> {
        let file = std::fs::File::open(path.as_ref())
            .map_err(|e| ModelError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_reader(file, n_x, n_u)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Build the model. σ defaults to the Euclidean norm when `measure` is `None`.
    pub fn into_model(
        self,
        name: impl Into<String>,
        measure: Option<Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>>,
    ) -> SystemModel {
        let (n_x, n_u) = (self.n_x, self.n_u);
        let table = Arc::new(self);
        let (t1, t2, t3) = (table.clone(), table.clone(), table);
        let measure = measure.unwrap_or_else(|| Arc::new(|x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt()));
        SystemModel::new(
            name,
            n_x,
            n_u,
            move |x, u| match t1.lookup(x, u) {
                Some(r) => r.next.clone(),
                None => vec![f64::NAN; n_x],
            },
            move |x, u| t2.lookup(x, u).map_or(f64::NAN, |r| r.cost),
            move |x| InputSet::Finite(t3.inputs_at(x)),
            move |x| measure(x),
        )
    }

    fn node_of(&self, x: &[f64]) -> Option<usize> {
        let (node, _) = self.grid.nearest(x);
        close(&self.grid.state(node), x).then_some(node)
    }

    fn lookup(&self, x: &[f64], u: &[f64]) -> Option<&Row> {
        let node = self.node_of(x)?;
        self.by_node[node]
            .iter()
            .map(|&i| &self.rows[i])
            .find(|r| close(&r.u, u))
    }

    fn inputs_at(&self, x: &[f64]) -> Vec<Input> {
        match self.node_of(x) {
            Some(node) => self.by_node[node].iter().map(|&i| self.rows[i].u.clone()).collect(),
            None => Vec::new(),
        }
    }
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(p, q)| (p - q).abs() <= MATCH * (1.0 + q.abs()))
}

fn infer_grid(rows: &[Row], n_x: usize) -> Result<Grid, ModelError> {
    let mut lo = Vec::with_capacity(n_x);
    let mut hi = Vec::with_capacity(n_x);
    let mut n = Vec::with_capacity(n_x);
    for d in 0..n_x {
        let coords: BTreeSet<u64> = rows.iter().map(|r| ordered_bits(r.x[d])).collect();
        let vals: Vec<f64> = coords.into_iter().map(from_ordered_bits).collect();
        let mut axis: Vec<f64> = Vec::new();
        for v in vals {
            if axis
                .last()
                .map_or(true, |&last| (v - last).abs() > MATCH * (1.0 + v.abs()))
            {
                axis.push(v);
            }
        }
        if axis.len() > 2 {
            let h = (axis[axis.len() - 1] - axis[0]) / (axis.len() - 1) as f64;
            for w in axis.windows(2) {
                if ((w[1] - w[0]) - h).abs() > 1e-6 * h {
                    return Err(ModelError::Config(format!(
                        "table states on axis {d} are not evenly spaced"
                    )));
                }
            }
        }
        lo.push(axis[0]);
        hi.push(axis[axis.len() - 1]);
        n.push(axis.len());
    }
    Grid::new(lo, hi, n)
}

fn ordered_bits(v: f64) -> u64 {
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

fn from_ordered_bits(b: u64) -> f64 {
    if b >> 63 == 1 {
        f64::from_bits(b & !(1 << 63))
    } else {
        f64::from_bits(!b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{stage_cost, step};

    const CSV: &str = "x,u,x_next,cost\n0,0,0,0\n1,0,0,1.5\n1,1,2,0.5\n2,0,1,1\n2,1,2,3\n";

    #[test]
    fn loads_csv() {
        let t = TableModel::from_reader(CSV.as_bytes(), 1, 1).unwrap();
        assert_eq!(t.grid().len(), 3);
        let m = t.into_model("toy", None);
        assert_eq!(step(&m, &[1.0], &[1.0]).unwrap(), vec![2.0]);
        assert_eq!(stage_cost(&m, &[2.0], &[0.0]).unwrap(), 1.0);
        assert!(step(&m, &[1.0], &[0.5]).is_err());
        assert_eq!(m.inputs(&[2.0]), InputSet::Finite(vec![vec![0.0], vec![1.0]]));
        assert_eq!(m.sigma(&[2.0]), 2.0);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(TableModel::from_reader("x,u,y,c\n0,0,0\n".as_bytes(), 1, 1).is_err());
        // 0, 1, 3 is not evenly spaced.
        let uneven = "x,u,y,c\n0,0,0,0\n1,0,0,1\n3,0,1,1\n";
        assert!(TableModel::from_reader(uneven.as_bytes(), 1, 1).is_err());
        // Node 1 of a 3-node axis is missing.
        let gap = "x,u,y,c\n0,0,0,0\n2,0,0,1\n";
        let t = TableModel::from_reader(gap.as_bytes(), 1, 1).unwrap();
        assert_eq!(t.grid().len(), 2);
        let holes = "x,y0,u,n0,n1,c\n0,0,0,0,0,0\n1,1,0,0,0,1\n";
        assert!(TableModel::from_reader(holes.as_bytes(), 2, 1).is_err());
    }

    #[test]
    fn ordered_bits_round_trip() {
        for v in [-3.5, -0.0, 0.0, 1.0, 2.5e10] {
            assert_eq!(from_ordered_bits(ordered_bits(v)).to_bits(), v.to_bits());
        }
        assert!(ordered_bits(-1.0) < ordered_bits(0.5));
    }
}
