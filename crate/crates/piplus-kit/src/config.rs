use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub algo: AlgoConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Counterexample {},
    Lq {
        a: f64,
        b: f64,
        q: f64,
        r: f64,
        k0: f64,
        input_lo: f64,
        input_hi: f64,
    },
    /// Finite transition table; the initial policy takes the first input at
    /// every node and there is no certificate.
    Table {
        path: PathBuf,
        n_x: usize,
        n_u: usize,
    },
}

/// Overrides of the benchmark's default discretization.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
    pub n: Option<Vec<usize>>,
    pub input_samples: Option<usize>,
    pub sigma_abs: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Pi,
    Piplus,
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Select {
    Lowest,
    Adversarial,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgoConfig {
    pub name: Algo,
    pub iters: usize,
    pub select: Select,
    pub seed: u64,
    pub eps_tie: f64,
    pub eval_tol: f64,
    pub eval_max_sweeps: usize,
    pub tol_stop: f64,
    /// Regularization radius; one cell diameter when absent.
    pub delta_reg: Option<f64>,
    /// Fraction of the input range a neighbour's input must be from H(x)
    /// to join the regularized set.
    pub branch_sep: f64,
    /// Probe the counterexample's x̄ + 1 for a missing minimum under PI.
    pub probe: bool,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        AlgoConfig {
            name: Algo::Piplus,
            iters: 10,
            select: Select::Lowest,
            seed: 0,
            eps_tie: 1e-9,
            eval_tol: 1e-13,
            eval_max_sweeps: 100_000,
            tol_stop: 0.0,
            delta_reg: None,
            branch_sep: 0.05,
            probe: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsConfig {
    /// ε_target(s) = eps_abs + eps_rel·s.
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Upper end of the σ range for i⋆; the grid's largest σ when absent.
    pub delta: Option<f64>,
    pub i_max: usize,
    pub s_points: usize,
    pub k_max: usize,
    /// Use the linear-rate column of the certificate.
    pub exponential: bool,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig {
            eps_abs: 0.01,
            eps_rel: 0.01,
            delta: None,
            i_max: 200,
            s_points: 11,
            k_max: 20,
            exponential: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Rollout start nodes, evenly spread over the grid.
    pub starts: usize,
    pub horizon: usize,
    pub eps_check: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            starts: 101,
            horizon: 50,
            eps_check: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("piplus-out"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub algo: Option<Algo>,
    pub iters: Option<usize>,
    pub select: Option<Select>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut sc = Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        // Table paths are relative to the scenario file.
        if let ModelConfig::Table { path: p, .. } = &mut sc.model {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(sc)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(a) = o.algo {
            self.algo.name = a;
        }
        if let Some(i) = o.iters {
            self.algo.iters = i;
        }
        if let Some(s) = o.select {
            self.algo.select = s;
        }
        if let Some(s) = o.seed {
            self.algo.seed = s;
        }
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenarios serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_lq() {
        let sc = Scenario::parse(
            "[model]\nkind = \"lq\"\na = 0.9\nb = 1.0\nq = 1.0\nr = 1.0\nk0 = -0.5\ninput_lo = -2.0\ninput_hi = 2.0\n",
        )
        .unwrap();
        assert_eq!(sc.algo, AlgoConfig::default());
        let back = Scenario::parse(&sc.to_toml()).unwrap();
        assert_eq!(back, sc);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Scenario::parse("[model]\nkind = \"counterexample\"\n[algo]\niterz = 3\n").unwrap_err();
        assert!(err.contains("iterz"), "{err}");
        assert!(err.contains("line"), "{err}");
        assert!(Scenario::parse("[model]\nkind = \"counterexample\"\nextra = 1\n").is_err());
        assert!(Scenario::parse("[modle]\nkind = \"counterexample\"\n").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut sc = Scenario::parse("[model]\nkind = \"counterexample\"\n[algo]\niters = 3\n").unwrap();
        sc.apply(&Overrides {
            algo: Some(Algo::Pi),
            iters: Some(0),
            select: Some(Select::Adversarial),
            seed: None,
            out: Some("x".into()),
        });
        assert_eq!(sc.algo.iters, 0);
        assert_eq!(sc.algo.name, Algo::Pi);
        assert_eq!(sc.algo.select, Select::Adversarial);
        assert_eq!(sc.output.dir, PathBuf::from("x"));
    }
}
