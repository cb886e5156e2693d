//! Run configuration: TOML sections `[problem]`, `[grid]`, `[mc]`, `[eval]`,
//! `[output]`. Parsing is fail-closed (unknown and duplicate keys are
//! errors) and every missing required key is named in the error message.

use serde::{Deserialize, Serialize};

use fbl_core::{
    american_call_spec, american_put_spec, custom_time_inhomogeneous_spec, ProblemSpec,
};

/// Instance selector plus its parameters. Defaults are the laboratory's
/// reference American put.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSection {
    pub kind: String,
    #[serde(rename = "K")]
    pub k: f64,
    /// discount rate; for `custom_time_inhomogeneous` this is r0 in
    /// r(t) = r0 (1 + t)
    pub r: f64,
    pub delta: f64,
    pub sigma: f64,
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "T1")]
    pub t1: f64,
    pub x1: f64,
    pub x2: f64,
}

impl Default for ProblemSection {
    fn default() -> Self {
        ProblemSection {
            kind: "put".into(),
            k: 1.0,
            r: 0.06,
            delta: 0.02,
            sigma: 0.4,
            t: 1.0,
            t1: 0.8,
            x1: 0.55,
            x2: 1.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    #[serde(rename = "N_t")]
    pub n_t: usize,
    #[serde(rename = "N_x")]
    pub n_x: usize,
    /// optional outer clips for the solver grid margins
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_hi: Option<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            n_t: 400,
            n_x: 400,
            x_lo: None,
            x_hi: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub n_paths: usize,
    /// path time step; defaults to 2e-4 * T1
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_path: Option<f64>,
    /// root RNG seed (required; substreams are derived per path index)
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// diagnostic floor for small rho values, as a fraction of (y2 - y1)
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_floor: Option<f64>,
    /// sample the within-step maximum from the exact Brownian bridge law
    pub bridge_max: bool,
}

impl Default for McSection {
    fn default() -> Self {
        McSection {
            n_paths: 200_000,
            dt_path: None,
            seed: None,
            rho_floor: None,
            bridge_max: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// evaluation times for lambda / vh; default {0.2, 0.4, 0.6} * T1
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_list: Option<Vec<f64>>,
    /// offsets for the expansion study; default {0.08, 0.04, 0.02, 0.01}
    /// times the rescaled band width (y2 - y1)
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_list: Option<Vec<f64>>,
    /// upper evaluation horizon; default 0.75 * T1
    #[serde(rename = "T2", skip_serializing_if = "Option::is_none")]
    pub t2: Option<f64>,
    /// multiplier on Monte Carlo standard errors in tolerances
    pub se_mult: f64,
    /// multiplier on two-grid budgets in tolerances
    pub budget_mult: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            t_list: None,
            h_list: None,
            t2: None,
            se_mult: 3.0,
            budget_mult: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub grid: GridSection,
    pub mc: McSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

/// Fully resolved configuration: defaults filled, cross-field checks done.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub n_t: usize,
    pub n_x: usize,
    pub n_paths: usize,
    pub dt_path: f64,
    pub seed: u64,
    pub bridge_max: bool,
    pub t_list: Vec<f64>,
    /// `None` means "fractions of (y2 - y1)", resolved once the map exists
    pub h_list: Option<Vec<f64>>,
    pub t2: f64,
    pub se_mult: f64,
    pub budget_mult: f64,
}

pub const DEFAULT_H_FRACTIONS: [f64; 4] = [0.08, 0.04, 0.02, 0.01];

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        toml::from_str(text).map_err(|e| format!("config error: {e}"))
    }

    #[cfg_attr(not(test), allow(dead_code))]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Build the problem instance described by `[problem]`, with the
    /// optional grid clips applied.
    pub fn problem_spec(&self) -> Result<ProblemSpec, String> {
        let p = &self.problem;
        let mut spec = match p.kind.as_str() {
            "put" => american_put_spec(p.k, p.r, p.delta, p.sigma, p.t, p.t1, p.x1, p.x2),
            "call" => american_call_spec(p.k, p.r, p.delta, p.sigma, p.t, p.t1, p.x1, p.x2),
            "custom_time_inhomogeneous" => custom_time_inhomogeneous_spec(
                p.k, p.r, p.delta, p.sigma, p.t, p.t1, p.x1, p.x2,
            ),
            other => {
                return Err(format!(
                    "config error: problem.kind = {other:?} (expected put, call or \
                     custom_time_inhomogeneous)"
                ))
            }
        }
        .map_err(|e| format!("config error: [problem] {e}"))?;
        if let Some(lo) = self.grid.x_lo {
            if lo >= p.x1 {
                return Err(format!(
                    "config error: grid.x_lo = {lo} must lie below problem.x1 = {}",
                    p.x1
                ));
            }
            spec.diffusion.domain_lo = spec.diffusion.domain_lo.max(lo);
        }
        if let Some(hi) = self.grid.x_hi {
            if hi <= p.x2 {
                return Err(format!(
                    "config error: grid.x_hi = {hi} must lie above problem.x2 = {}",
                    p.x2
                ));
            }
            spec.diffusion.domain_hi = spec.diffusion.domain_hi.min(hi);
        }
        Ok(spec)
    }

    /// Fill defaults and run the cross-field checks. Every violation names
    /// the offending key.
    pub fn resolve(&self) -> Result<ResolvedConfig, String> {
        let mut missing = Vec::new();
        if self.mc.seed.is_none() {
            missing.push("mc.seed");
        }
        if !missing.is_empty() {
            return Err(format!(
                "config error: missing required key(s): {}",
                missing.join(", ")
            ));
        }
        let p = &self.problem;
        if !(p.t1 > 0.0 && p.t1 < p.t) {
            return Err(format!(
                "config error: need 0 < problem.T1 < problem.T, got T1 = {}, T = {}",
                p.t1, p.t
            ));
        }
        let t2 = self.eval.t2.unwrap_or(0.75 * p.t1);
        if !(t2 > 0.0 && t2 < p.t1) {
            return Err(format!(
                "config error: eval.T2 = {t2} must satisfy 0 < T2 < T1 = {}",
                p.t1
            ));
        }
        let t_list = self
            .eval
            .t_list
            .clone()
            .unwrap_or_else(|| [0.2, 0.4, 0.6].iter().map(|f| f * p.t1).collect());
        for &t in &t_list {
            if !(0.0..t2).contains(&t) {
                return Err(format!(
                    "config error: eval.t_list entry {t} outside [0, T2) with T2 = {t2} \
                     (t must be < T2 < T1)"
                ));
            }
        }
        if let Some(hs) = &self.eval.h_list {
            if hs.iter().any(|&h| h <= 0.0) {
                return Err("config error: eval.h_list entries must be positive".into());
            }
        }
        let dt_path = self.mc.dt_path.unwrap_or(2e-4 * p.t1);
        if dt_path <= 0.0 || dt_path >= p.t1 {
            return Err(format!(
                "config error: mc.dt_path = {dt_path} must lie in (0, T1)"
            ));
        }
        if self.mc.n_paths == 0 {
            return Err("config error: mc.n_paths must be positive".into());
        }
        if let Some(f) = self.mc.rho_floor {
            if f <= 0.0 || f >= 1.0 {
                return Err(format!(
                    "config error: mc.rho_floor = {f} must lie in (0, 1)"
                ));
            }
        }
        if self.eval.se_mult <= 0.0 || self.eval.budget_mult < 0.0 {
            return Err("config error: eval.se_mult must be positive and \
                        eval.budget_mult nonnegative"
                .into());
        }
        Ok(ResolvedConfig {
            config: self.clone(),
            n_t: self.grid.n_t,
            n_x: self.grid.n_x,
            n_paths: self.mc.n_paths,
            dt_path,
            seed: self.mc.seed.unwrap(),
            bridge_max: self.mc.bridge_max,
            t_list,
            h_list: self.eval.h_list.clone(),
            t2,
            se_mult: self.eval.se_mult,
            budget_mult: self.eval.budget_mult,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::parse("[mc]\nseed = 7\n").unwrap();
        let text = cfg.to_toml();
        let again = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn full_config_round_trips() {
        let text = r#"
            [problem]
            kind = "call"
            K = 2.0
            r = 0.03
            delta = 0.07
            sigma = 0.3
            T = 2.0
            T1 = 1.5
            x1 = 1.6
            x2 = 3.8

            [grid]
            N_t = 128
            N_x = 256
            x_lo = 0.5
            x_hi = 10.0

            [mc]
            n_paths = 1000
            dt_path = 0.001
            seed = 42
            rho_floor = 0.002
            bridge_max = false

            [eval]
            t_list = [0.3, 0.6]
            h_list = [0.05, 0.025]
            T2 = 1.1
            se_mult = 2.5
            budget_mult = 1.5

            [output]
            dir = "artifacts"
        "#;
        let cfg = RunConfig::parse(text).unwrap();
        let again = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        let rc = cfg.resolve().unwrap();
        assert_eq!(rc.seed, 42);
        assert_eq!(rc.t_list, vec![0.3, 0.6]);
        assert!(!rc.bridge_max);
    }

    #[test]
    fn missing_seed_names_the_key() {
        let cfg = RunConfig::parse("[grid]\nN_t = 64\nN_x = 64\n").unwrap();
        let err = cfg.resolve().unwrap_err();
        assert!(err.contains("mc.seed"), "{err}");
    }

    #[test]
    fn empty_file_lists_required_keys() {
        let cfg = RunConfig::parse("").unwrap();
        let err = cfg.resolve().unwrap_err();
        assert!(err.contains("missing required key"), "{err}");
        assert!(err.contains("mc.seed"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("[mc]\nseed = 1\nbogus = 2\n").unwrap_err();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn duplicate_key_rejected_with_position() {
        let err = RunConfig::parse("[mc]\nseed = 1\nseed = 2\n").unwrap_err();
        assert!(err.to_lowercase().contains("duplicate"), "{err}");
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn t_list_at_t1_rejected() {
        let cfg = RunConfig::parse("[mc]\nseed = 1\n[eval]\nt_list = [0.8]\n").unwrap();
        let err = cfg.resolve().unwrap_err();
        assert!(err.contains("t_list"), "{err}");
    }

    #[test]
    fn spec_construction_per_kind() {
        for kind in ["put", "call", "custom_time_inhomogeneous"] {
            let mut cfg = RunConfig::default();
            cfg.problem.kind = kind.into();
            if kind == "call" {
                cfg.problem.r = 0.03;
                cfg.problem.delta = 0.07;
                cfg.problem.x1 = 0.8;
                cfg.problem.x2 = 1.9;
            }
            cfg.problem_spec().unwrap();
        }
        let mut cfg = RunConfig::default();
        cfg.problem.kind = "bermudan".into();
        assert!(cfg.problem_spec().is_err());
    }
}
