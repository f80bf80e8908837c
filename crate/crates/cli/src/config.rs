//! TOML scenario configuration: schema, validation, and resolution of
//! named coefficient presets into the library's callback types.
//!
//! Unknown keys are rejected everywhere and `run.seed` is mandatory;
//! reproducibility is not optional. Coefficients are sums of preset terms
//! (`constant`, `linear-in-x`, `linear-in-lag`, `regime-table`), which
//! covers every scenario the toolkit is validated on without an expression
//! language.

use serde::Deserialize;

use sddejr::duality::TerminalData;
use sddejr::noise::{JumpSpec, RegimeChainSpec, TimeGrid};
use sddejr::sdde::{
    DelayFunctions, InitialPath, LinearABSDEData, SDDECoefficients, StateCoeffFn,
};
use sddejr::{Error, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub chain: ChainConfig,
    pub jumps: Option<JumpsConfig>,
    pub grid: GridConfig,
    pub model: Option<ModelConfig>,
    pub duality: Option<DualityConfig>,
    pub run: RunConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    /// Generator rows, one per regime.
    pub lambda: Vec<Vec<f64>>,
    #[serde(default)]
    pub initial_state: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpsConfig {
    pub rate: f64,
    pub marks: Vec<f64>,
    /// Mark-law weights; defaults to uniform.
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
    #[serde(default)]
    pub delay_steps: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Mandatory: every run is seeded.
    pub seed: u64,
    #[serde(default = "default_n_paths")]
    pub n_paths: u64,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
}

fn default_n_paths() -> u64 {
    1000
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_prefix")]
    pub prefix: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { prefix: default_prefix() }
    }
}

fn default_prefix() -> String {
    "run".into()
}

/// One additive coefficient term.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffTerm {
    pub preset: String,
    /// Scalar constant for `constant`, `linear-in-x`, `linear-in-lag`.
    pub value: Option<f64>,
    /// Per-regime constants for `regime-table`.
    pub values: Option<Vec<f64>>,
    /// Multiply the term by the jump mark (jump coefficients only).
    #[serde(default)]
    pub times_mark: bool,
    /// Restrict a switch-coefficient term to one component j.
    pub component: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_one")]
    pub lipschitz_c: f64,
    /// Constant pre-history value.
    #[serde(default = "default_one")]
    pub x0: f64,
    #[serde(default)]
    pub drift: Vec<CoeffTerm>,
    #[serde(default)]
    pub diffusion: Vec<CoeffTerm>,
    #[serde(default)]
    pub jump: Vec<CoeffTerm>,
    #[serde(default)]
    pub switch: Vec<CoeffTerm>,
}

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualityConfig {
    #[serde(default)]
    pub b: Vec<CoeffTerm>,
    #[serde(default)]
    pub b_bar: Vec<CoeffTerm>,
    #[serde(default)]
    pub sigma: Vec<CoeffTerm>,
    #[serde(default)]
    pub sigma_bar: Vec<CoeffTerm>,
    #[serde(default)]
    pub eta: Vec<CoeffTerm>,
    #[serde(default)]
    pub eta_bar: Vec<CoeffTerm>,
    #[serde(default)]
    pub gamma: Vec<CoeffTerm>,
    #[serde(default)]
    pub gamma_bar: Vec<CoeffTerm>,
    #[serde(default)]
    pub l: Vec<CoeffTerm>,
    /// Declared uniform bound on all driver coefficients.
    pub bound: f64,
    /// Terminal data, constant in time on [T, T + delta].
    #[serde(default)]
    pub xi: f64,
    #[serde(default)]
    pub psi: f64,
    #[serde(default)]
    pub zeta: f64,
    pub theta: Option<Vec<f64>>,
}

/// Loads and schema-validates a configuration file.
pub fn load_config(path: &std::path::Path) -> Result<(ScenarioConfig, Vec<u8>)> {
    let raw = std::fs::read(path)
        .map_err(|e| Error::InvalidSpec(format!("cannot read {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&raw)
        .map_err(|e| Error::InvalidSpec(format!("config is not UTF-8: {e}")))?;
    let config: ScenarioConfig =
        toml::from_str(text).map_err(|e| Error::InvalidSpec(format!("config parse error: {e}")))?;
    Ok((config, raw))
}

impl ScenarioConfig {
    pub fn chain_spec(&self) -> Result<RegimeChainSpec> {
        let spec = RegimeChainSpec::new(self.chain.lambda.clone())?;
        if self.chain.initial_state >= spec.num_states() {
            return Err(Error::InvalidSpec(format!(
                "initial_state {} out of range for D={}",
                self.chain.initial_state,
                spec.num_states()
            )));
        }
        Ok(spec)
    }

    pub fn jump_spec(&self) -> Result<JumpSpec> {
        match &self.jumps {
            None => Ok(JumpSpec::none()),
            Some(j) => {
                let weights = match &j.weights {
                    Some(w) => w.clone(),
                    None => vec![1.0 / j.marks.len().max(1) as f64; j.marks.len()],
                };
                if weights.len() != j.marks.len() {
                    return Err(Error::InvalidSpec(format!(
                        "{} marks but {} weights",
                        j.marks.len(),
                        weights.len()
                    )));
                }
                JumpSpec::new(j.rate, j.marks.iter().copied().zip(weights).collect())
            }
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.t0, self.grid.t_end, self.grid.steps, self.grid.delay_steps)
    }

    pub fn delays(&self) -> Result<DelayFunctions> {
        Ok(DelayFunctions::constant(self.grid()?.delay()))
    }

    pub fn model(&self) -> Result<&ModelConfig> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("this command needs a [model] section".into()))
    }

    pub fn duality(&self) -> Result<&DualityConfig> {
        self.duality
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("this command needs a [duality] section".into()))
    }

    pub fn initial_path(&self) -> Result<InitialPath> {
        InitialPath::constant(&self.grid()?, self.model()?.x0)
    }

    pub fn tol(&self) -> f64 {
        self.run.tol.unwrap_or(sddejr::fixedpoint::DEFAULT_TOL)
    }

    pub fn max_iter(&self) -> usize {
        self.run.max_iter.unwrap_or(sddejr::fixedpoint::DEFAULT_MAX_ITER)
    }
}

fn check_term(term: &CoeffTerm, d: usize, context: &str) -> Result<()> {
    match term.preset.as_str() {
        "constant" | "linear-in-x" | "linear-in-lag" => {
            if term.value.is_none() {
                return Err(Error::InvalidSpec(format!(
                    "{context}: preset `{}` needs `value`",
                    term.preset
                )));
            }
        }
        "regime-table" => match &term.values {
            Some(v) if v.len() == d => {}
            Some(v) => {
                return Err(Error::InvalidSpec(format!(
                    "{context}: regime-table has {} entries, need {d}",
                    v.len()
                )))
            }
            None => {
                return Err(Error::InvalidSpec(format!("{context}: regime-table needs `values`")))
            }
        },
        other => {
            return Err(Error::InvalidSpec(format!("{context}: unknown preset `{other}`")));
        }
    }
    if let Some(j) = term.component {
        if j >= d {
            return Err(Error::InvalidSpec(format!("{context}: component {j} out of range")));
        }
    }
    Ok(())
}

/// Evaluates a term at (x, y, regime); t-dependence is not part of the
/// preset language.
fn eval_term(term: &CoeffTerm, x: f64, y: f64, regime: usize) -> f64 {
    match term.preset.as_str() {
        "constant" => term.value.unwrap_or(0.0),
        "linear-in-x" => term.value.unwrap_or(0.0) * x,
        "linear-in-lag" => term.value.unwrap_or(0.0) * y,
        "regime-table" => term.values.as_ref().map_or(0.0, |v| v[regime]),
        _ => unreachable!("presets validated at load"),
    }
}

fn state_coeff(terms: &[CoeffTerm], d: usize, context: &str) -> Result<StateCoeffFn> {
    for t in terms {
        check_term(t, d, context)?;
        if t.times_mark || t.component.is_some() {
            return Err(Error::InvalidSpec(format!(
                "{context}: `times_mark`/`component` are not valid here"
            )));
        }
    }
    let terms = terms.to_vec();
    Ok(Box::new(move |_t, x, y, regime| {
        terms.iter().map(|term| eval_term(term, x, y, regime)).sum()
    }))
}

impl ModelConfig {
    pub fn coefficients(&self, d: usize) -> Result<SDDECoefficients> {
        if !(self.lipschitz_c > 0.0) {
            return Err(Error::InvalidSpec("lipschitz_c must be positive".into()));
        }
        for t in &self.jump {
            check_term(t, d, "model.jump")?;
            if t.component.is_some() {
                return Err(Error::InvalidSpec("model.jump: `component` is not valid here".into()));
            }
        }
        for t in &self.switch {
            check_term(t, d, "model.switch")?;
            if t.times_mark {
                return Err(Error::InvalidSpec(
                    "model.switch: `times_mark` is not valid here".into(),
                ));
            }
        }
        let jump_terms = self.jump.clone();
        let switch_terms = self.switch.clone();
        Ok(SDDECoefficients {
            drift: state_coeff(&self.drift, d, "model.drift")?,
            diffusion: state_coeff(&self.diffusion, d, "model.diffusion")?,
            jump: Box::new(move |_t, x, y, regime, z| {
                jump_terms
                    .iter()
                    .map(|term| {
                        eval_term(term, x, y, regime) * if term.times_mark { z } else { 1.0 }
                    })
                    .sum()
            }),
            switch: Box::new(move |_t, x, y, regime| {
                let mut out = vec![0.0; d];
                for term in &switch_terms {
                    let v = eval_term(term, x, y, regime);
                    match term.component {
                        Some(j) => out[j] += v,
                        None => out.iter_mut().for_each(|o| *o += v),
                    }
                }
                out
            }),
            lipschitz_c: self.lipschitz_c,
        })
    }
}

fn regime_coeff(
    terms: &[CoeffTerm],
    d: usize,
    context: &str,
) -> Result<Box<dyn Fn(f64, usize) -> f64 + Send + Sync>> {
    for t in terms {
        check_term(t, d, context)?;
        if matches!(t.preset.as_str(), "linear-in-x" | "linear-in-lag") {
            return Err(Error::InvalidSpec(format!(
                "{context}: state-dependent presets are not valid for linear driver data"
            )));
        }
        if t.times_mark || t.component.is_some() {
            return Err(Error::InvalidSpec(format!(
                "{context}: `times_mark`/`component` are not valid here"
            )));
        }
    }
    let terms = terms.to_vec();
    Ok(Box::new(move |_t, regime| {
        terms.iter().map(|term| eval_term(term, 0.0, 0.0, regime)).sum()
    }))
}

fn mark_coeff(
    terms: &[CoeffTerm],
    d: usize,
    context: &str,
) -> Result<Box<dyn Fn(f64, usize, f64) -> f64 + Send + Sync>> {
    for t in terms {
        check_term(t, d, context)?;
        if matches!(t.preset.as_str(), "linear-in-x" | "linear-in-lag") {
            return Err(Error::InvalidSpec(format!(
                "{context}: state-dependent presets are not valid for linear driver data"
            )));
        }
        if t.component.is_some() {
            return Err(Error::InvalidSpec(format!("{context}: `component` is not valid here")));
        }
    }
    let terms = terms.to_vec();
    Ok(Box::new(move |_t, regime, z| {
        terms
            .iter()
            .map(|term| eval_term(term, 0.0, 0.0, regime) * if term.times_mark { z } else { 1.0 })
            .sum()
    }))
}

fn vector_coeff(
    terms: &[CoeffTerm],
    d: usize,
    context: &str,
) -> Result<Box<dyn Fn(f64, usize) -> Vec<f64> + Send + Sync>> {
    for t in terms {
        check_term(t, d, context)?;
        if matches!(t.preset.as_str(), "linear-in-x" | "linear-in-lag") {
            return Err(Error::InvalidSpec(format!(
                "{context}: state-dependent presets are not valid for linear driver data"
            )));
        }
        if t.times_mark {
            return Err(Error::InvalidSpec(format!("{context}: `times_mark` is not valid here")));
        }
    }
    let terms = terms.to_vec();
    Ok(Box::new(move |_t, regime| {
        let mut out = vec![0.0; d];
        for term in &terms {
            let v = eval_term(term, 0.0, 0.0, regime);
            match term.component {
                Some(j) => out[j] += v,
                None => out.iter_mut().for_each(|o| *o += v),
            }
        }
        out
    }))
}

impl DualityConfig {
    pub fn linear_data(&self, d: usize) -> Result<LinearABSDEData> {
        if !(self.bound > 0.0) || !self.bound.is_finite() {
            return Err(Error::InvalidSpec("duality.bound must be positive and finite".into()));
        }
        Ok(LinearABSDEData {
            b: regime_coeff(&self.b, d, "duality.b")?,
            b_bar: regime_coeff(&self.b_bar, d, "duality.b_bar")?,
            sigma: regime_coeff(&self.sigma, d, "duality.sigma")?,
            sigma_bar: regime_coeff(&self.sigma_bar, d, "duality.sigma_bar")?,
            eta: mark_coeff(&self.eta, d, "duality.eta")?,
            eta_bar: mark_coeff(&self.eta_bar, d, "duality.eta_bar")?,
            gamma: vector_coeff(&self.gamma, d, "duality.gamma")?,
            gamma_bar: vector_coeff(&self.gamma_bar, d, "duality.gamma_bar")?,
            running_cost: regime_coeff(&self.l, d, "duality.l")?,
            bound: self.bound,
        })
    }

    pub fn terminal(&self, d: usize) -> Result<TerminalData> {
        let theta = match &self.theta {
            None => vec![0.0; d],
            Some(v) if v.len() == d => v.clone(),
            Some(v) => {
                return Err(Error::InvalidSpec(format!(
                    "duality.theta has {} entries, need {d}",
                    v.len()
                )))
            }
        };
        Ok(TerminalData::constant(self.xi, self.psi, self.zeta, theta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(text: &str) -> std::path::PathBuf {
        let mut path = std::env::temp_dir();
        path.push(format!("sddejr-config-test-{}.toml", std::process::id()));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        path
    }

    #[test]
    fn minimal_config_loads_with_defaults() {
        let path = write_tmp(
            r#"
[chain]
lambda = [[0.0]]

[grid]
t_end = 1.0
steps = 8

[run]
seed = 7
"#,
        );
        let (cfg, _) = load_config(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(cfg.run.n_paths, 1000);
        assert_eq!(cfg.output.prefix, "run");
        assert_eq!(cfg.grid.t0, 0.0);
        cfg.chain_spec().unwrap();
        assert_eq!(cfg.jump_spec().unwrap().rate(), 0.0);
    }

    #[test]
    fn missing_seed_is_rejected() {
        let path = write_tmp(
            r#"
[chain]
lambda = [[0.0]]

[grid]
t_end = 1.0
steps = 8

[run]
n_paths = 10
"#,
        );
        let err = load_config(&path).unwrap_err();
        std::fs::remove_file(&path).unwrap();
        assert!(format!("{err}").contains("seed"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let path = write_tmp(
            r#"
[chain]
lambda = [[0.0]]
extra = 1

[grid]
t_end = 1.0
steps = 8

[run]
seed = 7
"#,
        );
        let err = load_config(&path).unwrap_err();
        std::fs::remove_file(&path).unwrap();
        assert!(format!("{err}").contains("extra"), "{err}");
    }

    #[test]
    fn regime_table_preset_resolves_per_regime() {
        let model = ModelConfig {
            lipschitz_c: 1.0,
            x0: 1.0,
            drift: vec![CoeffTerm {
                preset: "regime-table".into(),
                value: None,
                values: Some(vec![0.1, -0.2]),
                times_mark: false,
                component: None,
            }],
            diffusion: vec![],
            jump: vec![],
            switch: vec![],
        };
        let coeffs = model.coefficients(2).unwrap();
        assert_eq!((coeffs.drift)(0.3, 5.0, 7.0, 0), 0.1);
        assert_eq!((coeffs.drift)(0.9, 5.0, 7.0, 1), -0.2);
    }

    #[test]
    fn summed_preset_terms() {
        let model = ModelConfig {
            lipschitz_c: 1.0,
            x0: 1.0,
            drift: vec![
                CoeffTerm {
                    preset: "linear-in-x".into(),
                    value: Some(0.5),
                    values: None,
                    times_mark: false,
                    component: None,
                },
                CoeffTerm {
                    preset: "linear-in-lag".into(),
                    value: Some(0.5),
                    values: None,
                    times_mark: false,
                    component: None,
                },
            ],
            diffusion: vec![],
            jump: vec![],
            switch: vec![],
        };
        let coeffs = model.coefficients(1).unwrap();
        assert_eq!((coeffs.drift)(0.0, 2.0, 4.0, 0), 3.0);
    }

    #[test]
    fn unknown_preset_is_rejected() {
        let model = ModelConfig {
            lipschitz_c: 1.0,
            x0: 1.0,
            drift: vec![CoeffTerm {
                preset: "quadratic".into(),
                value: Some(1.0),
                values: None,
                times_mark: false,
                component: None,
            }],
            diffusion: vec![],
            jump: vec![],
            switch: vec![],
        };
        assert!(model.coefficients(1).is_err());
    }
}
