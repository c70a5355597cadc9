//! Run configuration: TOML file, optional preset base, `PISA_` env overrides.

use std::path::{Path, PathBuf};

use pisa_core::newton_schulz::NsMode;
use pisa_core::pisa::{compute_k0, ClientParams, THEORY_GAMMA_MIN};
use pisa_core::preconditioners::{MomentScheme, PreconditionerKind};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::presets;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKindName {
    LeastSquares,
    MultinomialLogistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSpec {
    pub kind: ProblemKindName,
    pub d: usize,
    /// Training samples (split evenly across classes for blobs).
    pub n: usize,
    pub noise: f64,
    pub feature_scale: f64,
    pub mu: f64,
    pub lambda: f64,
    pub hidden: usize,
    pub classes: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub seed: u64,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub idx_test_images: Option<PathBuf>,
    pub idx_test_labels: Option<PathBuf>,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            kind: ProblemKindName::LeastSquares,
            d: 20,
            n: 400,
            noise: 0.1,
            feature_scale: 1.0,
            mu: 0.0,
            lambda: 0.0,
            hidden: 16,
            classes: 10,
            test_per_class: 100,
            separation: 1.0,
            seed: 0,
            idx_images: None,
            idx_labels: None,
            idx_test_images: None,
            idx_test_labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    Iid,
    LabelSkew,
    QuantitySkew,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub m: usize,
    pub s: usize,
    pub ratio: f64,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            mode: PartitionMode::Iid,
            m: 4,
            s: 1,
            ratio: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmKind {
    Pisa,
    Sisa,
    Nsisa,
    SgdMomentum,
    Adam,
    Fedavg,
}

impl AlgorithmKind {
    pub fn is_baseline(self) -> bool {
        matches!(self, AlgorithmKind::SgdMomentum | AlgorithmKind::Adam | AlgorithmKind::Fedavg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PisaMetric {
    Identity,
    Hessian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub kind: AlgorithmKind,
    pub sigma0: f64,
    /// Overrides `sigma0` client by client.
    pub sigma0_per_client: Option<Vec<f64>>,
    pub gamma: f64,
    pub rho: f64,
    pub eta: f64,
    /// Defaults to the value derived from `gamma`.
    pub k0: Option<u64>,
    /// Defaults to full batch.
    pub batch_size: Option<usize>,
    pub preconditioner: PisaMetric,
    pub scheme: MomentScheme,
    pub beta: f64,
    pub momentum: f64,
    pub eps: f64,
    pub ns_mode: NsMode,
    pub ns_iters: usize,
    pub zero_tol: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub local_epochs: usize,
}

impl Default for AlgorithmSpec {
    fn default() -> Self {
        Self {
            kind: AlgorithmKind::Sisa,
            sigma0: 16.0,
            sigma0_per_client: None,
            gamma: 0.99,
            rho: 1.0,
            eta: 1e3,
            k0: None,
            batch_size: None,
            preconditioner: PisaMetric::Identity,
            scheme: MomentScheme::III,
            beta: 0.999,
            momentum: 0.9,
            eps: 0.5,
            ns_mode: NsMode::Quintic,
            ns_iters: 5,
            zero_tol: 0.0,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            local_epochs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    pub max_iters: usize,
    pub stationarity_tol: Option<f64>,
    pub consensus_tol: Option<f64>,
    pub grad_budget: Option<u64>,
    pub seed: u64,
    pub workers: usize,
    pub log_every: usize,
    pub theory_mode: bool,
    /// The `sigma` entry of the theory bracket.
    pub theory_sigma: f64,
    pub track_descent: bool,
    pub record_wallclock: bool,
    pub warm_start: Option<Vec<f64>>,
    pub out_dir: PathBuf,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            name: "run".into(),
            max_iters: 500,
            stationarity_tol: None,
            consensus_tol: None,
            grad_budget: None,
            seed: 0,
            workers: 0,
            log_every: 1,
            theory_mode: false,
            theory_sigma: 1.0,
            track_descent: false,
            record_wallclock: false,
            warm_start: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Values expanded into one run each (cartesian product, in field order).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub kind: Vec<AlgorithmKind>,
    pub sigma0: Vec<f64>,
    /// Each gamma is paired with its derived k0 unless `algorithm.k0` is set.
    pub gamma: Vec<f64>,
    pub seed: Vec<u64>,
}

impl SweepSpec {
    pub fn is_empty(&self) -> bool {
        self.kind.is_empty() && self.sigma0.is_empty() && self.gamma.is_empty() && self.seed.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub partition: PartitionSpec,
    pub algorithm: AlgorithmSpec,
    pub run: RunSpec,
    pub sweep: SweepSpec,
}

fn positive(field: &str, x: f64) -> Result<(), ConfigError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive and finite, got {x}")))
    }
}

fn nonneg(field: &str, x: f64) -> Result<(), ConfigError> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite and nonnegative, got {x}")))
    }
}

fn open_unit(field: &str, x: f64) -> Result<(), ConfigError> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must lie in (0, 1), got {x}")))
    }
}

fn check_gamma(field: &str, gamma: f64, theory: bool) -> Result<(), ConfigError> {
    if theory && !(THEORY_GAMMA_MIN..1.0).contains(&gamma) {
        return Err(invalid(field, format!("theory mode needs [0.75, 1), got {gamma}")));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid(field, format!("must lie in (0, 1], got {gamma}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.problem;
        if p.d == 0 {
            return Err(invalid("problem.d", "must be at least 1"));
        }
        if p.n == 0 {
            return Err(invalid("problem.n", "must be at least 1"));
        }
        nonneg("problem.noise", p.noise)?;
        positive("problem.feature_scale", p.feature_scale)?;
        nonneg("problem.mu", p.mu)?;
        if !(p.lambda >= 0.0 && p.lambda <= p.mu) {
            return Err(invalid("problem.lambda", "must lie in [0, mu]"));
        }
        if p.kind != ProblemKindName::LeastSquares {
            if p.classes < 2 {
                return Err(invalid("problem.classes", "need at least 2 classes"));
            }
            if p.idx_images.is_none() && p.n < p.classes {
                return Err(invalid("problem.n", "need at least one sample per class"));
            }
            if p.idx_images.is_some() != p.idx_labels.is_some() {
                return Err(invalid("problem.idx_labels", "images and labels must be given together"));
            }
        }
        if p.kind == ProblemKindName::Mlp && p.hidden == 0 {
            return Err(invalid("problem.hidden", "must be at least 1"));
        }
        nonneg("problem.separation", p.separation)?;

        let q = &self.partition;
        if q.m == 0 {
            return Err(invalid("partition.m", "must be at least 1"));
        }
        if q.mode == PartitionMode::LabelSkew {
            if p.kind == ProblemKindName::LeastSquares {
                return Err(invalid("partition.mode", "label skew needs a classification problem"));
            }
            if q.s == 0 || q.s > p.classes {
                return Err(invalid("partition.s", "must lie in [1, classes]"));
            }
        }
        if !(q.ratio >= 1.0 && q.ratio.is_finite()) {
            return Err(invalid("partition.ratio", "must be at least 1"));
        }

        let a = &self.algorithm;
        let theory = self.run.theory_mode;
        positive("algorithm.sigma0", a.sigma0)?;
        if let Some(v) = &a.sigma0_per_client {
            if v.len() != q.m {
                return Err(invalid("algorithm.sigma0_per_client", "need one value per client"));
            }
            for &x in v {
                positive("algorithm.sigma0_per_client", x)?;
            }
        }
        check_gamma("algorithm.gamma", a.gamma, theory)?;
        positive("algorithm.rho", a.rho)?;
        positive("algorithm.eta", a.eta)?;
        if a.k0 == Some(0) {
            return Err(invalid("algorithm.k0", "must be at least 1"));
        }
        if a.batch_size == Some(0) {
            return Err(invalid("algorithm.batch_size", "must be at least 1"));
        }
        if a.kind == AlgorithmKind::Pisa && a.preconditioner == PisaMetric::Identity && a.eta < 1.0 {
            return Err(invalid("algorithm.eta", "identity preconditioner needs eta >= 1"));
        }
        if a.kind == AlgorithmKind::Pisa && a.preconditioner == PisaMetric::Hessian && p.kind == ProblemKindName::Mlp {
            return Err(invalid("algorithm.preconditioner", "no Hessian for the mlp problem"));
        }
        if a.scheme != MomentScheme::I || a.kind == AlgorithmKind::Nsisa {
            open_unit("algorithm.beta", a.beta)?;
        }
        positive("algorithm.momentum", a.momentum)?;
        open_unit("algorithm.eps", a.eps)?;
        if a.ns_iters == 0 {
            return Err(invalid("algorithm.ns_iters", "must be at least 1"));
        }
        nonneg("algorithm.zero_tol", a.zero_tol)?;
        positive("algorithm.lr", a.lr)?;
        if !(0.0..1.0).contains(&a.beta1) {
            return Err(invalid("algorithm.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&a.beta2) {
            return Err(invalid("algorithm.beta2", "must lie in [0, 1)"));
        }
        nonneg("algorithm.weight_decay", a.weight_decay)?;
        if a.local_epochs == 0 {
            return Err(invalid("algorithm.local_epochs", "must be at least 1"));
        }

        let r = &self.run;
        if r.name.is_empty() || r.name.contains(['/', '\\']) {
            return Err(invalid("run.name", "must be a nonempty file stem"));
        }
        if r.log_every == 0 {
            return Err(invalid("run.log_every", "must be at least 1"));
        }
        for (field, tol) in [("run.stationarity_tol", r.stationarity_tol), ("run.consensus_tol", r.consensus_tol)] {
            if let Some(t) = tol {
                nonneg(field, t)?;
            }
        }
        positive("run.theory_sigma", r.theory_sigma)?;
        if r.theory_mode && a.kind.is_baseline() {
            return Err(invalid("run.theory_mode", "only applies to the consensus solvers"));
        }
        if r.track_descent && a.gamma >= 1.0 {
            return Err(invalid("run.track_descent", "merit needs gamma < 1"));
        }
        for &s in &self.sweep.sigma0 {
            positive("sweep.sigma0", s)?;
        }
        for &g in &self.sweep.gamma {
            check_gamma("sweep.gamma", g, theory)?;
        }
        Ok(())
    }

    /// The preconditioner family implied by the algorithm kind.
    pub fn preconditioner(&self) -> PreconditionerKind {
        let a = &self.algorithm;
        match a.kind {
            AlgorithmKind::Pisa => match a.preconditioner {
                PisaMetric::Identity => PreconditionerKind::Identity,
                PisaMetric::Hessian => PreconditionerKind::Hessian,
            },
            AlgorithmKind::Nsisa => PreconditionerKind::NewtonSchulz {
                momentum: a.momentum,
                eps: a.eps,
                mode: a.ns_mode,
                iters: a.ns_iters,
                zero_tol: a.zero_tol,
                scheme: a.scheme,
                beta: a.beta,
            },
            _ => PreconditionerKind::Moment {
                scheme: a.scheme,
                beta: a.beta,
            },
        }
    }

    pub fn client_params(&self) -> Vec<ClientParams> {
        let a = &self.algorithm;
        (0..self.partition.m)
            .map(|i| ClientParams {
                sigma0: a.sigma0_per_client.as_ref().map_or(a.sigma0, |v| v[i]),
                gamma: a.gamma,
                rho: a.rho,
                eta: a.eta,
                k0: a.k0,
            })
            .collect()
    }

    /// One configuration per sweep point, named after the swept values.
    pub fn expand(&self) -> Vec<RunConfig> {
        let mut out = vec![self.clone()];
        out[0].sweep = SweepSpec::default();
        let sw = &self.sweep;
        if !sw.kind.is_empty() {
            let kind = &sw.kind;
            out = cross(out, kind, |c, k| {
                c.algorithm.kind = *k;
                format!("kind={}", kebab(k))
            });
        }
        if !sw.sigma0.is_empty() {
            let vals = &sw.sigma0;
            out = cross(out, vals, |c, s| {
                c.algorithm.sigma0 = *s;
                c.algorithm.sigma0_per_client = None;
                format!("sigma0={s}")
            });
        }
        let fixed_k0 = self.algorithm.k0;
        if !sw.gamma.is_empty() {
            let vals = &sw.gamma;
            out = cross(out, vals, |c, g| {
                c.algorithm.gamma = *g;
                if fixed_k0.is_none() {
                    c.algorithm.k0 = compute_k0(*g).ok();
                }
                format!("gamma={g}")
            });
        }
        if !sw.seed.is_empty() {
            let vals = &sw.seed;
            out = cross(out, vals, |c, s| {
                c.problem.seed = *s;
                c.partition.seed = *s;
                c.run.seed = *s;
                format!("seed={s}")
            });
        }
        out
    }
}

fn kebab<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn cross<T>(base: Vec<RunConfig>, vals: &[T], mut apply: impl FnMut(&mut RunConfig, &T) -> String) -> Vec<RunConfig> {
    let mut out = Vec::with_capacity(base.len() * vals.len());
    for c in &base {
        for v in vals {
            let mut c = c.clone();
            let tag = apply(&mut c, v);
            c.run.name = format!("{}_{tag}", c.run.name);
            out.push(c);
        }
    }
    out
}

/// Recursively overlays `top` onto `base`.
pub fn deep_merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => deep_merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `PISA_SECTION__KEY=value` overrides. Values are read as TOML
/// scalars or arrays, falling back to a plain string.
pub fn apply_env<I>(table: &mut Table, vars: I) -> Result<(), ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<_> = vars.into_iter().filter(|(k, _)| k.starts_with("PISA_")).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key["PISA_".len()..].split("__").map(str::to_ascii_lowercase).collect();
        if path.len() != 2 || path.iter().any(String::is_empty) {
            return Err(invalid(&key, "expected PISA_<SECTION>__<KEY>"));
        }
        let value = match format!("v = {raw}").parse::<Table>() {
            Ok(mut t) => t.remove("v").unwrap_or(Value::String(raw.clone())),
            Err(_) => Value::String(raw.clone()),
        };
        let section = table
            .entry(path[0].clone())
            .or_insert_with(|| Value::Table(Table::new()));
        match section {
            Value::Table(t) => {
                t.insert(path[1].clone(), value);
            }
            _ => return Err(invalid(&path[0], "not a section")),
        }
    }
    Ok(())
}

fn parse_table(text: &str) -> Result<Table, ConfigError> {
    text.parse::<Table>().map_err(|e| ConfigError::Parse(e.to_string()))
}

fn from_table(table: Table) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses and validates configuration text with no preset or environment.
pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    from_table(parse_table(text)?)
}

/// Builds a configuration from layered sources: preset, then file, then environment.
pub fn load_layered<I>(path: Option<&Path>, preset: Option<&str>, env: I) -> Result<RunConfig, ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table = match preset {
        Some(name) => parse_table(presets::preset_text(name).ok_or_else(|| ConfigError::UnknownPreset(name.into()))?)?,
        None => Table::new(),
    };
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        deep_merge(&mut table, parse_table(&text)?);
    }
    apply_env(&mut table, env)?;
    from_table(table)
}

/// Loads a configuration file, honouring `PISA_` variables from the process environment.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    load_layered(Some(path), None, std::env::vars())
}

pub fn load_preset(name: &str) -> Result<RunConfig, ConfigError> {
    load_layered(None, Some(name), std::iter::empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config_str("[problem]\nkind = \"least-squares\"\n[algorithm]\nkind = \"pisa\"\n").unwrap();
        assert_eq!(cfg.partition.m, 4);
        assert_eq!(cfg.run.max_iters, 500);
        assert_eq!(cfg.algorithm.gamma, 0.99);
    }

    #[test]
    fn bad_gamma_names_field() {
        let err = parse_config_str("[algorithm]\ngamma = 1.2\n").unwrap_err();
        match err {
            ConfigError::Invalid { field, .. } => assert_eq!(field, "algorithm.gamma"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            parse_config_str("[run]\nmax_iter = 3\n"),
            Err(ConfigError::Parse(_))
        ));
        assert!(parse_config_str("[bogus]\n").is_err());
    }

    #[test]
    fn env_overrides_win() {
        let env = vec![
            ("PISA_ALGORITHM__SIGMA0".to_string(), "32".to_string()),
            ("PISA_RUN__NAME".to_string(), "hello".to_string()),
            ("HOME".to_string(), "/x".to_string()),
        ];
        let cfg = load_layered(None, Some("appendix-a2"), env).unwrap();
        assert_eq!(cfg.algorithm.sigma0, 32.0);
        assert_eq!(cfg.run.name, "hello");
        assert_eq!(cfg.problem.d, 100);
    }

    #[test]
    fn sweep_expansion_pairs_k0() {
        let cfg = parse_config_str("[sweep]\ngamma = [0.5, 0.99]\nseed = [1, 2]\n").unwrap();
        let runs = cfg.expand();
        assert_eq!(runs.len(), 4);
        assert_eq!(runs[0].algorithm.k0, Some(69));
        assert_eq!(runs[3].algorithm.k0, Some(1));
        assert_eq!(runs[1].run.name, "run_gamma=0.5_seed=2");
    }
}
