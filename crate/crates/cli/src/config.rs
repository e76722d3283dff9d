//! Plain-text `key = value` configuration with `[section]` headers.
//!
//! Keys before the first header belong to `[network]`. Several assignments
//! may share a line when separated by whitespace (`depth=12 width=1024`).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use lipscope::harness::Experiment;
use lipscope::init::{DepthRule, InitMethod};
use lipscope::lab::{EstimateConfig, Precision};
use lipscope::layers::LayerKind;
use lipscope::network::{BnStats, Family, NetworkSpec, NormChoice, NormPosition};
use lipscope::optim::BiasCorrection;
use lipscope::NormKind;

pub const SECTIONS: [&str; 7] = [
    "network",
    "estimator",
    "sweep",
    "optimizer",
    "principles",
    "init_stats",
    "jacobian",
];

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("network", "family", "resnet | dpa | scsa | l2a (transformer_* aliases accepted)"),
    ("network", "depth", "number of blocks"),
    ("network", "width", "hidden dimension D (channels for resnet)"),
    ("network", "heads", "attention heads"),
    ("network", "ffn_expand", "FFN hidden size as a multiple of D"),
    ("network", "use_residual", "residual shortcuts"),
    ("network", "use_norm", "normalization layers"),
    ("network", "norm_kind", "auto | ln | bn | rms | center"),
    ("network", "norm_position", "post | pre"),
    ("network", "bn_stats", "batch | running"),
    ("network", "init", "xavier_uniform | xavier_normal | kaiming | orthogonal | spectral | depth_aware"),
    ("network", "gain", "multiplier applied after initialization"),
    ("network", "kaiming_a", "negative slope for kaiming init"),
    ("network", "depth_rule", "inv_sqrt | inv (depth_aware init)"),
    ("network", "droppath_p", "DropPath probability"),
    ("network", "wrs_nu_init", "initial residual weight, or none"),
    ("network", "kernel_size", "resnet convolution kernel"),
    ("network", "stride", "resnet convolution stride"),
    ("network", "padding", "resnet convolution padding"),
    ("network", "input_height", "input rows (tokens = height * width)"),
    ("network", "input_width", "input columns"),
    ("estimator", "base_points", "number of base points x"),
    ("estimator", "perturbations", "perturbations z per base point"),
    ("estimator", "epsilon", "perturbation scale, > 0"),
    ("estimator", "norm", "L1 | L2 | LInf"),
    ("sweep", "experiment", "depth_residual | depth_norm | gain | epsilon | hidden | input | layerwise | norms | init_spectrum"),
    ("sweep", "families", "comma-separated families"),
    ("sweep", "grid", "comma-separated grid values"),
    ("sweep", "seeds", "comma-separated seeds (replaced by --seed when given)"),
    ("sweep", "norms", "comma-separated norms for the norms experiment"),
    ("sweep", "bins", "histogram bins for init_spectrum"),
    ("sweep", "spectrum_sizes", "comma-separated n_in x n_out sizes, e.g. 256x512"),
    ("optimizer", "kind", "sgd | adamw"),
    ("optimizer", "lr", "learning rate"),
    ("optimizer", "schedule", "constant | cosine | step"),
    ("optimizer", "step_every", "steps between decays (step schedule)"),
    ("optimizer", "step_factor", "decay factor (step schedule)"),
    ("optimizer", "beta", "SGD momentum"),
    ("optimizer", "beta1", "AdamW first-moment coefficient"),
    ("optimizer", "beta2", "AdamW second-moment coefficient"),
    ("optimizer", "weight_decay", "decoupled weight decay lambda"),
    ("optimizer", "eps", "AdamW denominator smoothing"),
    ("optimizer", "bias_correction", "fixed | stepwise"),
    ("optimizer", "steps", "training steps"),
    ("optimizer", "out_dim", "outputs of the linear head"),
    ("optimizer", "clip", "global gradient-norm clip, or none"),
    ("optimizer", "zero_grad", "replace gradients by zero"),
    ("principles", "precision", "fp16 | fp32"),
    ("init_stats", "n_in", "input fan"),
    ("init_stats", "n_out", "output fan"),
    ("init_stats", "bins", "histogram bins"),
    ("jacobian", "layers", "all, or comma-separated layer kinds"),
    ("jacobian", "dim", "feature dimension of sampled layers"),
    ("jacobian", "batch", "columns of the probe input"),
    ("jacobian", "probes", "random directions per layer"),
    ("jacobian", "step", "central-difference step"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Cosine,
    Step,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSection {
    pub experiment: Experiment,
    pub families: Vec<Family>,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub norms: Vec<NormKind>,
    pub bins: usize,
    pub spectrum_sizes: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub step_every: usize,
    pub step_factor: f64,
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub bias_correction: BiasCorrection,
    pub steps: usize,
    pub out_dim: usize,
    pub clip: Option<f64>,
    pub zero_grad: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianSection {
    /// Empty means every kind.
    pub layers: Vec<LayerKind>,
    pub dim: usize,
    pub batch: usize,
    pub probes: usize,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub network: NetworkSpec,
    pub estimator: EstimateConfig,
    pub sweep: SweepSection,
    pub optimizer: OptimizerSection,
    pub precision: Precision,
    pub init_stats: (usize, usize, usize),
    pub jacobian: JacobianSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            network: NetworkSpec::paper_default(Family::TransformerDPA),
            estimator: EstimateConfig::default(),
            sweep: SweepSection {
                experiment: Experiment::DepthResidual,
                families: vec![
                    Family::ResNetConv,
                    Family::TransformerDPA,
                    Family::TransformerSCSA,
                ],
                grid: vec![1.0, 2.0, 4.0, 8.0, 12.0, 16.0],
                seeds: vec![0],
                norms: NormKind::ALL.to_vec(),
                bins: 50,
                spectrum_sizes: vec![(1024, 1024)],
            },
            optimizer: OptimizerSection {
                kind: OptimizerKind::AdamW,
                lr: 1e-3,
                schedule: ScheduleKind::Constant,
                step_every: 100,
                step_factor: 0.1,
                beta: 0.9,
                beta1: 0.9,
                beta2: 0.999,
                weight_decay: 0.0,
                eps: lipscope::optim::DEFAULT_ADAM_EPS,
                bias_correction: BiasCorrection::Fixed,
                steps: 100,
                out_dim: 4,
                clip: None,
                zero_grad: false,
            },
            precision: Precision::FP16,
            init_stats: (1024, 1024, 50),
            jacobian: JacobianSection {
                layers: Vec::new(),
                dim: 8,
                batch: 4,
                probes: 5,
                step: 1e-6,
            },
        }
    }
}

/// Configuration problem with the offending line (0 for whole-file issues).
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.line > 0 {
            write!(f, "line {}: {}", self.line, self.message)
        } else {
            f.write_str(&self.message)
        }
    }
}

fn real(v: f64) -> String {
    format!("{v:?}")
}

fn list<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

fn parse_list<T>(v: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    v.split(',').map(|s| f(s.trim())).collect()
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>()
        .map_err(|_| format!("expected a {}, got '{v}'", std::any::type_name::<T>()))
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got '{v}'")),
    }
}

fn optional(v: &str) -> Result<Option<f64>, String> {
    if v == "none" {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

fn parsed<T: std::str::FromStr<Err = lipscope::Error>>(v: &str) -> Result<T, String> {
    v.parse::<T>().map_err(|e| e.to_string())
}

impl Config {
    /// Canonical `(section, key, value)` triples in [`KEYS`] order.
    pub fn pairs(&self) -> Vec<(&'static str, &'static str, String)> {
        let n = &self.network;
        let e = &self.estimator;
        let s = &self.sweep;
        let o = &self.optimizer;
        let j = &self.jacobian;
        let values: Vec<String> = vec![
            n.family.name().into(),
            n.depth.to_string(),
            n.width.to_string(),
            n.heads.to_string(),
            n.ffn_expand.to_string(),
            n.use_residual.to_string(),
            n.use_norm.to_string(),
            n.norm_kind.name().into(),
            match n.norm_position {
                NormPosition::Post => "post".into(),
                NormPosition::Pre => "pre".into(),
            },
            match n.bn_stats {
                BnStats::Batch => "batch".into(),
                BnStats::Running => "running".into(),
            },
            n.init.method.name().into(),
            real(n.init.gain),
            real(n.init.kaiming_a),
            n.init.depth_rule.name().into(),
            real(n.droppath_p),
            n.wrs_nu_init.map_or("none".into(), real),
            n.kernel_size.to_string(),
            n.stride.to_string(),
            n.padding.to_string(),
            n.input_height.to_string(),
            n.input_width.to_string(),
            e.base_points.to_string(),
            e.perturbations.to_string(),
            real(e.epsilon),
            e.norm.as_str().into(),
            s.experiment.name().into(),
            list(&s.families, |f| f.name().into()),
            list(&s.grid, |v| real(*v)),
            list(&s.seeds, |v| v.to_string()),
            list(&s.norms, |v| v.as_str().into()),
            s.bins.to_string(),
            list(&s.spectrum_sizes, |(a, b)| format!("{a}x{b}")),
            match o.kind {
                OptimizerKind::Sgd => "sgd".into(),
                OptimizerKind::AdamW => "adamw".into(),
            },
            real(o.lr),
            match o.schedule {
                ScheduleKind::Constant => "constant".into(),
                ScheduleKind::Cosine => "cosine".into(),
                ScheduleKind::Step => "step".into(),
            },
            o.step_every.to_string(),
            real(o.step_factor),
            real(o.beta),
            real(o.beta1),
            real(o.beta2),
            real(o.weight_decay),
            real(o.eps),
            match o.bias_correction {
                BiasCorrection::Fixed => "fixed".into(),
                BiasCorrection::Stepwise => "stepwise".into(),
            },
            o.steps.to_string(),
            o.out_dim.to_string(),
            o.clip.map_or("none".into(), real),
            o.zero_grad.to_string(),
            match self.precision {
                Precision::FP16 => "fp16".into(),
                Precision::FP32 => "fp32".into(),
            },
            self.init_stats.0.to_string(),
            self.init_stats.1.to_string(),
            self.init_stats.2.to_string(),
            if j.layers.is_empty() {
                "all".into()
            } else {
                list(&j.layers, |k| k.name().into())
            },
            j.dim.to_string(),
            j.batch.to_string(),
            j.probes.to_string(),
            real(j.step),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        KEYS.iter()
            .zip(values)
            .map(|(&(sec, key, _), v)| (sec, key, v))
            .collect()
    }

    /// Assigns one key from its textual value.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), String> {
        let n = &mut self.network;
        let o = &mut self.optimizer;
        match (section, key) {
            ("network", "family") => n.family = parsed(v)?,
            ("network", "depth") => n.depth = num(v)?,
            ("network", "width") => n.width = num(v)?,
            ("network", "heads") => n.heads = num(v)?,
            ("network", "ffn_expand") => n.ffn_expand = num(v)?,
            ("network", "use_residual") => n.use_residual = boolean(v)?,
            ("network", "use_norm") => n.use_norm = boolean(v)?,
            ("network", "norm_kind") => n.norm_kind = parsed::<NormChoice>(v)?,
            ("network", "norm_position") => n.norm_position = parsed(v)?,
            ("network", "bn_stats") => n.bn_stats = parsed(v)?,
            ("network", "init") => n.init.method = parsed::<InitMethod>(v)?,
            ("network", "gain") => n.init.gain = num(v)?,
            ("network", "kaiming_a") => n.init.kaiming_a = num(v)?,
            ("network", "depth_rule") => n.init.depth_rule = parsed::<DepthRule>(v)?,
            ("network", "droppath_p") => n.droppath_p = num(v)?,
            ("network", "wrs_nu_init") => n.wrs_nu_init = optional(v)?,
            ("network", "kernel_size") => n.kernel_size = num(v)?,
            ("network", "stride") => n.stride = num(v)?,
            ("network", "padding") => n.padding = num(v)?,
            ("network", "input_height") => n.input_height = num(v)?,
            ("network", "input_width") => n.input_width = num(v)?,
            ("estimator", "base_points") => self.estimator.base_points = num(v)?,
            ("estimator", "perturbations") => self.estimator.perturbations = num(v)?,
            ("estimator", "epsilon") => self.estimator.epsilon = num(v)?,
            ("estimator", "norm") => self.estimator.norm = parsed(v)?,
            ("sweep", "experiment") => self.sweep.experiment = parsed(v)?,
            ("sweep", "families") => self.sweep.families = parse_list(v, parsed)?,
            ("sweep", "grid") => self.sweep.grid = parse_list(v, num)?,
            ("sweep", "seeds") => self.sweep.seeds = parse_list(v, num)?,
            ("sweep", "norms") => self.sweep.norms = parse_list(v, parsed)?,
            ("sweep", "bins") => self.sweep.bins = num(v)?,
            ("sweep", "spectrum_sizes") => {
                self.sweep.spectrum_sizes = parse_list(v, |s| {
                    let (a, b) = s
                        .split_once('x')
                        .ok_or_else(|| format!("expected n_in x n_out, got '{s}'"))?;
                    Ok((num(a)?, num(b)?))
                })?
            }
            ("optimizer", "kind") => {
                o.kind = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adamw" => OptimizerKind::AdamW,
                    _ => return Err(format!("expected sgd or adamw, got '{v}'")),
                }
            }
            ("optimizer", "lr") => o.lr = num(v)?,
            ("optimizer", "schedule") => {
                o.schedule = match v {
                    "constant" => ScheduleKind::Constant,
                    "cosine" => ScheduleKind::Cosine,
                    "step" => ScheduleKind::Step,
                    _ => return Err(format!("expected constant, cosine or step, got '{v}'")),
                }
            }
            ("optimizer", "step_every") => o.step_every = num(v)?,
            ("optimizer", "step_factor") => o.step_factor = num(v)?,
            ("optimizer", "beta") => o.beta = num(v)?,
            ("optimizer", "beta1") => o.beta1 = num(v)?,
            ("optimizer", "beta2") => o.beta2 = num(v)?,
            ("optimizer", "weight_decay") => o.weight_decay = num(v)?,
            ("optimizer", "eps") => o.eps = num(v)?,
            ("optimizer", "bias_correction") => o.bias_correction = parsed(v)?,
            ("optimizer", "steps") => o.steps = num(v)?,
            ("optimizer", "out_dim") => o.out_dim = num(v)?,
            ("optimizer", "clip") => o.clip = optional(v)?,
            ("optimizer", "zero_grad") => o.zero_grad = boolean(v)?,
            ("principles", "precision") => self.precision = parsed(v)?,
            ("init_stats", "n_in") => self.init_stats.0 = num(v)?,
            ("init_stats", "n_out") => self.init_stats.1 = num(v)?,
            ("init_stats", "bins") => self.init_stats.2 = num(v)?,
            ("jacobian", "layers") => {
                self.jacobian.layers = if v == "all" {
                    Vec::new()
                } else {
                    parse_list(v, |s| LayerKind::parse(s).map_err(|e| e.to_string()))?
                }
            }
            ("jacobian", "dim") => self.jacobian.dim = num(v)?,
            ("jacobian", "batch") => self.jacobian.batch = num(v)?,
            ("jacobian", "probes") => self.jacobian.probes = num(v)?,
            ("jacobian", "step") => self.jacobian.step = num(v)?,
            _ => return Err(format!("unknown key '{key}' in [{section}]")),
        }
        Ok(())
    }

    /// Checks the preconditions that can be judged without running anything.
    pub fn validate(&self) -> Result<(), String> {
        self.estimator.validate().map_err(|e| e.to_string())?;
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return Err(format!("optimizer.lr must be >= 0, got {}", o.lr));
        }
        if o.clip.is_some_and(|c| !(c > 0.0)) {
            return Err("optimizer.clip must be > 0".into());
        }
        if self.jacobian.dim == 0 || self.jacobian.batch == 0 || !(self.jacobian.step > 0.0) {
            return Err("jacobian.dim, jacobian.batch and jacobian.step must be positive".into());
        }
        Ok(())
    }

    /// Canonical text form: every section and key, in table order.
    pub fn to_canonical(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (sec, key, v) in self.pairs() {
            if sec != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                current = sec;
            }
            let _ = writeln!(out, "{key} = {v}");
        }
        out
    }
}

/// Nearest known key of `section`, for error messages.
fn suggest(section: &str, key: &str) -> Option<&'static str> {
    KEYS.iter()
        .filter(|(s, _, _)| *s == section)
        .map(|(_, k, _)| (*k, strsim::jaro_winkler(k, key)))
        .filter(|(_, score)| *score > 0.7)
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}

/// Parses configuration text. Unknown keys are errors unless `lenient`,
/// in which case they are returned as warnings.
pub fn parse_config(text: &str, lenient: bool) -> Result<(Config, Vec<String>), ConfigError> {
    let mut cfg = Config::default();
    let mut warnings = Vec::new();
    let mut section = "network";
    let mut seen = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |message: String| ConfigError { line, message };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(format!("malformed section header '{content}'")))?
                .trim();
            section = SECTIONS
                .iter()
                .find(|s| **s == name)
                .ok_or_else(|| err(format!("unknown section [{name}]")))?;
            continue;
        }
        let assignments: Vec<(String, String)> = if content.matches('=').count() > 1 {
            content
                .split_whitespace()
                .map(|tok| {
                    tok.split_once('=')
                        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                        .ok_or_else(|| err(format!("expected key=value, got '{tok}'")))
                })
                .collect::<Result<_, _>>()?
        } else {
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got '{content}'")))?;
            vec![(k.trim().to_string(), v.trim().to_string())]
        };
        for (key, value) in assignments {
            if !KEYS.iter().any(|(s, k, _)| *s == section && *k == key) {
                let hint = suggest(section, &key)
                    .map(|k| format!("; did you mean '{k}'?"))
                    .unwrap_or_default();
                let msg = format!("unknown key '{key}' in [{section}]{hint}");
                if lenient {
                    warnings.push(format!("line {line}: {msg}"));
                    continue;
                }
                return Err(err(msg));
            }
            if !seen.insert((section, key.clone())) {
                return Err(err(format!("duplicate key '{key}' in [{section}]")));
            }
            cfg.set(section, &key, &value)
                .map_err(|m| err(format!("{section}.{key}: {m}")))?;
        }
    }
    cfg.validate()
        .map_err(|message| ConfigError { line: 0, message })?;
    Ok((cfg, warnings))
}

pub fn load_config(path: &Path, lenient: bool) -> Result<(Config, Vec<String>), ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        line: 0,
        message: format!("cannot read config {}: {e}", path.display()),
    })?;
    parse_config(&text, lenient)
}

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let defaults = Config::default().pairs();
    let mut out = String::from("Configuration keys (section.key = default):\n");
    for ((sec, key, v), (_, _, doc)) in defaults.iter().zip(KEYS) {
        let _ = writeln!(out, "  {sec}.{key} = {v}\n      {doc}");
    }
    out.push_str("\nKeys before the first [section] header belong to [network].\n");
    out.push_str("LIPSCOPE_THREADS caps the worker pool (default: all logical cores).\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_is_the_published_default() {
        let (cfg, _) = parse_config(
            "family=transformer_dpa depth=12 width=1024 heads=8\n",
            false,
        )
        .unwrap();
        assert_eq!(
            cfg.network,
            NetworkSpec::paper_default(Family::TransformerDPA)
        );
    }

    #[test]
    fn zero_epsilon_rejected() {
        assert!(parse_config("[estimator]\nepsilon = 0\n", false).is_err());
    }

    #[test]
    fn type_mismatch_names_line() {
        let e = parse_config("depth = 3\n\nwidth = wide\n", false).unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.message.contains("width"));
    }

    #[test]
    fn unknown_key_suggests() {
        let e = parse_config("[estimator]\nepsilom = 1e-3\n", false).unwrap_err();
        assert!(
            e.message.contains("did you mean 'epsilon'"),
            "{}",
            e.message
        );
        let (_, warn) = parse_config("[estimator]\nepsilom = 1e-3\n", true).unwrap();
        assert_eq!(warn.len(), 1);
    }

    #[test]
    fn every_documented_key_accepts_its_default() {
        let base = Config::default();
        for (sec, key, v) in base.pairs() {
            let mut c = base.clone();
            c.set(sec, key, &v).unwrap();
            assert_eq!(c, base, "{sec}.{key}");
        }
    }
}
