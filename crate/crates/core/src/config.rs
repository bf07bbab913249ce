//! Experiment configuration: a flat `key = value` text format (one pair per
//! line, `#` comments), the sweep grid format, and validation.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::loss::{default_eta, LossConfig, UniformityVariant};
use crate::numeric::RngSeed;
use crate::objective::ObjectiveRegistry;
use crate::toy::SyntheticDatasetSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Mlp,
    Free,
}

impl EncoderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EncoderKind::Mlp => "mlp",
            EncoderKind::Free => "free",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: SyntheticDatasetSpec,
    pub encoder: EncoderKind,
    pub d_hidden: usize,
    pub d_rep: usize,
    pub shared_heads: bool,
    pub full_cross_attention: bool,
    /// None = sqrt(d_rep).
    pub attn_temp: Option<f64>,
    pub loss: LossConfig,
    pub objective: String,
    /// Variant used by objectives that do not pin one (uni_only).
    pub uniformity: UniformityVariant,
    pub lr: f64,
    pub steps: u64,
    /// 0 = full batch.
    pub batch_size: usize,
    pub cadence: u64,
    /// None = the training tau_prime.
    pub tau_metric: Option<f64>,
    /// Gaussian-potential scale of the global uniformity measurement.
    pub uniformity_t: f64,
    /// Positiveness kernel bandwidth.
    pub bandwidth: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: SyntheticDatasetSpec {
                n_total: 64,
                grid_h: 4,
                grid_w: 4,
                m_min: 2,
                m_max: 4,
                d_latent: 4,
                d_input: 16,
                topic_spread: 0.5,
                noise_sigma: 0.1,
                seed: RngSeed(42),
            },
            encoder: EncoderKind::Mlp,
            d_hidden: 32,
            d_rep: 16,
            shared_heads: true,
            full_cross_attention: false,
            attn_temp: None,
            loss: LossConfig::default(),
            objective: "lovt_uni_gauss".to_string(),
            uniformity: UniformityVariant::Gauss,
            lr: 0.5,
            steps: 200,
            batch_size: 0,
            cadence: 20,
            tau_metric: None,
            uniformity_t: 2.0,
            bandwidth: 1.0,
        }
    }
}

/// Parse flat `key = value` lines; `#` starts a comment, blank lines are
/// skipped, duplicate keys are rejected.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            LabError::Parse(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(LabError::Parse(format!("line {}: empty key or value", lineno + 1)));
        }
        if out.insert(key.clone(), value).is_some() {
            return Err(LabError::Parse(format!("line {}: duplicate key '{key}'", lineno + 1)));
        }
    }
    Ok(out)
}

struct KvReader {
    map: BTreeMap<String, String>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KvReader {
    fn new(map: BTreeMap<String, String>) -> Self {
        KvReader { map, used: Default::default() }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.map.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| LabError::Config(format!("bad value for '{key}': '{s}'"))),
        }
    }

    fn parse_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(s) => Err(LabError::Config(format!("bad bool for '{key}': '{s}'"))),
        }
    }

    /// "auto" (or absence) maps to None.
    fn parse_auto(&self, key: &str) -> Result<Option<f64>> {
        match self.raw(key) {
            None | Some("auto") => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| LabError::Config(format!("bad value for '{key}': '{s}'"))),
        }
    }

    fn unknown_keys(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.map
            .keys()
            .filter(|k| !used.contains(*k))
            .cloned()
            .collect()
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KvReader::new(parse_flat(text)?);
        let defaults = ExperimentConfig::default();
        let objective: String = kv.parse("objective", defaults.objective.clone())?;
        let uniformity = match kv.raw("uniformity") {
            None => ObjectiveRegistry::fixed_variant(&objective)
                .unwrap_or(UniformityVariant::Gauss),
            Some(s) => UniformityVariant::parse(s)?,
        };
        // eta default follows the variant in play unless given explicitly
        let variant_in_play =
            ObjectiveRegistry::fixed_variant(&objective).unwrap_or(uniformity);
        let eta = kv.parse("eta", default_eta(variant_in_play))?;
        let cfg = ExperimentConfig {
            dataset: SyntheticDatasetSpec {
                n_total: kv.parse("n_total", defaults.dataset.n_total)?,
                grid_h: kv.parse("grid_h", defaults.dataset.grid_h)?,
                grid_w: kv.parse("grid_w", defaults.dataset.grid_w)?,
                m_min: kv.parse("m_min", defaults.dataset.m_min)?,
                m_max: kv.parse("m_max", defaults.dataset.m_max)?,
                d_latent: kv.parse("d_latent", defaults.dataset.d_latent)?,
                d_input: kv.parse("d_input", defaults.dataset.d_input)?,
                topic_spread: kv.parse("topic_spread", defaults.dataset.topic_spread)?,
                noise_sigma: kv.parse("noise_sigma", defaults.dataset.noise_sigma)?,
                seed: RngSeed(kv.parse("seed", defaults.dataset.seed.0)?),
            },
            encoder: match kv.raw("encoder") {
                None => EncoderKind::Mlp,
                Some("mlp") => EncoderKind::Mlp,
                Some("free") => EncoderKind::Free,
                Some(s) => {
                    return Err(LabError::Config(format!("unknown encoder '{s}'")))
                }
            },
            d_hidden: kv.parse("d_hidden", defaults.d_hidden)?,
            d_rep: kv.parse("d_rep", defaults.d_rep)?,
            shared_heads: kv.parse_bool("shared_heads", defaults.shared_heads)?,
            full_cross_attention: match kv.raw("cross_attention") {
                None => false,
                Some("simplified") => false,
                Some("full") => true,
                Some(s) => {
                    return Err(LabError::Config(format!("unknown cross_attention '{s}'")))
                }
            },
            attn_temp: kv.parse_auto("attn_temp")?,
            loss: LossConfig {
                tau: kv.parse("tau", defaults.loss.tau)?,
                tau_prime: kv.parse("tau_prime", defaults.loss.tau_prime)?,
                lambda: kv.parse("lambda", defaults.loss.lambda)?,
                gamma: kv.parse("gamma", defaults.loss.gamma)?,
                mu: kv.parse("mu", defaults.loss.mu)?,
                nu: kv.parse("nu", defaults.loss.nu)?,
                eta,
            },
            objective,
            uniformity,
            lr: kv.parse("lr", defaults.lr)?,
            steps: kv.parse("steps", defaults.steps)?,
            batch_size: kv.parse("batch_size", defaults.batch_size)?,
            cadence: kv.parse("cadence", defaults.cadence)?,
            tau_metric: kv.parse_auto("tau_metric")?,
            uniformity_t: kv.parse("uniformity_t", defaults.uniformity_t)?,
            bandwidth: kv.parse("bandwidth", defaults.bandwidth)?,
        };
        let unknown = kv.unknown_keys();
        if !unknown.is_empty() {
            return Err(LabError::Config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.loss.validate()?;
        ObjectiveRegistry::builtin().get(&self.objective)?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(LabError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(LabError::Config("steps must be >= 1".into()));
        }
        if self.cadence == 0 {
            return Err(LabError::Config("cadence must be >= 1".into()));
        }
        if self.batch_size > self.dataset.n_total {
            return Err(LabError::Config(format!(
                "batch_size {} exceeds n_total {}",
                self.batch_size, self.dataset.n_total
            )));
        }
        if self.d_hidden == 0 || self.d_rep == 0 {
            return Err(LabError::Config("encoder dimensions must be >= 1".into()));
        }
        if let Some(t) = self.attn_temp {
            if !(t > 0.0) {
                return Err(LabError::Config(format!("attn_temp must be > 0, got {t}")));
            }
        }
        if let Some(t) = self.tau_metric {
            if !(t > 0.0) {
                return Err(LabError::Config(format!("tau_metric must be > 0, got {t}")));
            }
        }
        if !(self.uniformity_t > 0.0) {
            return Err(LabError::Config(format!(
                "uniformity_t must be > 0, got {}",
                self.uniformity_t
            )));
        }
        if !(self.bandwidth > 0.0) {
            return Err(LabError::Config(format!(
                "bandwidth must be > 0, got {}",
                self.bandwidth
            )));
        }
        if self.encoder == EncoderKind::Free && self.effective_batch_size() != self.dataset.n_total
        {
            return Err(LabError::Config(
                "free encoder trains representations directly and requires full-batch steps"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn effective_batch_size(&self) -> usize {
        if self.batch_size == 0 {
            self.dataset.n_total
        } else {
            self.batch_size
        }
    }

    pub fn effective_tau_metric(&self) -> f64 {
        self.tau_metric.unwrap_or(self.loss.tau_prime)
    }

    /// Config-echo columns appended to every CSV, fixed order.
    pub fn csv_echo(&self) -> Vec<(String, String)> {
        let f = |v: f64| format!("{v}");
        vec![
            ("cfg_objective".into(), self.objective.clone()),
            ("cfg_uniformity".into(), self.uniformity.as_str().into()),
            ("cfg_seed".into(), format!("{}", self.dataset.seed.0)),
            ("cfg_n_total".into(), format!("{}", self.dataset.n_total)),
            ("cfg_grid_h".into(), format!("{}", self.dataset.grid_h)),
            ("cfg_grid_w".into(), format!("{}", self.dataset.grid_w)),
            ("cfg_m_min".into(), format!("{}", self.dataset.m_min)),
            ("cfg_m_max".into(), format!("{}", self.dataset.m_max)),
            ("cfg_d_latent".into(), format!("{}", self.dataset.d_latent)),
            ("cfg_d_input".into(), format!("{}", self.dataset.d_input)),
            ("cfg_topic_spread".into(), f(self.dataset.topic_spread)),
            ("cfg_noise_sigma".into(), f(self.dataset.noise_sigma)),
            ("cfg_encoder".into(), self.encoder.as_str().into()),
            ("cfg_d_hidden".into(), format!("{}", self.d_hidden)),
            ("cfg_d_rep".into(), format!("{}", self.d_rep)),
            ("cfg_shared_heads".into(), format!("{}", self.shared_heads)),
            (
                "cfg_cross_attention".into(),
                if self.full_cross_attention { "full" } else { "simplified" }.into(),
            ),
            (
                "cfg_attn_temp".into(),
                self.attn_temp.map_or("auto".into(), f),
            ),
            ("cfg_tau".into(), f(self.loss.tau)),
            ("cfg_tau_prime".into(), f(self.loss.tau_prime)),
            ("cfg_lambda".into(), f(self.loss.lambda)),
            ("cfg_gamma".into(), f(self.loss.gamma)),
            ("cfg_mu".into(), f(self.loss.mu)),
            ("cfg_nu".into(), f(self.loss.nu)),
            ("cfg_eta".into(), f(self.loss.eta)),
            ("cfg_lr".into(), f(self.lr)),
            ("cfg_steps".into(), format!("{}", self.steps)),
            ("cfg_batch_size".into(), format!("{}", self.effective_batch_size())),
            ("cfg_cadence".into(), format!("{}", self.cadence)),
            ("cfg_tau_metric".into(), f(self.effective_tau_metric())),
            ("cfg_uniformity_t".into(), f(self.uniformity_t)),
            ("cfg_bandwidth".into(), f(self.bandwidth)),
        ]
    }
}

/// Sweep grid: objectives x tau_prime x eta. Omitted axes fall back to the
/// per-variant defaults (gauss: tau' {0.1, 0.2, 0.3, 0.5, 1.0}, eta
/// {0.1, 0.25, 0.5}; xent: tau' {0.05, 0.1, 0.2, 0.3, 0.5}, eta
/// {0.25, 0.5, 0.75}); objectives without a uniformity variant reuse the
/// base config values.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub objectives: Vec<String>,
    pub tau_primes: Option<Vec<f64>>,
    pub etas: Option<Vec<f64>>,
}

pub fn default_sweep_tau_primes(variant: UniformityVariant) -> Vec<f64> {
    match variant {
        UniformityVariant::Gauss => vec![0.1, 0.2, 0.3, 0.5, 1.0],
        UniformityVariant::Xent => vec![0.05, 0.1, 0.2, 0.3, 0.5],
    }
}

pub fn default_sweep_etas(variant: UniformityVariant) -> Vec<f64> {
    match variant {
        UniformityVariant::Gauss => vec![0.1, 0.25, 0.5],
        UniformityVariant::Xent => vec![0.25, 0.5, 0.75],
    }
}

impl SweepGrid {
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KvReader::new(parse_flat(text)?);
        let list = |key: &str| -> Result<Option<Vec<String>>> {
            Ok(kv
                .raw(key)
                .map(|s| s.split(',').map(|v| v.trim().to_string()).collect()))
        };
        let objectives = list("objectives")?
            .ok_or_else(|| LabError::Config("grid needs an 'objectives' list".into()))?;
        if objectives.is_empty() {
            return Err(LabError::Config("empty objectives list".into()));
        }
        let reg = ObjectiveRegistry::builtin();
        for o in &objectives {
            reg.get(o)?;
        }
        let floats = |vals: Option<Vec<String>>, key: &str| -> Result<Option<Vec<f64>>> {
            match vals {
                None => Ok(None),
                Some(vs) => vs
                    .into_iter()
                    .map(|v| {
                        v.parse::<f64>().map_err(|_| {
                            LabError::Config(format!("bad value in '{key}': '{v}'"))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()
                    .map(Some),
            }
        };
        let tau_primes = floats(list("tau_prime")?, "tau_prime")?;
        let etas = floats(list("eta")?, "eta")?;
        let unknown = kv.unknown_keys();
        if !unknown.is_empty() {
            return Err(LabError::Config(format!(
                "unknown grid keys: {}",
                unknown.join(", ")
            )));
        }
        Ok(SweepGrid { objectives, tau_primes, etas })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Expand into per-cell (objective, tau_prime, eta) triples in grid
    /// order: objective, then tau_prime, then eta.
    pub fn cells(&self, base: &ExperimentConfig) -> Vec<(String, f64, f64)> {
        let mut out = Vec::new();
        for obj in &self.objectives {
            let variant = ObjectiveRegistry::fixed_variant(obj);
            let tps = match (&self.tau_primes, variant) {
                (Some(v), _) => v.clone(),
                (None, Some(var)) => default_sweep_tau_primes(var),
                (None, None) => vec![base.loss.tau_prime],
            };
            let etas = match (&self.etas, variant) {
                (Some(v), _) => v.clone(),
                (None, Some(var)) => default_sweep_etas(var),
                (None, None) => vec![base.loss.eta],
            };
            for tp in &tps {
                for eta in &etas {
                    out.push((obj.clone(), *tp, *eta));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_flat_basics() {
        let m = parse_flat("a = 1\n# comment\n b = two # trailing\n\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "two");
        assert!(parse_flat("a = 1\na = 2").is_err());
        assert!(parse_flat("nonsense line").is_err());
    }

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = ExperimentConfig::from_text("").unwrap();
        assert_eq!(cfg.objective, "lovt_uni_gauss");
        assert_eq!(cfg.loss.eta, 0.25);

        let cfg = ExperimentConfig::from_text(
            "objective = lovt_uni_xent\ntau_prime = 0.3\nsteps = 10\n",
        )
        .unwrap();
        assert_eq!(cfg.loss.eta, 0.5); // xent default
        assert_eq!(cfg.loss.tau_prime, 0.3);
        assert_eq!(cfg.steps, 10);

        let cfg = ExperimentConfig::from_text("objective = uni_only\nuniformity = xent\n")
            .unwrap();
        assert_eq!(cfg.loss.eta, 0.5);
    }

    #[test]
    fn config_rejects_unknown_and_invalid() {
        assert!(matches!(
            ExperimentConfig::from_text("objektive = lovt"),
            Err(LabError::Config(_))
        ));
        assert!(ExperimentConfig::from_text("lr = 0").is_err());
        assert!(ExperimentConfig::from_text("objective = nonsense").is_err());
        assert!(ExperimentConfig::from_text("batch_size = 9999").is_err());
        // free encoder requires full batch
        assert!(ExperimentConfig::from_text("encoder = free\nbatch_size = 2").is_err());
        assert!(ExperimentConfig::from_text("encoder = free").is_ok());
    }

    #[test]
    fn echo_is_stable_and_prefixed() {
        let cfg = ExperimentConfig::default();
        let echo = cfg.csv_echo();
        assert!(echo.iter().all(|(k, _)| k.starts_with("cfg_")));
        assert_eq!(echo[0].0, "cfg_objective");
        assert_eq!(cfg.effective_batch_size(), 64);
        assert_eq!(cfg.effective_tau_metric(), 0.2);
    }

    #[test]
    fn grid_expansion() {
        let g = SweepGrid::from_text("objectives = lovt_uni_gauss\n").unwrap();
        let base = ExperimentConfig::default();
        let cells = g.cells(&base);
        assert_eq!(cells.len(), 15); // 5 taus x 3 etas
        assert_eq!(cells[0].0, "lovt_uni_gauss");

        let g = SweepGrid::from_text(
            "objectives = lovt_uni_gauss, lovt_uni_xent\ntau_prime = 0.2, 0.5\neta = 0.25\n",
        )
        .unwrap();
        let cells = g.cells(&base);
        assert_eq!(cells.len(), 4);
        // grid order: objective, then tau', then eta
        assert_eq!(cells[1], ("lovt_uni_gauss".to_string(), 0.5, 0.25));

        assert!(SweepGrid::from_text("tau_prime = 0.2").is_err());
        assert!(SweepGrid::from_text("objectives = bogus").is_err());
    }
}
