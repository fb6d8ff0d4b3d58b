//! Flat `key = value` configuration with `[model]`, `[spectral]` and
//! `[study]` sections. `#` starts a comment.
//!
//! ```text
//! [model]
//! preset = example1          # optional base; other keys override it
//! drift = 0.5*x
//! sigma = 2
//! sensor = x
//! b = 0.5
//! b_tilde = 1
//! intensity = clamp(3*sqr(x), 0.5, 50)
//! x0_mean = 5
//! x0_var = 0.5
//! horizon = 0.5
//!
//! [spectral]
//! basis = 48
//! mu = coercive
//!
//! [study]
//! seed = 1
//! levels = 8..11
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::harness::StudyConfig;
use crate::model::{preset, Coefficient, Diffusion, ModelSpec, MuRule, ValidationGrid};

const MODEL_KEYS: &[&str] = &[
    "preset",
    "name",
    "drift",
    "sigma",
    "sensor",
    "b",
    "b_tilde",
    "intensity",
    "intensity_lo",
    "intensity_hi",
    "x0_mean",
    "x0_var",
    "horizon",
];
const SPECTRAL_KEYS: &[&str] = &["basis", "quad_order", "mu", "mass_floor"];
const STUDY_KEYS: &[&str] = &["seed", "paths", "ref_level", "levels", "particles", "trajectories"];

fn allowed(section: &str) -> Option<&'static [&'static str]> {
    match section {
        "model" => Some(MODEL_KEYS),
        "spectral" => Some(SPECTRAL_KEYS),
        "study" => Some(STUDY_KEYS),
        _ => None,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if allowed(name).is_none() {
                    return Err(Error::Config(format!("line {lineno}: unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some(sec) = &section else {
                return Err(Error::Config(format!("line {lineno}: key outside of a section")));
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected `key = value`")))?;
            cfg.insert(sec, k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {lineno}: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn insert(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        let keys = allowed(section).ok_or_else(|| format!("unknown section [{section}]"))?;
        if !keys.contains(&key) {
            return Err(format!(
                "unknown key `{key}` in [{section}] (allowed: {})",
                keys.join(", ")
            ));
        }
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `section.key=value`.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not `section.key=value`")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not `section.key=value`")))?;
        self.insert(section, key, value.trim()).map_err(Error::Config)
    }

    /// Entries of `other` win.
    pub fn merge(&mut self, other: &ConfigFile) {
        for (sec, kv) in &other.sections {
            let dst = self.sections.entry(sec.clone()).or_default();
            for (k, v) in kv {
                dst.insert(k.clone(), v.clone());
            }
        }
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn get_parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        self.get(section, key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("{section}.{key}: cannot parse `{v}`")))
            })
            .transpose()
    }

    pub fn entries(&self) -> &BTreeMap<String, BTreeMap<String, String>> {
        &self.sections
    }

    pub fn has_model(&self) -> bool {
        self.sections.get("model").is_some_and(|m| !m.is_empty())
    }

    /// Builds the model from `[model]`, starting from `preset` when given.
    pub fn model(&self) -> Result<ModelSpec> {
        let mut m = match self.get("model", "preset") {
            Some(p) => preset(p)?,
            None => {
                for key in [
                    "drift",
                    "sigma",
                    "sensor",
                    "b",
                    "b_tilde",
                    "intensity",
                    "x0_mean",
                    "x0_var",
                    "horizon",
                ] {
                    if self.get("model", key).is_none() {
                        return Err(Error::Config(format!("model.{key} is required without a preset")));
                    }
                }
                preset("example1")?
            }
        };
        if let Some(name) = self.get("model", "name") {
            m.name = name.to_string();
        } else if self.get("model", "preset").is_none() {
            m.name = "custom".into();
        }
        let expr = |key: &str| -> Result<Option<Expr>> {
            self.get("model", key)
                .map(|s| Expr::parse(s).map_err(|e| Error::Config(format!("model.{key}: {e}"))))
                .transpose()
        };
        if let Some(e) = expr("drift")? {
            m.drift = Coefficient::from_expr(e.clone(), e.to_string());
        }
        if let Some(e) = expr("sigma")? {
            m.diffusion = Diffusion::from_expr(e.clone(), e.to_string());
        }
        if let Some(e) = expr("sensor")? {
            m.sensor = Coefficient::from_expr(e.clone(), e.to_string());
        }
        if let Some(v) = self.get_parsed("model", "b")? {
            m.b = v;
        }
        if let Some(v) = self.get_parsed("model", "b_tilde")? {
            m.b_tilde = v;
        }
        if let Some(v) = self.get_parsed("model", "x0_mean")? {
            m.x0_mean = v;
        }
        if let Some(v) = self.get_parsed("model", "x0_var")? {
            m.x0_var = v;
        }
        if let Some(v) = self.get_parsed("model", "horizon")? {
            m.horizon = v;
        }
        let lo: Option<f64> = self.get_parsed("model", "intensity_lo")?;
        let hi: Option<f64> = self.get_parsed("model", "intensity_hi")?;
        if let Some(e) = expr("intensity")? {
            let c = Coefficient::from_expr(e.clone(), e.to_string());
            let (glo, ghi) = grid_range(&c, &ValidationGrid::default());
            m = m.with_intensity(c, (lo.unwrap_or(glo), hi.unwrap_or(ghi)));
        } else if lo.is_some() || hi.is_some() {
            let (l, h) = m.intensity_bounds;
            m.intensity_bounds = (lo.unwrap_or(l), hi.unwrap_or(h));
        }
        m.check().map_err(|e| Error::Config(e.to_string()))?;
        Ok(m)
    }

    /// Study settings over `model`, with defaults for absent keys.
    pub fn study(&self, model: ModelSpec) -> Result<StudyConfig> {
        let mut cfg = StudyConfig::new(model);
        if let Some(v) = self.get_parsed("spectral", "basis")? {
            cfg.basis = v;
        }
        cfg.quad_order = self.get_parsed("spectral", "quad_order")?;
        if let Some(v) = self.get("spectral", "mu") {
            cfg.mu = v.parse::<MuRule>()?;
        }
        if let Some(v) = self.get_parsed("spectral", "mass_floor")? {
            cfg.mass_floor = v;
        }
        if let Some(v) = self.get_parsed("study", "seed")? {
            cfg.seed = v;
        }
        if let Some(v) = self.get_parsed("study", "paths")? {
            cfg.paths = v;
        }
        if let Some(v) = self.get_parsed("study", "ref_level")? {
            cfg.ref_level = v;
        }
        if let Some(v) = self.get("study", "levels") {
            cfg.levels = parse_levels(v)?;
        }
        if let Some(v) = self.get_parsed("study", "particles")? {
            cfg.particles = v;
        }
        if let Some(v) = self.get_parsed("study", "trajectories")? {
            cfg.keep_trajectories = v;
        }
        Ok(cfg)
    }
}

fn grid_range(c: &Coefficient, grid: &ValidationGrid) -> (f64, f64) {
    grid.iter()
        .map(|x| c.eval(x))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// `a..b` (inclusive) or a comma-separated list of exponents.
pub fn parse_levels(s: &str) -> Result<Vec<u32>> {
    let bad = || Error::Config(format!("levels must be `a..b` or `a,b,c`, got `{s}`"));
    let levels: Vec<u32> = if let Some((a, b)) = s.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|_| bad())?;
        let b: u32 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if levels.is_empty() {
        return Err(bad());
    }
    Ok(levels)
}
