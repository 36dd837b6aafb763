//! Run configuration: a flat key=value text format with `[section]`
//! headers. Every tunable lives under one dotted key (for example
//! `pa.dist_threshold`); CLI flags funnel through the same `set` calls
//! after the file is read, so flags always win.

use std::path::{Path, PathBuf};

use kernelspot::losses::LossConfig;
use kernelspot::nn::ModelConfig;
use kernelspot::pa::PAConfig;
use kernelspot::recognition::{Charset, RecConfig};
use kernelspot::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pa: PAConfig,
    pub loss: LossConfig,
    /// Decoder width, attention heads and step cap; the decoder's input
    /// channel count is always derived from the model, never set.
    pub rec_embed_dim: usize,
    pub rec_heads: usize,
    pub rec_max_steps: usize,
    pub seed: u64,
    pub shrink_rate: f64,
    /// Benchmark repetitions.
    pub reps: usize,
    /// Symbol inventory file; the built-in a-z 0-9 set when absent.
    pub charset_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let rec = RecConfig::default();
        Self {
            model: ModelConfig::default(),
            pa: PAConfig::default(),
            loss: LossConfig::default(),
            rec_embed_dim: rec.embed_dim,
            rec_heads: rec.heads,
            rec_max_steps: rec.max_steps,
            seed: 42,
            shrink_rate: 0.7,
            reps: 10,
            charset_path: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse()
        .map_err(|e| Error::parse(format!("config key `{key}`: {e}")))
}

impl RunConfig {
    /// Defaults overlaid with the given file (when present).
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            cfg.apply_file(p)?;
        }
        Ok(cfg)
    }

    /// Applies `[section]` / `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(format!("{}:{}: expected key = value", path.display(), i + 1))
            })?;
            let dotted = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            self.set(&dotted, value.trim())
                .map_err(|e| Error::parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    /// One dotted key. Unknown keys are errors so typos never pass
    /// silently.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.backbone_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| num("model.backbone_channels", p))
                    .collect::<Result<_>>()?;
                self.model.backbone_channels = parts.try_into().map_err(|_| {
                    Error::parse("model.backbone_channels needs exactly 4 comma-separated values")
                })?;
            }
            "model.enhanced_channels" => self.model.enhanced_channels = num(key, value)?,
            "model.n_stk" => self.model.n_stk = num(key, value)?,
            "model.emb_dim" => self.model.emb_dim = num(key, value)?,
            "pa.tex_threshold" => self.pa.tex_threshold = num(key, value)?,
            "pa.ker_threshold" => self.pa.ker_threshold = num(key, value)?,
            "pa.dist_threshold" => self.pa.dist_threshold = num(key, value)?,
            "pa.min_kernel_area" => self.pa.min_kernel_area = num(key, value)?,
            "pa.min_instance_area" => self.pa.min_instance_area = num(key, value)?,
            "pa.min_confidence" => self.pa.min_confidence = num(key, value)?,
            "loss.alpha" => self.loss.alpha = num(key, value)?,
            "loss.beta" => self.loss.beta = num(key, value)?,
            "loss.delta_agg" => self.loss.delta_agg = num(key, value)?,
            "loss.delta_dis" => self.loss.delta_dis = num(key, value)?,
            "loss.ohem_ratio" => self.loss.ohem_ratio = num(key, value)?,
            "rec.embed_dim" => self.rec_embed_dim = num(key, value)?,
            "rec.heads" => self.rec_heads = num(key, value)?,
            "rec.max_steps" => self.rec_max_steps = num(key, value)?,
            "run.seed" => self.seed = num(key, value)?,
            "run.shrink_rate" => self.shrink_rate = num(key, value)?,
            "run.reps" => self.reps = num(key, value)?,
            "run.charset" => {
                let p = PathBuf::from(value);
                if !p.exists() {
                    return Err(Error::parse(format!(
                        "run.charset points at a missing file: {value}"
                    )));
                }
                self.charset_path = Some(p);
            }
            _ => return Err(Error::parse(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// `section.key=value` override strings from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("override `{o}` is not key=value")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn charset(&self) -> Result<Charset> {
        match &self.charset_path {
            Some(p) => Charset::load(p),
            None => Ok(Charset::latin()),
        }
    }

    /// Decoder configuration with the input width tied to the model's
    /// fused channel count.
    pub fn rec(&self) -> RecConfig {
        RecConfig {
            feature_channels: self.model.fused_channels(),
            embed_dim: self.rec_embed_dim,
            heads: self.rec_heads,
            max_steps: self.rec_max_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pa.validate()?;
        self.loss.validate()?;
        self.rec().validate()?;
        if !(0.0..=1.0).contains(&self.shrink_rate) {
            return Err(Error::invalid(format!(
                "run.shrink_rate must lie in [0, 1], got {}",
                self.shrink_rate
            )));
        }
        if self.reps == 0 {
            return Err(Error::invalid("run.reps must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn file_then_flags_override_in_order() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(
            f,
            "# comment\n[model]\nn_stk = 4\nemb_dim = 8\n\n[pa]\ndist_threshold = 6 # inline\n[run]\nseed = 7\n"
        )
        .unwrap();
        let mut cfg = RunConfig::load(Some(f.path())).unwrap();
        assert_eq!(cfg.model.n_stk, 4);
        assert_eq!(cfg.model.emb_dim, 8);
        assert_eq!(cfg.pa.dist_threshold, 6.0);
        assert_eq!(cfg.seed, 7);
        cfg.apply_overrides(&["model.n_stk=1".into(), "run.seed=9".into()])
            .unwrap();
        assert_eq!(cfg.model.n_stk, 1);
        assert_eq!(cfg.seed, 9);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_malformed_lines_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("pa.typo", "1").is_err());
        assert!(cfg.set("nonsense", "1").is_err());
        assert!(cfg.apply_overrides(&["missing-equals".into()]).is_err());

        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "[pa]\njust a line\n").unwrap();
        let err = RunConfig::load(Some(f.path())).unwrap_err().to_string();
        assert!(err.contains(":2"), "line number missing from {err}");
    }

    #[test]
    fn charset_path_must_exist_and_rec_width_follows_model() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("run.charset", "/definitely/not/here.txt").is_err());
        cfg.set("model.enhanced_channels", "32").unwrap();
        assert_eq!(cfg.rec().feature_channels, 128);
        assert_eq!(cfg.charset().unwrap().size(), 39);
    }

    #[test]
    fn backbone_channel_lists_need_four_entries() {
        let mut cfg = RunConfig::default();
        cfg.set("model.backbone_channels", "8, 16, 32, 64").unwrap();
        assert_eq!(cfg.model.backbone_channels, [8, 16, 32, 64]);
        assert!(cfg.set("model.backbone_channels", "8,16").is_err());
    }
}
