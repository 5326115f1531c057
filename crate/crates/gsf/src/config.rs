//! Flat key=value run configuration.
//!
//! One `key = value` pair per line, `#` comments, no sections. Every key a
//! file supplies must be consumed by the command that loads it; leftovers are
//! reported as unknown keys so typos fail fast instead of silently falling
//! back to defaults.
//!
//! Training schema (all optional unless marked required):
//!
//! ```text
//! ckpt             = runs/source/ckpt.bin   # required: source checkpoint
//! sketch_dir       = sketches/              # required: exemplar directory
//! image_dir        = photos/                # required when loss.lambda_image > 0
//! eval_dir         = eval/                  # evaluation reference images
//! variant          = full-mapping           # full-mapping | w-shift | all-params
//! translator       = edge                   # edge | point-squash | point-direction
//! loss.lambda_image  = 0.7
//! loss.lambda_weight = 0.0
//! loss.r1_gamma      = 10.0
//! loss.lazy_r1       = true
//! aug.enabled      = false
//! aug.max_shift    = 0.125
//! batch_size       = 4
//! max_iters        = 5000
//! eval_every       = 250
//! eval_samples     = 500
//! seed             = 0
//! d_y_init         = pretrained            # pretrained | scratch
//! lr               = 0.002
//! beta1            = 0.0
//! beta2            = 0.99
//! image_rotation_aug = false
//! ```

use std::cell::RefCell;
use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::sketch::AugmentPolicy;
use crate::train::TrainConfig;

/// A parsed config file with consumption tracking.
#[derive(Debug)]
pub struct ConfigMap {
    values: IndexMap<String, String>,
    used: RefCell<HashSet<String>>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = IndexMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
        }
        Ok(ConfigMap {
            values,
            used: RefCell::new(HashSet::new()),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// Raw lookup; marks the key as consumed.
    pub fn get(&self, key: &str) -> Option<String> {
        let v = self.values.get(key).cloned();
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn require(&self, key: &str) -> Result<String> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required config key `{key}`")))
    }

    /// Typed lookup with a default when absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("config key `{key}`: bad value `{s}`"))),
        }
    }

    pub fn get_bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key).as_deref() {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(s) => Err(Error::Config(format!(
                "config key `{key}`: expected true|false, got `{s}`"
            ))),
        }
    }

    /// Strictness gate: every supplied key must have been read by now.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !used.contains(*k))
            .map(|s| s.as_str())
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown config key(s): {}",
                unknown.join(", ")
            )))
        }
    }
}

/// Assemble a TrainConfig from the flat keys, applying defaults for anything
/// absent. Dataset paths are left to the caller; this reads only the keys the
/// trainer itself owns.
pub fn train_config_from(cfg: &ConfigMap) -> Result<TrainConfig> {
    let mut out = TrainConfig::default();
    if let Some(v) = cfg.get("variant") {
        out.variant = v.parse()?;
    }
    out.weights.lambda_image = cfg.get_or("loss.lambda_image", out.weights.lambda_image)?;
    out.weights.lambda_weight = cfg.get_or("loss.lambda_weight", out.weights.lambda_weight)?;
    out.weights.r1_gamma = cfg.get_or("loss.r1_gamma", out.weights.r1_gamma)?;
    out.lazy_r1 = cfg.get_bool_or("loss.lazy_r1", out.lazy_r1)?;
    let aug_enabled = cfg.get_bool_or("aug.enabled", false)?;
    let max_shift = cfg.get_or("aug.max_shift", 0.125)?;
    out.aug = if aug_enabled {
        AugmentPolicy::new(max_shift)?
    } else {
        AugmentPolicy::disabled()
    };
    out.batch_size = cfg.get_or("batch_size", out.batch_size)?;
    out.max_iters = cfg.get_or("max_iters", out.max_iters)?;
    out.eval_every = cfg.get_or("eval_every", out.eval_every)?;
    out.eval_samples = cfg.get_or("eval_samples", out.eval_samples)?;
    out.seed = cfg.get_or("seed", out.seed)?;
    if let Some(v) = cfg.get("d_y_init") {
        out.d_y_init = v.parse()?;
    }
    out.lr = cfg.get_or("lr", out.lr)?;
    out.beta1 = cfg.get_or("beta1", out.beta1)?;
    out.beta2 = cfg.get_or("beta2", out.beta2)?;
    out.image_rotation_aug = cfg.get_bool_or("image_rotation_aug", out.image_rotation_aug)?;
    out.validate()?;
    Ok(out)
}

/// Render a TrainConfig back into the flat text format, so run directories
/// can snapshot exactly what they executed.
pub fn train_config_to_text(cfg: &TrainConfig) -> String {
    let mut s = String::new();
    let mut push = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    push("variant", cfg.variant.to_string());
    push("loss.lambda_image", cfg.weights.lambda_image.to_string());
    push("loss.lambda_weight", cfg.weights.lambda_weight.to_string());
    push("loss.r1_gamma", cfg.weights.r1_gamma.to_string());
    push("loss.lazy_r1", cfg.lazy_r1.to_string());
    push("aug.enabled", cfg.aug.enabled.to_string());
    push("aug.max_shift", cfg.aug.max_shift.to_string());
    push("batch_size", cfg.batch_size.to_string());
    push("max_iters", cfg.max_iters.to_string());
    push("eval_every", cfg.eval_every.to_string());
    push("eval_samples", cfg.eval_samples.to_string());
    push("seed", cfg.seed.to_string());
    push("d_y_init", cfg.d_y_init.to_string());
    push("lr", cfg.lr.to_string());
    push("beta1", cfg.beta1.to_string());
    push("beta2", cfg.beta2.to_string());
    push("image_rotation_aug", cfg.image_rotation_aug.to_string());
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TrainVariant;

    #[test]
    fn parses_comments_blank_lines_and_whitespace() {
        let cfg = ConfigMap::parse(
            "# run settings\n\n  lr = 0.01  # inline comment\nseed=3\n",
        )
        .unwrap();
        assert_eq!(cfg.get("lr").as_deref(), Some("0.01"));
        assert_eq!(cfg.get("seed").as_deref(), Some("3"));
        cfg.finish().unwrap();
    }

    #[test]
    fn unknown_keys_fail_fast() {
        let cfg = ConfigMap::parse("loss.lambda_imge = 0.7\n").unwrap();
        // The typo'd key is never consumed by the trainer mapping...
        train_config_from(&cfg).unwrap();
        // ...so the strictness gate names it.
        let err = cfg.finish().unwrap_err().to_string();
        assert!(err.contains("loss.lambda_imge"), "{err}");
    }

    #[test]
    fn duplicate_and_malformed_lines_are_rejected() {
        assert!(ConfigMap::parse("a = 1\na = 2\n").is_err());
        assert!(ConfigMap::parse("just some words\n").is_err());
        assert!(ConfigMap::parse("= 3\n").is_err());
    }

    #[test]
    fn train_config_roundtrips_through_text() {
        let mut cfg = TrainConfig::default();
        cfg.weights.lambda_weight = 100.0;
        cfg.lr = 0.0005;
        cfg.seed = 17;
        cfg.aug = AugmentPolicy::new(0.25).unwrap();
        cfg.variant = TrainVariant::WShift;
        let text = train_config_to_text(&cfg);
        let map = ConfigMap::parse(&text).unwrap();
        let back = train_config_from(&map).unwrap();
        map.finish().unwrap();
        assert_eq!(format!("{back:?}"), format!("{cfg:?}"));
    }

    #[test]
    fn defaults_fill_every_absent_key() {
        let map = ConfigMap::parse("").unwrap();
        let cfg = train_config_from(&map).unwrap();
        map.finish().unwrap();
        assert_eq!(format!("{cfg:?}"), format!("{:?}", TrainConfig::default()));
    }

    #[test]
    fn bad_values_name_the_key() {
        let map = ConfigMap::parse("batch_size = lots\n").unwrap();
        let err = train_config_from(&map).unwrap_err().to_string();
        assert!(err.contains("batch_size"), "{err}");

        let map = ConfigMap::parse("loss.lazy_r1 = yes\n").unwrap();
        let err = train_config_from(&map).unwrap_err().to_string();
        assert!(err.contains("lazy_r1"), "{err}");
    }

    #[test]
    fn invalid_combinations_are_caught_by_validation() {
        let map = ConfigMap::parse("max_iters = 10\neval_every = 100\n").unwrap();
        assert!(train_config_from(&map).is_err());
        let map = ConfigMap::parse("aug.enabled = true\naug.max_shift = 0.9\n").unwrap();
        assert!(train_config_from(&map).is_err());
    }

    #[test]
    fn missing_required_key_is_an_error() {
        let map = ConfigMap::parse("").unwrap();
        let err = map.require("ckpt").unwrap_err().to_string();
        assert!(err.contains("ckpt"), "{err}");
    }
}
