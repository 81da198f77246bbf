//! Run manifests.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' anything
//! entry   := key ws* '=' ws* value
//! key     := section '.' name | name
//! ```
//!
//! Sections are `model`, `train` and `data`; top-level keys are `seed`,
//! `output_dir` and `eval`. Values are plain text with surrounding
//! whitespace trimmed. `eval` is a comma-separated list of
//! `T:overlap:mode` triples. Repeating a key keeps the last value.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::corpus::{Format, RawSplit};
use crate::model::{CarryMask, ModelConfig};
use crate::training::{Checkpointing, TrainConfig};
use crate::windowing::PlanMode;

pub const OUTPUT_DIR_ENV: &str = "WINREC_OUTPUT_DIR";

/// A configuration problem, located by line when it came from a file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub source: String,
    pub line: Option<usize>,
    pub field: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.source)?;
        if let Some(l) = self.line {
            write!(f, ":{l}")?;
        }
        if let Some(k) = &self.field {
            write!(f, ": field {k}")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalTriple {
    pub window: usize,
    pub overlap: usize,
    pub mode: PlanMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub format: Format,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: Vec<EvalTriple>,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig {
                train: None,
                val: None,
                test: None,
                format: Format::RawText(RawSplit::BlankLine),
            },
            eval: Vec::new(),
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

pub fn format_name(f: Format) -> &'static str {
    match f {
        Format::RawText(RawSplit::BlankLine) => "text",
        Format::RawText(RawSplit::PerFile) => "text-per-file",
        Format::TokenBinary => "binary",
    }
}

pub fn parse_format(s: &str) -> Result<Format, String> {
    match s {
        "text" => Ok(Format::RawText(RawSplit::BlankLine)),
        "text-per-file" => Ok(Format::RawText(RawSplit::PerFile)),
        "binary" => Ok(Format::TokenBinary),
        _ => Err(format!("expected text, text-per-file or binary, got {s:?}")),
    }
}

pub fn parse_mode(s: &str) -> Result<PlanMode, String> {
    PlanMode::parse(s).ok_or_else(|| format!("expected baseline or recurrent, got {s:?}"))
}

fn parse_triples(s: &str) -> Result<Vec<EvalTriple>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let parts: Vec<&str> = p.split(':').collect();
            let [t, o, m] = parts[..] else {
                return Err(format!("{p:?} is not T:overlap:mode"));
            };
            let window = t.parse().map_err(|_| format!("bad window in {p:?}"))?;
            let overlap = o.parse().map_err(|_| format!("bad overlap in {p:?}"))?;
            let mode = parse_mode(m)?;
            if overlap >= window {
                return Err(format!("{p:?}: overlap must be < T"));
            }
            Ok(EvalTriple {
                window,
                overlap,
                mode,
            })
        })
        .collect()
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        if let Some(k) = key.strip_prefix("model.") {
            return self.model.set(k, value).map_err(|e| {
                // ModelConfig prefixes its own field name
                e.split_once(": ").map_or(e.clone(), |(_, m)| m.to_string())
            });
        }
        let t = &mut self.train;
        match key {
            "seed" => self.seed = num(value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "eval" => self.eval = parse_triples(value)?,
            "data.train" => self.data.train = Some(PathBuf::from(value)),
            "data.val" => self.data.val = Some(PathBuf::from(value)),
            "data.test" => self.data.test = Some(PathBuf::from(value)),
            "data.format" => self.data.format = parse_format(value)?,
            "train.windows_per_sequence" => t.windows_per_sequence = num(value)?,
            "train.window" => t.window = num(value)?,
            "train.overlap" => t.overlap = num(value)?,
            "train.mode" => t.mode = parse_mode(value)?,
            "train.lr" => t.lr = num(value)?,
            "train.warmup_steps" => t.warmup_steps = num(value)?,
            "train.epochs" => t.epochs = num(value)?,
            "train.validate_every_tokens" => t.validate_every_tokens = num(value)?,
            "train.max_steps" => {
                t.max_steps = match value {
                    "none" => None,
                    v => Some(num(v)?),
                }
            }
            "train.checkpointing" => {
                t.checkpointing = match value {
                    "full" => Checkpointing::Full,
                    "bottleneck" => Checkpointing::Bottleneck,
                    _ => return Err(format!("expected full or bottleneck, got {value:?}")),
                }
            }
            "train.clip_norm" => {
                t.clip_norm = match value {
                    "none" | "off" => None,
                    v => Some(num(v)?),
                }
            }
            "train.batch_size" => t.batch_size = num(value)?,
            "train.beta1" => t.adam.beta1 = num(value)?,
            "train.beta2" => t.adam.beta2 = num(value)?,
            "train.adam_eps" => t.adam.eps = num(value)?,
            "train.mask_carry" => {
                t.mask = if parse_bool(value)? {
                    CarryMask::Masked
                } else {
                    CarryMask::Visible
                }
            }
            "train.record_wallclock" => t.record_wallclock = parse_bool(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |field: Option<&str>, message: String| ConfigError {
                source: source.to_string(),
                line: Some(i + 1),
                field: field.map(str::to_string),
                message,
            };
            let Some((k, v)) = line.split_once('=') else {
                return Err(err(None, format!("expected key = value, got {line:?}")));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err(None, "empty key".into()));
            }
            cfg.set(k, v).map_err(|m| err(Some(k), m))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            source: path.display().to_string(),
            line: None,
            field: None,
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies `key=value` command-line overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for o in overrides {
            let err = |field: Option<&str>, message: String| ConfigError {
                source: "--set".into(),
                line: None,
                field: field.map(str::to_string),
                message,
            };
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| err(None, format!("expected key=value, got {o:?}")))?;
            self.set(k.trim(), v.trim()).map_err(|m| err(Some(k.trim()), m))?;
        }
        Ok(())
    }

    /// Semantic checks that need the whole file. `need_data` lists the
    /// data fields the calling command requires.
    pub fn validate(&self, need_data: &[&str]) -> Result<(), ConfigError> {
        let err = |field: &str, message: String| ConfigError {
            source: "config".into(),
            line: None,
            field: Some(field.to_string()),
            message,
        };
        for &f in need_data {
            let p = match f {
                "data.train" => &self.data.train,
                "data.val" => &self.data.val,
                "data.test" => &self.data.test,
                _ => unreachable!("unknown data field {f}"),
            };
            match p {
                None => return Err(err(f, "missing".into())),
                Some(p) if !p.exists() => {
                    return Err(err(f, format!("path {} does not exist", p.display())))
                }
                _ => {}
            }
        }
        self.model
            .validate()
            .map_err(|e| err("model", e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| err("train", e.to_string()))?;
        if self.train.window > self.model.max_positions {
            return Err(err(
                "train.window",
                format!("exceeds model.max_positions {}", self.model.max_positions),
            ));
        }
        for t in &self.eval {
            if t.overlap >= t.window || t.window > self.model.max_positions {
                return Err(err(
                    "eval",
                    format!(
                        "{}:{} needs overlap < window <= model.max_positions {}",
                        t.window, t.overlap, self.model.max_positions
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Resolved manifest in the same grammar, so a run can be repeated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        put("seed", self.seed.to_string());
        put("output_dir", self.output_dir.display().to_string());
        for k in ModelConfig::KEYS {
            put(&format!("model.{k}"), self.model.get(k).unwrap());
        }
        let t = &self.train;
        put("train.windows_per_sequence", t.windows_per_sequence.to_string());
        put("train.window", t.window.to_string());
        put("train.overlap", t.overlap.to_string());
        put("train.mode", t.mode.as_str().into());
        put("train.lr", format!("{:?}", t.lr));
        put("train.warmup_steps", t.warmup_steps.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.validate_every_tokens", t.validate_every_tokens.to_string());
        put("train.max_steps", t.max_steps.map_or("none".into(), |s| s.to_string()));
        put(
            "train.checkpointing",
            match t.checkpointing {
                Checkpointing::Full => "full".into(),
                Checkpointing::Bottleneck => "bottleneck".into(),
            },
        );
        put("train.clip_norm", t.clip_norm.map_or("none".into(), |c| format!("{c:?}")));
        put("train.batch_size", t.batch_size.to_string());
        put("train.beta1", format!("{:?}", t.adam.beta1));
        put("train.beta2", format!("{:?}", t.adam.beta2));
        put("train.adam_eps", format!("{:?}", t.adam.eps));
        put("train.mask_carry", (t.mask == CarryMask::Masked).to_string());
        put("train.record_wallclock", t.record_wallclock.to_string());
        put("data.format", format_name(self.data.format).into());
        for (k, p) in [("data.train", &self.data.train), ("data.val", &self.data.val), ("data.test", &self.data.test)] {
            if let Some(p) = p {
                put(k, p.display().to_string());
            }
        }
        if !self.eval.is_empty() {
            let e: Vec<String> = self
                .eval
                .iter()
                .map(|e| format!("{}:{}:{}", e.window, e.overlap, e.mode.as_str()))
                .collect();
            put("eval", e.join(","));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_lines() {
        let text = "# run\nseed = 7\nmodel.hidden = 16\n\ntrain.lr = 3e-4\neval = 64:0:recurrent, 64:8:baseline\n";
        let c = RunConfig::parse(text, "run.cfg").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.hidden, 16);
        assert_eq!(c.train.lr, 3e-4);
        assert_eq!(c.eval.len(), 2);
        assert_eq!(c.eval[1].overlap, 8);

        let e = RunConfig::parse("seed = 1\ntrain.lr = fast\n", "run.cfg").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert_eq!(e.field.as_deref(), Some("train.lr"));
        assert!(e.to_string().starts_with("run.cfg:2: field train.lr"));

        let e = RunConfig::parse("bogus.key = 1\n", "r").unwrap_err();
        assert_eq!(e.field.as_deref(), Some("bogus.key"));
        assert!(RunConfig::parse("no equals sign\n", "r").is_err());
        assert!(RunConfig::parse("eval = 8:8:baseline\n", "r").is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["train.clip_norm=none".into(), "model.gelu=tanh".into(), "eval=32:4:baseline".into()])
            .unwrap();
        c.data.train = Some("a b".into());
        let back = RunConfig::parse(&c.to_text(), "x").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn validation_names_missing_field() {
        let c = RunConfig::default();
        let e = c.validate(&["data.train"]).unwrap_err();
        assert_eq!(e.field.as_deref(), Some("data.train"));
        let mut c = RunConfig::default();
        c.data.train = Some("/definitely/not/here".into());
        assert!(c.validate(&["data.train"]).unwrap_err().message.contains("does not exist"));
    }
}
