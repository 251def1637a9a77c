//! Run configuration: built-in defaults, an optional flat `key = value`
//! config file, and command-line overrides, resolved in that order of
//! increasing precedence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{CdlError, Result};
use crate::metrics::CostModel;
use crate::network::{LayerSpec, NetworkSpec};

/// Which base topology to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Table1,
    Table2,
    Custom,
}

impl std::str::FromStr for Arch {
    type Err = CdlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Arch::Table1),
            "table2" => Ok(Arch::Table2),
            "custom" => Ok(Arch::Custom),
            other => Err(CdlError::Config(format!(
                "unknown architecture '{other}' (expected table1, table2 or custom)"
            ))),
        }
    }
}

/// Everything a command needs, fully resolved.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub arch: Arch,
    pub spec_file: Option<PathBuf>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Runtime confidence threshold.
    pub delta: f64,
    /// Routing threshold used while building the cascade.
    pub train_delta: f64,
    /// Stage admission threshold.
    pub epsilon: f64,
    pub cost_model: CostModel,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Arch::Table2,
            spec_file: None,
            seed: 7,
            epochs: 20,
            batch_size: 50,
            learning_rate: 1.0,
            delta: 0.5,
            train_delta: 0.6,
            epsilon: 0.0,
            cost_model: CostModel::default(),
            data_dir: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Unresolved overrides coming from the command line; `None` means "not
/// given, fall through to the config file and then the default".
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub arch: Option<Arch>,
    pub spec_file: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub delta: Option<f64>,
    pub train_delta: Option<f64>,
    pub epsilon: Option<f64>,
    pub w_mac: Option<f64>,
    pub w_compare: Option<f64>,
    pub w_nonlinearity: Option<f64>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Parses the flat config file format: one `key = value` pair per line,
/// `#` starts a comment, keys mirror the long flag names.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| CdlError::io(path, e))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CdlError::Config(format!(
                "{}:{}: expected 'key = value', got '{raw}'",
                path.display(),
                lineno + 1
            ))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_key<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|e| CdlError::Config(format!("bad value for '{key}': {raw} ({e})"))),
    }
}

const KNOWN_KEYS: &[&str] = &[
    "arch",
    "spec-file",
    "seed",
    "epochs",
    "batch-size",
    "learning-rate",
    "delta",
    "delta-train",
    "epsilon",
    "w-mac",
    "w-compare",
    "w-nonlinearity",
    "data-dir",
    "out",
];

/// Resolves the final configuration: command-line overrides win over config
/// file entries, which win over built-in defaults. The `CDL_DATA_DIR`
/// environment variable supplies the data directory when nothing else does.
pub fn resolve(config_file: Option<&Path>, cli: &Overrides) -> Result<RunConfig> {
    let file = match config_file {
        Some(path) => parse_config_file(path)?,
        None => BTreeMap::new(),
    };
    if let Some(unknown) = file.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
        return Err(CdlError::Config(format!("unknown config key '{unknown}'")));
    }

    let defaults = RunConfig::default();
    let arch = match (&cli.arch, file.get("arch")) {
        (Some(a), _) => *a,
        (None, Some(raw)) => raw.parse()?,
        (None, None) => defaults.arch,
    };
    let config = RunConfig {
        arch,
        spec_file: cli
            .spec_file
            .clone()
            .or_else(|| file.get("spec-file").map(PathBuf::from)),
        seed: cli.seed.or(parse_key(&file, "seed")?).unwrap_or(defaults.seed),
        epochs: cli.epochs.or(parse_key(&file, "epochs")?).unwrap_or(defaults.epochs),
        batch_size: cli
            .batch_size
            .or(parse_key(&file, "batch-size")?)
            .unwrap_or(defaults.batch_size),
        learning_rate: cli
            .learning_rate
            .or(parse_key(&file, "learning-rate")?)
            .unwrap_or(defaults.learning_rate),
        delta: cli.delta.or(parse_key(&file, "delta")?).unwrap_or(defaults.delta),
        train_delta: cli
            .train_delta
            .or(parse_key(&file, "delta-train")?)
            .unwrap_or(defaults.train_delta),
        epsilon: cli.epsilon.or(parse_key(&file, "epsilon")?).unwrap_or(defaults.epsilon),
        cost_model: CostModel {
            mac: cli.w_mac.or(parse_key(&file, "w-mac")?).unwrap_or(1.0),
            compare: cli.w_compare.or(parse_key(&file, "w-compare")?).unwrap_or(1.0),
            nonlinearity: cli
                .w_nonlinearity
                .or(parse_key(&file, "w-nonlinearity")?)
                .unwrap_or(1.0),
        },
        data_dir: cli
            .data_dir
            .clone()
            .or_else(|| file.get("data-dir").map(PathBuf::from))
            .or_else(|| std::env::var_os("CDL_DATA_DIR").map(PathBuf::from)),
        out_dir: cli
            .out_dir
            .clone()
            .or_else(|| file.get("out").map(PathBuf::from))
            .unwrap_or(defaults.out_dir),
    };
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CdlError::Config("batch-size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CdlError::Config(format!(
                "learning-rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.train_delta > 0.0 && self.train_delta < 1.0) {
            return Err(CdlError::Config(format!(
                "delta-train must lie in (0, 1), got {}",
                self.train_delta
            )));
        }
        if !(self.delta >= 0.0) {
            return Err(CdlError::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        self.cost_model
            .validate()
            .map_err(|e| CdlError::Config(e.to_string()))?;
        if self.arch == Arch::Custom && self.spec_file.is_none() {
            return Err(CdlError::Config(
                "--arch custom requires --spec-file <path>".into(),
            ));
        }
        Ok(())
    }

    /// The topology selected by `arch`, loading and parsing the custom spec
    /// file when requested.
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        match self.arch {
            Arch::Table1 => Ok(NetworkSpec::table1()),
            Arch::Table2 => Ok(NetworkSpec::table2()),
            Arch::Custom => {
                let path = self
                    .spec_file
                    .as_ref()
                    .ok_or_else(|| CdlError::Config("--arch custom requires --spec-file <path>".into()))?;
                parse_spec_file(path)
            }
        }
    }

    /// Data directory, required by commands that read the dataset.
    pub fn require_data_dir(&self) -> Result<&Path> {
        self.data_dir.as_deref().ok_or_else(|| {
            CdlError::Config("no data directory: pass --data-dir, set data-dir in the config file, or export CDL_DATA_DIR".into())
        })
    }
}

/// Parses a custom topology file. Format, one entry per line:
///
/// ```text
/// input = 1x28x28
/// classes = 10
/// layer = conv k=5 maps=6
/// layer = pool s=2
/// layer = fc units=10
/// ```
pub fn parse_spec_file(path: &Path) -> Result<NetworkSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| CdlError::io(path, e))?;
    let mut input_shape: Option<[usize; 3]> = None;
    let mut class_count: Option<usize> = None;
    let mut layers = Vec::new();
    let bad = |lineno: usize, msg: String| CdlError::Config(format!("{}:{}: {msg}", path.display(), lineno + 1));
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(lineno, format!("expected 'key = value', got '{raw}'")))?;
        let value = value.trim();
        match key.trim() {
            "input" => {
                let dims: Vec<usize> = value
                    .split('x')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(lineno, format!("bad input shape '{value}' ({e})")))?;
                match dims.as_slice() {
                    [m, h, w] => input_shape = Some([*m, *h, *w]),
                    _ => return Err(bad(lineno, format!("input shape needs MxHxW, got '{value}'"))),
                }
            }
            "classes" => {
                class_count = Some(
                    value
                        .parse()
                        .map_err(|e| bad(lineno, format!("bad class count '{value}' ({e})")))?,
                );
            }
            "layer" => {
                let mut parts = value.split_whitespace();
                let kind = parts.next().unwrap_or("");
                let mut fields = BTreeMap::new();
                for part in parts {
                    let (k, v) = part
                        .split_once('=')
                        .ok_or_else(|| bad(lineno, format!("bad layer field '{part}'")))?;
                    let v: usize = v
                        .parse()
                        .map_err(|e| bad(lineno, format!("bad layer field '{part}' ({e})")))?;
                    fields.insert(k.to_string(), v);
                }
                let get = |name: &str| {
                    fields
                        .get(name)
                        .copied()
                        .ok_or_else(|| bad(lineno, format!("{kind} layer needs {name}=<n>")))
                };
                layers.push(match kind {
                    "conv" => LayerSpec::Conv {
                        kernel: get("k")?,
                        out_maps: get("maps")?,
                    },
                    "pool" => LayerSpec::Pool { window: get("s")? },
                    "fc" => LayerSpec::FullyConnected { out_units: get("units")? },
                    other => return Err(bad(lineno, format!("unknown layer kind '{other}'"))),
                });
            }
            other => return Err(bad(lineno, format!("unknown key '{other}'"))),
        }
    }
    let spec = NetworkSpec {
        input_shape: input_shape.ok_or_else(|| CdlError::Config(format!("{}: missing 'input'", path.display())))?,
        layers,
        class_count: class_count.ok_or_else(|| CdlError::Config(format!("{}: missing 'classes'", path.display())))?,
    };
    spec.resolve()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(name: &str, content: &str) -> PathBuf {
        let path = std::env::temp_dir().join(format!("cdl-config-test-{name}-{}", std::process::id()));
        std::fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn defaults_apply_without_file_or_flags() {
        let config = resolve(None, &Overrides::default()).unwrap();
        assert_eq!(config.epochs, RunConfig::default().epochs);
        assert_eq!(config.delta, 0.5);
        assert_eq!(config.train_delta, 0.6);
        assert!(config.cost_model.is_unit());
    }

    #[test]
    fn file_overrides_defaults_and_flags_override_file() {
        let path = write_tmp(
            "prec",
            "epochs = 3\nseed = 99\ndelta = 0.7\narch = table1\n",
        );
        // File beats default.
        let from_file = resolve(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(from_file.epochs, 3);
        assert_eq!(from_file.seed, 99);
        assert_eq!(from_file.delta, 0.7);
        assert_eq!(from_file.arch, Arch::Table1);
        // Flag beats file; untouched keys still come from the file.
        let cli = Overrides {
            epochs: Some(8),
            delta: Some(0.4),
            ..Overrides::default()
        };
        let merged = resolve(Some(&path), &cli).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(merged.epochs, 8);
        assert_eq!(merged.delta, 0.4);
        assert_eq!(merged.seed, 99);
        assert_eq!(merged.arch, Arch::Table1);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let path = write_tmp("unknown", "epoch = 3\n");
        let err = resolve(Some(&path), &Overrides::default()).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(err.to_string().contains("unknown config key 'epoch'"));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let path = write_tmp("comments", "# a comment\n\nepochs = 5 # trailing\n");
        let map = parse_config_file(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(map.get("epochs").map(String::as_str), Some("5"));
    }

    #[test]
    fn bad_train_delta_is_rejected() {
        let cli = Overrides {
            train_delta: Some(1.2),
            ..Overrides::default()
        };
        assert!(resolve(None, &cli).is_err());
    }

    #[test]
    fn epsilon_accepts_infinities() {
        let cli = Overrides {
            epsilon: Some(f64::INFINITY),
            ..Overrides::default()
        };
        assert_eq!(resolve(None, &cli).unwrap().epsilon, f64::INFINITY);
    }

    #[test]
    fn custom_arch_requires_spec_file() {
        let cli = Overrides {
            arch: Some(Arch::Custom),
            ..Overrides::default()
        };
        assert!(resolve(None, &cli).is_err());
    }

    #[test]
    fn parses_custom_spec_file() {
        let path = write_tmp(
            "spec",
            "input = 1x28x28\nclasses = 10\nlayer = conv k=5 maps=6\nlayer = pool s=2\nlayer = conv k=5 maps=12\nlayer = pool s=2\nlayer = fc units=10\n",
        );
        let spec = parse_spec_file(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(spec, NetworkSpec::table1());
    }

    #[test]
    fn custom_spec_must_resolve() {
        let path = write_tmp(
            "badspec",
            "input = 1x28x28\nclasses = 10\nlayer = conv k=5 maps=6\nlayer = pool s=5\nlayer = fc units=10\n",
        );
        assert!(parse_spec_file(&path).is_err());
        std::fs::remove_file(&path).ok();
    }
}
