//! Configuration resolution. Every knob can come from a command-line flag
//! or a flat key=value file; a flag wins over the file, the file wins over
//! the built-in default.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use abfp::error::{AbfpError, Result};
use abfp::finetune::{LayerSelection, Method};
use abfp::quant::QuantSpec;

const KNOWN_KEYS: &[&str] = &[
    "checkpoint",
    "tiles",
    "gains",
    "bits",
    "noise-lsb",
    "seed",
    "reps",
    "out",
    "method",
    "epochs",
    "batch",
    "lr",
    "momentum",
    "weight-decay",
    "select-layers",
    "hist-dir",
    "rows",
    "cols",
    "samples",
    "bins",
];

pub struct FileConfig {
    map: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let mut map = HashMap::new();
        let Some(path) = path else {
            return Ok(FileConfig { map });
        };
        let text = fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(AbfpError::InvalidParam(format!(
                    "config line {}: expected key=value, got {line:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(AbfpError::InvalidParam(format!(
                    "config line {}: unknown key {key:?}",
                    lineno + 1
                )));
            }
            map.insert(key.to_string(), value.trim().to_string());
        }
        Ok(FileConfig { map })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        debug_assert!(KNOWN_KEYS.contains(&key));
        self.map.get(key).map(String::as_str)
    }
}

/// flag > file > default, then parse.
fn resolve<'a>(cli: Option<&'a str>, file: &'a FileConfig, key: &str, default: &'a str) -> &'a str {
    cli.or_else(|| file.get(key)).unwrap_or(default)
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| AbfpError::InvalidParam(format!("{what}: cannot parse {s:?}")))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    let items = s
        .split(',')
        .map(|p| parse(p.trim(), what))
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(AbfpError::InvalidParam(format!("{what}: empty list")));
    }
    Ok(items)
}

pub fn parse_bits(s: &str) -> Result<QuantSpec> {
    let parts: Vec<&str> = s.split('/').collect();
    let [w, x, y] = parts.as_slice() else {
        return Err(AbfpError::InvalidParam(format!(
            "bits: expected bW/bX/bY, got {s:?}"
        )));
    };
    QuantSpec::new(parse(w, "bits")?, parse(x, "bits")?, parse(y, "bits")?)
}

pub fn parse_selection(s: &str) -> Result<LayerSelection> {
    match s {
        "all" => Ok(LayerSelection::All),
        "none" => Ok(LayerSelection::None),
        _ => {
            let Some(k) = s.strip_prefix("top:") else {
                return Err(AbfpError::InvalidParam(format!(
                    "select-layers: expected all, none, or top:K, got {s:?}"
                )));
            };
            Ok(LayerSelection::TopK(parse(k, "select-layers")?))
        }
    }
}

pub fn parse_method(s: &str) -> Result<Method> {
    match s {
        "qat" => Ok(Method::Qat),
        "dnf" => Ok(Method::Dnf),
        _ => Err(AbfpError::InvalidParam(format!(
            "method: expected qat or dnf, got {s:?}"
        ))),
    }
}

/// Everything a command might need, fully resolved and validated.
pub struct Settings {
    pub checkpoint: Option<PathBuf>,
    pub tiles: Vec<usize>,
    pub gains: Vec<f64>,
    pub quant: QuantSpec,
    pub noise_lsb: Vec<f64>,
    pub seed: u64,
    pub reps: usize,
    pub out: PathBuf,
    pub method: Option<Method>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub selection: LayerSelection,
    pub hist_dir: Option<PathBuf>,
    /// appendix tensor scale, config-file overridable for quick runs
    pub rows: usize,
    pub cols: usize,
    pub samples: usize,
    pub bins: usize,
}

/// Per-command defaults for the few keys whose natural value differs.
pub struct Defaults {
    pub noise_lsb: &'static str,
    pub out: &'static str,
    pub reps: &'static str,
}

pub struct RawArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub tiles: Option<&'a str>,
    pub gains: Option<&'a str>,
    pub bits: Option<&'a str>,
    pub noise_lsb: Option<&'a str>,
    pub seed: Option<&'a str>,
    pub reps: Option<&'a str>,
    pub out: Option<&'a Path>,
    pub method: Option<&'a str>,
    pub epochs: Option<&'a str>,
    pub batch: Option<&'a str>,
    pub lr: Option<&'a str>,
    pub select_layers: Option<&'a str>,
    pub hist_dir: Option<&'a Path>,
}

pub fn build_settings(raw: &RawArgs, file: &FileConfig, defaults: &Defaults) -> Result<Settings> {
    let tiles: Vec<usize> =
        parse_list(resolve(raw.tiles, file, "tiles", "8,32,128"), "tiles")?;
    if tiles.iter().any(|&t| t == 0) {
        return Err(AbfpError::InvalidParam("tiles must be at least 1".into()));
    }
    let gains: Vec<f64> =
        parse_list(resolve(raw.gains, file, "gains", "1,2,4,8,16"), "gains")?;
    if gains.iter().any(|&g| !(g >= 1.0) || !g.is_finite()) {
        return Err(AbfpError::InvalidParam("gains must be finite and at least 1".into()));
    }
    let noise_lsb: Vec<f64> = parse_list(
        resolve(raw.noise_lsb, file, "noise-lsb", defaults.noise_lsb),
        "noise-lsb",
    )?;
    if noise_lsb.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(AbfpError::InvalidParam("noise-lsb widths must be nonnegative".into()));
    }
    let checkpoint = raw
        .checkpoint
        .map(Path::to_path_buf)
        .or_else(|| file.get("checkpoint").map(PathBuf::from));
    let hist_dir = raw
        .hist_dir
        .map(Path::to_path_buf)
        .or_else(|| file.get("hist-dir").map(PathBuf::from));
    let method = match raw.method.or_else(|| file.get("method")) {
        Some(m) => Some(parse_method(m)?),
        None => None,
    };
    Ok(Settings {
        checkpoint,
        tiles,
        gains,
        quant: parse_bits(resolve(raw.bits, file, "bits", "8/8/8"))?,
        noise_lsb,
        seed: parse(resolve(raw.seed, file, "seed", "4"), "seed")?,
        reps: parse(resolve(raw.reps, file, "reps", defaults.reps), "reps")?,
        out: PathBuf::from(resolve(
            raw.out.and_then(Path::to_str),
            file,
            "out",
            defaults.out,
        )),
        method,
        epochs: parse(resolve(raw.epochs, file, "epochs", "20"), "epochs")?,
        batch: parse(resolve(raw.batch, file, "batch", "16"), "batch")?,
        lr: parse(resolve(raw.lr, file, "lr", "0.1"), "lr")?,
        momentum: parse(resolve(None, file, "momentum", "0.9"), "momentum")?,
        weight_decay: parse(resolve(None, file, "weight-decay", "0"), "weight-decay")?,
        selection: parse_selection(resolve(raw.select_layers, file, "select-layers", "all"))?,
        hist_dir,
        rows: parse(resolve(None, file, "rows", "768"), "rows")?,
        cols: parse(resolve(None, file, "cols", "768"), "cols")?,
        samples: parse(resolve(None, file, "samples", "400"), "samples")?,
        bins: parse(resolve(None, file, "bins", "100"), "bins")?,
    })
}
