//! Flat `key = value` run configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use tsda::data::DatasetMeta;
use tsda::trainer::TrainConfig;

/// A parsed configuration file: training settings plus optional dataset paths.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    /// Keys present in the file.
    pub keys: BTreeSet<String>,
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "seed",
    "center_warmup_epochs",
    "lambda_domain",
    "lambda_margin",
    "lambda_dtw",
    "lambda_center",
    "alpha",
    "beta",
    "seq_len",
    "channels",
    "num_classes",
    "patch_len",
    "stride",
    "d_model",
    "transformer_layers",
    "transformer_heads",
    "kernel_sizes",
    "stages",
    "d_emb",
    "d_k",
    "d_v",
    "disc_hidden",
    "source",
    "target",
    "eval",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text)
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown or repeated
    /// keys are errors. Relative dataset paths are kept as written.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(format!("line {}: unknown key {key:?}", n + 1));
            }
            if !cfg.keys.insert(key.to_string()) {
                return Err(format!("line {}: duplicate key {key:?}", n + 1));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let t = &mut self.train;
        let m = &mut t.model;
        let w = &mut t.weights;
        match key {
            "epochs" => t.epochs = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "learning_rate" => t.learning_rate = parse_num(key, v)?,
            "seed" => t.seed = parse_num(key, v)?,
            "center_warmup_epochs" => t.center_warmup_epochs = parse_num(key, v)?,
            "lambda_domain" => w.lambda_domain = parse_num(key, v)?,
            "lambda_margin" => w.lambda_margin = parse_num(key, v)?,
            "lambda_dtw" => w.lambda_dtw = parse_num(key, v)?,
            "lambda_center" => w.lambda_center = parse_num(key, v)?,
            "alpha" => w.alpha = parse_num(key, v)?,
            "beta" => w.beta = parse_num(key, v)?,
            "seq_len" => m.seq_len = parse_num(key, v)?,
            "channels" => m.channels = parse_num(key, v)?,
            "num_classes" => m.num_classes = parse_num(key, v)?,
            "patch_len" => m.patch_len = parse_num(key, v)?,
            "stride" => m.stride = parse_num(key, v)?,
            "d_model" => m.d_model = parse_num(key, v)?,
            "transformer_layers" => m.transformer_layers = parse_num(key, v)?,
            "transformer_heads" => m.transformer_heads = parse_num(key, v)?,
            "kernel_sizes" => {
                m.kernel_sizes = v
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "stages" => m.stages = parse_num(key, v)?,
            "d_emb" => m.d_emb = parse_num(key, v)?,
            "d_k" => m.d_k = parse_num(key, v)?,
            "d_v" => m.d_v = parse_num(key, v)?,
            "disc_hidden" => m.disc_hidden = parse_num(key, v)?,
            "source" => self.source = Some(v.into()),
            "target" => self.target = Some(v.into()),
            "eval" => self.eval = Some(v.into()),
            _ => unreachable!("key list and match arms agree"),
        }
        Ok(())
    }

    /// Takes `T`, `d` and `C` from the dataset unless the file set them.
    pub fn fill_shape(&mut self, meta: &DatasetMeta) {
        let m = &mut self.train.model;
        if !self.keys.contains("seq_len") {
            m.seq_len = meta.seq_len;
        }
        if !self.keys.contains("channels") {
            m.channels = meta.channels;
        }
        if !self.keys.contains("num_classes") {
            m.num_classes = meta.num_classes;
        }
    }

    /// Zeroes the named loss weights (`domain`, `margin`, `dtw`, `center`).
    pub fn ablate(&mut self, names: &str) -> Result<(), String> {
        let w = &mut self.train.weights;
        for name in names.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "domain" => w.lambda_domain = 0.0,
                "margin" => w.lambda_margin = 0.0,
                "dtw" => w.lambda_dtw = 0.0,
                "center" => w.lambda_center = 0.0,
                other => {
                    return Err(format!(
                        "--ablate: unknown loss {other:?} (domain, margin, dtw, center)"
                    ))
                }
            }
        }
        Ok(())
    }
}
