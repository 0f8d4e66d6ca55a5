//! Run configuration: plain `key = value` text files.
//!
//! Required keys: `k`, `lr`, `epochs`. Everything else has the documented
//! default. Unknown keys are rejected so typos fail loudly. `#` starts a
//! comment.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::manifold::{CurvatureSign, FreeFactor, ProductManifold, RestrictedFactor};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {0}: expected `key = value`, got {1:?}")]
    Malformed(usize, String),
    #[error("missing required config key `{0}`")]
    MissingKey(&'static str),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {message}")]
    BadValue { key: String, message: String },
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Number of clusters.
    pub k: usize,
    /// Number of restricted factors M.
    pub m_factors: usize,
    /// Spatial dimension of each restricted factor.
    pub dims: Vec<usize>,
    /// Curvature sign (+1 or -1) of each restricted factor.
    pub signs: Vec<i64>,
    /// Free factor dimension; must exceed 1.
    pub d0: usize,
    /// Ricci mass-retention parameter in [0, 1).
    pub lambda: f64,
    /// Weight of the inter-cluster density inside the Ricci loss.
    pub alpha0: f64,
    /// Weight of the curvature-consistency loss.
    pub alpha1: f64,
    /// Weight of the contrastive loss.
    pub alpha2: f64,
    /// Dual-reweighting exponent; positive integer.
    pub beta: u32,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Adam first/second moment decay and epsilon.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Scale feature rows to sum to 1 before encoding.
    pub normalize_features: bool,
    /// Let gradients flow through the dual-reweighting factor (ablation).
    pub reweight_grad: bool,
    /// Hidden width of the curvature-estimation MLP.
    pub mlp_hidden: usize,
}

impl TrainConfig {
    /// Defaults for every key except the required `k`, `lr`, `epochs`.
    pub fn with_required(k: usize, lr: f64, epochs: usize) -> Self {
        Self {
            k,
            m_factors: 3,
            dims: vec![32, 16, 16],
            signs: vec![-1, -1, 1],
            d0: 32,
            lambda: 0.5,
            alpha0: 1.0,
            alpha1: 1.0,
            alpha2: 1.0,
            beta: 2,
            lr,
            epochs,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            normalize_features: false,
            reweight_grad: false,
            mlp_hidden: 16,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed(lineno + 1, raw.to_string()));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }

        const KNOWN: [&str; 19] = [
            "k", "m_factors", "dims", "signs", "d0", "lambda", "alpha0", "alpha1", "alpha2",
            "beta", "lr", "epochs", "seed", "beta1", "beta2", "eps", "normalize_features",
            "reweight_grad", "mlp_hidden",
        ];
        for key in map.keys() {
            if !KNOWN.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }

        fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            map.get(key)
                .map(|v| {
                    v.parse::<T>().map_err(|e| ConfigError::BadValue {
                        key: key.to_string(),
                        message: e.to_string(),
                    })
                })
                .transpose()
        }
        fn parse_list<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<Vec<T>>, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            map.get(key)
                .map(|v| {
                    v.split(',')
                        .map(|t| {
                            t.trim().parse::<T>().map_err(|e| ConfigError::BadValue {
                                key: key.to_string(),
                                message: e.to_string(),
                            })
                        })
                        .collect()
                })
                .transpose()
        }

        let k = parse::<usize>(&map, "k")?.ok_or(ConfigError::MissingKey("k"))?;
        let lr = parse::<f64>(&map, "lr")?.ok_or(ConfigError::MissingKey("lr"))?;
        let epochs = parse::<usize>(&map, "epochs")?.ok_or(ConfigError::MissingKey("epochs"))?;

        let mut cfg = Self::with_required(k, lr, epochs);
        if let Some(v) = parse::<usize>(&map, "m_factors")? {
            cfg.m_factors = v;
            // shrink or grow the defaults unless dims/signs are given too
            cfg.dims = default_dims(v);
            cfg.signs = default_signs(v);
        }
        if let Some(v) = parse_list::<usize>(&map, "dims")? {
            cfg.dims = v;
        }
        if let Some(v) = parse_list::<i64>(&map, "signs")? {
            cfg.signs = v;
        }
        if let Some(v) = parse::<usize>(&map, "d0")? {
            cfg.d0 = v;
        }
        if let Some(v) = parse::<f64>(&map, "lambda")? {
            cfg.lambda = v;
        }
        if let Some(v) = parse::<f64>(&map, "alpha0")? {
            cfg.alpha0 = v;
        }
        if let Some(v) = parse::<f64>(&map, "alpha1")? {
            cfg.alpha1 = v;
        }
        if let Some(v) = parse::<f64>(&map, "alpha2")? {
            cfg.alpha2 = v;
        }
        if let Some(v) = parse::<u32>(&map, "beta")? {
            cfg.beta = v;
        }
        if let Some(v) = parse::<u64>(&map, "seed")? {
            cfg.seed = v;
        }
        if let Some(v) = parse::<f64>(&map, "beta1")? {
            cfg.beta1 = v;
        }
        if let Some(v) = parse::<f64>(&map, "beta2")? {
            cfg.beta2 = v;
        }
        if let Some(v) = parse::<f64>(&map, "eps")? {
            cfg.eps = v;
        }
        if let Some(v) = parse::<bool>(&map, "normalize_features")? {
            cfg.normalize_features = v;
        }
        if let Some(v) = parse::<bool>(&map, "reweight_grad")? {
            cfg.reweight_grad = v;
        }
        if let Some(v) = parse::<usize>(&map, "mlp_hidden")? {
            cfg.mlp_hidden = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: String| Err(ConfigError::BadValue { key: key.into(), message });
        if self.k == 0 {
            return bad("k", "must be positive".into());
        }
        if self.d0 <= 1 {
            return bad("d0", "free factor dimension must exceed 1".into());
        }
        if self.dims.len() != self.m_factors {
            return bad("dims", format!("expected {} entries, got {}", self.m_factors, self.dims.len()));
        }
        if self.signs.len() != self.m_factors {
            return bad("signs", format!("expected {} entries, got {}", self.m_factors, self.signs.len()));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return bad("dims", "factor dimensions must be positive".into());
        }
        if self.signs.iter().any(|s| !matches!(s, -1 | 1)) {
            return bad("signs", "signs must be -1 or 1".into());
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return bad("lambda", format!("must lie in [0, 1), got {}", self.lambda));
        }
        if self.beta == 0 {
            return bad("beta", "must be a positive integer".into());
        }
        if self.lr <= 0.0 {
            return bad("lr", "must be positive".into());
        }
        for (key, v) in [("alpha0", self.alpha0), ("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if v < 0.0 {
                return bad(key, "must be nonnegative".into());
            }
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(key, format!("must lie in [0, 1), got {v}"));
            }
        }
        if self.eps <= 0.0 {
            return bad("eps", "must be positive".into());
        }
        if self.mlp_hidden == 0 {
            return bad("mlp_hidden", "must be positive".into());
        }
        Ok(())
    }

    /// Fresh product manifold with this signature, magnitudes at 1.
    pub fn manifold(&self) -> ProductManifold {
        let restricted = self
            .dims
            .iter()
            .zip(&self.signs)
            .map(|(&dim, &sign)| {
                RestrictedFactor::new(
                    CurvatureSign::from_int(sign).expect("validated sign"),
                    dim,
                    1.0,
                )
            })
            .collect();
        ProductManifold::new(FreeFactor::new(self.d0), restricted)
    }
}

fn default_dims(m: usize) -> Vec<usize> {
    // first restricted factor mirrors the free width, the rest halve it
    (0..m).map(|i| if i == 0 { 32 } else { 16 }).collect()
}

fn default_signs(m: usize) -> Vec<i64> {
    // hyperbolic-leaning mix with one spherical factor at the end
    (0..m).map(|i| if i + 1 == m && m > 1 { 1 } else { -1 }).collect()
}
