//! Experiment configuration: one validated record holding every knob, a flat
//! `key = value` file format for provenance, and three-layer resolution
//! (built-in defaults, then config file, then command-line overrides).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::patching::{PatchPlan, PatchSpec, WindowSpec};
use crate::ssm::MambaDims;

/// Which pieces of the architecture are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Cross-variate global scan plus cross-attention fusion.
    Full,
    /// Global scan runs per variate; no cross-variate concatenation.
    NoCrossVariate,
    /// Cross-attention removed; pooled context is concatenated with the
    /// flattened local features ahead of an enlarged head.
    NoCrossAttention,
    /// Both modifications.
    Neither,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::Full, Variant::NoCrossVariate, Variant::NoCrossAttention, Variant::Neither];

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "full" => Ok(Variant::Full),
            "no_cross_variate" => Ok(Variant::NoCrossVariate),
            "no_cross_attention" => Ok(Variant::NoCrossAttention),
            "neither" => Ok(Variant::Neither),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCrossVariate => "no_cross_variate",
            Variant::NoCrossAttention => "no_cross_attention",
            Variant::Neither => "neither",
        }
    }

    pub fn uses_cross_variate_scan(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoCrossAttention)
    }

    pub fn uses_cross_attention(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoCrossVariate)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub data_dir: Option<String>,
    pub horizon: usize,
    pub lookback: usize,
    pub local_window: usize,
    pub pl_g: usize,
    pub str_g: usize,
    pub pl_l: usize,
    pub str_l: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_local_layers: usize,
    pub n_mamba_layers: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub ffn_width: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub variant: Variant,
    pub instance_norm: bool,
    pub out_dir: String,
    pub train_stride: usize,
    pub eval_stride: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: "etth1".into(),
            data_dir: None,
            horizon: 96,
            lookback: 336,
            local_window: 168,
            pl_g: 48,
            str_g: 16,
            pl_l: 16,
            str_l: 8,
            d_model: 64,
            n_heads: 4,
            n_local_layers: 2,
            n_mamba_layers: 2,
            d_state: 16,
            expand: 2,
            d_conv: 4,
            ffn_width: 128,
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            seed: 1,
            variant: Variant::Full,
            instance_norm: true,
            out_dir: "runs".into(),
            train_stride: 1,
            eval_stride: 1,
        }
    }
}

/// Shorter windows and finer patches used for the exchange-rate dataset
/// unless explicitly overridden.
const EXCHANGE_BLOCK: [(&str, &str); 6] = [
    ("lookback", "192"),
    ("local_window", "96"),
    ("pl_g", "16"),
    ("str_g", "8"),
    ("pl_l", "4"),
    ("str_l", "2"),
];

impl ExperimentConfig {
    pub fn dataset_kind(&self) -> DatasetKind {
        DatasetKind::from_name(&self.dataset)
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            lookback: self.lookback,
            local_window: self.local_window,
            horizon: self.horizon,
        }
    }

    pub fn patch_plan(&self) -> PatchPlan {
        PatchPlan {
            window: self.window_spec(),
            global: PatchSpec::global(self.pl_g, self.str_g),
            local: PatchSpec::local(self.pl_l, self.str_l),
        }
    }

    pub fn mamba_dims(&self) -> MambaDims {
        MambaDims {
            d_model: self.d_model,
            d_state: self.d_state,
            expand: self.expand,
            d_conv: self.d_conv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch_plan()
            .validate()
            .map_err(|e| Error::Config(format!("invalid patch geometry: {e}")))?;
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.expand == 0 || self.d_state == 0 || self.d_conv == 0 || self.ffn_width == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.n_local_layers == 0 || self.n_mamba_layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch budget must be positive".into()));
        }
        if self.train_stride == 0 || self.eval_stride == 0 {
            return Err(Error::Config("window strides must be positive".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("cannot parse '{v}' for key '{key}'")))
        }
        match key {
            "dataset" => self.dataset = value.to_string(),
            "data_dir" => self.data_dir = Some(value.to_string()),
            "horizon" => self.horizon = num(key, value)?,
            "lookback" => self.lookback = num(key, value)?,
            "local_window" => self.local_window = num(key, value)?,
            "pl_g" => self.pl_g = num(key, value)?,
            "str_g" => self.str_g = num(key, value)?,
            "pl_l" => self.pl_l = num(key, value)?,
            "str_l" => self.str_l = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "n_local_layers" => self.n_local_layers = num(key, value)?,
            "n_mamba_layers" => self.n_mamba_layers = num(key, value)?,
            "d_state" => self.d_state = num(key, value)?,
            "expand" => self.expand = num(key, value)?,
            "d_conv" => self.d_conv = num(key, value)?,
            "ffn_width" => self.ffn_width = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "variant" => self.variant = Variant::parse(value)?,
            "instance_norm" => {
                self.instance_norm = match value {
                    "true" | "1" | "on" => true,
                    "false" | "0" | "off" => false,
                    _ => return Err(Error::Config(format!("bad boolean '{value}' for instance_norm"))),
                }
            }
            "out_dir" => self.out_dir = value.to_string(),
            "train_stride" => self.train_stride = num(key, value)?,
            "eval_stride" => self.eval_stride = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Every key in a stable order, for the frozen-config copy.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dataset", self.dataset.clone());
        if let Some(d) = &self.data_dir {
            kv("data_dir", d.clone());
        }
        kv("horizon", self.horizon.to_string());
        kv("lookback", self.lookback.to_string());
        kv("local_window", self.local_window.to_string());
        kv("pl_g", self.pl_g.to_string());
        kv("str_g", self.str_g.to_string());
        kv("pl_l", self.pl_l.to_string());
        kv("str_l", self.str_l.to_string());
        kv("d_model", self.d_model.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("n_local_layers", self.n_local_layers.to_string());
        kv("n_mamba_layers", self.n_mamba_layers.to_string());
        kv("d_state", self.d_state.to_string());
        kv("expand", self.expand.to_string());
        kv("d_conv", self.d_conv.to_string());
        kv("ffn_width", self.ffn_width.to_string());
        kv("lr", format!("{}", self.lr));
        kv("batch_size", self.batch_size.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("seed", self.seed.to_string());
        kv("variant", self.variant.name().to_string());
        kv("instance_norm", self.instance_norm.to_string());
        kv("out_dir", self.out_dir.clone());
        kv("train_stride", self.train_stride.to_string());
        kv("eval_stride", self.eval_stride.to_string());
        s
    }
}

/// Parse a flat `key = value` file (# starts a comment).
pub fn parse_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_kv_text(&text)
}

pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected 'key = value'", i + 1)));
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Resolve a configuration from built-in defaults, an optional config file,
/// and explicit overrides, in that precedence order (later wins). Known
/// datasets contribute their own default block for keys not explicitly set.
pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let file_pairs = match file {
        Some(p) => parse_kv_file(p)?,
        None => Vec::new(),
    };

    let explicit: BTreeSet<&str> = file_pairs
        .iter()
        .chain(overrides.iter())
        .map(|(k, _)| k.as_str())
        .collect();

    // dataset name decides the default block, so resolve it first
    let dataset = overrides
        .iter()
        .rev()
        .chain(file_pairs.iter().rev())
        .find(|(k, _)| k == "dataset")
        .map(|(_, v)| v.clone())
        .unwrap_or_else(|| ExperimentConfig::default().dataset);

    let mut cfg = ExperimentConfig { dataset: dataset.clone(), ..Default::default() };
    if DatasetKind::from_name(&dataset) == DatasetKind::Exchange {
        for (k, v) in EXCHANGE_BLOCK {
            cfg.set(k, v)?;
        }
    }
    for (k, v) in file_pairs.iter().chain(overrides.iter()) {
        cfg.set(k, v)?;
    }
    // the local window defaults to half the look-back
    if !explicit.contains("local_window") {
        cfg.local_window = cfg.lookback / 2;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_consistent() {
        let cfg = resolve(None, &[]).unwrap();
        assert_eq!(cfg.lookback, 2 * cfg.local_window);
        assert_eq!((cfg.pl_g, cfg.str_g, cfg.pl_l, cfg.str_l), (48, 16, 16, 8));
        assert_eq!(cfg.patch_plan().global_patches(), 18);
        assert_eq!(cfg.patch_plan().local_patches(), 19);
    }

    #[test]
    fn exchange_auto_block() {
        let cfg = resolve(None, &[("dataset".into(), "exchange".into())]).unwrap();
        assert_eq!((cfg.lookback, cfg.local_window), (192, 96));
        assert_eq!((cfg.pl_g, cfg.str_g, cfg.pl_l, cfg.str_l), (16, 8, 4, 2));
        assert_eq!(cfg.patch_plan().global_patches(), 22);
        assert_eq!(cfg.patch_plan().local_patches(), 46);

        // explicit override beats the block
        let cfg = resolve(
            None,
            &[("dataset".into(), "exchange".into()), ("pl_g".into(), "32".into())],
        )
        .unwrap();
        assert_eq!(cfg.pl_g, 32);
    }

    #[test]
    fn precedence_flag_beats_file_beats_default() {
        let p = std::env::temp_dir().join(format!("s2tx-{}-cfg.kv", std::process::id()));
        std::fs::write(&p, "horizon = 192\nseed = 7\n# comment\n").unwrap();
        let cfg = resolve(Some(&p), &[("seed".into(), "9".into())]).unwrap();
        assert_eq!(cfg.horizon, 192); // file beats default (96)
        assert_eq!(cfg.seed, 9); // flag beats file
        assert_eq!(cfg.batch_size, 32); // default survives
        std::fs::remove_file(p).ok();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = resolve(None, &[("horizons".into(), "96".into())]).unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn local_window_follows_lookback_unless_set() {
        let cfg = resolve(None, &[("lookback".into(), "480".into())]).unwrap();
        assert_eq!(cfg.local_window, 240);
        let cfg = resolve(
            None,
            &[("lookback".into(), "480".into()), ("local_window".into(), "160".into())],
        )
        .unwrap();
        assert_eq!(cfg.local_window, 160);
    }

    #[test]
    fn kv_roundtrip_is_stable() {
        let cfg = resolve(None, &[("horizon".into(), "336".into()), ("lr".into(), "0.00025".into())])
            .unwrap();
        let text = cfg.to_kv_string();
        let pairs = parse_kv_text(&text).unwrap();
        let cfg2 = resolve_from_pairs(&pairs);
        assert_eq!(cfg, cfg2);
    }

    fn resolve_from_pairs(pairs: &[(String, String)]) -> ExperimentConfig {
        resolve(None, pairs).unwrap()
    }

    #[test]
    fn invalid_geometry_rejected() {
        let err = resolve(None, &[("pl_g".into(), "400".into())]).unwrap_err();
        assert!(err.to_string().contains("patch"), "{err}");
        let err = resolve(None, &[("n_heads".into(), "5".into())]).unwrap_err();
        assert!(err.to_string().contains("n_heads"), "{err}");
    }
}
