//! Network hyper-parameters, ablation switches and the flat `key=value`
//! run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Structural widths of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Filters in every backbone conv except the last.
    pub backbone_width: usize,
    /// Channel width `c` of every propagated feature map.
    pub feat: usize,
    pub growth: usize,
    pub dense_layers: usize,
    pub deform_groups: usize,
    pub kernel: usize,
    pub agrd_blocks: usize,
    pub rdb_per_agrd: usize,
    pub rdca_blocks: usize,
    pub ca_reduction: usize,
    pub ca_min_hidden: usize,
    pub sa_kernel: usize,
    pub head_width: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            backbone_width: 48,
            feat: 64,
            growth: 32,
            dense_layers: 4,
            deform_groups: 64,
            kernel: 3,
            agrd_blocks: 3,
            rdb_per_agrd: 2,
            rdca_blocks: 3,
            ca_reduction: 16,
            ca_min_hidden: 4,
            sa_kernel: 7,
            head_width: 64,
            num_classes: 1,
        }
    }
}

impl ModelConfig {
    /// Reduced widths for CPU-budget experiments; same topology as the default.
    pub fn desk() -> Self {
        ModelConfig {
            backbone_width: 12,
            feat: 16,
            growth: 8,
            deform_groups: 8,
            head_width: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("in_channels", self.in_channels),
            ("backbone_width", self.backbone_width),
            ("feat", self.feat),
            ("growth", self.growth),
            ("dense_layers", self.dense_layers),
            ("deform_groups", self.deform_groups),
            ("kernel", self.kernel),
            ("ca_reduction", self.ca_reduction),
            ("head_width", self.head_width),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in nonzero {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.feat % 2 != 0 {
            return Err(Error::config("feature width must be even (AGRD halves it)"));
        }
        if self.feat % self.deform_groups != 0 {
            return Err(Error::config(format!(
                "feature width {} not divisible by {} deformable groups",
                self.feat, self.deform_groups
            )));
        }
        if self.kernel % 2 == 0 || self.sa_kernel % 2 == 0 {
            return Err(Error::config("kernel sizes must be odd"));
        }
        Ok(())
    }

    pub(crate) fn to_map(self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        for (k, v) in [
            ("in_channels", self.in_channels),
            ("backbone_width", self.backbone_width),
            ("feat", self.feat),
            ("growth", self.growth),
            ("dense_layers", self.dense_layers),
            ("deform_groups", self.deform_groups),
            ("kernel", self.kernel),
            ("agrd_blocks", self.agrd_blocks),
            ("rdb_per_agrd", self.rdb_per_agrd),
            ("rdca_blocks", self.rdca_blocks),
            ("ca_reduction", self.ca_reduction),
            ("ca_min_hidden", self.ca_min_hidden),
            ("sa_kernel", self.sa_kernel),
            ("head_width", self.head_width),
            ("num_classes", self.num_classes),
        ] {
            m.insert(k.to_string(), v.to_string());
        }
        m
    }

    pub(crate) fn from_map(m: &BTreeMap<String, String>) -> std::result::Result<Self, (String, String)> {
        let get = |k: &str| -> std::result::Result<usize, (String, String)> {
            let raw = m.get(k).ok_or_else(|| (k.to_string(), "missing".to_string()))?;
            raw.parse()
                .map_err(|_| (k.to_string(), format!("`{raw}` is not an unsigned integer")))
        };
        Ok(ModelConfig {
            in_channels: get("in_channels")?,
            backbone_width: get("backbone_width")?,
            feat: get("feat")?,
            growth: get("growth")?,
            dense_layers: get("dense_layers")?,
            deform_groups: get("deform_groups")?,
            kernel: get("kernel")?,
            agrd_blocks: get("agrd_blocks")?,
            rdb_per_agrd: get("rdb_per_agrd")?,
            rdca_blocks: get("rdca_blocks")?,
            ca_reduction: get("ca_reduction")?,
            ca_min_hidden: get("ca_min_hidden")?,
            sa_kernel: get("sa_kernel")?,
            head_width: get("head_width")?,
            num_classes: get("num_classes")?,
        })
    }
}

/// Which parts of the pipeline are active. All `true` is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub backward_prop: bool,
    pub forward_prop: bool,
    pub ltmf: bool,
    pub gtmf: bool,
    pub stf: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            backward_prop: true,
            forward_prop: true,
            ltmf: true,
            gtmf: true,
            stf: true,
        }
    }
}

impl Ablation {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn no_propagation() -> Self {
        Ablation {
            backward_prop: false,
            forward_prop: false,
            ..Self::default()
        }
    }
}

/// Everything a training / inference run needs. Serialised as flat
/// `key=value` lines so a run directory's `config.txt` can be replayed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub n_train: usize,
    pub n_infer: usize,
    pub input_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// When set, overrides the epoch-derived step budget.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub lambda: f64,
    pub eta: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub seed: u64,
    pub data: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            ablation: Ablation::default(),
            n_train: 5,
            n_infer: 8,
            input_size: 64,
            lr: 2e-4,
            epochs: 20,
            steps: None,
            batch_size: 2,
            lambda: 5.0,
            eta: 1.0,
            score_thresh: 0.05,
            nms_iou: 0.5,
            seed: 0,
            data: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
        }
    }
}

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "BIRD_SEED";

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.n_train < 3 {
            return Err(Error::config("n_train must be at least 3"));
        }
        if self.n_infer < 1 {
            return Err(Error::config("n_infer must be at least 1"));
        }
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return Err(Error::config("input_size must be a positive multiple of 8"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.score_thresh) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::config("thresholds must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Applies `BIRD_SEED` if present.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        for (k, v) in self.model.to_map() {
            kv(&format!("model.{k}"), v);
        }
        kv("enable_bp", self.ablation.backward_prop.to_string());
        kv("enable_fp", self.ablation.forward_prop.to_string());
        kv("enable_ltmf", self.ablation.ltmf.to_string());
        kv("enable_gtmf", self.ablation.gtmf.to_string());
        kv("enable_stf", self.ablation.stf.to_string());
        kv("n_train", self.n_train.to_string());
        kv("n_infer", self.n_infer.to_string());
        kv("input_size", self.input_size.to_string());
        kv("lr", self.lr.to_string());
        kv("epochs", self.epochs.to_string());
        kv(
            "steps",
            self.steps.map(|s| s.to_string()).unwrap_or_default(),
        );
        kv("batch_size", self.batch_size.to_string());
        kv("lambda", self.lambda.to_string());
        kv("eta", self.eta.to_string());
        kv("score_thresh", self.score_thresh.to_string());
        kv("nms_iou", self.nms_iou.to_string());
        kv("seed", self.seed.to_string());
        kv("data", self.data.display().to_string());
        kv("run_dir", self.run_dir.display().to_string());
        s
    }

    /// Parses `key=value` lines on top of the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are rejected.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut model = cfg.model.to_map();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, lineno, "expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |what: &str| Error::parse(origin, lineno, format!("{k}: `{v}` is not {what}"));
            let uint = || v.parse::<usize>().map_err(|_| bad("an unsigned integer"));
            let real = || v.parse::<f64>().map_err(|_| bad("a number"));
            let flag = || v.parse::<bool>().map_err(|_| bad("true/false"));
            match k {
                _ if k.starts_with("model.") => {
                    let key = &k["model.".len()..];
                    if !model.contains_key(key) {
                        return Err(Error::parse(origin, lineno, format!("unknown key `{k}`")));
                    }
                    uint()?;
                    model.insert(key.to_string(), v.to_string());
                }
                "enable_bp" => cfg.ablation.backward_prop = flag()?,
                "enable_fp" => cfg.ablation.forward_prop = flag()?,
                "enable_ltmf" => cfg.ablation.ltmf = flag()?,
                "enable_gtmf" => cfg.ablation.gtmf = flag()?,
                "enable_stf" => cfg.ablation.stf = flag()?,
                "n_train" => cfg.n_train = uint()?,
                "n_infer" => cfg.n_infer = uint()?,
                "input_size" => cfg.input_size = uint()?,
                "lr" => cfg.lr = real()?,
                "epochs" => cfg.epochs = uint()?,
                "steps" => cfg.steps = if v.is_empty() { None } else { Some(uint()?) },
                "batch_size" => cfg.batch_size = uint()?,
                "lambda" => cfg.lambda = real()?,
                "eta" => cfg.eta = real()?,
                "score_thresh" => cfg.score_thresh = real()?,
                "nms_iou" => cfg.nms_iou = real()?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad("an unsigned integer"))?,
                "data" => cfg.data = PathBuf::from(v),
                "run_dir" => cfg.run_dir = PathBuf::from(v),
                _ => return Err(Error::parse(origin, lineno, format!("unknown key `{k}`"))),
            }
        }
        cfg.model = ModelConfig::from_map(&model)
            .map_err(|(f, m)| Error::parse(origin, 0, format!("model.{f}: {m}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Effective η: zero when the fusion loss is switched off.
    pub fn effective_eta(&self) -> f64 {
        if self.ablation.stf {
            self.eta
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_settings() {
        let c = RunConfig::default();
        assert_eq!(c.n_train, 5);
        assert_eq!(c.n_infer, 8);
        assert_eq!(c.lr, 2e-4);
        assert_eq!(c.epochs, 20);
        assert_eq!(c.batch_size, 2);
        assert_eq!(c.lambda, 5.0);
        assert_eq!(c.eta, 1.0);
        let m = ModelConfig::default();
        assert_eq!((m.backbone_width, m.feat), (48, 64));
        assert_eq!((m.deform_groups, m.kernel), (64, 3));
        assert_eq!((m.dense_layers, m.growth), (4, 32));
    }

    #[test]
    fn config_text_round_trips() {
        let mut c = RunConfig {
            model: ModelConfig::desk(),
            steps: Some(123),
            lr: 1.5e-3,
            seed: 99,
            ..RunConfig::default()
        };
        c.ablation.gtmf = false;
        let back = RunConfig::parse(&c.to_text(), Path::new("cfg")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn parse_reports_line_of_bad_value() {
        let err = RunConfig::parse("seed=1\nlr=fast\n", Path::new("c.txt")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(RunConfig::parse("bogus=1", Path::new("c")).is_err());
    }

    #[test]
    fn validation_rejects_short_training_clips() {
        let c = RunConfig {
            n_train: 2,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
