//! `key=value` run configuration with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use voxcam::resnet::{FreezePolicy, Stage};
use voxcam::train::{Init, TrainConfig};

use crate::error::CliError;

/// Every accepted key, in the order the resolved file lists them.
pub const KEYS: &[&str] = &[
    "manifest",
    "plan",
    "out",
    "fold",
    "checkpoint",
    "tl",
    "init",
    "freeze",
    "depth",
    "base_width",
    "lr0",
    "scheduler_factor",
    "scheduler_patience",
    "min_improvement",
    "early_stop_patience",
    "max_epochs",
    "batch_size",
    "folds",
    "val_fraction",
    "rotation_max_deg",
    "seed",
    "resize",
    "cam_layer",
];

pub const CONFIG_FILE: &str = "config.txt";

/// Flags shared by the commands that accept a run configuration. Each flag
/// overrides the key of the same name (hyphens for underscores) in `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// key=value file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest (subject_id,image,label,mask).
    #[arg(long)]
    pub manifest: Option<String>,
    /// Fold plan CSV; generated from the manifest when absent.
    #[arg(long)]
    pub plan: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<String>,
    /// Fold index or `all`.
    #[arg(long)]
    pub fold: Option<String>,
    /// Model checkpoint to evaluate (file, or a training output directory).
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Transfer-learning regime: `none` or `finetune` (requires --init).
    #[arg(long)]
    pub tl: Option<String>,
    /// Pre-trained checkpoint to fine-tune from.
    #[arg(long)]
    pub init: Option<String>,
    /// `none` or `final_stage_and_head`.
    #[arg(long)]
    pub freeze: Option<String>,
    #[arg(long)]
    pub depth: Option<String>,
    #[arg(long)]
    pub base_width: Option<String>,
    #[arg(long)]
    pub lr0: Option<String>,
    #[arg(long)]
    pub scheduler_factor: Option<String>,
    #[arg(long)]
    pub scheduler_patience: Option<String>,
    #[arg(long)]
    pub min_improvement: Option<String>,
    #[arg(long)]
    pub early_stop_patience: Option<String>,
    #[arg(long)]
    pub max_epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub folds: Option<String>,
    #[arg(long)]
    pub val_fraction: Option<String>,
    #[arg(long)]
    pub rotation_max_deg: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Common grid `D,H,W` every scan is resampled to.
    #[arg(long)]
    pub resize: Option<String>,
    /// Grad-CAM layer for Heat-Scores (stage1..stage4).
    #[arg(long)]
    pub cam_layer: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> [(&'static str, Option<&String>); 23] {
        [
            ("manifest", self.manifest.as_ref()),
            ("plan", self.plan.as_ref()),
            ("out", self.out.as_ref()),
            ("fold", self.fold.as_ref()),
            ("checkpoint", self.checkpoint.as_ref()),
            ("tl", self.tl.as_ref()),
            ("init", self.init.as_ref()),
            ("freeze", self.freeze.as_ref()),
            ("depth", self.depth.as_ref()),
            ("base_width", self.base_width.as_ref()),
            ("lr0", self.lr0.as_ref()),
            ("scheduler_factor", self.scheduler_factor.as_ref()),
            ("scheduler_patience", self.scheduler_patience.as_ref()),
            ("min_improvement", self.min_improvement.as_ref()),
            ("early_stop_patience", self.early_stop_patience.as_ref()),
            ("max_epochs", self.max_epochs.as_ref()),
            ("batch_size", self.batch_size.as_ref()),
            ("folds", self.folds.as_ref()),
            ("val_fraction", self.val_fraction.as_ref()),
            ("rotation_max_deg", self.rotation_max_deg.as_ref()),
            ("seed", self.seed.as_ref()),
            ("resize", self.resize.as_ref()),
            ("cam_layer", self.cam_layer.as_ref()),
        ]
    }
}

/// Which folds a command runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldSelection {
    All,
    One(usize),
}

/// User-supplied values; unset keys take the defaults of [`TrainConfig`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: Vec<(&'static str, String)>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut rc = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::usage(format!("config line {}: expected key=value, got {line:?}", i + 1)));
            };
            let key = k.trim();
            if rc.get(key).is_some() {
                return Err(CliError::usage(format!("config line {}: duplicate key {key:?}", i + 1)));
            }
            rc.set(key, v.trim())?;
        }
        Ok(rc)
    }

    /// The `--config` file (if any) overlaid with explicit flags.
    pub fn from_args(args: &RunArgs) -> Result<Self, CliError> {
        let mut rc = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        for (key, value) in args.overrides() {
            if let Some(v) = value {
                rc.set(key, v)?;
            }
        }
        Ok(rc)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let Some(&k) = KEYS.iter().find(|&&k| k == key) else {
            return Err(CliError::usage(format!("unknown config key {key:?}")));
        };
        match self.values.iter_mut().find(|(name, _)| *name == k) {
            Some(slot) => slot.1 = value.to_string(),
            None => self.values.push((k, value.to_string())),
        }
        Ok(())
    }

    /// The value of `key`; empty values count as unset.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.values
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
            .filter(|v| !v.is_empty())
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key)
            .ok_or_else(|| CliError::usage(format!("missing required setting --{}", key.replace('_', "-"))))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    fn number<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::usage(format!("invalid value {v:?} for {key}"))),
        }
    }

    pub fn fold_selection(&self) -> Result<FoldSelection, CliError> {
        match self.get("fold") {
            None | Some("all") => Ok(FoldSelection::All),
            Some(v) => v
                .parse()
                .map(FoldSelection::One)
                .map_err(|_| CliError::usage(format!("fold must be an index or `all`, got {v:?}"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let tl = self.get("tl").unwrap_or("none");
        let init = match (tl, self.path("init")) {
            ("none", None) => Init::Scratch,
            ("finetune", Some(p)) => Init::Checkpoint(p),
            ("finetune", None) => return Err(CliError::usage("tl=finetune requires --init <checkpoint>")),
            ("none", Some(_)) => return Err(CliError::usage("--init is only used with --tl finetune")),
            (other, _) => return Err(CliError::usage(format!("tl must be `none` or `finetune`, got {other:?}"))),
        };
        let freeze = match self.get("freeze") {
            None if tl == "finetune" => FreezePolicy::FinalStageAndHead,
            None | Some("none") => FreezePolicy::None,
            Some("final_stage_and_head") => FreezePolicy::FinalStageAndHead,
            Some(other) => {
                return Err(CliError::usage(format!(
                    "freeze must be `none` or `final_stage_and_head`, got {other:?}"
                )))
            }
        };
        let resize = match self.get("resize") {
            None => None,
            Some(v) => Some(parse_extents(v)?),
        };
        let cam_layer = match self.get("cam_layer") {
            None => d.cam_layer,
            Some(v) => v.parse::<Stage>().map_err(|e| CliError::usage(e.to_string()))?,
        };
        let cfg = TrainConfig {
            depth: self.number("depth", d.depth)?,
            base_width: self.number("base_width", d.base_width)?,
            lr0: self.number("lr0", d.lr0)?,
            scheduler_factor: self.number("scheduler_factor", d.scheduler_factor)?,
            scheduler_patience: self.number("scheduler_patience", d.scheduler_patience)?,
            min_improvement: self.number("min_improvement", d.min_improvement)?,
            early_stop_patience: self.number("early_stop_patience", d.early_stop_patience)?,
            max_epochs: self.number("max_epochs", d.max_epochs)?,
            batch_size: self.number("batch_size", d.batch_size)?,
            folds: self.number("folds", d.folds)?,
            val_fraction: self.number("val_fraction", d.val_fraction)?,
            rotation_max_deg: self.number("rotation_max_deg", d.rotation_max_deg)?,
            seed: self.number("seed", d.seed)?,
            freeze,
            init,
            resize,
            cam_layer,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its effective value, one `key=value` per line.
    pub fn resolved(&self) -> Result<String, CliError> {
        let cfg = self.train_config()?;
        let mut s = String::new();
        for &key in KEYS {
            let value = match key {
                "fold" => match self.fold_selection()? {
                    FoldSelection::All => "all".to_string(),
                    FoldSelection::One(k) => k.to_string(),
                },
                "tl" => self.get("tl").unwrap_or("none").to_string(),
                "freeze" => match cfg.freeze {
                    FreezePolicy::None => "none".into(),
                    FreezePolicy::FinalStageAndHead => "final_stage_and_head".into(),
                },
                "depth" => cfg.depth.to_string(),
                "base_width" => cfg.base_width.to_string(),
                "lr0" => cfg.lr0.to_string(),
                "scheduler_factor" => cfg.scheduler_factor.to_string(),
                "scheduler_patience" => cfg.scheduler_patience.to_string(),
                "min_improvement" => cfg.min_improvement.to_string(),
                "early_stop_patience" => cfg.early_stop_patience.to_string(),
                "max_epochs" => cfg.max_epochs.to_string(),
                "batch_size" => cfg.batch_size.to_string(),
                "folds" => cfg.folds.to_string(),
                "val_fraction" => cfg.val_fraction.to_string(),
                "rotation_max_deg" => cfg.rotation_max_deg.to_string(),
                "seed" => cfg.seed.to_string(),
                "resize" => cfg.resize.map(|[d, h, w]| format!("{d},{h},{w}")).unwrap_or_default(),
                "cam_layer" => cfg.cam_layer.to_string(),
                other => self.get(other).unwrap_or_default().to_string(),
            };
            s.push_str(&format!("{key}={value}\n"));
        }
        Ok(s)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.resolved()?).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}

/// `D,H,W` (or `DxHxW`) grid extents.
pub fn parse_extents(v: &str) -> Result<[usize; 3], CliError> {
    let parts: Vec<&str> = v.split([',', 'x']).map(str::trim).collect();
    let bad = || CliError::usage(format!("extents must look like D,H,W, got {v:?}"));
    let [d, h, w] = parts[..] else { return Err(bad()) };
    let p = |s: &str| s.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(bad);
    Ok([p(d)?, p(h)?, p(w)?])
}
