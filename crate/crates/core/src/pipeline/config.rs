//! Model and training configuration plus its `key = value` text form.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{config_err, Error, Result};

/// Reference sizes of the full-scale model; documentation only.
pub const FULL_SCALE_C2D: usize = 256;
pub const FULL_SCALE_C3D: usize = 32;
pub const FULL_SCALE_D_EXP: usize = 4;
pub const FULL_SCALE_N_QUERY: usize = 100;
pub const FULL_SCALE_K_CRITICAL: usize = 4096;
pub const FULL_SCALE_GRID: [usize; 3] = [256, 256, 32];

/// Which components train.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Critical alignment weight zero and the refinement output frozen at zero.
    HsdOnly,
    /// Orthogonal and decoupling weights zero with a single pseudo slice.
    HorOnly,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::HsdOnly => "hsd_only",
            Variant::HorOnly => "hor_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Variant::Full),
            "hsd_only" => Some(Variant::HsdOnly),
            "hor_only" => Some(Variant::HorOnly),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid: [usize; 3],
    pub resolution: f64,
    pub image_w: usize,
    pub image_h: usize,
    pub c2d: usize,
    pub c3d: usize,
    pub d_exp: usize,
    pub n_query: usize,
    pub k_critical: usize,
    pub k_nn: usize,
    pub refine_hidden: usize,
    pub lambda_orth: f64,
    pub w_decouple: f64,
    pub w_critical: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub target_miou: f64,
    pub target_iou: f64,
    pub slice_level_sim: bool,
    pub kl_topk_only: bool,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: [32, 32, 8],
            resolution: 0.4,
            image_w: 128,
            image_h: 64,
            c2d: 32,
            c3d: 16,
            d_exp: 4,
            n_query: 32,
            k_critical: 64,
            k_nn: 5,
            refine_hidden: 32,
            lambda_orth: 0.01,
            w_decouple: 0.01,
            w_critical: 0.01,
            lr: 2e-4,
            weight_decay: 1e-2,
            epochs: 10,
            seed: 0,
            max_steps: 0,
            eval_every: 0,
            target_miou: 0.0,
            target_iou: 0.0,
            slice_level_sim: false,
            kl_topk_only: false,
            variant: Variant::Full,
        }
    }
}

/// Every recognized key, in the order [`ModelConfig::to_text`] writes them.
pub const CONFIG_KEYS: &[&str] = &[
    "grid.h",
    "grid.w",
    "grid.z",
    "grid.resolution",
    "data.image_w",
    "data.image_h",
    "model.c2d",
    "model.c3d",
    "model.d_exp",
    "model.n_query",
    "model.k_critical",
    "model.k_nn",
    "model.refine_hidden",
    "model.variant",
    "loss.lambda_orth",
    "loss.w_decouple",
    "loss.w_critical",
    "train.lr",
    "train.weight_decay",
    "train.epochs",
    "train.seed",
    "train.max_steps",
    "train.eval_every",
    "train.target_miou",
    "train.target_iou",
    "hsd.slice_level_sim",
    "hor.kl_topk_only",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<T> {
    v.parse().map_err(|_| config_err!("{key}: expected {what}, got {v:?}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(config_err!("{key}: expected true or false, got {v:?}")),
    }
}

impl ModelConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| config_err!("line {}: expected key = value, got {raw:?}", lineno + 1))?;
            if !seen.insert(key.to_string()) {
                return Err(config_err!("{key}: given more than once"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        const UINT: &str = "a non-negative integer";
        const REAL: &str = "a real number";
        match key {
            "grid.h" => self.grid[0] = parse_num(key, v, UINT)?,
            "grid.w" => self.grid[1] = parse_num(key, v, UINT)?,
            "grid.z" => self.grid[2] = parse_num(key, v, UINT)?,
            "grid.resolution" => self.resolution = parse_num(key, v, REAL)?,
            "data.image_w" => self.image_w = parse_num(key, v, UINT)?,
            "data.image_h" => self.image_h = parse_num(key, v, UINT)?,
            "model.c2d" => self.c2d = parse_num(key, v, UINT)?,
            "model.c3d" => self.c3d = parse_num(key, v, UINT)?,
            "model.d_exp" => self.d_exp = parse_num(key, v, UINT)?,
            "model.n_query" => self.n_query = parse_num(key, v, UINT)?,
            "model.k_critical" => self.k_critical = parse_num(key, v, UINT)?,
            "model.k_nn" => self.k_nn = parse_num(key, v, UINT)?,
            "model.refine_hidden" => self.refine_hidden = parse_num(key, v, UINT)?,
            "model.variant" => {
                self.variant = Variant::parse(v)
                    .ok_or_else(|| config_err!("{key}: expected full, hsd_only or hor_only, got {v:?}"))?
            }
            "loss.lambda_orth" => self.lambda_orth = parse_num(key, v, REAL)?,
            "loss.w_decouple" => self.w_decouple = parse_num(key, v, REAL)?,
            "loss.w_critical" => self.w_critical = parse_num(key, v, REAL)?,
            "train.lr" => self.lr = parse_num(key, v, REAL)?,
            "train.weight_decay" => self.weight_decay = parse_num(key, v, REAL)?,
            "train.epochs" => self.epochs = parse_num(key, v, UINT)?,
            "train.seed" => self.seed = parse_num(key, v, UINT)?,
            "train.max_steps" => self.max_steps = parse_num(key, v, UINT)?,
            "train.eval_every" => self.eval_every = parse_num(key, v, UINT)?,
            "train.target_miou" => self.target_miou = parse_num(key, v, REAL)?,
            "train.target_iou" => self.target_iou = parse_num(key, v, REAL)?,
            "hsd.slice_level_sim" => self.slice_level_sim = parse_bool(key, v)?,
            "hor.kl_topk_only" => self.kl_topk_only = parse_bool(key, v)?,
            _ => return Err(config_err!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid.h", self.grid[0]),
            ("grid.w", self.grid[1]),
            ("grid.z", self.grid[2]),
            ("data.image_w", self.image_w),
            ("data.image_h", self.image_h),
            ("model.c2d", self.c2d),
            ("model.c3d", self.c3d),
            ("model.d_exp", self.d_exp),
            ("model.n_query", self.n_query),
            ("model.k_critical", self.k_critical),
            ("model.k_nn", self.k_nn),
            ("model.refine_hidden", self.refine_hidden),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(config_err!("{key} must be at least 1"));
            }
        }
        if !self.image_w.is_multiple_of(4) || !self.image_h.is_multiple_of(4) {
            return Err(config_err!("image size {}x{} must be divisible by 4", self.image_w, self.image_h));
        }
        if self.n_query < self.d_exp {
            return Err(config_err!("model.n_query ({}) must be at least model.d_exp ({})", self.n_query, self.d_exp));
        }
        if self.k_nn >= self.n_query {
            return Err(config_err!("model.k_nn ({}) must be below model.n_query ({})", self.k_nn, self.n_query));
        }
        if self.k_critical > self.num_voxels() {
            return Err(config_err!("model.k_critical ({}) exceeds the {} grid voxels", self.k_critical, self.num_voxels()));
        }
        let reals = [
            ("grid.resolution", self.resolution, false),
            ("loss.lambda_orth", self.lambda_orth, true),
            ("loss.w_decouple", self.w_decouple, true),
            ("loss.w_critical", self.w_critical, true),
            ("train.lr", self.lr, true),
            ("train.weight_decay", self.weight_decay, true),
            ("train.target_miou", self.target_miou, true),
            ("train.target_iou", self.target_iou, true),
        ];
        for (key, v, zero_ok) in reals {
            if !v.is_finite() || v < 0.0 || (!zero_ok && v == 0.0) {
                return Err(config_err!("{key} = {v} is out of range"));
            }
        }
        if self.variant == Variant::HorOnly && self.d_exp != 1 {
            return Err(config_err!("model.variant = hor_only needs model.d_exp = 1"));
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.grid.iter().product()
    }

    /// Applies the loss-weight and slice-count settings of an ablation.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        match variant {
            Variant::Full => {}
            Variant::HsdOnly => self.w_critical = 0.0,
            Variant::HorOnly => {
                self.lambda_orth = 0.0;
                self.w_decouple = 0.0;
                self.d_exp = 1;
            }
        }
        self
    }

    /// Canonical text with every key; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key));
        }
        s
    }

    fn get(&self, key: &str) -> String {
        match key {
            "grid.h" => self.grid[0].to_string(),
            "grid.w" => self.grid[1].to_string(),
            "grid.z" => self.grid[2].to_string(),
            "grid.resolution" => format!("{:?}", self.resolution),
            "data.image_w" => self.image_w.to_string(),
            "data.image_h" => self.image_h.to_string(),
            "model.c2d" => self.c2d.to_string(),
            "model.c3d" => self.c3d.to_string(),
            "model.d_exp" => self.d_exp.to_string(),
            "model.n_query" => self.n_query.to_string(),
            "model.k_critical" => self.k_critical.to_string(),
            "model.k_nn" => self.k_nn.to_string(),
            "model.refine_hidden" => self.refine_hidden.to_string(),
            "model.variant" => self.variant.name().to_string(),
            "loss.lambda_orth" => format!("{:?}", self.lambda_orth),
            "loss.w_decouple" => format!("{:?}", self.w_decouple),
            "loss.w_critical" => format!("{:?}", self.w_critical),
            "train.lr" => format!("{:?}", self.lr),
            "train.weight_decay" => format!("{:?}", self.weight_decay),
            "train.epochs" => self.epochs.to_string(),
            "train.seed" => self.seed.to_string(),
            "train.max_steps" => self.max_steps.to_string(),
            "train.eval_every" => self.eval_every.to_string(),
            "train.target_miou" => format!("{:?}", self.target_miou),
            "train.target_iou" => format!("{:?}", self.target_iou),
            "hsd.slice_level_sim" => self.slice_level_sim.to_string(),
            "hor.kl_topk_only" => self.kl_topk_only.to_string(),
            _ => unreachable!("CONFIG_KEYS and get() list the same keys"),
        }
    }
}
