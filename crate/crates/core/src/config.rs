//! Run configuration: a flat hierarchical key-value text file with `#`
//! comments. Every key has a default, unknown keys are rejected, and the
//! canonical serialization feeds the checkpoint compatibility hash.

use crate::captioner::CaptionerMode;
use crate::encoders::tokenizer::fnv1a64;
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub enum Supervision {
    Label,
    Caption,
}

impl Supervision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Supervision::Label => "label",
            Supervision::Caption => "caption",
        }
    }
}

/// Everything a run needs; see `RunConfig::default()` for the toy defaults
/// and `configs/` for ready-made files.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub supervision: Supervision,
    pub timesteps: Vec<usize>,
    pub batch_size: usize,
    pub iterations: usize,
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    /// Stop early once train-set PQ reaches this value (0 disables).
    pub early_stop_pq: f64,
    pub k_word: usize,

    pub data_source: String,
    pub data_path: String,
    pub data_num_images: usize,
    pub data_things: Vec<String>,
    pub data_stuff: Vec<String>,
    pub data_min_shapes: usize,
    pub data_max_shapes: usize,
    pub data_seed: u64,

    pub enc_seed: u64,
    pub enc_text_dim: usize,
    pub enc_text_len: usize,
    pub enc_vocab_size: u32,
    pub enc_image_stride: usize,
    pub enc_image_hidden: usize,
    pub enc_lexicon: String,
    pub enc_synonyms: String,
    pub enc_templates: String,

    pub unet_seed: u64,
    pub unet_base_width: usize,
    pub unet_channel_mult: Vec<usize>,
    pub unet_groups: usize,
    pub backbone_checkpoint: String,

    pub pyramid_strides: Vec<usize>,
    pub pyramid_channels: usize,
    pub pyramid_seed: u64,

    pub captioner_mode: CaptionerMode,
    pub captioner_pseudo_tokens: usize,
    pub captioner_hidden_dim: usize,

    pub masks_num_queries: usize,
    pub masks_decoder_layers: usize,
    pub masks_mask_dim: usize,
    pub masks_ffn_hidden: usize,
    pub masks_cost_bce: f64,
    pub masks_cost_dice: f64,
    pub masks_loss_bce: f64,
    pub masks_loss_dice: f64,

    pub cls_tau_init: f64,
    pub cls_null_category: bool,
    pub grounding_tau_init: f64,

    pub loss_mask: f64,
    pub loss_category: f64,
    pub loss_grounding: f64,

    pub opt_lr: f64,
    pub opt_weight_decay: f64,
    pub opt_beta1: f64,
    pub opt_beta2: f64,
    pub opt_eps: f64,
    pub opt_clip_norm: f64,
    pub opt_decay_milestones: Vec<f64>,
    pub opt_decay_factor: f64,

    pub infer_lambda: f64,
    pub infer_conf_thresh: f64,
    pub infer_reject_thresh: f64,
    pub infer_overlap_keep: f64,
    pub infer_min_area: usize,
    pub infer_top_k: usize,

    pub train_cache_frozen_features: bool,
    pub model_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            image_size: 64,
            supervision: Supervision::Label,
            timesteps: vec![0],
            batch_size: 8,
            iterations: 2000,
            eval_interval: 100,
            checkpoint_interval: 1000,
            early_stop_pq: 0.0,
            k_word: 8,

            data_source: "synthetic".into(),
            data_path: String::new(),
            data_num_images: 16,
            data_things: ["square", "circle", "triangle", "diamond"]
                .map(String::from)
                .to_vec(),
            data_stuff: ["grass", "sky"].map(String::from).to_vec(),
            data_min_shapes: 2,
            data_max_shapes: 4,
            data_seed: 0,

            enc_seed: 1,
            enc_text_dim: 64,
            enc_text_len: 16,
            enc_vocab_size: 4096,
            enc_image_stride: 8,
            enc_image_hidden: 32,
            enc_lexicon: String::new(),
            enc_synonyms: String::new(),
            enc_templates: String::new(),

            unet_seed: 2,
            unet_base_width: 32,
            unet_channel_mult: vec![1, 2, 2],
            unet_groups: 8,
            backbone_checkpoint: String::new(),

            pyramid_strides: vec![2, 4, 8],
            pyramid_channels: 64,
            pyramid_seed: 3,

            captioner_mode: CaptionerMode::Implicit,
            captioner_pseudo_tokens: 8,
            captioner_hidden_dim: 128,

            masks_num_queries: 20,
            masks_decoder_layers: 3,
            masks_mask_dim: 64,
            masks_ffn_hidden: 256,
            masks_cost_bce: 1.0,
            masks_cost_dice: 1.0,
            masks_loss_bce: 1.0,
            masks_loss_dice: 1.0,

            cls_tau_init: 0.07,
            cls_null_category: true,
            grounding_tau_init: 0.07,

            loss_mask: 1.0,
            loss_category: 1.0,
            loss_grounding: 1.0,

            opt_lr: 1e-4,
            opt_weight_decay: 0.05,
            opt_beta1: 0.9,
            opt_beta2: 0.999,
            opt_eps: 1e-8,
            opt_clip_norm: 1.0,
            opt_decay_milestones: vec![0.9, 0.955],
            opt_decay_factor: 0.1,

            infer_lambda: 0.65,
            infer_conf_thresh: 0.25,
            infer_reject_thresh: 0.5,
            infer_overlap_keep: 0.8,
            infer_min_area: 16,
            infer_top_k: 100,

            train_cache_frozen_features: true,
            model_seed: 4,
        }
    }
}

macro_rules! parse_num {
    ($v:expr, $key:expr) => {
        $v.parse()
            .map_err(|_| Error::Config(format!("invalid value for {}: {:?}", $key, $v)))?
    };
}

impl RunConfig {
    /// Load from a file, apply `--set key=value` overrides, then the
    /// `ODISE_TOY_SEED` environment override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            cfg.apply_text(&text)?;
        }
        for ov in overrides {
            let (k, v) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override must be key=value: {ov:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Ok(seed) = std::env::var("ODISE_TOY_SEED") {
            cfg.seed = seed
                .parse()
                .map_err(|_| Error::Config(format!("ODISE_TOY_SEED must be an integer: {seed:?}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !self.enc_image_stride.is_power_of_two() {
            return Err(Error::Config("encoders.image_stride must be a power of two".into()));
        }
        let total = 1usize << self.unet_channel_mult.len();
        if self.image_size % total != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by UNet downsampling factor {total}",
                self.image_size
            )));
        }
        if self.pyramid_strides.len() != self.unet_channel_mult.len() {
            return Err(Error::Config(
                "pyramid.strides must list one stride per UNet resolution".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.infer_lambda) {
            return Err(Error::Config("infer.lambda must lie in [0,1]".into()));
        }
        if self.data_source != "synthetic" && self.data_source != "coco" {
            return Err(Error::Config(format!(
                "data.source must be synthetic or coco, got {:?}",
                self.data_source
            )));
        }
        if self.timesteps.is_empty() {
            return Err(Error::Config("timesteps must not be empty".into()));
        }
        Ok(())
    }

    /// Set one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse_num!(v, key),
            "image_size" => self.image_size = parse_num!(v, key),
            "supervision" => {
                self.supervision = match v {
                    "label" => Supervision::Label,
                    "caption" => Supervision::Caption,
                    _ => {
                        return Err(Error::Config(format!(
                            "supervision must be label or caption, got {v:?}"
                        )))
                    }
                }
            }
            "timesteps" => self.timesteps = parse_list(v, key)?,
            "batch_size" => self.batch_size = parse_num!(v, key),
            "iterations" => self.iterations = parse_num!(v, key),
            "eval_interval" => self.eval_interval = parse_num!(v, key),
            "checkpoint_interval" => self.checkpoint_interval = parse_num!(v, key),
            "early_stop_pq" => self.early_stop_pq = parse_num!(v, key),
            "k_word" => self.k_word = parse_num!(v, key),
            "data.source" => self.data_source = v.to_string(),
            "data.path" => self.data_path = v.to_string(),
            "data.num_images" => self.data_num_images = parse_num!(v, key),
            "data.things" => self.data_things = parse_names(v),
            "data.stuff" => self.data_stuff = parse_names(v),
            "data.min_shapes" => self.data_min_shapes = parse_num!(v, key),
            "data.max_shapes" => self.data_max_shapes = parse_num!(v, key),
            "data.seed" => self.data_seed = parse_num!(v, key),
            "encoders.seed" => self.enc_seed = parse_num!(v, key),
            "encoders.text_dim" => self.enc_text_dim = parse_num!(v, key),
            "encoders.text_len" => self.enc_text_len = parse_num!(v, key),
            "encoders.vocab_size" => self.enc_vocab_size = parse_num!(v, key),
            "encoders.image_stride" => self.enc_image_stride = parse_num!(v, key),
            "encoders.image_hidden" => self.enc_image_hidden = parse_num!(v, key),
            "encoders.lexicon" => self.enc_lexicon = v.to_string(),
            "encoders.synonyms" => self.enc_synonyms = v.to_string(),
            "encoders.templates" => self.enc_templates = v.to_string(),
            "unet.seed" => self.unet_seed = parse_num!(v, key),
            "unet.base_width" => self.unet_base_width = parse_num!(v, key),
            "unet.channel_mult" => self.unet_channel_mult = parse_list(v, key)?,
            "unet.groups" => self.unet_groups = parse_num!(v, key),
            "backbone.checkpoint" => self.backbone_checkpoint = v.to_string(),
            "pyramid.strides" => self.pyramid_strides = parse_list(v, key)?,
            "pyramid.channels" => self.pyramid_channels = parse_num!(v, key),
            "pyramid.seed" => self.pyramid_seed = parse_num!(v, key),
            "captioner.mode" => {
                self.captioner_mode = CaptionerMode::parse(v).ok_or_else(|| {
                    Error::Config(format!("captioner.mode must be implicit or empty, got {v:?}"))
                })?
            }
            "captioner.pseudo_tokens" => self.captioner_pseudo_tokens = parse_num!(v, key),
            "captioner.hidden_dim" => self.captioner_hidden_dim = parse_num!(v, key),
            "masks.num_queries" => self.masks_num_queries = parse_num!(v, key),
            "masks.decoder_layers" => self.masks_decoder_layers = parse_num!(v, key),
            "masks.mask_dim" => self.masks_mask_dim = parse_num!(v, key),
            "masks.ffn_hidden" => self.masks_ffn_hidden = parse_num!(v, key),
            "masks.cost.bce" => self.masks_cost_bce = parse_num!(v, key),
            "masks.cost.dice" => self.masks_cost_dice = parse_num!(v, key),
            "masks.loss.bce" => self.masks_loss_bce = parse_num!(v, key),
            "masks.loss.dice" => self.masks_loss_dice = parse_num!(v, key),
            "cls.tau_init" => self.cls_tau_init = parse_num!(v, key),
            "cls.null_category" => self.cls_null_category = parse_bool(v, key)?,
            "grounding.tau_init" => self.grounding_tau_init = parse_num!(v, key),
            "loss.mask" => self.loss_mask = parse_num!(v, key),
            "loss.category" => self.loss_category = parse_num!(v, key),
            "loss.grounding" => self.loss_grounding = parse_num!(v, key),
            "opt.lr" => self.opt_lr = parse_num!(v, key),
            "opt.weight_decay" => self.opt_weight_decay = parse_num!(v, key),
            "opt.beta1" => self.opt_beta1 = parse_num!(v, key),
            "opt.beta2" => self.opt_beta2 = parse_num!(v, key),
            "opt.eps" => self.opt_eps = parse_num!(v, key),
            "opt.clip_norm" => self.opt_clip_norm = parse_num!(v, key),
            "opt.decay_milestones" => self.opt_decay_milestones = parse_list(v, key)?,
            "opt.decay_factor" => self.opt_decay_factor = parse_num!(v, key),
            "infer.lambda" => self.infer_lambda = parse_num!(v, key),
            "infer.conf_thresh" => self.infer_conf_thresh = parse_num!(v, key),
            "infer.reject_thresh" => self.infer_reject_thresh = parse_num!(v, key),
            "infer.overlap_keep" => self.infer_overlap_keep = parse_num!(v, key),
            "infer.min_area" => self.infer_min_area = parse_num!(v, key),
            "infer.top_k" => self.infer_top_k = parse_num!(v, key),
            "train.cache_frozen_features" => {
                self.train_cache_frozen_features = parse_bool(v, key)?
            }
            "model.seed" => self.model_seed = parse_num!(v, key),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical serialization: every key, sorted, one per line.
    pub fn to_canonical_string(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("seed", self.seed.to_string());
        map.insert("image_size", self.image_size.to_string());
        map.insert("supervision", self.supervision.as_str().to_string());
        map.insert("timesteps", join(&self.timesteps));
        map.insert("batch_size", self.batch_size.to_string());
        map.insert("iterations", self.iterations.to_string());
        map.insert("eval_interval", self.eval_interval.to_string());
        map.insert("checkpoint_interval", self.checkpoint_interval.to_string());
        map.insert("early_stop_pq", fmt_f64(self.early_stop_pq));
        map.insert("k_word", self.k_word.to_string());
        map.insert("data.source", self.data_source.clone());
        map.insert("data.path", self.data_path.clone());
        map.insert("data.num_images", self.data_num_images.to_string());
        map.insert("data.things", self.data_things.join(","));
        map.insert("data.stuff", self.data_stuff.join(","));
        map.insert("data.min_shapes", self.data_min_shapes.to_string());
        map.insert("data.max_shapes", self.data_max_shapes.to_string());
        map.insert("data.seed", self.data_seed.to_string());
        map.insert("encoders.seed", self.enc_seed.to_string());
        map.insert("encoders.text_dim", self.enc_text_dim.to_string());
        map.insert("encoders.text_len", self.enc_text_len.to_string());
        map.insert("encoders.vocab_size", self.enc_vocab_size.to_string());
        map.insert("encoders.image_stride", self.enc_image_stride.to_string());
        map.insert("encoders.image_hidden", self.enc_image_hidden.to_string());
        map.insert("encoders.lexicon", self.enc_lexicon.clone());
        map.insert("encoders.synonyms", self.enc_synonyms.clone());
        map.insert("encoders.templates", self.enc_templates.clone());
        map.insert("unet.seed", self.unet_seed.to_string());
        map.insert("unet.base_width", self.unet_base_width.to_string());
        map.insert("unet.channel_mult", join(&self.unet_channel_mult));
        map.insert("unet.groups", self.unet_groups.to_string());
        map.insert("backbone.checkpoint", self.backbone_checkpoint.clone());
        map.insert("pyramid.strides", join(&self.pyramid_strides));
        map.insert("pyramid.channels", self.pyramid_channels.to_string());
        map.insert("pyramid.seed", self.pyramid_seed.to_string());
        map.insert("captioner.mode", self.captioner_mode.as_str().to_string());
        map.insert(
            "captioner.pseudo_tokens",
            self.captioner_pseudo_tokens.to_string(),
        );
        map.insert("captioner.hidden_dim", self.captioner_hidden_dim.to_string());
        map.insert("masks.num_queries", self.masks_num_queries.to_string());
        map.insert("masks.decoder_layers", self.masks_decoder_layers.to_string());
        map.insert("masks.mask_dim", self.masks_mask_dim.to_string());
        map.insert("masks.ffn_hidden", self.masks_ffn_hidden.to_string());
        map.insert("masks.cost.bce", fmt_f64(self.masks_cost_bce));
        map.insert("masks.cost.dice", fmt_f64(self.masks_cost_dice));
        map.insert("masks.loss.bce", fmt_f64(self.masks_loss_bce));
        map.insert("masks.loss.dice", fmt_f64(self.masks_loss_dice));
        map.insert("cls.tau_init", fmt_f64(self.cls_tau_init));
        map.insert("cls.null_category", self.cls_null_category.to_string());
        map.insert("grounding.tau_init", fmt_f64(self.grounding_tau_init));
        map.insert("loss.mask", fmt_f64(self.loss_mask));
        map.insert("loss.category", fmt_f64(self.loss_category));
        map.insert("loss.grounding", fmt_f64(self.loss_grounding));
        map.insert("opt.lr", fmt_f64(self.opt_lr));
        map.insert("opt.weight_decay", fmt_f64(self.opt_weight_decay));
        map.insert("opt.beta1", fmt_f64(self.opt_beta1));
        map.insert("opt.beta2", fmt_f64(self.opt_beta2));
        map.insert("opt.eps", fmt_f64(self.opt_eps));
        map.insert("opt.clip_norm", fmt_f64(self.opt_clip_norm));
        map.insert(
            "opt.decay_milestones",
            self.opt_decay_milestones
                .iter()
                .map(|m| fmt_f64(*m))
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("opt.decay_factor", fmt_f64(self.opt_decay_factor));
        map.insert("infer.lambda", fmt_f64(self.infer_lambda));
        map.insert("infer.conf_thresh", fmt_f64(self.infer_conf_thresh));
        map.insert("infer.reject_thresh", fmt_f64(self.infer_reject_thresh));
        map.insert("infer.overlap_keep", fmt_f64(self.infer_overlap_keep));
        map.insert("infer.min_area", self.infer_min_area.to_string());
        map.insert("infer.top_k", self.infer_top_k.to_string());
        map.insert(
            "train.cache_frozen_features",
            self.train_cache_frozen_features.to_string(),
        );
        map.insert("model.seed", self.model_seed.to_string());
        map.into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hash used to guard checkpoint/config compatibility.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_canonical_string().as_bytes())
    }
}

fn fmt_f64(v: f64) -> String {
    // canonical float formatting: shortest round-trip representation
    format!("{v}")
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_names(v: &str) -> Vec<String> {
    v.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean for {key}: {v:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| Error::Config(format!("invalid list entry for {key}: {s:?}")))
        })
        .collect()
}
