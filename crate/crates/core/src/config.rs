//! Flat `section.key = value` pipeline configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be known and
//! may appear once; diagnostics carry the line number.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::SceneSpec;
use crate::enet::InputChannel;
use crate::error::{bail, Error, Result};
use crate::optim::{AdamHyper, FusedTrainConfig, TrainConfig};
use crate::post::PostConfig;
use crate::stain::StainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub stain: StainConfig,
    pub input: InputChannel,
    pub train: FusedTrainConfig,
    pub post: PostConfig,
    pub iou_t: f64,
    /// Default checkpoint directory for `infer` when none is given.
    pub checkpoints: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stain: StainConfig::default(),
            input: InputChannel::Hematoxylin,
            train: FusedTrainConfig::default(),
            post: PostConfig::default(),
            iou_t: 0.5,
            checkpoints: None,
        }
    }
}

fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("line {line}: {key}: cannot parse {v:?}")))
}

fn triple(line: usize, key: &str, v: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = v.split_whitespace().map(|p| num(line, key, p)).collect::<Result<_>>()?;
    match parts[..] {
        [a, b, c] => Ok([a, b, c]),
        [a] => Ok([a; 3]),
        _ => bail!(Config, "line {line}: {key}: expected 1 or 3 numbers, got {v:?}"),
    }
}

fn flag(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!(Config, "line {line}: {key}: expected true or false, got {v:?}"),
    }
}

/// `HxW` as in `96x128`.
pub fn parse_size(v: &str) -> Option<(usize, usize)> {
    let (h, w) = v.split_once('x')?;
    let (h, w) = (h.trim().parse().ok()?, w.trim().parse().ok()?);
    (h > 0 && w > 0).then_some((h, w))
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let (mut h_dir, mut e_dir) = (cfg.stain.stains[0], cfg.stain.stains[1]);
        let mut seen = std::collections::HashMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                bail!(Config, "line {line}: expected `section.key = value`, got {body:?}");
            };
            let (key, v) = (key.trim(), value.trim());
            if let Some(first) = seen.insert(key.to_string(), line) {
                bail!(Config, "line {line}: {key} already set on line {first}");
            }
            let t = &mut cfg.train.train;
            match key {
                "stain.hematoxylin" => h_dir = triple(line, key, v)?,
                "stain.eosin" => e_dir = triple(line, key, v)?,
                "stain.background" => cfg.stain.background = triple(line, key, v)?,
                "stain.od_floor" => cfg.stain.od_floor = num(line, key, v)?,
                "stain.norm_floor" => cfg.stain.norm_floor = num(line, key, v)?,
                "stain.percentile" => cfg.stain.percentile = num(line, key, v)?,
                "model.width" => cfg.train.width = num(line, key, v)?,
                "model.boundary_thickness" => cfg.train.boundary_thickness = num(line, key, v)?,
                "model.dropout" => t.dropout_rate = num(line, key, v)?,
                "model.separate_contacts" => cfg.train.separate_contacts = flag(line, key, v)?,
                "model.input" => cfg.input = v.parse().map_err(|e: Error| Error::Config(format!("line {line}: {e}")))?,
                "train.batch_size" => t.batch_size = num(line, key, v)?,
                "train.epochs" => t.epochs = num(line, key, v)?,
                "train.lr" => t.adam.lr = num(line, key, v)?,
                "train.l2" => t.adam.l2 = num(line, key, v)?,
                "train.beta1" => t.adam.beta1 = num(line, key, v)?,
                "train.beta2" => t.adam.beta2 = num(line, key, v)?,
                "train.epsilon" => t.adam.epsilon = num(line, key, v)?,
                "train.seed" => t.seed = num(line, key, v)?,
                "train.class_weights" => {
                    t.class_weights = if v == "auto" {
                        None
                    } else {
                        let w: Vec<f64> = v.split_whitespace().map(|p| num(line, key, p)).collect::<Result<_>>()?;
                        match w[..] {
                            [a, b] => Some([a, b]),
                            _ => bail!(Config, "line {line}: {key}: expected `auto` or two numbers"),
                        }
                    }
                }
                "train.patch" => {
                    cfg.train.patch = if v == "none" {
                        None
                    } else {
                        Some(parse_size(v).ok_or_else(|| Error::Config(format!("line {line}: {key}: expected HxW or none")))?)
                    }
                }
                "train.cache_stage2" => cfg.train.cache_stage2 = flag(line, key, v)?,
                "post.prob_threshold" => cfg.post.prob_threshold = num(line, key, v)?,
                "post.marker_h" => cfg.post.marker_h = if v == "inf" { u32::MAX } else { num(line, key, v)? },
                "post.min_area" => cfg.post.min_area = num(line, key, v)?,
                "eval.iou_t" => cfg.iou_t = num(line, key, v)?,
                "paths.checkpoints" => cfg.checkpoints = Some(PathBuf::from(v)),
                _ => bail!(Config, "line {line}: unknown key {key:?}"),
            }
        }
        let background = cfg.stain.background;
        let (od_floor, norm_floor, percentile) = (cfg.stain.od_floor, cfg.stain.norm_floor, cfg.stain.percentile);
        cfg.stain = StainConfig { background, od_floor, norm_floor, percentile, ..StainConfig::new(h_dir, e_dir)? };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.stain;
        if s.background.iter().any(|b| !(*b >= 1.0 && b.is_finite())) {
            bail!(Config, "stain.background must be at least 1");
        }
        if !(s.od_floor >= 0.0 && s.norm_floor > 0.0 && s.percentile > 0.0 && s.percentile <= 1.0) {
            bail!(Config, "stain floors must be non-negative and the percentile in (0, 1]");
        }
        if !(self.train.width > 0.0 && self.train.width.is_finite()) {
            bail!(Config, "model.width must be positive");
        }
        if self.train.boundary_thickness == 0 {
            bail!(Config, "model.boundary_thickness must be at least 1");
        }
        if let Some((h, w)) = self.train.patch {
            if h % crate::enet::SPATIAL_FACTOR != 0 || w % crate::enet::SPATIAL_FACTOR != 0 {
                bail!(Config, "train.patch {h}x{w} must be a multiple of {}", crate::enet::SPATIAL_FACTOR);
            }
        }
        if !(self.iou_t > 0.0 && self.iou_t < 1.0) {
            bail!(Config, "eval.iou_t must lie in (0, 1)");
        }
        self.train.train.validate()?;
        self.post.validate()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let v3 = |v: [f64; 3]| format!("{} {} {}", v[0], v[1], v[2]);
        let t: &TrainConfig = &self.train.train;
        let a: &AdamHyper = &t.adam;
        let lines = [
            ("stain.hematoxylin", v3(self.stain.stains[0])),
            ("stain.eosin", v3(self.stain.stains[1])),
            ("stain.background", v3(self.stain.background)),
            ("stain.od_floor", self.stain.od_floor.to_string()),
            ("stain.norm_floor", self.stain.norm_floor.to_string()),
            ("stain.percentile", self.stain.percentile.to_string()),
            ("model.width", self.train.width.to_string()),
            ("model.boundary_thickness", self.train.boundary_thickness.to_string()),
            ("model.dropout", t.dropout_rate.to_string()),
            ("model.separate_contacts", self.train.separate_contacts.to_string()),
            ("model.input", self.input.as_str().to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.lr", a.lr.to_string()),
            ("train.l2", a.l2.to_string()),
            ("train.beta1", a.beta1.to_string()),
            ("train.beta2", a.beta2.to_string()),
            ("train.epsilon", a.epsilon.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.class_weights", t.class_weights.map_or("auto".into(), |w| format!("{} {}", w[0], w[1]))),
            ("train.patch", self.train.patch.map_or("none".into(), |(h, w)| format!("{h}x{w}"))),
            ("train.cache_stage2", self.train.cache_stage2.to_string()),
            ("post.prob_threshold", self.post.prob_threshold.to_string()),
            ("post.marker_h", if self.post.marker_h == u32::MAX { "inf".into() } else { self.post.marker_h.to_string() }),
            ("post.min_area", self.post.min_area.to_string()),
            ("eval.iou_t", self.iou_t.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        if let Some(p) = &self.checkpoints {
            let _ = writeln!(s, "paths.checkpoints = {}", p.display());
        }
        s
    }
}

fn pair(line: usize, key: &str, v: &str) -> Result<(f64, f64)> {
    let parts: Vec<f64> = v.split_whitespace().map(|p| num(line, key, p)).collect::<Result<_>>()?;
    match parts[..] {
        [a, b] if a <= b => Ok((a, b)),
        _ => bail!(Config, "line {line}: {key}: expected `lo hi`, got {v:?}"),
    }
}

/// Scene-generator overrides as `scene.key = value` lines on top of
/// `base`. Dimensions and seed are not settable here.
pub fn parse_scene_spec(text: &str, base: SceneSpec) -> Result<SceneSpec> {
    let mut s = base;
    let mut seen = std::collections::HashMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            bail!(Config, "line {line}: expected `scene.key = value`, got {body:?}");
        };
        let (key, v) = (key.trim(), value.trim());
        if let Some(first) = seen.insert(key.to_string(), line) {
            bail!(Config, "line {line}: {key} already set on line {first}");
        }
        match key {
            "scene.nucleus_count" => s.nucleus_count = num(line, key, v)?,
            "scene.radius" => s.radius = pair(line, key, v)?,
            "scene.eccentricity" => s.eccentricity = pair(line, key, v)?,
            "scene.phenotype_mix" => s.phenotype_mix = triple(line, key, v)?,
            "scene.touching_pair_fraction" => s.touching_pair_fraction = num(line, key, v)?,
            "scene.pair_overlap" => s.pair_overlap = pair(line, key, v)?,
            "scene.hyper_level" => s.hyper_level = pair(line, key, v)?,
            "scene.normal_level" => s.normal_level = pair(line, key, v)?,
            "scene.vesicular_rim" => s.vesicular_rim = pair(line, key, v)?,
            "scene.vesicular_core" => s.vesicular_core = pair(line, key, v)?,
            "scene.rim_width" => s.rim_width = num(line, key, v)?,
            "scene.eosin_base" => s.eosin_base = num(line, key, v)?,
            "scene.eosin_texture" => s.eosin_texture = num(line, key, v)?,
            "scene.hematoxylin_background" => s.hematoxylin_background = num(line, key, v)?,
            "scene.noise_sigma" => s.noise_sigma = num(line, key, v)?,
            _ => bail!(Config, "line {line}: unknown key {key:?}"),
        }
    }
    s.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_overrides() {
        let s = parse_scene_spec("scene.nucleus_count = 5\nscene.radius = 4 6\n", SceneSpec::default()).unwrap();
        assert_eq!((s.nucleus_count, s.radius), (5, (4.0, 6.0)));
        assert!(parse_scene_spec("scene.radius = 6 4\n", SceneSpec::default()).is_err());
        assert!(parse_scene_spec("scene.height = 6\n", SceneSpec::default()).is_err());
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(PipelineConfig::parse("# nothing\n\n").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let cfg = PipelineConfig::parse(
            "train.epochs = 3\ntrain.patch = 32x32 # tiles\ntrain.class_weights = 1 1.5\npost.marker_h = inf\n\
             stain.hematoxylin = 0.6 0.7 0.3\nmodel.input = grayscale\npaths.checkpoints = /tmp/ck\n",
        )
        .unwrap();
        assert_eq!(cfg.train.train.epochs, 3);
        assert_eq!(cfg.train.patch, Some((32, 32)));
        assert_eq!(cfg.post.marker_h, u32::MAX);
        assert_eq!(PipelineConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(PipelineConfig::parse(&PipelineConfig::default().to_text()).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let cases = [
            ("train.epochs = 3\nmodel.colour = red\n", "line 2"),
            ("\n\ntrain.lr = fast\n", "line 3"),
            ("post.min_area = 3\npost.min_area = 4\n", "line 2"),
            ("justtext\n", "line 1"),
            ("train.patch = 30x30\n", "multiple"),
            ("stain.hematoxylin = 1 0 0\nstain.eosin = 2 0 0\n", "collinear"),
        ];
        for (text, needle) in cases {
            match PipelineConfig::parse(text) {
                Err(Error::Config(m)) => assert!(m.contains(needle), "{m}"),
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }
}
