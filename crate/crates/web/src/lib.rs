//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The three networks are small desk-scale checkpoints embedded at build
//! time, so everything runs locally in the page.

use wasm_bindgen::prelude::*;

use nucleoseg::data::{generate_scene, object_prf, pixel_prf, touching_separation_rate, SceneSpec};
use nucleoseg::enet::{network_input, FusedMaps, FusedPipeline, InputChannel};
use image::RgbImage;
use nucleoseg::optim::read_checkpoint_from;
use nucleoseg::post::{
    distance_transform, extract_markers, finalize_instances, threshold_prob, watershed, BinaryMask, DistanceMap, LabelMap,
    PostConfig,
};
use nucleoseg::stain::{compose, decompose, StainConfig, StainImage};
use nucleoseg::{Error, Result};

const REGION: &[u8] = include_bytes!("../assets/region.nst");
const BOUNDARY: &[u8] = include_bytes!("../assets/boundary.nst");
const FUSION: &[u8] = include_bytes!("../assets/fusion.nst");

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn unknown(what: &str, v: &str) -> Error {
    Error::Config(format!("unknown {what} {v:?}"))
}

/// Fixed colours for instance ids, cycling.
fn colour(id: u32) -> [u8; 3] {
    const P: [[u8; 3]; 8] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
    ];
    P[(id as usize - 1) % P.len()]
}

fn gray(values: impl Iterator<Item = f64>, scale: f64) -> Vec<u8> {
    values
        .flat_map(|v| {
            let g = (255.0 * (1.0 - (v / scale).clamp(0.0, 1.0))).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

fn labels_rgba(l: &LabelMap) -> Vec<u8> {
    l.ids.iter().flat_map(|&id| if id == 0 { [0, 0, 0, 255] } else { let [r, g, b] = colour(id); [r, g, b, 255] }).collect()
}

/// One synthetic scene and everything derived from it.
pub struct Session {
    pipeline: FusedPipeline,
    rgb: RgbImage,
    truth: LabelMap,
    pairs: Vec<(u32, u32)>,
    stains: StainImage,
    maps: FusedMaps,
    mask: BinaryMask,
    dist: DistanceMap,
    labels: LabelMap,
}

impl Session {
    /// Loads the embedded networks and renders the scene for seed 1.
    pub fn new() -> Result<Session> {
        let load = read_checkpoint_from::<&[u8]>;
        let stain = StainConfig::default();
        let pipeline = FusedPipeline::new(load(REGION)?, load(BOUNDARY)?, load(FUSION)?, stain, PostConfig::default())?;
        let empty = LabelMap::empty(1, 1);
        let mut d = Session {
            pipeline,
            rgb: RgbImage::new(1, 1),
            truth: empty.clone(),
            pairs: Vec::new(),
            stains: StainImage::zeros(1, 1),
            maps: FusedMaps { height: 1, width: 1, region: vec![0.0], boundary: vec![0.0], fused: vec![0.0] },
            mask: BinaryMask::empty(1, 1),
            dist: DistanceMap { height: 1, width: 1, values: vec![0] },
            labels: empty,
        };
        d.generate(1, 12, 0.4, 0.4)?;
        Ok(d)
    }

    /// New 96x128 scene. `vesicular` is the fraction of pale-interior
    /// nuclei; the remainder is split evenly between the other phenotypes.
    pub fn generate(&mut self, seed: u32, nuclei: u32, touching: f64, vesicular: f64) -> Result<()> {
        let v = vesicular.clamp(0.0, 1.0);
        let spec = SceneSpec {
            nucleus_count: nuclei.max(1) as usize,
            touching_pair_fraction: touching.clamp(0.0, 1.0),
            phenotype_mix: [(1.0 - v) / 2.0, v, (1.0 - v) / 2.0],
            seed: seed as u64,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec, &self.pipeline.stain)?;
        self.rgb = scene.rgb;
        self.truth = scene.annotation.instances;
        self.pairs = scene.annotation.touching_pairs;
        self.stains = decompose(&self.rgb, &self.pipeline.stain)?;
        self.maps = self.pipeline.fused_infer(&self.rgb)?;
        self.segment("fused", 0.5, 2, 30)?;
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.rgb.width()
    }

    pub fn height(&self) -> u32 {
        self.rgb.height()
    }

    /// Threshold -> distance transform -> h-maxima markers -> watershed on
    /// either the fused probability map or the normalized hematoxylin
    /// channel. Returns a one-line score summary against the ground truth.
    pub fn segment(&mut self, source: &str, threshold: f64, marker_h: u32, min_area: u32) -> Result<String> {
        let (h, w) = (self.maps.height, self.maps.width);
        let prob: Vec<f32> = match source {
            "fused" => self.maps.fused.clone(),
            "region" => self.maps.region.clone(),
            "hematoxylin" => {
                network_input(&self.rgb, InputChannel::Hematoxylin, &self.pipeline.stain)?.data().to_vec()
            }
            other => return Err(unknown("source", other)),
        };
        let cfg = PostConfig { prob_threshold: threshold, marker_h, min_area: min_area as usize };
        cfg.validate()?;
        self.mask = threshold_prob(&prob, h, w, cfg.prob_threshold)?;
        self.dist = distance_transform(&self.mask);
        let markers = extract_markers(&self.dist, &self.mask, cfg.marker_h);
        self.labels = finalize_instances(&watershed(&self.dist, &markers, &self.mask)?, cfg.min_area);

        let px = pixel_prf(&self.mask, &self.truth.foreground())?;
        let (obj, _) = object_prf(&self.labels, &self.truth, 0.5)?;
        let (sep, total, _) = touching_separation_rate(&self.labels, &self.truth, &self.pairs, 0.5)?;
        Ok(format!(
            "{} instances ({} true) | pixel F {:.3} | object F {:.3} | touching pairs split {sep}/{total}",
            self.labels.max_id(),
            self.truth.max_id(),
            px.f_score,
            obj.f_score
        ))
    }

    /// RGBA pixels for one view: rgb, hematoxylin, eosin, reconstruction,
    /// truth, region, boundary, fused, distance, labels, overlay.
    pub fn rgba(&self, view: &str) -> Result<Vec<u8>> {
        let probs = |p: &[f32]| gray(p.iter().map(|&v| v as f64), 1.0);
        Ok(match view {
            "rgb" => self.rgb.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect(),
            "hematoxylin" => gray(self.stains.hematoxylin.iter().copied(), 1.3),
            "eosin" => gray(self.stains.eosin.iter().copied(), 1.3),
            "reconstruction" => compose(&self.stains, &self.pipeline.stain)?.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect(),
            "truth" => labels_rgba(&self.truth),
            "region" => probs(&self.maps.region),
            "boundary" => probs(&self.maps.boundary),
            "fused" => probs(&self.maps.fused),
            "distance" => {
                let fg = |i: usize| self.mask.bits[i];
                let max = (0..self.dist.values.len()).filter(|&i| fg(i)).map(|i| self.dist.values[i]).max().unwrap_or(1).max(1);
                let scale = (max as f64).sqrt();
                gray((0..self.dist.values.len()).map(|i| if fg(i) { (self.dist.values[i] as f64).sqrt() } else { 0.0 }), scale)
            }
            "labels" => labels_rgba(&self.labels),
            "overlay" => {
                let edge = self.labels.contours();
                let mut out: Vec<u8> = self.rgb.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect();
                for (i, &id) in self.labels.ids.iter().enumerate() {
                    if id != 0 && edge.bits[i] {
                        out[4 * i..4 * i + 3].copy_from_slice(&colour(id));
                    }
                }
                out
            }
            other => return Err(unknown("view", other)),
        })
    }
}

/// Browser handle around a [`Session`].
#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> std::result::Result<Demo, JsError> {
        Session::new().map(Demo).map_err(js)
    }

    pub fn generate(&mut self, seed: u32, nuclei: u32, touching: f64, vesicular: f64) -> std::result::Result<(), JsError> {
        self.0.generate(seed, nuclei, touching, vesicular).map_err(js)
    }

    pub fn width(&self) -> u32 {
        self.0.width()
    }

    pub fn height(&self) -> u32 {
        self.0.height()
    }

    pub fn segment(&mut self, source: &str, threshold: f64, marker_h: u32, min_area: u32) -> std::result::Result<String, JsError> {
        self.0.segment(source, threshold, marker_h, min_area).map_err(js)
    }

    pub fn rgba(&self, view: &str) -> std::result::Result<Vec<u8>, JsError> {
        self.0.rgba(view).map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_networks_load_and_views_render() {
        let mut d = Session::new().unwrap();
        let n = (d.width() * d.height() * 4) as usize;
        for v in ["rgb", "hematoxylin", "eosin", "reconstruction", "truth", "region", "boundary", "fused", "distance", "labels", "overlay"] {
            assert_eq!(d.rgba(v).unwrap().len(), n, "{v}");
        }
        let s = d.segment("hematoxylin", 0.4, 1, 10).unwrap();
        assert!(s.contains("touching pairs split"), "{s}");
        assert!(d.rgba("nope").is_err());
        d.generate(7, 20, 0.6, 1.0).unwrap();
    }
}
