//! Synthetic H&E-like scenes with exact instance annotations.

use std::fmt;
use std::str::FromStr;

use image::RgbImage;

use crate::error::{bail, Result};
use crate::post::LabelMap;
use crate::rng::Rng;
use crate::stain::{compose, StainConfig, StainImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phenotype {
    /// Uniformly dark chromatin.
    Hyperchromatic,
    /// Dark rim around a pale interior.
    Vesicular,
    Normal,
}

impl Phenotype {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phenotype::Hyperchromatic => "hyperchromatic",
            Phenotype::Vesicular => "vesicular",
            Phenotype::Normal => "normal",
        }
    }
}

impl fmt::Display for Phenotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phenotype {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hyperchromatic" => Ok(Phenotype::Hyperchromatic),
            "vesicular" => Ok(Phenotype::Vesicular),
            "normal" => Ok(Phenotype::Normal),
            other => bail!(Format, "unknown phenotype {other:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub nucleus_count: usize,
    /// Semi-major axis range in pixels.
    pub radius: (f64, f64),
    pub eccentricity: (f64, f64),
    /// Fractions of hyperchromatic, vesicular and normal nuclei.
    pub phenotype_mix: [f64; 3],
    /// Fraction of nuclei placed as members of overlapping pairs.
    pub touching_pair_fraction: f64,
    /// Overlap of a touching pair as a fraction of the smaller nucleus area.
    pub pair_overlap: (f64, f64),
    pub hyper_level: (f64, f64),
    pub normal_level: (f64, f64),
    pub vesicular_rim: (f64, f64),
    pub vesicular_core: (f64, f64),
    pub rim_width: f64,
    pub eosin_base: f64,
    pub eosin_texture: f64,
    pub hematoxylin_background: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 96,
            width: 128,
            nucleus_count: 12,
            radius: (5.0, 9.0),
            eccentricity: (0.0, 0.75),
            phenotype_mix: [0.3, 0.3, 0.4],
            touching_pair_fraction: 0.4,
            pair_overlap: (0.1, 0.4),
            hyper_level: (1.0, 1.3),
            normal_level: (0.55, 0.85),
            vesicular_rim: (0.9, 1.2),
            vesicular_core: (0.1, 0.25),
            rim_width: 1.6,
            eosin_base: 0.35,
            eosin_texture: 0.3,
            hematoxylin_background: 0.06,
            noise_sigma: 0.04,
            seed: 0,
        }
    }
}

/// Concentrations are clipped here after noise so the 8-bit rendering stays
/// well inside the invertible range.
pub const MAX_CONCENTRATION: f64 = 1.4;

/// Smallest gap in pixels kept between nuclei that are not a touching pair.
const SEPARATION: f64 = 2.0;
const PLACEMENT_TRIES: usize = 2000;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.phenotype_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.phenotype_mix.iter().any(|f| *f < 0.0) {
            bail!(Config, "phenotype fractions must be non-negative and sum to 1, got {:?}", self.phenotype_mix);
        }
        if self.radius.0 < 3.0 || self.radius.1 < self.radius.0 {
            bail!(Config, "radius range {:?} must satisfy 3 <= min <= max", self.radius);
        }
        if !(0.0..1.0).contains(&self.eccentricity.0) || !(self.eccentricity.0..1.0).contains(&self.eccentricity.1) {
            bail!(Config, "eccentricity range {:?} must lie in [0, 1)", self.eccentricity);
        }
        if !(0.0..=1.0).contains(&self.touching_pair_fraction) {
            bail!(Config, "touching pair fraction must lie in [0, 1]");
        }
        if self.height == 0 || self.width == 0 {
            bail!(Config, "scene dims must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nucleus {
    pub id: u32,
    pub phenotype: Phenotype,
    pub center: (f64, f64),
    /// Semi-axes (major, minor) in pixels.
    pub axes: (f64, f64),
    /// Angle of the major axis from the x axis, radians.
    pub orientation: f64,
}

impl Nucleus {
    /// Normalized elliptical radius of pixel centre `(y, x)`; inside iff <= 1.
    pub fn rho(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let (s, c) = self.orientation.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.axes.0).powi(2) + (v / self.axes.1).powi(2)).sqrt()
    }

    /// Distance from the centre to the outline along direction `angle`.
    pub fn extent(&self, angle: f64) -> f64 {
        let (s, c) = (angle - self.orientation).sin_cos();
        1.0 / ((c / self.axes.0).powi(2) + (s / self.axes.1).powi(2)).sqrt()
    }

    fn bbox(&self, h: usize, w: usize, pad: f64) -> (usize, usize, usize, usize) {
        let r = self.axes.0 + pad;
        let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64 - 1.0) as usize;
        (
            clamp((self.center.0 - r).floor(), h),
            clamp((self.center.0 + r).ceil(), h),
            clamp((self.center.1 - r).floor(), w),
            clamp((self.center.1 + r).ceil(), w),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub instances: LabelMap,
    pub nuclei: Vec<Nucleus>,
    pub touching_pairs: Vec<(u32, u32)>,
}

/// Owner of each pixel: the nucleus with the smallest normalized radius
/// among those containing the pixel centre, lower id on ties.
pub fn render_instances(nuclei: &[Nucleus], height: usize, width: usize) -> LabelMap {
    let mut ids = vec![0u32; height * width];
    let mut best = vec![f64::INFINITY; height * width];
    for n in nuclei {
        let (y0, y1, x0, x1) = n.bbox(height, width, 1.0);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let r = n.rho(y as f64, x as f64);
                let i = y * width + x;
                if r <= 1.0 && (r < best[i] || (r == best[i] && n.id < ids[i])) {
                    best[i] = r;
                    ids[i] = n.id;
                }
            }
        }
    }
    LabelMap { height, width, ids }
}

impl Annotation {
    /// Re-renders the geometry and compares it with the stored label map;
    /// also checks that every id is present and every pair touches.
    pub fn check_consistency(&self) -> Result<()> {
        let l = &self.instances;
        if render_instances(&self.nuclei, l.height, l.width) != *l {
            bail!(Data, "instance map does not match the recorded geometry");
        }
        let areas = l.areas();
        for n in &self.nuclei {
            if areas.get(n.id as usize).copied().unwrap_or(0) == 0 {
                bail!(Data, "nucleus {} has no pixels", n.id);
            }
        }
        for &(a, b) in &self.touching_pairs {
            if !ids_adjacent(l, a, b) {
                bail!(Data, "touching pair ({a}, {b}) shares no frontier");
            }
        }
        Ok(())
    }
}

/// Whether some pixel of `a` has an 8-neighbour of `b`.
pub fn ids_adjacent(l: &LabelMap, a: u32, b: u32) -> bool {
    let (h, w) = (l.height, l.width);
    (0..h * w).any(|i| l.ids[i] == a && crate::post::maps::neighbours8(i, h, w).any(|j| l.ids[j] == b))
}

/// Generated scene: RGB rendering, annotation, and the concentration
/// fields it was rendered from.
#[derive(Clone, Debug)]
pub struct Scene {
    pub rgb: RgbImage,
    pub annotation: Annotation,
    pub stains: StainImage,
}

fn pick_phenotype(mix: &[f64; 3], rng: &mut Rng) -> Phenotype {
    let u = rng.unit();
    if u < mix[0] {
        Phenotype::Hyperchromatic
    } else if u < mix[0] + mix[1] {
        Phenotype::Vesicular
    } else {
        Phenotype::Normal
    }
}

fn random_nucleus(spec: &SceneSpec, id: u32, center: (f64, f64), rng: &mut Rng) -> Nucleus {
    let a = rng.uniform(spec.radius.0, spec.radius.1);
    let e = rng.uniform(spec.eccentricity.0, spec.eccentricity.1);
    let b = (a * (1.0 - e * e).sqrt()).max(3.0).min(a);
    Nucleus {
        id,
        phenotype: pick_phenotype(&spec.phenotype_mix, rng),
        center,
        axes: (a, b),
        orientation: rng.uniform(0.0, std::f64::consts::PI),
    }
}

/// Pixels covered by both nuclei, over the area of the smaller one.
fn overlap_fraction(a: &Nucleus, b: &Nucleus, h: usize, w: usize) -> f64 {
    let (y0, y1, x0, x1) = a.bbox(h, w, 0.0);
    let (mut both, mut area_a, mut area_b) = (0usize, 0usize, 0usize);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (ia, ib) = (a.rho(y as f64, x as f64) <= 1.0, b.rho(y as f64, x as f64) <= 1.0);
            area_a += ia as usize;
            both += (ia && ib) as usize;
        }
    }
    let (y0, y1, x0, x1) = b.bbox(h, w, 0.0);
    for y in y0..=y1 {
        for x in x0..=x1 {
            area_b += (b.rho(y as f64, x as f64) <= 1.0) as usize;
        }
    }
    let small = area_a.min(area_b);
    if small == 0 {
        0.0
    } else {
        both as f64 / small as f64
    }
}

/// Conservative clearance test on the bounding circles.
fn clear_of(n: &Nucleus, others: &[Nucleus]) -> bool {
    others.iter().all(|o| {
        let d = ((n.center.0 - o.center.0).powi(2) + (n.center.1 - o.center.1).powi(2)).sqrt();
        d > n.axes.0 + o.axes.0 + SEPARATION
    })
}

fn inside(n: &Nucleus, h: usize, w: usize) -> bool {
    let r = n.axes.0;
    n.center.0 - r >= 0.0 && n.center.1 - r >= 0.0 && n.center.0 + r <= h as f64 - 1.0 && n.center.1 + r <= w as f64 - 1.0
}

fn place_nuclei(spec: &SceneSpec, rng: &mut Rng) -> Result<(Vec<Nucleus>, Vec<(u32, u32)>)> {
    let (h, w) = (spec.height, spec.width);
    let pairs = ((spec.nucleus_count as f64 * spec.touching_pair_fraction) / 2.0).round() as usize;
    let pairs = pairs.min(spec.nucleus_count / 2);
    let mut nuclei: Vec<Nucleus> = Vec::with_capacity(spec.nucleus_count);
    let mut touching = Vec::with_capacity(pairs);
    let random_center = |rng: &mut Rng| (rng.uniform(0.0, h as f64 - 1.0), rng.uniform(0.0, w as f64 - 1.0));
    for _ in 0..pairs {
        let (ia, ib) = (nuclei.len() as u32 + 1, nuclei.len() as u32 + 2);
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let a = random_nucleus(spec, ia, random_center(rng), rng);
            if !inside(&a, h, w) || !clear_of(&a, &nuclei) {
                continue;
            }
            let mut b = random_nucleus(spec, ib, a.center, rng);
            let angle = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
            // centre distance as a fraction of the summed extents along the
            // line joining the centres
            let d = (a.extent(angle) + b.extent(angle + std::f64::consts::PI)) * rng.uniform(0.55, 0.85);
            b.center = (a.center.0 + d * angle.sin(), a.center.1 + d * angle.cos());
            if !inside(&b, h, w) || !clear_of(&b, &nuclei) {
                continue;
            }
            let f = overlap_fraction(&a, &b, h, w);
            if !(spec.pair_overlap.0..=spec.pair_overlap.1).contains(&f) {
                continue;
            }
            let trial: Vec<Nucleus> = nuclei.iter().cloned().chain([a.clone(), b.clone()]).collect();
            let l = render_instances(&trial, h, w);
            if !owns_connected_region(&l, ia) || !owns_connected_region(&l, ib) || !ids_adjacent(&l, ia, ib) {
                continue;
            }
            nuclei.push(a);
            nuclei.push(b);
            touching.push((ia, ib));
            placed = true;
            break;
        }
        if !placed {
            bail!(Placement, "could not place touching pair {} of {pairs} in {h}x{w}", touching.len() + 1);
        }
    }
    while nuclei.len() < spec.nucleus_count {
        let id = nuclei.len() as u32 + 1;
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let n = random_nucleus(spec, id, random_center(rng), rng);
            if inside(&n, h, w) && clear_of(&n, &nuclei) {
                nuclei.push(n);
                placed = true;
                break;
            }
        }
        if !placed {
            bail!(Placement, "could not place nucleus {id} of {} in {h}x{w}", spec.nucleus_count);
        }
    }
    Ok((nuclei, touching))
}

fn owns_connected_region(l: &LabelMap, id: u32) -> bool {
    let mask = crate::post::BinaryMask { height: l.height, width: l.width, bits: l.ids.iter().map(|v| *v == id).collect() };
    crate::post::connected_components(&mask).max_id() == 1
}

/// Smooth random field in `[-1, 1]`: bilinear interpolation of a coarse
/// grid of uniform values.
fn value_noise(h: usize, w: usize, cell: usize, rng: &mut Rng) -> Vec<f64> {
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (gy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (gx, tx) = (fx.floor() as usize, fx.fract());
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(gy, gx) * (1.0 - tx) + g(gy, gx + 1) * tx;
            let bot = g(gy + 1, gx) * (1.0 - tx) + g(gy + 1, gx + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

struct Levels {
    fill: f64,
    rim: f64,
    core: f64,
}

pub fn generate_scene(spec: &SceneSpec, stain: &StainConfig) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let root = Rng::new(spec.seed);
    let (mut place_rng, mut shade_rng, mut tex_rng, mut noise_rng) = (root.fork(1), root.fork(2), root.fork(3), root.fork(4));
    let (nuclei, touching_pairs) = place_nuclei(spec, &mut place_rng)?;
    let instances = render_instances(&nuclei, h, w);

    let levels: Vec<Levels> = nuclei
        .iter()
        .map(|n| match n.phenotype {
            Phenotype::Hyperchromatic => {
                Levels { fill: shade_rng.uniform(spec.hyper_level.0, spec.hyper_level.1), rim: 0.0, core: 0.0 }
            }
            Phenotype::Normal => Levels { fill: shade_rng.uniform(spec.normal_level.0, spec.normal_level.1), rim: 0.0, core: 0.0 },
            Phenotype::Vesicular => Levels {
                fill: 0.0,
                rim: shade_rng.uniform(spec.vesicular_rim.0, spec.vesicular_rim.1),
                core: shade_rng.uniform(spec.vesicular_core.0, spec.vesicular_core.1),
            },
        })
        .collect();

    let coarse = value_noise(h, w, 16, &mut tex_rng);
    let fine = value_noise(h, w, 5, &mut tex_rng);
    let chromatin = value_noise(h, w, 3, &mut tex_rng);
    let mut stains = StainImage::zeros(h, w);
    for i in 0..h * w {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let tex = 0.6 * coarse[i] + 0.4 * fine[i];
        let mut e = spec.eosin_base + spec.eosin_texture * tex;
        let mut hc = spec.hematoxylin_background * (1.0 + 0.5 * fine[i]);
        let id = instances.ids[i];
        if id != 0 {
            let n = &nuclei[id as usize - 1];
            let lv = &levels[id as usize - 1];
            hc = match n.phenotype {
                Phenotype::Vesicular => {
                    let depth = (1.0 - n.rho(y, x)) * n.axes.1;
                    lv.rim * (-(depth / spec.rim_width).powi(2)).exp() + lv.core
                }
                _ => lv.fill * (1.0 + 0.08 * chromatin[i]),
            };
            e *= 0.4;
        }
        hc += spec.noise_sigma * noise_rng.normal();
        e += spec.noise_sigma * noise_rng.normal();
        stains.hematoxylin[i] = hc.clamp(0.0, MAX_CONCENTRATION);
        stains.eosin[i] = e.clamp(0.0, MAX_CONCENTRATION);
    }
    let rgb = compose(&stains, stain)?;
    let annotation = Annotation { instances, nuclei, touching_pairs };
    Ok(Scene { rgb, annotation, stains })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stain::decompose;

    fn spec(seed: u64) -> SceneSpec {
        SceneSpec { seed, ..SceneSpec::default() }
    }

    #[test]
    fn deterministic() {
        let cfg = StainConfig::default();
        let a = generate_scene(&spec(3), &cfg).unwrap();
        let b = generate_scene(&spec(3), &cfg).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.annotation, b.annotation);
        let c = generate_scene(&spec(4), &cfg).unwrap();
        assert_ne!(a.rgb, c.rgb);
    }

    #[test]
    fn ids_and_pairs() {
        let cfg = StainConfig::default();
        for seed in 0..10 {
            let s = SceneSpec { nucleus_count: 10, touching_pair_fraction: 0.3, ..spec(seed) };
            let sc = generate_scene(&s, &cfg).unwrap();
            assert_eq!(sc.annotation.instances.id_set(), (1..=10).collect::<Vec<_>>());
            assert!(!sc.annotation.touching_pairs.is_empty());
            sc.annotation.check_consistency().unwrap();
        }
    }

    #[test]
    fn consistency_check_catches_tampering() {
        let sc = generate_scene(&spec(1), &StainConfig::default()).unwrap();
        let mut ann = sc.annotation.clone();
        let i = ann.instances.ids.iter().position(|v| *v != 0).unwrap();
        ann.instances.ids[i] = 0;
        assert!(ann.check_consistency().is_err());
    }

    #[test]
    fn stain_recovery_of_generated_scene() {
        let cfg = StainConfig::default();
        for seed in 0..5 {
            let sc = generate_scene(&spec(seed), &cfg).unwrap();
            let d = decompose(&sc.rgb, &cfg).unwrap();
            let worst = d.hematoxylin.iter().zip(&sc.stains.hematoxylin).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(worst <= 0.03, "seed {seed}: {worst}");
        }
    }

    #[test]
    fn overcrowding_is_a_placement_error() {
        let s = SceneSpec { height: 24, width: 24, nucleus_count: 40, ..spec(0) };
        assert!(matches!(generate_scene(&s, &StainConfig::default()), Err(crate::Error::Placement(_))));
    }

    #[test]
    fn bad_specs() {
        let cfg = StainConfig::default();
        assert!(generate_scene(&SceneSpec { phenotype_mix: [0.5, 0.5, 0.5], ..spec(0) }, &cfg).is_err());
        assert!(generate_scene(&SceneSpec { radius: (2.0, 4.0), ..spec(0) }, &cfg).is_err());
    }
}
