//! Patch tiling, annotation sidecars, manifests and the train/test split.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::error::{bail, Result};
use crate::post::LabelMap;
use crate::rng::Rng;

use super::scene::{ids_adjacent, Annotation, Nucleus};

/// One tile of a larger image, with instance ids renumbered `1..=K`.
#[derive(Clone, Debug)]
pub struct Patch {
    pub origin: (usize, usize),
    pub rgb: RgbImage,
    pub annotation: Annotation,
}

/// Non-overlapping grid of `ph x pw` tiles; partial border tiles are dropped.
pub fn tile_patches(rgb: &RgbImage, ann: &Annotation, ph: usize, pw: usize) -> Result<Vec<Patch>> {
    let (h, w) = (rgb.height() as usize, rgb.width() as usize);
    if ph == 0 || pw == 0 || ph % 4 != 0 || pw % 4 != 0 {
        bail!(Shape, "patch dims {ph}x{pw} must be positive multiples of 4");
    }
    if ph > h || pw > w {
        bail!(Shape, "patch {ph}x{pw} is larger than image {h}x{w}");
    }
    if ann.instances.height != h || ann.instances.width != w {
        bail!(Shape, "annotation does not match image dims");
    }
    let mut out = Vec::new();
    for ty in 0..h / ph {
        for tx in 0..w / pw {
            let (y0, x0) = (ty * ph, tx * pw);
            let crop = image::imageops::crop_imm(rgb, x0 as u32, y0 as u32, pw as u32, ph as u32).to_image();
            let raw = ann.instances.crop(y0, x0, ph, pw);
            let instances = raw.renumbered();
            let mut map = HashMap::new();
            for (old, new) in raw.ids.iter().zip(&instances.ids) {
                if *old != 0 {
                    map.insert(*old, *new);
                }
            }
            let mut nuclei: Vec<Nucleus> = ann
                .nuclei
                .iter()
                .filter_map(|n| {
                    map.get(&n.id).map(|&id| Nucleus { id, center: (n.center.0 - y0 as f64, n.center.1 - x0 as f64), ..n.clone() })
                })
                .collect();
            nuclei.sort_by_key(|n| n.id);
            let touching_pairs = ann
                .touching_pairs
                .iter()
                .filter_map(|(a, b)| Some((*map.get(a)?, *map.get(b)?)))
                .filter(|(a, b)| ids_adjacent(&instances, *a, *b))
                .collect();
            out.push(Patch { origin: (y0, x0), rgb: crop, annotation: Annotation { instances, nuclei, touching_pairs } });
        }
    }
    Ok(out)
}

/// Sidecar text format: `nucleus id phenotype cy cx major minor angle` and
/// `touching a b` records, tab separated.
pub fn write_annotation_sidecar(ann: &Annotation, path: &Path) -> Result<()> {
    let mut s = String::new();
    for n in &ann.nuclei {
        writeln!(
            s,
            "nucleus\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            n.id, n.phenotype, n.center.0, n.center.1, n.axes.0, n.axes.1, n.orientation
        )
        .expect("write to string");
    }
    for (a, b) in &ann.touching_pairs {
        writeln!(s, "touching\t{a}\t{b}").expect("write to string");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Nucleus records and touching pairs from a sidecar.
pub fn read_annotation_sidecar(path: &Path) -> Result<(Vec<Nucleus>, Vec<(u32, u32)>)> {
    let text = fs::read_to_string(path)?;
    let (mut nuclei, mut pairs) = (Vec::new(), Vec::new());
    for (ln, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || crate::Error::Format(format!("{}:{}: malformed record", path.display(), ln + 1));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        match f.as_slice() {
            ["nucleus", id, ph, cy, cx, a, b, t] => nuclei.push(Nucleus {
                id: id.parse().map_err(|_| bad())?,
                phenotype: ph.parse()?,
                center: (num(cy)?, num(cx)?),
                axes: (num(a)?, num(b)?),
                orientation: num(t)?,
            }),
            ["touching", a, b] => pairs.push((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?)),
            [""] => {}
            _ => return Err(bad()),
        }
    }
    Ok((nuclei, pairs))
}

/// Pairs of distinct instances sharing an 8-connected frontier, used when
/// no sidecar is available.
pub fn adjacent_pairs(l: &LabelMap) -> Vec<(u32, u32)> {
    let (h, w) = (l.height, l.width);
    let mut set = std::collections::BTreeSet::new();
    for i in 0..h * w {
        let a = l.ids[i];
        if a == 0 {
            continue;
        }
        for j in crate::post::maps::neighbours8(i, h, w) {
            let b = l.ids[j];
            if b != 0 && b != a {
                set.insert((a.min(b), a.max(b)));
            }
        }
    }
    set.into_iter().collect()
}

pub fn sidecar_path(labels: &Path) -> PathBuf {
    let stem = labels.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = stem.strip_suffix("_labels").unwrap_or(&stem).to_string();
    labels.with_file_name(format!("{stem}.ann.tsv"))
}

/// Touching pairs for a label map: the sidecar's if present, otherwise
/// every adjacent pair.
pub fn touching_pairs_for(labels_path: &Path, labels: &LabelMap) -> Result<Vec<(u32, u32)>> {
    let side = sidecar_path(labels_path);
    if side.exists() {
        Ok(read_annotation_sidecar(&side)?.1)
    } else {
        Ok(adjacent_pairs(labels))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub rgb: PathBuf,
    pub labels: PathBuf,
    pub split: Split,
}

impl ManifestRecord {
    /// Source image key: the file stem with any `_pNN` patch suffix removed.
    pub fn source_key(&self) -> String {
        let stem = self.rgb.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match stem.rsplit_once("_p") {
            Some((base, n)) if !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()) => base.to_string(),
            _ => stem,
        }
    }
}

/// Records with paths relative to the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub base: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let [rgb, labels, split] = f.as_slice() else {
                bail!(Format, "{}:{}: expected 3 tab-separated fields", path.display(), ln + 1);
            };
            let split = match *split {
                "train" => Split::Train,
                "test" => Split::Test,
                other => bail!(Format, "{}:{}: unknown split {other:?}", path.display(), ln + 1),
            };
            records.push(ManifestRecord { rgb: rgb.into(), labels: labels.into(), split });
        }
        Ok(Self { base, records })
    }

    /// Fails with a data error naming the first record whose files are
    /// missing.
    pub fn check_paths(&self) -> Result<()> {
        for r in &self.records {
            for p in [&r.rgb, &r.labels] {
                if !self.resolve(p).exists() {
                    bail!(Data, "manifest entry {} does not exist", self.resolve(p).display());
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for r in &self.records {
            writeln!(s, "{}\t{}\t{}", r.rgb.display(), r.labels.display(), r.split.as_str()).expect("write to string");
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == which)
    }
}

/// Seeded shuffle of source images; all patches of one source share a split.
/// The first `round(ratio * sources)` shuffled sources train.
pub fn split_dataset(manifest: &Manifest, ratio: f64, seed: u64) -> Result<Manifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        bail!(Parameter, "split ratio must lie in (0, 1), got {ratio}");
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        groups.entry(r.source_key()).or_default().push(i);
    }
    let mut keys: Vec<String> = groups.keys().cloned().collect();
    let n_train = (ratio * keys.len() as f64).round() as usize;
    if n_train == 0 || n_train == keys.len() {
        bail!(Data, "{} source images cannot be split at ratio {ratio}", keys.len());
    }
    Rng::new(seed).shuffle(&mut keys);
    let mut out = manifest.clone();
    for (k, key) in keys.iter().enumerate() {
        let split = if k < n_train { Split::Train } else { Split::Test };
        for &i in &groups[key] {
            out.records[i].split = split;
        }
    }
    Ok(out)
}
