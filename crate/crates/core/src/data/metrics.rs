//! Pixel and object level precision/recall/F, and the touching-pair
//! separation rate.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{bail, Result};
use crate::post::{BinaryMask, LabelMap};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

impl Prf {
    /// P = 0 without predicted positives, R = 0 without true positives,
    /// F = 0 when P + R = 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        Self::from_pr(ratio(tp, fp), ratio(tp, fn_))
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f_score = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { precision, recall, f_score }
    }
}

/// Confusion counts of a binary prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PixelCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl PixelCounts {
    pub fn of(pred: &BinaryMask, truth: &BinaryMask) -> Result<Self> {
        truth.same_dims(pred.height, pred.width)?;
        let mut c = Self::default();
        for (&p, &t) in pred.bits.iter().zip(&truth.bits) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.tp, self.fp, self.fn_)
    }
}

pub fn pixel_prf(pred: &BinaryMask, truth: &BinaryMask) -> Result<Prf> {
    Ok(PixelCounts::of(pred, truth)?.prf())
}

/// Intersection-over-union of every overlapping (pred, truth) id pair.
pub fn iou_table(pred: &LabelMap, truth: &LabelMap) -> Result<HashMap<(u32, u32), f64>> {
    if pred.height != truth.height || pred.width != truth.width {
        bail!(Shape, "prediction {}x{} vs truth {}x{}", pred.height, pred.width, truth.height, truth.width);
    }
    let (pa, ta) = (pred.areas(), truth.areas());
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&p, &t) in pred.ids.iter().zip(&truth.ids) {
        if p != 0 && t != 0 {
            *inter.entry((p, t)).or_default() += 1;
        }
    }
    Ok(inter
        .into_iter()
        .map(|((p, t), i)| ((p, t), i as f64 / (pa[p as usize] + ta[t as usize] - i) as f64))
        .collect())
}

/// Object-level scores: a prediction matches a truth instance at IoU >= t,
/// one-to-one, greedily by descending IoU.
pub fn object_prf(pred: &LabelMap, truth: &LabelMap, iou_t: f64) -> Result<(Prf, usize)> {
    let mut pairs: Vec<((u32, u32), f64)> = iou_table(pred, truth)?.into_iter().filter(|(_, v)| *v >= iou_t).collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let (mut used_p, mut used_t) = (std::collections::HashSet::new(), std::collections::HashSet::new());
    let mut matched = 0;
    for ((p, t), _) in pairs {
        if !used_p.contains(&p) && !used_t.contains(&t) {
            used_p.insert(p);
            used_t.insert(t);
            matched += 1;
        }
    }
    let (np, nt) = (pred.id_set().len(), truth.id_set().len());
    Ok((Prf::from_counts(matched, np - matched, nt - matched), matched))
}

/// A pair counts as separated when two distinct predicted instances match
/// its two members at IoU >= `iou_t`.
pub fn touching_separation(pred: &LabelMap, truth: &LabelMap, pairs: &[(u32, u32)], iou_t: f64) -> Result<(usize, usize)> {
    if !(iou_t > 0.0 && iou_t < 1.0) {
        bail!(Parameter, "IoU threshold must lie in (0, 1), got {iou_t}");
    }
    let table = iou_table(pred, truth)?;
    let matches = |t: u32| -> Vec<u32> { table.iter().filter(|((_, tt), v)| *tt == t && **v >= iou_t).map(|((p, _), _)| *p).collect() };
    let separated = pairs
        .iter()
        .filter(|(a, b)| {
            let (ma, mb) = (matches(*a), matches(*b));
            ma.iter().any(|p| mb.iter().any(|q| p != q))
        })
        .count();
    Ok((separated, pairs.len()))
}

pub fn touching_separation_rate(pred: &LabelMap, truth: &LabelMap, pairs: &[(u32, u32)], iou_t: f64) -> Result<(usize, usize, f64)> {
    let (s, t) = touching_separation(pred, truth, pairs, iou_t)?;
    Ok((s, t, if t == 0 { 0.0 } else { s as f64 / t as f64 }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEval {
    pub name: String,
    pub pixel: PixelCounts,
    pub object: Prf,
    pub separated: usize,
    pub touching: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageEval>,
}

impl EvalReport {
    pub fn evaluate(&mut self, name: &str, pred: &LabelMap, truth: &LabelMap, pairs: &[(u32, u32)], iou_t: f64) -> Result<()> {
        let pixel = PixelCounts::of(&pred.foreground(), &truth.foreground())?;
        let (object, _) = object_prf(pred, truth, iou_t)?;
        let (separated, touching) = touching_separation(pred, truth, pairs, iou_t)?;
        self.images.push(ImageEval { name: name.to_string(), pixel, object, separated, touching });
        Ok(())
    }

    /// Pixel scores over the pooled confusion counts of all images.
    pub fn pixel(&self) -> Prf {
        let mut c = PixelCounts::default();
        for i in &self.images {
            c.add(i.pixel);
        }
        c.prf()
    }

    pub fn object_mean(&self) -> Prf {
        if self.images.is_empty() {
            return Prf::default();
        }
        let n = self.images.len() as f64;
        let p = self.images.iter().map(|i| i.object.precision).sum::<f64>() / n;
        let r = self.images.iter().map(|i| i.object.recall).sum::<f64>() / n;
        Prf::from_pr(p, r)
    }

    pub fn separation(&self) -> (usize, usize, f64) {
        let s = self.images.iter().map(|i| i.separated).sum();
        let t = self.images.iter().map(|i| i.touching).sum();
        (s, t, if t == 0 { 0.0 } else { s as f64 / t as f64 })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,precision,recall,f_score,object_precision,object_recall,object_f_score,separated,touching\n");
        let row = |s: &mut String, name: &str, p: Prf, o: Prf, sep: usize, tot: usize| {
            writeln!(
                s,
                "{name},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{sep},{tot}",
                p.precision, p.recall, p.f_score, o.precision, o.recall, o.f_score
            )
            .expect("write to string");
        };
        for i in &self.images {
            row(&mut s, &i.name, i.pixel.prf(), i.object, i.separated, i.touching);
        }
        let (sep, tot, _) = self.separation();
        row(&mut s, "ALL", self.pixel(), self.object_mean(), sep, tot);
        s
    }

    /// Aggregate scores in a Method / Precision / Recall / F-Score table.
    pub fn table(&self, method: &str) -> String {
        let p = self.pixel();
        let (sep, tot, rate) = self.separation();
        let mut s = String::new();
        writeln!(s, "{:<28} {:>9} {:>7} {:>8}", "Method", "Precision", "Recall", "F-Score").expect("write");
        writeln!(s, "{:<28} {:>9.2} {:>7.2} {:>8.2}", method, p.precision, p.recall, p.f_score).expect("write");
        writeln!(s, "touching nuclei separated: {sep}/{tot} ({:.1}%)", 100.0 * rate).expect("write");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_mask(rng: &mut Rng, h: usize, w: usize, p: f64) -> BinaryMask {
        BinaryMask { height: h, width: w, bits: (0..h * w).map(|_| rng.bernoulli(p)).collect() }
    }

    #[test]
    fn table_row_fixture() {
        let p = Prf::from_pr(0.94, 0.88);
        assert_eq!(format!("{:.2}", p.f_score), "0.91");
        // the same scores through counts: 94 TP, 6 FP, ~12.8 FN
        let c = Prf::from_counts(9400, 600, 1282);
        assert_eq!(format!("{:.2} {:.2} {:.2}", c.precision, c.recall, c.f_score), "0.94 0.88 0.91");
    }

    #[test]
    fn conventions() {
        let t = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        assert_eq!(pixel_prf(&t, &t).unwrap(), Prf { precision: 1.0, recall: 1.0, f_score: 1.0 });
        assert_eq!(pixel_prf(&BinaryMask::empty(4, 4), &t).unwrap(), Prf::default());
        assert!(pixel_prf(&BinaryMask::empty(3, 4), &t).is_err());
    }

    fn two_squares() -> LabelMap {
        let mut l = LabelMap::empty(8, 12);
        for y in 2..6 {
            for x in 1..6 {
                l.ids[y * 12 + x] = 1;
            }
            for x in 6..11 {
                l.ids[y * 12 + x] = 2;
            }
        }
        l
    }

    #[test]
    fn separation_identity_and_merge() {
        let truth = two_squares();
        assert_eq!(touching_separation_rate(&truth, &truth, &[(1, 2)], 0.5).unwrap(), (1, 1, 1.0));
        let merged = LabelMap { ids: truth.ids.iter().map(|v| u32::from(*v != 0)).collect(), ..truth.clone() };
        assert_eq!(touching_separation_rate(&merged, &truth, &[(1, 2)], 0.5).unwrap(), (0, 1, 0.0));
        let (o, m) = object_prf(&truth, &truth, 0.5).unwrap();
        assert_eq!((o.f_score, m), (1.0, 2));
        assert!(touching_separation_rate(&truth, &truth, &[(1, 2)], 1.0).is_err());
    }

    #[test]
    fn report_formats() {
        let truth = two_squares();
        let mut r = EvalReport::default();
        r.evaluate("a", &truth, &truth, &[(1, 2)], 0.5).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().last().unwrap().starts_with("ALL,1.0000,1.0000,1.0000"));
        assert!(r.table("Fused").contains("1.00"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn bounds_and_symmetry(seed in 0u64..1_000_000, pa in 0.0f64..1.0, pb in 0.0f64..1.0) {
            let mut rng = Rng::new(seed);
            let a = random_mask(&mut rng, 12, 12, pa);
            let b = random_mask(&mut rng, 12, 12, pb);
            let ab = pixel_prf(&a, &b).unwrap();
            let ba = pixel_prf(&b, &a).unwrap();
            prop_assert_eq!(ab.precision, ba.recall);
            for v in [ab.precision, ab.recall, ab.f_score] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if ab.precision + ab.recall > 0.0 {
                prop_assert!(ab.f_score >= ab.precision.min(ab.recall) - 1e-12);
                prop_assert!(ab.f_score <= ab.precision.max(ab.recall) + 1e-12);
            }
        }
    }
}
