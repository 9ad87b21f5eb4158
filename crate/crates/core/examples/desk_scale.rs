//! Desk-scale experiment driver. Settings come from environment variables:
//! EPOCHS, LR, BATCH, PATCH (HxW), W1 (foreground class weight), MARKER_H,
//! THRESH, and NOGRAY to skip the grayscale baseline.
use nucleoseg::experiment::{run_desk_scale, DeskConfig};

fn env<T: std::str::FromStr>(k: &str) -> Option<T> {
    std::env::var(k).ok().and_then(|v| v.parse().ok())
}

fn main() {
    let mut cfg = DeskConfig::default();
    let t = &mut cfg.train;
    if let Some(v) = env("EPOCHS") { t.train.epochs = v; }
    if let Some(v) = env("LR") { t.train.adam.lr = v; }
    if let Some(v) = env("BATCH") { t.train.batch_size = v; }
    if let Some(v) = env::<String>("PATCH") { t.patch = nucleoseg::config::parse_size(&v); }
    if let Some(v) = env("W1") { t.train.class_weights = Some([1.0, v]); }
    t.separate_contacts = std::env::var("CONTACT").is_ok();
    if let Some(v) = env("MARKER_H") { cfg.post.marker_h = v; }
    if let Some(v) = env("THRESH") { cfg.post.prob_threshold = v; }
    cfg.grayscale_baseline = std::env::var("NOGRAY").is_err();
    let r = run_desk_scale(&cfg).unwrap();
    println!("region {:.3} {:.3} {:.3}", r.region.precision, r.region.recall, r.region.f_score);
    println!("fused  {:.3} {:.3} {:.3}", r.fused.precision, r.fused.recall, r.fused.f_score);
    if let Some(g) = r.grayscale { println!("gray   {:.3} {:.3} {:.3}", g.precision, g.recall, g.f_score); }
    println!("ws {:?} cc {:?}", r.fused_watershed, r.region_components);
    println!("train {:.1}s infer {:.1}ms", r.train_seconds, r.infer_ms_per_patch);
    for (i, l) in r.models.logs.iter().enumerate() {
        let e = l.epochs.last().unwrap();
        println!("stage {i}: final train acc {:.3} test acc {:.3}", e.train_acc, e.test_acc.unwrap_or(0.0));
    }
}
