//! Minibatch training of one network, and the two-stage fused schedule.

use std::path::Path;
use std::time::Instant;

use crate::enet::{build_enet_with_dropout, derive_boundary_target, fusion_input, Enet, Role};
use crate::error::{bail, Result};
use crate::nn::{check_rate, inverse_frequency_weights, pixel_accuracy, pixel_cross_entropy, Mode};
use crate::post::LabelMap;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::adam::{AdamHyper, AdamState};
use super::checkpoint::write_checkpoint;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamHyper,
    pub seed: u64,
    /// `None` means inverse class frequency over the training labels.
    pub class_weights: Option<[f64; 2]>,
    pub dropout_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 4, epochs: 30, adam: AdamHyper::default(), seed: 7, class_weights: None, dropout_rate: 0.1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                bail!(Config, "class weights must be finite and non-negative, got {w:?}");
            }
        }
        check_rate(self.dropout_rate).map_err(|e| crate::Error::Config(e.to_string()))?;
        self.adam.validate()
    }
}

/// One network input with per-pixel class labels (0 or 1).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub input: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl TrainSample {
    pub fn new(input: Tensor<f32>, labels: Vec<u8>) -> Result<Self> {
        let d = input.dims();
        if d.n != 1 || labels.len() != d.plane() {
            bail!(Data, "sample of dims {d:?} carries {} labels", labels.len());
        }
        if labels.iter().any(|&l| l > 1) {
            bail!(Data, "labels must be 0 or 1");
        }
        Ok(Self { input, labels })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,acc\n");
        for r in &self.steps {
            s += &format!("{},{:.6},{:.6}\n", r.step, r.loss, r.acc);
        }
        s
    }

    /// Per-epoch accuracies. Wall time is left out so reruns are byte-identical.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,train_acc,test_acc\n");
        for e in &self.epochs {
            let test = e.test_acc.map_or(String::new(), |v| format!("{v:.6}"));
            s += &format!("{},{:.6},{test}\n", e.epoch, e.train_acc);
        }
        s
    }

    pub fn seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }
}

/// Where each batch's network input comes from.
#[derive(Clone, Copy)]
pub enum InputSource<'a> {
    /// The sample input is fed as is.
    Direct,
    /// The sample input goes through two frozen first-stage nets and the
    /// network sees their stacked foreground probabilities.
    Frozen { region: &'a Enet<f32>, boundary: &'a Enet<f32> },
}

impl InputSource<'_> {
    fn prepare(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            InputSource::Direct => Ok(x.clone()),
            InputSource::Frozen { region, boundary } => fusion_input(&region.infer(x)?, &boundary.infer(x)?),
        }
    }
}

/// Resolved class weights for a sample set.
pub fn class_weights_for(samples: &[TrainSample], cfg: &TrainConfig) -> Vec<f64> {
    match cfg.class_weights {
        Some(w) => w.to_vec(),
        None => {
            let all: Vec<u8> = samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
            inverse_frequency_weights(&all, 2)
        }
    }
}

fn batch_inputs(samples: &[&TrainSample], source: &InputSource) -> Result<(Tensor<f32>, Vec<u8>)> {
    let xs: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.input).collect();
    let x = source.prepare(&Tensor::stack(&xs)?)?;
    let labels = samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
    Ok((x, labels))
}

/// Mean inference-mode pixel accuracy over a sample set.
pub fn evaluate_accuracy(model: &Enet<f32>, samples: &[TrainSample], source: &InputSource) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let x = source.prepare(&s.input)?;
        sum += pixel_accuracy(&model.infer(&x)?, &s.labels);
    }
    Ok(sum / samples.len().max(1) as f64)
}

pub fn train_network(
    model: &mut Enet<f32>,
    train: &[TrainSample],
    test: &[TrainSample],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainLog> {
    train_network_with(model, train, test, cfg, checkpoint, InputSource::Direct)
}

/// Trains in place for `cfg.epochs` passes over `train`. Each epoch visits
/// the samples in a fresh seeded order; the checkpoint file, if given, is
/// rewritten after every epoch.
pub fn train_network_with(
    model: &mut Enet<f32>,
    train: &[TrainSample],
    test: &[TrainSample],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    source: InputSource,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        bail!(Data, "no training samples for the {} net", model.role);
    }
    let weights = class_weights_for(train, cfg);
    let base = Rng::new(cfg.seed).fork(0x7452_0000 + model.role as u64);
    let mut order_rng = base.fork(1);
    let mut dropout_rng = base.fork(2);
    let mut adam = AdamState::new(cfg.adam)?;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order_rng.shuffle(&mut order);
        let (mut acc_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&TrainSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, labels) = batch_inputs(&items, &source)?;
            let (probs, cache) = model.forward(&x, Mode::Train, &mut dropout_rng)?;
            let (loss, grad) = pixel_cross_entropy(&probs, &labels, &weights)?;
            let acc = pixel_accuracy(&probs, &labels);
            model.zero_grad();
            model.backward(&cache, &grad)?;
            model.update_running_stats(&cache);
            let mut params: Vec<&mut Tensor<f32>> = model
                .named_mut()
                .into_iter()
                .filter(|n| n.kind == crate::enet::TensorKind::Param)
                .map(|n| n.tensor)
                .collect();
            adam.step(&mut params)?;
            log.steps.push(StepRecord { step: log.steps.len(), loss, acc });
            acc_sum += acc;
            batches += 1;
        }
        let test_acc = if test.is_empty() { None } else { Some(evaluate_accuracy(model, test, &source)?) };
        if let Some(path) = checkpoint {
            write_checkpoint(model, path)?;
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_acc: acc_sum / batches as f64,
            test_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    for n in model.named_mut() {
        n.tensor.drop_grad();
    }
    Ok(log)
}

/// One training patch for the fused pipeline: first-stage network input
/// and its instance annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSample {
    pub input: Tensor<f32>,
    pub instances: LabelMap,
}

impl PipelineSample {
    fn check(&self) -> Result<()> {
        let d = self.input.dims();
        if (d.n, d.c, d.h, d.w) != (1, 1, self.instances.height, self.instances.width) {
            bail!(Data, "input dims {d:?} do not match a {}x{} annotation", self.instances.height, self.instances.width);
        }
        Ok(())
    }

    /// Non-overlapping `ph x pw` tiles in row-major order; partial tiles at
    /// the right and bottom edges are dropped.
    pub fn tiles(&self, ph: usize, pw: usize) -> Result<Vec<PipelineSample>> {
        self.check()?;
        let d = self.input.dims();
        if ph == 0 || pw == 0 || ph > d.h || pw > d.w {
            bail!(Shape, "training patch {ph}x{pw} does not fit a {}x{} image", d.h, d.w);
        }
        let mut out = Vec::new();
        for y0 in (0..=d.h - ph).step_by(ph) {
            for x0 in (0..=d.w - pw).step_by(pw) {
                let src = self.input.plane(0, 0);
                let mut data = Vec::with_capacity(ph * pw);
                for y in y0..y0 + ph {
                    data.extend_from_slice(&src[y * d.w + x0..y * d.w + x0 + pw]);
                }
                out.push(PipelineSample {
                    input: Tensor::from_vec(d.with_hw(ph, pw), data)?,
                    instances: self.instances.crop(y0, x0, ph, pw),
                });
            }
        }
        Ok(out)
    }

    pub fn region_sample(&self) -> Result<TrainSample> {
        self.check()?;
        TrainSample::new(self.input.clone(), self.instances.ids.iter().map(|&i| (i != 0) as u8).collect())
    }

    /// Region labels, optionally with every pixel that has an 8-neighbour
    /// in a different instance set to background.
    pub fn fusion_sample(&self, separate_contacts: bool) -> Result<TrainSample> {
        if !separate_contacts {
            return self.region_sample();
        }
        self.check()?;
        let l = &self.instances;
        let (h, w) = (l.height, l.width);
        let mut labels: Vec<u8> = l.ids.iter().map(|&i| (i != 0) as u8).collect();
        for y in 0..h {
            for x in 0..w {
                let id = l.ids[y * w + x];
                if id == 0 {
                    continue;
                }
                let touches = (y.saturating_sub(1)..(y + 2).min(h))
                    .any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| matches!(l.ids[yy * w + xx], o if o != 0 && o != id)));
                if touches {
                    labels[y * w + x] = 0;
                }
            }
        }
        TrainSample::new(self.input.clone(), labels)
    }

    pub fn boundary_sample(&self, thickness: usize) -> Result<TrainSample> {
        self.check()?;
        let b = derive_boundary_target(&self.instances, thickness)?;
        TrainSample::new(self.input.clone(), b.bits.iter().map(|&v| v as u8).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedTrainConfig {
    pub train: TrainConfig,
    pub width: f64,
    pub boundary_thickness: usize,
    /// Precompute stage-II inputs once instead of per batch.
    pub cache_stage2: bool,
    /// Train on non-overlapping tiles of this size instead of whole images.
    pub patch: Option<(usize, usize)>,
    /// Fusion target drops pixels that touch a different instance, so the
    /// fused map carries a gap between touching nuclei.
    pub separate_contacts: bool,
}

impl Default for FusedTrainConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), width: 0.25, boundary_thickness: 2, cache_stage2: false, patch: None, separate_contacts: false }
    }
}

/// Freshly initialised net for a role, seeded from the training seed.
pub fn init_model(role: Role, cfg: &FusedTrainConfig) -> Result<Enet<f32>> {
    let mut rng = Rng::new(cfg.train.seed).fork(0x1417_0000 + role as u64);
    build_enet_with_dropout(role, cfg.width, role.input_channels(), cfg.train.dropout_rate, &mut rng)
}

fn samples(set: &[PipelineSample], f: impl Fn(&PipelineSample) -> Result<TrainSample>) -> Result<Vec<TrainSample>> {
    set.iter().map(f).collect()
}

/// The training set as the trainer sees it: whole images or tiles.
pub fn training_patches(set: &[PipelineSample], cfg: &FusedTrainConfig) -> Result<Vec<PipelineSample>> {
    match cfg.patch {
        None => Ok(set.to_vec()),
        Some((ph, pw)) => {
            let mut out = Vec::new();
            for s in set {
                out.extend(s.tiles(ph, pw)?);
            }
            Ok(out)
        }
    }
}

pub fn train_stage(
    role: Role,
    train: &[PipelineSample],
    test: &[PipelineSample],
    cfg: &FusedTrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(Enet<f32>, TrainLog)> {
    let make = |set| match role {
        Role::Region => samples(set, PipelineSample::region_sample),
        Role::Boundary => samples(set, |s| s.boundary_sample(cfg.boundary_thickness)),
        Role::Fusion => bail!(Precondition, "the fusion net is trained with train_fusion"),
    };
    let mut model = init_model(role, cfg)?;
    let log = train_network(&mut model, &make(&training_patches(train, cfg)?)?, &make(test)?, &cfg.train, checkpoint)?;
    Ok((model, log))
}

/// Stage II: the region and boundary nets stay frozen and only feed the
/// fusion net, which learns the region labels.
pub fn train_fusion(
    region: &Enet<f32>,
    boundary: &Enet<f32>,
    train: &[PipelineSample],
    test: &[PipelineSample],
    cfg: &FusedTrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(Enet<f32>, TrainLog)> {
    if region.role != Role::Region || boundary.role != Role::Boundary {
        bail!(Precondition, "stage II needs trained region and boundary nets");
    }
    let target = |s: &PipelineSample| s.fusion_sample(cfg.separate_contacts);
    let mut train_s = samples(&training_patches(train, cfg)?, target)?;
    let mut test_s = samples(test, target)?;
    let frozen = InputSource::Frozen { region, boundary };
    let source = if cfg.cache_stage2 {
        for s in train_s.iter_mut().chain(test_s.iter_mut()) {
            s.input = frozen.prepare(&s.input)?;
        }
        InputSource::Direct
    } else {
        frozen
    };
    let mut model = init_model(Role::Fusion, cfg)?;
    let log = train_network_with(&mut model, &train_s, &test_s, &cfg.train, checkpoint, source)?;
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedModels {
    pub region: Enet<f32>,
    pub boundary: Enet<f32>,
    pub fusion: Enet<f32>,
    pub logs: [TrainLog; 3],
}

/// Both stages. Checkpoints go to `out_dir/{region,boundary,fusion}.nst`
/// when a directory is given.
pub fn train_fused_pipeline(
    train: &[PipelineSample],
    test: &[PipelineSample],
    cfg: &FusedTrainConfig,
    out_dir: Option<&Path>,
) -> Result<FusedModels> {
    let path = |role: Role| out_dir.map(|d| d.join(format!("{role}.nst")));
    let (region, lr) = train_stage(Role::Region, train, test, cfg, path(Role::Region).as_deref())?;
    let (boundary, lb) = train_stage(Role::Boundary, train, test, cfg, path(Role::Boundary).as_deref())?;
    let (fusion, lf) = train_fusion(&region, &boundary, train, test, cfg, path(Role::Fusion).as_deref())?;
    Ok(FusedModels { region, boundary, fusion, logs: [lr, lb, lf] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::checkpoint_bytes;
    use crate::tensor::Dims;

    /// Four 16x16 images with a bright square each; labels mark the square.
    fn fixture() -> Vec<PipelineSample> {
        (0..4)
            .map(|k| {
                let (h, w) = (16, 16);
                let mut ids = vec![0u32; h * w];
                let mut x = vec![0.05f32; h * w];
                for y in 3 + k..9 + k {
                    for xx in 2 + 2 * k..8 + 2 * k {
                        ids[y * w + xx] = 1;
                        x[y * w + xx] = 0.9;
                    }
                }
                PipelineSample {
                    input: Tensor::from_vec(Dims::new(1, 1, h, w).unwrap(), x).unwrap(),
                    instances: LabelMap { height: h, width: w, ids },
                }
            })
            .collect()
    }

    fn cfg(epochs: usize) -> FusedTrainConfig {
        FusedTrainConfig { train: TrainConfig { epochs, ..TrainConfig::default() }, ..FusedTrainConfig::default() }
    }

    #[test]
    fn loss_decreases_over_100_steps() {
        let data = fixture();
        let (_, log) = train_stage(Role::Region, &data, &[], &cfg(100), None).unwrap();
        assert_eq!(log.steps.len(), 100);
        assert!(log.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
        let first = log.steps[0].loss;
        let last = log.steps[99].loss;
        assert!(last < first, "{first} -> {last}");
        // Frozen from a reference run.
        assert!((first - 0.697_220_128).abs() < 1e-4, "{first}");
        assert!((last - 0.630_160_122).abs() < 1e-4, "{last}");
    }

    #[test]
    fn zero_epochs_leaves_params_unchanged() {
        let data = fixture();
        let c = cfg(0);
        let fresh = init_model(Role::Region, &c).unwrap();
        let (trained, log) = train_stage(Role::Region, &data, &[], &c, None).unwrap();
        assert_eq!(checkpoint_bytes(&fresh).unwrap(), checkpoint_bytes(&trained).unwrap());
        assert!(log.steps.is_empty());
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let data = fixture();
        let a = train_stage(Role::Boundary, &data, &data[..1], &cfg(2), None).unwrap();
        let b = train_stage(Role::Boundary, &data, &data[..1], &cfg(2), None).unwrap();
        assert_eq!(checkpoint_bytes(&a.0).unwrap(), checkpoint_bytes(&b.0).unwrap());
        assert_eq!(a.1.steps, b.1.steps);
        let mut other = cfg(2);
        other.train.seed = 8;
        let c = train_stage(Role::Boundary, &data, &[], &other, None).unwrap();
        assert_ne!(checkpoint_bytes(&a.0).unwrap(), checkpoint_bytes(&c.0).unwrap());
    }

    #[test]
    fn contact_pixels_leave_the_fusion_target() {
        let mut l = LabelMap::empty(3, 6);
        for y in 0..3 {
            for x in 0..6 {
                l.ids[y * 6 + x] = if x < 3 { 1 } else { 2 };
            }
        }
        let s = PipelineSample { input: Tensor::zeros(Dims::new(1, 1, 3, 6).unwrap()), instances: l };
        assert!(s.fusion_sample(false).unwrap().labels.iter().all(|&v| v == 1));
        let cut = s.fusion_sample(true).unwrap().labels;
        assert_eq!(&cut[..6], &[1, 1, 0, 0, 1, 1]);
    }

    #[test]
    fn tiles_partition_the_image() {
        let s = &fixture()[1];
        let t = s.tiles(8, 8).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t[3].input.get(0, 0, 0, 0), s.input.get(0, 0, 8, 8));
        let fg: usize = t.iter().map(|p| p.instances.foreground().count()).sum();
        assert_eq!(fg, s.instances.foreground().count());
        assert!(s.tiles(24, 8).is_err());
    }

    #[test]
    fn empty_dataset_is_a_data_error() {
        let err = train_stage(Role::Region, &[], &[], &cfg(1), None);
        assert!(matches!(err, Err(crate::Error::Data(_))));
    }

    #[test]
    fn stage_two_freezes_first_stage_and_cache_is_equivalent() {
        let data = fixture();
        let c = cfg(1);
        let (region, _) = train_stage(Role::Region, &data, &[], &c, None).unwrap();
        let (boundary, _) = train_stage(Role::Boundary, &data, &[], &c, None).unwrap();
        let before = (checkpoint_bytes(&region).unwrap(), checkpoint_bytes(&boundary).unwrap());
        let (live, _) = train_fusion(&region, &boundary, &data, &[], &c, None).unwrap();
        assert_eq!(live.input_c, 2);
        assert_eq!(before, (checkpoint_bytes(&region).unwrap(), checkpoint_bytes(&boundary).unwrap()));
        let cached_cfg = FusedTrainConfig { cache_stage2: true, ..c };
        let (cached, _) = train_fusion(&region, &boundary, &data, &[], &cached_cfg, None).unwrap();
        assert_eq!(checkpoint_bytes(&live).unwrap(), checkpoint_bytes(&cached).unwrap());
    }

    #[test]
    fn checkpoints_and_logs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let data = fixture();
        let m = train_fused_pipeline(&data, &data[..2], &cfg(1), Some(dir.path())).unwrap();
        for role in Role::ALL {
            let back = crate::optim::read_checkpoint(&dir.path().join(format!("{role}.nst"))).unwrap();
            assert_eq!(back.role, role);
        }
        assert_eq!(m.logs[2].to_csv().lines().count(), 2);
        assert!(m.logs[0].epochs[0].test_acc.is_some());
    }
}
