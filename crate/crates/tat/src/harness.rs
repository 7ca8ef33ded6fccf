//! Teacher pretraining, student distillation and evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tat_core::data::{self, Dataset, Labels, Split};
use tat_core::hier::{anchor_point_loss, patch_group_loss, AnchorConfig, PatchGroupConfig};
use tat_core::losses::{cross_entropy, fm_loss, kl_distill_loss, tat_loss, CorrelationMap, FeatureMap, KdConfig};
use tat_core::metrics::{argmax_rows, Confusion};
use tat_core::nets::{build_convnet, ConvNet, ConvNetSpec};
use tat_core::optim::{step_decay_lr, OptimState};
use tat_core::params::ModelParams;
use tat_core::projector::{build_projector, build_projectors, Projector, ProjectorKind, ProjectorSet};
use tat_core::{Mode, Tape, Tensor, Var};

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{FeatureLoss, RunConfig, Task};
use crate::error::{config_err, Error, Result};
use crate::idx::read_idx;

pub const TEACHER_PREFIX: &str = "teacher.";
pub const STUDENT_PREFIX: &str = "student.";

const EVAL_BATCH: usize = 64;

/// Seed offsets that keep the random streams of one run independent.
const PROJECTOR_SEED: u64 = 0x7072_6f6a;
const SHUFFLE_STREAM: u64 = 7;

/// Loss components averaged over one epoch's batches (unweighted), plus the
/// evaluation metric after the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_task: f64,
    pub loss_kl: f64,
    /// Feature term: TaT, or FM for the one-to-one baseline.
    pub loss_tat: f64,
    pub loss_pg: f64,
    pub loss_ap: f64,
    /// The weighted objective, averaged the same way.
    pub loss_total: f64,
    /// Test accuracy (classification) or mean IoU (segmentation).
    pub metric: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
}

pub const METRICS_HEADER: &str = "epoch,loss_task,loss_kl,loss_tat,loss_pg,loss_ap,metric,seconds";

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.epoch, e.loss_task, e.loss_kl, e.loss_tat, e.loss_pg, e.loss_ap, e.metric, e.seconds
            );
        }
        out
    }

    pub fn final_metric(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.metric)
    }
}

/// Train and test splits named by the configuration: IDX files when paths
/// are given, otherwise the synthetic shapes generator seeded by
/// `data_seed`.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    if !cfg.train_images.is_empty() {
        let train = read_idx(&cfg.train_images, &cfg.train_labels, Split::Train)?;
        let test = read_idx(&cfg.test_images, &cfg.test_labels, Split::Test)?;
        return Ok((train, test));
    }
    let (n, hw, k) = (cfg.n_train, cfg.image_size, cfg.classes);
    let pair = match cfg.task {
        Task::Classification => data::gen_shapes_classification_split(n, cfg.n_test, hw, k, cfg.noise, cfg.data_seed)?,
        Task::Segmentation => data::gen_shapes_segmentation_split(n, cfg.n_test, hw, k, cfg.noise, cfg.data_seed)?,
    };
    Ok(pair)
}

fn check_dataset(cfg: &RunConfig, ds: &Dataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Usage(format!("{what} set is empty")));
    }
    if ds.classes != cfg.classes {
        return Err(config_err(
            "classes",
            format!("{what} set has {} classes, configuration says {}", ds.classes, cfg.classes),
        ));
    }
    if ds.is_segmentation() != (cfg.task == Task::Segmentation) {
        return Err(config_err("task", format!("{what} set does not match task {}", cfg.task.as_str())));
    }
    Ok(())
}

/// Network of a checkpoint, recognised by its parameter prefix.
pub fn network_for(cfg: &RunConfig, params: &ModelParams<f32>, in_channels: usize) -> Result<ConvNet> {
    let (spec, prefix) = if params.contains(&format!("{TEACHER_PREFIX}head.weight")) {
        (cfg.teacher_spec(in_channels)?, TEACHER_PREFIX)
    } else {
        (cfg.student_spec(in_channels)?, STUDENT_PREFIX)
    };
    let (net, template) = build_convnet::<f32>(&spec, prefix, 0)?;
    for (name, t) in template.iter() {
        let found = params.get(name).map_err(|_| {
            config_err(
                prefix.trim_end_matches('.'),
                format!("checkpoint lacks `{name}`; does it match the configured preset?"),
            )
        })?;
        if found.shape() != t.shape() {
            return Err(config_err(
                prefix.trim_end_matches('.'),
                format!("`{name}` has shape {:?}, expected {:?}", found.shape(), t.shape()),
            ));
        }
    }
    Ok(net)
}

/// Feature-level distillation term.
enum FeatureTerm {
    Tat(ProjectorSet),
    Fm(Projector),
}

struct Distiller {
    teacher: ConvNet,
    teacher_params: ModelParams<f32>,
    kd: KdConfig,
    delta: f64,
    zeta: f64,
    feature: Option<FeatureTerm>,
    patch_group: Option<(PatchGroupConfig, ProjectorSet)>,
    anchor: Option<(AnchorConfig, ProjectorSet)>,
    /// Teacher features and logits of the whole training set, when inputs are
    /// not augmented.
    cache: Option<(Tensor<f32>, Tensor<f32>)>,
}

#[derive(Debug, Clone, Copy, Default)]
struct StepLosses {
    task: f64,
    kl: f64,
    tat: f64,
    pg: f64,
    ap: f64,
    total: f64,
}

fn scalar(tape: &Tape<f32>, v: Var) -> f64 {
    f64::from(tape.value(v).item())
}

fn slice_rows(t: &Tensor<f32>, indices: &[usize]) -> Tensor<f32> {
    let per: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(&shape, data).expect("row slice")
}

/// Forward passes of a frozen network over a data set, in `EVAL_BATCH`
/// chunks: `(features, logits)`.
fn forward_all(net: &ConvNet, params: &mut ModelParams<f32>, images: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let n = images.shape()[0];
    let mut feats = Vec::new();
    let mut logits = Vec::new();
    let (mut fshape, mut lshape) = (Vec::new(), Vec::new());
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let mut tape = Tape::new();
        params.bind(&mut tape, false);
        let x = tape.constant(slice_rows(images, &idx));
        let out = net.forward(&mut tape, params, x, Mode::Eval)?;
        fshape = tape.shape(out.features).to_vec();
        lshape = tape.shape(out.logits).to_vec();
        feats.extend_from_slice(tape.value(out.features).data());
        logits.extend_from_slice(tape.value(out.logits).data());
    }
    params.unbind();
    fshape[0] = n;
    lshape[0] = n;
    Ok((Tensor::new(&fshape, feats)?, Tensor::new(&lshape, logits)?))
}

/// Runs one optimization epoch-loop shared by teacher, vanilla and distilled
/// training.
struct Fit<'a> {
    cfg: &'a RunConfig,
    net: ConvNet,
    params: ModelParams<f32>,
    distiller: Option<Distiller>,
    epochs: usize,
    seed: u64,
}

impl Fit<'_> {
    fn step(
        &mut self,
        images: Tensor<f32>,
        labels: &[usize],
        batch: &[usize],
        optim: &mut OptimState<f32>,
        lr: f64,
    ) -> Result<StepLosses> {
        let mut tape = Tape::new();
        self.params.bind(&mut tape, true);
        let x = tape.constant(images);
        let out = self.net.forward(&mut tape, &mut self.params, x, Mode::Train)?;
        let task = cross_entropy(&mut tape, out.logits, labels)?;
        let alpha = self.distiller.as_ref().map_or(1.0, |d| d.kd.alpha);
        let mut total = tape.scale(task, alpha as f32);
        let mut losses = StepLosses {
            task: scalar(&tape, task),
            ..StepLosses::default()
        };
        if let Some(d) = self.distiller.as_mut() {
            let (tf, tl) = match &d.cache {
                Some((feats, logits)) => (
                    tape.constant(slice_rows(feats, batch)),
                    tape.constant(slice_rows(logits, batch)),
                ),
                None => {
                    d.teacher_params.bind(&mut tape, false);
                    let t = d.teacher.forward(&mut tape, &mut d.teacher_params, x, Mode::Eval)?;
                    (t.features, t.logits)
                }
            };
            let student = FeatureMap::student(out.features);
            let teacher = FeatureMap::teacher(tf);
            let red = d.kd.reduction;
            let add = |tape: &mut Tape<f32>, total: &mut Var, term: Var, w: f64| -> Result<f64> {
                let weighted = tape.scale(term, w as f32);
                *total = tape.add(*total, weighted)?;
                Ok(scalar(tape, term))
            };
            if d.kd.beta > 0.0 {
                let kl = kl_distill_loss(&mut tape, tl, out.logits, d.kd.tau, d.kd.kl_tau_square_correction)?;
                losses.kl = add(&mut tape, &mut total, kl, d.kd.beta)?;
            }
            if d.kd.epsilon > 0.0 {
                let term = match d.feature.as_ref().expect("built with epsilon") {
                    FeatureTerm::Tat(set) => {
                        tat_loss(&mut tape, &mut self.params, student, teacher, set, red, Mode::Train)?.loss
                    }
                    FeatureTerm::Fm(reg) => {
                        let s = reg.apply(&mut tape, &mut self.params, out.features, Mode::Train)?;
                        fm_loss(&mut tape, FeatureMap::student(s), teacher, red)?
                    }
                };
                losses.tat = add(&mut tape, &mut total, term, d.kd.epsilon)?;
            }
            if let Some((pg, set)) = &d.patch_group {
                let term = patch_group_loss(&mut tape, &mut self.params, student, teacher, pg, set, red, Mode::Train)?;
                losses.pg = add(&mut tape, &mut total, term, d.delta)?;
            }
            if let Some((ap, set)) = &d.anchor {
                let term = anchor_point_loss(&mut tape, &mut self.params, student, teacher, ap, set, red, Mode::Train)?;
                losses.ap = add(&mut tape, &mut total, term, d.zeta)?;
            }
        }
        losses.total = scalar(&tape, total);
        if !losses.total.is_finite() {
            return Err(tat_core::Error::NonFinite(format!(
                "training loss diverged (task {}, kl {}, feature {}, pg {}, ap {})",
                losses.task, losses.kl, losses.tat, losses.pg, losses.ap
            ))
            .into());
        }
        tape.backward(total)?;
        optim.step(&mut self.params, &tape, lr)?;
        self.params.unbind();
        if let Some(d) = self.distiller.as_mut() {
            d.teacher_params.unbind();
        }
        Ok(losses)
    }

    fn run(mut self, train: &Dataset, test: &Dataset) -> Result<(Checkpoint, RunMetrics)> {
        let cfg = self.cfg;
        let mut optim = OptimState::new(cfg.optim);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(SHUFFLE_STREAM);
        let mut metrics = RunMetrics::default();
        for epoch in 0..self.epochs {
            let started = Instant::now();
            let lr = step_decay_lr(cfg.optim.lr, epoch, self.epochs);
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            let mut sums = StepLosses::default();
            let mut batches = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                let (mut images, mut labels) = train.batch(batch);
                let masks = match train.labels {
                    Labels::Mask(_) => Some(labels.as_mut_slice()),
                    Labels::Class(_) => None,
                };
                data::augment(&mut images, masks, cfg.flip, cfg.crop, &mut rng);
                let l = self.step(images, &labels, batch, &mut optim, lr)?;
                sums.task += l.task;
                sums.kl += l.kl;
                sums.tat += l.tat;
                sums.pg += l.pg;
                sums.ap += l.ap;
                sums.total += l.total;
                batches += 1;
            }
            let nb = batches as f64;
            let metric = evaluate_net(&self.net, &mut self.params, test)?;
            let elapsed = started.elapsed().as_secs_f64();
            metrics.epochs.push(EpochMetrics {
                epoch: epoch + 1,
                loss_task: sums.task / nb,
                loss_kl: sums.kl / nb,
                loss_tat: sums.tat / nb,
                loss_pg: sums.pg / nb,
                loss_ap: sums.ap / nb,
                loss_total: sums.total / nb,
                metric,
                seconds: if cfg.record_time { elapsed } else { 0.0 },
            });
        }
        let ckpt = Checkpoint {
            params: self.params,
            optim,
            rng: RngState::capture(&rng),
            epoch: self.epochs as u32,
            config_hash: cfg.hash(),
        };
        Ok((ckpt, metrics))
    }
}

/// Trains the teacher preset with cross-entropy.
pub fn train_teacher(cfg: &RunConfig, train: &Dataset, test: &Dataset, seed: u64) -> Result<(Checkpoint, RunMetrics)> {
    check_dataset(cfg, train, "training")?;
    check_dataset(cfg, test, "test")?;
    let spec = cfg.teacher_spec(train.image_dims().2)?;
    fit_supervised(cfg, &spec, TEACHER_PREFIX, train, test, seed, cfg.teacher_epochs)
}

/// Trains the student preset on labels alone.
pub fn train_vanilla(cfg: &RunConfig, train: &Dataset, test: &Dataset, seed: u64) -> Result<(Checkpoint, RunMetrics)> {
    check_dataset(cfg, train, "training")?;
    check_dataset(cfg, test, "test")?;
    let spec = cfg.student_spec(train.image_dims().2)?;
    fit_supervised(cfg, &spec, STUDENT_PREFIX, train, test, seed, cfg.epochs)
}

fn fit_supervised(
    cfg: &RunConfig,
    spec: &ConvNetSpec,
    prefix: &str,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    epochs: usize,
) -> Result<(Checkpoint, RunMetrics)> {
    let (net, params) = build_convnet(spec, prefix, seed)?;
    Fit {
        cfg,
        net,
        params,
        distiller: None,
        epochs,
        seed,
    }
    .run(train, test)
}

fn merge(into: &mut ModelParams<f32>, from: ModelParams<f32>) -> Result<()> {
    into.merge(from)?;
    Ok(())
}

/// Distils the student preset from a trained teacher checkpoint.
///
/// The teacher runs in eval mode without gradients. Student and projector
/// parameters share one optimizer. Loss terms whose weight is zero are not
/// evaluated, so `ε = β = δ = ζ = 0` reproduces [`train_vanilla`].
pub fn distill_student(
    cfg: &RunConfig,
    teacher_ckpt: &Checkpoint,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<(Checkpoint, RunMetrics)> {
    check_dataset(cfg, train, "training")?;
    check_dataset(cfg, test, "test")?;
    let cin = train.image_dims().2;
    let teacher = network_for(cfg, &teacher_ckpt.params, cin)?;
    if teacher.prefix != TEACHER_PREFIX {
        return Err(config_err("teacher", "checkpoint does not hold a teacher network"));
    }
    let mut teacher_params = teacher_ckpt.params.clone();
    let spec = cfg.student_spec(cin)?;
    let (net, mut params) = build_convnet::<f32>(&spec, STUDENT_PREFIX, seed)?;
    let (tc, sc) = (teacher.spec.feature_channels(), spec.feature_channels());
    let pseed = seed ^ PROJECTOR_SEED;

    let feature = if cfg.kd.epsilon > 0.0 {
        Some(match cfg.feature_loss {
            FeatureLoss::Tat => {
                let (set, p) = build_projectors(cfg.theta, cfg.gamma, cfg.phi, tc, sc, tc, "proj.", pseed)?;
                merge(&mut params, p)?;
                FeatureTerm::Tat(set)
            }
            FeatureLoss::Fm => {
                let (reg, p) = build_projector(ProjectorKind::ConvBn, sc, tc, "fm.regressor", pseed)?;
                merge(&mut params, p)?;
                FeatureTerm::Fm(reg)
            }
        })
    } else {
        None
    };
    let (h, w, _) = train.image_dims();
    let patch_group = if cfg.delta > 0.0 {
        let pg = cfg.patch_group();
        let per = pg.grid(h, w)?.per_group;
        let (set, p) = build_projectors(
            pg.theta,
            ProjectorKind::Identity,
            ProjectorKind::Identity,
            tc * per,
            sc * per,
            sc * per,
            "pg.",
            pseed.wrapping_add(1),
        )?;
        merge(&mut params, p)?;
        Some((pg, set))
    } else {
        None
    };
    let anchor = if cfg.zeta > 0.0 {
        let ap = cfg.anchor();
        ap.validate(h, w)?;
        let (set, p) = build_projectors(cfg.theta, cfg.gamma, cfg.phi, tc, sc, tc, "anchor.", pseed.wrapping_add(2))?;
        merge(&mut params, p)?;
        Some((ap, set))
    } else {
        None
    };
    let needs_teacher = cfg.kd.beta > 0.0 || feature.is_some() || patch_group.is_some() || anchor.is_some();
    let cache = if needs_teacher && !cfg.flip && !cfg.crop {
        Some(forward_all(&teacher, &mut teacher_params, &train.images)?)
    } else {
        None
    };
    let distiller = Distiller {
        teacher,
        teacher_params,
        kd: cfg.kd,
        delta: cfg.delta,
        zeta: cfg.zeta,
        feature,
        patch_group,
        anchor,
        cache,
    };
    Fit {
        cfg,
        net,
        params,
        distiller: Some(distiller),
        epochs: cfg.epochs,
        seed,
    }
    .run(train, test)
}

fn evaluate_net(net: &ConvNet, params: &mut ModelParams<f32>, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let (_, logits) = forward_all(net, params, &ds.images)?;
    let k = *logits.shape().last().expect("logits rank");
    if k != ds.classes {
        return Err(config_err(
            "classes",
            format!("network predicts {k} classes, data set has {}", ds.classes),
        ));
    }
    let pred = argmax_rows(logits.data(), k);
    match &ds.labels {
        Labels::Class(l) => Ok(tat_core::metrics::accuracy(&pred, l)?),
        Labels::Mask(m) => {
            let mut c = Confusion::new(k);
            c.add(&pred, m)?;
            Ok(c.mean_iou())
        }
    }
}

/// Top-1 accuracy or mean IoU of a checkpointed network on `ds`.
pub fn evaluate(cfg: &RunConfig, ckpt: &Checkpoint, ds: &Dataset) -> Result<f64> {
    let net = network_for(cfg, &ckpt.params, ds.image_dims().2)?;
    let mut params = ckpt.params.clone();
    evaluate_net(&net, &mut params, ds)
}

/// Correlation map of one sample: the teacher and the distilled student are
/// run in eval mode and the configured TaT projectors (taken from the
/// student checkpoint) build the `N×N` matrix.
pub fn tat_map(
    cfg: &RunConfig,
    teacher_ckpt: &Checkpoint,
    student_ckpt: &Checkpoint,
    ds: &Dataset,
    sample: usize,
) -> Result<CorrelationMap<f32>> {
    if sample >= ds.len() {
        return Err(config_err(
            "sample",
            format!("index {sample} is out of range for {} images", ds.len()),
        ));
    }
    let cin = ds.image_dims().2;
    let teacher = network_for(cfg, &teacher_ckpt.params, cin)?;
    let student = network_for(cfg, &student_ckpt.params, cin)?;
    if teacher.prefix != TEACHER_PREFIX || student.prefix != STUDENT_PREFIX {
        return Err(config_err("teacher", "expected a teacher and a student checkpoint"));
    }
    let (tc, sc) = (teacher.spec.feature_channels(), student.spec.feature_channels());
    let (set, fresh) = build_projectors::<f32>(cfg.theta, cfg.gamma, cfg.phi, tc, sc, tc, "proj.", 0)?;
    let mut params = student_ckpt.params.clone();
    for (name, _) in fresh.iter() {
        if !params.contains(name) {
            return Err(config_err(
                "epsilon",
                format!("student checkpoint lacks projector `{name}`; was it distilled with TaT?"),
            ));
        }
    }
    let mut teacher_params = teacher_ckpt.params.clone();
    let image = slice_rows(&ds.images, &[sample]);
    let (tf, _) = forward_all(&teacher, &mut teacher_params, &image)?;
    let (sf, _) = forward_all(&student, &mut params, &image)?;
    let mut tape = Tape::new();
    params.bind(&mut tape, false);
    let s = tape.constant(sf);
    let t = tape.constant(tf);
    let out = tat_loss(
        &mut tape,
        &mut params,
        FeatureMap::student(s),
        FeatureMap::teacher(t),
        &set,
        cfg.kd.reduction,
        Mode::Eval,
    )?;
    let corr = tape.value(out.correlation).clone();
    params.unbind();
    let n = *corr.shape().last().expect("correlation rank");
    Ok(CorrelationMap::new(corr.reshape(&[n, n])?)?)
}
