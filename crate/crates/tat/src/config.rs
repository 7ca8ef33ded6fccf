//! Flat `key = value` run configuration.

use std::fmt::Write as _;

use tat_core::hier::{AnchorConfig, Hierarchy, PatchGroupConfig, SegLossWeights};
use tat_core::losses::{KdConfig, Reduction};
use tat_core::nets::{ConvNetSpec, Head, FIG1_STUDENT, FIG1_TEACHER};
use tat_core::optim::{OptimConfig, OptimKind};
use tat_core::projector::{Parametric, ProjectorKind};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Segmentation,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Segmentation => "segmentation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "classification" => Some(Task::Classification),
            "segmentation" => Some(Task::Segmentation),
            _ => None,
        }
    }
}

/// Feature-level term of the distillation objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureLoss {
    /// Target-aware transformer.
    Tat,
    /// One-to-one matching through a conv+BN regressor on the student.
    Fm,
}

impl FeatureLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureLoss::Tat => "tat",
            FeatureLoss::Fm => "fm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tat" => Some(FeatureLoss::Tat),
            "fm" => Some(FeatureLoss::Fm),
            _ => None,
        }
    }
}

/// Named bundles of loss weights, applied where `preset = NAME` appears.
pub const PRESETS: &[&str] = &[
    "imagenet",
    "imagenet-fig3",
    "voc",
    "cocostuff-resnet18",
    "cocostuff-mobilenetv2",
    "cifar-wrn40-2-wrn16-2",
    "cifar-wrn40-2-wrn40-1",
    "cifar-resnet56-resnet20",
    "cifar-resnet110-resnet20",
    "cifar-resnet110-resnet32",
    "cifar-resnet32x4-resnet8x4",
    "cifar-vgg13-vgg8",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Seed of the synthetic data set, separate so that runs with different
    /// model seeds share their data.
    pub data_seed: u64,
    pub task: Task,

    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub classes: usize,
    pub noise: f64,
    pub flip: bool,
    pub crop: bool,
    /// IDX files; empty strings select the synthetic generator.
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,

    pub teacher: String,
    pub student: String,
    /// Backbone width overrides; 0 keeps the preset width.
    pub teacher_channels: usize,
    pub student_channels: usize,

    pub kd: KdConfig,
    pub feature_loss: FeatureLoss,
    pub theta: ProjectorKind,
    pub gamma: ProjectorKind,
    pub phi: ProjectorKind,

    pub delta: f64,
    pub zeta: f64,
    pub patch_h: usize,
    pub patch_w: usize,
    pub groups: usize,
    pub pg_theta: ProjectorKind,
    pub pool_k: usize,

    pub optim: OptimConfig,
    pub epochs: usize,
    pub teacher_epochs: usize,
    pub batch_size: usize,
    /// Log wall time in the metrics CSV (breaks byte reproducibility).
    pub record_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            task: Task::Classification,
            n_train: 512,
            n_test: 256,
            image_size: 16,
            classes: 4,
            noise: 0.1,
            flip: false,
            crop: false,
            train_images: String::new(),
            train_labels: String::new(),
            test_images: String::new(),
            test_labels: String::new(),
            teacher: FIG1_TEACHER.to_string(),
            student: FIG1_STUDENT.to_string(),
            teacher_channels: 0,
            student_channels: 0,
            kd: KdConfig::default(),
            feature_loss: FeatureLoss::Tat,
            theta: ProjectorKind::Identity,
            gamma: ProjectorKind::ConvBn,
            phi: ProjectorKind::ConvBn,
            delta: 0.0,
            zeta: 0.0,
            patch_h: 4,
            patch_w: 4,
            groups: 4,
            pg_theta: ProjectorKind::Linear,
            pool_k: 2,
            optim: OptimConfig::default(),
            epochs: 60,
            teacher_epochs: 30,
            batch_size: 32,
            record_time: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err(key, format!("cannot parse `{value}` as a number")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    let v: f64 = parse_num(key, value)?;
    if !v.is_finite() {
        return Err(config_err(key, "must be finite"));
    }
    Ok(v)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(config_err(key, format!("expected true or false, got `{value}`"))),
    }
}

fn parse_with<T>(key: &str, value: &str, f: impl Fn(&str) -> Option<T>, choices: &str) -> Result<T> {
    f(value).ok_or_else(|| config_err(key, format!("`{value}` is not one of {choices}")))
}

fn parse_projector(key: &str, value: &str) -> Result<ProjectorKind> {
    parse_with(key, value, ProjectorKind::parse, "identity, conv_bn, linear")
}

impl RunConfig {
    /// Every settable key, in serialization order.
    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let o = &self.optim;
        vec![
            ("seed", self.seed.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("task", self.task.as_str().into()),
            ("n_train", self.n_train.to_string()),
            ("n_test", self.n_test.to_string()),
            ("image_size", self.image_size.to_string()),
            ("classes", self.classes.to_string()),
            ("noise", self.noise.to_string()),
            ("flip", self.flip.to_string()),
            ("crop", self.crop.to_string()),
            ("train_images", self.train_images.clone()),
            ("train_labels", self.train_labels.clone()),
            ("test_images", self.test_images.clone()),
            ("test_labels", self.test_labels.clone()),
            ("teacher", self.teacher.clone()),
            ("student", self.student.clone()),
            ("teacher_channels", self.teacher_channels.to_string()),
            ("student_channels", self.student_channels.to_string()),
            ("alpha", self.kd.alpha.to_string()),
            ("beta", self.kd.beta.to_string()),
            ("epsilon", self.kd.epsilon.to_string()),
            ("tau", self.kd.tau.to_string()),
            ("tau_square", self.kd.kl_tau_square_correction.to_string()),
            ("reduction", self.kd.reduction.as_str().into()),
            ("feature_loss", self.feature_loss.as_str().into()),
            ("theta", self.theta.as_str().into()),
            ("gamma", self.gamma.as_str().into()),
            ("phi", self.phi.as_str().into()),
            ("delta", self.delta.to_string()),
            ("zeta", self.zeta.to_string()),
            ("patch_h", self.patch_h.to_string()),
            ("patch_w", self.patch_w.to_string()),
            ("groups", self.groups.to_string()),
            ("pg_theta", self.pg_theta.as_str().into()),
            ("pool_k", self.pool_k.to_string()),
            ("optimizer", o.kind.as_str().into()),
            ("lr", o.lr.to_string()),
            ("momentum", o.momentum.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("adam_eps", o.eps.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("teacher_epochs", self.teacher_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("record_time", self.record_time.to_string()),
        ]
    }

    /// Assigns one key. `preset` and `parametric` are directives that set
    /// several keys at once.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "preset" => self.apply_preset(v)?,
            "parametric" => {
                let p = parse_with(key, v, Parametric::parse, "non, semi, full")?;
                [self.theta, self.gamma, self.phi] = p.kinds();
            }
            "seed" => self.seed = parse_num(key, v)?,
            "data_seed" => self.data_seed = parse_num(key, v)?,
            "task" => self.task = parse_with(key, v, Task::parse, "classification, segmentation")?,
            "n_train" => self.n_train = parse_num(key, v)?,
            "n_test" => self.n_test = parse_num(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "classes" => self.classes = parse_num(key, v)?,
            "noise" => self.noise = parse_f64(key, v)?,
            "flip" => self.flip = parse_bool(key, v)?,
            "crop" => self.crop = parse_bool(key, v)?,
            "train_images" => self.train_images = v.into(),
            "train_labels" => self.train_labels = v.into(),
            "test_images" => self.test_images = v.into(),
            "test_labels" => self.test_labels = v.into(),
            "teacher" => self.teacher = v.into(),
            "student" => self.student = v.into(),
            "teacher_channels" => self.teacher_channels = parse_num(key, v)?,
            "student_channels" => self.student_channels = parse_num(key, v)?,
            "alpha" => self.kd.alpha = parse_f64(key, v)?,
            "beta" => self.kd.beta = parse_f64(key, v)?,
            "epsilon" => self.kd.epsilon = parse_f64(key, v)?,
            "tau" => self.kd.tau = parse_f64(key, v)?,
            "tau_square" => self.kd.kl_tau_square_correction = parse_bool(key, v)?,
            "reduction" => {
                self.kd.reduction = parse_with(key, v, Reduction::parse, "mean_squared, literal_sum")?
            }
            "feature_loss" => self.feature_loss = parse_with(key, v, FeatureLoss::parse, "tat, fm")?,
            "theta" => self.theta = parse_projector(key, v)?,
            "gamma" => self.gamma = parse_projector(key, v)?,
            "phi" => self.phi = parse_projector(key, v)?,
            "delta" => self.delta = parse_f64(key, v)?,
            "zeta" => self.zeta = parse_f64(key, v)?,
            "patch_h" => self.patch_h = parse_num(key, v)?,
            "patch_w" => self.patch_w = parse_num(key, v)?,
            "groups" => self.groups = parse_num(key, v)?,
            "pg_theta" => self.pg_theta = parse_projector(key, v)?,
            "pool_k" => self.pool_k = parse_num(key, v)?,
            "optimizer" => self.optim.kind = parse_with(key, v, OptimKind::parse, "sgd, adamw")?,
            "lr" => self.optim.lr = parse_f64(key, v)?,
            "momentum" => self.optim.momentum = parse_f64(key, v)?,
            "beta1" => self.optim.beta1 = parse_f64(key, v)?,
            "beta2" => self.optim.beta2 = parse_f64(key, v)?,
            "adam_eps" => self.optim.eps = parse_f64(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse_f64(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "teacher_epochs" => self.teacher_epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "record_time" => self.record_time = parse_bool(key, v)?,
            _ => return Err(config_err(key, "unknown key")),
        }
        Ok(())
    }

    fn apply_preset(&mut self, name: &str) -> Result<()> {
        let kd = &mut self.kd;
        let seg = |cfg: &mut Self, w: SegLossWeights| {
            cfg.task = Task::Segmentation;
            cfg.kd.alpha = w.alpha;
            cfg.kd.beta = 0.0;
            cfg.kd.epsilon = 0.0;
            cfg.delta = w.delta;
            cfg.zeta = w.zeta;
        };
        // α and ε of the small-scale teacher/student pairs
        let cifar = |kd: &mut KdConfig, alpha: f64, epsilon: f64| {
            kd.alpha = alpha;
            kd.epsilon = epsilon;
        };
        match name {
            "imagenet" => *kd = KdConfig { reduction: kd.reduction, ..KdConfig::imagenet() },
            "imagenet-fig3" => {
                kd.alpha = 0.1;
                kd.beta = 0.0;
            }
            "voc" => seg(self, SegLossWeights::voc()),
            "cocostuff-resnet18" => seg(self, SegLossWeights::cocostuff_resnet18()),
            "cocostuff-mobilenetv2" => seg(self, SegLossWeights::cocostuff_mobilenetv2()),
            "cifar-wrn40-2-wrn16-2" => cifar(kd, 0.8, 4.0),
            "cifar-wrn40-2-wrn40-1" => cifar(kd, 0.7, 3.6),
            "cifar-resnet56-resnet20" => cifar(kd, 0.8, 0.4),
            "cifar-resnet110-resnet20" => cifar(kd, 1.0, 0.75),
            "cifar-resnet110-resnet32" => cifar(kd, 1.0, 1.0),
            "cifar-resnet32x4-resnet8x4" => cifar(kd, 6.0, 39.0),
            "cifar-vgg13-vgg8" => cifar(kd, 0.1, 8.0),
            _ => return Err(config_err("preset", format!("unknown preset `{name}`"))),
        }
        Ok(())
    }

    /// Applies `KEY=VALUE` (or `KEY = VALUE`) overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(o.trim(), "override must look like KEY=VALUE"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// CRC32 of the serialized form.
    pub fn hash(&self) -> u32 {
        crc32fast::hash(self.serialize().as_bytes())
    }

    pub fn head(&self) -> Head {
        match self.task {
            Task::Classification => Head::Classifier { classes: self.classes },
            Task::Segmentation => Head::Segmentation { classes: self.classes },
        }
    }

    fn width(w: usize) -> Option<usize> {
        (w > 0).then_some(w)
    }

    pub fn teacher_spec(&self, in_channels: usize) -> Result<ConvNetSpec> {
        ConvNetSpec::preset(&self.teacher, in_channels, self.head(), Self::width(self.teacher_channels))
            .map_err(|e| config_err("teacher", e.to_string()))
    }

    pub fn student_spec(&self, in_channels: usize) -> Result<ConvNetSpec> {
        ConvNetSpec::preset(&self.student, in_channels, self.head(), Self::width(self.student_channels))
            .map_err(|e| config_err("student", e.to_string()))
    }

    pub fn patch_group(&self) -> PatchGroupConfig {
        PatchGroupConfig {
            theta: self.pg_theta,
            ..PatchGroupConfig::new(self.patch_h, self.patch_w, self.groups)
        }
    }

    pub fn anchor(&self) -> AnchorConfig {
        AnchorConfig { pool_k: self.pool_k }
    }

    pub fn seg_weights(&self) -> SegLossWeights {
        SegLossWeights {
            alpha: self.kd.alpha,
            delta: self.delta,
            zeta: self.zeta,
        }
    }

    /// The hierarchy whose losses carry a non-zero weight.
    pub fn hierarchy(&self) -> Hierarchy {
        Hierarchy {
            patch_group: (self.delta > 0.0).then(|| self.patch_group()),
            anchor: (self.zeta > 0.0).then(|| self.anchor()),
        }
    }

    /// Checks every cross-field constraint; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        self.kd.validate()?;
        self.seg_weights().validate()?;
        self.optim.validate()?;
        if !(2..=8).contains(&self.classes) && self.train_images.is_empty() {
            return Err(config_err("classes", format!("{} not in 2..=8", self.classes)));
        }
        if self.classes < 2 {
            return Err(config_err("classes", "need at least two classes"));
        }
        if self.image_size < 8 {
            return Err(config_err("image_size", "must be at least 8"));
        }
        if self.n_train == 0 {
            return Err(config_err("n_train", "must be positive"));
        }
        if !(self.noise >= 0.0) {
            return Err(config_err("noise", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(config_err("epochs", "must be positive"));
        }
        if self.teacher_epochs == 0 {
            return Err(config_err("teacher_epochs", "must be positive"));
        }
        let idx = [
            ("train_images", &self.train_images),
            ("train_labels", &self.train_labels),
            ("test_images", &self.test_images),
            ("test_labels", &self.test_labels),
        ];
        let given = idx.iter().filter(|(_, p)| !p.is_empty()).count();
        if given != 0 && given != 4 {
            let (key, _) = idx.iter().find(|(_, p)| p.is_empty()).expect("one is empty");
            return Err(config_err(key, "IDX input needs all four file paths"));
        }
        if given == 4 && self.task == Task::Segmentation {
            return Err(config_err("task", "IDX files carry per-image labels only"));
        }
        let teacher = self.teacher_spec(1)?;
        let student = self.student_spec(1)?;
        if teacher.depth() <= student.depth() {
            return Err(config_err("student", "the student must be shallower than the teacher"));
        }
        if self.task == Task::Segmentation && self.kd.beta > 0.0 {
            return Err(config_err("beta", "logit distillation applies to classification only"));
        }
        let (tc, sc) = (teacher.feature_channels(), student.feature_channels());
        for (key, kind, cin) in [("theta", self.theta, tc), ("gamma", self.gamma, sc), ("phi", self.phi, sc)] {
            if kind == ProjectorKind::Linear {
                return Err(config_err(key, "TaT projectors are identity or conv_bn"));
            }
            if kind == ProjectorKind::Identity && cin != tc {
                return Err(config_err(
                    key,
                    format!("identity projector cannot map {cin} channels to {tc}"),
                ));
            }
        }
        if self.pg_theta == ProjectorKind::ConvBn {
            return Err(config_err("pg_theta", "patch-group θ is identity or linear"));
        }
        let size = self.image_size;
        self.patch_group().grid(size, size)?;
        if self.pg_theta == ProjectorKind::Identity && tc != sc {
            return Err(config_err("pg_theta", "identity needs equal teacher and student widths"));
        }
        self.anchor().validate(size, size)?;
        Ok(())
    }
}

/// Parses configuration text. Lines are `key = value`; `#` starts a comment.
/// The result is validated.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with(text, &[] as &[&str])
}

/// Parses `text`, applies `overrides` on top, then validates the result.
pub fn parse_config_with<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(line, format!("line {}: expected `key = value`", n + 1)))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(e: crate::Error) -> String {
        match e {
            crate::Error::Core(tat_core::Error::Config { key, .. }) => key,
            other => panic!("not a config error: {other}"),
        }
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
        assert_eq!(parse_config("# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn epsilon_line() {
        let cfg = parse_config("epsilon = 0.1  # TaT weight").unwrap();
        assert_eq!(cfg.kd.epsilon, 0.1);
    }

    #[test]
    fn errors_name_their_key() {
        assert_eq!(key_of(parse_config("patch_h = 1\npatch_w = 1\ngroups = 3").unwrap_err()), "groups");
        assert_eq!(key_of(parse_config("wibble = 2").unwrap_err()), "wibble");
        assert_eq!(key_of(parse_config("epochs = many").unwrap_err()), "epochs");
        assert_eq!(key_of(parse_config("flip = yes").unwrap_err()), "flip");
        assert_eq!(key_of(parse_config("tau = 0").unwrap_err()), "tau");
        assert_eq!(key_of(parse_config("theta = identity\nparametric = non").unwrap_err()), "gamma");
        assert_eq!(key_of(parse_config("pool_k = 3").unwrap_err()), "pool_k");
    }

    #[test]
    fn presets_expand() {
        let cfg = parse_config("preset = imagenet").unwrap();
        assert_eq!((cfg.kd.alpha, cfg.kd.beta, cfg.kd.epsilon), (0.5, 0.5, 0.1));
        let cfg = parse_config("preset = voc").unwrap();
        assert_eq!(cfg.task, Task::Segmentation);
        assert_eq!((cfg.kd.alpha, cfg.delta, cfg.zeta), (1.0, 0.1, 0.05));
        for p in PRESETS {
            parse_config(&format!("preset = {p}")).unwrap();
        }
    }

    #[test]
    fn serialize_round_trip() {
        let cfg = parse_config("preset = cocostuff-mobilenetv2\nseed = 7\nlr = 0.013\nflip = true").unwrap();
        assert_eq!(parse_config(&cfg.serialize()).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply_after_file() {
        let cfg = parse_config_with("epsilon = 0.3", &["epsilon=0.1", "seed = 4"]).unwrap();
        assert_eq!(cfg.kd.epsilon, 0.1);
        assert_eq!(cfg.seed, 4);
    }
}
