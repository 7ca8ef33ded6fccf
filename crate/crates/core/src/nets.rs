//! Toy teacher/student convnets with a shallow-vs-deep receptive-field gap.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{apply_bn, he_normal, init_bn, ModelParams};
use crate::real::Real;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub const FIG1_TEACHER: &str = "fig1-teacher";
pub const FIG1_STUDENT: &str = "fig1-student";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub batch_norm: bool,
}

impl LayerSpec {
    /// 3×3, stride 1, padding 1, ReLU.
    pub fn conv3x3(out_channels: usize, batch_norm: bool) -> Self {
        Self {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            batch_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Global average pool followed by a linear layer.
    Classifier { classes: usize },
    /// Per-pixel 1×1 convolution.
    Segmentation { classes: usize },
}

impl Head {
    pub fn classes(self) -> usize {
        match self {
            Head::Classifier { classes } | Head::Segmentation { classes } => classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvNetSpec {
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub head: Head,
}

impl ConvNetSpec {
    pub fn uniform(in_channels: usize, depth: usize, width: usize, head: Head) -> Self {
        Self {
            in_channels,
            layers: (0..depth).map(|_| LayerSpec::conv3x3(width, true)).collect(),
            head,
        }
    }

    /// Three 3×3 conv layers of width 32.
    pub fn fig1_teacher(in_channels: usize, head: Head) -> Self {
        Self::uniform(in_channels, 3, 32, head)
    }

    /// Two 3×3 conv layers of width 16.
    pub fn fig1_student(in_channels: usize, head: Head) -> Self {
        Self::uniform(in_channels, 2, 16, head)
    }

    /// Looks up a named preset; `width` overrides the preset channel count.
    pub fn preset(name: &str, in_channels: usize, head: Head, width: Option<usize>) -> Result<Self> {
        let (depth, default_width) = match name {
            FIG1_TEACHER => (3, 32),
            FIG1_STUDENT => (2, 16),
            other => return Err(Error::invalid(format!("unknown model preset `{other}`"))),
        };
        Ok(Self::uniform(in_channels, depth, width.unwrap_or(default_width), head))
    }

    pub fn feature_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.out_channels)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Trainable scalar count from the layer list alone.
    pub fn param_count(&self) -> usize {
        let mut cin = self.in_channels;
        let mut total = 0;
        for l in &self.layers {
            total += l.kernel * l.kernel * cin * l.out_channels;
            // BN scale+shift, or a conv bias
            total += if l.batch_norm { 2 * l.out_channels } else { l.out_channels };
            cin = l.out_channels;
        }
        let k = self.head.classes();
        total + cin * k + k
    }

    /// Receptive field of one output pixel of the backbone.
    pub fn receptive_field(&self) -> usize {
        let mut r = 1;
        let mut jump = 1;
        for l in &self.layers {
            r += (l.kernel - 1) * jump;
            jump *= l.stride;
        }
        r
    }
}

/// `1 + Σ_l (k−1)·Π_{l'<l} stride` for `num_layers` identical layers.
pub fn receptive_field(num_layers: usize, kernel: usize, stride: usize) -> usize {
    let mut r = 1;
    let mut jump = 1;
    for _ in 0..num_layers {
        r += (kernel - 1) * jump;
        jump *= stride;
    }
    r
}

/// A network description plus the name prefix of its parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvNet {
    pub spec: ConvNetSpec,
    pub prefix: String,
}

/// Backbone output (the distillation tap) and head output.
#[derive(Debug, Clone, Copy)]
pub struct NetOutput {
    pub features: Var,
    pub logits: Var,
}

/// Builds a network and its He-initialized parameters, deterministic in `seed`.
pub fn build_convnet<T: Real>(
    spec: &ConvNetSpec,
    prefix: &str,
    seed: u64,
) -> Result<(ConvNet, ModelParams<T>)> {
    if spec.layers.is_empty() {
        return Err(Error::invalid("a convnet needs at least one layer"));
    }
    if spec.in_channels == 0 || spec.head.classes() == 0 {
        return Err(Error::invalid("channel and class counts must be positive"));
    }
    let net = ConvNet {
        spec: spec.clone(),
        prefix: String::from(prefix),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new(seed);
    let mut cin = spec.in_channels;
    for (i, l) in spec.layers.iter().enumerate() {
        let name = net.layer_name(i);
        let fan_in = l.kernel * l.kernel * cin;
        params.insert(
            format!("{name}.weight"),
            he_normal(&mut rng, &[l.kernel, l.kernel, cin, l.out_channels], fan_in),
        );
        if l.batch_norm {
            init_bn(&mut params, &name, l.out_channels);
        } else {
            params.insert(format!("{name}.bias"), Tensor::zeros(&[l.out_channels]));
        }
        cin = l.out_channels;
    }
    let k = spec.head.classes();
    let head_shape = match spec.head {
        Head::Classifier { .. } => alloc::vec![cin, k],
        Head::Segmentation { .. } => alloc::vec![1, 1, cin, k],
    };
    params.insert(
        format!("{}head.weight", net.prefix),
        he_normal(&mut rng, &head_shape, cin),
    );
    params.insert(format!("{}head.bias", net.prefix), Tensor::zeros(&[k]));
    Ok((net, params))
}

impl ConvNet {
    fn layer_name(&self, i: usize) -> String {
        format!("{}conv{i}", self.prefix)
    }

    /// Runs the backbone and head on `x: [B,H,W,Cin]`. `params` must be bound
    /// to `tape`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &mut ModelParams<T>,
        x: Var,
        mode: Mode,
    ) -> Result<NetOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.spec.in_channels {
            return Err(Error::invalid(format!(
                "expected input [B,H,W,{}], got {shape:?}",
                self.spec.in_channels
            )));
        }
        let mut h = x;
        for (i, l) in self.spec.layers.iter().enumerate() {
            let name = self.layer_name(i);
            let w = params.var(&format!("{name}.weight"))?;
            h = tape.conv2d(h, w, l.stride, l.padding)?;
            h = if l.batch_norm {
                apply_bn(tape, params, &name, h, mode)?
            } else {
                let b = params.var(&format!("{name}.bias"))?;
                tape.add_bias(h, b)?
            };
            h = tape.relu(h);
        }
        let features = h;
        let w = params.var(&format!("{}head.weight", self.prefix))?;
        let b = params.var(&format!("{}head.bias", self.prefix))?;
        let logits = match self.spec.head {
            Head::Classifier { .. } => {
                let pooled = global_avg_pool(tape, features)?;
                let z = tape.matmul(pooled, w)?;
                tape.add_bias(z, b)?
            }
            Head::Segmentation { .. } => {
                let z = tape.conv2d(features, w, 1, 0)?;
                tape.add_bias(z, b)?
            }
        };
        Ok(NetOutput { features, logits })
    }
}

/// `[B,H,W,C] -> [B,C]` spatial mean.
pub fn global_avg_pool<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let [b, h, w, c] = *tape.shape(x) else {
        return Err(Error::Rank {
            op: "global_avg_pool",
            expected: 4,
            shape: tape.shape(x).to_vec(),
        });
    };
    let flat = tape.reshape(x, &[b, h * w, c])?;
    let s = tape.sum_axis(flat, 1)?;
    Ok(tape.scale(s, T::one() / T::of_usize(h * w)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head() -> Head {
        Head::Classifier { classes: 4 }
    }

    #[test]
    fn receptive_field_recurrence() {
        assert_eq!(receptive_field(1, 3, 1), 3);
        assert_eq!(receptive_field(3, 3, 1), 7);
        assert_eq!(receptive_field(2, 3, 1), 5);
        assert_eq!(receptive_field(5, 1, 1), 1);
        assert_eq!(receptive_field(2, 3, 2), 1 + 2 + 2 * 2);
        for d in 1..8 {
            assert!(receptive_field(d + 1, 3, 1) > receptive_field(d, 3, 1));
        }
        assert_eq!(ConvNetSpec::fig1_teacher(1, head()).receptive_field(), 7);
        assert_eq!(ConvNetSpec::fig1_student(1, head()).receptive_field(), 5);
    }

    #[test]
    fn build_is_deterministic() {
        let spec = ConvNetSpec::fig1_teacher(1, head());
        let (_, a) = build_convnet::<f32>(&spec, "t.", 7).unwrap();
        let (_, b) = build_convnet::<f32>(&spec, "t.", 7).unwrap();
        assert_eq!(a, b);
        let (_, c) = build_convnet::<f32>(&spec, "t.", 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_closed_form() {
        let spec = ConvNetSpec::fig1_teacher(1, head());
        let (_, p) = build_convnet::<f32>(&spec, "", 0).unwrap();
        // 9·1·32 + 9·32·32·2 conv weights, 3 BN layers of 64, head 32·4 + 4
        let expected = 9 * 32 + 2 * 9 * 32 * 32 + 3 * 64 + 32 * 4 + 4;
        assert_eq!(p.trainable_count(), expected);
        assert_eq!(spec.param_count(), expected);
    }

    #[test]
    fn zero_layers_rejected() {
        let spec = ConvNetSpec {
            in_channels: 1,
            layers: Vec::new(),
            head: head(),
        };
        assert!(build_convnet::<f32>(&spec, "", 0).is_err());
        assert!(ConvNetSpec::preset("resnet", 1, head(), None).is_err());
    }

    #[test]
    fn zero_input_gives_zero_logits_and_preserves_size() {
        for spec in [
            ConvNetSpec::fig1_teacher(1, head()),
            ConvNetSpec::fig1_student(1, Head::Segmentation { classes: 3 }),
        ] {
            let (net, mut p) = build_convnet::<f32>(&spec, "", 3).unwrap();
            let mut tape = Tape::new();
            p.bind(&mut tape, false);
            let x = tape.constant(Tensor::zeros(&[2, 16, 16, 1]));
            let out = net.forward(&mut tape, &mut p, x, Mode::Eval).unwrap();
            assert_eq!(tape.shape(out.features), &[2, 16, 16, spec.feature_channels()]);
            assert!(tape.value(out.logits).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let spec = ConvNetSpec::fig1_student(1, head());
        let (net, mut p) = build_convnet::<f32>(&spec, "", 1).unwrap();
        let x = Tensor::from_f64(&[1, 6, 6, 1], &(0..36).map(|i| (i as f64).sin()).collect::<Vec<_>>()).unwrap();
        let run = |p: &mut ModelParams<f32>| {
            let mut tape = Tape::new();
            p.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let out = net.forward(&mut tape, p, xv, Mode::Eval).unwrap();
            tape.value(out.logits).clone()
        };
        let a = run(&mut p);
        let b = run(&mut p);
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let spec = ConvNetSpec::fig1_student(3, head());
        let (net, mut p) = build_convnet::<f32>(&spec, "", 1).unwrap();
        let mut tape = Tape::new();
        p.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 4, 4, 1]));
        assert!(net.forward(&mut tape, &mut p, x, Mode::Eval).is_err());
    }
}
