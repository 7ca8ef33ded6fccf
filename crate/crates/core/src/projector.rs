//! The θ/γ/φ feature projectors used before correlation and aggregation.

use alloc::format;
use alloc::string::String;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{apply_bn, he_normal, init_bn, ModelParams};
use crate::real::Real;
use crate::tape::{Mode, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProjectorKind {
    Identity,
    /// 3×3 convolution (padding 1) followed by batch norm.
    ConvBn,
    /// 1×1 convolution without normalization.
    Linear,
}

impl ProjectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProjectorKind::Identity => "identity",
            ProjectorKind::ConvBn => "conv_bn",
            ProjectorKind::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" | "id" => Some(ProjectorKind::Identity),
            "conv_bn" | "conv3x3_bn" => Some(ProjectorKind::ConvBn),
            "linear" => Some(ProjectorKind::Linear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Projector {
    pub kind: ProjectorKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub name: String,
}

impl Projector {
    fn init<T: Real>(&self, params: &mut ModelParams<T>, rng: &mut ChaCha8Rng) {
        let (cin, cout) = (self.in_channels, self.out_channels);
        match self.kind {
            ProjectorKind::Identity => {}
            ProjectorKind::ConvBn => {
                params.insert(
                    format!("{}.weight", self.name),
                    he_normal(rng, &[3, 3, cin, cout], 9 * cin),
                );
                init_bn(params, &self.name, cout);
            }
            ProjectorKind::Linear => {
                params.insert(
                    format!("{}.weight", self.name),
                    he_normal(rng, &[1, 1, cin, cout], cin),
                );
            }
        }
    }

    /// Applies the projector to `[H,W,C]` or `[B,H,W,C]`; spatial size is kept.
    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &mut ModelParams<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let c = *tape.shape(x).last().unwrap_or(&0);
        if c != self.in_channels {
            return Err(Error::invalid(format!(
                "projector {} expects {} channels, got {c}",
                self.name, self.in_channels
            )));
        }
        match self.kind {
            ProjectorKind::Identity => Ok(x),
            ProjectorKind::ConvBn => {
                let w = params.var(&format!("{}.weight", self.name))?;
                let y = tape.conv2d(x, w, 1, 1)?;
                apply_bn(tape, params, &self.name, y, mode)
            }
            ProjectorKind::Linear => {
                let w = params.var(&format!("{}.weight", self.name))?;
                tape.conv2d(x, w, 1, 0)
            }
        }
    }
}

/// θ (teacher target), γ (student, correlation side), φ (student, aggregation
/// side).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectorSet {
    pub theta: Projector,
    pub gamma: Projector,
    pub phi: Projector,
}

impl ProjectorSet {
    /// Channel count of the correlation space and of the distillation target.
    pub fn out_channels(&self) -> usize {
        self.theta.out_channels
    }

    pub fn is_identity(&self) -> bool {
        [&self.theta, &self.gamma, &self.phi]
            .iter()
            .all(|p| p.kind == ProjectorKind::Identity)
    }
}

/// Named projector ablation presets: non-, semi- and fully parametric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parametric {
    Non,
    Semi,
    Full,
}

impl Parametric {
    pub fn kinds(self) -> [ProjectorKind; 3] {
        use ProjectorKind::*;
        match self {
            Parametric::Non => [Identity, Identity, Identity],
            Parametric::Semi => [Identity, ConvBn, ConvBn],
            Parametric::Full => [ConvBn, ConvBn, ConvBn],
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "non" => Some(Parametric::Non),
            "semi" => Some(Parametric::Semi),
            "full" => Some(Parametric::Full),
            _ => None,
        }
    }
}

/// A single projector named `name`, initialized from `seed`.
pub fn build_projector<T: Real>(
    kind: ProjectorKind,
    in_channels: usize,
    out_channels: usize,
    name: &str,
    seed: u64,
) -> Result<(Projector, ModelParams<T>)> {
    if kind == ProjectorKind::Identity && in_channels != out_channels {
        return Err(Error::config(
            name,
            format!("identity projector cannot map {in_channels} channels to {out_channels}"),
        ));
    }
    let p = Projector {
        kind,
        in_channels,
        out_channels,
        name: String::from(name),
    };
    let mut params = ModelParams::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.init(&mut params, &mut rng);
    Ok((p, params))
}

/// Builds the three projectors with independent parameters.
///
/// `out_channels` is the shared width of θ, γ and φ outputs. Identity
/// projectors are only legal when their input already has that width.
#[allow(clippy::too_many_arguments)]
pub fn build_projectors<T: Real>(
    theta: ProjectorKind,
    gamma: ProjectorKind,
    phi: ProjectorKind,
    in_channels_teacher: usize,
    in_channels_student: usize,
    out_channels: usize,
    prefix: &str,
    seed: u64,
) -> Result<(ProjectorSet, ModelParams<T>)> {
    let make = |role: &str, kind: ProjectorKind, cin: usize| -> Result<Projector> {
        if kind == ProjectorKind::Identity && cin != out_channels {
            return Err(Error::config(
                role,
                format!("identity projector cannot map {cin} channels to {out_channels}"),
            ));
        }
        Ok(Projector {
            kind,
            in_channels: cin,
            out_channels,
            name: format!("{prefix}{role}"),
        })
    };
    let set = ProjectorSet {
        theta: make("theta", theta, in_channels_teacher)?,
        gamma: make("gamma", gamma, in_channels_student)?,
        phi: make("phi", phi, in_channels_student)?,
    };
    let mut params = ModelParams::new(seed);
    for (stream, p) in [&set.theta, &set.gamma, &set.phi].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64 + 1);
        p.init(&mut params, &mut rng);
    }
    Ok((set, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use ProjectorKind::*;

    #[test]
    fn identity_requires_matching_channels() {
        assert!(build_projectors::<f32>(Identity, Identity, Identity, 4, 4, 4, "p.", 0).is_ok());
        let err = build_projectors::<f32>(Identity, ConvBn, ConvBn, 8, 4, 4, "p.", 0).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "theta"));
        assert!(build_projectors::<f32>(Identity, Identity, ConvBn, 4, 2, 4, "p.", 0).is_err());
        // semi-parametric default aligns a narrower student
        let (set, params) = build_projectors::<f32>(Identity, ConvBn, ConvBn, 8, 4, 8, "p.", 0).unwrap();
        assert_eq!(set.out_channels(), 8);
        assert!(params.contains("p.gamma.weight") && params.contains("p.phi.weight"));
        assert!(!params.contains("p.theta.weight"));
    }

    #[test]
    fn projectors_have_independent_parameters() {
        let (_, params) = build_projectors::<f32>(ConvBn, ConvBn, ConvBn, 3, 3, 3, "", 5).unwrap();
        let t = params.get("theta.weight").unwrap();
        let g = params.get("gamma.weight").unwrap();
        let f = params.get("phi.weight").unwrap();
        assert_ne!(t, g);
        assert_ne!(g, f);
    }

    #[test]
    fn every_mode_preserves_spatial_size() {
        for kind in [Identity, ConvBn, Linear] {
            let cout = if kind == Identity { 3 } else { 5 };
            let (set, mut params) = build_projectors::<f32>(kind, kind, kind, 3, 3, cout, "", 1).unwrap();
            for shape in [&[4usize, 6, 3][..], &[2, 4, 6, 3][..]] {
                let mut tape = Tape::new();
                params.bind(&mut tape, true);
                let x = tape.constant(Tensor::ones(shape));
                let y = set.gamma.apply(&mut tape, &mut params, x, Mode::Train).unwrap();
                let ys = tape.shape(y);
                assert_eq!(&ys[..ys.len() - 1], &shape[..shape.len() - 1]);
                assert_eq!(*ys.last().unwrap(), cout);
            }
        }
    }
}
