//! Finite-difference audit of every distillation loss.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::finite_diff_check;
use crate::hier::{anchor_point_loss, patch_group_loss, AnchorConfig, PatchGroupConfig};
use crate::losses::{fm_loss, kl_distill_loss, tat_loss, FeatureMap, Reduction};
use crate::params::ModelParams;
use crate::projector::{build_projectors, Parametric, ProjectorKind, ProjectorSet};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Step of the central differences.
pub const AUDIT_STEP: f64 = 1e-3;
/// Largest accepted relative error.
pub const AUDIT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct AuditRow {
    /// Loss and the tensor differentiated, e.g. `tat[semi] d/d gamma.weight`.
    pub name: String,
    /// `[H, W, C]` of the audited feature maps.
    pub dims: [usize; 3],
    pub max_rel_error: f64,
}

impl AuditRow {
    pub fn passes(&self) -> bool {
        self.max_rel_error < AUDIT_TOLERANCE
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

struct Case {
    student: Tensor<f64>,
    teacher: Tensor<f64>,
}

type LossFn<'a> =
    dyn FnMut(&mut Tape<f64>, &mut ModelParams<f64>, FeatureMap, FeatureMap) -> Result<Var> + 'a;

/// Audits `loss` with respect to the student map and, when given, one
/// parameter tensor.
fn audit(
    rows: &mut Vec<AuditRow>,
    name: &str,
    case: &Case,
    params: &mut ModelParams<f64>,
    wrt_param: Option<&str>,
    loss: &mut LossFn<'_>,
) -> Result<()> {
    let s = case.student.shape();
    let dims = [s[1], s[2], s[3]];
    let check = finite_diff_check(
        |tape, x| {
            params.bind(tape, false);
            let t = tape.constant(case.teacher.clone());
            loss(tape, params, FeatureMap::student(x), FeatureMap::teacher(t))
        },
        &case.student,
        AUDIT_STEP,
    )?;
    rows.push(AuditRow {
        name: format!("{name} d/d student"),
        dims,
        max_rel_error: check.max_rel_error,
    });
    if let Some(p) = wrt_param {
        let value = params.get(p)?.clone();
        let check = finite_diff_check(
            |tape, w| {
                params.bind(tape, false);
                params.rebind(p, w);
                let s = tape.constant(case.student.clone());
                let t = tape.constant(case.teacher.clone());
                loss(tape, params, FeatureMap::student(s), FeatureMap::teacher(t))
            },
            &value,
            AUDIT_STEP,
        )?;
        rows.push(AuditRow {
            name: format!("{name} d/d {p}"),
            dims,
            max_rel_error: check.max_rel_error,
        });
    }
    params.unbind();
    Ok(())
}

fn projectors(mode: Parametric, tc: usize, sc: usize, prefix: &str, seed: u64) -> Result<(ProjectorSet, ModelParams<f64>)> {
    let [t, g, p] = mode.kinds();
    build_projectors(t, g, p, tc, sc, tc, prefix, seed)
}

/// Runs the audit: logit KL, FM, TaT under every projector mode on
/// `[2,4,4,3]` maps, and the patch-group and anchor-point losses on
/// `[2,8,8,2]` maps.
pub fn loss_audit(seed: u64) -> Result<Vec<AuditRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();

    let teacher_logits = random(&mut rng, &[3, 5]);
    let student_logits = random(&mut rng, &[3, 5]);
    for (tau, correction) in [(1.0, false), (4.0, true)] {
        let check = finite_diff_check(
            |tape, s| {
                let t = tape.constant(teacher_logits.clone());
                kl_distill_loss(tape, t, s, tau, correction)
            },
            &student_logits,
            AUDIT_STEP,
        )?;
        rows.push(AuditRow {
            name: format!("kl[tau={tau}] d/d student logits"),
            dims: [1, 1, 5],
            max_rel_error: check.max_rel_error,
        });
    }

    let small = Case {
        student: random(&mut rng, &[2, 4, 4, 3]),
        teacher: random(&mut rng, &[2, 4, 4, 3]),
    };
    let mut none = ModelParams::new(0);
    for red in [Reduction::MeanSquared, Reduction::LiteralSum] {
        audit(
            &mut rows,
            &format!("fm[{}]", red.as_str()),
            &small,
            &mut none,
            None,
            &mut |tape, _, s, t| fm_loss(tape, s, t, red),
        )?;
    }
    for (mode, label) in [(Parametric::Non, "non"), (Parametric::Semi, "semi"), (Parametric::Full, "full")] {
        let (set, mut params) = projectors(mode, 3, 3, "", seed)?;
        let wrt = match mode {
            Parametric::Non => None,
            Parametric::Semi => Some("gamma.weight"),
            Parametric::Full => Some("theta.bn.scale"),
        };
        audit(
            &mut rows,
            &format!("tat[{label}]"),
            &small,
            &mut params,
            wrt,
            &mut |tape, p, s, t| Ok(tat_loss(tape, p, s, t, &set, Reduction::MeanSquared, Mode::Train)?.loss),
        )?;
    }

    let large = Case {
        student: random(&mut rng, &[2, 8, 8, 2]),
        teacher: random(&mut rng, &[2, 8, 8, 2]),
    };
    // 16 patches of 2×2 in 4 groups: grouped maps carry 2·4 channels
    let pg = PatchGroupConfig::new(2, 2, 4);
    let (set, mut params) = build_projectors::<f64>(
        ProjectorKind::Linear,
        ProjectorKind::Identity,
        ProjectorKind::Identity,
        8,
        8,
        8,
        "pg.",
        seed,
    )?;
    audit(
        &mut rows,
        "patch_group",
        &large,
        &mut params,
        Some("pg.theta.weight"),
        &mut |tape, p, s, t| patch_group_loss(tape, p, s, t, &pg, &set, Reduction::MeanSquared, Mode::Train),
    )?;
    let ap = AnchorConfig { pool_k: 2 };
    let (set, mut params) = projectors(Parametric::Semi, 2, 2, "anchor.", seed)?;
    audit(
        &mut rows,
        "anchor_point",
        &large,
        &mut params,
        Some("anchor.phi.weight"),
        &mut |tape, p, s, t| anchor_point_loss(tape, p, s, t, &ap, &set, Reduction::MeanSquared, Mode::Train),
    )?;
    Ok(rows)
}
