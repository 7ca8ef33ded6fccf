//! Distillation objectives: logit KL, one-to-one feature matching, and the
//! target-aware transformer (TaT) loss.
//!
//! The TaT correlation is indexed `(teacher position i, student position j)`
//! and normalized over `j`: row `i` holds the weights with which every student
//! pixel contributes to the reconfigured pixel `i`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::projector::ProjectorSet;
use crate::real::Real;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

/// A `[H,W,C]` (or batched `[B,H,W,C]`) activation on a tape, tagged with
/// the network that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub role: Role,
}

impl FeatureMap {
    pub fn student(var: Var) -> Self {
        Self {
            var,
            role: Role::Student,
        }
    }

    pub fn teacher(var: Var) -> Self {
        Self {
            var,
            role: Role::Teacher,
        }
    }
}

/// How a distance between two feature sets is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Mean over all elements of the squared difference.
    #[default]
    MeanSquared,
    /// Sum over pixels of the Euclidean norm of the per-pixel difference,
    /// averaged over the batch.
    LiteralSum,
}

impl Reduction {
    pub fn as_str(self) -> &'static str {
        match self {
            Reduction::MeanSquared => "mean_squared",
            Reduction::LiteralSum => "literal_sum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean_squared" => Some(Reduction::MeanSquared),
            "literal_sum" => Some(Reduction::LiteralSum),
            _ => None,
        }
    }
}

/// Loss weights and knobs of the classification objective
/// `α·task + β·KL + ε·TaT`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub kl_tau_square_correction: bool,
    pub reduction: Reduction,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            epsilon: 1.0,
            tau: 1.0,
            kl_tau_square_correction: false,
            reduction: Reduction::MeanSquared,
        }
    }
}

impl KdConfig {
    /// α = 0.5, β = 0.5, ε = 0.1.
    pub fn imagenet() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            epsilon: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("tau", "temperature must be positive"));
        }
        for (key, v) in [("alpha", self.alpha), ("beta", self.beta), ("epsilon", self.epsilon)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, "loss weights must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Row-stochastic `N×N` matrix; entry `(i, j)` weights student pixel `j` in
/// the reconstruction of teacher pixel `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap<T> {
    pub matrix: Tensor<T>,
}

impl<T: Real> CorrelationMap<T> {
    pub fn new(matrix: Tensor<T>) -> Result<Self> {
        match *matrix.shape() {
            [r, c] if r == c => Ok(Self { matrix }),
            _ => Err(Error::Rank {
                op: "correlation map",
                expected: 2,
                shape: matrix.shape().to_vec(),
            }),
        }
    }

    pub fn size(&self) -> usize {
        self.matrix.shape()[0]
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        let n = self.size();
        self.matrix
            .data()
            .chunks_exact(n)
            .map(|row| (row.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Row-major CSV, six digits after the decimal point.
    pub fn to_csv(&self) -> String {
        let n = self.size();
        let mut out = String::new();
        for row in self.matrix.data().chunks_exact(n) {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{:.6}", v.as_f64());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut data = Vec::new();
        let mut rows = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            for field in line.split(',') {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad CSV value `{field}`")))?;
                data.push(T::of(v));
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::invalid("empty correlation CSV"));
        }
        Self::new(Tensor::new(&[rows, data.len() / rows], data)?)
    }

    /// Binary PGM (P5), min-max scaled to 0..=255. A constant map is written
    /// as all 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let n = self.size();
        let vals: Vec<f64> = self.matrix.data().iter().map(|v| v.as_f64()).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
        out.extend(vals.iter().map(|&v| {
            if hi > lo {
                libm::round((v - lo) / (hi - lo) * 255.0) as u8
            } else {
                255
            }
        }));
        out
    }
}

fn feature_dims(tape: &Tape<impl Real>, v: Var) -> Result<(usize, usize, usize, usize)> {
    match *tape.shape(v) {
        [h, w, c] => Ok((1, h, w, c)),
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::Rank {
            op: "feature map",
            expected: 3,
            shape: tape.shape(v).to_vec(),
        }),
    }
}

fn check_roles(student: FeatureMap, teacher: FeatureMap) -> Result<()> {
    if student.role != Role::Student || teacher.role != Role::Teacher {
        return Err(Error::invalid("distillation loss needs a (student, teacher) feature pair"));
    }
    Ok(())
}

/// `[B,H,W,C]` or `[H,W,C]` to `[B,N,C]` or `[N,C]`.
fn flatten(tape: &mut Tape<impl Real>, v: Var) -> Result<Var> {
    let (b, h, w, c) = feature_dims(tape, v)?;
    if tape.shape(v).len() == 3 {
        tape.reshape(v, &[h * w, c])
    } else {
        tape.reshape(v, &[b, h * w, c])
    }
}

/// Scalar distance between equally shaped `[.., N, C]` tensors; `target` must
/// already be detached if it should not receive gradient.
fn distance<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, reduction: Reduction) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    match reduction {
        Reduction::MeanSquared => Ok(tape.mean(sq)),
        Reduction::LiteralSum => {
            let shape = tape.shape(sq).to_vec();
            let batch = if shape.len() >= 3 { shape[0] } else { 1 };
            let rows = tape.sum_axis(sq, shape.len() - 1)?;
            let norms = tape.sqrt(rows);
            let total = tape.sum(norms);
            Ok(tape.scale(total, T::one() / T::of_usize(batch)))
        }
    }
}

/// Logit distillation: batch mean of `KL(σ(T/τ) ‖ σ(S/τ))`, times τ² when
/// `correction` is set. The teacher side is detached.
pub fn kl_distill_loss<T: Real>(
    tape: &mut Tape<T>,
    teacher_logits: Var,
    student_logits: Var,
    tau: f64,
    correction: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config("tau", "temperature must be positive"));
    }
    let shape = tape.shape(student_logits).to_vec();
    if shape.len() != 2 || tape.shape(teacher_logits) != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "kl_distill_loss",
            lhs: tape.shape(teacher_logits).to_vec(),
            rhs: shape,
        });
    }
    let inv_tau = T::of(1.0 / tau);
    let t = tape.detach(teacher_logits);
    let t = tape.scale(t, inv_tau);
    let p = tape.softmax(t, 1)?;
    let log_p = tape.log_softmax(t, 1)?;
    let s = tape.scale(student_logits, inv_tau);
    let log_q = tape.log_softmax(s, 1)?;
    let gap = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, gap)?;
    let total = tape.sum(terms);
    let mut factor = 1.0 / shape[0] as f64;
    if correction {
        factor *= tau * tau;
    }
    Ok(tape.scale(total, T::of(factor)))
}

/// One-to-one feature matching between equally shaped maps.
pub fn fm_loss<T: Real>(
    tape: &mut Tape<T>,
    student: FeatureMap,
    teacher: FeatureMap,
    reduction: Reduction,
) -> Result<Var> {
    check_roles(student, teacher)?;
    if tape.shape(student.var) != tape.shape(teacher.var) {
        return Err(Error::ShapeMismatch {
            op: "fm_loss",
            lhs: tape.shape(student.var).to_vec(),
            rhs: tape.shape(teacher.var).to_vec(),
        });
    }
    feature_dims(tape, student.var)?;
    let t = tape.detach(teacher.var);
    let s = flatten(tape, student.var)?;
    let t = flatten(tape, t)?;
    distance(tape, s, t, reduction)
}

/// Softmax over student positions of teacher·studentᵀ inner products.
/// Inputs are `[N,C]` or batched `[B,N,C]`; the result is `[N,N]` /
/// `[B,N,N]` with rows indexed by teacher position.
pub fn tat_correlation<T: Real>(tape: &mut Tape<T>, student_proj: Var, teacher_proj: Var) -> Result<Var> {
    let (ss, ts) = (tape.shape(student_proj).to_vec(), tape.shape(teacher_proj).to_vec());
    if ss.len() != ts.len() || ss.last() != ts.last() || !(2..=3).contains(&ss.len()) {
        return Err(Error::ShapeMismatch {
            op: "tat_correlation",
            lhs: ss,
            rhs: ts,
        });
    }
    let st = tape.transpose(student_proj)?;
    let logits = tape.matmul(teacher_proj, st)?;
    let axis = tape.shape(logits).len() - 1;
    tape.softmax(logits, axis)
}

/// `corr × student_agg`: row `i` is `Σ_j corr[i,j] · student_agg[j]`.
pub fn tat_reconfigure<T: Real>(tape: &mut Tape<T>, corr: Var, student_agg: Var) -> Result<Var> {
    tape.matmul(corr, student_agg)
}

/// Handles produced by one TaT evaluation.
#[derive(Debug, Clone, Copy)]
pub struct TatOutput {
    pub loss: Var,
    /// `[N,N]` or `[B,N,N]` correlation.
    pub correlation: Var,
    pub reconfigured: Var,
    pub target: Var,
}

/// Target-aware transformer loss.
///
/// Flattens both maps, projects the (detached) teacher with θ and the student
/// with γ and φ, builds the correlation from θ/γ, reconfigures φ(student) with
/// it and measures the distance to θ(teacher).
#[allow(clippy::too_many_arguments)]
pub fn tat_loss<T: Real>(
    tape: &mut Tape<T>,
    params: &mut ModelParams<T>,
    student: FeatureMap,
    teacher: FeatureMap,
    projectors: &ProjectorSet,
    reduction: Reduction,
    mode: Mode,
) -> Result<TatOutput> {
    check_roles(student, teacher)?;
    let (sb, sh, sw, _) = feature_dims(tape, student.var)?;
    let (tb, th, tw, _) = feature_dims(tape, teacher.var)?;
    if (sb, sh, sw) != (tb, th, tw) || tape.shape(student.var).len() != tape.shape(teacher.var).len() {
        return Err(Error::ShapeMismatch {
            op: "tat_loss",
            lhs: tape.shape(student.var).to_vec(),
            rhs: tape.shape(teacher.var).to_vec(),
        });
    }
    let t = tape.detach(teacher.var);
    let target = projectors.theta.apply(tape, params, t, mode)?;
    let query = projectors.gamma.apply(tape, params, student.var, mode)?;
    let value = projectors.phi.apply(tape, params, student.var, mode)?;
    let target = flatten(tape, target)?;
    let query = flatten(tape, query)?;
    let value = flatten(tape, value)?;
    let correlation = tat_correlation(tape, query, target)?;
    let reconfigured = tat_reconfigure(tape, correlation, value)?;
    let loss = distance(tape, reconfigured, target, reduction)?;
    Ok(TatOutput {
        loss,
        correlation,
        reconfigured,
        target,
    })
}

/// `α·task + β·kl + ε·tat`.
pub fn total_loss_cls<T: Real>(tape: &mut Tape<T>, task: Var, kl: Var, tat: Var, cfg: &KdConfig) -> Result<Var> {
    let a = tape.scale(task, T::of(cfg.alpha));
    let b = tape.scale(kl, T::of(cfg.beta));
    let e = tape.scale(tat, T::of(cfg.epsilon));
    let ab = tape.add(a, b)?;
    tape.add(ab, e)
}

/// Mean cross-entropy of `[.., K]` logits against integer labels, one label
/// per row.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let k = *shape.last().unwrap_or(&0);
    let rows = tape.value(logits).len() / k.max(1);
    if rows != labels.len() {
        return Err(Error::invalid(format!(
            "cross_entropy: {rows} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let logp = tape.log_softmax(logits, shape.len() - 1)?;
    let index = labels.iter().enumerate().map(|(r, &l)| r * k + l).collect();
    let picked = tape.gather(logp, &[rows], index)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::{build_projectors, ProjectorKind::*};

    const E_SOFT: f64 = 0.731_058_578_630_004_9; // e / (e + 1)

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[rows, cols], v).unwrap()
    }

    #[test]
    fn kl_examples() {
        let mut tape = Tape::<f64>::new();
        let t = tape.constant(t2(1, 2, &[1.0, 0.0]));
        let s = tape.param(t2(1, 2, &[0.0, 1.0]));
        let kl = kl_distill_loss(&mut tape, t, s, 1.0, false).unwrap();
        let (p0, p1) = (E_SOFT, 1.0 - E_SOFT);
        let oracle = p0 * (p0 / p1).ln() + p1 * (p1 / p0).ln();
        assert!((tape.value(kl).item() - oracle).abs() < 1e-12);
        assert!((tape.value(kl).item() - 0.4621).abs() < 1e-4);
    }

    #[test]
    fn kl_identical_is_zero_and_high_tau_vanishes() {
        let mut tape = Tape::<f64>::new();
        let logits = t2(2, 3, &[0.3, -1.0, 2.0, 1.5, 0.0, -0.5]);
        let t = tape.constant(logits.clone());
        let s = tape.param(logits);
        let kl = kl_distill_loss(&mut tape, t, s, 2.0, true).unwrap();
        assert_eq!(tape.value(kl).item(), 0.0);
        let t = tape.constant(t2(1, 2, &[5.0, -5.0]));
        let s = tape.param(t2(1, 2, &[-5.0, 5.0]));
        let hot = kl_distill_loss(&mut tape, t, s, 1e4, false).unwrap();
        assert!(tape.value(hot).item() < 1e-6);
        assert!(kl_distill_loss(&mut tape, t, s, 0.0, false).is_err());
        assert!(kl_distill_loss(&mut tape, t, s, -1.0, false).is_err());
    }

    #[test]
    fn kl_is_shift_invariant_and_teacher_detached() {
        let mut tape = Tape::<f32>::new();
        let tl = Tensor::from_f64(&[2, 3], &[0.3, -1.0, 2.0, 1.5, 0.0, -0.5]).unwrap();
        let sl = Tensor::from_f64(&[2, 3], &[1.0, 0.2, -0.7, 0.1, 0.9, 0.4]).unwrap();
        let t = tape.param(tl.clone());
        let s = tape.param(sl.clone());
        let base = kl_distill_loss(&mut tape, t, s, 2.0, false).unwrap();
        tape.backward(base).unwrap();
        assert!(tape.grad(t).is_none());
        assert!(tape.grad(s).is_some());
        let t2v = tape.constant(tl.map(|x| x + 100.0));
        let s2v = tape.constant(sl.map(|x| x - 37.0));
        let shifted = kl_distill_loss(&mut tape, t2v, s2v, 2.0, false).unwrap();
        assert!((tape.value(base).item() - tape.value(shifted).item()).abs() < 1e-6);
    }

    #[test]
    fn fm_examples() {
        let mut tape = Tape::<f64>::new();
        let s = tape.param(Tensor::from_f64(&[1, 1, 2], &[1.0, 0.0]).unwrap());
        let t = tape.constant(Tensor::from_f64(&[1, 1, 2], &[0.0, 0.0]).unwrap());
        let l = fm_loss(&mut tape, FeatureMap::student(s), FeatureMap::teacher(t), Reduction::LiteralSum).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);

        // pixel distances 3 and 4
        let s = tape.param(Tensor::from_f64(&[1, 2, 2], &[3.0, 0.0, 0.0, 4.0]).unwrap());
        let t = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let l = fm_loss(&mut tape, FeatureMap::student(s), FeatureMap::teacher(t), Reduction::LiteralSum).unwrap();
        assert_eq!(tape.value(l).item(), 7.0);

        let l = fm_loss(&mut tape, FeatureMap::teacher(t), FeatureMap::student(s), Reduction::MeanSquared);
        assert!(l.is_err());
    }

    #[test]
    fn fm_identical_is_zero_and_shape_checked() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_f64(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = tape.param(x.clone());
        let t = tape.constant(x);
        for r in [Reduction::MeanSquared, Reduction::LiteralSum] {
            let l = fm_loss(&mut tape, FeatureMap::student(s), FeatureMap::teacher(t), r).unwrap();
            assert_eq!(tape.value(l).item(), 0.0);
        }
        let other = tape.constant(Tensor::zeros(&[2, 1, 2]));
        assert!(fm_loss(&mut tape, FeatureMap::student(s), FeatureMap::teacher(other), Reduction::MeanSquared).is_err());
    }

    #[test]
    fn correlation_examples() {
        let mut tape = Tape::<f64>::new();
        let one = tape.constant(t2(1, 3, &[0.5, -2.0, 1.0]));
        let c = tat_correlation(&mut tape, one, one).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0]);

        let s = tape.constant(t2(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]));
        let t = tape.constant(t2(3, 2, &[0.3, -1.0, 4.0, 0.0, 2.0, 2.0]));
        let c = tat_correlation(&mut tape, s, t).unwrap();
        for v in tape.value(c).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let eye = tape.constant(Tensor::eye(2));
        let c = tat_correlation(&mut tape, eye, eye).unwrap();
        let expect = [E_SOFT, 1.0 - E_SOFT, 1.0 - E_SOFT, E_SOFT];
        for (v, e) in tape.value(c).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-12);
        }
        let r = tat_reconfigure(&mut tape, c, eye).unwrap();
        for (v, e) in tape.value(r).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-12);
        }

        let bad = tape.constant(t2(2, 3, &[0.0; 6]));
        assert!(tat_correlation(&mut tape, eye, bad).is_err());
    }

    #[test]
    fn correlation_orientation_rows_are_teacher_positions() {
        // teacher pixel 0 aligns with student pixel 1 only
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(t2(2, 2, &[0.0, 10.0, 10.0, 0.0]));
        let t = tape.constant(t2(2, 2, &[10.0, 0.0, 0.0, 0.0]));
        let c = tat_correlation(&mut tape, s, t).unwrap();
        let m = tape.value(c);
        assert!(m.at(&[0, 1]) > 0.99);
        assert!((m.at(&[1, 0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reconfigure_identity_and_uniform() {
        let mut tape = Tape::<f64>::new();
        let agg = t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let a = tape.constant(agg.clone());
        let id = tape.constant(Tensor::eye(3));
        let r = tat_reconfigure(&mut tape, id, a).unwrap();
        assert_eq!(tape.value(r), &agg);
        let u = tape.constant(Tensor::full(&[3, 3], 1.0 / 3.0));
        let r = tat_reconfigure(&mut tape, u, a).unwrap();
        for row in tape.value(r).data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 5.0).abs() < 1e-12);
        }
        let bad = tape.constant(Tensor::eye(2));
        assert!(tat_reconfigure(&mut tape, bad, a).is_err());
    }

    #[test]
    fn tat_single_pixel_equals_fm() {
        let (set, mut params) = build_projectors::<f64>(Identity, Identity, Identity, 3, 3, 3, "", 0).unwrap();
        for r in [Reduction::MeanSquared, Reduction::LiteralSum] {
            let mut tape = Tape::new();
            params.bind(&mut tape, true);
            let s = tape.param(Tensor::from_f64(&[1, 1, 3], &[0.2, -0.4, 1.1]).unwrap());
            let t = tape.constant(Tensor::from_f64(&[1, 1, 3], &[1.0, 0.5, -0.3]).unwrap());
            let (sf, tf) = (FeatureMap::student(s), FeatureMap::teacher(t));
            let tat = tat_loss(&mut tape, &mut params, sf, tf, &set, r, Mode::Train).unwrap();
            let fm = fm_loss(&mut tape, sf, tf, r).unwrap();
            assert_eq!(tape.value(tat.loss).item(), tape.value(fm).item());
        }
    }

    #[test]
    fn tat_zero_when_reconfigured_student_hits_target() {
        // with N = 1 the reconfiguration is the student itself
        let (set, mut params) = build_projectors::<f64>(Identity, Identity, Identity, 2, 2, 2, "", 0).unwrap();
        let mut tape = Tape::new();
        params.bind(&mut tape, true);
        let x = Tensor::from_f64(&[1, 1, 2], &[0.7, -0.1]).unwrap();
        let s = tape.param(x.clone());
        let t = tape.constant(x);
        let out = tat_loss(&mut tape, &mut params, FeatureMap::student(s), FeatureMap::teacher(t), &set, Reduction::MeanSquared, Mode::Train).unwrap();
        assert_eq!(tape.value(out.loss).item(), 0.0);
    }

    #[test]
    fn tat_teacher_gets_no_gradient() {
        let (set, mut params) = build_projectors::<f64>(ConvBn, ConvBn, ConvBn, 2, 3, 4, "", 0).unwrap();
        let mut tape = Tape::new();
        params.bind(&mut tape, true);
        let s = tape.param(Tensor::from_f64(&[2, 2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2]).unwrap());
        let t = tape.param(Tensor::from_f64(&[2, 2, 2], &[1.0, -1.0, 0.5, 0.2, 0.3, 0.0, -0.4, 0.9]).unwrap());
        let out = tat_loss(&mut tape, &mut params, FeatureMap::student(s), FeatureMap::teacher(t), &set, Reduction::MeanSquared, Mode::Train).unwrap();
        tape.backward(out.loss).unwrap();
        assert!(tape.grad(t).is_none());
        assert!(tape.grad(s).is_some());
        assert!(tape.grad(params.var("theta.weight").unwrap()).is_some());
    }

    #[test]
    fn tat_rejects_swapped_roles_and_mismatch() {
        let (set, mut params) = build_projectors::<f64>(Identity, Identity, Identity, 2, 2, 2, "", 0).unwrap();
        let mut tape = Tape::new();
        params.bind(&mut tape, true);
        let a = tape.param(Tensor::zeros(&[2, 2, 2]));
        let b = tape.param(Tensor::zeros(&[2, 1, 2]));
        let c = tape.param(Tensor::zeros(&[2, 2, 3]));
        let r = Reduction::MeanSquared;
        assert!(tat_loss(&mut tape, &mut params, FeatureMap::teacher(a), FeatureMap::student(a), &set, r, Mode::Train).is_err());
        assert!(tat_loss(&mut tape, &mut params, FeatureMap::student(a), FeatureMap::teacher(b), &set, r, Mode::Train).is_err());
        // identity projectors cannot absorb a channel mismatch
        assert!(tat_loss(&mut tape, &mut params, FeatureMap::student(c), FeatureMap::teacher(a), &set, r, Mode::Train).is_err());
    }

    #[test]
    fn total_cls_examples() {
        let mut tape = Tape::<f64>::new();
        let task = tape.constant(Tensor::scalar(2.0));
        let kl = tape.constant(Tensor::scalar(1.0));
        let tat = tape.constant(Tensor::scalar(3.0));
        let l = total_loss_cls(&mut tape, task, kl, tat, &KdConfig::imagenet()).unwrap();
        assert!((tape.value(l).item() - 1.8).abs() < 1e-12);
        let zero = KdConfig { alpha: 0.0, beta: 0.0, epsilon: 0.0, ..KdConfig::default() };
        let l = total_loss_cls(&mut tape, task, kl, tat, &zero).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let one = tape.constant(Tensor::scalar(1.0));
        let two = tape.constant(Tensor::scalar(2.0));
        let cfg = KdConfig { alpha: 1.0, beta: 0.0, epsilon: 1.0, ..KdConfig::default() };
        let l = total_loss_cls(&mut tape, one, kl, two, &cfg).unwrap();
        assert_eq!(tape.value(l).item(), 3.0);
    }

    #[test]
    fn kd_config_validation() {
        assert!(KdConfig::default().validate().is_ok());
        assert!(KdConfig { tau: 0.0, ..KdConfig::default() }.validate().is_err());
        assert!(KdConfig { beta: -0.1, ..KdConfig::default() }.validate().is_err());
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut tape = Tape::<f64>::new();
        let z = tape.param(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let l = cross_entropy(&mut tape, z, &[0, 0]).unwrap();
        let expect = -(E_SOFT.ln() + (1.0 - E_SOFT).ln()) / 2.0;
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
        assert!(cross_entropy(&mut tape, z, &[0, 2]).is_err());
        assert!(cross_entropy(&mut tape, z, &[0]).is_err());
    }

    #[test]
    fn csv_and_pgm_export() {
        let one = CorrelationMap::new(Tensor::<f64>::ones(&[1, 1])).unwrap();
        assert_eq!(one.to_csv(), "1.000000\n");
        let eye = CorrelationMap::new(Tensor::<f64>::eye(2)).unwrap();
        let pgm = eye.to_pgm();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 4..], &[255, 0, 0, 255]);
        let m = CorrelationMap::new(t2(2, 2, &[0.25, 0.75, 0.123456789, 0.876543211])).unwrap();
        let back = CorrelationMap::<f64>::from_csv(&m.to_csv()).unwrap();
        assert!(back.matrix.max_abs_diff(&m.matrix) < 1e-5);
        assert!(CorrelationMap::<f64>::new(Tensor::zeros(&[2, 3])).is_err());
        assert!(CorrelationMap::<f64>::from_csv("a,b\n").is_err());
    }
}
