//! Estimated and measured cost of full versus hierarchical TaT.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tat_core::hier::{anchor_point_loss, patch_group_loss, tat_cost_estimate, AnchorConfig, Hierarchy, PatchGroupConfig};
use tat_core::losses::{tat_loss, FeatureMap, Reduction};
use tat_core::params::ModelParams;
use tat_core::projector::{build_projectors, ProjectorKind};
use tat_core::{Mode, Tape, Tensor};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub full_macs: u128,
    pub hier_macs: u128,
    pub full_time: Duration,
    pub hier_time: Duration,
}

impl CostReport {
    pub fn estimated_ratio(&self) -> f64 {
        self.full_macs as f64 / self.hier_macs as f64
    }

    pub fn measured_ratio(&self) -> f64 {
        self.full_time.as_secs_f64() / self.hier_time.as_secs_f64()
    }
}

/// Estimates both costs and times `reps` forward+backward evaluations of
/// each on one random `[1,h,w,c]` student/teacher pair, with identity
/// projectors so that only the correlation work is measured.
pub fn measure_cost(
    h: usize,
    w: usize,
    c: usize,
    patch_group: PatchGroupConfig,
    anchor: AnchorConfig,
    reps: usize,
    seed: u64,
) -> Result<CostReport> {
    let hierarchy = Hierarchy {
        patch_group: Some(patch_group),
        anchor: Some(anchor),
    };
    let full_macs = tat_cost_estimate(h, w, c, None)?;
    let hier_macs = tat_cost_estimate(h, w, c, Some(&hierarchy))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = || {
        let data = (0..h * w * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Tensor::new(&[1, h, w, c], data)
    };
    let (student, teacher) = (random()?, random()?);
    let id = ProjectorKind::Identity;
    let (full_set, _) = build_projectors::<f32>(id, id, id, c, c, c, "", seed)?;
    let per = patch_group.grid(h, w)?.per_group;
    let (pg_set, _) = build_projectors::<f32>(id, id, id, c * per, c * per, c * per, "", seed)?;
    let pg = PatchGroupConfig { theta: id, ..patch_group };
    let mut params = ModelParams::new(seed);

    let mut time = |hier: bool| -> Result<Duration> {
        let started = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::new();
            let s = tape.param(student.clone());
            let t = tape.constant(teacher.clone());
            let (s, t) = (FeatureMap::student(s), FeatureMap::teacher(t));
            let red = Reduction::MeanSquared;
            let loss = if hier {
                let a = patch_group_loss(&mut tape, &mut params, s, t, &pg, &pg_set, red, Mode::Train)?;
                let b = anchor_point_loss(&mut tape, &mut params, s, t, &anchor, &full_set, red, Mode::Train)?;
                tape.add(a, b)?
            } else {
                tat_loss(&mut tape, &mut params, s, t, &full_set, red, Mode::Train)?.loss
            };
            tape.backward(loss)?;
        }
        Ok(started.elapsed())
    };
    let full_time = time(false)?;
    let hier_time = time(true)?;
    Ok(CostReport {
        full_macs,
        hier_macs,
        full_time,
        hier_time,
    })
}
