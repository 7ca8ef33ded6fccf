//! Hierarchical distillation for large maps: patch groups for local structure,
//! average-pooled anchors for global structure.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::losses::{tat_loss, FeatureMap, Reduction};
use crate::params::ModelParams;
use crate::projector::{ProjectorKind, ProjectorSet};
use crate::real::Real;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Patch size `h×w` and group count `g`. With an `H×W` map there are
/// `n·m = (H/h)·(W/w)` patches and `p = n·m/g` patches per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGroupConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub groups: usize,
    /// Projector applied to the grouped teacher tensor.
    pub theta: ProjectorKind,
}

/// Patch grid of a validated [`PatchGroupConfig`] on a concrete map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub per_group: usize,
}

impl PatchGrid {
    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }
}

impl PatchGroupConfig {
    pub fn new(patch_h: usize, patch_w: usize, groups: usize) -> Self {
        Self {
            patch_h,
            patch_w,
            groups,
            theta: ProjectorKind::Linear,
        }
    }

    pub fn grid(&self, h: usize, w: usize) -> Result<PatchGrid> {
        if self.patch_h == 0 || !h.is_multiple_of(self.patch_h) {
            return Err(Error::config("patch_h", format!("{} does not divide height {h}", self.patch_h)));
        }
        if self.patch_w == 0 || !w.is_multiple_of(self.patch_w) {
            return Err(Error::config("patch_w", format!("{} does not divide width {w}", self.patch_w)));
        }
        let (rows, cols) = (h / self.patch_h, w / self.patch_w);
        let count = rows * cols;
        if self.groups == 0 || count % self.groups != 0 {
            return Err(Error::config(
                "groups",
                format!("{} does not divide the {count} patches", self.groups),
            ));
        }
        Ok(PatchGrid {
            rows,
            cols,
            per_group: count / self.groups,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorConfig {
    /// Pooling window and stride.
    pub pool_k: usize,
}

impl AnchorConfig {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.pool_k == 0 || !h.is_multiple_of(self.pool_k) || !w.is_multiple_of(self.pool_k) {
            return Err(Error::config(
                "pool_k",
                format!("{} does not divide the {h}x{w} map", self.pool_k),
            ));
        }
        Ok(())
    }
}

/// `α·CE + δ·L_pg + ζ·L_ap`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegLossWeights {
    pub alpha: f64,
    pub delta: f64,
    pub zeta: f64,
}

impl SegLossWeights {
    pub fn voc() -> Self {
        Self {
            alpha: 1.0,
            delta: 0.1,
            zeta: 0.05,
        }
    }

    pub fn cocostuff_resnet18() -> Self {
        Self {
            alpha: 1.0,
            delta: 0.6,
            zeta: 0.6,
        }
    }

    pub fn cocostuff_mobilenetv2() -> Self {
        Self {
            alpha: 1.0,
            delta: 0.4,
            zeta: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("alpha", self.alpha), ("delta", self.delta), ("zeta", self.zeta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, "loss weights must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

fn hwc<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::Rank {
            op: "patch partition",
            expected: 3,
            shape: x.shape().to_vec(),
        }),
    }
}

/// Splits an `H×W×C` map into `n·m` patches, row-major over the patch grid.
pub fn partition_patches<T: Real>(x: &Tensor<T>, cfg: &PatchGroupConfig) -> Result<Vec<Tensor<T>>> {
    let (h, w, c) = hwc(x)?;
    let grid = cfg.grid(h, w)?;
    let (ph, pw) = (cfg.patch_h, cfg.patch_w);
    let mut out = Vec::with_capacity(grid.patches());
    for r in 0..grid.rows {
        for q in 0..grid.cols {
            let mut data = Vec::with_capacity(ph * pw * c);
            for y in 0..ph {
                let start = ((r * ph + y) * w + q * pw) * c;
                data.extend_from_slice(&x.data()[start..start + pw * c]);
            }
            out.push(Tensor::new(&[ph, pw, c], data)?);
        }
    }
    Ok(out)
}

/// Inverse of [`partition_patches`].
pub fn reassemble_patches<T: Real>(patches: &[Tensor<T>], rows: usize, cols: usize) -> Result<Tensor<T>> {
    if patches.len() != rows * cols || patches.is_empty() {
        return Err(Error::invalid(format!(
            "{} patches cannot fill a {rows}x{cols} grid",
            patches.len()
        )));
    }
    let (ph, pw, c) = hwc(&patches[0])?;
    let (h, w) = (rows * ph, cols * pw);
    let mut out = Tensor::zeros(&[h, w, c]);
    for (i, p) in patches.iter().enumerate() {
        let (r, q) = (i / cols, i % cols);
        for y in 0..ph {
            let dst = ((r * ph + y) * w + q * pw) * c;
            out.data_mut()[dst..dst + pw * c].copy_from_slice(&p.data()[y * pw * c..(y + 1) * pw * c]);
        }
    }
    Ok(out)
}

/// Concatenates consecutive runs of `p = len/groups` patches along channels.
pub fn group_concat<T: Real>(patches: &[Tensor<T>], groups: usize) -> Result<Vec<Tensor<T>>> {
    if groups == 0 || patches.is_empty() || !patches.len().is_multiple_of(groups) {
        return Err(Error::config(
            "groups",
            format!("{groups} groups cannot split {} patches", patches.len()),
        ));
    }
    let p = patches.len() / groups;
    let (ph, pw, c) = hwc(&patches[0])?;
    patches
        .chunks_exact(p)
        .map(|run| {
            let mut data = Vec::with_capacity(ph * pw * c * p);
            for pix in 0..ph * pw {
                for patch in run {
                    data.extend_from_slice(&patch.data()[pix * c..(pix + 1) * c]);
                }
            }
            Tensor::new(&[ph, pw, c * p], data)
        })
        .collect()
}

/// Inverse of [`group_concat`]; `channels` is the per-patch channel count.
pub fn ungroup<T: Real>(groups: &[Tensor<T>], channels: usize) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::new();
    for g in groups {
        let (ph, pw, cp) = hwc(g)?;
        if channels == 0 || cp % channels != 0 {
            return Err(Error::invalid("group channel count is not a multiple of patch channels"));
        }
        for q in 0..cp / channels {
            let mut data = Vec::with_capacity(ph * pw * channels);
            for pix in 0..ph * pw {
                let s = pix * cp + q * channels;
                data.extend_from_slice(&g.data()[s..s + channels]);
            }
            out.push(Tensor::new(&[ph, pw, channels], data)?);
        }
    }
    Ok(out)
}

/// Flat source index of every element of the grouped `[B·g, h, w, C·p]`
/// tensor built from a `[B, H, W, C]` map.
pub fn patch_group_index(b: usize, h: usize, w: usize, c: usize, cfg: &PatchGroupConfig) -> Result<Vec<usize>> {
    let grid = cfg.grid(h, w)?;
    let (ph, pw, p) = (cfg.patch_h, cfg.patch_w, grid.per_group);
    let mut index = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for g in 0..cfg.groups {
            for y in 0..ph {
                for x in 0..pw {
                    for q in 0..p {
                        let patch = g * p + q;
                        let (r, col) = (patch / grid.cols, patch % grid.cols);
                        let base = ((bi * h + r * ph + y) * w + col * pw + x) * c;
                        index.extend(base..base + c);
                    }
                }
            }
        }
    }
    Ok(index)
}

/// Reorganizes a `[B,H,W,C]` (or `[H,W,C]`) map into `[B·g, h, w, C·p]`.
pub fn group_patches<T: Real>(tape: &mut Tape<T>, x: Var, cfg: &PatchGroupConfig) -> Result<Var> {
    let (b, h, w, c) = match *tape.shape(x) {
        [h, w, c] => (1, h, w, c),
        [b, h, w, c] => (b, h, w, c),
        _ => {
            return Err(Error::Rank {
                op: "group_patches",
                expected: 4,
                shape: tape.shape(x).to_vec(),
            })
        }
    };
    let grid = cfg.grid(h, w)?;
    let index = patch_group_index(b, h, w, c, cfg)?;
    let shape = [b * cfg.groups, cfg.patch_h, cfg.patch_w, c * grid.per_group];
    tape.gather(x, &shape, index)
}

/// Patch-group TaT loss: TaT applied to every grouped teacher/student pair
/// and averaged over groups. `projectors` operate on the grouped channel
/// widths `C·p`.
#[allow(clippy::too_many_arguments)]
pub fn patch_group_loss<T: Real>(
    tape: &mut Tape<T>,
    params: &mut ModelParams<T>,
    student: FeatureMap,
    teacher: FeatureMap,
    cfg: &PatchGroupConfig,
    projectors: &ProjectorSet,
    reduction: Reduction,
    mode: Mode,
) -> Result<Var> {
    let t = tape.detach(teacher.var);
    let sg = group_patches(tape, student.var, cfg)?;
    let tg = group_patches(tape, t, cfg)?;
    let out = tat_loss(
        tape,
        params,
        FeatureMap { var: sg, ..student },
        FeatureMap { var: tg, ..teacher },
        projectors,
        reduction,
        mode,
    )?;
    Ok(out.loss)
}

/// Non-overlapping average pooling with window and stride `pool_k`.
pub fn anchor_pool_map<T: Real>(tape: &mut Tape<T>, x: Var, cfg: &AnchorConfig) -> Result<Var> {
    let s = tape.shape(x);
    let (h, w) = match *s {
        [h, w, _] | [_, h, w, _] => (h, w),
        _ => {
            return Err(Error::Rank {
                op: "anchor_pool_map",
                expected: 4,
                shape: s.to_vec(),
            })
        }
    };
    cfg.validate(h, w)?;
    tape.avg_pool2d(x, cfg.pool_k)
}

/// Anchor-point TaT loss: TaT between the pooled maps.
#[allow(clippy::too_many_arguments)]
pub fn anchor_point_loss<T: Real>(
    tape: &mut Tape<T>,
    params: &mut ModelParams<T>,
    student: FeatureMap,
    teacher: FeatureMap,
    cfg: &AnchorConfig,
    projectors: &ProjectorSet,
    reduction: Reduction,
    mode: Mode,
) -> Result<Var> {
    let t = tape.detach(teacher.var);
    let sp = anchor_pool_map(tape, student.var, cfg)?;
    let tp = anchor_pool_map(tape, t, cfg)?;
    let out = tat_loss(
        tape,
        params,
        FeatureMap { var: sp, ..student },
        FeatureMap { var: tp, ..teacher },
        projectors,
        reduction,
        mode,
    )?;
    Ok(out.loss)
}

pub fn total_loss_seg<T: Real>(tape: &mut Tape<T>, ce: Var, pg: Var, ap: Var, w: &SegLossWeights) -> Result<Var> {
    let a = tape.scale(ce, T::of(w.alpha));
    let d = tape.scale(pg, T::of(w.delta));
    let z = tape.scale(ap, T::of(w.zeta));
    let ad = tape.add(a, d)?;
    tape.add(ad, z)
}

/// Hierarchical settings whose TaT cost is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Hierarchy {
    pub patch_group: Option<PatchGroupConfig>,
    pub anchor: Option<AnchorConfig>,
}

/// Multiply-adds of the correlation and aggregation products, `2·N²·C` for a
/// single TaT on `N` positions. With a hierarchy the patch-group and anchor
/// costs are summed instead.
pub fn tat_cost_estimate(h: usize, w: usize, c: usize, hierarchy: Option<&Hierarchy>) -> Result<u128> {
    let tat = |n: u128, ch: u128| 2 * n * n * ch;
    let full = tat((h * w) as u128, c as u128);
    let Some(hier) = hierarchy else { return Ok(full) };
    if hier.patch_group.is_none() && hier.anchor.is_none() {
        return Ok(full);
    }
    let mut total = 0;
    if let Some(pg) = &hier.patch_group {
        let grid = pg.grid(h, w)?;
        let n = (pg.patch_h * pg.patch_w) as u128;
        total += pg.groups as u128 * tat(n, (c * grid.per_group) as u128);
    }
    if let Some(a) = &hier.anchor {
        a.validate(h, w)?;
        let n = ((h / a.pool_k) * (w / a.pool_k)) as u128;
        total += tat(n, c as u128);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Tensor<f64> {
        Tensor::from_f64(&[h, w, c], &(0..h * w * c).map(|i| i as f64).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn patch_counts() {
        let cfg = PatchGroupConfig::new(8, 8, 64);
        let grid = cfg.grid(128, 128).unwrap();
        assert_eq!(grid.patches(), 256);
        assert_eq!(grid.per_group, 4);
        assert!(PatchGroupConfig::new(8, 8, 3).grid(128, 128).is_err());
        assert!(PatchGroupConfig::new(3, 8, 1).grid(128, 128).is_err());
    }

    #[test]
    fn partition_examples() {
        let x = ramp(4, 4, 1);
        let whole = partition_patches(&x, &PatchGroupConfig::new(4, 4, 1)).unwrap();
        assert_eq!(whole, alloc::vec![x.clone()]);
        let quads = partition_patches(&x, &PatchGroupConfig::new(2, 2, 4)).unwrap();
        assert_eq!(quads.len(), 4);
        assert_eq!(quads[0].data(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(quads[1].data(), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(quads[2].data(), &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(quads[3].data(), &[10.0, 11.0, 14.0, 15.0]);
        assert_eq!(reassemble_patches(&quads, 2, 2).unwrap(), x);
    }

    #[test]
    fn group_concat_examples() {
        let a = Tensor::<f64>::from_f64(&[1, 1, 1], &[3.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1, 1, 1], &[7.0]).unwrap();
        let g = group_concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].shape(), &[1, 1, 2]);
        assert_eq!(g[0].data(), &[3.0, 7.0]);
        let same = group_concat(&[a.clone(), b.clone()], 2).unwrap();
        assert_eq!(same, alloc::vec![a, b]);
        assert!(group_concat(&same, 3).is_err());
    }

    #[test]
    fn table9_grouping_shape() {
        let x = Tensor::<f32>::zeros(&[128, 128, 2]);
        let cfg = PatchGroupConfig::new(8, 8, 64);
        let groups = group_concat(&partition_patches(&x, &cfg).unwrap(), 64).unwrap();
        assert_eq!(groups.len(), 64);
        assert_eq!(groups[0].shape(), &[8, 8, 8]);
    }

    #[test]
    fn tape_grouping_matches_value_grouping() {
        let x = ramp(4, 6, 3);
        for (ph, pw, g) in [(2, 2, 6), (2, 3, 2), (4, 6, 1), (1, 1, 4)] {
            let cfg = PatchGroupConfig::new(ph, pw, g);
            let groups = group_concat(&partition_patches(&x, &cfg).unwrap(), g).unwrap();
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let gv = group_patches(&mut tape, v, &cfg).unwrap();
            let flat: Vec<f64> = groups.iter().flat_map(|t| t.data().iter().copied()).collect();
            assert_eq!(tape.value(gv).data(), flat.as_slice());
        }
    }

    #[test]
    fn anchor_ramp_block_means() {
        let x = Tensor::<f64>::from_f64(&[4, 4, 1], &(1..=16).map(f64::from).collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let p = anchor_pool_map(&mut tape, v, &AnchorConfig { pool_k: 2 }).unwrap();
        assert_eq!(tape.value(p).data(), &[3.5, 5.5, 11.5, 13.5]);
        let id = anchor_pool_map(&mut tape, v, &AnchorConfig { pool_k: 1 }).unwrap();
        assert_eq!(tape.value(id), &x);
        assert!(anchor_pool_map(&mut tape, v, &AnchorConfig { pool_k: 3 }).is_err());
        let c = tape.constant(Tensor::full(&[4, 4, 2], 0.25));
        let pc = anchor_pool_map(&mut tape, c, &AnchorConfig { pool_k: 4 }).unwrap();
        assert_eq!(tape.value(pc), &Tensor::full(&[1, 1, 2], 0.25));
    }

    #[test]
    fn seg_total_examples() {
        let mut tape = Tape::<f64>::new();
        let one = tape.constant(Tensor::scalar(1.0));
        let zero = tape.constant(Tensor::scalar(0.0));
        let l = total_loss_seg(&mut tape, one, one, one, &SegLossWeights::voc()).unwrap();
        assert!((tape.value(l).item() - 1.15).abs() < 1e-12);
        let ce_only = SegLossWeights { alpha: 1.0, delta: 0.0, zeta: 0.0 };
        let l = total_loss_seg(&mut tape, one, one, one, &ce_only).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let l = total_loss_seg(&mut tape, zero, one, one, &SegLossWeights::cocostuff_resnet18()).unwrap();
        assert!((tape.value(l).item() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn cost_examples() {
        assert_eq!(tat_cost_estimate(1, 1, 5, None).unwrap(), 10);
        let small = tat_cost_estimate(8, 8, 3, None).unwrap();
        let big = tat_cost_estimate(16, 16, 3, None).unwrap();
        assert_eq!(big, 16 * small);
        let hier = Hierarchy {
            patch_group: Some(PatchGroupConfig::new(8, 8, 64)),
            anchor: Some(AnchorConfig { pool_k: 4 }),
        };
        let full = tat_cost_estimate(64, 64, 4, None).unwrap();
        let reduced = tat_cost_estimate(64, 64, 4, Some(&hier)).unwrap();
        // 2·4096²·C vs 64·2·64²·C + 2·256²·C
        assert_eq!(full, 2 * 4096 * 4096 * 4);
        assert_eq!(reduced, 64 * 2 * 64 * 64 * 4 + 2 * 256 * 256 * 4);
        assert!(full / reduced >= 10);
        let only_pg = Hierarchy { anchor: None, ..hier };
        assert_eq!(tat_cost_estimate(64, 64, 4, Some(&only_pg)).unwrap(), 64 * 2 * 64 * 64 * 4);
    }
}
