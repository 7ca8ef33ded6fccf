//! Matrix-form losses against explicit per-pixel loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tat_core::hier::{anchor_point_loss, patch_group_loss, AnchorConfig, PatchGroupConfig};
use tat_core::losses::{fm_loss, tat_correlation, tat_loss, FeatureMap, Reduction};
use tat_core::params::ModelParams;
use tat_core::projector::{build_projectors, ProjectorKind, ProjectorSet};
use tat_core::{Mode, Tape, Tensor};

type Map = Vec<Vec<f64>>;

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor<f64> {
    let data = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(&[h, w, c], data).unwrap()
}

fn pixels(x: &Tensor<f64>) -> Map {
    let c = *x.shape().last().unwrap();
    x.data().chunks(c).map(<[f64]>::to_vec).collect()
}

/// For each teacher pixel i: weights softmax_j ⟨t_i, s_j⟩, reconstruction
/// Σ_j w_ij s_j, then the mean squared error against t_i.
fn loop_tat(s: &Map, t: &Map) -> f64 {
    let n = s.len();
    let c = s[0].len();
    let mut err = 0.0;
    for ti in t {
        let dots: Vec<f64> = s.iter().map(|sj| ti.iter().zip(sj).map(|(a, b)| a * b).sum()).collect();
        let m = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = dots.iter().map(|d| (d - m).exp()).sum();
        for k in 0..c {
            let r: f64 = (0..n).map(|j| (dots[j] - m).exp() / z * s[j][k]).sum();
            err += (r - ti[k]).powi(2);
        }
    }
    err / (n * c) as f64
}

fn block_means(x: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[h / k, w / k, c]);
    for i in 0..h / k {
        for j in 0..w / k {
            for ch in 0..c {
                let mut s = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        s += x.at(&[i * k + a, j * k + b, ch]);
                    }
                }
                out.set(&[i, j, ch], s / (k * k) as f64);
            }
        }
    }
    out
}

fn patch(x: &Tensor<f64>, pi: usize, pj: usize, ph: usize, pw: usize) -> Tensor<f64> {
    let c = x.shape()[2];
    let mut out = Tensor::zeros(&[ph, pw, c]);
    for a in 0..ph {
        for b in 0..pw {
            for ch in 0..c {
                out.set(&[a, b, ch], x.at(&[pi * ph + a, pj * pw + b, ch]));
            }
        }
    }
    out
}

fn identity(c: usize) -> ProjectorSet {
    let id = ProjectorKind::Identity;
    build_projectors::<f64>(id, id, id, c, c, c, "", 0).unwrap().0
}

enum Loss<'a> {
    Tat,
    Fm,
    PatchGroup(&'a PatchGroupConfig),
    Anchor(AnchorConfig),
}

fn eval(loss: Loss<'_>, s: &Tensor<f64>, t: &Tensor<f64>, set: &ProjectorSet) -> f64 {
    let mut tape = Tape::new();
    let mut params = ModelParams::new(0);
    let sv = FeatureMap::student(tape.constant(s.clone()));
    let tv = FeatureMap::teacher(tape.constant(t.clone()));
    let red = Reduction::MeanSquared;
    let v = match loss {
        Loss::Tat => tat_loss(&mut tape, &mut params, sv, tv, set, red, Mode::Train).unwrap().loss,
        Loss::Fm => fm_loss(&mut tape, sv, tv, red).unwrap(),
        Loss::PatchGroup(cfg) => patch_group_loss(&mut tape, &mut params, sv, tv, cfg, set, red, Mode::Train).unwrap(),
        Loss::Anchor(cfg) => anchor_point_loss(&mut tape, &mut params, sv, tv, &cfg, set, red, Mode::Train).unwrap(),
    };
    tape.value(v).item()
}

#[test]
fn tat_matches_loop_oracle_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..60 {
        let (h, w, c) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=4));
        let s = random_map(&mut rng, h, w, c);
        let t = random_map(&mut rng, h, w, c);
        let got = eval(Loss::Tat, &s, &t, &identity(c));
        let want = loop_tat(&pixels(&s), &pixels(&t));
        assert!((got - want).abs() < 1e-6, "{h}x{w}x{c}: {got} vs {want}");
    }
}

#[test]
fn tat_matches_loop_oracle_3x3x2() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = random_map(&mut rng, 3, 3, 2);
    let t = random_map(&mut rng, 3, 3, 2);
    let got = eval(Loss::Tat, &s, &t, &identity(2));
    assert!((got - loop_tat(&pixels(&s), &pixels(&t))).abs() < 1e-6);
}

#[test]
fn correlation_of_unit_vectors() {
    let mut tape = Tape::<f64>::new();
    let e = tape.constant(Tensor::eye(2));
    let e2 = tape.constant(Tensor::eye(2));
    let corr = tat_correlation(&mut tape, e, e2).unwrap();
    let a = 1.0f64.exp() / (1.0f64.exp() + 1.0);
    let want = [a, 1.0 - a, 1.0 - a, a];
    for (g, w) in tape.value(corr).data().iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }
    assert!((a - 0.7311).abs() < 1e-4);
}

#[test]
fn patch_group_with_single_patch_groups_matches_per_patch_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (hw, ph, c) in [(4, 2, 1), (8, 4, 2), (6, 3, 3)] {
        let s = random_map(&mut rng, hw, hw, c);
        let t = random_map(&mut rng, hw, hw, c);
        let n = hw / ph;
        let cfg = PatchGroupConfig {
            theta: ProjectorKind::Identity,
            ..PatchGroupConfig::new(ph, ph, n * n)
        };
        let got = eval(Loss::PatchGroup(&cfg), &s, &t, &identity(c));
        let mut want = 0.0;
        for i in 0..n {
            for j in 0..n {
                want += loop_tat(&pixels(&patch(&s, i, j, ph, ph)), &pixels(&patch(&t, i, j, ph, ph)));
            }
        }
        want /= (n * n) as f64;
        assert!((got - want).abs() < 1e-6, "{hw}/{ph}: {got} vs {want}");
    }
}

#[test]
fn anchor_matches_block_mean_then_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = random_map(&mut rng, 8, 8, 2);
    let t = random_map(&mut rng, 8, 8, 2);
    let got = eval(Loss::Anchor(AnchorConfig { pool_k: 2 }), &s, &t, &identity(2));
    let want = loop_tat(&pixels(&block_means(&s, 2)), &pixels(&block_means(&t, 2)));
    assert!((got - want).abs() < 1e-6);
}

#[test]
fn degeneracy_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let (hw, c) = (rng.random_range(2..=8), rng.random_range(1..=4));
        let s = random_map(&mut rng, hw, hw, c);
        let t = random_map(&mut rng, hw, hw, c);
        let set = identity(c);
        let full = eval(Loss::Tat, &s, &t, &set);
        let anchor = eval(Loss::Anchor(AnchorConfig { pool_k: 1 }), &s, &t, &set);
        let whole = PatchGroupConfig {
            theta: ProjectorKind::Identity,
            ..PatchGroupConfig::new(hw, hw, 1)
        };
        let pg = eval(Loss::PatchGroup(&whole), &s, &t, &set);
        assert!((anchor - full).abs() < 1e-6);
        assert!((pg - full).abs() < 1e-6);

        // k = H = W pools to one pixel, where TaT is FM of the global means
        let global = eval(Loss::Anchor(AnchorConfig { pool_k: hw }), &s, &t, &set);
        let fm = eval(Loss::Fm, &block_means(&s, hw), &block_means(&t, hw), &set);
        assert!((global - fm).abs() < 1e-6);

        let s1 = random_map(&mut rng, 1, 1, c);
        let t1 = random_map(&mut rng, 1, 1, c);
        assert!((eval(Loss::Tat, &s1, &t1, &set) - eval(Loss::Fm, &s1, &t1, &set)).abs() < 1e-12);
    }
}
