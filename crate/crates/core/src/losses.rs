//! Objective terms and their fixed-weight mixing.

use serde::{Deserialize, Serialize};

use crate::ablation::Ablation;
use crate::datagen::Modality;
use crate::diffcore::{Tape, Var, NORM_EPS};
use crate::error::{Result, SsftError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Cross-modality triplet margin.
    pub rho1: f64,
    /// Single-modality triplet margin.
    pub rho2: f64,
    /// Reconstruction weight.
    pub lambda1: f64,
    /// Modality-adversarial weight.
    pub lambda2: f64,
    /// Projection-adversarial weight.
    pub lambda3: f64,
    /// Neighbors kept per row and block of the affinity.
    pub k: usize,
    /// Feed row-normalized `H` and `P` to the projection-adversarial term.
    /// On raw features the generator can raise `L_pa` without bound by
    /// inflating `H`.
    pub pa_unit_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rho1: 0.3,
            rho2: 0.3,
            lambda1: 1.0,
            lambda2: 0.2,
            lambda3: 0.2,
            k: 4,
            pa_unit_features: true,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [
            ("rho1", self.rho1),
            ("rho2", self.rho2),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                v.push(format!("train.{name} must be finite and >= 0"));
            }
        }
        if self.k == 0 {
            v.push("train.k must be >= 1".into());
        }
        v
    }

    /// Zeroes the weight of every complementary term switched off.
    pub fn with_ablation(&self, ab: &Ablation) -> TrainConfig {
        TrainConfig {
            lambda1: if ab.re { self.lambda1 } else { 0.0 },
            lambda2: if ab.moa { self.lambda2 } else { 0.0 },
            lambda3: if ab.pa { self.lambda3 } else { 0.0 },
            ..*self
        }
    }
}

/// Weight of a classification loss relative to its triplet partner.
pub const TRIPLET_WEIGHT_H: f64 = 0.5;
pub const CLS_WEIGHT_P: f64 = 0.5;
pub const TRIPLET_WEIGHT_P: f64 = 0.5;
pub const TRANSFER_WEIGHT_T: f64 = 0.25;

/// A triplet loss node and how many triplets it averages.
#[derive(Clone, Copy, Debug)]
pub struct TripletLoss {
    pub value: Var,
    pub valid: usize,
}

impl TripletLoss {
    /// No valid triplet existed; the loss is a constant zero.
    pub fn warned(&self) -> bool {
        self.valid == 0
    }
}

/// `(positive, negative)` entry pairs of the distance matrix between anchors
/// and candidates; `same_set` excludes each anchor as its own positive.
fn triplet_entries(
    ids_a: &[u32],
    ids_c: &[u32],
    same_set: bool,
) -> Vec<((usize, usize), (usize, usize))> {
    let mut out = Vec::new();
    for (i, ya) in ids_a.iter().enumerate() {
        for (j, yp) in ids_c.iter().enumerate() {
            if yp != ya || (same_set && i == j) {
                continue;
            }
            for (k, yn) in ids_c.iter().enumerate() {
                if yn != ya {
                    out.push(((i, j), (i, k)));
                }
            }
        }
    }
    out
}

/// Mean of `max(margin + ‖a−p‖ − ‖a−n‖, 0)` over every valid triplet of every
/// `(anchors, candidates)` group. Distances are floored inside the root so
/// coincident rows, which graph propagation produces readily, stay smooth.
fn triplet_mean(
    tape: &mut Tape,
    groups: &[(Var, &[u32], Var, &[u32], bool)],
    margin: f64,
) -> Result<TripletLoss> {
    let mut pos_parts = Vec::new();
    let mut neg_parts = Vec::new();
    let mut valid = 0;
    for &(a, ids_a, c, ids_c, same_set) in groups {
        if tape.value(a).rows() != ids_a.len() || tape.value(c).rows() != ids_c.len() {
            return Err(SsftError::Shape {
                op: "triplet",
                left: tape.value(a).shape(),
                right: (ids_a.len(), ids_c.len()),
            });
        }
        let entries = triplet_entries(ids_a, ids_c, same_set);
        if entries.is_empty() {
            continue;
        }
        valid += entries.len();
        let sq = tape.pairwise_sq_dist(a, c)?;
        let sq = tape.add_scalar(sq, NORM_EPS);
        let d = tape.sqrt(sq);
        let (pos, neg): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        pos_parts.push(tape.gather(d, pos)?);
        neg_parts.push(tape.gather(d, neg)?);
    }
    if valid == 0 {
        log::warn!("triplet loss: batch has no valid triplet");
        return Ok(TripletLoss {
            value: tape.constant(crate::diffcore::Matrix::scalar(0.0)),
            valid,
        });
    }
    let pos = tape.concat_rows(&pos_parts)?;
    let neg = tape.concat_rows(&neg_parts)?;
    let gap = tape.sub(pos, neg)?;
    let gap = tape.add_scalar(gap, margin);
    let h = tape.hinge(gap);
    Ok(TripletLoss {
        value: tape.mean(h),
        valid,
    })
}

/// Cross-modality triplet: RGB anchors against IR candidates and the reverse.
pub fn cm_triplet(
    tape: &mut Tape,
    feats_r: Var,
    feats_i: Var,
    ids_r: &[u32],
    ids_i: &[u32],
    rho1: f64,
) -> Result<TripletLoss> {
    triplet_mean(
        tape,
        &[
            (feats_r, ids_r, feats_i, ids_i, false),
            (feats_i, ids_i, feats_r, ids_r, false),
        ],
        rho1,
    )
}

/// Single-modality triplet over both modalities; each list holds the
/// features and identities of one modality.
pub fn sm_triplet(
    tape: &mut Tape,
    per_modality: &[(Var, &[u32])],
    rho2: f64,
) -> Result<TripletLoss> {
    let groups: Vec<_> = per_modality
        .iter()
        .map(|&(f, ids)| (f, ids, f, ids, true))
        .collect();
    triplet_mean(tape, &groups, rho2)
}

/// `L_cmT(T) + L_smT(T)` on transferred features.
pub fn transfer_loss(
    tape: &mut Tape,
    t_r: Var,
    t_i: Var,
    ids_r: &[u32],
    ids_i: &[u32],
    rho1: f64,
    rho2: f64,
) -> Result<(Var, bool)> {
    let cm = cm_triplet(tape, t_r, t_i, ids_r, ids_i, rho1)?;
    let sm = sm_triplet(tape, &[(t_r, ids_r), (t_i, ids_i)], rho2)?;
    Ok((tape.add(cm.value, sm.value)?, cm.warned() || sm.warned()))
}

/// Mean two-class cross-entropy of modality logits (columns `[R, I]`).
pub fn modality_adversarial(tape: &mut Tape, logits: Var, modalities: &[Modality]) -> Result<Var> {
    let labels: Vec<usize> = modalities.iter().map(|m| m.index()).collect();
    tape.softmax_cross_entropy(logits, &labels)
}

/// Mean over samples of `‖x − x̂‖² / D_in`.
pub fn reconstruction_loss(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    let diff = tape.sub(x, x_hat)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Mean over samples of `‖Θ^m P_i − H_i‖`, with the norm floored inside the root.
pub fn projection_loss(tape: &mut Tape, projected: Var, h: Var) -> Result<Var> {
    let diff = tape.sub(projected, h)?;
    let norms = tape.row_norm(diff);
    Ok(tape.mean(norms))
}

/// Raw component values of one forward pass; absent streams give zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub lc_h: f64,
    pub lc_p_r: f64,
    pub lc_p_i: f64,
    pub lc_t: f64,
    pub cm_h: f64,
    pub sm_p: f64,
    pub l_t: f64,
    pub ma: f64,
    pub pa: f64,
    pub re: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "Lc_H")]
    pub lc_h: f64,
    #[serde(rename = "Lc_P")]
    pub lc_p: f64,
    #[serde(rename = "Lc_T")]
    pub lc_t: f64,
    #[serde(rename = "L_cmT_H")]
    pub cm_h: f64,
    #[serde(rename = "L_smT_P")]
    pub sm_p: f64,
    #[serde(rename = "L_t_T")]
    pub l_t: f64,
    #[serde(rename = "L_ma")]
    pub ma: f64,
    #[serde(rename = "L_pa")]
    pub pa: f64,
    #[serde(rename = "L_re")]
    pub re: f64,
    #[serde(rename = "L_feat")]
    pub feat: f64,
    #[serde(rename = "L_min")]
    pub min: f64,
    #[serde(rename = "L_max")]
    pub max: f64,
}

impl LossReport {
    /// Name of the first non-finite entry, in report order.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("Lc_H", self.lc_h),
            ("Lc_P", self.lc_p),
            ("Lc_T", self.lc_t),
            ("L_cmT_H", self.cm_h),
            ("L_smT_P", self.sm_p),
            ("L_t_T", self.l_t),
            ("L_ma", self.ma),
            ("L_pa", self.pa),
            ("L_re", self.re),
            ("L_feat", self.feat),
            ("L_min", self.min),
            ("L_max", self.max),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Groups components into the per-feature objectives and the min/max pair.
/// Absent terms must already be zero in `c`.
pub fn mix(c: &LossComponents, cfg: &TrainConfig) -> LossReport {
    let lc_p = 0.5 * (c.lc_p_r + c.lc_p_i);
    let l_h = c.lc_h + TRIPLET_WEIGHT_H * c.cm_h;
    let l_p = CLS_WEIGHT_P * (c.lc_p_r + c.lc_p_i) + TRIPLET_WEIGHT_P * c.sm_p;
    let l_t = c.lc_t + TRANSFER_WEIGHT_T * c.l_t;
    let feat = l_h + l_p + l_t;
    let adv = cfg.lambda2 * c.ma + cfg.lambda3 * c.pa;
    LossReport {
        lc_h: c.lc_h,
        lc_p,
        lc_t: c.lc_t,
        cm_h: c.cm_h,
        sm_p: c.sm_p,
        l_t: c.l_t,
        ma: c.ma,
        pa: c.pa,
        re: c.re,
        feat,
        min: feat + cfg.lambda1 * c.re - adv,
        max: -adv,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, Matrix, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// Exhaustive triple loop over anchors in `a` and candidates in `c`.
    fn brute(
        a: &Matrix,
        ya: &[u32],
        c: &Matrix,
        yc: &[u32],
        same: bool,
        margin: f64,
    ) -> (f64, usize) {
        let (mut sum, mut n) = (0.0, 0);
        for i in 0..a.rows() {
            for j in 0..c.rows() {
                for k in 0..c.rows() {
                    if ya[i] == yc[j] && ya[i] != yc[k] && !(same && i == j) {
                        sum +=
                            (margin + dist(a.row(i), c.row(j)) - dist(a.row(i), c.row(k))).max(0.0);
                        n += 1;
                    }
                }
            }
        }
        (sum, n)
    }

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identical_features_cost_the_margin() {
        let mut t = Tape::new();
        let f = t.constant(Matrix::filled(4, 3, 0.7));
        let g = t.constant(Matrix::filled(4, 3, 0.7));
        let ids = [0, 0, 1, 1];
        let cm = cm_triplet(&mut t, f, g, &ids, &ids, 0.3).unwrap();
        assert!((t.scalar(cm.value) - 0.3).abs() < 1e-15);
        let sm = sm_triplet(&mut t, &[(f, &ids), (g, &ids)], 0.25).unwrap();
        assert!((t.scalar(sm.value) - 0.25).abs() < 1e-15);
        let (tl, warned) = transfer_loss(&mut t, f, g, &ids, &ids, 0.3, 0.25).unwrap();
        assert!((t.scalar(tl) - 0.55).abs() < 1e-15);
        assert!(!warned);
    }

    #[test]
    fn satisfied_margins_cost_nothing() {
        let mut t = Tape::new();
        let r = t.constant(Matrix::from_rows(&[[0.0, 0.0], [5.0, 0.0]]));
        let i = t.constant(Matrix::from_rows(&[[0.0, 0.0], [5.0, 0.0]]));
        let cm = cm_triplet(&mut t, r, i, &[3, 9], &[3, 9], 0.3).unwrap();
        assert_eq!(t.scalar(cm.value), 0.0);
        assert_eq!(cm.valid, 4);
    }

    #[test]
    fn single_identity_has_no_triplet() {
        let mut t = Tape::new();
        let f = t.constant(Matrix::filled(3, 2, 1.0));
        let sm = sm_triplet(&mut t, &[(f, &[4, 4, 4])], 0.3).unwrap();
        assert!(sm.warned());
        assert_eq!(t.scalar(sm.value), 0.0);
    }

    #[test]
    fn triplets_match_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..10 {
            let (r, i) = (random(&mut rng, 4, 3), random(&mut rng, 4, 3));
            let ids = if trial % 2 == 0 {
                [0, 0, 1, 1]
            } else {
                [7, 2, 2, 7]
            };
            let mut t = Tape::new();
            let (rv, iv) = (t.constant(r.clone()), t.constant(i.clone()));
            let cm = cm_triplet(&mut t, rv, iv, &ids, &ids, 0.3).unwrap();
            let (s1, n1) = brute(&r, &ids, &i, &ids, false, 0.3);
            let (s2, n2) = brute(&i, &ids, &r, &ids, false, 0.3);
            assert_eq!(cm.valid, n1 + n2);
            assert!((t.scalar(cm.value) - (s1 + s2) / (n1 + n2) as f64).abs() < 1e-12);

            let sm = sm_triplet(&mut t, &[(rv, &ids), (iv, &ids)], 0.2).unwrap();
            let (s1, n1) = brute(&r, &ids, &r, &ids, true, 0.2);
            let (s2, n2) = brute(&i, &ids, &i, &ids, true, 0.2);
            assert!((t.scalar(sm.value) - (s1 + s2) / (n1 + n2) as f64).abs() < 1e-12);

            let (tl, _) = transfer_loss(&mut t, rv, iv, &ids, &ids, 0.3, 0.2).unwrap();
            assert_eq!(t.scalar(tl), t.scalar(cm.value) + t.scalar(sm.value));
        }
    }

    #[test]
    fn relabeling_identities_does_not_change_triplets() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (r, i) = (random(&mut rng, 6, 2), random(&mut rng, 6, 2));
        let mut t = Tape::new();
        let (rv, iv) = (t.constant(r), t.constant(i));
        let a = cm_triplet(
            &mut t,
            rv,
            iv,
            &[0, 0, 1, 1, 2, 2],
            &[0, 1, 2, 0, 1, 2],
            0.3,
        )
        .unwrap();
        let b = cm_triplet(
            &mut t,
            rv,
            iv,
            &[9, 9, 4, 4, 5, 5],
            &[9, 4, 5, 9, 4, 5],
            0.3,
        )
        .unwrap();
        assert_eq!(t.scalar(a.value), t.scalar(b.value));
    }

    #[test]
    fn modality_cross_entropy_values() {
        let mut t = Tape::new();
        let tags = [Modality::R, Modality::I, Modality::I];
        let uniform = t.constant(Matrix::filled(3, 2, 0.4));
        let l = modality_adversarial(&mut t, uniform, &tags).unwrap();
        assert!((t.scalar(l) - 2f64.ln()).abs() < 1e-15);
        let sharp = t.constant(Matrix::from_rows(&[
            [50.0, -50.0],
            [-50.0, 50.0],
            [-50.0, 50.0],
        ]));
        let l = modality_adversarial(&mut t, sharp, &tags).unwrap();
        assert!(t.scalar(l) < 1e-40);

        let raw = Matrix::from_rows(&[[0.3, -1.1], [2.0, 0.5], [-0.7, -0.2]]);
        let logits = t.constant(raw.clone());
        let l = modality_adversarial(&mut t, logits, &tags).unwrap();
        let expected: f64 = (0..3)
            .map(|i| {
                let row = raw.row(i);
                let y = tags[i].index();
                -(row[y].exp() / (row[0].exp() + row[1].exp())).ln()
            })
            .sum::<f64>()
            / 3.0;
        assert!((t.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_values_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&mut rng, 3, 5);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let same = reconstruction_loss(&mut t, xv, xv).unwrap();
        assert_eq!(t.scalar(same), 0.0);
        let zero = t.constant(Matrix::zeros(3, 5));
        let l = reconstruction_loss(&mut t, xv, zero).unwrap();
        let expected = (0..3)
            .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / 3.0
            / 5.0;
        assert!((t.scalar(l) - expected).abs() < 1e-15);
        let bad = t.constant(Matrix::zeros(3, 4));
        assert!(matches!(
            reconstruction_loss(&mut t, xv, bad),
            Err(SsftError::Shape { .. })
        ));

        let mut store = ParamStore::new();
        let id = store.insert("x_hat", random(&mut rng, 3, 5));
        let report = grad_check(&mut store, &[id], 1e-4, |t, s| {
            let xv = t.constant(x.clone());
            let xh = t.param(s, id);
            reconstruction_loss(t, xv, xh)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn projection_loss_values_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let h = random(&mut rng, 4, 3);
        let mut t = Tape::new();
        let hv = t.constant(h.clone());
        let zero = t.constant(Matrix::zeros(4, 3));
        let l = projection_loss(&mut t, zero, hv).unwrap();
        let mean_norm = (0..4).map(|i| dist(h.row(i), &[0.0; 3])).sum::<f64>() / 4.0;
        assert!((t.scalar(l) - mean_norm).abs() < 1e-12);
        let l = projection_loss(&mut t, hv, hv).unwrap();
        assert!(t.scalar(l) <= 1e-6);

        let mut store = ParamStore::new();
        let theta = store.insert("theta", random(&mut rng, 3, 2));
        let p = store.insert("p", random(&mut rng, 4, 2));
        let report = grad_check(&mut store, &[theta, p], 1e-4, |t, s| {
            let (th, pv) = (t.param(s, theta), t.param(s, p));
            let tt = t.transpose(th);
            let proj = t.matmul(pv, tt)?;
            let hv = t.constant(h.clone());
            projection_loss(t, proj, hv)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = ParamStore::new();
        let r = store.insert("r", random(&mut rng, 4, 3));
        let i = store.insert("i", random(&mut rng, 4, 3));
        let ids = [0, 1, 0, 1];
        let report = grad_check(&mut store, &[r, i], 1e-4, |t, s| {
            let (rv, iv) = (t.param(s, r), t.param(s, i));
            let (l, _) = transfer_loss(t, rv, iv, &ids, &ids, 0.9, 0.9)?;
            Ok(l)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    fn components(rng: &mut ChaCha8Rng) -> LossComponents {
        let mut v = || rng.random_range(0.0..3.0);
        LossComponents {
            lc_h: v(),
            lc_p_r: v(),
            lc_p_i: v(),
            lc_t: v(),
            cm_h: v(),
            sm_p: v(),
            l_t: v(),
            ma: v(),
            pa: v(),
            re: v(),
        }
    }

    #[test]
    fn mixing_weights() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.lambda1, cfg.lambda2, cfg.lambda3), (1.0, 0.2, 0.2));
        assert_eq!(
            (
                TRIPLET_WEIGHT_H,
                CLS_WEIGHT_P,
                TRIPLET_WEIGHT_P,
                TRANSFER_WEIGHT_T
            ),
            (0.5, 0.5, 0.5, 0.25)
        );
        let c = LossComponents {
            lc_h: 1.0,
            lc_p_r: 2.0,
            lc_p_i: 4.0,
            lc_t: 8.0,
            cm_h: 16.0,
            sm_p: 32.0,
            l_t: 64.0,
            ma: 5.0,
            pa: 10.0,
            re: 3.0,
        };
        let r = mix(&c, &cfg);
        assert_eq!(r.feat, (1.0 + 8.0) + (3.0 + 16.0) + (8.0 + 16.0));
        assert_eq!(r.lc_p, 3.0);
        assert!((r.min - (r.feat + 3.0 - 1.0 - 2.0)).abs() < 1e-12);
        assert!((r.max + 3.0).abs() < 1e-12);

        let no_adv = TrainConfig {
            lambda2: 0.0,
            lambda3: 0.0,
            ..cfg
        };
        let r = mix(&c, &no_adv);
        assert_eq!(r.min, r.feat + 3.0);
        assert_eq!(r.max, 0.0);
    }

    #[test]
    fn mixing_recomposes_feature_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let cfg = TrainConfig::default();
        for _ in 0..100 {
            let r = mix(&components(&mut rng), &cfg);
            let back = r.min + (cfg.lambda2 * r.ma + cfg.lambda3 * r.pa) - cfg.lambda1 * r.re;
            assert!((back - r.feat).abs() < 1e-12);
        }
    }

    #[test]
    fn ablation_zeroes_weights() {
        let ab = Ablation {
            moa: false,
            re: false,
            ..Ablation::FULL
        };
        let c = TrainConfig::default().with_ablation(&ab);
        assert_eq!((c.lambda1, c.lambda2, c.lambda3), (0.0, 0.0, 0.2));
        let mut bad = TrainConfig::default();
        bad.rho1 = -1.0;
        bad.k = 0;
        assert_eq!(bad.violations().len(), 2);
    }

    #[test]
    fn report_json_names() {
        let json = serde_json::to_value(LossReport::default()).unwrap();
        for key in [
            "Lc_H", "Lc_P", "Lc_T", "L_cmT_H", "L_smT_P", "L_t_T", "L_ma", "L_pa", "L_re",
            "L_feat", "L_min", "L_max",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let r = LossReport {
            pa: f64::NAN,
            min: f64::NAN,
            ..Default::default()
        };
        assert_eq!(r.first_non_finite(), Some("L_pa"));
    }
}
