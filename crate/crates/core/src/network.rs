//! The assembled model: parameter layout for an architecture, the training
//! forward pass with every objective term, and inference-time embedding.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::Ablation;
use crate::datagen::Modality;
use crate::diffcore::{CsrMatrix, Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Result, SsftError};
use crate::extractor::{
    discriminate_modality, extract, extract_bundle, project_specific, reconstruct, uniform_init,
    ClassifierParams, DecoderParams, DiscriminatorParams, ExtractorParams, FeatureBundle, Linear,
    ModelConfig, ProjectorParams,
};
use crate::losses::{
    cm_triplet, mix, modality_adversarial, projection_loss, reconstruction_loss, sm_triplet,
    transfer_loss, LossComponents, LossReport, TrainConfig, CLS_WEIGHT_P, TRANSFER_WEIGHT_T,
    TRIPLET_WEIGHT_H, TRIPLET_WEIGHT_P,
};
use crate::sstn::{self, build_affinity, AffinityModel, TransferSegments};

/// Name prefix of the adversary partition.
pub const ADVERSARY_PREFIX: &str = "adv/";

/// RNG stream used for parameter initialization.
const INIT_STREAM: u64 = 1;

/// Everything that determines the parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub d_in: usize,
    pub n_classes: usize,
    pub model: ModelConfig,
    pub ablation: Ablation,
}

impl Architecture {
    /// Width of the specific features actually produced.
    pub fn d_p(&self) -> usize {
        if self.ablation.spl {
            self.model.d_p
        } else {
            0
        }
    }

    pub fn segments(&self) -> TransferSegments {
        TransferSegments {
            shared: self.ablation.sht,
            specific: self.ablation.spt,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SstnParams {
    pub fusion: ParamId,
    pub head: Linear,
}

/// Parameter handles of every module present in an architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub ext: ExtractorParams,
    pub cls: ClassifierParams,
    pub dec: Option<DecoderParams>,
    pub sstn: Option<SstnParams>,
    pub disc: DiscriminatorParams,
    pub proj: Option<ProjectorParams>,
}

impl Network {
    /// Registers and initializes all parameters from `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Result<(Network, ParamStore)> {
        arch.ablation.validate()?;
        let mut v = arch.model.violations();
        if arch.d_in == 0 {
            v.push("d_in must be >= 1".into());
        }
        if arch.n_classes < 2 {
            v.push("at least two training identities are needed".into());
        }
        if !v.is_empty() {
            return Err(SsftError::Config(v));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let m = &arch.model;
        let ab = &arch.ablation;
        let ext = ExtractorParams::register(&mut store, &mut rng, arch.d_in, m, ab.sas, ab.spl);
        let cls = ClassifierParams::register(
            &mut store,
            &mut rng,
            m,
            arch.n_classes,
            ab.spl,
            ab.transfers(),
        );
        let dec = ab
            .spl
            .then(|| DecoderParams::register(&mut store, &mut rng, arch.d_in, m));
        let sstn = ab.transfers().then(|| {
            let width = 2 * arch.d_p() + m.d_h;
            SstnParams {
                fusion: store.insert(sstn::FUSION, uniform_init(&mut rng, width, width)),
                head: Linear::register(&mut store, &mut rng, "sstn/feat_t", width, m.d_t),
            }
        });
        let disc = DiscriminatorParams::register(&mut store, &mut rng, m);
        let proj = ab
            .spl
            .then(|| ProjectorParams::register(&mut store, &mut rng, m));
        let net = Network {
            arch,
            ext,
            cls,
            dec,
            sstn,
            disc,
            proj,
        };
        Ok((net, store))
    }

    /// Parameters updated by the min step.
    pub fn network_ids(store: &ParamStore) -> Vec<ParamId> {
        store
            .ids()
            .filter(|&id| !store.leaf(id).name.starts_with(ADVERSARY_PREFIX))
            .collect()
    }

    /// Parameters updated by the max step.
    pub fn adversary_ids(store: &ParamStore) -> Vec<ParamId> {
        store
            .ids()
            .filter(|&id| store.leaf(id).name.starts_with(ADVERSARY_PREFIX))
            .collect()
    }

    pub fn sstn_weights<'a>(&self, store: &'a ParamStore) -> Option<sstn::SstnWeights<'a>> {
        self.sstn.as_ref().map(|s| sstn::SstnWeights {
            fusion: store.value(s.fusion),
            head_w: store.value(s.head.w),
            head_b: store.value(s.head.b),
        })
    }
}

/// One PK batch in matrix form. Class labels index the classifier outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInput {
    pub x: [Matrix; 2],
    pub ids: [Vec<u32>; 2],
    pub labels: [Vec<usize>; 2],
    pub sample_ids: [Vec<u64>; 2],
}

/// How the batch graph is obtained.
#[derive(Clone, Debug)]
pub enum AffinitySource {
    /// Built from the current features (training).
    Recompute,
    /// A previously built normalized graph, for finite-difference checks
    /// where the top-k selection must not move.
    Fixed(Arc<CsrMatrix>),
}

pub struct ForwardPass {
    /// Objective of the min step.
    pub min: Var,
    /// Objective the adversaries minimize: `λ₂·L_ma + λ₃·L_pa`.
    pub adv: Var,
    pub components: LossComponents,
    pub report: LossReport,
    /// Normalized batch graph, when the transfer network is present.
    pub graph: Option<Arc<CsrMatrix>>,
    pub triplet_warning: bool,
}

fn weighted(tape: &mut Tape, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let t = if w == 1.0 { v } else { tape.scale(v, w) };
        acc = Some(match acc {
            Some(a) => tape.add(a, t)?,
            None => t,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Matrix::scalar(0.0))))
}

/// Three-segment padding on the tape: `[P | H | 0]` for RGB, `[0 | H | P]` for IR.
fn pad_tape(
    tape: &mut Tape,
    h: Var,
    p: Option<Var>,
    modality: Modality,
    seg: TransferSegments,
) -> Result<Var> {
    let (n, d_h) = tape.value(h).shape();
    let h = if seg.shared {
        h
    } else {
        tape.constant(Matrix::zeros(n, d_h))
    };
    let Some(p) = p else {
        return Ok(h);
    };
    let d_p = tape.value(p).cols();
    let own = if seg.specific {
        p
    } else {
        tape.constant(Matrix::zeros(n, d_p))
    };
    let other = tape.constant(Matrix::zeros(n, d_p));
    match modality {
        Modality::R => tape.concat_columns(&[own, h, other]),
        Modality::I => tape.concat_columns(&[other, h, own]),
    }
}

fn bundle_of(
    tape: &Tape,
    h: Var,
    p: Option<Var>,
    modality: Modality,
    batch: &BatchInput,
) -> Result<FeatureBundle> {
    let h = tape.value(h).clone();
    let p = match p {
        Some(p) => tape.value(p).clone(),
        None => Matrix::zeros(h.rows(), 0),
    };
    FeatureBundle::new(
        h,
        p,
        modality,
        batch.ids[modality.index()].clone(),
        batch.sample_ids[modality.index()].clone(),
    )
}

/// Full training forward: extraction, batch-graph transfer and every loss.
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    net: &Network,
    batch: &BatchInput,
    cfg: &TrainConfig,
    source: &AffinitySource,
) -> Result<ForwardPass> {
    let cfg = cfg.with_ablation(&net.arch.ablation);
    let [ids_r, ids_i] = [&batch.ids[0][..], &batch.ids[1][..]];
    let labels_all: Vec<usize> = batch.labels[0]
        .iter()
        .chain(&batch.labels[1])
        .copied()
        .collect();
    let tags: Vec<Modality> = Modality::BOTH
        .iter()
        .flat_map(|&m| std::iter::repeat_n(m, batch.ids[m.index()].len()))
        .collect();

    let x = Modality::BOTH.map(|m| tape.constant(batch.x[m.index()].clone()));
    let f_r = extract(tape, store, &net.ext, x[0], Modality::R)?;
    let f_i = extract(tape, store, &net.ext, x[1], Modality::I)?;
    let h_all = tape.concat_rows(&[f_r.h, f_i.h])?;

    let mut c = LossComponents::default();
    let mut warning = false;

    let logits_h = net.cls.head_h.forward(tape, store, h_all)?;
    let lc_h = tape.softmax_cross_entropy(logits_h, &labels_all)?;
    let cm_h = cm_triplet(tape, f_r.h, f_i.h, ids_r, ids_i, cfg.rho1)?;
    warning |= cm_h.warned();
    let mut terms = vec![(1.0, lc_h), (TRIPLET_WEIGHT_H, cm_h.value)];

    let mut pa = None;
    let mut re = None;
    if let (Some(p_r), Some(p_i), Some(head_p)) = (f_r.p, f_i.p, net.cls.head_p) {
        let mut lc_p = [None, None];
        for (m, p) in [(0, p_r), (1, p_i)] {
            let logits = head_p.forward(tape, store, p)?;
            lc_p[m] = Some(tape.softmax_cross_entropy(logits, &batch.labels[m])?);
        }
        let [lc_p_r, lc_p_i] = lc_p.map(Option::unwrap);
        let sm = sm_triplet(tape, &[(p_r, ids_r), (p_i, ids_i)], cfg.rho2)?;
        warning |= sm.warned();
        terms.extend([
            (CLS_WEIGHT_P, lc_p_r),
            (CLS_WEIGHT_P, lc_p_i),
            (TRIPLET_WEIGHT_P, sm.value),
        ]);
        c.lc_p_r = tape.scalar(lc_p_r);
        c.lc_p_i = tape.scalar(lc_p_i);
        c.sm_p = tape.scalar(sm.value);

        if let (Some(proj), Some(dec)) = (&net.proj, &net.dec) {
            let (pa_r, pa_i, pa_h) = if cfg.pa_unit_features {
                (
                    tape.l2_normalize_rows(p_r),
                    tape.l2_normalize_rows(p_i),
                    tape.l2_normalize_rows(h_all),
                )
            } else {
                (p_r, p_i, h_all)
            };
            let pr = project_specific(tape, store, proj, pa_r, Modality::R)?;
            let pi = project_specific(tape, store, proj, pa_i, Modality::I)?;
            let projected = tape.concat_rows(&[pr, pi])?;
            pa = Some(projection_loss(tape, projected, pa_h)?);
            let xr = reconstruct(tape, store, dec, p_r, f_r.h, Modality::R)?;
            let xi = reconstruct(tape, store, dec, p_i, f_i.h, Modality::I)?;
            let x_hat = tape.concat_rows(&[xr, xi])?;
            let x_all = tape.concat_rows(&x)?;
            re = Some(reconstruction_loss(tape, x_all, x_hat)?);
        }
    }

    let mut graph = None;
    if let (Some(sp), Some(head_t)) = (&net.sstn, net.cls.head_t) {
        let a_hat = match source {
            AffinitySource::Fixed(a) => a.clone(),
            AffinitySource::Recompute => {
                let rgb = bundle_of(tape, f_r.h, f_r.p, Modality::R, batch)?;
                let ir = bundle_of(tape, f_i.h, f_i.p, Modality::I, batch)?;
                Arc::new(build_affinity(&rgb, &ir, cfg.k)?.normalized()?)
            }
        };
        let seg = net.arch.segments();
        let z_r = pad_tape(tape, f_r.h, f_r.p, Modality::R, seg)?;
        let z_i = pad_tape(tape, f_i.h, f_i.p, Modality::I, seg)?;
        let z = tape.concat_rows(&[z_r, z_i])?;
        let fusion = tape.param(store, sp.fusion);
        let hw = tape.param(store, sp.head.w);
        let hb = tape.param(store, sp.head.b);
        let t = sstn::propagate_tape(tape, z, a_hat.clone(), fusion, hw, hb)?;
        let n_r = ids_r.len();
        let t_r = tape.row_slice(t, 0, n_r)?;
        let t_i = tape.row_slice(t, n_r, ids_i.len())?;
        let logits_t = head_t.forward(tape, store, t)?;
        let lc_t = tape.softmax_cross_entropy(logits_t, &labels_all)?;
        let (l_t, warned) = transfer_loss(tape, t_r, t_i, ids_r, ids_i, cfg.rho1, cfg.rho2)?;
        warning |= warned;
        terms.extend([(1.0, lc_t), (TRANSFER_WEIGHT_T, l_t)]);
        c.lc_t = tape.scalar(lc_t);
        c.l_t = tape.scalar(l_t);
        graph = Some(a_hat);
    }

    let logits_m = discriminate_modality(tape, store, &net.disc, h_all)?;
    let ma = modality_adversarial(tape, logits_m, &tags)?;

    let mut adv_terms = vec![(cfg.lambda2, ma)];
    if let Some(pa) = pa {
        adv_terms.push((cfg.lambda3, pa));
        c.pa = tape.scalar(pa);
    }
    if let Some(re) = re {
        terms.push((cfg.lambda1, re));
        c.re = tape.scalar(re);
    }
    let adv = weighted(tape, &adv_terms)?;
    let feat_and_re = weighted(tape, &terms)?;
    let min = tape.sub(feat_and_re, adv)?;

    c.lc_h = tape.scalar(lc_h);
    c.cm_h = tape.scalar(cm_h.value);
    c.ma = tape.scalar(ma);
    let report = mix(&c, &cfg);
    Ok(ForwardPass {
        min,
        adv,
        components: c,
        report,
        graph,
        triplet_warning: warning,
    })
}

/// Inference-time features of a set of same-modality samples.
pub fn embed(
    store: &ParamStore,
    net: &Network,
    x: &Matrix,
    modality: Modality,
    identities: Vec<u32>,
    sample_ids: Vec<u64>,
) -> Result<FeatureBundle> {
    extract_bundle(store, &net.ext, x, modality, identities, sample_ids)
}

/// Transferred features over a graph whose first `aff.n_first` nodes are
/// `first` and the rest `second`. Returns `T` split the same way.
pub fn transfer(
    store: &ParamStore,
    net: &Network,
    first: &FeatureBundle,
    second: &FeatureBundle,
    aff: &AffinityModel,
) -> Result<(Matrix, Matrix)> {
    let w = net
        .sstn_weights(store)
        .ok_or_else(|| SsftError::config("this architecture has no transfer network"))?;
    let z = sstn::pad(&[first, second], net.arch.segments())?;
    let t = sstn::propagate(&z, aff, &w)?;
    let n = first.len();
    let idx_first: Vec<usize> = (0..n).collect();
    let idx_second: Vec<usize> = (n..t.rows()).collect();
    Ok((t.select_rows(&idx_first), t.select_rows(&idx_second)))
}
