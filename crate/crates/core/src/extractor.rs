//! Two-stream encoder and its auxiliary heads.
//!
//! Every module here is a thin set of parameter handles; forward passes run
//! on a [`Tape`] so the same code serves training and inference.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Modality;
use crate::diffcore::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Result, SsftError};

/// Layer widths shared by all modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub d_h: usize,
    pub d_p: usize,
    pub d_t: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            d_h: 32,
            d_p: 32,
            d_t: 64,
        }
    }
}

impl ModelConfig {
    pub fn violations(&self) -> Vec<String> {
        [
            ("hidden", self.hidden),
            ("d_h", self.d_h),
            ("d_p", self.d_p),
            ("d_t", self.d_t),
        ]
        .into_iter()
        .filter(|&(_, n)| n == 0)
        .map(|(name, _)| format!("model.{name} must be >= 1"))
        .collect()
    }
}

/// Draws `rows × cols` weights from `U(−1/√fan_in, 1/√fan_in)`, `fan_in = rows`.
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

/// `x·W + b` with `W` stored `fan_in × fan_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.insert(format!("{name}/w"), uniform_init(rng, fan_in, fan_out));
        let b = store.insert(format!("{name}/b"), Matrix::zeros(1, fan_out));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    pub fn forward_relu(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.forward(tape, store, x)?;
        Ok(tape.relu(y))
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.value(self.w).rows()
    }
}

/// Shared and specific features of a set of same-modality samples.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub h: Matrix,
    /// Zero columns when the specific stream is disabled.
    pub p: Matrix,
    pub modality: Modality,
    pub identities: Vec<u32>,
    pub sample_ids: Vec<u64>,
}

impl FeatureBundle {
    pub fn new(
        h: Matrix,
        p: Matrix,
        modality: Modality,
        identities: Vec<u32>,
        sample_ids: Vec<u64>,
    ) -> Result<Self> {
        let n = h.rows();
        if p.rows() != n || identities.len() != n || sample_ids.len() != n {
            return Err(SsftError::Shape {
                op: "feature_bundle",
                left: h.shape(),
                right: (p.rows(), identities.len()),
            });
        }
        Ok(FeatureBundle {
            h,
            p,
            modality,
            identities,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> FeatureBundle {
        FeatureBundle {
            h: self.h.select_rows(idx),
            p: self.p.select_rows(idx),
            modality: self.modality,
            identities: idx.iter().map(|&i| self.identities[i]).collect(),
            sample_ids: idx.iter().map(|&i| self.sample_ids[i]).collect(),
        }
    }
}

/// Tape handles of one modality's features.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    pub h: Var,
    pub p: Option<Var>,
}

/// Per-modality stems (or one shared stem), the shared trunk with its head,
/// and optional per-modality specific trunks.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorParams {
    /// Indexed by modality; both entries equal when stems are shared.
    pub stem: [Linear; 2],
    pub shared_fc: Linear,
    pub shared_head: Linear,
    /// `[fc, head]` per modality.
    pub spec: Option<[[Linear; 2]; 2]>,
}

impl ExtractorParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d_in: usize,
        m: &ModelConfig,
        separate_stems: bool,
        specific: bool,
    ) -> Self {
        let stem = if separate_stems {
            // Both stems start from the same draw and diverge during training.
            let r = Linear::register(store, rng, "ext/stem/R", d_in, m.hidden);
            let i = Linear {
                w: store.insert("ext/stem/I/w", store.value(r.w).clone()),
                b: store.insert("ext/stem/I/b", store.value(r.b).clone()),
            };
            [r, i]
        } else {
            let s = Linear::register(store, rng, "ext/stem/S", d_in, m.hidden);
            [s, s]
        };
        let shared_fc = Linear::register(store, rng, "ext/shared/fc", m.hidden, m.hidden);
        let shared_head = Linear::register(store, rng, "ext/shared/head", m.hidden, m.d_h);
        let spec = specific.then(|| {
            Modality::BOTH.map(|mo| {
                let base = format!("ext/spec/{}", mo.tag());
                [
                    Linear::register(store, rng, &format!("{base}/fc"), m.hidden, m.hidden),
                    Linear::register(store, rng, &format!("{base}/head"), m.hidden, m.d_p),
                ]
            })
        });
        ExtractorParams {
            stem,
            shared_fc,
            shared_head,
            spec,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.stem[0].w, self.stem[0].b];
        if self.stem[1] != self.stem[0] {
            ids.extend([self.stem[1].w, self.stem[1].b]);
        }
        for l in [self.shared_fc, self.shared_head] {
            ids.extend([l.w, l.b]);
        }
        for l in self.spec.iter().flatten().flatten() {
            ids.extend([l.w, l.b]);
        }
        ids
    }
}

/// `H = head(relu(fc(stem_m(x))))` and, when present,
/// `P = head_m(relu(fc_m(stem_m(x))))` with `stem_m(x) = relu(x·W + b)`.
pub fn extract(
    tape: &mut Tape,
    store: &ParamStore,
    ext: &ExtractorParams,
    x: Var,
    modality: Modality,
) -> Result<FeatureVars> {
    let d_in = ext.stem[modality.index()].fan_in(store);
    if tape.value(x).cols() != d_in {
        return Err(SsftError::Shape {
            op: "extract",
            left: tape.value(x).shape(),
            right: (d_in, 0),
        });
    }
    let s = ext.stem[modality.index()].forward_relu(tape, store, x)?;
    let t = ext.shared_fc.forward_relu(tape, store, s)?;
    let h = ext.shared_head.forward(tape, store, t)?;
    let p = match &ext.spec {
        Some(spec) => {
            let [fc, head] = spec[modality.index()];
            let t = fc.forward_relu(tape, store, s)?;
            Some(head.forward(tape, store, t)?)
        }
        None => None,
    };
    Ok(FeatureVars { h, p })
}

/// Inference-only extraction of a whole matrix of same-modality samples.
pub fn extract_bundle(
    store: &ParamStore,
    ext: &ExtractorParams,
    x: &Matrix,
    modality: Modality,
    identities: Vec<u32>,
    sample_ids: Vec<u64>,
) -> Result<FeatureBundle> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let f = extract(&mut tape, store, ext, xv, modality)?;
    let h = tape.value(f.h).clone();
    let p = match f.p {
        Some(p) => tape.value(p).clone(),
        None => Matrix::zeros(x.rows(), 0),
    };
    FeatureBundle::new(h, p, modality, identities, sample_ids)
}

/// Identity classifiers on H, P and T.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub head_h: Linear,
    pub head_p: Option<Linear>,
    pub head_t: Option<Linear>,
}

impl ClassifierParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        m: &ModelConfig,
        n_classes: usize,
        specific: bool,
        transfer: bool,
    ) -> Self {
        ClassifierParams {
            head_h: Linear::register(store, rng, "cls/H", m.d_h, n_classes),
            head_p: specific.then(|| Linear::register(store, rng, "cls/P", m.d_p, n_classes)),
            head_t: transfer.then(|| Linear::register(store, rng, "cls/T", m.d_t, n_classes)),
        }
    }
}

/// Per-modality decoders `[P, H] → x̂`: linear+ReLU then linear.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub layers: [[Linear; 2]; 2],
}

impl DecoderParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d_in: usize,
        m: &ModelConfig,
    ) -> Self {
        DecoderParams {
            layers: Modality::BOTH.map(|mo| {
                let base = format!("dec/{}", mo.tag());
                [
                    Linear::register(store, rng, &format!("{base}/fc"), m.d_p + m.d_h, m.hidden),
                    Linear::register(store, rng, &format!("{base}/out"), m.hidden, d_in),
                ]
            }),
        }
    }
}

/// Reconstruction from the concatenation `[P, H]`.
pub fn reconstruct(
    tape: &mut Tape,
    store: &ParamStore,
    dec: &DecoderParams,
    p: Var,
    h: Var,
    modality: Modality,
) -> Result<Var> {
    let [fc, out] = dec.layers[modality.index()];
    let ph = tape.concat_columns(&[p, h])?;
    if tape.value(ph).cols() != fc.fan_in(store) {
        return Err(SsftError::Shape {
            op: "reconstruct",
            left: tape.value(ph).shape(),
            right: store.value(fc.w).shape(),
        });
    }
    let z = fc.forward_relu(tape, store, ph)?;
    out.forward(tape, store, z)
}

/// Three-layer modality classifier on shared features.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub layers: [Linear; 3],
}

impl DiscriminatorParams {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, m: &ModelConfig) -> Self {
        DiscriminatorParams {
            layers: [
                Linear::register(store, rng, "adv/disc/fc1", m.d_h, m.hidden),
                Linear::register(store, rng, "adv/disc/fc2", m.hidden, m.hidden),
                Linear::register(store, rng, "adv/disc/out", m.hidden, 2),
            ],
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

/// Two-class modality logits, column order `[R, I]`.
pub fn discriminate_modality(
    tape: &mut Tape,
    store: &ParamStore,
    d: &DiscriminatorParams,
    h: Var,
) -> Result<Var> {
    let x = d.layers[0].forward_relu(tape, store, h)?;
    let x = d.layers[1].forward_relu(tape, store, x)?;
    d.layers[2].forward(tape, store, x)
}

/// Per-modality projections `Θ^m`, stored `d_h × d_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorParams {
    pub theta: [ParamId; 2],
}

impl ProjectorParams {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, m: &ModelConfig) -> Self {
        ProjectorParams {
            theta: Modality::BOTH.map(|mo| {
                store.insert(
                    format!("adv/proj/{}", mo.tag()),
                    uniform_init(rng, m.d_h, m.d_p),
                )
            }),
        }
    }
}

/// Rows `Θ^m · P_i`, i.e. `P · (Θ^m)ᵀ`.
pub fn project_specific(
    tape: &mut Tape,
    store: &ParamStore,
    proj: &ProjectorParams,
    p: Var,
    modality: Modality,
) -> Result<Var> {
    let theta = tape.param(store, proj.theta[modality.index()]);
    let theta_t = tape.transpose(theta);
    tape.matmul(p, theta_t)
}
