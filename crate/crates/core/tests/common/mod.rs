//! Brute-force reference implementations shared by the integration tests and
//! the acceptance suite. They recompute every quantity from its definition
//! with plain loops and full sorts, independent of the library code paths.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ssft::datagen::Modality;
use ssft::diffcore::Matrix;
use ssft::extractor::FeatureBundle;

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn bundle(
    rng: &mut ChaCha8Rng,
    n: usize,
    d_h: usize,
    d_p: usize,
    modality: Modality,
) -> FeatureBundle {
    let offset = if modality == Modality::R { 0 } else { 1000 };
    FeatureBundle::new(
        gaussian(rng, n, d_h),
        gaussian(rng, n, d_p),
        modality,
        (0..n as u32).map(|i| i % 3).collect(),
        (0..n as u64).map(|i| i + offset).collect(),
    )
    .unwrap()
}

/// `1 − ½‖a/‖a‖ − b/‖b‖‖`.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mut sq = 0.0;
    for t in 0..a.len() {
        let d = a[t] / na - b[t] / nb;
        sq += d * d;
    }
    1.0 - 0.5 * sq.sqrt()
}

/// One block with every row fully sorted (value descending, column ascending)
/// and only its first `k` entries kept.
pub fn brute_block(a: &Matrix, b: &Matrix, k: usize) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let mut cand: Vec<(f64, usize)> = (0..b.rows())
            .map(|j| (distance(a.row(i), b.row(j)), j))
            .collect();
        cand.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        for &(v, j) in cand.iter().take(k) {
            out.set(i, j, v);
        }
    }
    out
}

/// [`brute_block`] of a set against itself, where each row sorts its own
/// column ahead of every other column of equal value.
pub fn brute_self_block(a: &Matrix, k: usize) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.rows());
    for i in 0..a.rows() {
        let mut cand: Vec<(f64, bool, usize)> = (0..a.rows())
            .map(|j| (distance(a.row(i), a.row(j)), j != i, j))
            .collect();
        cand.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap()
                .then(x.1.cmp(&y.1))
                .then(x.2.cmp(&y.2))
        });
        for &(v, _, j) in cand.iter().take(k) {
            out.set(i, j, v);
        }
    }
    out
}

/// Dense affinity over `[rgb; ir]`: specific features within a modality
/// (shared ones when there are none), shared features across.
pub fn brute_affinity(rgb: &FeatureBundle, ir: &FeatureBundle, k: usize) -> Matrix {
    let intra = |b: &FeatureBundle| {
        if b.p.cols() > 0 {
            b.p.clone()
        } else {
            b.h.clone()
        }
    };
    let (nr, ni) = (rgb.len(), ir.len());
    let blocks = [
        (0, 0, brute_self_block(&intra(rgb), k)),
        (0, nr, brute_block(&rgb.h, &ir.h, k)),
        (nr, 0, brute_block(&ir.h, &rgb.h, k)),
        (nr, nr, brute_self_block(&intra(ir), k)),
    ];
    let mut a = Matrix::zeros(nr + ni, nr + ni);
    for (r0, c0, blk) in blocks {
        for i in 0..blk.rows() {
            for j in 0..blk.cols() {
                a.set(r0 + i, c0 + j, blk.get(i, j));
            }
        }
    }
    a
}

/// Per-node transfer: `T_i = relu(relu(Σ_j A_ij/√(d_i d_j)·(Z_j W))·W_t + b_t)`.
pub fn brute_propagate(
    z: &Matrix,
    a: &Matrix,
    w: &Matrix,
    head_w: &Matrix,
    head_b: &Matrix,
) -> Matrix {
    let n = z.rows();
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a.get(i, j)).sum()).collect();
    let mut out = Matrix::zeros(n, head_w.cols());
    for i in 0..n {
        let mut agg = vec![0.0; z.cols()];
        for j in 0..n {
            let c = a.get(i, j) / (deg[i] * deg[j]).sqrt();
            if c == 0.0 {
                continue;
            }
            for t in 0..z.cols() {
                agg[t] += c * z.get(j, t);
            }
        }
        let mut fused = vec![0.0; w.cols()];
        for (c, f) in fused.iter_mut().enumerate() {
            let s: f64 = (0..z.cols()).map(|t| agg[t] * w.get(t, c)).sum();
            *f = s.max(0.0);
        }
        for o in 0..head_w.cols() {
            let s: f64 = (0..fused.len())
                .map(|t| fused[t] * head_w.get(t, o))
                .sum::<f64>()
                + head_b.get(0, o);
            out.set(i, o, s.max(0.0));
        }
    }
    out
}

/// AP straight from the definition: mean over relevant positions of the
/// precision at that position. `None` when nothing is relevant.
pub fn brute_ap(relevant: &[bool]) -> Option<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut sum = 0.0;
    for (pos, &r) in relevant.iter().enumerate() {
        if r {
            let hits = relevant[..=pos].iter().filter(|&&x| x).count();
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// CMC value at every rank for one query: 1 from the first hit on.
pub fn brute_cmc(relevant: &[bool]) -> Vec<f64> {
    (0..relevant.len())
        .map(|r| {
            if relevant[..=r].iter().any(|&x| x) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Full-sort ranking of a gallery by L2-normalized Euclidean distance, ties
/// by sample id.
pub fn brute_rank(query: &[f64], gallery: &Matrix, sample_ids: &[u64]) -> Vec<usize> {
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let q = unit(query);
    let mut d: Vec<(f64, u64, usize)> = (0..gallery.rows())
        .map(|j| {
            let g = unit(gallery.row(j));
            (
                q.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum(),
                sample_ids[j],
                j,
            )
        })
        .collect();
    d.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
    d.into_iter().map(|e| e.2).collect()
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub struct RankingCase {
    pub name: &'static str,
    /// Relevance per query, in rank order.
    pub queries: Vec<Vec<bool>>,
    pub map: f64,
    pub cmc: Vec<f64>,
}

/// Hand-checkable ranking instances with their expected values worked out
/// by hand as exact fractions.
pub fn ranking_cases() -> Vec<RankingCase> {
    const T: bool = true;
    const F: bool = false;
    vec![
        RankingCase {
            name: "hits at ranks 1 and 3",
            queries: vec![vec![T, F, T, F]],
            map: 5.0 / 6.0,
            cmc: vec![1.0; 4],
        },
        RankingCase {
            name: "single hit on top",
            queries: vec![vec![T, F, F]],
            map: 1.0,
            cmc: vec![1.0; 3],
        },
        RankingCase {
            name: "single hit last",
            queries: vec![vec![F, F, T]],
            map: 1.0 / 3.0,
            cmc: vec![0.0, 0.0, 1.0],
        },
        RankingCase {
            name: "two queries",
            queries: vec![vec![F, T], vec![T, F]],
            map: 0.75,
            cmc: vec![0.5, 1.0],
        },
        RankingCase {
            name: "alternating",
            queries: vec![vec![F, T, F, T]],
            map: 0.5,
            cmc: vec![0.0, 1.0, 1.0, 1.0],
        },
        RankingCase {
            name: "all relevant",
            queries: vec![vec![T, T, T]],
            map: 1.0,
            cmc: vec![1.0; 3],
        },
        RankingCase {
            name: "late pair",
            queries: vec![vec![F, F, F, T, T]],
            map: 0.325,
            cmc: vec![0.0, 0.0, 0.0, 1.0, 1.0],
        },
        RankingCase {
            name: "three queries",
            queries: vec![vec![T, F, F, F], vec![F, F, F, T], vec![F, T, T, F]],
            map: 11.0 / 18.0,
            cmc: vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0],
        },
        RankingCase {
            name: "query without relevant items is skipped",
            queries: vec![vec![F, F, F], vec![F, T, F]],
            map: 0.5,
            cmc: vec![0.0, 1.0, 1.0],
        },
        RankingCase {
            name: "every other",
            queries: vec![vec![F, T, F, T, F, T]],
            map: 0.5,
            cmc: vec![0.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        },
    ]
}

/// mAP and CMC of a case by the exhaustive definitions.
pub fn brute_metrics(queries: &[Vec<bool>]) -> (f64, Vec<f64>) {
    let scored: Vec<&Vec<bool>> = queries.iter().filter(|q| q.iter().any(|&r| r)).collect();
    let n = scored.len() as f64;
    let map = scored.iter().map(|q| brute_ap(q).unwrap()).sum::<f64>() / n;
    let g = queries[0].len();
    let mut cmc = vec![0.0; g];
    for q in &scored {
        for (c, v) in cmc.iter_mut().zip(brute_cmc(q)) {
            *c += v / n;
        }
    }
    (map, cmc)
}

pub mod training {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use ssft::ablation::Ablation;
    use ssft::datagen::{generate, GeneratorConfig, PkSampler, SampleSet};
    use ssft::diffcore::{grad_check, GradCheckReport, Tape};
    use ssft::extractor::ModelConfig;
    use ssft::losses::TrainConfig;
    use ssft::network::{forward, AffinitySource, Architecture, BatchInput, Network};
    use ssft::trainer::{batch_input, ClassMap};

    pub fn small_data(seed: u64, n_train_ids: usize) -> SampleSet {
        generate(&GeneratorConfig {
            seed,
            n_train_ids,
            n_test_ids: 2,
            samples_per_id_per_modality: 4,
            d_id: 4,
            d_spec: 2,
            d_in: 10,
            ..Default::default()
        })
        .unwrap()
        .0
    }

    pub fn small_arch(n_classes: usize, ablation: Ablation) -> Architecture {
        Architecture {
            d_in: 10,
            n_classes,
            model: ModelConfig {
                hidden: 8,
                d_h: 5,
                d_p: 4,
                d_t: 6,
            },
            ablation,
        }
    }

    /// A PK batch of `n_ids × 2 × k` samples.
    pub fn batch(set: &SampleSet, n_ids: usize, k: usize, seed: u64) -> BatchInput {
        let mut sampler = PkSampler::new(set, n_ids, k).unwrap();
        let pk = sampler.next_batch(&mut ChaCha8Rng::seed_from_u64(seed));
        batch_input(set, &pk, &ClassMap::new(set)).unwrap()
    }

    /// Every ReLU input must sit this far from zero at the checked point:
    /// ten finite-difference steps, so no central difference straddles a kink.
    pub const KINK_MARGIN: f64 = 1e-4;

    pub struct ObjectiveCheck {
        pub report: GradCheckReport,
        /// Draws rejected for lying within `KINK_MARGIN` of a kink.
        pub redraws: u64,
    }

    /// Full min-step objective on an 8-sample batch against central
    /// differences, with the affinity frozen at the checked point. Draw `seed`
    /// picks the data, initialization and batch; draws whose ReLU inputs come
    /// too close to zero are replaced by the next one in a fixed sequence.
    pub fn full_objective_gradcheck(seed: u64, tol: f64) -> ObjectiveCheck {
        let arch = small_arch(4, Ablation::FULL);
        let cfg = TrainConfig::default();
        for redraws in 0..100u64 {
            let draw = seed + 1000 * redraws;
            let set = small_data(draw, 4);
            let (net, mut store) = Network::init(arch, draw).unwrap();
            let b = batch(&set, 2, 2, draw);
            assert_eq!(b.x[0].rows() + b.x[1].rows(), 8);
            let mut tape = Tape::new();
            let pass = forward(
                &mut tape,
                &store,
                &net,
                &b,
                &cfg,
                &AffinitySource::Recompute,
            )
            .unwrap();
            if tape.kink_margin() < KINK_MARGIN {
                continue;
            }
            let source = AffinitySource::Fixed(pass.graph.unwrap());
            let ids: Vec<_> = store.ids().collect();
            let report = grad_check(&mut store, &ids, tol, |tape, store| {
                Ok(forward(tape, store, &net, &b, &cfg, &source)?.min)
            })
            .unwrap();
            return ObjectiveCheck { report, redraws };
        }
        panic!("no draw clear of ReLU kinks for seed {seed}");
    }
}
