//! Cross-modality retrieval: transfer over query and gallery, L2-normalized
//! Euclidean ranking, CMC and mAP, and the auxiliary-set sweep.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::datagen::{Modality, SampleSet};
use crate::diffcore::{Matrix, ParamStore};
use crate::error::{Result, SsftError};
use crate::extractor::FeatureBundle;
use crate::network::{embed, Network};
use crate::sstn::{self, build_affinity_with, intra_block, BlockRows, SingleQueryAffinity};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// RGB queries against an IR gallery.
    #[serde(rename = "r2i")]
    R2I,
    #[serde(rename = "i2r")]
    I2R,
}

impl Direction {
    pub fn query_modality(self) -> Modality {
        match self {
            Direction::R2I => Modality::R,
            Direction::I2R => Modality::I,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "r2i" => Ok(Direction::R2I),
            "i2r" => Ok(Direction::I2R),
            _ => Err(SsftError::config(format!(
                "unknown direction '{s}' (use r2i or i2r)"
            ))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::R2I => "r2i",
            Direction::I2R => "i2r",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    AllQueries,
    SingleQuery,
}

/// Auxiliary-set size: a count, or every query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxSize {
    Count(usize),
    All,
}

impl Serialize for AuxSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AuxSize::Count(n) => s.serialize_u64(*n as u64),
            AuxSize::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for AuxSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) if s == "all" => Ok(AuxSize::All),
            serde_json::Value::Number(n) if n.is_u64() => {
                Ok(AuxSize::Count(n.as_u64().unwrap_or(0) as usize))
            }
            other => Err(serde::de::Error::custom(format!("bad aux_size {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub mode: Mode,
    pub direction: Direction,
    pub map: f64,
    /// `cmc[r − 1]` is the rank-r accuracy.
    pub cmc: Vec<f64>,
    pub aux_size: AuxSize,
    pub k: usize,
    pub n_query: usize,
    pub n_gallery: usize,
}

impl RetrievalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn cmc_csv(&self) -> String {
        let mut out = String::from("rank,accuracy\n");
        for (r, acc) in self.cmc.iter().enumerate() {
            out.push_str(&format!("{},{}\n", r + 1, acc));
        }
        out
    }
}

/// Outcome of ranking one query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryScore {
    /// 1-based rank of the first relevant item; `None` when nothing is relevant.
    pub first_hit: Option<usize>,
    pub ap: f64,
}

/// Interpolation-free average precision and first hit of a relevance list
/// given in rank order.
pub fn score_ranking(relevant: &[bool]) -> QueryScore {
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut first_hit = None;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
            first_hit.get_or_insert(i + 1);
        }
    }
    QueryScore {
        first_hit,
        ap: if hits == 0 { 0.0 } else { sum / hits as f64 },
    }
}

/// CMC over `gallery_len` ranks and mAP over the queries that have at least
/// one relevant item, summed in slice order.
pub fn aggregate(scores: &[QueryScore], gallery_len: usize) -> (Vec<f64>, f64) {
    let scored: Vec<&QueryScore> = scores.iter().filter(|s| s.first_hit.is_some()).collect();
    if scored.is_empty() {
        return (vec![0.0; gallery_len], 0.0);
    }
    let n = scored.len() as f64;
    let mut hist = vec![0usize; gallery_len + 1];
    for s in &scored {
        hist[s.first_hit.expect("scored")] += 1;
    }
    let mut cmc = Vec::with_capacity(gallery_len);
    let mut acc = 0usize;
    for h in &hist[1..] {
        acc += h;
        cmc.push(acc as f64 / n);
    }
    let map = scored.iter().map(|s| s.ap).sum::<f64>() / n;
    (cmc, map)
}

/// Gallery positions by ascending distance between L2-normalized rows, ties
/// broken by gallery sample id.
pub fn rank_gallery(query: &[f64], gallery: &Matrix, gallery_sample_ids: &[u64]) -> Vec<usize> {
    let q = sstn::unit(query);
    let d: Vec<f64> = (0..gallery.rows())
        .map(|j| {
            let g = sstn::unit(gallery.row(j));
            q.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    order.sort_by(|&a, &b| {
        d[a].total_cmp(&d[b])
            .then(gallery_sample_ids[a].cmp(&gallery_sample_ids[b]))
    });
    order
}

fn score_query(
    query: &[f64],
    identity: u32,
    gallery: &Matrix,
    ids: &[u32],
    sample_ids: &[u64],
) -> QueryScore {
    let order = rank_gallery(query, gallery, sample_ids);
    let relevant: Vec<bool> = order.iter().map(|&j| ids[j] == identity).collect();
    score_ranking(&relevant)
}

/// A trained model bound to one test split and query direction. Features of
/// both sides are extracted once.
pub struct Evaluator<'a> {
    net: &'a Network,
    store: &'a ParamStore,
    pub direction: Direction,
    pub k: usize,
    pub query: FeatureBundle,
    pub gallery: FeatureBundle,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        net: &'a Network,
        store: &'a ParamStore,
        test: &SampleSet,
        direction: Direction,
        k: usize,
    ) -> Result<Self> {
        let side = |m: Modality| -> Result<FeatureBundle> {
            let idx = test.modality_indices(m);
            let sample_ids = idx.iter().map(|&i| test.records()[i].sample_id).collect();
            embed(
                store,
                net,
                &test.features(&idx),
                m,
                test.labels(&idx),
                sample_ids,
            )
        };
        let qm = direction.query_modality();
        Self::from_bundles(net, store, side(qm)?, side(qm.other())?, direction, k)
    }

    pub fn from_bundles(
        net: &'a Network,
        store: &'a ParamStore,
        query: FeatureBundle,
        gallery: FeatureBundle,
        direction: Direction,
        k: usize,
    ) -> Result<Self> {
        if query.modality == gallery.modality {
            return Err(SsftError::config(
                "query and gallery must come from different modalities",
            ));
        }
        if query.is_empty() || gallery.is_empty() {
            return Err(SsftError::config(
                "query and gallery must both be non-empty",
            ));
        }
        if k == 0 {
            return Err(SsftError::config("top-k needs k >= 1"));
        }
        Ok(Evaluator {
            net,
            store,
            direction,
            k,
            query,
            gallery,
        })
    }

    fn transfers(&self) -> bool {
        self.net.sstn.is_some()
    }

    /// Transferred features of the listed queries and the whole gallery over
    /// one standard graph.
    fn transfer_group(
        &self,
        queries: &[usize],
        gallery_intra: &BlockRows,
    ) -> Result<(Matrix, Matrix)> {
        let q = self.query.select(queries);
        let q_intra = intra_block(&q, self.k)?;
        let (rgb, ir, rgb_intra, ir_intra) = match self.query.modality {
            Modality::R => (&q, &self.gallery, &q_intra, gallery_intra),
            Modality::I => (&self.gallery, &q, gallery_intra, &q_intra),
        };
        let aff = build_affinity_with(rgb, ir, self.k, Some(rgb_intra), Some(ir_intra))?;
        let (t_rgb, t_ir) = crate::network::transfer(self.store, self.net, rgb, ir, &aff)?;
        Ok(match self.query.modality {
            Modality::R => (t_rgb, t_ir),
            Modality::I => (t_ir, t_rgb),
        })
    }

    fn scores_for(&self, queries: &[usize], q_feats: &Matrix, g_feats: &Matrix) -> Vec<QueryScore> {
        queries
            .iter()
            .enumerate()
            .map(|(row, &qi)| {
                score_query(
                    q_feats.row(row),
                    self.query.identities[qi],
                    g_feats,
                    &self.gallery.identities,
                    &self.gallery.sample_ids,
                )
            })
            .collect()
    }

    fn report(&self, mode: Mode, aux_size: AuxSize, scores: &[QueryScore]) -> RetrievalReport {
        let (cmc, map) = aggregate(scores, self.gallery.len());
        RetrievalReport {
            mode,
            direction: self.direction,
            map,
            cmc,
            aux_size,
            k: self.k,
            n_query: self.query.len(),
            n_gallery: self.gallery.len(),
        }
    }

    /// Per-query scores with each group of query positions sharing one graph.
    fn grouped_scores(
        &self,
        groups: &[Vec<usize>],
        scored: &[Vec<bool>],
    ) -> Result<Vec<QueryScore>> {
        let mut out: Vec<Option<QueryScore>> = vec![None; self.query.len()];
        if !self.transfers() {
            let all: Vec<usize> = (0..self.query.len()).collect();
            for (qi, s) in all
                .iter()
                .zip(self.scores_for(&all, &self.query.h, &self.gallery.h))
            {
                out[*qi] = Some(s);
            }
        } else {
            let gallery_intra = intra_block(&self.gallery, self.k)?;
            for (group, keep) in groups.iter().zip(scored) {
                let (tq, tg) = self.transfer_group(group, &gallery_intra)?;
                for ((row, &qi), s) in group
                    .iter()
                    .enumerate()
                    .zip(self.scores_for(group, &tq, &tg))
                {
                    if keep[row] {
                        out[qi] = Some(s);
                    }
                }
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| SsftError::config(format!("query {i} was never scored"))))
            .collect()
    }

    /// One graph over every query and the gallery. Models without a transfer
    /// network rank on shared features.
    pub fn all_queries(&self) -> Result<RetrievalReport> {
        let all: Vec<usize> = (0..self.query.len()).collect();
        let scores = self.grouped_scores(std::slice::from_ref(&all), &[vec![true; all.len()]])?;
        Ok(self.report(Mode::AllQueries, AuxSize::All, &scores))
    }

    /// Per-query rankings; each query only sees the gallery.
    pub fn single_query_scores(&self) -> Result<Vec<QueryScore>> {
        let Some(w) = self.net.sstn_weights(self.store) else {
            let all: Vec<usize> = (0..self.query.len()).collect();
            return Ok(self.scores_for(&all, &self.query.h, &self.gallery.h));
        };
        let seg = self.net.arch.segments();
        let sq = SingleQueryAffinity::new(&self.gallery, self.k)?;
        let zw_gallery = sstn::fuse(&sstn::pad(&[&self.gallery], seg)?.z, &w)?;
        let mut scores = Vec::with_capacity(self.query.len());
        for qi in 0..self.query.len() {
            let q = self.query.select(&[qi]);
            let aff = sq.for_query(&q, &self.gallery)?;
            let zw_q = sstn::fuse(&sstn::pad(&[&q], seg)?.z, &w)?;
            let zw = Matrix::concat_rows(&[&zw_q, &zw_gallery])?;
            let t = sstn::propagate_fused(&zw, &aff.normalized()?, &w)?;
            let idx_g: Vec<usize> = (1..t.rows()).collect();
            let tg = t.select_rows(&idx_g);
            scores.push(score_query(
                t.row(0),
                q.identities[0],
                &tg,
                &self.gallery.identities,
                &self.gallery.sample_ids,
            ));
        }
        Ok(scores)
    }

    pub fn single_query(&self) -> Result<RetrievalReport> {
        let scores = self.single_query_scores()?;
        Ok(self.report(Mode::SingleQuery, AuxSize::Count(0), &scores))
    }

    /// Every query evaluated inside a graph holding `n` queries in total:
    /// each trial shuffles the queries into groups of `n`, the last group
    /// topped up with already-scored queries that serve only as auxiliaries.
    pub fn aux_size(&self, n: usize, trials: usize, seed: u64) -> Result<RetrievalReport> {
        let nq = self.query.len();
        if !(1..=nq).contains(&n) {
            return Err(SsftError::config(format!(
                "auxiliary size {n} outside 1..={nq}"
            )));
        }
        if trials == 0 {
            return Err(SsftError::config("trials must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = 0.0;
        let mut cmc = vec![0.0; self.gallery.len()];
        for _ in 0..trials {
            let mut perm: Vec<usize> = (0..nq).collect();
            perm.shuffle(&mut rng);
            let mut groups = Vec::new();
            let mut scored = Vec::new();
            for chunk in perm.chunks(n) {
                let mut group = chunk.to_vec();
                let mut keep = vec![true; group.len()];
                for &extra in perm
                    .iter()
                    .filter(|q| !chunk.contains(q))
                    .take(n - chunk.len())
                {
                    group.push(extra);
                    keep.push(false);
                }
                let mut paired: Vec<(usize, bool)> = group.into_iter().zip(keep).collect();
                paired.sort_unstable();
                let (g, k): (Vec<usize>, Vec<bool>) = paired.into_iter().unzip();
                groups.push(g);
                scored.push(k);
            }
            let scores = self.grouped_scores(&groups, &scored)?;
            let (c, m) = aggregate(&scores, self.gallery.len());
            map += m;
            for (a, b) in cmc.iter_mut().zip(c) {
                *a += b;
            }
        }
        let t = trials as f64;
        Ok(RetrievalReport {
            mode: Mode::AllQueries,
            direction: self.direction,
            map: map / t,
            cmc: cmc.into_iter().map(|c| c / t).collect(),
            aux_size: if n == nq {
                AuxSize::All
            } else {
                AuxSize::Count(n)
            },
            k: self.k,
            n_query: nq,
            n_gallery: self.gallery.len(),
        })
    }

    /// Sweep over auxiliary sizes, ascending, one report per size.
    pub fn aux_sweep(
        &self,
        sizes: &[usize],
        trials: usize,
        seed: u64,
    ) -> Result<Vec<(usize, RetrievalReport)>> {
        let mut sizes = sizes.to_vec();
        sizes.sort_unstable();
        sizes.dedup();
        sizes
            .into_iter()
            .map(|n| Ok((n, self.aux_size(n, trials, seed)?)))
            .collect()
    }
}
