//! Shared-specific transfer: three-segment padding, block affinity with
//! per-row top-k, and symmetric-normalized propagation followed by a fusion
//! layer and the transfer head.

use std::sync::Arc;

use serde::Serialize;

use crate::datagen::Modality;
use crate::diffcore::{CsrMatrix, Matrix, ParamStore, Tape, Var};
use crate::error::{Result, SsftError};
use crate::extractor::FeatureBundle;

/// Norm floor for `normalized_distance`.
pub const DIST_EPS: f64 = 1e-12;

pub fn unit(a: &[f64]) -> Vec<f64> {
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(DIST_EPS);
    a.iter().map(|v| v / norm).collect()
}

fn unit_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let u = unit(m.row(i));
        out.row_mut(i).copy_from_slice(&u);
    }
    out
}

#[inline]
fn distance_of_units(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    1.0 - 0.5 * sq.sqrt()
}

/// `1 − ½‖a/‖a‖ − b/‖b‖‖`, in `[0, 1]`; 1 for parallel, 0 for antipodal.
pub fn normalized_distance(a: &[f64], b: &[f64]) -> f64 {
    distance_of_units(&unit(a), &unit(b))
}

/// Dense block of `normalized_distance` between the rows of two matrices.
pub fn similarity_block(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(SsftError::Shape {
            op: "similarity_block",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (ua, ub) = (unit_rows(a), unit_rows(b));
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        distance_of_units(ua.row(i), ub.row(j))
    }))
}

/// Column indices of the `k` largest entries, ties to the lower index,
/// returned in ascending column order.
fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    if k >= row.len() {
        return (0..row.len()).collect();
    }
    // Kept sorted best-first; a later column only displaces on strictly greater.
    let mut best: Vec<usize> = Vec::with_capacity(k + 1);
    for (j, &v) in row.iter().enumerate() {
        if best.len() == k && v <= row[best[k - 1]] {
            continue;
        }
        let pos = best.iter().position(|&b| v > row[b]).unwrap_or(best.len());
        best.insert(pos, j);
        best.truncate(k);
    }
    best.sort_unstable();
    best
}

/// Per row, keeps the `k` largest entries and zeroes the rest.
pub fn topk_rows(m: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 {
        return Err(SsftError::config("top-k needs k >= 1"));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        for j in topk_indices(m.row(i), k) {
            out.set(i, j, m.get(i, j));
        }
    }
    Ok(out)
}

/// Sparse rows of `T(block, k)`, columns local to the block.
pub type BlockRows = Vec<Vec<(usize, f64)>>;

pub fn topk_block(block: &Matrix, k: usize) -> Result<BlockRows> {
    if k == 0 {
        return Err(SsftError::config("top-k needs k >= 1"));
    }
    Ok((0..block.rows())
        .map(|i| {
            let row = block.row(i);
            topk_indices(row, k)
                .into_iter()
                .map(|j| (j, row[j]))
                .collect()
        })
        .collect())
}

/// Block of every entry, scaled (the amplified, unsparsified single-query column).
fn full_block(block: &Matrix, scale: f64) -> BlockRows {
    (0..block.rows())
        .map(|i| {
            block
                .row(i)
                .iter()
                .enumerate()
                .map(|(j, &v)| (j, scale * v))
                .collect()
        })
        .collect()
}

/// Block affinity over `n_first + n_second` nodes with its degree vector.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AffinityModel {
    pub k: usize,
    /// Nodes `0..n_first` form the first block (RGB in standard mode, the
    /// query in single-query mode).
    pub n_first: usize,
    pub n_second: usize,
    /// Row-sparse entries, columns ascending.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub degree: Vec<f64>,
}

impl AffinityModel {
    /// Joins four blocks `[[ff, fs], [sf, ss]]` given with local columns.
    pub fn assemble(
        k: usize,
        ff: BlockRows,
        fs: BlockRows,
        sf: BlockRows,
        ss: BlockRows,
    ) -> Result<Self> {
        let n_first = ff.len();
        let n_second = ss.len();
        if fs.len() != n_first || sf.len() != n_second {
            return Err(SsftError::Shape {
                op: "affinity_assemble",
                left: (fs.len(), n_first),
                right: (sf.len(), n_second),
            });
        }
        let mut rows = Vec::with_capacity(n_first + n_second);
        for (left, right) in ff.into_iter().zip(fs).chain(sf.into_iter().zip(ss)) {
            let mut row: Vec<(usize, f64)> = left;
            row.extend(right.into_iter().map(|(j, v)| (j + n_first, v)));
            row.retain(|e| e.1 != 0.0);
            rows.push(row);
        }
        let degree = rows.iter().map(|r| r.iter().map(|e| e.1).sum()).collect();
        Ok(AffinityModel {
            k,
            n_first,
            n_second,
            rows,
            degree,
        })
    }

    /// Every node its own sole neighbor.
    pub fn identity(n: usize) -> Self {
        AffinityModel {
            k: 1,
            n_first: n,
            n_second: 0,
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
            degree: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.len();
        let mut m = Matrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m.set(i, j, v);
            }
        }
        m
    }

    /// `D^{-1/2} A D^{-1/2}` in sparse form.
    pub fn normalized(&self) -> Result<CsrMatrix> {
        if let Some(i) = self.degree.iter().position(|&d| !(d > 0.0)) {
            return Err(SsftError::NonFinite(format!(
                "affinity degree of node {i} is not positive"
            )));
        }
        let inv: Vec<f64> = self.degree.iter().map(|d| 1.0 / d.sqrt()).collect();
        let rows: Vec<Vec<(usize, f64)>> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().map(|&(j, v)| (j, v * inv[i] * inv[j])).collect())
            .collect();
        Ok(CsrMatrix::from_row_entries(self.len(), &rows))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("affinity serializes")
    }
}

/// Features the affinity is built from: intra blocks compare `intra` rows,
/// inter blocks compare `inter` rows.
fn affinity_features(b: &FeatureBundle) -> (&Matrix, &Matrix) {
    let intra = if b.p.cols() > 0 { &b.p } else { &b.h };
    (intra, &b.h)
}

/// Top-k sparsified intra-modality block of one bundle.
pub fn intra_block(b: &FeatureBundle, k: usize) -> Result<BlockRows> {
    if k == 0 {
        return Err(SsftError::config("top-k needs k >= 1"));
    }
    let (intra, _) = affinity_features(b);
    let block = similarity_block(intra, intra)?;
    Ok((0..block.rows())
        .map(|i| {
            // Self-similarity is the row maximum but may tie with earlier
            // columns (parallel features), so it is ranked first among equals.
            let mut row = block.row(i).to_vec();
            row[i] = f64::INFINITY;
            topk_indices(&row, k)
                .into_iter()
                .map(|j| (j, block.get(i, j)))
                .collect()
        })
        .collect())
}

/// Standard block affinity over `[rgb; ir]`: specific features inside a
/// modality, shared features across, each block top-k per row.
pub fn build_affinity(rgb: &FeatureBundle, ir: &FeatureBundle, k: usize) -> Result<AffinityModel> {
    build_affinity_with(rgb, ir, k, None, None)
}

/// [`build_affinity`] reusing intra blocks computed earlier with [`intra_block`]
/// for the same bundle and `k`.
pub fn build_affinity_with(
    rgb: &FeatureBundle,
    ir: &FeatureBundle,
    k: usize,
    rgb_intra: Option<&BlockRows>,
    ir_intra: Option<&BlockRows>,
) -> Result<AffinityModel> {
    if rgb.is_empty() || ir.is_empty() {
        return Err(SsftError::config(
            "affinity needs samples from both modalities (use the single-query path)",
        ));
    }
    if rgb.modality != Modality::R || ir.modality != Modality::I {
        return Err(SsftError::config(
            "build_affinity expects (RGB, IR) bundles",
        ));
    }
    if k == 0 {
        return Err(SsftError::config("top-k needs k >= 1"));
    }
    let block = |b: &FeatureBundle, cached: Option<&BlockRows>| -> Result<BlockRows> {
        match cached {
            Some(c) if c.len() == b.len() => Ok(c.clone()),
            Some(_) => Err(SsftError::config(
                "cached intra block does not match its bundle",
            )),
            None => intra_block(b, k),
        }
    };
    let (_, hr) = affinity_features(rgb);
    let (_, hi) = affinity_features(ir);
    AffinityModel::assemble(
        k,
        block(rgb, rgb_intra)?,
        topk_block(&similarity_block(hr, hi)?, k)?,
        topk_block(&similarity_block(hi, hr)?, k)?,
        block(ir, ir_intra)?,
    )
}

/// Affinity for one query against a gallery of the other modality, nodes
/// `[query; gallery]`. The query column is amplified `k`-fold and kept dense;
/// the query row and the gallery block are top-k sparsified.
pub fn single_query_affinity(
    query: &FeatureBundle,
    gallery: &FeatureBundle,
    k: usize,
) -> Result<AffinityModel> {
    SingleQueryAffinity::new(gallery, k)?.for_query(query, gallery)
}

/// Single-query graphs for many queries share the gallery block.
pub struct SingleQueryAffinity {
    k: usize,
    modality: Modality,
    gallery_block: BlockRows,
}

impl SingleQueryAffinity {
    pub fn new(gallery: &FeatureBundle, k: usize) -> Result<Self> {
        if gallery.is_empty() {
            return Err(SsftError::config("gallery is empty"));
        }
        if k == 0 {
            return Err(SsftError::config("top-k needs k >= 1"));
        }
        Ok(SingleQueryAffinity {
            k,
            modality: gallery.modality,
            gallery_block: intra_block(gallery, k)?,
        })
    }

    /// `gallery` must be the bundle this was built from.
    pub fn for_query(
        &self,
        query: &FeatureBundle,
        gallery: &FeatureBundle,
    ) -> Result<AffinityModel> {
        if query.len() != 1 {
            return Err(SsftError::config(
                "single-query affinity takes exactly one query",
            ));
        }
        if query.modality == self.modality || gallery.modality != self.modality {
            return Err(SsftError::config(
                "query and gallery must come from different modalities",
            ));
        }
        let amplify = self.k as f64;
        let (q_intra, q_inter) = affinity_features(query);
        let (_, g_inter) = affinity_features(gallery);
        AffinityModel::assemble(
            self.k,
            full_block(&similarity_block(q_intra, q_intra)?, amplify),
            topk_block(&similarity_block(q_inter, g_inter)?, self.k)?,
            full_block(&similarity_block(g_inter, q_inter)?, amplify),
            self.gallery_block.clone(),
        )
    }
}

/// `[P | H | 0]` for RGB rows and `[0 | H | P]` for IR rows, stacked RGB first.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedMatrix {
    pub z: Matrix,
    pub modalities: Vec<Modality>,
    pub row_order: Vec<u64>,
    pub d_p: usize,
    pub d_h: usize,
}

/// Which segments of Z carry features; a disabled segment is left zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransferSegments {
    pub shared: bool,
    pub specific: bool,
}

impl TransferSegments {
    pub const ALL: TransferSegments = TransferSegments {
        shared: true,
        specific: true,
    };
}

fn pad_rows(b: &FeatureBundle, d_p: usize, seg: TransferSegments) -> Matrix {
    let width = 2 * d_p + b.h.cols();
    let spec_offset = match b.modality {
        Modality::R => 0,
        Modality::I => d_p + b.h.cols(),
    };
    let mut z = Matrix::zeros(b.len(), width);
    for i in 0..b.len() {
        let row = z.row_mut(i);
        if seg.specific && d_p > 0 {
            row[spec_offset..spec_offset + d_p].copy_from_slice(b.p.row(i));
        }
        if seg.shared {
            row[d_p..d_p + b.h.cols()].copy_from_slice(b.h.row(i));
        }
    }
    z
}

/// Pads the bundles of each listed modality into one Z, in the given order.
pub fn pad(bundles: &[&FeatureBundle], seg: TransferSegments) -> Result<PaddedMatrix> {
    let first = bundles
        .first()
        .ok_or_else(|| SsftError::config("nothing to pad"))?;
    let (d_p, d_h) = (first.p.cols(), first.h.cols());
    let mut parts = Vec::with_capacity(bundles.len());
    let mut modalities = Vec::new();
    let mut row_order = Vec::new();
    for b in bundles {
        if b.p.cols() != d_p || b.h.cols() != d_h {
            return Err(SsftError::Shape {
                op: "pad",
                left: (d_p, d_h),
                right: (b.p.cols(), b.h.cols()),
            });
        }
        parts.push(pad_rows(b, d_p, seg));
        modalities.extend(std::iter::repeat_n(b.modality, b.len()));
        row_order.extend(&b.sample_ids);
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    Ok(PaddedMatrix {
        z: Matrix::concat_rows(&refs)?,
        modalities,
        row_order,
        d_p,
        d_h,
    })
}

/// Borrowed SSTN weights.
#[derive(Clone, Copy, Debug)]
pub struct SstnWeights<'a> {
    pub fusion: &'a Matrix,
    pub head_w: &'a Matrix,
    pub head_b: &'a Matrix,
}

pub const FUSION: &str = "sstn/W";
pub const HEAD_W: &str = "sstn/feat_t/w";
pub const HEAD_B: &str = "sstn/feat_t/b";

impl<'a> SstnWeights<'a> {
    pub fn from_store(store: &'a ParamStore) -> Option<Self> {
        Some(SstnWeights {
            fusion: store.get(FUSION)?,
            head_w: store.get(HEAD_W)?,
            head_b: store.get(HEAD_B)?,
        })
    }
}

/// `Z·W`, the part of propagation that does not depend on the graph.
pub fn fuse(z: &Matrix, w: &SstnWeights) -> Result<Matrix> {
    z.matmul(w.fusion)
}

/// `T = Feat^t(ReLU(Â · ZW))` given the precomputed `ZW`.
pub fn propagate_fused(zw: &Matrix, a_hat: &CsrMatrix, w: &SstnWeights) -> Result<Matrix> {
    let mixed = a_hat.matmul_dense(zw)?.relu();
    Ok(mixed.matmul(w.head_w)?.add_row_broadcast(w.head_b)?.relu())
}

/// Transferred features for every row of `z`.
pub fn propagate(z: &PaddedMatrix, aff: &AffinityModel, w: &SstnWeights) -> Result<Matrix> {
    if aff.len() != z.z.rows() {
        return Err(SsftError::Shape {
            op: "propagate",
            left: z.z.shape(),
            right: (aff.len(), aff.len()),
        });
    }
    let a_hat = aff.normalized()?;
    propagate_fused(&fuse(&z.z, w)?, &a_hat, w)
}

/// Differentiable propagation; the affinity is a constant of the tape.
pub fn propagate_tape(
    tape: &mut Tape,
    z: Var,
    a_hat: Arc<CsrMatrix>,
    fusion: Var,
    head_w: Var,
    head_b: Var,
) -> Result<Var> {
    let zw = tape.matmul(z, fusion)?;
    let mixed = tape.spmm(a_hat, zw)?;
    let mixed = tape.relu(mixed);
    let t = tape.matmul(mixed, head_w)?;
    let t = tape.add_bias(t, head_b)?;
    Ok(tape.relu(t))
}
