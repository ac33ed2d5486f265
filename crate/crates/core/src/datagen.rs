//! Synthetic two-modality identity data.
//!
//! Each identity has a latent code observable in both modalities and, per
//! modality, an attribute code that only that modality sees. Observations are
//! `x = M_m · [z_id; a_(id,m)] + ε` with one fixed mixing matrix per modality.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{Result, SsftError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    R,
    I,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::R, Modality::I];

    pub fn index(self) -> usize {
        match self {
            Modality::R => 0,
            Modality::I => 1,
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::R => Modality::I,
            Modality::I => Modality::R,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::R => "R",
            Modality::I => "I",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub identity: u32,
    pub modality: Modality,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    split: Split,
    d_in: usize,
    records: Vec<SampleRecord>,
    /// identity → record indices, per modality.
    identity_index: BTreeMap<u32, [Vec<usize>; 2]>,
}

impl SampleSet {
    pub fn new(split: Split, d_in: usize, records: Vec<SampleRecord>) -> Result<Self> {
        let mut identity_index: BTreeMap<u32, [Vec<usize>; 2]> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.features.len() != d_in {
                return Err(SsftError::Schema(format!(
                    "sample {} has {} features, expected {d_in}",
                    r.sample_id,
                    r.features.len()
                )));
            }
            identity_index.entry(r.identity).or_default()[r.modality.index()].push(i);
        }
        Ok(SampleSet {
            split,
            d_in,
            records,
            identity_index,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn identities(&self) -> impl Iterator<Item = u32> + '_ {
        self.identity_index.keys().copied()
    }

    pub fn num_identities(&self) -> usize {
        self.identity_index.len()
    }

    pub fn indices_of(&self, identity: u32, modality: Modality) -> &[usize] {
        self.identity_index
            .get(&identity)
            .map_or(&[][..], |m| &m[modality.index()][..])
    }

    /// Record indices of one modality, in file order.
    pub fn modality_indices(&self, modality: Modality) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].modality == modality)
            .collect()
    }

    /// Stacks the features of the given records into a matrix.
    pub fn features(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.d_in);
        for &i in idx {
            data.extend_from_slice(&self.records[i].features);
        }
        Matrix::from_vec(idx.len(), self.d_in, data).expect("feature rows have d_in entries")
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<u32> {
        idx.iter().map(|&i| self.records[i].identity).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_train_ids: usize,
    pub n_test_ids: usize,
    pub samples_per_id_per_modality: usize,
    pub d_id: usize,
    pub d_spec: usize,
    pub d_in: usize,
    pub noise_sigma: f64,
    /// Weight of the modality-private part of the identity block of each
    /// mixing matrix; 0 makes both modalities see the identity code the same
    /// way, 1 makes them unrelated.
    pub modality_gap: f64,
    /// Standard deviation of the mixing-matrix entries, times `sqrt(d_in)`.
    pub mixing_gain: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0,
            n_train_ids: 64,
            n_test_ids: 32,
            samples_per_id_per_modality: 10,
            d_id: 16,
            d_spec: 8,
            d_in: 64,
            noise_sigma: 0.3,
            modality_gap: 0.8,
            mixing_gain: 3.0,
        }
    }
}

impl GeneratorConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, n) in [
            ("n_train_ids", self.n_train_ids),
            ("n_test_ids", self.n_test_ids),
            (
                "samples_per_id_per_modality",
                self.samples_per_id_per_modality,
            ),
            ("d_id", self.d_id),
            ("d_spec", self.d_spec),
            ("d_in", self.d_in),
        ] {
            if n == 0 {
                v.push(format!("generator.{name} must be >= 1"));
            }
        }
        if self.d_in < self.d_id + self.d_spec {
            v.push(format!(
                "generator.d_in ({}) must be >= d_id + d_spec ({})",
                self.d_in,
                self.d_id + self.d_spec
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            v.push("generator.noise_sigma must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.modality_gap) {
            v.push("generator.modality_gap must lie in [0, 1]".into());
        }
        if !(self.mixing_gain > 0.0) {
            v.push("generator.mixing_gain must be > 0".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(SsftError::Config(v))
        }
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Generates the (train, test) pair. Identities `0..n_train_ids` train,
/// the following `n_test_ids` test.
pub fn generate(cfg: &GeneratorConfig) -> Result<(SampleSet, SampleSet)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = cfg.mixing_gain / (cfg.d_in as f64).sqrt();

    let common = gaussian_matrix(&mut rng, cfg.d_in, cfg.d_id, std);
    let gap = cfg.modality_gap;
    let keep = (1.0 - gap * gap).sqrt();
    let mut mixing = Vec::with_capacity(2);
    for _ in Modality::BOTH {
        let private = gaussian_matrix(&mut rng, cfg.d_in, cfg.d_id, std);
        let spec = gaussian_matrix(&mut rng, cfg.d_in, cfg.d_spec, std);
        let id_block = Matrix::from_fn(cfg.d_in, cfg.d_id, |i, j| {
            keep * common.get(i, j) + gap * private.get(i, j)
        });
        mixing.push(Matrix::concat_columns(&[&id_block, &spec])?);
    }

    let per = cfg.samples_per_id_per_modality;
    let total_ids = cfg.n_train_ids + cfg.n_test_ids;
    let mut train = Vec::with_capacity(cfg.n_train_ids * 2 * per);
    let mut test = Vec::with_capacity(cfg.n_test_ids * 2 * per);
    let mut next_id = 0u64;
    for identity in 0..total_ids {
        let z = gaussian_vec(&mut rng, cfg.d_id, 1.0);
        for modality in Modality::BOTH {
            let a = gaussian_vec(&mut rng, cfg.d_spec, 1.0);
            let latent: Vec<f64> = z.iter().chain(&a).copied().collect();
            let mix = &mixing[modality.index()];
            let clean: Vec<f64> = (0..cfg.d_in)
                .map(|r| crate::diffcore::matrix::dot(mix.row(r), &latent))
                .collect();
            for _ in 0..per {
                let features = clean
                    .iter()
                    .map(|&c| c + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let rec = SampleRecord {
                    sample_id: next_id,
                    identity: identity as u32,
                    modality,
                    features,
                };
                next_id += 1;
                if identity < cfg.n_train_ids {
                    train.push(rec);
                } else {
                    test.push(rec);
                }
            }
        }
    }
    Ok((
        SampleSet::new(Split::Train, cfg.d_in, train)?,
        SampleSet::new(Split::Test, cfg.d_in, test)?,
    ))
}

/// Indices of one PK batch: `n_ids` identities, `n_per_modality` records of
/// each in each modality. RGB rows first, grouped by identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    pub rgb: Vec<usize>,
    pub ir: Vec<usize>,
}

impl PkBatch {
    pub fn len(&self) -> usize {
        self.rgb.len() + self.ir.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records<'a>(
        &'a self,
        set: &'a SampleSet,
    ) -> impl Iterator<Item = &'a SampleRecord> + 'a {
        self.rgb.iter().chain(&self.ir).map(|&i| &set.records()[i])
    }
}

/// Cycles through shuffled pools without replacement. When a pool runs dry it
/// is reshuffled, with anything already taken for the current draw moved to
/// the back so a single draw never repeats an element.
#[derive(Clone, Debug)]
struct CyclicPool<T: Copy + PartialEq> {
    items: Vec<T>,
    queue: Vec<T>,
}

impl<T: Copy + PartialEq> CyclicPool<T> {
    fn new(items: Vec<T>) -> Self {
        CyclicPool {
            items,
            queue: Vec::new(),
        }
    }

    fn draw(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
        debug_assert!(n <= self.items.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.queue.is_empty() {
                let mut fresh = self.items.clone();
                fresh.shuffle(rng);
                let (taken, rest): (Vec<T>, Vec<T>) =
                    fresh.into_iter().partition(|x| out.contains(x));
                // pop() takes from the back: queue = reverse(rest ++ taken)
                self.queue = rest.into_iter().chain(taken).rev().collect();
            }
            out.push(self.queue.pop().expect("non-empty pool"));
        }
        out
    }
}

/// Epoch-scoped PK sampler: identities are visited in shuffled order, and
/// within each (identity, modality) pool records are drawn without
/// replacement until the pool is exhausted.
#[derive(Clone, Debug)]
pub struct PkSampler {
    n_ids: usize,
    n_per_modality: usize,
    identities: CyclicPool<u32>,
    pools: BTreeMap<(u32, Modality), CyclicPool<usize>>,
}

impl PkSampler {
    pub fn new(set: &SampleSet, n_ids: usize, n_per_modality: usize) -> Result<Self> {
        if n_ids == 0 || n_per_modality == 0 {
            return Err(SsftError::config(
                "PK batch needs n_ids >= 1 and n_per_modality >= 1",
            ));
        }
        let eligible: Vec<u32> = set
            .identities()
            .filter(|&id| {
                Modality::BOTH
                    .iter()
                    .all(|&m| set.indices_of(id, m).len() >= n_per_modality)
            })
            .collect();
        if eligible.len() < n_ids {
            return Err(SsftError::config(format!(
                "PK batch needs {n_ids} identities with >= {n_per_modality} samples per modality, \
                 dataset has {}",
                eligible.len()
            )));
        }
        let mut pools = BTreeMap::new();
        for &id in &eligible {
            for m in Modality::BOTH {
                pools.insert((id, m), CyclicPool::new(set.indices_of(id, m).to_vec()));
            }
        }
        Ok(PkSampler {
            n_ids,
            n_per_modality,
            identities: CyclicPool::new(eligible),
            pools,
        })
    }

    /// Starts a new epoch: every pool is refilled before its next draw.
    pub fn reset(&mut self) {
        self.identities.queue.clear();
        for pool in self.pools.values_mut() {
            pool.queue.clear();
        }
    }

    pub fn batch_size(&self) -> usize {
        2 * self.n_ids * self.n_per_modality
    }

    pub fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> PkBatch {
        let ids = self.identities.draw(self.n_ids, rng);
        let mut batch = PkBatch {
            rgb: Vec::with_capacity(self.n_ids * self.n_per_modality),
            ir: Vec::with_capacity(self.n_ids * self.n_per_modality),
        };
        for id in ids {
            for m in Modality::BOTH {
                let drawn = self
                    .pools
                    .get_mut(&(id, m))
                    .expect("pool for eligible identity")
                    .draw(self.n_per_modality, rng);
                match m {
                    Modality::R => batch.rgb.extend(drawn),
                    Modality::I => batch.ir.extend(drawn),
                }
            }
        }
        batch
    }
}

/// One stand-alone PK batch.
pub fn sample_pk_batch(
    set: &SampleSet,
    n_ids: usize,
    n_per_modality: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PkBatch> {
    Ok(PkSampler::new(set, n_ids, n_per_modality)?.next_batch(rng))
}

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    d_in: usize,
    split: Split,
    count: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    sample_id: u64,
    identity: u32,
    modality: Modality,
    features: Vec<f64>,
}

/// Writes JSON lines: a header, then one record per line. Floats carry 17
/// significant digits so values survive the round trip bit for bit.
pub fn save(set: &SampleSet, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| SsftError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        version: DATASET_VERSION,
        d_in: set.d_in,
        split: set.split,
        count: set.records.len(),
    };
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    for r in &set.records {
        write!(
            line,
            "{{\"sample_id\":{},\"identity\":{},\"modality\":\"{}\",\"features\":[",
            r.sample_id,
            r.identity,
            r.modality.tag()
        )
        .expect("write to string");
        for (k, v) in r.features.iter().enumerate() {
            if k > 0 {
                line.push(',');
            }
            write!(line, "{v:.16e}").expect("write to string");
        }
        line.push_str("]}\n");
        if line.len() > 1 << 16 {
            w.write_all(line.as_bytes())
                .map_err(|e| SsftError::io(path, e))?;
            line.clear();
        }
    }
    w.write_all(line.as_bytes())
        .map_err(|e| SsftError::io(path, e))?;
    w.flush().map_err(|e| SsftError::io(path, e))
}

pub fn load(path: &Path) -> Result<SampleSet> {
    let file = fs::File::open(path).map_err(|e| SsftError::io(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, msg: String| SsftError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        None => return Err(parse_err(1, "missing header".into())),
        Some((_, text)) => {
            let text = text.map_err(|e| SsftError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| parse_err(1, e.to_string()))?
        }
    };
    if header.version != DATASET_VERSION {
        return Err(SsftError::Schema(format!(
            "dataset version {} is not supported (expected {DATASET_VERSION})",
            header.version
        )));
    }
    let mut records = Vec::with_capacity(header.count);
    for (n, text) in lines {
        let line_no = n + 1;
        let text = text.map_err(|e| SsftError::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: RecordLine =
            serde_json::from_str(&text).map_err(|e| parse_err(line_no, e.to_string()))?;
        if rec.features.len() != header.d_in {
            return Err(SsftError::Schema(format!(
                "line {line_no}: {} features, header declares d_in = {}",
                rec.features.len(),
                header.d_in
            )));
        }
        records.push(SampleRecord {
            sample_id: rec.sample_id,
            identity: rec.identity,
            modality: rec.modality,
            features: rec.features,
        });
    }
    if records.len() != header.count {
        return Err(parse_err(
            records.len() + 2,
            format!(
                "expected {} records, found {} (truncated file?)",
                header.count,
                records.len()
            ),
        ));
    }
    SampleSet::new(header.split, header.d_in, records)
}
