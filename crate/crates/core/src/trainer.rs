//! Alternating min-max training: per batch one Adam step of the network
//! partition on `L_min`, then one of the adversaries on `λ₂·L_ma + λ₃·L_pa`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datagen::{PkBatch, PkSampler, SampleSet};
use crate::diffcore::{Adam, AdamConfig, Matrix, ParamStore, Tape};
use crate::error::{Result, SsftError};
use crate::losses::{LossReport, TrainConfig};
use crate::network::{forward, AffinitySource, Architecture, BatchInput, Network};

/// RNG stream used for batch sampling.
const SAMPLING_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub lr: f64,
    /// Epoch indices (0-based) from which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub ids_per_batch: usize,
    pub samples_per_modality: usize,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 40,
            batches_per_epoch: 20,
            lr: 0.00035,
            decay_epochs: vec![14, 24],
            decay_factor: 0.1,
            ids_per_batch: 8,
            samples_per_modality: 4,
            checkpoint_every: 0,
        }
    }
}

impl Schedule {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs > 0 && self.batches_per_epoch == 0 {
            v.push("schedule.batches_per_epoch must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            v.push("schedule.lr must be finite and >= 0".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            v.push("schedule.decay_factor must be finite and > 0".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            v.push("schedule.decay_epochs must be strictly increasing".into());
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) && self.epochs > 0 {
            v.push("schedule.decay_epochs must all be < epochs".into());
        }
        if self.ids_per_batch < 2 {
            v.push("schedule.ids_per_batch must be >= 2 (triplets need negatives)".into());
        }
        if self.samples_per_modality == 0 {
            v.push("schedule.samples_per_modality must be >= 1".into());
        }
        v
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.decay_factor.powi(decays as i32)
    }
}

/// Parameters, both optimizers, counters and the sampling RNG.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: Network,
    pub store: ParamStore,
    pub opt_net: Adam,
    pub opt_adv: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let (net, store) = Network::init(arch, seed)?;
        let opt_net = Adam::new(AdamConfig::default(), &store, Network::network_ids(&store));
        let opt_adv = Adam::new(
            AdamConfig::default(),
            &store,
            Network::adversary_ids(&store),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SAMPLING_STREAM);
        Ok(TrainState {
            net,
            store,
            opt_net,
            opt_adv,
            epoch: 0,
            step: 0,
            rng,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.net.arch
    }

    /// Flattens the state into named matrices. Integers are stored as `f64`
    /// halves of at most 32 bits, so they round-trip exactly.
    pub fn to_entries(&self) -> Vec<(String, Matrix)> {
        let mut out: Vec<(String, Matrix)> = self
            .store
            .leaves()
            .iter()
            .map(|l| (l.name.clone(), l.value.clone()))
            .collect();
        for (tag, opt) in [("net", &self.opt_net), ("adv", &self.opt_adv)] {
            for (slot, &id) in opt.ids().iter().enumerate() {
                let name = &self.store.leaf(id).name;
                let (m, v) = opt.moments(slot);
                out.push((format!("opt/{tag}/m/{name}"), m.clone()));
                out.push((format!("opt/{tag}/v/{name}"), v.clone()));
            }
        }
        let mut counters = Vec::new();
        for n in [
            self.epoch as u64,
            self.step,
            self.opt_net.step_count(),
            self.opt_adv.step_count(),
        ] {
            counters.extend(split_u64(n));
        }
        out.push(("state/counters".into(), row(counters)));
        let mut rng = Vec::new();
        for chunk in self.rng.get_seed().chunks_exact(4) {
            rng.push(u32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
        }
        rng.extend(split_u64(self.rng.get_stream()));
        let pos = self.rng.get_word_pos();
        rng.extend(split_u64((pos >> 64) as u64));
        rng.extend(split_u64(pos as u64));
        out.push(("state/rng".into(), row(rng)));
        out
    }

    /// Rebuilds a state for `arch` from checkpoint entries; every entry must
    /// exist with the expected shape and nothing else may be present.
    pub fn from_entries(arch: Architecture, entries: Vec<(String, Matrix)>) -> Result<Self> {
        let mut state = TrainState::new(arch, 0)?;
        let template: Vec<(String, (usize, usize))> = state
            .to_entries()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect();
        let mut by_name: HashMap<String, Matrix> = HashMap::with_capacity(entries.len());
        for (name, m) in entries {
            if by_name.insert(name.clone(), m).is_some() {
                return Err(SsftError::Schema(format!(
                    "duplicate checkpoint entry {name}"
                )));
            }
        }
        let mut take = |name: &str, expected: (usize, usize)| -> Result<Matrix> {
            let m = by_name
                .remove(name)
                .ok_or_else(|| SsftError::Schema(format!("checkpoint lacks entry {name}")))?;
            if m.shape() != expected {
                return Err(SsftError::EntryShape {
                    name: name.to_string(),
                    expected,
                    found: m.shape(),
                });
            }
            Ok(m)
        };
        let mut values = BTreeMap::new();
        for (name, shape) in &template {
            values.insert(name.clone(), take(name, *shape)?);
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(SsftError::Schema(format!(
                "checkpoint entry {extra} does not belong to this architecture"
            )));
        }

        for id in state.store.ids().collect::<Vec<_>>() {
            let name = state.store.leaf(id).name.clone();
            *state.store.value_mut(id) = values.remove(&name).expect("template entry");
        }
        let counters = join_row(&values["state/counters"])?;
        let [epoch, step, net_steps, adv_steps] = counters[..] else {
            return Err(SsftError::Schema(
                "state/counters must hold four integers".into(),
            ));
        };
        for (tag, steps) in [("net", net_steps), ("adv", adv_steps)] {
            let opt = if tag == "net" {
                &mut state.opt_net
            } else {
                &mut state.opt_adv
            };
            let names: Vec<String> = opt
                .ids()
                .iter()
                .map(|&id| state.store.leaf(id).name.clone())
                .collect();
            let first = names
                .iter()
                .map(|n| values[&format!("opt/{tag}/m/{n}")].clone())
                .collect();
            let second = names
                .iter()
                .map(|n| values[&format!("opt/{tag}/v/{n}")].clone())
                .collect();
            opt.restore(steps, first, second);
        }
        state.epoch = epoch as usize;
        state.step = step;

        let rng = values["state/rng"].data();
        let mut seed = [0u8; 32];
        for (i, v) in rng[..8].iter().enumerate() {
            seed[4 * i..4 * i + 4].copy_from_slice(&exact_u32(*v)?.to_le_bytes());
        }
        let rest = join_row(&Matrix::from_vec(1, 6, rng[8..].to_vec())?)?;
        let mut r = ChaCha8Rng::from_seed(seed);
        r.set_stream(rest[0]);
        r.set_word_pos(((rest[1] as u128) << 64) | rest[2] as u128);
        state.rng = r;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.to_entries())
    }

    pub fn load(path: &Path, arch: Architecture) -> Result<Self> {
        TrainState::from_entries(arch, checkpoint::read(path)?)
    }
}

fn row(values: Vec<f64>) -> Matrix {
    let n = values.len();
    Matrix::from_vec(1, n, values).expect("row length")
}

fn split_u64(n: u64) -> [f64; 2] {
    [(n >> 32) as f64, (n & 0xffff_ffff) as f64]
}

fn exact_u32(v: f64) -> Result<u32> {
    if v >= 0.0 && v <= u32::MAX as f64 && v.fract() == 0.0 {
        Ok(v as u32)
    } else {
        Err(SsftError::Schema(format!(
            "checkpoint integer field holds {v}"
        )))
    }
}

fn join_row(m: &Matrix) -> Result<Vec<u64>> {
    m.data()
        .chunks_exact(2)
        .map(|c| Ok(((exact_u32(c[0])? as u64) << 32) | exact_u32(c[1])? as u64))
        .collect()
}

/// Identity → classifier index, over the sorted training identities.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMap(BTreeMap<u32, usize>);

impl ClassMap {
    pub fn new(set: &SampleSet) -> Self {
        ClassMap(
            set.identities()
                .enumerate()
                .map(|(i, id)| (id, i))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn class_of(&self, identity: u32) -> Result<usize> {
        self.0.get(&identity).copied().ok_or_else(|| {
            SsftError::Schema(format!("identity {identity} is not a training class"))
        })
    }
}

pub fn batch_input(set: &SampleSet, batch: &PkBatch, classes: &ClassMap) -> Result<BatchInput> {
    let part = |idx: &[usize]| -> Result<(Matrix, Vec<u32>, Vec<usize>, Vec<u64>)> {
        let ids = set.labels(idx);
        let labels = ids
            .iter()
            .map(|&y| classes.class_of(y))
            .collect::<Result<_>>()?;
        let sample_ids = idx.iter().map(|&i| set.records()[i].sample_id).collect();
        Ok((set.features(idx), ids, labels, sample_ids))
    };
    let (xr, ir, lr, sr) = part(&batch.rgb)?;
    let (xi, ii, li, si) = part(&batch.ir)?;
    if ir.len() != ii.len() {
        return Err(SsftError::Schema("batch modalities are unbalanced".into()));
    }
    Ok(BatchInput {
        x: [xr, xi],
        ids: [ir, ii],
        labels: [lr, li],
        sample_ids: [sr, si],
    })
}

/// Report of the fresh forward pass after the min step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    pub triplet_warning: bool,
}

fn check_finite(report: &LossReport, phase: &str) -> Result<()> {
    match report.first_non_finite() {
        Some(term) => Err(SsftError::NonFinite(format!(
            "{term} during the {phase} step"
        ))),
        None => Ok(()),
    }
}

/// Min step on the network partition with adversaries fixed.
pub fn min_step(
    state: &mut TrainState,
    batch: &BatchInput,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossReport> {
    state.store.zero_grads();
    let mut tape = Tape::new();
    let fp = forward(
        &mut tape,
        &state.store,
        &state.net,
        batch,
        cfg,
        &AffinitySource::Recompute,
    )?;
    check_finite(&fp.report, "min")?;
    tape.backward(fp.min, &mut state.store)?;
    state.opt_net.step(&mut state.store, lr);
    Ok(fp.report)
}

/// Max step on the adversaries with the network fixed.
pub fn max_step(
    state: &mut TrainState,
    batch: &BatchInput,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(LossReport, bool)> {
    state.store.zero_grads();
    let mut tape = Tape::new();
    let fp = forward(
        &mut tape,
        &state.store,
        &state.net,
        batch,
        cfg,
        &AffinitySource::Recompute,
    )?;
    check_finite(&fp.report, "max")?;
    tape.backward(fp.adv, &mut state.store)?;
    state.opt_adv.step(&mut state.store, lr);
    Ok((fp.report, fp.triplet_warning))
}

pub fn train_step(
    state: &mut TrainState,
    batch: &BatchInput,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepOutcome> {
    min_step(state, batch, cfg, lr)?;
    let (report, triplet_warning) = max_step(state, batch, cfg, lr)?;
    state.step += 1;
    Ok(StepOutcome {
        report,
        triplet_warning,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
}

impl History {
    /// Mean of a report field over each epoch present, in epoch order.
    pub fn epoch_means(&self, field: impl Fn(&LossReport) -> f64) -> Vec<(usize, f64)> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for s in &self.steps {
            let e = acc.entry(s.epoch).or_default();
            e.0 += field(&s.report);
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(e, (sum, n))| (e, sum / n as f64))
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `epoch_NNN.ssft` and `final.ssft`.
    pub checkpoint_dir: Option<PathBuf>,
    /// JSON-lines step log.
    pub log_path: Option<PathBuf>,
    /// Stop after this many total epochs instead of `schedule.epochs`.
    pub stop_after: Option<usize>,
}

pub fn train(
    set: &SampleSet,
    arch: Architecture,
    schedule: &Schedule,
    cfg: &TrainConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(TrainState, History)> {
    resume(TrainState::new(arch, seed)?, set, schedule, cfg, opts)
}

/// Runs the remaining epochs of `schedule` from `state`.
pub fn resume(
    mut state: TrainState,
    set: &SampleSet,
    schedule: &Schedule,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<(TrainState, History)> {
    let mut v = schedule.violations();
    v.extend(cfg.violations());
    if !v.is_empty() {
        return Err(SsftError::Config(v));
    }
    let classes = ClassMap::new(set);
    if classes.len() != state.arch().n_classes {
        return Err(SsftError::config(format!(
            "training set has {} identities but the model has {} classes",
            classes.len(),
            state.arch().n_classes
        )));
    }
    let mut log = match &opts.log_path {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| SsftError::io(p, e))?,
        )),
        None => None,
    };
    let end = opts
        .stop_after
        .unwrap_or(schedule.epochs)
        .min(schedule.epochs);
    let mut history = History::default();
    if state.epoch < end {
        let mut sampler =
            PkSampler::new(set, schedule.ids_per_batch, schedule.samples_per_modality)?;
        while state.epoch < end {
            let lr = schedule.lr_at(state.epoch);
            sampler.reset();
            let mut warnings = 0;
            for _ in 0..schedule.batches_per_epoch {
                let pk = sampler.next_batch(&mut state.rng);
                let batch = batch_input(set, &pk, &classes)?;
                let out = train_step(&mut state, &batch, cfg, lr)?;
                warnings += out.triplet_warning as usize;
                let rec = StepRecord {
                    step: state.step,
                    epoch: state.epoch,
                    lr,
                    report: out.report,
                };
                if let (Some(w), Some(p)) = (log.as_mut(), &opts.log_path) {
                    let line = serde_json::to_string(&rec).expect("step record serializes");
                    writeln!(w, "{line}").map_err(|e| SsftError::io(p, e))?;
                }
                history.steps.push(rec);
            }
            state.epoch += 1;
            let last = &history.steps[history.steps.len() - 1].report;
            log::info!(
                "epoch {}/{} lr {:.2e} L_min {:.4} L_feat {:.4} L_re {:.4} L_ma {:.4}",
                state.epoch,
                schedule.epochs,
                lr,
                last.min,
                last.feat,
                last.re,
                last.ma
            );
            if warnings > 0 {
                log::warn!(
                    "epoch {}: {warnings} batches had no valid triplet",
                    state.epoch
                );
            }
            if let Some(dir) = &opts.checkpoint_dir {
                if schedule.checkpoint_every > 0
                    && state.epoch.is_multiple_of(schedule.checkpoint_every)
                {
                    state.save(&dir.join(format!("epoch_{:03}.ssft", state.epoch)))?;
                }
            }
        }
    }
    if let (Some(w), Some(p)) = (log.as_mut(), &opts.log_path) {
        w.flush().map_err(|e| SsftError::io(p, e))?;
    }
    if let Some(dir) = &opts.checkpoint_dir {
        state.save(&dir.join("final.ssft"))?;
    }
    Ok((state, history))
}
