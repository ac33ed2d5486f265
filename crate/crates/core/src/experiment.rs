//! One model end to end: train on a training split, then evaluate it on a
//! test split. Shared by the ablation runner and the trend checks.

use crate::ablation::Ablation;
use crate::datagen::SampleSet;
use crate::error::Result;
use crate::evaluator::{Direction, Evaluator, RetrievalReport};
use crate::extractor::ModelConfig;
use crate::losses::TrainConfig;
use crate::network::Architecture;
use crate::trainer::{train, ClassMap, History, Schedule, TrainOptions, TrainState};

/// The architecture a training split calls for.
pub fn architecture(train_set: &SampleSet, model: ModelConfig, ablation: Ablation) -> Architecture {
    Architecture {
        d_in: train_set.d_in(),
        n_classes: ClassMap::new(train_set).len(),
        model,
        ablation,
    }
}

#[derive(Clone, Debug)]
pub struct Setup<'a> {
    pub train: &'a SampleSet,
    pub test: &'a SampleSet,
    pub model: ModelConfig,
    pub schedule: &'a Schedule,
    pub train_cfg: &'a TrainConfig,
    pub k: usize,
    pub direction: Direction,
}

pub struct Run {
    pub state: TrainState,
    pub history: History,
    pub all_queries: RetrievalReport,
    /// Absent for models without a transfer network, where both modes coincide.
    pub single_query: Option<RetrievalReport>,
}

impl Run {
    pub fn evaluator<'a>(&'a self, setup: &Setup) -> Result<Evaluator<'a>> {
        Evaluator::new(
            &self.state.net,
            &self.state.store,
            setup.test,
            setup.direction,
            setup.k,
        )
    }
}

pub fn run(setup: &Setup, ablation: Ablation, seed: u64, opts: &TrainOptions) -> Result<Run> {
    let arch = architecture(setup.train, setup.model, ablation);
    let (state, history) = train(
        setup.train,
        arch,
        setup.schedule,
        setup.train_cfg,
        seed,
        opts,
    )?;
    let ev = Evaluator::new(
        &state.net,
        &state.store,
        setup.test,
        setup.direction,
        setup.k,
    )?;
    let all_queries = ev.all_queries()?;
    let single_query = match state.net.sstn {
        Some(_) => Some(ev.single_query()?),
        None => None,
    };
    Ok(Run {
        state,
        history,
        all_queries,
        single_query,
    })
}
