//! The five subcommands. Each takes a validated [`RunConfig`] and writes its
//! artifacts under an output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use ssft::ablation::{self, Ablation, SWITCH_NAMES};
use ssft::datagen::{self, Modality, SampleSet};
use ssft::evaluator::{Evaluator, RetrievalReport};
use ssft::experiment::{self, Setup};
use ssft::sstn;
use ssft::trainer::{train, TrainOptions, TrainState};
use ssft::{Result, SsftError};

use crate::config::{EvalMode, RunConfig, SizeSpec};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SsftError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| SsftError::io(path, e))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(SsftError::config(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

/// Train and test splits written by `synth`.
pub struct Data {
    pub train: SampleSet,
    pub test: SampleSet,
}

impl Data {
    pub fn load(dir: &Path) -> Result<Self> {
        let (tr, te) = (dir.join(TRAIN_FILE), dir.join(TEST_FILE));
        require_file(&tr, "training split")?;
        require_file(&te, "test split")?;
        Ok(Data {
            train: datagen::load(&tr)?,
            test: datagen::load(&te)?,
        })
    }
}

fn load_state(cfg: &RunConfig, data: &Data, checkpoint: &Path) -> Result<TrainState> {
    require_file(checkpoint, "checkpoint")?;
    let arch = experiment::architecture(&data.train, cfg.model, cfg.ablation);
    TrainState::load(checkpoint, arch)
}

fn summarize(name: &str, set: &SampleSet) -> String {
    let per = |m| set.modality_indices(m).len();
    format!(
        "{name}: {} identities, {} samples ({} R / {} I), d_in {}",
        set.num_identities(),
        set.len(),
        per(Modality::R),
        per(Modality::I),
        set.d_in()
    )
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train_set, test_set) = datagen::generate(&cfg.generator)?;
    create_dir(out)?;
    datagen::save(&train_set, &out.join(TRAIN_FILE))?;
    datagen::save(&test_set, &out.join(TEST_FILE))?;
    println!("{}", summarize("train", &train_set));
    println!("{}", summarize("test", &test_set));
    println!("wrote {}", out.display());
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let data = Data::load(data_dir)?;
    create_dir(out)?;
    write_file(&out.join("config.json"), cfg.to_json())?;
    let arch = experiment::architecture(&data.train, cfg.model, cfg.ablation);
    let opts = TrainOptions {
        checkpoint_dir: Some(out.to_path_buf()),
        log_path: Some(out.join("log.jsonl")),
        stop_after: None,
    };
    let (state, history) = train(
        &data.train,
        arch,
        &cfg.train.schedule,
        &cfg.train.loss,
        cfg.seed,
        &opts,
    )?;
    let feat = history.epoch_means(|r| r.feat);
    if let (Some(first), Some(last)) = (feat.first(), feat.last()) {
        println!(
            "L_feat epoch {}: {:.4}, epoch {}: {:.4}",
            first.0 + 1,
            first.1,
            last.0 + 1,
            last.1
        );
    }
    println!(
        "trained {} steps, checkpoint {}",
        state.step,
        out.join("final.ssft").display()
    );
    Ok(())
}

pub struct EvalArgs<'a> {
    pub data_dir: &'a Path,
    pub checkpoint: &'a Path,
    pub out: &'a Path,
    pub modes: Vec<EvalMode>,
    pub dump_affinity: Option<PathBuf>,
}

fn report_line(r: &RetrievalReport) -> String {
    format!(
        "{:?} {} r1 {:.4} mAP {:.4} ({} queries, {} gallery)",
        r.mode,
        r.direction,
        r.rank1(),
        r.map,
        r.n_query,
        r.n_gallery
    )
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let data = Data::load(args.data_dir)?;
    let state = load_state(cfg, &data, args.checkpoint)?;
    let ev = Evaluator::new(
        &state.net,
        &state.store,
        &data.test,
        cfg.eval.direction,
        cfg.eval.k,
    )?;
    create_dir(args.out)?;
    for &mode in &args.modes {
        let report = match mode {
            EvalMode::All => ev.all_queries()?,
            EvalMode::Single => ev.single_query()?,
        };
        let stem = format!("{}_{}", mode.name(), cfg.eval.direction);
        write_file(&args.out.join(format!("{stem}.json")), report.to_json())?;
        write_file(&args.out.join(format!("{stem}_cmc.csv")), report.cmc_csv())?;
        println!("{}", report_line(&report));
    }
    if let Some(path) = &args.dump_affinity {
        let (rgb, ir) = match ev.query.modality {
            Modality::R => (&ev.query, &ev.gallery),
            Modality::I => (&ev.gallery, &ev.query),
        };
        let aff = sstn::build_affinity(rgb, ir, cfg.eval.k)?;
        write_file(path, aff.to_json())?;
        log::info!("affinity written to {}", path.display());
    }
    Ok(())
}

/// Worker pool sized by `SSFT_THREADS`, or by the number of cores when unset.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("SSFT_THREADS") {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                SsftError::config(format!(
                    "SSFT_THREADS must be a positive integer, got '{s}'"
                ))
            })?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| SsftError::config(format!("cannot start worker pool: {e}")))
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Serialize)]
struct RunRow {
    row: usize,
    seed: u64,
    rank1: f64,
    map: f64,
    single_rank1: f64,
    single_map: f64,
}

/// One line of the ablation table: medians over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub row: usize,
    pub ablation: Ablation,
    pub rank1: f64,
    pub map: f64,
}

pub fn render_table(rows: &[TableRow], seeds: usize) -> String {
    let mut s = String::from("row ");
    for name in SWITCH_NAMES {
        s.push_str(&format!(" {name:>3}"));
    }
    s.push_str("      r1     mAP\n");
    for r in rows {
        s.push_str(&format!("{:>3} ", r.row));
        for on in r.ablation.switches() {
            s.push_str(if on { "   x" } else { "    " });
        }
        s.push_str(&format!(
            "  {:>6.2}  {:>6.2}\n",
            100.0 * r.rank1,
            100.0 * r.map
        ));
    }
    s.push_str(&format!(
        "\nr1 and mAP in percent, median over {seeds} seed(s), all-queries mode.\n"
    ));
    if rows.iter().any(|r| !r.ablation.spl) {
        s.push_str(
            "Rows without SpL have no specific features; their intra-modality affinity \
             is built from shared features instead.\n",
        );
    }
    s
}

pub fn ablate(
    cfg: &RunConfig,
    data_dir: &Path,
    rows: &[usize],
    seeds: usize,
    out: &Path,
) -> Result<()> {
    if seeds == 0 {
        return Err(SsftError::config("--seeds must be >= 1"));
    }
    let ablations = rows
        .iter()
        .map(|&r| ablation::row(r))
        .collect::<Result<Vec<_>>>()?;
    for a in &ablations {
        a.validate()?;
    }
    let data = Data::load(data_dir)?;
    create_dir(out)?;
    let setup = Setup {
        train: &data.train,
        test: &data.test,
        model: cfg.model,
        schedule: &cfg.train.schedule,
        train_cfg: &cfg.train.loss,
        k: cfg.eval.k,
        direction: cfg.eval.direction,
    };
    let jobs: Vec<(usize, Ablation, u64)> = rows
        .iter()
        .zip(&ablations)
        .flat_map(|(&r, &a)| (0..seeds as u64).map(move |s| (r, a, s)))
        .map(|(r, a, s)| (r, a, cfg.seed + s))
        .collect();
    let pool = thread_pool()?;
    log::info!(
        "{} training runs on {} worker(s)",
        jobs.len(),
        pool.current_num_threads()
    );
    let results: Vec<Result<RunRow>> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|&(row, a, seed)| {
                let run = experiment::run(&setup, a, seed, &TrainOptions::default())?;
                let single = run.single_query.as_ref().unwrap_or(&run.all_queries);
                log::info!("row {row} seed {seed}: mAP {:.4}", run.all_queries.map);
                Ok(RunRow {
                    row,
                    seed,
                    rank1: run.all_queries.rank1(),
                    map: run.all_queries.map,
                    single_rank1: single.rank1(),
                    single_map: single.map,
                })
            })
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;

    let runs_path = out.join("ablation_runs.csv");
    let mut w = csv::Writer::from_path(&runs_path).map_err(|e| csv_err(&runs_path, e))?;
    for r in &runs {
        w.serialize(r).map_err(|e| csv_err(&runs_path, e))?;
    }
    w.flush().map_err(|e| SsftError::io(&runs_path, e))?;

    let table: Vec<TableRow> = rows
        .iter()
        .zip(&ablations)
        .map(|(&row, &ablation)| {
            let of_row: Vec<&RunRow> = runs.iter().filter(|r| r.row == row).collect();
            let pick =
                |f: fn(&RunRow) -> f64| median(&of_row.iter().map(|r| f(r)).collect::<Vec<_>>());
            TableRow {
                row,
                ablation,
                rank1: pick(|r| r.rank1),
                map: pick(|r| r.map),
            }
        })
        .collect();
    let table_path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&table_path).map_err(|e| csv_err(&table_path, e))?;
    let mut header = vec!["row".to_string()];
    header.extend(SWITCH_NAMES.iter().map(|s| s.to_string()));
    header.extend(["seeds", "rank1", "map"].map(String::from));
    w.write_record(&header)
        .map_err(|e| csv_err(&table_path, e))?;
    for t in &table {
        let mut rec = vec![t.row.to_string()];
        rec.extend(
            t.ablation
                .switches()
                .iter()
                .map(|&on| u8::from(on).to_string()),
        );
        rec.extend([seeds.to_string(), t.rank1.to_string(), t.map.to_string()]);
        w.write_record(&rec).map_err(|e| csv_err(&table_path, e))?;
    }
    w.flush().map_err(|e| SsftError::io(&table_path, e))?;

    let text = render_table(&table, seeds);
    write_file(&out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> SsftError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SsftError::io(path, io),
        other => SsftError::Schema(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Serialize)]
struct SweepRow {
    n: usize,
    map: f64,
    cmc1: f64,
}

pub struct SweepArgs<'a> {
    pub data_dir: &'a Path,
    pub checkpoint: &'a Path,
    pub out: &'a Path,
    pub sizes: Vec<SizeSpec>,
    pub trials: usize,
}

pub fn sweep_aux(cfg: &RunConfig, args: &SweepArgs) -> Result<()> {
    if args.trials == 0 {
        return Err(SsftError::config("--trials must be >= 1"));
    }
    let data = Data::load(args.data_dir)?;
    let state = load_state(cfg, &data, args.checkpoint)?;
    let ev = Evaluator::new(
        &state.net,
        &state.store,
        &data.test,
        cfg.eval.direction,
        cfg.eval.k,
    )?;
    let nq = ev.query.len();
    let mut sizes: Vec<usize> = args.sizes.iter().map(|s| s.resolve(nq)).collect();
    sizes.sort_unstable();
    sizes.dedup();
    create_dir(args.out)?;
    let pool = thread_pool()?;
    let reports: Vec<Result<RetrievalReport>> = pool.install(|| {
        use rayon::prelude::*;
        sizes
            .par_iter()
            .map(|&n| ev.aux_size(n, args.trials, cfg.seed))
            .collect()
    });
    let path = args.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    for (&n, report) in sizes.iter().zip(reports) {
        let report = report?;
        println!("n {n:>4}  mAP {:.4}  r1 {:.4}", report.map, report.rank1());
        w.serialize(SweepRow {
            n,
            map: report.map,
            cmc1: report.rank1(),
        })
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| SsftError::io(&path, e))
}
