//! Monte Carlo replications of block online EM and the files they produce.
//!
//! Replication `r` draws its data from `stream(master_seed, r, Data, 0)`, its
//! block-`n` particle filter from `stream(master_seed, r, Filter, n)` and any
//! random initial condition from `stream(master_seed, r, Init, 0)`. Outputs
//! are therefore a pure function of the configuration, whatever the number
//! of workers.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use pboem_core::models::slam::{
    LoopController, SlamBlockEstimator, SlamMap, SlamObservation, SlamSimulator, SlamState, SlamWorld,
};
use pboem_core::models::slam::{ControlNoise, SensorNoise, Vehicle};
use pboem_core::models::{FiniteHmm, LgssmModel, Simulate, SimulatedStream, SvModel, SvParams};
use pboem_core::oracles::{exact_statistic_finite, exact_statistic_lgssm};
use pboem_core::rng::{stream, Purpose};
use pboem_core::{
    run, BlockSchedule, Bootstrap, ExactBlockEstimator, Parameter, ParticleBlockEstimator, Real,
    RunOptions, SufficientStatistic, TraceRecord,
};

use crate::config::{EStep, ExperimentConfig, ModelId, SlamSection};
use crate::output::{numbered, real, summary_fields, summary_header, write_trace, CsvFile};
use crate::stats::{mean, Summary};
use crate::CliError;

/// `records[0]` holds `θ_0`; `records[n]` is block `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationTrace {
    pub replication: u64,
    pub records: Vec<TraceRecord<f64>>,
}

fn options(cfg: &ExperimentConfig) -> RunOptions {
    RunOptions {
        averaging_start: cfg.experiment.averaging_start,
        strict: cfg.experiment.strict,
    }
}

type ExactFn<M> = fn(
    &M,
    &Parameter<f64>,
    &[<M as pboem_core::StateSpaceModel<f64>>::Obs],
) -> pboem_core::Result<SufficientStatistic<f64>>;

fn run_model<M>(
    cfg: &ExperimentConfig,
    schedule: &BlockSchedule,
    rep: u64,
    model: M,
    truth: Parameter<f64>,
    theta0: Parameter<f64>,
    exact: Option<ExactFn<M>>,
) -> pboem_core::Result<Vec<TraceRecord<f64>>>
where
    M: Simulate<f64> + Clone,
    M::Obs: Clone,
    M::State: Clone,
{
    let seed = cfg.experiment.master_seed;
    let data = SimulatedStream::new(&model, truth, stream(seed, rep, Purpose::Data, 0));
    match exact {
        Some(f) => {
            let mut est = ExactBlockEstimator::new(model.clone(), f);
            run(&mut est, schedule, theta0, data, &options(cfg))
        }
        None => {
            let mut est = ParticleBlockEstimator::new(model.clone(), Bootstrap, cfg.block_init(), seed, rep);
            run(&mut est, schedule, theta0, data, &options(cfg))
        }
    }
}

fn finite_model(cfg: &ExperimentConfig) -> pboem_core::Result<(FiniteHmm<f64>, Parameter<f64>, Parameter<f64>)> {
    let f = cfg.finite.as_ref().expect("validated");
    let k = f.initial.len();
    let m = FiniteHmm::new(k, f.truth_emission[0].len(), f.initial.clone())?;
    let truth = m.parameter(&f.truth_transition, &f.truth_emission)?;
    let theta0 = m.parameter(&f.theta0_transition, &f.theta0_emission)?;
    Ok((m, truth, theta0))
}

/// Runs replication `rep` of a non-SLAM experiment under `schedule`.
pub fn run_replication(
    cfg: &ExperimentConfig,
    schedule: &BlockSchedule,
    rep: u64,
) -> pboem_core::Result<ReplicationTrace> {
    let exact = cfg.experiment.e_step == EStep::Exact;
    let records = match cfg.experiment.model {
        ModelId::Sv => {
            let s = cfg.sv.as_ref().expect("validated");
            let m = SvModel::new();
            let p = |v: [f64; 3]| m.parameter(SvParams::new(v[0], v[1], v[2])?);
            let (truth, theta0) = (p(s.truth)?, p(s.theta0)?);
            run_model(cfg, schedule, rep, m, truth, theta0, None)?
        }
        ModelId::Lgssm => {
            let s = cfg.lgssm.as_ref().expect("validated");
            let m = LgssmModel::new(s.init_mean, s.init_var)?;
            let truth = m.parameter(s.truth[0], s.truth[1], s.truth[2])?;
            let theta0 = m.parameter(s.theta0[0], s.theta0[1], s.theta0[2])?;
            let f: Option<ExactFn<LgssmModel<f64>>> = exact.then_some(exact_statistic_lgssm);
            run_model(cfg, schedule, rep, m, truth, theta0, f)?
        }
        ModelId::Finite => {
            let (m, truth, theta0) = finite_model(cfg)?;
            let f: Option<ExactFn<FiniteHmm<f64>>> = exact.then_some(exact_statistic_finite);
            run_model(cfg, schedule, rep, m, truth, theta0, f)?
        }
        ModelId::Slam => return slam_replication(cfg, schedule, rep).map(|r| r.trace),
    };
    Ok(ReplicationTrace { replication: rep, records })
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool")
}

/// Runs every replication on `workers` threads; results come back in
/// replication order. The first failing replication (by index) is reported.
pub fn replicate<T, G>(cfg: &ExperimentConfig, job: G) -> Result<Vec<T>, CliError>
where
    T: Send,
    G: Fn(u64) -> pboem_core::Result<T> + Sync,
{
    let n = cfg.experiment.n_replications as u64;
    let results: Vec<pboem_core::Result<T>> =
        pool(cfg.experiment.workers).install(|| (0..n).into_par_iter().map(&job).collect());
    results
        .into_iter()
        .enumerate()
        .map(|(r, res)| res.map_err(|source| CliError::Run { replication: r as u64, source }))
        .collect()
}

fn schedule_of(cfg: &ExperimentConfig) -> Result<BlockSchedule, CliError> {
    cfg.schedule().map_err(|(_, m)| {
        CliError::Config(crate::config::ConfigError { path: None, line: None, message: m })
    })
}

/// Per-block summaries over replications, for `θ` and `θ̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub block: usize,
    pub elapsed: usize,
    pub tau: usize,
    pub particles: usize,
    pub theta: Vec<Summary>,
    pub theta_avg: Vec<Summary>,
}

pub fn aggregate(traces: &[ReplicationTrace]) -> Vec<Aggregate> {
    let first = &traces[0].records;
    let d = first[0].theta.len();
    (1..first.len())
        .map(|n| {
            let col = |i: usize, avg: bool| -> Vec<f64> {
                traces
                    .iter()
                    .map(|t| if avg { t.records[n].theta_avg[i] } else { t.records[n].theta[i] })
                    .collect()
            };
            Aggregate {
                block: first[n].block,
                elapsed: first[n].elapsed,
                tau: first[n].tau,
                particles: first[n].particles,
                theta: (0..d).map(|i| Summary::of(&col(i, false))).collect(),
                theta_avg: (0..d).map(|i| Summary::of(&col(i, true))).collect(),
            }
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })
}

fn write_traces(dir: &Path, seed: u64, traces: &[ReplicationTrace]) -> Result<Vec<PathBuf>, CliError> {
    let mut paths = Vec::new();
    for t in traces {
        let p = dir.join(format!("trace_rep{:03}.csv", t.replication));
        write_trace(&p, seed, t.replication, &t.records)?;
        paths.push(p);
    }
    Ok(paths)
}

fn write_aggregate(path: &Path, seed: u64, n_reps: usize, agg: &[Aggregate]) -> Result<(), CliError> {
    let d = agg.first().map_or(0, |a| a.theta.len());
    let mut header: Vec<String> = ["block", "T_n", "tau_n", "N_n"].iter().map(|s| s.to_string()).collect();
    header.extend(summary_header("theta", d));
    header.extend(summary_header("theta_avg", d));
    let comments = vec![format!("master_seed = {seed}"), format!("replications = {n_reps}")];
    let mut f = CsvFile::create(path, &comments, &header)?;
    for a in agg {
        let mut row = vec![
            a.block.to_string(),
            a.elapsed.to_string(),
            a.tau.to_string(),
            a.particles.to_string(),
        ];
        row.extend(summary_fields(&a.theta));
        row.extend(summary_fields(&a.theta_avg));
        f.row(&row)?;
    }
    f.finish()
}

pub struct ExperimentOutput {
    pub traces: Vec<ReplicationTrace>,
    pub aggregate: Vec<Aggregate>,
    pub files: Vec<PathBuf>,
}

/// Runs all replications, then writes one trace per replication and
/// `aggregate.csv`. Files are written only after every replication finished.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, CliError> {
    if cfg.experiment.model == ModelId::Slam {
        let out = slam_experiment(cfg)?;
        return Ok(ExperimentOutput {
            aggregate: aggregate(&out.traces),
            traces: out.traces,
            files: out.files,
        });
    }
    let schedule = schedule_of(cfg)?;
    info!(
        "{} replications of {} blocks ({} observations each)",
        cfg.experiment.n_replications,
        schedule.n_blocks(),
        schedule.total_observations()
    );
    let traces = replicate(cfg, |r| run_replication(cfg, &schedule, r))?;
    let agg = aggregate(&traces);
    let dir = &cfg.experiment.output_dir;
    create_dir(dir)?;
    let seed = cfg.experiment.master_seed;
    let mut files = write_traces(dir, seed, &traces)?;
    let p = dir.join("aggregate.csv");
    write_aggregate(&p, seed, traces.len(), &agg)?;
    files.push(p);
    Ok(ExperimentOutput { traces, aggregate: agg, files })
}

/// Per-rule, per-block variance of one coordinate across replications.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRow {
    pub block: usize,
    pub elapsed: usize,
    pub tau: usize,
    /// `(N_n, var θ_n, var θ̃_n)` for each rule.
    pub rules: Vec<(usize, f64, f64)>,
}

/// Runs the experiment once per particle rule (same data and seeds) and
/// writes `variance_study.csv`.
pub fn variance_study(cfg: &ExperimentConfig) -> Result<Vec<VarianceRow>, CliError> {
    let study = cfg.variance_study.as_ref().ok_or_else(|| {
        CliError::Config(crate::config::ConfigError {
            path: None,
            line: None,
            message: "variance-study needs a [variance_study] section".into(),
        })
    })?;
    if cfg.experiment.model == ModelId::Slam {
        return Err(CliError::Config(crate::config::ConfigError {
            path: None,
            line: None,
            message: "variance-study does not support the slam model".into(),
        }));
    }
    let j = study.coordinate - 1;
    let base = schedule_of(cfg)?;
    let mut per_rule = Vec::new();
    for spec in &study.rules {
        let rule = spec.rule().expect("validated");
        let s = BlockSchedule::new(cfg.schedule.c_tau, cfg.schedule.a, rule, base.n_blocks())
            .expect("validated schedule");
        per_rule.push(replicate(cfg, |r| run_replication(cfg, &s, r))?);
    }
    let blocks = base.n_blocks();
    let rows: Vec<VarianceRow> = (1..=blocks)
        .map(|n| {
            let head = &per_rule[0][0].records[n];
            VarianceRow {
                block: n,
                elapsed: head.elapsed,
                tau: head.tau,
                rules: per_rule
                    .iter()
                    .map(|traces| {
                        let plain: Vec<f64> = traces.iter().map(|t| t.records[n].theta[j]).collect();
                        let avg: Vec<f64> = traces.iter().map(|t| t.records[n].theta_avg[j]).collect();
                        (traces[0].records[n].particles, crate::stats::variance(&plain), crate::stats::variance(&avg))
                    })
                    .collect(),
            }
        })
        .collect();
    let dir = &cfg.experiment.output_dir;
    create_dir(dir)?;
    let mut header: Vec<String> = ["block", "T_n", "tau_n"].iter().map(|s| s.to_string()).collect();
    for i in 1..=study.rules.len() {
        header.push(format!("N_n_rule{i}"));
        header.push(format!("var_theta_rule{i}"));
        header.push(format!("var_theta_avg_rule{i}"));
    }
    let mut comments = vec![
        format!("master_seed = {}", cfg.experiment.master_seed),
        format!("replications = {}", cfg.experiment.n_replications),
        format!("coordinate = {}", study.coordinate),
    ];
    for (i, r) in study.rules.iter().enumerate() {
        comments.push(format!("rule{} = {:?}", i + 1, r.rule().expect("validated")));
    }
    let mut f = CsvFile::create(&dir.join("variance_study.csv"), &comments, &header)?;
    for row in &rows {
        let mut fields = vec![row.block.to_string(), row.elapsed.to_string(), row.tau.to_string()];
        for (n, vp, va) in &row.rules {
            fields.extend([n.to_string(), real(*vp), real(*va)]);
        }
        f.row(&fields)?;
    }
    f.finish()?;
    Ok(rows)
}

/// One SLAM replication.
#[derive(Debug, Clone)]
pub struct SlamRun {
    pub trace: ReplicationTrace,
    pub truth: SlamMap<f64>,
    pub true_path: Vec<SlamState<f64>>,
    /// Filter mean pose after every observation.
    pub path: Vec<SlamState<f64>>,
}

impl SlamRun {
    /// Mean distance between landmarks and their estimates after block `n`.
    pub fn mean_error(&self, n: usize) -> f64 {
        let est = SlamMap::from_flat(&self.trace.records[n].theta).expect("valid map");
        mean(&self.truth.distances(&est))
    }

    pub fn final_map(&self) -> SlamMap<f64> {
        SlamMap::from_flat(&self.trace.records.last().expect("θ_0 row").theta).expect("valid map")
    }
}

pub fn slam_truth(s: &SlamSection) -> pboem_core::Result<SlamMap<f64>> {
    SlamMap::random(s.q, s.side, &mut stream(s.map_seed, 0, Purpose::Init, 0))
}

pub fn slam_world(s: &SlamSection) -> pboem_core::Result<SlamWorld<f64>> {
    let controller = LoopController::square(s.side, s.margin, s.speed);
    Ok(SlamWorld {
        map: slam_truth(s)?,
        vehicle: Vehicle::new(s.dt, s.wheelbase)?,
        control_noise: ControlNoise { sigma_v: s.control_noise[0], sigma_psi: s.control_noise[1] },
        sensor_noise: SensorNoise {
            sigma_r: s.sensor_noise[0],
            sigma_b: s.sensor_noise[1],
            rho: s.sensor_noise[2],
        },
        sensing_radius: s.sensing_radius,
        start: controller.start_pose(),
        controller,
    })
}

/// Simulated poses and observations of replication `rep`.
pub fn slam_data(
    cfg: &ExperimentConfig,
    len: usize,
    rep: u64,
) -> pboem_core::Result<(Vec<SlamState<f64>>, Vec<SlamObservation<f64>>)> {
    let s = cfg.slam.as_ref().expect("validated");
    let sim = SlamSimulator::new(
        slam_world(s)?,
        stream(cfg.experiment.master_seed, rep, Purpose::Data, 0),
    );
    let mut poses = Vec::with_capacity(len);
    let mut obs = Vec::with_capacity(len);
    for step in sim.take(len) {
        let (x, y) = step?;
        poses.push(x);
        obs.push(y);
    }
    Ok((poses, obs))
}

pub fn slam_replication(
    cfg: &ExperimentConfig,
    schedule: &BlockSchedule,
    rep: u64,
) -> pboem_core::Result<SlamRun> {
    let s = cfg.slam.as_ref().expect("validated");
    let seed = cfg.experiment.master_seed;
    let truth = slam_truth(s)?;
    let mut rng = stream(seed, rep, Purpose::Init, 0);
    let start: Vec<[f64; 2]> = truth
        .landmarks()
        .iter()
        .map(|p| {
            let e0 = f64::standard_normal(&mut rng);
            let e1 = f64::standard_normal(&mut rng);
            [p[0] + s.init_map_sd * e0, p[1] + s.init_map_sd * e1]
        })
        .collect();
    let start = SlamMap::new(start)?;
    let (true_path, obs) = slam_data(cfg, schedule.total_observations(), rep)?;
    let mut est = SlamBlockEstimator::new(cfg.slam_filter_config()?, s.q, seed, rep)?;
    let theta0 = Parameter::new(start.to_flat(), pboem_core::BlockEstimator::parameter_box(&est))?;
    let records = run(&mut est, schedule, theta0, obs.iter(), &options(cfg))?;
    Ok(SlamRun {
        trace: ReplicationTrace { replication: rep, records },
        truth,
        true_path,
        path: est.path().to_vec(),
    })
}

pub struct SlamOutput {
    pub runs: Vec<SlamRun>,
    pub traces: Vec<ReplicationTrace>,
    pub files: Vec<PathBuf>,
}

fn pose_fields(x: &SlamState<f64>) -> [String; 3] {
    [real(x.x1), real(x.x2), real(x.x3)]
}

/// Traces, estimated and true paths, final maps, a per-landmark
/// distance-to-truth table and the mean map error per block.
pub fn slam_experiment(cfg: &ExperimentConfig) -> Result<SlamOutput, CliError> {
    let schedule = schedule_of(cfg)?;
    let runs = replicate(cfg, |r| slam_replication(cfg, &schedule, r))?;
    let dir = &cfg.experiment.output_dir;
    create_dir(dir)?;
    let seed = cfg.experiment.master_seed;
    let traces: Vec<ReplicationTrace> = runs.iter().map(|r| r.trace.clone()).collect();
    let mut files = write_traces(dir, seed, &traces)?;
    let agg_path = dir.join("aggregate.csv");
    write_aggregate(&agg_path, seed, traces.len(), &aggregate(&traces))?;
    files.push(agg_path);
    let seed_line = vec![format!("master_seed = {seed}")];
    for run in &runs {
        let rep = run.trace.replication;
        let p = dir.join(format!("path_rep{rep:03}.csv"));
        let header: Vec<String> = ["t", "x1", "x2", "x3", "true_x1", "true_x2", "true_x3"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut f = CsvFile::create(&p, &seed_line, &header)?;
        for (t, (e, x)) in run.path.iter().zip(&run.true_path).enumerate() {
            let mut row = vec![(t + 1).to_string()];
            row.extend(pose_fields(e));
            row.extend(pose_fields(x));
            f.row(&row)?;
        }
        f.finish()?;
        files.push(p);
        let p = dir.join(format!("map_rep{rep:03}.csv"));
        let header: Vec<String> = ["landmark", "x", "y", "true_x", "true_y", "distance"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut f = CsvFile::create(&p, &seed_line, &header)?;
        let est = run.final_map();
        let dist = run.truth.distances(&est);
        for i in 0..est.q() {
            let (e, t) = (est.landmark(i), run.truth.landmark(i));
            f.row(&[(i + 1).to_string(), real(e[0]), real(e[1]), real(t[0]), real(t[1]), real(dist[i])])?;
        }
        f.finish()?;
        files.push(p);
    }
    let q = runs[0].truth.q();
    let p = dir.join("landmark_errors.csv");
    let mut header = vec!["landmark".to_string(), "true_x".into(), "true_y".into(), "mean_distance".into()];
    header.extend(["median", "q25", "q75", "var"].iter().map(|s| format!("distance_{s}")));
    let mut f = CsvFile::create(&p, &seed_line, &header)?;
    let finals: Vec<Vec<f64>> = runs.iter().map(|r| r.truth.distances(&r.final_map())).collect();
    for i in 0..q {
        let d: Vec<f64> = finals.iter().map(|v| v[i]).collect();
        let t = runs[0].truth.landmark(i);
        let mut row = vec![(i + 1).to_string(), real(t[0]), real(t[1]), real(mean(&d))];
        row.extend(summary_fields(&[Summary::of(&d)]));
        f.row(&row)?;
    }
    f.finish()?;
    files.push(p);
    let p = dir.join("map_error.csv");
    let mut header: Vec<String> = ["block", "T_n"].iter().map(|s| s.to_string()).collect();
    header.extend(numbered("mean_error_rep", runs.len()));
    header.push("mean_error_over_reps".into());
    let mut f = CsvFile::create(&p, &seed_line, &header)?;
    for n in 1..=schedule.n_blocks() {
        let errs: Vec<f64> = runs.iter().map(|r| r.mean_error(n)).collect();
        let mut row = vec![n.to_string(), runs[0].trace.records[n].elapsed.to_string()];
        row.extend(errs.iter().map(|e| real(*e)));
        row.push(real(mean(&errs)));
        f.row(&row)?;
    }
    f.finish()?;
    files.push(p);
    Ok(SlamOutput { runs, traces, files })
}

fn write_scalar_path<M, X, Y>(
    path: &Path,
    seed: u64,
    model: &M,
    truth: Parameter<f64>,
    len: usize,
    rep: u64,
    fx: X,
    fy: Y,
) -> Result<(), CliError>
where
    M: Simulate<f64>,
    X: Fn(&M::State) -> String,
    Y: Fn(&M::Obs) -> String,
{
    let mut rng = stream(seed, rep, Purpose::Data, 0);
    let mut x = model.sample_initial(&truth, &mut rng);
    let comments = vec![format!("master_seed = {seed}"), format!("replication = {rep}"), format!("x_0 = {}", fx(&x))];
    let header = vec!["t".to_string(), "x".into(), "y".into()];
    let mut f = CsvFile::create(path, &comments, &header)?;
    for t in 1..=len {
        let (xn, y) = model.simulate_step(&truth, &x, t, &mut rng);
        f.row(&[t.to_string(), fx(&xn), fy(&y)])?;
        x = xn;
    }
    f.finish()
}

/// Writes the observation streams the `run` command would consume:
/// `observations_repNNN.csv`, one row per time step (per reading for SLAM).
pub fn simulate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let schedule = schedule_of(cfg)?;
    let len = schedule.total_observations();
    let seed = cfg.experiment.master_seed;
    let dir = &cfg.experiment.output_dir;
    create_dir(dir)?;
    let run_err = |rep: u64| move |source| CliError::Run { replication: rep, source };
    let mut files = Vec::new();
    for rep in 0..cfg.experiment.n_replications as u64 {
        let p = dir.join(format!("observations_rep{rep:03}.csv"));
        match cfg.experiment.model {
            ModelId::Sv => {
                let s = cfg.sv.as_ref().expect("validated");
                let m = SvModel::new();
                let truth = SvParams::new(s.truth[0], s.truth[1], s.truth[2])
                    .and_then(|p| m.parameter(p))
                    .map_err(run_err(rep))?;
                write_scalar_path(&p, seed, &m, truth, len, rep, |x| real(*x), |y| real(*y))?;
            }
            ModelId::Lgssm => {
                let s = cfg.lgssm.as_ref().expect("validated");
                let m = LgssmModel::new(s.init_mean, s.init_var).map_err(run_err(rep))?;
                let truth = m.parameter(s.truth[0], s.truth[1], s.truth[2]).map_err(run_err(rep))?;
                write_scalar_path(&p, seed, &m, truth, len, rep, |x| real(*x), |y| real(*y))?;
            }
            ModelId::Finite => {
                let (m, truth, _) = finite_model(cfg).map_err(run_err(rep))?;
                write_scalar_path(&p, seed, &m, truth, len, rep, |x| x.to_string(), |y| y.to_string())?;
            }
            ModelId::Slam => {
                let (poses, obs) = slam_data(cfg, len, rep).map_err(run_err(rep))?;
                let header: Vec<String> =
                    ["t", "x1", "x2", "x3", "v", "psi", "landmark", "range", "bearing"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect();
                let comments = vec![format!("master_seed = {seed}"), format!("replication = {rep}")];
                let mut f = CsvFile::create(&p, &comments, &header)?;
                for (t, (x, y)) in poses.iter().zip(&obs).enumerate() {
                    let mut head = vec![(t + 1).to_string()];
                    head.extend(pose_fields(x));
                    head.extend([real(y.control.v), real(y.control.psi)]);
                    if y.readings.is_empty() {
                        let mut row = head.clone();
                        row.extend([String::new(), String::new(), String::new()]);
                        f.row(&row)?;
                    }
                    for r in &y.readings {
                        let mut row = head.clone();
                        row.extend([(r.landmark + 1).to_string(), real(r.range), real(r.bearing)]);
                        f.row(&row)?;
                    }
                }
                f.finish()?;
            }
        }
        files.push(p);
    }
    Ok(files)
}
