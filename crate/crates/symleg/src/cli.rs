//! Command line front end.
//!
//! Subcommands cover the full workflow: `check` verifies the physical and
//! symmetry properties of a robot's analytic dynamics, `gen` produces labeled
//! datasets from climbing scenarios, `train` fits one model, `eval` scores
//! checkpoints on a split protocol, `sim` runs closed-loop tracking, and
//! `sweep` trains a model grid for sample-efficiency comparisons.
//!
//! Exit codes: 0 on success, 1 when a verified property fails, 2 for
//! configuration or input errors. `SYMLEG_THREADS` sets worker threads for
//! generation and training; results are byte-identical for any value.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_dataset, load_dataset, make_splits, save_dataset, scenario_grid, sha256_hex,
    write_atomic, Dataset, Scenario, SplitProtocol, StepDirection, RATIO_GRID,
};
use crate::dynamics::{
    bias_force, forward_dynamics, inverse_dynamics, mass_matrix,
    sample_contact_consistent_state,
};
use crate::error::{Error, Result};
use crate::models::{train, torque_rmse, Checkpoint, Model, ModelFamily, ModelSpec, TrainConfig};
use crate::repr::{StructuredSample, TargetMode};
use crate::robot::{load_robot, make_robot, RobotFamily, RobotModel, RobotState};
use crate::sim::{rollout, Controller, SimConfig, SimResult};
use crate::symmetry::{
    oracle_equivariance_residual, shift_state_raw, shift_torques_raw, GroupElement,
};

#[derive(Parser)]
#[command(name = "symleg", version, about = "Symmetry-preserving inverse dynamics toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify oracle symmetry and rigid-body identities on random states.
    Check(CheckArgs),
    /// Generate labeled datasets from a scenario grid.
    Gen(GenArgs),
    /// Train one model on a dataset.
    Train(TrainArgs),
    /// Score checkpoints on a dataset under a split protocol.
    Eval(EvalArgs),
    /// Closed-loop tracking simulation against a scenario reference.
    Sim(SimArgs),
    /// Train a model grid over training ratios or the orbit protocol.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct RobotArg {
    /// Robot family name (magneto4, hexa6, nona9) or a robot definition file.
    #[arg(long)]
    robot: String,
}

impl RobotArg {
    fn resolve(&self) -> Result<RobotModel> {
        match RobotFamily::from_str(&self.robot) {
            Ok(fam) => Ok(make_robot(fam)),
            Err(_) if Path::new(&self.robot).exists() => load_robot(Path::new(&self.robot)),
            Err(e) => Err(e),
        }
    }
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    robot: RobotArg,
    /// Randomized instances per property; 0 passes vacuously.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negative control: relabel by single raw legs instead of the robot's
    /// symmetry step. Expected to fail on robots whose base repeats less
    /// often than their legs.
    #[arg(long)]
    raw_leg_shift: bool,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    robot: RobotArg,
    /// Scenario grid description; defaults cover four inclinations.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    /// Output directory for the dataset files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    robot: RobotArg,
    /// Dataset produced by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Model family: ffnn, sdnn, sdgnn, typical_gnn.
    #[arg(long)]
    model: ModelFamily,
    /// Split protocol: random, orbit, or ratio:<fraction>.
    #[arg(long, default_value = "random")]
    split: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr0: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr1: f64,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path; the epoch log lands next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    robot: RobotArg,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoints to score; repeatable.
    #[arg(long = "ckpt", required = true)]
    ckpts: Vec<PathBuf>,
    #[arg(long, default_value = "random")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Additionally break the test split down by scenario.
    #[arg(long)]
    per_scenario: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    robot: RobotArg,
    /// Controller: oracle, pd, learned, learned_pd.
    #[arg(long)]
    controller: String,
    /// Checkpoint for the learned controllers.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Scenario file; a vertical-wall walk by default.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long, default_value_t = 1000.0)]
    rate: f64,
    #[arg(long, default_value_t = 5.0)]
    kp: f64,
    #[arg(long, default_value_t = 0.5)]
    kd: f64,
    #[arg(long, default_value_t = 100.0)]
    oracle_kp: f64,
    #[arg(long, default_value_t = 20.0)]
    oracle_kd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tracking log CSV; a summary lands next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    robot: RobotArg,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated model families.
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<ModelFamily>,
    /// Protocol: ratio or orbit.
    #[arg(long, default_value = "ratio")]
    protocol: String,
    /// Training ratios for the ratio protocol.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Check(a) => cmd_check(&a),
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sim(a) => cmd_sim(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn thread_count() -> usize {
    std::env::var("SYMLEG_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Twelve hex characters identifying a configuration, stamped onto every
/// result row so mixed CSV files stay attributable.
fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    sha256_hex(json.as_bytes())[..12].to_string()
}

fn parse_protocol(s: &str) -> Result<SplitProtocol> {
    match s {
        "random" => Ok(SplitProtocol::Random),
        "orbit" => Ok(SplitProtocol::OrbitHoldout),
        _ => match s.strip_prefix("ratio:") {
            Some(r) => Ok(SplitProtocol::RatioSweep(r.parse::<f64>().map_err(|_| {
                Error::Config(format!("bad ratio in split spec {s:?}"))
            })?)),
            None => Err(Error::Config(format!(
                "unknown split {s:?}; use random, orbit, or ratio:<fraction>"
            ))),
        },
    }
}

struct PropertyReport {
    name: &'static str,
    tol: f64,
    max: f64,
    ok: bool,
}

/// Runs every physical and symmetry property over `trials` random states.
/// `raw_shift` swaps the symmetry-step relabeling for single-leg shifts,
/// which breaks equivariance whenever the base repeats less often.
fn run_properties(
    model: &RobotModel,
    trials: usize,
    seed: u64,
    raw_shift: bool,
) -> Result<Vec<PropertyReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut spd_ok = true;

    let mut gravity = 0.0_f64;
    let mut translation = 0.0_f64;
    let mut shift = 0.0_f64;
    let mut symmetric = 0.0_f64;
    let mut two_route = 0.0_f64;
    let mut roundtrip = 0.0_f64;
    let mut free_fall = 0.0_f64;

    for _ in 0..trials {
        let state = sample_contact_consistent_state(model, &mut rng);

        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let g = GroupElement::GravityRotation { angle: theta };
        gravity = gravity.max(oracle_equivariance_residual(model, &g, &state)?);

        let offset = crate::spatial::Vec3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let g = GroupElement::Translation { offset };
        translation = translation.max(oracle_equivariance_residual(model, &g, &state)?);

        if raw_shift {
            let oracle = |s: &RobotState| -> Result<_> {
                Ok(inverse_dynamics(model, s, &s.attached_legs())?.torques)
            };
            let lhs = oracle(&shift_state_raw(model, 1, &state))?;
            let rhs = shift_torques_raw(model, 1, &oracle(&state)?);
            let r = lhs
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            shift = shift.max(r);
        } else {
            let steps = rng.random_range(1..model.symmetry_order().max(2)) as i64;
            let g = GroupElement::LegShift { steps };
            shift = shift.max(oracle_equivariance_residual(model, &g, &state)?);
        }

        let m = mass_matrix(model, &state);
        symmetric = symmetric.max((&m - m.transpose()).amax());
        spd_ok &= m.clone().cholesky().is_some();

        let b = bias_force(model, &state);
        let ud = nalgebra::DVector::from_vec(state.gen_acceleration());
        let recursive = crate::dynamics::generalized_force(model, &state);
        two_route = two_route.max((&m * &ud + &b - recursive).amax());

        let attached = state.attached_legs();
        let sol = inverse_dynamics(model, &state, &attached)?;
        let fd = forward_dynamics(model, &state, &sol.torques, &attached)?;
        let want = state.gen_acceleration();
        for (i, w) in want.iter().enumerate() {
            roundtrip = roundtrip.max((fd.accel[i] - w).abs());
        }

        let mut fall = RobotState::zero(model);
        for v in fall.q.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        fall.adhesion = vec![false; model.n_legs];
        fall.contact = vec![false; model.n_legs];
        fall.a_b = fall.gravity_body();
        let tau = inverse_dynamics(model, &fall, &[])?.torques;
        free_fall = free_fall.max(tau.data.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    }

    let shift_name =
        if raw_shift { "oracle_raw_leg_shift_equivariance" } else { "oracle_leg_shift_equivariance" };
    let rows: [(&'static str, f64, f64); 7] = [
        ("oracle_gravity_rotation_invariance", 1e-8, gravity),
        ("oracle_translation_invariance", 1e-8, translation),
        (shift_name, 1e-8, shift),
        ("mass_matrix_symmetry", 1e-8, symmetric),
        ("recursive_vs_composite_dynamics", 1e-8, two_route),
        ("inverse_forward_roundtrip", 1e-6, roundtrip),
        ("free_fall_needs_no_torque", 1e-8, free_fall),
    ];
    for (name, tol, max) in rows {
        reports.push(PropertyReport { name, tol, max, ok: trials == 0 || max < tol });
    }
    reports.insert(
        4,
        PropertyReport {
            name: "mass_matrix_positive_definite",
            tol: 0.0,
            max: if spd_ok { 0.0 } else { 1.0 },
            ok: trials == 0 || spd_ok,
        },
    );
    Ok(reports)
}

fn cmd_check(args: &CheckArgs) -> Result<i32> {
    let model = args.robot.resolve()?;
    if args.trials == 0 {
        println!("warning: 0 trials requested; properties pass vacuously");
    }
    let reports = run_properties(&model, args.trials, args.seed, args.raw_leg_shift)?;
    let mut failed = false;
    for r in &reports {
        let verdict = if r.ok { "pass" } else { "FAIL" };
        failed |= !r.ok;
        println!(
            "{verdict}  {:<36} max {:>9.2e}  (tol {:.0e}, {} trials)",
            r.name, r.max, r.tol, args.trials
        );
    }
    println!(
        "{}: {} of {} properties hold on {}",
        if failed { "FAIL" } else { "ok" },
        reports.iter().filter(|r| r.ok).count(),
        reports.len(),
        model.name
    );
    Ok(if failed { 1 } else { 0 })
}

/// Scenario grid description accepted by `gen`. Every field has a default,
/// so a config file only needs the entries it overrides.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub inclinations_deg: Vec<f64>,
    pub yaws_deg: Vec<f64>,
    pub directions: Vec<StepDirection>,
    pub cycles: usize,
    pub sample_rate_hz: f64,
    pub swing_period: f64,
    pub swing_height: f64,
    pub goal_offset: f64,
    pub dwell: f64,
    pub expand_orbits: bool,
    pub modes: Vec<TargetMode>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            inclinations_deg: vec![0.0, 60.0, 90.0, 150.0],
            yaws_deg: vec![0.0, 25.0],
            directions: vec![StepDirection::Forward, StepDirection::Left],
            cycles: 1,
            sample_rate_hz: 100.0,
            swing_period: 0.5,
            swing_height: 0.05,
            goal_offset: 0.1,
            dwell: 0.25,
            expand_orbits: true,
            modes: vec![TargetMode::Accel, TargetMode::NextState],
        }
    }
}

impl GenConfig {
    pub fn scenarios(&self, model: &RobotModel, base_seed: u64) -> Vec<Scenario> {
        scenario_grid(model, &self.inclinations_deg, &self.yaws_deg, &self.directions, base_seed)
            .into_iter()
            .map(|mut sc| {
                sc.cycles = self.cycles;
                sc.sample_rate_hz = self.sample_rate_hz;
                sc.swing_period = self.swing_period;
                sc.swing_height = self.swing_height;
                sc.goal_offset = self.goal_offset;
                sc.dwell = self.dwell;
                sc
            })
            .collect()
    }
}

fn mode_tag(mode: TargetMode) -> &'static str {
    match mode {
        TargetMode::Accel => "accel",
        TargetMode::NextState => "next_state",
    }
}

fn cmd_gen(args: &GenArgs) -> Result<i32> {
    let model = args.robot.resolve()?;
    let cfg: GenConfig = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => GenConfig::default(),
    };
    let scenarios = cfg.scenarios(&model, args.seed);
    if scenarios.is_empty() {
        return Err(Error::Config("scenario grid is empty".into()));
    }
    std::fs::create_dir_all(&args.out)?;

    let started = Instant::now();
    let datasets =
        generate_dataset(&model, &scenarios, &cfg.modes, cfg.expand_orbits, thread_count())?;
    for ds in &datasets {
        let path = args.out.join(format!("{}_{}.jsonl", model.name, mode_tag(ds.mode)));
        let meta = save_dataset(ds, &path)?;
        let dropped: usize = ds.scenarios.iter().map(|s| s.dropped).sum();
        println!(
            "wrote {} ({} samples, {} scenario instances, {} dropped, audit {:.2e}, sha {})",
            path.display(),
            meta.n_samples,
            meta.scenarios.len(),
            dropped,
            meta.audit_max_residual,
            &meta.sha256[..12]
        );
    }
    println!(
        "generated {} base scenarios in {:.1} s",
        scenarios.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(0)
}

/// Quick property gate shared by the training paths: a robot whose oracle
/// violates its own invariants must not source training labels.
fn gate_robot(model: &RobotModel) -> Result<()> {
    let reports = run_properties(model, 8, 0, false)?;
    let bad: Vec<&str> = reports.iter().filter(|r| !r.ok).map(|r| r.name).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Infeasible(format!(
            "{} fails physical property checks ({}); refusing to train on its labels",
            model.name,
            bad.join(", ")
        )))
    }
}

fn load_for(model: &RobotModel, path: &Path) -> Result<Dataset> {
    let (ds, _) = load_dataset(path)?;
    if ds.robot != model.name {
        return Err(Error::Config(format!(
            "dataset was generated for {:?}, not {:?}",
            ds.robot, model.name
        )));
    }
    Ok(ds)
}

fn gather<'a>(ds: &'a Dataset, idx: &[usize]) -> Vec<StructuredSample> {
    idx.iter().map(|&i| ds.samples[i].clone()).collect()
}

#[derive(Serialize)]
struct TrainStamp<'a> {
    robot: &'a str,
    data_sha: &'a str,
    model: &'a str,
    split: &'a str,
    epochs: usize,
    batch: usize,
    lr0: f64,
    lr1: f64,
    patience: usize,
    seed: u64,
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let model_def = args.robot.resolve()?;
    gate_robot(&model_def)?;
    let protocol = parse_protocol(&args.split)?;
    let ds = load_for(&model_def, &args.data)?;
    let splits = make_splits(&ds, protocol, args.seed)?;
    let train_set = gather(&ds, &splits.train);
    let val_set = gather(&ds, &splits.val);
    let test_set = gather(&ds, &splits.test);

    let spec = ModelSpec::defaults(args.model, ds.mode);
    let mut model = Model::new(&model_def, spec, args.seed);
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr0: args.lr0,
        lr1: args.lr1,
        patience: args.patience,
        threads: thread_count(),
        seed: args.seed,
    };

    let started = Instant::now();
    let result = train(&mut model, &model_def, &train_set, &val_set, &cfg)?;
    let wall_ms = started.elapsed().as_millis() as u64;

    let ckpt = Checkpoint::from_model(
        &model,
        &model_def,
        args.seed,
        (cfg.lr0, cfg.lr1),
        result.best_epoch,
        result.best_val,
    );
    let ckpt_json = serde_json::to_string(&ckpt)?;
    write_atomic(&args.out, ckpt_json.as_bytes())?;

    let mut csv = String::from("epoch,train_mse,val_mse,lr\n");
    for row in &result.logs {
        csv.push_str(&format!("{},{},{},{}\n", row.epoch, row.train_mse, row.val_mse, row.lr));
    }
    let csv_path = args.out.with_extension("epochs.csv");
    write_atomic(&csv_path, csv.as_bytes())?;

    // Wall time lives in its own sidecar so the epoch log and checkpoint
    // stay byte-identical across reruns.
    let stamp = TrainStamp {
        robot: &model_def.name,
        data_sha: "",
        model: args.model.name(),
        split: &args.split,
        epochs: args.epochs,
        batch: args.batch,
        lr0: args.lr0,
        lr1: args.lr1,
        patience: args.patience,
        seed: args.seed,
    };
    let timing = serde_json::json!({ "wall_ms": wall_ms, "config": config_hash(&stamp) });
    write_atomic(&args.out.with_extension("timing.json"), timing.to_string().as_bytes())?;

    let rmse = torque_rmse(&model, &model_def, &test_set)?;
    println!(
        "trained {} on {} samples: best val {:.4e} at epoch {}, test rmse {:.4} N*m, {} ms",
        args.model.name(),
        train_set.len(),
        result.best_val,
        result.best_epoch,
        rmse,
        wall_ms
    );
    println!("checkpoint {}", args.out.display());
    println!("epoch log  {}", csv_path.display());
    Ok(0)
}

fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let model_def = args.robot.resolve()?;
    let protocol = parse_protocol(&args.split)?;
    let ds = load_for(&model_def, &args.data)?;
    let (_, meta) = load_dataset(&args.data)?;
    let splits = make_splits(&ds, protocol, args.seed)?;

    let mut csv = String::from("config,seed,robot,data_sha,model,split,n,rmse\n");
    for ckpt_path in &args.ckpts {
        let ckpt = Checkpoint::load(ckpt_path)?;
        let model = ckpt.restore(&model_def)?;
        if ckpt.spec.mode != ds.mode {
            return Err(Error::Config(format!(
                "checkpoint {} predicts a different target mode than the dataset",
                ckpt_path.display()
            )));
        }
        let stamp = (&ckpt.spec, &args.split, args.seed);
        let hash = config_hash(&stamp);
        let fam = ckpt.spec.family.name();

        for (split_name, idx) in
            [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)]
        {
            let set = gather(&ds, idx);
            let rmse = torque_rmse(&model, &model_def, &set)?;
            csv.push_str(&format!(
                "{hash},{},{},{},{fam},{split_name},{},{}\n",
                args.seed,
                model_def.name,
                &meta.sha256[..12],
                set.len(),
                rmse
            ));
            println!("{fam:<12} {split_name:<5} n {:>6}  rmse {:.5} N*m", set.len(), rmse);
        }

        if args.per_scenario {
            let mut by_name: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
            for &i in &splits.test {
                by_name.entry(ds.samples[i].meta.scenario.as_str()).or_default().push(i);
            }
            for (name, idx) in by_name {
                let set = gather(&ds, &idx);
                let rmse = torque_rmse(&model, &model_def, &set)?;
                csv.push_str(&format!(
                    "{hash},{},{},{},{fam},test:{name},{},{}\n",
                    args.seed,
                    model_def.name,
                    &meta.sha256[..12],
                    set.len(),
                    rmse
                ));
            }
        }
    }
    write_atomic(&args.out, csv.as_bytes())?;
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn cmd_sim(args: &SimArgs) -> Result<i32> {
    let model_def = args.robot.resolve()?;
    let sc = match &args.scenario {
        Some(path) => serde_json::from_str::<Scenario>(&std::fs::read_to_string(path)?)?,
        None => {
            let mut sc = Scenario::new("track", &model_def, 90.0, 15.0, args.seed);
            sc.cycles = 2;
            sc
        }
    };
    let load_model = || -> Result<Model> {
        let path = args.ckpt.as_ref().ok_or_else(|| {
            Error::Config("learned controllers need --ckpt".into())
        })?;
        Checkpoint::load(path)?.restore(&model_def)
    };
    let controller = match args.controller.as_str() {
        "oracle" => Controller::OracleComputedTorque,
        "pd" => Controller::Pd,
        "learned" => Controller::Learned(load_model()?),
        "learned_pd" => Controller::LearnedPd(load_model()?),
        other => {
            return Err(Error::Config(format!(
                "unknown controller {other:?}; use oracle, pd, learned, or learned_pd"
            )))
        }
    };
    let cfg = SimConfig {
        rate_hz: args.rate,
        duration: args.duration,
        kp: args.kp,
        kd: args.kd,
        oracle_kp: args.oracle_kp,
        oracle_kd: args.oracle_kd,
        log_every: 10,
    };

    let result = rollout(&model_def, &sc, &controller, &cfg)?;
    let mut csv = String::from("t,err_rms,err_max,tau_max\n");
    for row in &result.rows {
        csv.push_str(&format!("{},{},{},{}\n", row.t, row.err_rms, row.err_max, row.tau_max));
    }
    write_atomic(&args.out, csv.as_bytes())?;
    let summary = SimResult { rows: Vec::new(), ..result.clone() };
    write_atomic(
        &args.out.with_extension("summary.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;

    match &result.diverged {
        Some(d) => println!(
            "{}: DIVERGED at t = {:.3} s ({}); rms {:.4} rad over {:.2} s",
            result.controller, d.t, d.reason, result.rms_error, result.duration_done
        ),
        None => println!(
            "{}: tracked {:.2} s, rms {:.6} rad, max {:.6} rad",
            result.controller, result.duration_done, result.rms_error, result.max_error
        ),
    }
    println!("wrote {}", args.out.display());
    Ok(0)
}

#[derive(Serialize)]
struct SweepStamp<'a> {
    robot: &'a str,
    data_sha: &'a str,
    models: Vec<&'a str>,
    protocol: &'a str,
    ratios: &'a [f64],
    seeds: &'a [u64],
    epochs: usize,
    batch: usize,
    patience: usize,
}

fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    let model_def = args.robot.resolve()?;
    gate_robot(&model_def)?;
    let ds = load_for(&model_def, &args.data)?;
    let (_, meta) = load_dataset(&args.data)?;

    let ratios: Vec<f64> = match args.protocol.as_str() {
        "ratio" => args.ratios.clone().unwrap_or_else(|| RATIO_GRID.to_vec()),
        "orbit" => vec![f64::NAN],
        other => {
            return Err(Error::Config(format!(
                "unknown protocol {other:?}; use ratio or orbit"
            )))
        }
    };
    let stamp = SweepStamp {
        robot: &model_def.name,
        data_sha: &meta.sha256,
        models: args.models.iter().map(|m| m.name()).collect(),
        protocol: &args.protocol,
        ratios: &ratios,
        seeds: &args.seeds,
        epochs: args.epochs,
        batch: args.batch,
        patience: args.patience,
    };
    let hash = config_hash(&stamp);

    let mut csv = String::from(
        "config,seed,robot,data_sha,model,protocol,ratio,train_n,test_n,best_epoch,best_val,test_rmse\n",
    );
    let started = Instant::now();
    for &seed in &args.seeds {
        for &ratio in &ratios {
            let protocol = if args.protocol == "orbit" {
                SplitProtocol::OrbitHoldout
            } else {
                SplitProtocol::RatioSweep(ratio)
            };
            let splits = make_splits(&ds, protocol, seed)?;
            let train_set = gather(&ds, &splits.train);
            let val_set = gather(&ds, &splits.val);
            let test_set = gather(&ds, &splits.test);

            for &family in &args.models {
                let spec = ModelSpec::defaults(family, ds.mode);
                let mut model = Model::new(&model_def, spec, seed);
                let cfg = TrainConfig {
                    epochs: args.epochs,
                    batch_size: args.batch,
                    patience: args.patience,
                    threads: thread_count(),
                    seed,
                    ..TrainConfig::default()
                };
                let result = train(&mut model, &model_def, &train_set, &val_set, &cfg)?;
                let rmse = torque_rmse(&model, &model_def, &test_set)?;
                let ratio_str =
                    if ratio.is_nan() { "orbit".to_string() } else { format!("{ratio}") };
                csv.push_str(&format!(
                    "{hash},{seed},{},{},{},{},{ratio_str},{},{},{},{},{}\n",
                    model_def.name,
                    &meta.sha256[..12],
                    family.name(),
                    args.protocol,
                    train_set.len(),
                    test_set.len(),
                    result.best_epoch,
                    result.best_val,
                    rmse
                ));
                println!(
                    "[{:>6.1} s] {} seed {seed} {ratio_str:>6}: train {} test rmse {:.5} N*m",
                    started.elapsed().as_secs_f64(),
                    family.name(),
                    train_set.len(),
                    rmse
                );
            }
        }
    }
    write_atomic(&args.out, csv.as_bytes())?;
    println!("wrote {}", args.out.display());
    Ok(0)
}
