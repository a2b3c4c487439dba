use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use latentplan::arena::{self, Case, Environment, WalkerSpec};
use latentplan::lvm::{train_with_history, BackConstraintSpec, BackConstraintKind};
use latentplan::multiscale::{cascade, ControlSequence, LevelSchedule, PiOptions};
use latentplan::oracle::duality_residuals;
use latentplan::planner::{plan as run_planner, PlannerConfig};
use latentplan::synth::{generate, GeneratorSpec, OracleKind};
use latentplan::tasks::{StartState, Task};
use latentplan::{AugmentedState, LatentModel, MotionDataset, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::{git_describe, output_dir, RunManifest, Timings};
use crate::{svg, Command, DualityArgs, EvalArgs, GuideArgs, Kind, PiArgs, PlanArgs, SynthArgs, TrainArgs};

fn finish(cmd: &Command, primary: &Path, resolved: serde_json::Value, seed: Option<u64>, timings: Timings) -> CliResult<()> {
    let mut config = serde_json::to_value(cmd)?;
    let config = config
        .as_object_mut()
        .and_then(|m| m.remove(cmd.name()))
        .ok_or_else(|| CliError::input("command does not serialize as a tagged object"))?;
    let m = RunManifest {
        subcommand: cmd.name().to_string(),
        config,
        resolved,
        seed,
        git_describe: git_describe(),
        timings: timings.into_map(),
    };
    m.write_to_dir(&output_dir(primary))?;
    Ok(())
}

fn create(path: &Path) -> CliResult<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
    }
    File::create(path).map_err(|e| CliError::file(path, e))
}

fn read_to_string(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn synth(a: &SynthArgs, cmd: &Command) -> CliResult<()> {
    let mut t = Timings::new();
    let kind = match a.kind {
        Kind::Circle => OracleKind::Circle,
        Kind::Lissajous => OracleKind::Lissajous,
        Kind::TwoGait => OracleKind::TwoGait,
    };
    let mut spec = GeneratorSpec::new(kind, a.dim);
    spec.noise_std = a.noise;
    spec.frames_per_cycle = a.frames_per_cycle;
    spec.cycles = a.cycles;
    spec.turn_amplitude = a.turn_amplitude;
    spec.frame_rate = a.frame_rate;
    spec.speed = a.speed;
    spec.seed = a.seed;
    let out = generate(&spec)?;
    t.lap("generate");
    out.dataset.write_csv(create(&a.out)?)?;
    if let Some(path) = &a.latent_out {
        let mut w = csv::Writer::from_writer(create(path)?);
        let mut header: Vec<String> = (0..out.latent.ncols()).map(|j| format!("z{j}")).collect();
        header.push("gait".into());
        w.write_record(&header)?;
        for (row, label) in out.latent.row_iter().zip(&out.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| num(*v)).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| CliError::file(path, e))?;
    }
    t.lap("write");
    println!("wrote {} frames x {} channels to {}", out.dataset.len(), out.dataset.dim(), a.out.display());
    finish(cmd, &a.out, serde_json::to_value(&spec)?, Some(a.seed), t)
}

fn parse_back_constraints(s: &str, latent_dim: usize) -> CliResult<BackConstraintSpec> {
    let bad = || CliError::input(format!("--back-constraints expects phase:FREE:RBF_WIDTH:PHASE_WIDTH or rbf:WIDTH, got {s:?}"));
    let parts: Vec<&str> = s.split(':').collect();
    let f = |p: &str| p.trim().parse::<f64>().map_err(|_| bad());
    let spec = match parts.as_slice() {
        ["phase", free, rbf, phase] => {
            let free: usize = free.trim().parse().map_err(|_| bad())?;
            BackConstraintSpec::with_phase(free, f(rbf)?, f(phase)?)
        }
        ["rbf", width] => BackConstraintSpec::new(vec![BackConstraintKind::RbfRegression { width: f(width)? }; latent_dim]),
        _ => return Err(bad()),
    };
    if spec.kinds.len() != latent_dim {
        return Err(CliError::input(format!("back-constraints cover {} dims but --latent-dim is {latent_dim}", spec.kinds.len())));
    }
    Ok(spec)
}

pub fn train(a: &TrainArgs, cmd: &Command) -> CliResult<()> {
    let mut t = Timings::new();
    let data = MotionDataset::read_csv(File::open(&a.data).map_err(|e| CliError::file(&a.data, e))?)?;
    t.lap("load");
    let mut cfg = TrainConfig::new(a.latent_dim, a.iterations).with_seed(a.seed);
    if let Some(s) = &a.back_constraints {
        cfg = cfg.with_back_constraints(parse_back_constraints(s, a.latent_dim)?);
    }
    let (model, history) = train_with_history(&data, &cfg)?;
    t.lap("train");
    let json = model.to_json()?;
    create(&a.out)?.write_all(json.as_bytes()).map_err(|e| CliError::file(&a.out, e))?;
    let curve = a.curve.clone().unwrap_or_else(|| output_dir(&a.out).join("training_curve.csv"));
    let mut w = csv::Writer::from_writer(create(&curve)?);
    w.write_record(["iteration", "objective"])?;
    for (i, f) in history.iter().enumerate() {
        w.write_record([i.to_string(), num(*f)])?;
    }
    w.flush().map_err(|e| CliError::file(&curve, e))?;
    t.lap("write");
    println!(
        "trained d={} on {} frames: objective {:.6} -> {:.6} over {} accepted steps",
        a.latent_dim,
        data.len(),
        history[0],
        history[history.len() - 1],
        history.len() - 1
    );
    finish(cmd, &a.out, serde_json::to_value(&cfg)?, Some(a.seed), t)
}

fn load_model(path: &Path) -> CliResult<LatentModel> {
    Ok(LatentModel::from_json(&read_to_string(path)?)?)
}

fn load_task(path: &Path, horizon: Option<usize>) -> CliResult<Task> {
    let task = Task::from_json(&read_to_string(path)?)?;
    match horizon {
        Some(k) if k != task.horizon() => {
            let mut config = task.config.clone();
            config.horizon = k;
            Ok(Task::new(config)?)
        }
        _ => Ok(task),
    }
}

fn start_state(task: &Task, model: &LatentModel) -> CliResult<AugmentedState> {
    let start = task.config.start.clone().unwrap_or(StartState { latent: None, global: [0.0; 3] });
    Ok(start.resolve(model)?)
}

fn pi_options(p: &PiArgs) -> PiOptions {
    PiOptions {
        step: p.step,
        literal_normalization: p.literal_normalization,
        guidance_correction: !p.no_guidance_correction,
        ..PiOptions::default()
    }
}

fn parse_schedule(s: &str) -> CliResult<LevelSchedule> {
    Ok(s.parse::<LevelSchedule>()?)
}

/// Trajectory CSV: one row per step `k = 1..=K`.
pub fn write_trajectory(path: &Path, model: &LatentModel, plan: &latentplan::planner::Plan) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["step".to_string(), "gx".into(), "gy".into(), "theta".into()];
    header.extend((0..model.latent_dim()).map(|j| format!("x{j}")));
    header.extend(model.channel_names().iter().map(|n| format!("y_{n}")));
    header.push("cost".into());
    header.push("delta".into());
    w.write_record(&header)?;
    for (k, ((s, y), (q, d))) in plan.states.iter().zip(&plan.poses).zip(plan.costs.iter().zip(&plan.delta)).enumerate() {
        let mut rec = vec![(k + 1).to_string()];
        rec.extend(s.global.iter().map(|v| num(*v)));
        rec.extend(s.latent.iter().map(|v| num(*v)));
        rec.extend(y.iter().map(|v| num(*v)));
        rec.push(num(*q));
        rec.push(num(*d));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::file(path, e))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct PlanResolved<'a> {
    horizon: usize,
    step: f64,
    start: &'a [f64],
    start_global: [f64; 3],
    planner: &'a PlannerConfig,
    pi: PiOptions,
    schedule: Option<&'a LevelSchedule>,
}

pub fn plan(a: &PlanArgs, cmd: &Command) -> CliResult<()> {
    let mut t = Timings::new();
    let model = load_model(&a.model)?;
    let task = load_task(&a.task, a.horizon)?;
    let start = start_state(&task, &model)?;
    let k = task.horizon();
    let opts = pi_options(&a.pi);
    t.lap("load");

    let mut cfg = PlannerConfig::new(a.particles, k, a.seed);
    cfg.step = a.pi.step;
    cfg.record_trellis = a.svg.is_some();
    let schedule = a.multiscale.as_deref().map(parse_schedule).transpose()?;
    if let Some(path) = &a.guidance {
        let u = ControlSequence::load(path).map_err(|e| match e {
            latentplan::Error::Io(io) => CliError::file(path, io),
            other => other.into(),
        })?;
        if u.len() != k || u.dim() != model.latent_dim() {
            return Err(CliError::input(format!(
                "guidance is {}x{}, expected {k}x{}",
                u.len(),
                u.dim(),
                model.latent_dim()
            )));
        }
        cfg = cfg.with_guidance(u);
    } else if let Some(s) = &schedule {
        cfg = cfg.with_guidance(cascade(&model, &task, &start, s, a.seed, &opts)?);
        t.lap("guidance");
    }

    let p = run_planner(&model, &task, &start, &cfg)?;
    t.lap("plan");
    write_trajectory(&a.out, &model, &p)?;
    if let Some(path) = &a.svg {
        let snapshots: Vec<Vec<[f64; 2]>> = p
            .trellis
            .as_ref()
            .map(|tr| {
                let every = (k / 8).max(1);
                tr.steps
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i > 0 && i % every == 0)
                    .map(|(_, s)| s.particles.iter().map(|x| [x.global[0], x.global[1]]).collect())
                    .collect()
            })
            .unwrap_or_default();
        let text = svg::render(&task.config, &p, &snapshots);
        create(path)?.write_all(text.as_bytes()).map_err(|e| CliError::file(path, e))?;
    }
    t.lap("write");
    let goal = if task.config.goal.is_some() { if p.diagnostics.success { "reached" } else { "missed" } } else { "n/a" };
    println!(
        "planned {k} steps with {} particles: log posterior {:.6}, goal {goal}, {} resampling steps",
        a.particles,
        p.log_posterior,
        p.diagnostics.resample_steps.len()
    );
    let resolved = PlanResolved {
        horizon: k,
        step: a.pi.step.unwrap_or(1.0 / model.frame_rate()),
        start: start.latent.as_slice(),
        start_global: [start.global[0], start.global[1], start.global[2]],
        planner: &cfg,
        pi: opts,
        schedule: schedule.as_ref(),
    };
    finish(cmd, &a.out, serde_json::to_value(&resolved)?, Some(a.seed), t)
}

pub fn guide(a: &GuideArgs, cmd: &Command) -> CliResult<()> {
    let mut t = Timings::new();
    let model = load_model(&a.model)?;
    let task = load_task(&a.task, a.horizon)?;
    let start = start_state(&task, &model)?;
    let schedule = parse_schedule(&a.multiscale)?;
    let opts = pi_options(&a.pi);
    t.lap("load");
    let u = cascade(&model, &task, &start, &schedule, a.seed, &opts)?;
    t.lap("guidance");
    u.write_csv(create(&a.out)?)?;
    t.lap("write");
    println!("wrote {}x{} controls to {}", u.len(), u.dim(), a.out.display());
    let resolved = serde_json::json!({ "schedule": schedule, "pi": opts, "horizon": task.horizon() });
    finish(cmd, &a.out, resolved, Some(a.seed), t)
}

/// A case as written in a benchmark config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub particles: usize,
    /// Level schedule `M:N,...`; absent for an unguided case.
    #[serde(default)]
    pub multiscale: Option<String>,
}

/// Benchmark config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Synthetic walker to build; used when `model` is absent.
    #[serde(default)]
    pub walker: Option<WalkerSpec>,
    /// Trained model JSON; starts come from each environment's task.
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub environments: Option<Vec<Environment>>,
    #[serde(default)]
    pub cases: Option<Vec<CaseSpec>>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub pi: PiOptions,
}

fn default_horizon() -> usize {
    64
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            walker: None,
            model: None,
            horizon: default_horizon(),
            environments: None,
            cases: None,
            seeds: None,
            pi: PiOptions::default(),
        }
    }
}

pub fn eval(a: &EvalArgs, cmd: &Command) -> CliResult<()> {
    let mut t = Timings::new();
    let mut cfg: EvalConfig = match &a.config {
        Some(p) => serde_json::from_str(&read_to_string(p)?)?,
        None => EvalConfig::default(),
    };
    let h = cfg.horizon;
    let envs = cfg.environments.get_or_insert_with(|| vec![arena::open_field(h), arena::two_obstacles(h)]).clone();
    let cases = cfg
        .cases
        .get_or_insert_with(|| {
            vec![
                CaseSpec { name: Some("naive-50".into()), particles: 50, multiscale: None },
                CaseSpec { name: Some("naive-500".into()), particles: 500, multiscale: None },
                CaseSpec { name: Some("multiscale-50".into()), particles: 50, multiscale: Some("8:800,4:400,2:200".into()) },
            ]
        })
        .iter()
        .map(|c| {
            let schedule = c.multiscale.as_deref().map(parse_schedule).transpose()?;
            let mut case = match schedule {
                Some(s) => Case::multiscale(c.particles, s),
                None => Case::naive(c.particles),
            };
            if let Some(n) = &c.name {
                case.name = n.clone();
            }
            Ok(case)
        })
        .collect::<CliResult<Vec<_>>>()?;
    if let Some(n) = a.seeds {
        cfg.seeds = Some((0..n as u64).collect());
    }
    let seeds = cfg.seeds.get_or_insert_with(|| (0..100).collect()).clone();

    let (model, walker_start) = match &cfg.model {
        Some(p) => (load_model(p)?, None),
        None => {
            let spec = cfg.walker.get_or_insert_with(WalkerSpec::default);
            let m = arena::walker_model(spec)?;
            let s = arena::walker_start(&m);
            (m, Some(s))
        }
    };
    t.lap("setup");

    let mut rows = Vec::new();
    for env in &envs {
        let start = match &walker_start {
            Some(s) => s.clone(),
            None => start_state(&Task::new(env.task.clone())?, &model)?,
        };
        rows.extend(arena::sweep(&model, std::slice::from_ref(env), &cases, &seeds, &start, &cfg.pi)?);
    }
    t.lap("sweep");

    let mut w = csv::Writer::from_writer(create(&a.out)?);
    w.write_record(["case", "env", "successes", "trials", "rate", "mean_wallclock_s", "dp_operations"])?;
    for r in &rows {
        let wall = if a.no_wallclock { 0.0 } else { r.mean_wallclock_s };
        w.write_record([
            r.case.clone(),
            r.env.clone(),
            r.successes.to_string(),
            r.trials.to_string(),
            num(r.rate),
            num(wall),
            r.dp_operations.to_string(),
        ])?;
        println!("{:<20} {:<16} {:>4}/{:<4} {:>6.1}%", r.case, r.env, r.successes, r.trials, 100.0 * r.rate);
    }
    w.flush().map_err(|e| CliError::file(&a.out, e))?;
    t.lap("write");
    finish(cmd, &a.out, serde_json::to_value(&cfg)?, None, t)
}

/// Largest admissible residual of the posterior/optimal-chain identity.
pub const DUALITY_TOLERANCE: f64 = 1e-9;

pub fn verify_duality(a: &DualityArgs, cmd: &Command) -> CliResult<()> {
    if a.max_states == 0 || a.max_horizon == 0 {
        return Err(CliError::input("--max-states and --max-horizon must be at least 1"));
    }
    let mut t = Timings::new();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut reports = Vec::with_capacity(a.instances);
    for _ in 0..a.instances {
        let s = rng.random_range(1..=a.max_states);
        let k = rng.random_range(1..=a.max_horizon);
        reports.push(duality_residuals(s, k, &mut rng)?);
    }
    t.lap("verify");
    let worst = |f: fn(&latentplan::oracle::DualityReport) -> f64| reports.iter().map(f).fold(0.0, f64::max);
    let post = worst(|r| r.posterior_vs_policy);
    let value = worst(|r| r.value_vs_cost);
    let map = worst(|r| r.map_vs_viterbi);
    println!("instances: {}", reports.len());
    println!("max |posterior - optimal chain law|: {post:e}");
    println!("max |-log z - expected cost|:        {value:e}");
    println!("max |MAP score - Viterbi score|:     {map:e}");
    if let Some(path) = &a.out {
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record(["instance", "states", "horizon", "posterior_vs_policy", "value_vs_cost", "map_vs_viterbi"])?;
        for (i, r) in reports.iter().enumerate() {
            w.write_record([
                i.to_string(),
                r.states.to_string(),
                r.horizon.to_string(),
                num(r.posterior_vs_policy),
                num(r.value_vs_cost),
                num(r.map_vs_viterbi),
            ])?;
        }
        w.flush().map_err(|e| CliError::file(path, e))?;
        finish(cmd, path, serde_json::json!({ "tolerance": DUALITY_TOLERANCE }), Some(a.seed), t)?;
    }
    if post < DUALITY_TOLERANCE {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(CliError::Numerical(format!("identity residual {post:e} exceeds {DUALITY_TOLERANCE:e}")))
    }
}
