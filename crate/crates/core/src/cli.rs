//! Command-line entry point. Exit codes: 0 success, 1 domain error, 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::costmap::{build_costmap, geometric_costmap, height_map, write_pgm, CostMap, SmoothingConfig};
use crate::datagen::{export_dataset, import_dataset, Dataset};
use crate::envworld::{make_corridor, make_rooms, make_urban_toy, Environment2D, RobotPose, SensorConfig, TerrainPattern};
use crate::evaluation::{blind_samples, compare_variants, draw_pairs, evaluate, paths_svg, EvalWorld, Outcome, Rollout, RolloutConfig, Variant};
use crate::losses::LossContext;
use crate::planner::{gate, plan, PlannerConfig, PlannerParams};
use crate::semantics::{default_table, CostTable};
use crate::training::{train, TrainConfig, TrainMaps};
use crate::trajectory::Trajectory;

type AnyError = Box<dyn std::error::Error>;

#[derive(Parser, Debug)]
#[command(name = "impplan", version, about = "Semantic imperative local planner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic environment as JSON.
    GenEnv(GenEnv),
    /// Build the smoothed costmap of an environment.
    BuildCostmap(BuildCostmap),
    /// Sample viewpoints, build the reachability graph and render training pairs.
    GenData(GenData),
    /// Train a planner on a dataset.
    Train(TrainCmd),
    /// Plan once from a pose toward a goal.
    Plan(PlanCmd),
    /// Closed-loop evaluation over random start-goal pairs.
    Eval(EvalCmd),
    /// Train and evaluate the semantic and geometric-only variants.
    Compare(CompareCmd),
    /// Draw a trajectory file over an environment's costmap as SVG.
    PlotPath(PlotPath),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EnvKind {
    Urban,
    Corridor,
    Rooms,
}

#[derive(Args, Debug)]
struct TableArg {
    /// Cost table JSON; the built-in table when omitted.
    #[arg(long)]
    table: Option<PathBuf>,
}

impl TableArg {
    fn load(&self) -> Result<CostTable, AnyError> {
        Ok(match &self.table {
            Some(p) => CostTable::load(p)?,
            None => default_table(),
        })
    }
}

#[derive(Args, Debug)]
struct GenEnv {
    #[arg(long, value_enum)]
    kind: EnvKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Corridor length (m).
    #[arg(long, default_value_t = 20.0)]
    length: f64,
    /// Corridor width (m).
    #[arg(long, default_value_t = 3.0)]
    width: f64,
    /// Corridor floor class.
    #[arg(long, default_value = "floor")]
    floor: String,
    #[arg(long, default_value_t = 4)]
    rooms: usize,
}

#[derive(Args, Debug)]
struct BuildCostmap {
    #[arg(long)]
    env: PathBuf,
    #[command(flatten)]
    table: TableArg,
    /// Geometry-only costmap (obstacle vs free).
    #[arg(long)]
    geometric: bool,
    #[arg(long)]
    out: PathBuf,
    /// Optional grayscale image of the result.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    env: PathBuf,
    #[command(flatten)]
    table: TableArg,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    viewpoints: usize,
    #[arg(long, default_value_t = 0.75)]
    fov_ratio: f64,
    #[arg(long, default_value_t = 64)]
    n_rays: usize,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    env: PathBuf,
    #[command(flatten)]
    table: TableArg,
    /// TrainConfig JSON; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// history CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Overrides max_epochs from the config.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the config seed (also seeds initialization).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "semantic")]
    variant: VariantArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Semantic,
    Geometric,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Semantic => Variant::Semantic,
            VariantArg::Geometric => Variant::Geometric,
        }
    }
}

#[derive(Args, Debug)]
struct PlanCmd {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    env: PathBuf,
    #[command(flatten)]
    table: TableArg,
    #[arg(long, allow_negative_numbers = true)]
    x: f64,
    #[arg(long, allow_negative_numbers = true)]
    y: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    yaw: f64,
    #[arg(long, allow_negative_numbers = true)]
    goal_x: f64,
    #[arg(long, allow_negative_numbers = true)]
    goal_y: f64,
    #[arg(long, default_value_t = 0.5)]
    delta_mu: f64,
    #[arg(long, value_enum, default_value = "semantic")]
    variant: VariantArg,
    /// World-frame trajectory text output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalCmd {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    env: PathBuf,
    #[command(flatten)]
    table: TableArg,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "semantic")]
    variant: VariantArg,
}

#[derive(Args, Debug)]
struct CompareCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    env: PathBuf,
    #[command(flatten)]
    table: TableArg,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Evaluation pairs per variant and seed.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct PlotPath {
    #[arg(long)]
    env: PathBuf,
    #[command(flatten)]
    table: TableArg,
    /// Trajectory text (`x y z nx ny` rows).
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Caps the worker pool at `IMPPLAN_THREADS` when set.
fn configure_threads() {
    if let Some(n) = std::env::var("IMPPLAN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

struct Loaded {
    env: Environment2D,
    table: CostTable,
    semantic: CostMap,
    geometric: CostMap,
    height: CostMap,
}

impl Loaded {
    fn new(env_path: &Path, table: &TableArg) -> Result<Self, AnyError> {
        let env = Environment2D::load(env_path)?;
        let table = table.load()?;
        env.validate(&table)?;
        let smoothing = SmoothingConfig::default();
        Ok(Loaded {
            semantic: build_costmap(&env, &table, &smoothing)?,
            geometric: geometric_costmap(&env, &table, &smoothing)?,
            height: height_map(&env),
            env,
            table,
        })
    }

    fn world(&self) -> EvalWorld<'_> {
        EvalWorld {
            env: &self.env,
            table: &self.table,
            semantic: &self.semantic,
            geometric: &self.geometric,
            height: &self.height,
        }
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<(), AnyError> {
        let hash = self.env.content_hash();
        if ds.env_sha256 != hash {
            return Err(format!("dataset was generated for environment {}, not {hash}", ds.env_sha256).into());
        }
        Ok(())
    }
}

fn load_train_config(path: &Option<PathBuf>) -> Result<TrainConfig, AnyError> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn dispatch(cmd: Command) -> Result<(), AnyError> {
    match cmd {
        Command::GenEnv(a) => {
            let env = match a.kind {
                EnvKind::Urban => make_urban_toy(a.seed)?,
                EnvKind::Corridor => make_corridor(a.length, a.width, &TerrainPattern::Uniform(a.floor.clone()), a.seed)?,
                EnvKind::Rooms => make_rooms(a.rooms, a.seed)?,
            };
            env.save(&a.out)?;
        }
        Command::BuildCostmap(a) => {
            let env = Environment2D::load(&a.env)?;
            let table = a.table.load()?;
            let m = if a.geometric {
                geometric_costmap(&env, &table, &SmoothingConfig::default())?
            } else {
                build_costmap(&env, &table, &SmoothingConfig::default())?
            };
            m.save(&a.out)?;
            if let Some(p) = &a.pgm {
                write_pgm(&m, p)?;
            }
        }
        Command::GenData(a) => {
            let l = Loaded::new(&a.env, &a.table)?;
            let rc = RolloutConfig {
                n_viewpoints: a.viewpoints,
                fov_ratio: a.fov_ratio,
                sensor: SensorConfig {
                    n_rays: a.n_rays,
                    ..SensorConfig::default()
                },
                ..RolloutConfig::default()
            };
            let samples = draw_pairs(&l.world(), a.n, &rc, a.seed)?;
            let ds = Dataset {
                env_sha256: l.env.content_hash(),
                sensor: rc.sensor,
                samples,
            };
            export_dataset(&ds, &a.out)?;
        }
        Command::Train(a) => {
            let l = Loaded::new(&a.env, &a.table)?;
            let ds = import_dataset(&a.data)?;
            l.check_dataset(&ds)?;
            let mut cfg = load_train_config(&a.config)?;
            if let Some(e) = a.epochs {
                cfg.max_epochs = e;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let planner = PlannerConfig {
                n_rays: ds.sensor.n_rays,
                sem_rows: 1 + ds.sensor.ground_rows,
                ..PlannerConfig::default()
            };
            let p0 = PlannerParams::init(planner, cfg.h_r, cfg.seed)?;
            let (samples, cost) = match Variant::from(a.variant) {
                Variant::Semantic => (ds.samples, &l.semantic),
                Variant::Geometric => (blind_samples(&ds.samples, &l.table), &l.geometric),
            };
            let maps = TrainMaps { cost, height: &l.height };
            let (params, hist) = train(&samples, &maps, &p0, &cfg)?;
            params.save(&a.out)?;
            if let Some(p) = &a.log {
                std::fs::write(p, hist.to_csv())?;
            }
            let last = hist.epochs.last().expect("epoch 0 is always recorded");
            println!(
                "stopped at epoch {} ({:?}); best epoch {}; final val_total {:.4}",
                hist.stop_epoch, hist.stop_reason, hist.best_epoch, last.val.total
            );
        }
        Command::Plan(a) => {
            let l = Loaded::new(&a.env, &a.table)?;
            let params = PlannerParams::load(&a.model)?;
            let sensor = SensorConfig {
                n_rays: params.config().n_rays,
                ground_rows: params.config().sem_rows - 1,
                ..SensorConfig::default()
            };
            let pose = RobotPose::new(a.x, a.y, a.yaw);
            let caster = crate::envworld::Raycaster::new(&l.env, &l.table)?;
            let (depth, mut semantic) = caster.scan(&pose, &sensor)?;
            if matches!(a.variant, VariantArg::Geometric) {
                semantic = semantic.blinded(&l.table);
            }
            let ctx = LossContext::new(&l.semantic, &l.height, 1.75);
            let goal = ctx.goal_world(a.goal_x, a.goal_y);
            let (out, _) = plan(&depth, &semantic, ctx.goal_in_robot_frame(&pose, goal), &params)?;
            let traj = ctx.world_trajectory(&pose, &out.keypoints)?;
            for (i, k) in out.keypoints.points.iter().enumerate() {
                println!("keypoint {i}: {:.4} {:.4} {:.4}", k[0], k[1], k[2]);
            }
            println!("mu {:.6} -> {:?}", out.mu, gate(&out, a.delta_mu));
            if let Some(p) = &a.out {
                std::fs::write(p, traj.to_text()?)?;
            }
        }
        Command::Eval(a) => {
            let l = Loaded::new(&a.env, &a.table)?;
            let params = PlannerParams::load(&a.model)?;
            let rc = RolloutConfig {
                variant: a.variant.into(),
                sensor: SensorConfig {
                    n_rays: params.config().n_rays,
                    ground_rows: params.config().sem_rows - 1,
                    ..SensorConfig::default()
                },
                ..RolloutConfig::default()
            };
            let run = evaluate(&params, &l.world(), a.n, &rc, a.seed)?;
            std::fs::write(&a.report, run.report.to_json())?;
            if let Some(p) = &a.plot {
                std::fs::write(p, paths_svg(&l.semantic, &run.rollouts))?;
            }
            println!("{}", run.report.to_json());
        }
        Command::Compare(a) => {
            let l = Loaded::new(&a.env, &a.table)?;
            let ds = import_dataset(&a.data)?;
            l.check_dataset(&ds)?;
            let mut cfg = load_train_config(&a.config)?;
            if let Some(e) = a.epochs {
                cfg.max_epochs = e;
            }
            let planner = PlannerConfig {
                n_rays: ds.sensor.n_rays,
                sem_rows: 1 + ds.sensor.ground_rows,
                ..PlannerConfig::default()
            };
            let rc = RolloutConfig {
                sensor: ds.sensor,
                ..RolloutConfig::default()
            };
            let c = compare_variants(&ds.samples, &l.world(), &a.seeds, planner, &cfg, &rc, a.n)?;
            std::fs::write(&a.report, serde_json::to_string_pretty(&c)?)?;
            print!("{}", c.to_table());
        }
        Command::PlotPath(a) => {
            let l = Loaded::new(&a.env, &a.table)?;
            let traj = Trajectory::from_text(&std::fs::read_to_string(&a.traj)?)?;
            let path: Vec<[f64; 2]> = traj.waypoints.iter().map(|p| [p[0], p[1]]).collect();
            let (first, last) = match (traj.waypoints.first(), traj.waypoints.last()) {
                (Some(f), Some(l)) => (*f, *l),
                _ => return Err("trajectory file has no waypoints".into()),
            };
            let r = Rollout {
                start: RobotPose::new(first[0], first[1], 0.0),
                goal: last,
                path,
                outcome: Outcome::Reached,
                replans: 0,
                gate_rejections: 0,
                final_distance: 0.0,
            };
            std::fs::write(&a.out, paths_svg(&l.semantic, &[r]))?;
        }
    }
    Ok(())
}
