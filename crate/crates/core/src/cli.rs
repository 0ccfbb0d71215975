//! Command-line front end.
//!
//! Every command writes its report to the supplied writer and returns an
//! [`Error`] on failure; [`run`] turns the outcome into an exit status
//! (0 success, 1 usage or configuration error, 2 numeric failure).
//!
//! Output formats:
//!
//! * `protect` writes `<stem>_protected.<ext>` (same format as the input)
//!   and `<stem>_trace.csv` per input image. The trace has the header
//!   `step,loss_proj,loss_attn,loss_mtcnn,loss_id,loss_total,objective,active_cells,linf,fr,reproj`
//!   and one row per optimisation step, holding the losses and perturbation
//!   statistics after that step.
//! * `evaluate` prints two comma-separated blocks separated by a blank line:
//!   `metric,value` rows, then one robustness row per purifier.
//! * `grid` prints one comma-separated row per λ combination, best first.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::gradcheck::{self, CheckItem};
use crate::image_io::{load_image, save_image, ImageFormat};
use crate::losses::{LossConfig, LossValues, LossWeights};
use crate::metrics::MetricReport;
use crate::models::{init_models, ModelBundle};
use crate::noise::{protect, protect_observed, AttackConfig, ProtectReport, StepRecord};
use crate::purify::{evaluate_robustness, Purifier, RobustnessRecord};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Largest λ grid the `grid` command accepts.
pub const MAX_GRID: usize = 81;

/// Header of the robustness block printed by `evaluate`.
pub const ROBUSTNESS_HEADER: [&str; 10] = [
    "purifier",
    "params",
    "residual_energy",
    "ism_toy",
    "detector_failure",
    "loss_proj",
    "loss_attn",
    "loss_mtcnn",
    "loss_id",
    "loss_total",
];

/// Header of the table printed by `grid`.
pub const GRID_HEADER: [&str; 12] = [
    "rank",
    "combo",
    "lambda_proj",
    "lambda_attn",
    "lambda_mtcnn",
    "lambda_id",
    "score",
    "loss_proj",
    "loss_attn",
    "loss_mtcnn",
    "loss_id",
    "objective",
];

#[derive(Parser, Debug)]
#[command(
    name = "advshield",
    version,
    about = "Face-protection perturbations against seeded toy models"
)]
pub struct Cli {
    /// Worker threads for commands that process several images or combinations.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: u16,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the toy model weights for a seed and print their digest.
    GenWeights {
        /// Seed the weights are drawn from.
        #[arg(long)]
        seed: u64,
        /// Weight file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Protect one image, or every PNG/PPM in a directory.
    Protect(RunArgs),
    /// Compare a protected image with its clean original.
    Evaluate {
        /// Original image.
        #[arg(long)]
        clean: PathBuf,
        /// Protected image of the same size.
        #[arg(long)]
        protected: PathBuf,
        /// Weight file of the models used for the identity and loss columns.
        #[arg(long)]
        weights: PathBuf,
        /// Comma-separated purifiers, e.g. `jpeg:75,bits:3,resize:0.5:area`.
        #[arg(long)]
        purifiers: Option<String>,
        /// Config supplying the loss settings and the default purifier list.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check analytic gradients of every operation and loss.
    Gradcheck {
        /// Seed of the check inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seed of the toy models, ignored when `--weights` is given.
        #[arg(long, default_value_t = 7)]
        model_seed: u64,
        /// Weight file to check instead of freshly seeded models.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Protect one image under every λ combination and rank the results.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        /// Per-term value lists, e.g. `proj=-1,-0.5;attn=0,1`. Terms left out keep the config value.
        #[arg(long)]
        lambda_grid: String,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// Flat TOML run config; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input image or directory; overrides `input` in the config.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Weight file; overrides `weights` in the config.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    /// Loads the config, applies the seed override and the command-line paths.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_env()?;
        if let Some(p) = &self.input {
            cfg.input = Some(p.clone());
        }
        if let Some(p) = &self.weights {
            cfg.weights = Some(p.clone());
        }
        if let Some(p) = &self.out {
            cfg.output_dir = Some(p.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| {
        Error::Config(format!(
            "missing {key}: pass it on the command line or in the config"
        ))
    })
}

fn write_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

/// Parses `args` (program name first) and runs the command, printing
/// reports to `out` and errors to `err`. Returns the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                1
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command. `Ok(2)` reports a failed gradient check.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(usize::from(cli.jobs))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    match &cli.command {
        Command::GenWeights { seed, out: path } => {
            let digest = cmd_gen_weights(*seed, path)?;
            writeln!(out, "{digest}").map_err(write_err)?;
            Ok(0)
        }
        Command::Protect(args) => {
            let cfg = args.resolve()?;
            out.write_all(cfg.echo().as_bytes()).map_err(write_err)?;
            let outputs = pool.install(|| cmd_protect(&cfg))?;
            for o in &outputs {
                let last = o.report.final_losses();
                writeln!(
                    out,
                    "{} -> {} (objective {}, trace {})",
                    o.input.display(),
                    o.image.display(),
                    last.objective,
                    o.trace.display()
                )
                .map_err(write_err)?;
                for w in &o.report.warnings {
                    writeln!(out, "warning: {w}").map_err(write_err)?;
                }
            }
            Ok(0)
        }
        Command::Evaluate {
            clean,
            protected,
            weights,
            purifiers,
            config,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            cfg.apply_env()?;
            let purifiers = match purifiers {
                Some(list) => Purifier::parse_list(list)?,
                None => cfg.purifier_list()?,
            };
            let loss = cfg.attack_config()?.loss;
            let bundle = ModelBundle::load(weights)?;
            let (c, _) = load_image(clean)?;
            let (p, _) = load_image(protected)?;
            let (metrics, records) = cmd_evaluate(&bundle, &c, &p, &purifiers, &loss)?;
            out.write_all(format_evaluation(&metrics, &records).as_bytes())
                .map_err(write_err)?;
            Ok(0)
        }
        Command::Gradcheck {
            seed,
            model_seed,
            weights,
        } => {
            let bundle = match weights {
                Some(p) => ModelBundle::load(p)?,
                None => init_models(*model_seed),
            };
            let items = gradcheck::run_suite(&bundle, *seed)?;
            out.write_all(format_gradcheck(&items).as_bytes())
                .map_err(write_err)?;
            Ok(if items.iter().all(CheckItem::passed) {
                0
            } else {
                2
            })
        }
        Command::Grid { run, lambda_grid } => {
            let cfg = run.resolve()?;
            let base = cfg.attack_config()?;
            let combos = expand_grid(lambda_grid, &base.loss.weights)?;
            let input = required(&cfg.input, "input")?;
            let (x, _) = load_image(input)?;
            let bundle = ModelBundle::load(required(&cfg.weights, "weights")?)?;
            out.write_all(cfg.echo().as_bytes()).map_err(write_err)?;
            let rows = pool.install(|| cmd_grid(&x, &bundle, &base, &combos))?;
            out.write_all(format_grid(&rows).as_bytes())
                .map_err(write_err)?;
            Ok(0)
        }
    }
}

/// Writes the weights for `seed` to `path` and returns their digest.
pub fn cmd_gen_weights(seed: u64, path: &Path) -> Result<String> {
    init_models(seed).save(path)
}

/// Files written for one protected image.
#[derive(Clone, Debug)]
pub struct ProtectOutput {
    pub input: PathBuf,
    pub image: PathBuf,
    pub trace: PathBuf,
    pub report: ProtectReport,
}

/// Inputs named by a config: the file itself, or every PNG/PPM in a directory
/// in name order.
pub fn input_images(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        if p.is_file() && ImageFormat::from_path(&p).is_ok() {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "{}: no .png or .ppm images",
            path.display()
        )));
    }
    Ok(files)
}

/// Protects every configured input, in parallel on the current rayon pool.
pub fn cmd_protect(cfg: &RunConfig) -> Result<Vec<ProtectOutput>> {
    let attack = cfg.attack_config()?;
    let inputs = input_images(required(&cfg.input, "input")?)?;
    let bundle = ModelBundle::load(required(&cfg.weights, "weights")?)?;
    let out_dir = required(&cfg.output_dir, "output_dir")?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    inputs
        .par_iter()
        .map(|input| protect_file(input, &bundle, &attack, out_dir))
        .collect()
}

fn trace_row(r: &StepRecord) -> [String; 11] {
    let l = &r.losses;
    [
        r.step.to_string(),
        l.proj.to_string(),
        l.attn.to_string(),
        l.mtcnn.to_string(),
        l.id.to_string(),
        l.total.to_string(),
        l.objective.to_string(),
        l.active_cells.to_string(),
        r.linf.to_string(),
        r.fr.to_string(),
        r.reproj.to_string(),
    ]
}

/// Protects one image file. The trace is written row by row, so a numeric
/// failure leaves the completed steps on disk.
pub fn protect_file(
    input: &Path,
    bundle: &ModelBundle,
    cfg: &AttackConfig,
    out_dir: &Path,
) -> Result<ProtectOutput> {
    let (x, format) = load_image(input)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).ok_or_else(|| {
        Error::Config(format!("{}: cannot derive an output name", input.display()))
    })?;
    let image_path = out_dir.join(format!("{stem}_protected.{}", format.extension()));
    let trace_path = out_dir.join(format!("{stem}_trace.csv"));

    let file = File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
    let mut trace = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::io(&trace_path, std::io::Error::other(e));
    trace
        .write_record(StepRecord::CSV_HEADER)
        .map_err(csv_err)?;
    trace.flush().map_err(|e| Error::io(&trace_path, e))?;

    let mut write_failure = None;
    let result = protect_observed(&x, bundle, cfg, |rec, _| {
        if write_failure.is_some() {
            return;
        }
        let written = trace
            .write_record(trace_row(rec))
            .map_err(csv_err)
            .and_then(|()| trace.flush().map_err(|e| Error::io(&trace_path, e)));
        if let Err(e) = written {
            write_failure = Some(e);
        }
    });
    if let Some(e) = write_failure {
        return Err(e);
    }
    let protected = result?;
    save_image(&image_path, &protected.image)?;
    Ok(ProtectOutput {
        input: input.to_path_buf(),
        image: image_path,
        trace: trace_path,
        report: protected.report,
    })
}

/// All metrics plus one robustness record per purifier.
pub fn cmd_evaluate(
    bundle: &ModelBundle,
    clean: &Tensor,
    protected: &Tensor,
    purifiers: &[Purifier],
    loss: &LossConfig,
) -> Result<(MetricReport, Vec<RobustnessRecord>)> {
    if clean.shape() != protected.shape() {
        return Err(Error::InvalidArgument(format!(
            "clean image is {:?} but protected image is {:?}",
            clean.shape(),
            protected.shape()
        )));
    }
    let metrics = MetricReport::compute(bundle, clean, protected)?;
    let records = evaluate_robustness(clean, protected, bundle, purifiers, loss)?;
    Ok((metrics, records))
}

/// `metric,value` rows, a blank line, then the robustness block.
pub fn format_evaluation(m: &MetricReport, records: &[RobustnessRecord]) -> String {
    let mut s = String::from("metric,value\n");
    s += &format!(
        "l2,{:.3}\npsnr,{:.3}\nssim,{:.6}\nfr,{:.6}\nism_toy,{:.6}\n",
        m.l2, m.psnr, m.ssim, m.fr, m.ism_toy
    );
    s.push('\n');
    s += &ROBUSTNESS_HEADER.join(",");
    s.push('\n');
    for r in records {
        let l = &r.losses;
        s += &format!(
            "{},{},{:.6},{:.6},{:.6},{},{},{},{},{}\n",
            r.purifier,
            r.params,
            r.residual_energy,
            r.ism_toy,
            r.detector_failure,
            l.proj,
            l.attn,
            l.mtcnn,
            l.id,
            l.total
        );
    }
    s
}

/// Fixed-width table: item, maximum relative error, coordinates, verdict.
pub fn format_gradcheck(items: &[CheckItem]) -> String {
    let width = items.iter().map(|i| i.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!(
        "{:<width$}  {:>12}  {:>6}  result\n",
        "item", "max_rel_err", "coords"
    );
    for i in items {
        let verdict = if i.passed() { "PASS" } else { "FAIL" };
        s += &format!(
            "{:<width$}  {:>12.3e}  {:>6}  {verdict}\n",
            i.name, i.max_rel_error, i.coords
        );
    }
    let failed = items.iter().filter(|i| !i.passed()).count();
    s += &format!(
        "{} of {} checks passed (tolerance {:e})\n",
        items.len() - failed,
        items.len(),
        gradcheck::TOLERANCE
    );
    s
}

/// Parses a λ grid such as `proj=-1,-0.5;attn=0,1` and expands it over the
/// base weights. Every combination is validated before any is run.
pub fn expand_grid(grid: &str, base: &LossWeights) -> Result<Vec<LossWeights>> {
    let mut axes: Vec<Vec<f64>> = base.as_array().iter().map(|&w| vec![w]).collect();
    let mut seen = [false; 4];
    for part in grid.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part.split_once('=').ok_or_else(|| {
            Error::Config(format!("lambda grid entry '{part}' is not term=v1,v2,..."))
        })?;
        let idx = match key.trim() {
            "proj" => 0,
            "attn" => 1,
            "mtcnn" => 2,
            "id" => 3,
            other => {
                return Err(Error::Config(format!(
                    "unknown lambda grid term '{other}' (expected proj, attn, mtcnn or id)"
                )))
            }
        };
        if std::mem::replace(&mut seen[idx], true) {
            return Err(Error::Config(format!(
                "lambda grid term '{}' given twice",
                key.trim()
            )));
        }
        let parsed = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Config(format!("bad lambda value '{}'", v.trim())))
            })
            .collect::<Result<Vec<f64>>>()?;
        axes[idx] = parsed;
    }
    let size: usize = axes.iter().map(Vec::len).product();
    if size > MAX_GRID {
        return Err(Error::Config(format!(
            "lambda grid has {size} combinations; the limit is {MAX_GRID}"
        )));
    }
    let mut combos = Vec::with_capacity(size);
    for &p in &axes[0] {
        for &a in &axes[1] {
            for &m in &axes[2] {
                for &i in &axes[3] {
                    let w = LossWeights::new(p, a, m, i).map_err(|e| {
                        Error::Config(format!(
                            "lambda combination ({p}, {a}, {m}, {i}) rejected: {e}"
                        ))
                    })?;
                    combos.push(w);
                }
            }
        }
    }
    Ok(combos)
}

/// One ranked grid entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    /// Position of the combination in expansion order.
    pub combo: usize,
    pub weights: LossWeights,
    pub score: f64,
    pub initial: LossValues,
    pub last: LossValues,
}

/// Protects `x` once per combination and ranks by score, best first. Each
/// loss's improvement (initial minus final value; every term is minimised)
/// is divided by the largest absolute improvement of that loss across the
/// grid, and the score sums the four ratios. Ties keep expansion order.
pub fn cmd_grid(
    x: &Tensor,
    bundle: &ModelBundle,
    base: &AttackConfig,
    combos: &[LossWeights],
) -> Result<Vec<GridRow>> {
    let runs = combos
        .par_iter()
        .map(|w| {
            let mut cfg = base.clone();
            cfg.loss.weights = *w;
            protect(x, bundle, &cfg).map(|p| p.report)
        })
        .collect::<Result<Vec<_>>>()?;
    let gains: Vec<[f64; 4]> = runs
        .iter()
        .map(|r| {
            let (a, b) = (r.initial.components(), r.final_losses().components());
            [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]]
        })
        .collect();
    let mut scale = [0.0f64; 4];
    for g in &gains {
        for (s, v) in scale.iter_mut().zip(g) {
            *s = s.max(v.abs());
        }
    }
    let mut rows: Vec<GridRow> = runs
        .iter()
        .zip(&gains)
        .enumerate()
        .map(|(combo, (r, g))| GridRow {
            combo,
            weights: combos[combo],
            score: g
                .iter()
                .zip(scale)
                .map(|(v, s)| if s > 0.0 { v / s } else { 0.0 })
                .sum(),
            initial: r.initial,
            last: r.final_losses(),
        })
        .collect();
    rows.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(rows)
}

pub fn format_grid(rows: &[GridRow]) -> String {
    let mut s = GRID_HEADER.join(",");
    s.push('\n');
    for (rank, r) in rows.iter().enumerate() {
        let w = r.weights.as_array();
        let l = &r.last;
        s += &format!(
            "{},{},{},{},{},{},{:.6},{},{},{},{},{}\n",
            rank + 1,
            r.combo,
            w[0],
            w[1],
            w[2],
            w[3],
            r.score,
            l.proj,
            l.attn,
            l.mtcnn,
            l.id,
            l.objective
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expansion() {
        let base = LossWeights::default();
        assert_eq!(expand_grid("", &base).unwrap(), vec![base]);
        let g = expand_grid("proj=-1,-0.5; attn=0,1,2", &base).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g[1].as_array(), [-1.0, 1.0, 1.0, -1.0]);
        assert!(expand_grid("proj=1", &base).is_err());
        assert!(expand_grid("foo=1", &base).is_err());
        assert!(expand_grid("proj=-1;proj=-2", &base).is_err());
        assert!(expand_grid("proj=x", &base).is_err());
    }

    #[test]
    fn grid_limit_and_zero_combo() {
        let base = LossWeights::default();
        let nine = "-1,-2,-3,-4,-5,-6,-7,-8,-9";
        let pos = "1,2,3,4,5,6,7,8,9";
        assert_eq!(
            expand_grid(&format!("proj={nine};attn={pos}"), &base)
                .unwrap()
                .len(),
            81
        );
        let err = expand_grid(&format!("proj={nine};attn={pos};mtcnn=1,2"), &base).unwrap_err();
        assert!(err.to_string().contains("81"), "{err}");
        let err = expand_grid("proj=0;attn=0;mtcnn=0;id=0,-1", &base).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn usage_errors_exit_one() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run(["advshield", "frobnicate"], &mut out, &mut err), 1);
        assert_eq!(run(["advshield", "gen-weights"], &mut out, &mut err), 1);
        assert_eq!(
            run(
                ["advshield", "--jobs", "0", "gradcheck"],
                &mut out,
                &mut err
            ),
            1
        );
        assert_eq!(run(["advshield", "--help"], &mut out, &mut err), 0);
    }
}
