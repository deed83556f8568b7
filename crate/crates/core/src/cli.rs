//! `dgbs` command-line front end.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_model, RunConfig};
use crate::error::{Error, Result};
use crate::experiment::{self, ClickRecord};
use crate::probability::{self, ModelSpec, Setup};
use crate::reconstruction::{self, ScanPlan};
use crate::state::{output_state, TransferMatrix};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Worker threads; unset or 0 uses every core.
pub const THREADS_ENV: &str = "DGBS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "dgbs", version, about = "Displaced Gaussian boson sampling toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// full, korder, squeezer_only or classical.
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Order of the k-order model.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long = "n-max", global = true)]
    pub n_max: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Pattern distributions per model and their pairwise TVDs.
    Probs,
    /// Click records and, optionally, a three-setting phase scan.
    Simulate,
    /// Kernel reconstruction from a records CSV.
    Reconstruct,
    /// Likelihood ratio of two models on sampled patterns.
    Compare,
    /// Phase-lock simulation.
    Lock,
    /// Loop-hafnian engine against the Fock-space oracle.
    Oracle,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Probs => "probs",
            Command::Simulate => "simulate",
            Command::Reconstruct => "reconstruct",
            Command::Compare => "compare",
            Command::Lock => "lock",
            Command::Oracle => "oracle",
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) => n,
            Err(_) => {
                eprintln!("error: {THREADS_ENV} must be a non-negative integer, got {v:?}");
                return EXIT_USAGE;
            }
        },
        Err(_) => 0,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_DOMAIN;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_DOMAIN
            }
        }
    }
}

/// Configuration with the command-line overrides applied.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    } else {
        cfg.output = cfg.resolve_path(&cfg.output);
    }
    let model = match (&cli.model, cli.k) {
        (Some(m), Some(k)) => Some(format!("{m}:{k}")),
        (Some(m), None) => Some(m.clone()),
        (None, Some(k)) => Some(format!("korder:{k}")),
        (None, None) => None,
    };
    if let Some(m) = model {
        parse_model(&m)?;
        cfg.probs.models = vec![m.clone()];
        cfg.simulate.model = m.clone();
        cfg.compare.model_a = m;
    }
    if let Some(n) = cli.n_max {
        cfg.simulate.n_max = n;
        cfg.compare.max_photons = n;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let transfer = cfg.transfer()?;
    let ctx = Context {
        hash: cfg.hash(&transfer),
        setup: Setup {
            source: cfg.source.clone(),
            transfer,
        },
        cfg,
        command: cli.command,
    };
    std::fs::create_dir_all(&ctx.cfg.output)?;
    match cli.command {
        Command::Probs => cmd_probs(&ctx),
        Command::Simulate => cmd_simulate(&ctx),
        Command::Reconstruct => cmd_reconstruct(&ctx),
        Command::Compare => cmd_compare(&ctx),
        Command::Lock => cmd_lock(&ctx),
        Command::Oracle => cmd_oracle(&ctx),
    }
}

struct Context {
    cfg: RunConfig,
    setup: Setup,
    hash: String,
    command: Command,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.output.join(name)
    }

    /// CSV whose first line is `# config_hash <hash>`.
    fn csv(&self, name: &str, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.path(name))?);
        writeln!(w, "# config_hash {}", self.hash)?;
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn summary(&self, mut value: serde_json::Value) -> Result<()> {
        value["command"] = json!(self.command.name());
        value["config_hash"] = json!(self.hash);
        value["seed"] = json!(self.cfg.seed);
        crate::io::write_json(&self.path("summary.json"), &value)
    }

    fn state_for(&self, model: ModelSpec) -> Result<crate::state::GaussianState> {
        self.setup.state_for(model.kind)
    }

    /// Source state at zero scan phase; the phase is applied by the caller.
    fn origin_state(&self) -> Result<crate::state::GaussianState> {
        output_state(&self.setup.source.with_phi(0.0), &self.setup.transfer)
    }
}

fn slug(label: &str) -> String {
    let s: String = label.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    s.trim_matches('_').to_string()
}

fn cmd_probs(ctx: &Context) -> Result<()> {
    let task = &ctx.cfg.probs;
    let models = task.models.iter().map(|m| parse_model(m)).collect::<Result<Vec<_>>>()?;
    let mut dists = Vec::with_capacity(models.len());
    let mut files = Vec::new();
    for (i, &m) in models.iter().enumerate() {
        let dist = ctx
            .setup
            .enumerate_distribution(task.photons, task.collision_free, m, ctx.cfg.budget)?;
        let name = format!("probs_{i}_{}.csv", slug(&m.kind.label()));
        ctx.csv(&name, |w| dist.write_csv(w))?;
        files.push(name);
        dists.push(dist);
    }
    let mut rows = Vec::new();
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            rows.push((i, j, crate::metrics::tvd(&dists[i], &dists[j])?));
        }
    }
    ctx.csv("tvd.csv", |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["model_a", "model_b", "tvd"])?;
        for &(i, j, t) in &rows {
            out.write_record([models[i].kind.label(), models[j].kind.label(), crate::io::fmt_f64(t)])?;
        }
        out.flush()?;
        Ok(())
    })?;
    ctx.summary(json!({
        "photons": task.photons,
        "patterns": dists.first().map_or(0, |d| d.len()),
        "models": models.iter().map(|m| m.kind.label()).collect::<Vec<_>>(),
        "files": files,
        "unnormalized_totals": dists.iter().map(|d| d.unnormalized_total).collect::<Vec<_>>(),
        "tvd": rows.iter().map(|&(i, j, t)| json!({"a": i, "b": j, "tvd": t})).collect::<Vec<_>>(),
    }))
}

fn lock_trace(ctx: &Context) -> Result<(experiment::LockTrace, experiment::PidConfig, Vec<(usize, usize, f64)>)> {
    let task = &ctx.cfg.lock;
    let state = ctx.origin_state()?;
    let pairs = match &task.pairs {
        Some(p) => p.iter().map(|p| (p.j, p.k, p.sign)).collect(),
        None => experiment::auto_error_pairs(&state, task.pid.setpoint, task.auto_pairs)?,
    };
    let signal = experiment::build_error_signal(&state, &pairs)?;
    let pid = if task.tune {
        let (kp, ki) = experiment::default_gain_grid();
        experiment::tune_pid(&task.drift, &task.pid, &signal, &task.options, &task.tune_seeds, &kp, &ki)?.0
    } else {
        task.pid
    };
    let trace = experiment::pid_lock(&task.drift, &pid, &signal, &task.options, ctx.cfg.seed)?;
    Ok((trace, pid, pairs))
}

fn photon_histogram(clicks: &[ClickRecord], d: usize) -> Vec<u64> {
    let mut h = vec![0u64; d + 1];
    for c in clicks {
        h[c.photons()] += 1;
    }
    h
}

fn cmd_simulate(ctx: &Context) -> Result<()> {
    let task = &ctx.cfg.simulate;
    let model = parse_model(&task.model)?;
    let d = ctx.setup.modes();
    let mut summary = json!({"model": model.kind.label(), "modes": d});
    if task.clicks {
        let (clicks, overflow) = if task.follow_lock {
            let (trace, _, _) = lock_trace(ctx)?;
            if trace.diverged {
                return Err(Error::unphysical("phase lock diverged; refusing to sample"));
            }
            let state = match model.kind {
                probability::ModelKind::Classical => {
                    crate::state::classical_surrogate(&ctx.setup.source.with_phi(0.0), &ctx.setup.transfer)?
                }
                _ => ctx.origin_state()?,
            };
            let clicks = experiment::sample_along_trace(
                &state,
                model,
                &trace,
                task.pulses,
                task.n_max,
                ctx.cfg.seed,
                ctx.cfg.budget,
            )?;
            (clicks, None)
        } else {
            let state = ctx.state_for(model)?;
            let table = experiment::SamplerTable::new(&state, model, task.n_max, ctx.cfg.budget)?;
            let clicks = experiment::sample_table(&table, task.pulses, ctx.cfg.seed, ctx.setup.source.phi, 0);
            (clicks, Some(table.overflow))
        };
        ctx.csv("clicks.csv", |w| experiment::write_clicks_csv(&clicks, d, w))?;
        summary["pulses"] = json!(task.pulses);
        summary["n_max"] = json!(task.n_max);
        summary["clicks"] = json!(clicks.len());
        summary["by_photons"] = json!(photon_histogram(&clicks, d));
        summary["overflow_probability"] = json!(overflow);
    }
    if let Some(scan) = &task.scan {
        let input1 = ctx.origin_state()?;
        let input2 = scan
            .second_input_port
            .map(|p| output_state(&ctx.setup.source.with_phi(0.0).with_coherent_port(Some(p)), &ctx.setup.transfer))
            .transpose()?;
        let mut plan = ScanPlan::uniform(scan.windows, scan.per_window, scan.pulses);
        plan.collisions = scan.collisions;
        plan.threefolds = scan.threefolds;
        let expected = reconstruction::expected_records(&input1, input2.as_ref(), &plan)?;
        let records = if scan.noiseless {
            expected
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
            rng.set_stream(7);
            reconstruction::sample_records(&expected, &mut rng)?
        };
        ctx.csv("records.csv", |w| reconstruction::write_records_csv(&records, w))?;
        summary["scan"] = json!({
            "settings": records.iter().map(|r| r.setting.label()).collect::<Vec<_>>(),
            "bins": plan.phis.len(),
            "pulses_per_setting": scan.pulses,
            "noiseless": scan.noiseless,
        });
    }
    ctx.summary(summary)
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    config_hash: &'a str,
    result: &'a T,
}

fn cmd_reconstruct(ctx: &Context) -> Result<()> {
    let task = &ctx.cfg.reconstruct;
    let path = match &task.records {
        Some(p) => ctx.cfg.resolve_path(p),
        None => ctx.path("records.csv"),
    };
    let records = reconstruction::load_records_csv(&path)
        .map_err(|e| Error::Config(format!("cannot load records {}: {e}", path.display())))?;
    let result = reconstruction::reconstruct(&records, &task.options)?;
    crate::io::write_json(
        &ctx.path("reconstruction.json"),
        &Stamped {
            config_hash: &ctx.hash,
            result: &result,
        },
    )?;
    let mut summary = json!({
        "records": path.file_name().map(|n| n.to_string_lossy().into_owned()),
        "modes": result.d,
        "flags": result.flags.len(),
        "physical": result.physical,
    });
    if task.truth && result.d == ctx.setup.modes() {
        let input1 = ctx.origin_state()?;
        let mu = result.mu.as_ref();
        let has_second = mu.is_some();
        let input2 = if has_second {
            // The second port is not in the records; recover it from the config.
            ctx.cfg
                .simulate
                .scan
                .as_ref()
                .and_then(|s| s.second_input_port)
                .map(|p| output_state(&ctx.setup.source.with_phi(0.0).with_coherent_port(Some(p)), &ctx.setup.transfer))
                .transpose()?
        } else {
            None
        };
        let truth = reconstruction::gauged_truth(&input1, input2.as_ref(), None);
        summary["max_entry_error"] = json!(reconstruction::max_entry_error(&result, &truth));
        if result.physical {
            summary["threefold_tvd"] = json!(reconstruction::threefold_tvd(
                &result.a,
                &result.gamma_vector(),
                &truth.a,
                &crate::state::GammaVector::from_real(&truth.gamma),
                ctx.cfg.budget,
            )?);
        }
    }
    ctx.summary(summary)?;
    if !result.physical {
        return Err(Error::unphysical(format!(
            "reconstructed kernel is unphysical: {}",
            result.physicality_error.as_deref().unwrap_or("no valid covariance")
        )));
    }
    Ok(())
}

fn cmd_compare(ctx: &Context) -> Result<()> {
    let task = &ctx.cfg.compare;
    let (a, b, s) = (
        parse_model(&task.model_a)?,
        parse_model(&task.model_b)?,
        parse_model(&task.sample_model)?,
    );
    let samples = experiment::sample_conditioned(
        &ctx.state_for(s)?,
        s,
        task.min_photons,
        task.max_photons,
        task.samples,
        ctx.cfg.seed,
        ctx.cfg.budget,
    )?;
    let table = |m: ModelSpec| -> Result<crate::metrics::ModelTables> {
        let mut t = crate::metrics::tables_for_state(&ctx.state_for(m)?, &[m.kind], &samples, ctx.cfg.budget)?;
        Ok(t.remove(0))
    };
    let trace = crate::metrics::likelihood_ratio(&samples, &table(a)?, &table(b)?, task.normalization);
    ctx.csv("likelihood.csv", |w| trace.write_csv(w))?;
    ctx.summary(json!({
        "model_a": a.kind.label(),
        "model_b": b.kind.label(),
        "sample_model": s.kind.label(),
        "samples": trace.samples,
        "log_l": trace.log_l,
        "l": trace.l,
        "flagged": trace.flagged,
    }))
}

fn cmd_lock(ctx: &Context) -> Result<()> {
    let (trace, pid, pairs) = lock_trace(ctx)?;
    ctx.csv("lock.csv", |w| trace.write_csv(w))?;
    ctx.summary(json!({
        "pid": pid,
        "pairs": pairs,
        "residual_std": trace.residual_std,
        "residual_mean": trace.residual_mean,
        "unlocked_span": trace.unlocked_span,
        "diverged": trace.diverged,
        "diverged_at": trace.diverged_at,
    }))?;
    if trace.diverged {
        return Err(Error::unphysical(format!(
            "phase lock diverged at t = {:.2} s",
            trace.diverged_at.unwrap_or(0.0)
        )));
    }
    Ok(())
}

fn cmd_oracle(ctx: &Context) -> Result<()> {
    let task = &ctx.cfg.oracle;
    let d = ctx.setup.modes();
    let t: &TransferMatrix = &ctx.setup.transfer;
    let state = ctx.state_for(ModelSpec::full())?;
    let cutoff = match task.cutoff {
        Some(c) => c,
        None => crate::fock::cutoff_for_loss(&ctx.setup.source, t.inputs(), task.tolerance, 40)?
            .max(task.max_photons + 3),
    };
    let patterns: Vec<_> = (0..=task.max_photons)
        .flat_map(|n| {
            if task.collisions {
                probability::all_patterns(d, n)
            } else {
                probability::collision_free_patterns(d, n)
            }
        })
        .collect();
    let oracle = crate::fock::oracle_probabilities(&ctx.setup.source, t, &patterns, cutoff, task.tolerance)?;
    let mut rows = Vec::new();
    for (p, o) in patterns.into_iter().zip(oracle) {
        let engine = probability::pattern_probability(&state, &p, ModelSpec::full())?;
        rows.push((p, engine, o));
    }
    ctx.csv("oracle.csv", |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["pattern", "engine", "oracle", "difference", "truncation_loss", "cutoff"])?;
        for (p, e, o) in &rows {
            out.write_record([
                p.to_string(),
                crate::io::fmt_f64(*e),
                crate::io::fmt_f64(o.probability),
                crate::io::fmt_f64(e - o.probability),
                crate::io::fmt_f64(o.truncation_loss),
                o.cutoff.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    })?;
    let max_diff = rows.iter().map(|(_, e, o)| (e - o.probability).abs()).fold(0.0, f64::max);
    let agree = max_diff <= task.agreement;
    ctx.summary(json!({
        "patterns": rows.len(),
        "max_abs_difference": max_diff,
        "agreement": task.agreement,
        "agree": agree,
    }))?;
    if !agree {
        return Err(Error::unphysical(format!(
            "engine and oracle differ by {max_diff:.3e} (limit {:.1e})",
            task.agreement
        )));
    }
    Ok(())
}

/// Output files of a command, in the order they are written.
pub fn primary_outputs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}
