use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ctxagg::archive::{self, write_atomic};
use ctxagg::cli_support::{cost_table, default_cost_reports, params_report, params_table};
use ctxagg::config::RunConfig;
use ctxagg::{export, gradsuite, parallel, selftest};
use ctxagg_core::accounting::{reference_reconciliation, RoiBudget};
use ctxagg_core::hroie::Task;
use ctxagg_core::ops::RoiBox;
use ctxagg_core::toy::eval::eval_scene;
use ctxagg_core::toy::{ProposalMode, ToyDetector, Trainer};
use ctxagg_core::{ParamStore, Tape};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "ctxagg",
    version,
    about = "Multi-scale context aggregation toolkit"
)]
struct Cli {
    /// JSON run config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient check of every module.
    Gradcheck,
    /// Parameter breakdown of one module.
    Params {
        #[arg(long)]
        module: String,
        #[arg(long, default_value_t = 256)]
        channels: usize,
        /// Number of pyramid levels, starting at level 2.
        #[arg(long)]
        levels: Option<usize>,
        /// Stacked blocks (densefpn only).
        #[arg(long)]
        depth: Option<usize>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// MAC counts of the context modules and the reference reconciliation.
    Flops {
        #[arg(long, default_value_t = 512)]
        height: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
    },
    /// Train the toy detector, writing the loss log and a checkpoint.
    Train,
    /// Evaluate a checkpoint on held-out scenes.
    Eval {
        /// Checkpoint directory; defaults to `<out>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Proposals::Grid)]
        proposals: Proposals,
        /// Box jitter as a fraction of side length for `--proposals jitter`.
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
    },
    /// Write context gate and attention maps for one scene.
    DumpMaps {
        /// Checkpoint directory; without one the freshly initialized model is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Held-out scene index.
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
    /// Run the worked-example catalogue.
    Selftest {
        /// Only run checks whose module or name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Proposals {
    Grid,
    Jitter,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(
        path,
        (serde_json::to_string_pretty(value)? + "\n").as_bytes(),
    )
}

/// Returns whether every check passed.
fn run(cli: Cli) -> Result<bool> {
    let cfg = resolve_config(&cli)?;
    let out = cli.out.clone();
    match cli.command {
        Command::Gradcheck => {
            let cases = gradsuite::gradient_suite(cfg.seed)?;
            println!("{:<18}{:>14}{:>10}", "module", "max rel err", "coords");
            for (module, err, coords) in gradsuite::per_module(&cases) {
                println!("{module:<18}{err:>14.3e}{coords:>10}");
            }
            let failed: Vec<_> = cases.iter().filter(|c| !c.passes()).collect();
            for c in &failed {
                println!(
                    "FAIL {}/{}: {:.3e}",
                    c.module, c.name, c.report.max_rel_error
                );
            }
            println!(
                "tolerance {:e}: {}",
                gradsuite::TOLERANCE,
                if failed.is_empty() { "pass" } else { "fail" }
            );
            Ok(failed.is_empty())
        }
        Command::Params {
            module,
            channels,
            levels,
            depth,
            json,
        } => {
            let r = params_report(&module, channels, levels, depth)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                print!("{}", params_table(&r));
            }
            Ok(true)
        }
        Command::Flops { height, width } => {
            let reports = default_cost_reports((height, width), RoiBudget::default())?;
            print!("{}", cost_table(&reports));
            let rows = reference_reconciliation()?;
            println!();
            println!(
                "{:<70}{:>16}{:>16}{:>10}  check",
                "reconciliation", "measured", "reference", "rel err"
            );
            for r in &rows {
                let check = match r.tolerance {
                    Some(t) if r.passes() => format!("pass (<= {t})"),
                    Some(t) => format!("FAIL (> {t})"),
                    None => "info".into(),
                };
                println!(
                    "{:<70}{:>16.0}{:>16.0}{:>10.4}  {check}",
                    r.label, r.measured, r.reference, r.rel_error
                );
            }
            write_json(
                &out.join("flops.json"),
                &serde_json::json!({ "reports": reports, "reconciliation": rows }),
            )?;
            Ok(rows.iter().all(|r| r.passes()))
        }
        Command::Train => {
            let mut trainer = Trainer::new(&cfg.toy, cfg.seed)?;
            for _ in 0..cfg.toy.train.iterations {
                let r = trainer.step()?;
                if r.iteration % 10 == 0 || r.iteration + 1 == cfg.toy.train.iterations {
                    eprintln!(
                        "iter {:>5}  cls {:.4}  box {:.4}  mask {:.4}  total {:.4}",
                        r.iteration, r.cls_loss, r.box_loss, r.mask_loss, r.total
                    );
                }
            }
            let done = trainer.finish();
            write_atomic(&out.join("config.json"), cfg.to_json().as_bytes())?;
            write_atomic(
                &out.join("loss.csv"),
                export::loss_csv(&done.log.records).as_bytes(),
            )?;
            archive::save(&out.join("checkpoint"), &done.store, &cfg)?;
            let w = cfg.toy.train.loss_window;
            if let (Some(a), Some(b)) = (done.log.initial_loss(w), done.log.final_loss(w)) {
                println!("initial loss {a:.4}  final loss {b:.4}  ratio {:.3}", b / a);
            }
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            proposals,
            jitter,
        } => {
            let dir = checkpoint.unwrap_or_else(|| out.join("checkpoint"));
            let run = archive::load_manifest(&dir)?.config;
            let (model, store) = load_model(&dir, &run)?;
            let mode = match proposals {
                Proposals::Grid => ProposalMode::Grid,
                Proposals::Jitter => ProposalMode::Jitter {
                    fraction: jitter,
                    seed: run.seed,
                },
            };
            let m = parallel::evaluate_parallel(
                &model,
                &store,
                &run.toy,
                mode,
                parallel::thread_count(),
            )?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            write_json(&out.join("eval.json"), &m)?;
            Ok(true)
        }
        Command::DumpMaps { checkpoint, scene } => {
            let (run, model, store) = match checkpoint {
                Some(dir) => {
                    let run = archive::load_manifest(&dir)?.config;
                    let (m, s) = load_model(&dir, &run)?;
                    (run, m, s)
                }
                None => {
                    let mut s = ParamStore::new(cfg.seed);
                    let m = ToyDetector::new(&mut s, &cfg.toy)?;
                    (cfg, m, s)
                }
            };
            dump_maps(&out.join("maps"), &model, &store, &run, scene)?;
            Ok(true)
        }
        Command::Selftest { filter } => {
            let mut checks = selftest::catalogue();
            if let Some(f) = &filter {
                checks.retain(|c| c.module.contains(f.as_str()) || c.name.contains(f.as_str()));
            }
            let outcomes = selftest::run(&checks);
            let mut ok = true;
            for o in &outcomes {
                match &o.error {
                    None => println!("pass  {:<16} {}", o.module, o.name),
                    Some(e) => {
                        ok = false;
                        println!("FAIL  {:<16} {}: {e}", o.module, o.name);
                    }
                }
            }
            let passed = outcomes.iter().filter(|o| o.error.is_none()).count();
            println!("{passed}/{} checks passed", outcomes.len());
            Ok(ok)
        }
    }
}

fn load_model(dir: &Path, run: &RunConfig) -> Result<(ToyDetector, ParamStore)> {
    let mut store = ParamStore::new(run.seed);
    let model = ToyDetector::new(&mut store, &run.toy)?;
    archive::load_params(dir, &mut store)?;
    Ok((model, store))
}

fn dump_maps(
    dir: &Path,
    model: &ToyDetector,
    store: &ParamStore,
    run: &RunConfig,
    k: usize,
) -> Result<()> {
    let scene = eval_scene(&run.toy, k);
    let size = scene.size;
    let mut tape = Tape::new();
    let x = tape.constant(scene.image.clone().reshape([1, 3, size, size])?);
    let c = model.backbone.forward(&mut tape, store, x)?;
    let mut p = model.reducer.reduce_laterals(&mut tape, store, &c)?;
    if let Some(d) = &model.densefpn {
        p = d.forward(&mut tape, store, &p)?;
    }
    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    if let Some(scp) = &model.scp {
        let (next, traces) = scp.forward_traced(&mut tape, store, &p)?;
        for (level, t) in traces {
            let dims = tape.shape(t.gate).dims().to_vec();
            let (h, w) = (dims[2], dims[3]);
            for (name, var) in [("gate", t.gate), ("attention", t.attention)] {
                let v = &tape.value(var).data()[..h * w];
                files.push((
                    dir.join(format!("scp_l{level}_{name}.pgm")),
                    export::pgm(v, h, w)?,
                ));
                files.push((
                    dir.join(format!("scp_l{level}_{name}.csv")),
                    export::map_csv(v, h, w)?.into_bytes(),
                ));
            }
        }
        p = next;
    }
    if let Some(h) = &model.hroie {
        let rois: Vec<RoiBox> = scene
            .instances
            .iter()
            .map(|i| RoiBox::new(0, i.bbox[0], i.bbox[1], i.bbox[2], i.bbox[3]))
            .collect();
        let mut csv = String::from("task,level,mean_gate\n");
        for (task, label) in [(Task::Detection, "detection"), (Task::Mask, "mask")] {
            let f = h.extract(&mut tape, store, &p, &rois, task)?;
            for (level, g) in f.order.iter().zip(&f.gates) {
                let v = tape.value(*g);
                csv.push_str(&format!(
                    "{label},{level},{:?}\n",
                    v.sum() / v.numel() as f64
                ));
            }
        }
        files.push((dir.join("hroie_gates.csv"), csv.into_bytes()));
    }
    if files.is_empty() {
        bail!("the model has neither spatial context nor hierarchical extraction enabled");
    }
    for (path, bytes) in &files {
        write_atomic(path, bytes).with_context(|| format!("dumping {}", path.display()))?;
    }
    println!("wrote {} files to {}", files.len(), dir.display());
    Ok(())
}
