use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use flashbias::harness::{
    evaluate_assertions, gen_batch, record_batches, replay_batches, run_experiment_on,
    ComparisonReport, ExperimentConfig, TrainState, WEIGHT_NAMES,
};

use crate::svg::{self, Series};
use crate::{header, load_config, out_dir, CmdResult, Failure};

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Args)]
pub struct ExperimentArgs {
    /// Experiment config (flat TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory (default: $FLASHBIAS_OUT_DIR, else the current directory).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Save the generated batches to this container file.
    #[arg(long, conflicts_with = "replay")]
    record_batches: Option<PathBuf>,
    /// Train on batches from a recorded container instead of generating them.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Skip the SVG plots.
    #[arg(long)]
    no_svg: bool,
}

pub fn experiment(args: &ExperimentArgs) -> CmdResult {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    let dir = out_dir(&args.out_dir);
    let mut fields = vec![
        ("config", args.config.display().to_string()),
        ("out_dir", dir.display().to_string()),
    ];
    if let Some(p) = &args.replay {
        fields.push(("replay", p.display().to_string()));
    }
    header("experiment", &fields);
    for line in cfg.to_toml().lines() {
        eprintln!("#   {line}");
    }

    let spec = cfg.workload();
    let [arm_a, arm_b] = cfg.arms()?;
    let batches = match &args.replay {
        Some(path) => {
            let (recorded, mut batches) = replay_batches(path)?;
            if recorded != spec {
                return Err(Failure::Usage(format!(
                    "{} was recorded for a different workload",
                    path.display()
                )));
            }
            if batches.len() < cfg.steps {
                return Err(Failure::Usage(format!(
                    "{} holds {} batches, {} steps requested",
                    path.display(),
                    batches.len(),
                    cfg.steps
                )));
            }
            batches.truncate(cfg.steps);
            batches
        }
        None => (0..cfg.steps as u64)
            .map(|s| gen_batch(&spec, s))
            .collect::<Result<Vec<_>, _>>()?,
    };
    fs::create_dir_all(&dir)?;
    if let Some(path) = &args.record_batches {
        record_batches(path, &spec, &batches)?;
    }

    let dump = |arm: &str, state: &TrainState| {
        let path = dir.join(format!("diverged-{arm}.fbc"));
        match state.to_container().and_then(|c| c.write(&path)) {
            Ok(()) => eprintln!(
                "# {arm} diverged at step {}; state written to {}",
                state.step,
                path.display()
            ),
            Err(e) => eprintln!("# {arm} diverged; could not write state: {e}"),
        }
    };
    let report = run_experiment_on(&spec, &batches, &[arm_a, arm_b], &cfg.settings(), &dump)?;

    let mut csv = Vec::new();
    report.write_metrics_csv(&mut csv)?;
    fs::write(dir.join(METRICS_FILE), csv)?;
    fs::write(dir.join(REPORT_FILE), report.to_json()?)?;
    if !args.no_svg {
        write_plots(&report, &dir)?;
    }
    summarize(&report);
    check_assertions(&cfg, &report)
}

fn write_plots(report: &ComparisonReport, dir: &Path) -> CmdResult {
    let cumsum: Vec<Series> = report
        .arms
        .iter()
        .map(|a| {
            let pts = a
                .bias_cumsum
                .iter()
                .enumerate()
                .map(|(s, &c)| ((s + 1) as f64, c))
                .collect();
            Series::new(a.arm.name.clone(), pts)
        })
        .collect();
    fs::write(
        dir.join("bias_cumsum.svg"),
        svg::line_plot(
            "cumulative sum of (delta_lp - delta_hp)",
            "step",
            "bias cumsum",
            &cumsum,
        ),
    )?;
    let norms: Vec<Series> = report
        .arms
        .iter()
        .flat_map(|a| {
            WEIGHT_NAMES.iter().enumerate().map(move |(i, w)| {
                let pts = a
                    .norms
                    .steps
                    .iter()
                    .zip(a.norms.column(i))
                    .map(|(&s, n)| (s as f64, n))
                    .collect();
                Series::new(format!("{} {w}", a.arm.name), pts)
            })
        })
        .collect();
    fs::write(
        dir.join("spectral_norms.svg"),
        svg::line_plot(
            "spectral norm of the projection weights",
            "step",
            "spectral norm",
            &norms,
        ),
    )?;
    Ok(())
}

fn summarize(report: &ComparisonReport) {
    println!("arm,steps,final_loss,final_bias_cumsum,growth_W_Q,growth_W_K,growth_W_V,similarity");
    for a in &report.arms {
        let g: Vec<String> = WEIGHT_NAMES
            .iter()
            .map(|w| format!("{:?}", a.norm_growth(w).unwrap_or(0.0)))
            .collect();
        println!(
            "{},{},{:?},{:?},{},{:?}",
            a.arm.name,
            a.loss.len(),
            a.loss.last().copied().unwrap_or(f64::NAN),
            a.final_cumsum(),
            g.join(","),
            a.final_similarity
        );
    }
}

fn check_assertions(cfg: &ExperimentConfig, report: &ComparisonReport) -> CmdResult {
    let outcomes = evaluate_assertions(cfg, report);
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.name.as_str())
        .collect();
    for o in &outcomes {
        println!(
            "assert {} {}: {}",
            o.name,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "assertions failed: {}",
            failed.join(", ")
        )))
    }
}

#[derive(Args)]
pub struct ReportArgs {
    /// An experiment output directory, or a report.json file.
    #[arg(long)]
    input: PathBuf,
    /// Re-evaluate the assertions of this config against the stored report.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-render the plots into this directory.
    #[arg(long)]
    svg_dir: Option<PathBuf>,
}

pub fn report(args: &ReportArgs) -> CmdResult {
    let (json_path, dir) = if args.input.is_dir() {
        (args.input.join(REPORT_FILE), args.input.clone())
    } else {
        let dir = args
            .input
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        (args.input.clone(), dir)
    };
    header("report", &[("input", json_path.display().to_string())]);
    let text = fs::read_to_string(&json_path)
        .map_err(|e| Failure::Usage(format!("{}: {e}", json_path.display())))?;
    let report = ComparisonReport::from_json(&text)
        .map_err(|e| Failure::Usage(format!("{}: {e}", json_path.display())))?;

    // both files must be reproducible byte for byte from the parsed report
    if report.to_json()? != text {
        return Err(Failure::Check(format!(
            "{} does not round-trip",
            json_path.display()
        )));
    }
    println!("{}: round trip ok", json_path.display());
    let csv_path = dir.join(METRICS_FILE);
    if csv_path.exists() {
        let mut csv = Vec::new();
        report.write_metrics_csv(&mut csv)?;
        if fs::read(&csv_path)? != csv {
            return Err(Failure::Check(format!(
                "{} disagrees with {}",
                csv_path.display(),
                json_path.display()
            )));
        }
        println!("{}: matches report", csv_path.display());
    }
    summarize(&report);
    if let Some(d) = &args.svg_dir {
        fs::create_dir_all(d)?;
        write_plots(&report, d)?;
    }
    match &args.config {
        Some(path) => check_assertions(&load_config(path)?, &report),
        None => Ok(()),
    }
}
