use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use flashbias::attention::{self, PrecisionPlan};
use flashbias::diagnostics::{similarity_summary, GradErrorReport};
use flashbias::flash::{
    flash_backward, flash_delta_diff, flash_forward, recompute_probabilities, TileConfig,
};
use flashbias::harness::{gen_workload, project};
use flashbias::{Grid, Mat, Precision};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::svg;
use crate::{header, spec_fields, CmdResult, Failure, WorkloadArgs};

fn plan_named(name: &str) -> Result<PrecisionPlan, Failure> {
    PrecisionPlan::preset(name).ok_or_else(|| {
        Failure::Usage(format!(
            "unknown plan `{name}` (expected lp, hp, exact, hp-pv, hp-delta, dp-p, recompute-pv)"
        ))
    })
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64, grid: Grid) -> Mat {
    let data = (0..rows * cols)
        .map(|_| scale * rng.random_range(-1.0..1.0))
        .collect();
    Mat::rounded(rows, cols, data, grid).expect("finite data")
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[derive(Args)]
pub struct GradArgs {
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

pub fn gradcheck(args: &GradArgs) -> CmdResult {
    header(
        "gradcheck",
        &[
            ("n", args.n.to_string()),
            ("d", args.d.to_string()),
            ("seed", args.seed.to_string()),
            ("step", args.step.to_string()),
            ("tol", args.tol.to_string()),
            ("plan", "exact".into()),
        ],
    );
    if args.n == 0 || args.d == 0 || !(args.step > 0.0) {
        return Err(Failure::Usage(
            "n and d must be positive and step > 0".into(),
        ));
    }
    let (n, d) = (args.n, args.d);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let alpha = 1.0 / (d as f64).sqrt();
    let q = random_mat(&mut rng, n, d, 1.5, Grid::F64);
    let k = random_mat(&mut rng, n, d, 1.5, Grid::F64);
    let v = random_mat(&mut rng, n, d, 1.0, Grid::F64);
    let g = random_mat(&mut rng, n, d, 1.0, Grid::F64);
    let plan = PrecisionPlan::exact();
    let tape = attention::forward(&q, &k, &v, alpha, &plan)?;
    let grads = attention::backward(&tape, &g, &plan)?;

    // scalar loss Σ G ∘ O, whose output gradient is G
    let loss = |ins: &[Mat; 3]| -> f64 {
        let t = attention::forward(&ins[0], &ins[1], &ins[2], alpha, &plan).expect("same shapes");
        t.o().data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    for (which, name, analytic) in [
        (0, "dQ", &grads.dq),
        (1, "dK", &grads.dk),
        (2, "dV", &grads.dv),
    ] {
        let mut ins = [q.clone(), k.clone(), v.clone()];
        let numeric = Mat::from_fn(n, d, Grid::F64, |a, b| {
            let x0 = ins[which].get(a, b);
            ins[which].set(a, b, x0 + args.step);
            let up = loss(&ins);
            ins[which].set(a, b, x0 - args.step);
            let down = loss(&ins);
            ins[which].set(a, b, x0);
            (up - down) / (2.0 * args.step)
        });
        let scale = analytic.max_abs();
        let diff = max_abs_diff(&numeric, analytic);
        let err = if scale == 0.0 { diff } else { diff / scale };
        println!("{name} max relative error {err:e}");
        worst = worst.max(err);
    }
    println!("max relative error {worst:e} (tol {:e})", args.tol);
    if worst < args.tol {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative error {worst:e} >= {:e}",
            args.tol
        )))
    }
}

#[derive(Args)]
pub struct TilingArgs {
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square block sizes to try. Defaults to 1, 2, N/2, N.
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<usize>>,
    #[arg(long, default_value = "exact")]
    plan: String,
    /// Use the stabilized forward for the tiled runs.
    #[arg(long)]
    stabilized: bool,
    #[arg(long, default_value_t = 7.0)]
    beta: f64,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

pub fn tiling_check(args: &TilingArgs) -> CmdResult {
    let plan = plan_named(&args.plan)?;
    let n = args.n;
    if n == 0 || args.d == 0 {
        return Err(Failure::Usage("n and d must be positive".into()));
    }
    let mut blocks = match &args.blocks {
        Some(b) => b.clone(),
        None => [1, 2, n / 2, n].into_iter().filter(|&b| b <= n).collect(),
    };
    blocks.retain(|&b| b > 0);
    blocks.sort_unstable();
    blocks.dedup();
    if let Some(&b) = blocks.iter().find(|&&b| b > n) {
        return Err(Failure::Usage(format!("block size {b} exceeds n = {n}")));
    }
    let list: Vec<String> = blocks.iter().map(|b| b.to_string()).collect();
    header(
        "tiling-check",
        &[
            ("n", n.to_string()),
            ("d", args.d.to_string()),
            ("seed", args.seed.to_string()),
            ("blocks", list.join(",")),
            ("plan", args.plan.clone()),
            ("stabilized", args.stabilized.to_string()),
            ("beta", args.beta.to_string()),
            ("tol", args.tol.to_string()),
        ],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let d = args.d;
    let alpha = 1.0 / (d as f64).sqrt();
    let q = random_mat(&mut rng, n, d, 2.0, Grid::B16);
    let k = random_mat(&mut rng, n, d, 2.0, Grid::B16);
    let v = random_mat(&mut rng, n, d, 1.0, Grid::B16);
    let d_o = random_mat(&mut rng, n, d, 1.0, Grid::F32);
    let tape = attention::forward(&q, &k, &v, alpha, &plan)?;
    let grads = attention::backward(&tape, &d_o, &plan)?;

    println!("block,max_abs_dO,max_abs_dL,max_abs_dQ,max_abs_dK,max_abs_dV");
    let mut worst: f64 = 0.0;
    let mut bitwise = None;
    for &b in &blocks {
        let mut cfg = TileConfig::new(b, b);
        if args.stabilized {
            cfg = cfg.stabilized(args.beta);
        }
        let fwd = flash_forward(&q, &k, &v, alpha, &cfg, &plan)?;
        let fg = flash_backward(&q, &k, &v, alpha, &fwd, &d_o, &cfg, &plan)?;
        let dl = fwd
            .lse
            .data()
            .iter()
            .zip(tape.lse.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let row = [
            max_abs_diff(&fwd.o, tape.o()),
            dl,
            max_abs_diff(&fg.dq, &grads.dq),
            max_abs_diff(&fg.dk, &grads.dk),
            max_abs_diff(&fg.dv, &grads.dv),
        ];
        println!(
            "{b},{:e},{:e},{:e},{:e},{:e}",
            row[0], row[1], row[2], row[3], row[4]
        );
        worst = row.into_iter().fold(worst, f64::max);
        if b == n && !args.stabilized {
            bitwise = Some(
                fwd.o.bits_eq(tape.o())
                    && fwd.lse.bits_eq(&tape.lse)
                    && fg.dq.bits_eq(&grads.dq)
                    && fg.dk.bits_eq(&grads.dk)
                    && fg.dv.bits_eq(&grads.dv),
            );
        }
    }
    println!("max |difference| {worst:e} (tol {:e})", args.tol);
    if let Some(ok) = bitwise {
        println!("B = N bitwise equal: {ok}");
        if !ok {
            return Err(Failure::Check(
                "B = N is not bitwise equal to the reference".into(),
            ));
        }
    }
    if worst <= args.tol {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max |difference| {worst:e} > {:e}",
            args.tol
        )))
    }
}

#[derive(Args)]
pub struct DiffArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[arg(long, default_value = "lp")]
    plan: String,
    /// Query block size (defaults to n: untiled).
    #[arg(long)]
    block_rows: Option<usize>,
    /// Key block size (defaults to n).
    #[arg(long)]
    block_cols: Option<usize>,
    #[arg(long)]
    stabilized: bool,
    #[arg(long, default_value_t = 7.0)]
    beta: f64,
    /// Per-token CSV destination instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the full gradient-error report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Heatmap of the rank-1 term similarity matrix.
    #[arg(long)]
    svg: Option<PathBuf>,
}

pub fn attn_diff(args: &DiffArgs) -> CmdResult {
    let spec = args.workload.resolve()?;
    let plan = plan_named(&args.plan)?;
    let mut cfg = TileConfig::new(
        args.block_rows.unwrap_or(spec.n),
        args.block_cols.unwrap_or(spec.n),
    );
    if args.stabilized {
        cfg = cfg.stabilized(args.beta);
    }
    cfg.validate(spec.n, spec.n)?;
    let mut fields = spec_fields(&spec);
    fields.extend([
        ("plan", args.plan.clone()),
        ("block_rows", cfg.block_rows.to_string()),
        ("block_cols", cfg.block_cols.to_string()),
        ("stabilized", cfg.stabilized.to_string()),
        ("beta", cfg.beta.to_string()),
    ]);
    header("attn-diff", &fields);

    let w = gen_workload(&spec)?;
    let alpha = spec.alpha();
    let x_qk = w.batch.x_qk();
    let mode = if plan.any_lp() {
        Precision::Lp
    } else {
        plan.score_mode
    };
    let q = project(&x_qk, &w.model.w_q, mode)?;
    let k = project(&x_qk, &w.model.w_k, mode)?;
    let v = project(w.x(), &w.model.w_v, mode)?;
    let fwd = flash_forward(&q, &k, &v, alpha, &cfg, &plan)?;
    let scale = 2.0 / fwd.o.data().len() as f64;
    let d_o = fwd
        .o
        .zip_map(w.targets(), Grid::F32, |a, b| scale * (a - b))?;
    let coeffs = flash_delta_diff(&fwd, &d_o)?;
    let p = recompute_probabilities(
        &q,
        &k,
        alpha,
        &fwd.lse,
        &plan,
        plan.backward_mode.operand_grid(),
    );
    let report = GradErrorReport::from_parts(coeffs, &p, &k, &x_qk, alpha)?;
    let o_hp = fwd.o_hp.as_ref().expect("flash forward keeps the f32 dual");

    let write = |out: &mut dyn Write| -> std::io::Result<()> {
        writeln!(out, "token,attract,delta_diff,max_abs_o_err")?;
        for t in 0..spec.n {
            let err = fwd
                .o
                .row(t)
                .iter()
                .zip(o_hp.row(t))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            writeln!(
                out,
                "{t},{},{:?},{:?}",
                w.batch.attract[t] as u8,
                report.coeffs.get(t),
                err
            )?;
        }
        Ok(())
    };
    match &args.out {
        Some(path) => write(&mut fs::File::create(path)?)?,
        None => write(&mut std::io::stdout().lock())?,
    }
    let rows = w.batch.attract_rows();
    let positive = rows.iter().filter(|&&t| report.coeffs.get(t) > 0.0).count();
    eprintln!("# bias_sum = {:?}", report.bias_sum);
    eprintln!(
        "# attract rows with delta_diff > 0: {positive}/{}",
        rows.len()
    );
    eprintln!("# stabilized rows adjusted: {}", fwd.adjusted_rows);
    eprintln!(
        "# similarity > 0.9: {:.4}",
        similarity_summary(&report, 0.9)?
    );
    eprintln!("# low-rank residual: {:.4e}", report.low_rank_residual);
    if let Some(path) = &args.report {
        fs::write(path, report.to_json()?)?;
    }
    if let Some(path) = &args.svg {
        let n = report.similarity.rows();
        fs::write(
            path,
            svg::heatmap("rank-1 term cosine similarity", n, report.similarity.data()),
        )?;
    }
    Ok(())
}
