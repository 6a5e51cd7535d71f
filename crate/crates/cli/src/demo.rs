use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use flashbias::attention::{self, PrecisionPlan};
use flashbias::harness::{gen_workload, project};
use flashbias::numerics::{
    prefix_error_trace, worked_example, Normalization, RoundDecision, RoundingEvent, B16,
};
use flashbias::Precision;

use crate::svg::{self, Series};
use crate::{header, spec_fields, CmdResult, Failure, WorkloadArgs};

/// Error of the walkthrough addition with the sticky residual present.
pub const WORKED_ERROR: f64 = -0.014759540557861328;
/// Result without the residual: an exact tie resolved to even.
pub const TIE_RESULT: f64 = -4.6875;

#[derive(Args)]
pub struct DemoArgs {
    /// Start from the bare bf16 value, without the residual of the second token.
    #[arg(long)]
    no_sticky: bool,
    /// Print the trace as JSON.
    #[arg(long)]
    json: bool,
}

pub fn addition_demo(args: &DemoArgs) -> CmdResult {
    header(
        "addition-demo",
        &[
            ("sticky", (!args.no_sticky).to_string()),
            ("json", args.json.to_string()),
        ],
    );
    let t = worked_example(!args.no_sticky);
    let (label, want, got) = if args.no_sticky {
        ("result", TIE_RESULT, t.result.to_f64())
    } else {
        ("error", WORKED_ERROR, t.error)
    };
    let matched = got.to_bits() == want.to_bits();

    if args.json {
        let v = serde_json::json!({
            "sticky": !args.no_sticky,
            "trace": t,
            "checked": label,
            "expected": want,
            "matches": matched,
        });
        println!(
            "{}",
            serde_json::to_string_pretty(&v).expect("trace serializes")
        );
    } else {
        let acc = if t.lhs.fraction_bits == 23 {
            "f32 accumulator"
        } else {
            "bf16 accumulator"
        };
        println!(
            "operand a ({acc})  {:<36} {:?}",
            t.lhs.bit_string(),
            t.lhs.to_f64()
        );
        println!(
            "operand b (bf16 term)       {:<36} {:?}",
            t.rhs.bit_string(),
            t.rhs.to_f64()
        );
        println!("alignment shift             {}", t.alignment_shift);
        println!("aligned a                   {}", t.aligned_lhs);
        println!("aligned b                   {}", t.aligned_rhs);
        println!("significand sum             {}", t.raw_sum);
        let norm = match t.normalization {
            Normalization::None => "none".to_string(),
            Normalization::RightShift(k) => format!("right shift by {k}, exponent + {k}"),
            Normalization::LeftShift(k) => format!("left shift by {k}, exponent - {k}"),
        };
        println!("normalization               {norm}");
        println!("normalized (kept|round|sticky tail)  {}", t.normalized);
        println!("rounding bit                {}", t.round_bit as u8);
        println!("sticky bit                  {}", t.sticky as u8);
        let decision = match t.decision {
            RoundDecision::Exact => "exact, nothing to round",
            RoundDecision::Down => "round toward zero",
            RoundDecision::Up => "round away from zero",
            RoundDecision::TieToEven { up: true } => "tie, to even (away from zero)",
            RoundDecision::TieToEven { up: false } => "tie, to even (toward zero)",
        };
        println!("decision                    {decision}");
        println!("result bits                 {}", t.result.bit_string());
        println!("result                      {:?}", t.result.to_f64());
        println!("exact sum                   {:?}", t.exact);
        println!("error (result - exact)      {:?}", t.error);
        println!(
            "expected {label:<19} {want:?}  {}",
            if matched { "MATCH" } else { "MISMATCH" }
        );
    }
    if matched {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{label} {got:?} != expected {want:?}"
        )))
    }
}

#[derive(Args)]
pub struct TraceArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Query row T. Defaults to the attract row with the most negative final error.
    #[arg(long)]
    row: Option<usize>,
    /// Output feature i. Defaults to the designated feature with the most negative final error.
    #[arg(long)]
    feature: Option<usize>,
    /// Explicit probabilities instead of a workload (comma-separated, rounded to bf16).
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        requires = "v"
    )]
    p: Option<Vec<f64>>,
    /// Explicit values matching `--p`.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        requires = "p"
    )]
    v: Option<Vec<f64>>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a step plot of the error column.
    #[arg(long)]
    svg: Option<PathBuf>,
}

fn trace_inputs(args: &TraceArgs) -> Result<(Vec<B16>, Vec<B16>, String), Failure> {
    if let (Some(p), Some(v)) = (&args.p, &args.v) {
        if p.len() != v.len() || p.is_empty() {
            return Err(Failure::Usage(format!(
                "--p has {} entries, --v has {}",
                p.len(),
                v.len()
            )));
        }
        let to = |xs: &[f64]| xs.iter().map(|&x| B16::from_f64(x)).collect::<Vec<_>>();
        header(
            "trace",
            &[
                ("inputs", "explicit".into()),
                ("terms", p.len().to_string()),
            ],
        );
        return Ok((to(p), to(v), "explicit".into()));
    }
    let spec = args.workload.resolve()?;
    let w = gen_workload(&spec)?;
    if let Some(row) = args.row.filter(|&r| r >= spec.n) {
        return Err(Failure::Usage(format!(
            "--row {row} out of range (n = {})",
            spec.n
        )));
    }
    if let Some(feature) = args.feature.filter(|&f| f >= spec.d) {
        return Err(Failure::Usage(format!(
            "--feature {feature} out of range (d = {})",
            spec.d
        )));
    }
    let x_qk = w.batch.x_qk();
    let q = project(&x_qk, &w.model.w_q, Precision::Lp)?;
    let k = project(&x_qk, &w.model.w_k, Precision::Lp)?;
    let v = project(w.x(), &w.model.w_v, Precision::Lp)?;
    let tape = attention::forward(&q, &k, &v, spec.alpha(), &PrecisionPlan::lp())?;
    let p_of = |t: usize| {
        tape.p_bar
            .row(t)
            .iter()
            .map(|&x| B16::from_f64(x))
            .collect::<Vec<_>>()
    };
    let v_of = |i: usize| v.col(i).into_iter().map(B16::from_f64).collect::<Vec<_>>();

    // unspecified indices: the attract row and designated feature with the
    // largest negative jump in the prefix error, earliest first
    let rows = match args.row {
        Some(r) => vec![r],
        None => w.batch.attract_rows(),
    };
    let features = match args.feature {
        Some(f) => vec![f],
        None => w.model.designated.clone(),
    };
    let mut best: Option<(usize, usize, (f64, usize))> = None;
    for &t in &rows {
        for &i in &features {
            let jump = largest_negative_step(&prefix_error_trace(&p_of(t), &v_of(i))?)
                .unwrap_or((0.0, usize::MAX));
            if best.map_or(true, |b| jump.0 < b.2 .0 || (jump.0 == b.2 .0 && jump.1 < b.2 .1)) {
                best = Some((t, i, jump));
            }
        }
    }
    let (row, feature, _) =
        best.ok_or_else(|| Failure::Usage("workload has no attract rows; pass --row".into()))?;
    let mut fields = spec_fields(&spec);
    fields.push(("row", row.to_string()));
    fields.push(("feature", feature.to_string()));
    fields.push(("plan", "lp".into()));
    header("trace", &fields);
    let (p, vcol) = (p_of(row), v_of(feature));
    Ok((p, vcol, format!("row {row}, feature {feature}")))
}

/// Most negative change between consecutive prefix errors, with its position.
fn largest_negative_step(events: &[RoundingEvent]) -> Option<(f64, usize)> {
    let mut prev = 0.0;
    let mut worst: Option<(f64, usize)> = None;
    for e in events {
        let step = e.error - prev;
        prev = e.error;
        if step < worst.map_or(0.0, |w| w.0) {
            worst = Some((step, e.position));
        }
    }
    worst
}

pub fn write_trace_csv(
    out: &mut impl Write,
    p: &[B16],
    v: &[B16],
    events: &[RoundingEvent],
) -> std::io::Result<()> {
    writeln!(out, "t,p,v,exact,rounded,error,rounded_up,overflow_shift")?;
    for (e, (a, b)) in events.iter().zip(p.iter().zip(v)) {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{},{}",
            e.position,
            a.to_f64(),
            b.to_f64(),
            e.exact,
            e.rounded.to_f64(),
            e.error,
            e.rounded_up as u8,
            e.overflow_shift as u8
        )?;
    }
    Ok(())
}

pub fn trace(args: &TraceArgs) -> CmdResult {
    let (p, v, what) = trace_inputs(args)?;
    let events = prefix_error_trace(&p, &v)?;
    match &args.out {
        Some(path) => write_trace_csv(&mut fs::File::create(path)?, &p, &v, &events)?,
        None => write_trace_csv(&mut std::io::stdout().lock(), &p, &v, &events)?,
    }
    match largest_negative_step(&events) {
        Some((s, t)) => eprintln!("# largest negative error step: t = {t}, step = {s:?}"),
        None => eprintln!("# no negative error step"),
    }
    if let Some(path) = &args.svg {
        let pts: Vec<(f64, f64)> = events
            .iter()
            .map(|e| (e.position as f64, e.error))
            .collect();
        let plot = svg::line_plot(
            &format!("prefix rounding error, {what}"),
            "token position t",
            "bf16(prefix) - prefix",
            &[Series::steps("error", &pts)],
        );
        fs::write(path, plot)?;
    }
    Ok(())
}
