use serde::{Deserialize, Serialize};

use super::workload::{gen_workload, project, WorkloadSpec};
use crate::attention::{self, PrecisionPlan};
use crate::flash::{flash_delta_diff, flash_forward, TileConfig};
use crate::numerics::{Grid, Precision};
use crate::Result;

/// One forward comparison on a generated workload, restricted to the
/// attract rows and the designated negative features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TieTrial {
    pub attract_rows: usize,
    /// Smallest number of unit entries of `P̄` over the attract rows.
    pub min_unit_probs: usize,
    /// Mean of `(O_lp − O_hp)` over attract rows and designated features.
    pub mean_o_err: f64,
    /// Mean of `(δ_lp − δ_hp)` over attract rows.
    pub mean_delta_diff: f64,
    /// Largest `dO` in the designated features of attract rows.
    pub max_designated_do: f64,
    /// `Σ_T (δ_lp − δ_hp)` over all rows, standard forward.
    pub sum_delta_diff: f64,
    /// Same with the stabilized forward.
    pub sum_delta_diff_stabilized: f64,
}

pub fn tie_trial(spec: &WorkloadSpec, beta: f64) -> Result<TieTrial> {
    let w = gen_workload(spec)?;
    let alpha = spec.alpha();
    let x_qk = w.batch.x_qk();
    let q = project(&x_qk, &w.model.w_q, Precision::Lp)?;
    let k = project(&x_qk, &w.model.w_k, Precision::Lp)?;
    let v = project(w.x(), &w.model.w_v, Precision::Lp)?;
    let plan = PrecisionPlan::lp();
    let tape = attention::forward(&q, &k, &v, alpha, &plan)?;
    let o = tape.o();
    let scale = 2.0 / o.data().len() as f64;
    let d_o = o.zip_map(w.targets(), Grid::F32, |a, b| scale * (a - b))?;
    let dd = attention::delta_diff(&tape, &d_o)?;
    let o_hp = tape.o_hp()?;

    let rows = w.batch.attract_rows();
    let designated = &w.model.designated;
    let (mut o_err, mut max_do) = (0.0, f64::NEG_INFINITY);
    for &t in &rows {
        for &j in designated {
            o_err += o.get(t, j) - o_hp.get(t, j);
            max_do = max_do.max(d_o.get(t, j));
        }
    }
    let cells = (rows.len() * designated.len()).max(1) as f64;
    let units = rows
        .iter()
        .map(|&t| tape.p_bar.row(t).iter().filter(|&&p| p == 1.0).count())
        .min()
        .unwrap_or(0);

    let cfg = TileConfig::untiled(spec.n);
    let sum_of = |cfg: &TileConfig| -> Result<f64> {
        let fwd = flash_forward(&q, &k, &v, alpha, cfg, &plan)?;
        Ok(flash_delta_diff(&fwd, &d_o)?.sum())
    };
    Ok(TieTrial {
        attract_rows: rows.len(),
        min_unit_probs: units,
        mean_o_err: o_err / cells,
        mean_delta_diff: rows.iter().map(|&t| dd.get(t)).sum::<f64>() / rows.len().max(1) as f64,
        max_designated_do: max_do,
        sum_delta_diff: sum_of(&cfg)?,
        sum_delta_diff_stabilized: sum_of(&cfg.stabilized(beta))?,
    })
}
