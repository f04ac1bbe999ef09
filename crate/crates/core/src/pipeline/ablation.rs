use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Split};
use crate::error::{Error, Result};
use crate::evalkit::{fmt_num, MetricSummary};
use crate::objectives::DomainMode;

use super::checkpoint::{Checkpoint, RunLog};
use super::data::Prepared;
use super::eval::{evaluate, EvalReport};
use super::plan::{ContrastMode, StagePlan};
use super::train::train_all;

/// One point of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub domain_mode: DomainMode,
    pub contrast_mode: ContrastMode,
    pub acceleration: u32,
}

impl Cell {
    pub fn new(domain_mode: DomainMode, contrast_mode: ContrastMode, acceleration: u32) -> Self {
        Self {
            domain_mode,
            contrast_mode,
            acceleration,
        }
    }

    pub fn id(&self) -> String {
        format!("{}-{}-{}x", self.domain_mode, self.contrast_mode, self.acceleration)
    }

    /// Parse `dual,fused,4x` (or the `dual-fused-4x` id form).
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split([',', '-']).map(str::trim).collect();
        let [dm, cm, acc] = parts.as_slice() else {
            return Err(Error::invalid(format!(
                "grid cell `{s}` must look like `dual,fused,4x`"
            )));
        };
        let acc = acc.strip_suffix(['x', 'X']).unwrap_or(acc);
        let acceleration = acc
            .parse()
            .map_err(|_| Error::invalid(format!("bad acceleration `{acc}` in grid cell `{s}`")))?;
        Ok(Self::new(DomainMode::parse(dm)?, ContrastMode::parse(cm)?, acceleration))
    }

    /// Every combination of the given axes, domain mode outermost.
    pub fn grid(domains: &[DomainMode], contrasts: &[ContrastMode], accels: &[u32]) -> Vec<Cell> {
        domains
            .iter()
            .flat_map(|&d| {
                contrasts
                    .iter()
                    .flat_map(move |&c| accels.iter().map(move |&a| Cell::new(d, c, a)))
            })
            .collect()
    }

    pub fn plan(&self, base: &StagePlan) -> StagePlan {
        StagePlan {
            domain_mode: self.domain_mode,
            contrast_mode: self.contrast_mode,
            acceleration: self.acceleration,
            ..base.clone()
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub checkpoints: Vec<Checkpoint>,
    pub logs: Vec<RunLog>,
    pub report: EvalReport,
}

impl CellResult {
    pub fn row(&self) -> AblationRow {
        AblationRow {
            cell: self.cell,
            image: self.report.final_summary("image").copied(),
            kspace: self.report.final_summary("kspace").copied(),
        }
    }
}

/// Train every stage of one cell and evaluate it on the test split.
pub fn run_cell(cell: Cell, dataset: &Dataset, base: &StagePlan) -> Result<CellResult> {
    let plan = cell.plan(base);
    plan.validate()?;
    let prep = Prepared::new(dataset, &plan.make_mask(dataset.manifest.config.size)?)?;
    let trained = train_all(&prep, &plan)?;
    let (checkpoints, logs): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    let report = evaluate(&checkpoints, &prep, Split::Test)?;
    Ok(CellResult {
        cell,
        checkpoints,
        logs,
        report,
    })
}

/// Run every cell, at most `workers` at a time. Results come back in grid
/// order and do not depend on `workers`.
pub fn run_ablation(grid: &[Cell], dataset: &Dataset, base: &StagePlan, workers: usize) -> Result<Vec<CellResult>> {
    if grid.is_empty() {
        return Err(Error::invalid("ablation grid is empty"));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = grid.iter().find(|c| !seen.insert(**c)) {
        return Err(Error::invalid(format!("grid cell {dup} listed twice")));
    }
    #[cfg(feature = "parallel")]
    if workers > 1 && grid.len() > 1 && crate::par::is_parallel() {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.min(grid.len()))
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
        return pool.install(|| grid.par_iter().map(|&c| run_cell(c, dataset, base)).collect());
    }
    let _ = workers;
    grid.iter().map(|&c| run_cell(c, dataset, base)).collect()
}

/// One line of the ablation table: final image- and k-branch metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: Cell,
    pub image: Option<MetricSummary>,
    pub kspace: Option<MetricSummary>,
}

pub const ABLATION_HEADER: &str = "cell_id,domain_mode,contrast_mode,accel,\
image_psnr_mean,image_psnr_std,image_ssim_mean,image_ssim_std,\
kspace_psnr_mean,kspace_psnr_std,kspace_ssim_mean,kspace_ssim_std,n";

/// Wide table, one row per cell; branches a cell does not train read `NA`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let cols = |s: Option<MetricSummary>| match s {
        Some(s) => [s.psnr_mean, s.psnr_std, s.ssim_mean, s.ssim_std].map(fmt_num).join(","),
        None => ["NA"; 4].join(","),
    };
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let n = r.image.or(r.kspace).map_or(0, |s| s.n);
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.cell.id(),
            r.cell.domain_mode,
            r.cell.contrast_mode,
            r.cell.acceleration,
            cols(r.image),
            cols(r.kspace),
            n
        )
        .expect("string write");
    }
    out
}
