use std::path::{Path, PathBuf};

use ddmc::acquisition::SamplingMask;
use ddmc::datagen::{Dataset, Split};
use ddmc::evalkit::{metrics_csv, render_report, write_pgm};
use ddmc::objectives::Stage;
use ddmc::pipeline::{
    ablation_csv, evaluate, run_ablation, train_stage, Cell, Checkpoint, Prepared, RunLog, StagePlan,
};

use crate::config::RunConfig;
use crate::CliError;

pub const SNAPSHOT: &str = "config.resolved.toml";

pub struct Ctx {
    /// resolved: every seed explicit
    pub cfg: RunConfig,
    pub force: bool,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn stage_files(dir: &Path, stage: Stage) -> [PathBuf; 4] {
    let s = stage.name();
    [
        dir.join(Checkpoint::file_name(stage)),
        dir.join(format!("{s}.steps.csv")),
        dir.join(format!("{s}.epochs.csv")),
        dir.join(format!("{s}.timing.csv")),
    ]
}

fn write_stage(dir: &Path, ck: &Checkpoint, log: &RunLog) -> Result<(), CliError> {
    let [ckpt, steps, epochs, timing] = stage_files(dir, ck.stage);
    write(&ckpt, ck.to_bytes()?)?;
    write(&steps, log.steps_csv())?;
    write(&epochs, log.epochs_csv())?;
    write(&timing, log.timing_csv())
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    Ok(Split::parse(s)?)
}

impl Ctx {
    fn refuse_existing(&self, paths: &[PathBuf]) -> Result<(), CliError> {
        if self.force {
            return Ok(());
        }
        match paths.iter().find(|p| p.exists()) {
            Some(p) => Err(CliError::Validation(format!(
                "{} already exists; pass --force to overwrite",
                p.display()
            ))),
            None => Ok(()),
        }
    }

    fn snapshot(&self, dir: &Path) -> Result<(), CliError> {
        write(&dir.join(SNAPSHOT), self.cfg.to_toml())
    }

    fn data_dir(&self, data: Option<&Path>) -> PathBuf {
        data.map_or_else(|| self.cfg.paths.data_dir.clone(), Path::to_path_buf)
    }

    fn run_dir(&self, run: Option<&Path>) -> PathBuf {
        run.map_or_else(|| self.cfg.paths.run_dir.clone(), Path::to_path_buf)
    }

    fn load_dataset(&self, data: Option<&Path>) -> Result<Dataset, CliError> {
        let dir = self.data_dir(data);
        let ds = Dataset::load(&dir)?;
        if ds.manifest.config != self.cfg.dataset() {
            log::warn!(
                "dataset in {} was generated with settings that differ from the [data] section",
                dir.display()
            );
        }
        Ok(ds)
    }

    /// Checkpoints present in `dir` for the stages of `plan`'s contrast mode.
    fn load_checkpoints(&self, dir: &Path, plan: &StagePlan) -> Result<Vec<Checkpoint>, CliError> {
        let mut out = Vec::new();
        for &stage in plan.contrast_mode.stages() {
            let path = dir.join(Checkpoint::file_name(stage));
            if path.exists() {
                out.push(Checkpoint::load(&path)?);
            }
        }
        Ok(out)
    }

    pub fn gen_data(&self, out: Option<&Path>) -> Result<(), CliError> {
        let dir = self.data_dir(out);
        self.refuse_existing(&[dir.join("manifest.json")])?;
        let config = self.cfg.dataset();
        let ds = Dataset::generate(&config)?;
        ds.save(&dir)?;
        self.snapshot(&dir)?;
        println!(
            "wrote {} records ({} train / {} val / {} test, {}x{}) to {}",
            ds.records.len(),
            ds.manifest.train.len(),
            ds.manifest.val.len(),
            ds.manifest.test.len(),
            config.size,
            config.size,
            dir.display()
        );
        Ok(())
    }

    pub fn make_masks(&self, accels: &[u32], out: Option<&Path>) -> Result<(), CliError> {
        let dir = out.map_or_else(|| self.cfg.paths.data_dir.join("masks"), Path::to_path_buf);
        let base = self.cfg.plan();
        let accels = if accels.is_empty() { vec![base.acceleration] } else { accels.to_vec() };
        let size = self.cfg.data.size;
        let masks = accels
            .iter()
            .map(|&r| StagePlan { acceleration: r, ..base.clone() }.make_mask(size))
            .collect::<Result<Vec<SamplingMask>, _>>()?;
        let files: Vec<PathBuf> = accels
            .iter()
            .flat_map(|r| [dir.join(format!("mask_{r}x.txt")), dir.join(format!("mask_{r}x.pgm"))])
            .collect();
        self.refuse_existing(&files)?;
        for (mask, paths) in masks.iter().zip(files.chunks(2)) {
            let n = mask.sampled.iter().filter(|&&s| s).count();
            let mut text = format!(
                "# acceleration {}x, {n} of {} lines, seed {}\n",
                mask.acceleration, mask.height, mask.seed
            );
            for &s in &mask.sampled {
                text.push(if s { '1' } else { '0' });
                text.push('\n');
            }
            write(&paths[0], text)?;
            let pixels: Vec<u8> = mask
                .sampled
                .iter()
                .flat_map(|&s| std::iter::repeat_n(if s { 255 } else { 0 }, size))
                .collect();
            std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            write_pgm(&paths[1], size, mask.height, &pixels)?;
            println!("{}x: {n} of {} lines -> {}", mask.acceleration, mask.height, paths[0].display());
        }
        self.snapshot(&dir)
    }

    pub fn train(&self, stage: &str, data: Option<&Path>, run: Option<&Path>) -> Result<(), CliError> {
        let plan = self.cfg.plan();
        plan.validate()?;
        let stages: Vec<Stage> = if stage == "all" {
            plan.contrast_mode.stages().to_vec()
        } else {
            vec![Stage::parse(stage)?]
        };
        let dir = self.run_dir(run);
        let outputs: Vec<PathBuf> = stages.iter().flat_map(|&s| stage_files(&dir, s)).collect();
        self.refuse_existing(&outputs)?;
        let ds = self.load_dataset(data)?;
        let prep = Prepared::new(&ds, &plan.make_mask(ds.manifest.config.size)?)?;
        let mut prior = self.load_checkpoints(&dir, &plan)?;
        for stage in stages {
            let (ck, log) = train_stage(stage, &prep, &plan, &prior)?;
            write_stage(&dir, &ck, &log)?;
            self.snapshot(&dir)?;
            println!(
                "{stage}: best epoch {} of {}, val loss {:.6e} -> {}",
                ck.best_epoch,
                ck.history.len(),
                ck.history[ck.best_epoch - 1].val_loss,
                dir.join(Checkpoint::file_name(stage)).display()
            );
            prior.retain(|c| c.stage != stage);
            prior.push(ck);
        }
        Ok(())
    }

    /// Plan of the trained run in `dir`: taken from its reconstruction
    /// checkpoint when present, otherwise from the config.
    fn run_plan(&self, dir: &Path) -> Result<(StagePlan, Vec<Checkpoint>), CliError> {
        let cfg_plan = self.cfg.plan();
        let recon = dir.join(Checkpoint::file_name(Stage::Reconstruction));
        let plan = if recon.exists() {
            Checkpoint::load(&recon)?.plan
        } else {
            cfg_plan
        };
        let cks = self.load_checkpoints(dir, &plan)?;
        Ok((plan, cks))
    }

    pub fn eval(&self, split: &str, data: Option<&Path>, run: Option<&Path>) -> Result<(), CliError> {
        let split = parse_split(split)?;
        let dir = self.run_dir(run);
        let files = [dir.join("metrics.csv"), dir.join("per_record.csv")];
        self.refuse_existing(&files)?;
        let (plan, cks) = self.run_plan(&dir)?;
        let ds = self.load_dataset(data)?;
        let prep = Prepared::new(&ds, &plan.make_mask(ds.manifest.config.size)?)?;
        let report = evaluate(&cks, &prep, split)?;
        write(&files[0], report.metrics_csv())?;
        write(&files[1], report.per_record_csv())?;
        print!("{}", report.metrics_csv());
        Ok(())
    }

    pub fn ablate(&self, grid: &[String], data: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
        let cells = grid
            .iter()
            .flat_map(|g| g.split(';'))
            .filter(|s| !s.trim().is_empty())
            .map(Cell::parse)
            .collect::<Result<Vec<_>, _>>()?;
        let workers = match std::env::var("DDMC_THREADS") {
            Ok(v) => v
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Validation(format!("DDMC_THREADS must be a positive integer, got `{v}`")))?
                .min(cells.len()),
            Err(_) => cells.len(),
        };
        let dir = self.run_dir(out);
        let mut files = vec![dir.join("ablation.csv"), dir.join("metrics.csv")];
        files.extend(cells.iter().map(|c| dir.join(c.id())));
        self.refuse_existing(&files)?;
        let ds = self.load_dataset(data)?;
        let results = run_ablation(&cells, &ds, &self.cfg.plan(), workers)?;
        let mut long = Vec::new();
        for r in &results {
            let cell_dir = dir.join(r.cell.id());
            for (ck, log) in r.checkpoints.iter().zip(&r.logs) {
                write_stage(&cell_dir, ck, log)?;
            }
            write(&cell_dir.join("metrics.csv"), r.report.metrics_csv())?;
            write(&cell_dir.join("per_record.csv"), r.report.per_record_csv())?;
            long.extend(r.report.rows.iter().cloned());
        }
        let rows: Vec<_> = results.iter().map(|r| r.row()).collect();
        let table = ablation_csv(&rows);
        write(&files[0], &table)?;
        write(&files[1], metrics_csv(&long))?;
        self.snapshot(&dir)?;
        print!("{table}");
        Ok(())
    }

    pub fn render(
        &self,
        split: &str,
        records: usize,
        gain: f64,
        data: Option<&Path>,
        run: Option<&Path>,
        out: Option<&Path>,
    ) -> Result<(), CliError> {
        let split = parse_split(split)?;
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(CliError::Validation(format!("gain must be positive, got {gain}")));
        }
        let dir = self.run_dir(run);
        let out = out.map_or_else(|| dir.join("report"), Path::to_path_buf);
        self.refuse_existing(&[out.join("report.csv")])?;
        let (plan, cks) = self.run_plan(&dir)?;
        let ds = self.load_dataset(data)?;
        let prep = Prepared::new(&ds, &plan.make_mask(ds.manifest.config.size)?)?;
        let report = evaluate(&cks, &prep, split)?;
        let n = records.min(report.panels.len());
        let written = render_report(&report.panels[..n], &out, gain)?;
        println!("wrote {} files for {n} records to {}", written.len(), out.display());
        Ok(())
    }
}
