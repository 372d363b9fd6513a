use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

use super::config::RunConfig;
use super::experiment::{DiagRow, RunResult, SeedOutcome, Stat};

pub const SUMMARY_HEADER: &str = "method,cba,seed,ACC,FM,ACC_AUC_raw,ACC_AUC_norm";

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_diag(rows: &[DiagRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "step,inner_loss,outer_loss,align_ip,trn_grad_sq")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.step, r.inner_loss, r.outer_loss, r.align_ip, r.trn_grad_sq)?;
    }
    Ok(())
}

/// Writes `summary.csv`, per-seed matrix/trace/diag files, failure markers
/// and `config.echo` into `cfg.out`.
pub fn emit_results(result: &RunResult, cfg: &RunConfig) -> Result<()> {
    let dir = cfg.out.as_path();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.echo"), cfg.to_toml())?;

    for outcome in &result.outcomes {
        let seed = outcome.seed();
        let (matrix, trace, diag) = match outcome {
            SeedOutcome::Done(r) => (&r.matrix, &r.trace, &r.diag),
            SeedOutcome::Failed(f) => {
                fs::write(dir.join(format!("failed_{seed}.txt")), format!("{}\n", f.error))?;
                (&f.matrix, &f.trace, &f.diag)
            }
        };
        let mut w = create(dir, &format!("matrix_{seed}.csv"))?;
        matrix.write_csv(&mut w)?;
        w.flush()?;
        let mut w = create(dir, &format!("trace_{seed}.csv"))?;
        trace.write_csv(&mut w)?;
        w.flush()?;
        if cfg.diag && cfg.cba {
            let mut w = create(dir, &format!("diag_{seed}.csv"))?;
            write_diag(diag, &mut w)?;
            w.flush()?;
        }
    }

    let mut w = create(dir, "summary.csv")?;
    writeln!(w, "{SUMMARY_HEADER}")?;
    let prefix = format!("{},{}", cfg.method.name(), cfg.cba);
    for r in result.completed() {
        writeln!(w, "{prefix},{},{},{},{},{}", r.seed, r.acc, r.fm, r.auc.raw, r.auc.normalized)?;
    }
    let a = &result.aggregate;
    let row = |w: &mut BufWriter<File>, label: &str, f: fn(&Stat) -> f64| -> Result<()> {
        writeln!(w, "{prefix},{label},{},{},{},{}", f(&a.acc), f(&a.fm), f(&a.auc_raw), f(&a.auc_norm))?;
        Ok(())
    };
    row(&mut w, "mean", |s| s.mean)?;
    row(&mut w, "std", |s| s.std)?;
    w.flush()?;
    Ok(())
}
