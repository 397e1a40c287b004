use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ecbr_core::workload::{calibrate, parse_sizes, records_csv, sweep, sweep_svg, WorkloadSpec};
use ecbr_tools::{load_model, parse_size};

/// Workload generation and enclave paging sweeps.
#[derive(Parser)]
#[command(name = "bench", version)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Measure the inside/outside slowdown at each database size.
    Sweep {
        /// Workload spec, flat key=value text.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Database sizes, e.g. 64,96,128,160,200MiB.
        #[arg(long)]
        sizes: String,
        /// Cost model file.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output directory for sweep.csv and sweep.svg.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve for the swap cost that yields a target slowdown.
    Calibrate {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 18.0)]
        target: f64,
        #[arg(long, default_value = "200MiB")]
        db: String,
        #[arg(long, default_value = "128MiB")]
        budget: String,
        /// Where to write the calibrated model; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a generated workload.
    Generate {
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

fn load_spec(path: Option<&PathBuf>) -> anyhow::Result<WorkloadSpec> {
    match path {
        None => Ok(WorkloadSpec::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(WorkloadSpec::parse(&text)?)
        }
    }
}

fn main() -> anyhow::Result<()> {
    match Args::parse().cmd {
        Cmd::Sweep { spec, sizes, model, out } => {
            let spec = load_spec(spec.as_ref())?;
            let model = load_model(model.as_deref())?;
            let sizes = parse_sizes(&sizes).map_err(anyhow::Error::msg)?;
            let records = sweep(&spec, &sizes, &model);
            fs::create_dir_all(&out)?;
            fs::write(out.join("sweep.csv"), records_csv(&records))?;
            fs::write(out.join("sweep.svg"), sweep_svg(&records, model.epc_budget_bytes))?;
            for r in &records {
                println!("{:>12} bytes  slowdown {:.4}", r.db_bytes, r.slowdown);
            }
        }
        Cmd::Calibrate { spec, model, target, db, budget, out } => {
            let spec = load_spec(spec.as_ref())?;
            let model = load_model(model.as_deref())?;
            let cal = calibrate(&model, target, parse_size(&db)?, parse_size(&budget)?, &spec)?;
            match out {
                Some(p) => fs::write(&p, cal.to_config()).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{}", cal.to_config()),
            }
        }
        Cmd::Generate { spec } => {
            let spec = load_spec(spec.as_ref())?;
            print!("{}", ecbr_core::workload::generate(&spec)?.render());
        }
    }
    Ok(())
}
