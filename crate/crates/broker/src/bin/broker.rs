use std::path::PathBuf;

use anyhow::Context as _;
use clap::Parser;
use ecbr_broker::{Server, ServerConfig};
use ecbr_core::enclave::{build_manifest, measure};
use ecbr_core::{CostModel, ScfTable};

/// Content-based publish/subscribe broker with enclave-side matching.
#[derive(Parser)]
#[command(name = "broker", version)]
struct Args {
    /// Address to listen on, HOST:PORT.
    #[arg(long, default_value = "127.0.0.1:7700")]
    bind: String,
    /// Provisioning table: one `<measurement-hex> <scf-hex>` per line.
    #[arg(long)]
    scf_table: Option<PathBuf>,
    /// Enclave cost model (key = value lines).
    #[arg(long)]
    cost_model: Option<PathBuf>,
    /// Print the enclave measurement for the cost model and exit.
    #[arg(long)]
    print_measurement: bool,
    /// Seed for the enclave's randomness; random when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Write per-ecall statistics to this CSV file on shutdown.
    #[arg(long)]
    stats_csv: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ECBR_LOG", "info")).init();
    let args = Args::parse();
    let model = match &args.cost_model {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            CostModel::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => CostModel::default(),
    };
    if args.print_measurement {
        println!("{}", measure(&build_manifest(&model)));
        return Ok(());
    }
    let table_path = args.scf_table.context("--scf-table is required")?;
    let text = std::fs::read_to_string(&table_path).with_context(|| format!("reading {}", table_path.display()))?;
    let table = ScfTable::parse(&text).map_err(anyhow::Error::msg).context("parsing SCF table")?;
    let config = ServerConfig {
        seed: args.seed.unwrap_or_else(rand::random),
        stats_log: args.stats_csv.is_some(),
        ..ServerConfig::new(model, table)
    };
    let server = Server::bind(&args.bind, config).await?;
    log::info!("listening on {}", server.local_addr()?);
    server.run_until(async { let _ = tokio::signal::ctrl_c().await; }).await;
    if let Some(p) = args.stats_csv {
        std::fs::write(&p, server.stats_csv().await?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
