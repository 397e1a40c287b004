use std::io::Write;
use std::path::PathBuf;

use anyhow::bail;
use clap::Parser;
use ecbr_broker::keydir::KeyDir;
use ecbr_broker::Client;
use ecbr_core::FilterId;

/// Subscribes to a broker and prints each delivered publication on its own line.
#[derive(Parser)]
#[command(name = "subclient", version)]
struct Args {
    #[arg(long)]
    connect: String,
    /// Directory holding the client identity and the pinned measurement.
    #[arg(long)]
    key_dir: PathBuf,
    /// Filter expression, e.g. `temp >= 10 && temp <= 20`; may be repeated.
    #[arg(long, required = true)]
    filter: Vec<String>,
    /// Exit after this many deliveries.
    #[arg(long)]
    count: Option<u64>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ECBR_LOG", "warn")).init();
    let args = Args::parse();
    let keys = KeyDir::load_or_create(&args.key_dir)?;
    let mut client = Client::connect(&args.connect, keys.identity, keys.measurement).await?;
    for expr in &args.filter {
        let id = FilterId::random(&mut rand::thread_rng());
        let ack = client.subscribe(id, expr).await?;
        if let Some(r) = ack.rejected {
            bail!("filter {expr:?} rejected: {r}");
        }
        eprintln!("subscribed {id}");
    }
    let mut out = std::io::stdout().lock();
    let mut seen = 0;
    while args.count.map_or(true, |n| seen < n) {
        let r = client.next_delivery().await?;
        writeln!(out, "{}", r.publication.render())?;
        out.flush()?;
        seen += 1;
    }
    Ok(())
}
