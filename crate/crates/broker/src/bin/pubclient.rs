use std::path::PathBuf;

use anyhow::{bail, Context as _};
use clap::Parser;
use ecbr_broker::keydir::KeyDir;
use ecbr_broker::Client;
use ecbr_core::{PubId, Publication};

/// Publishes sealed publications to a broker.
#[derive(Parser)]
#[command(name = "pubclient", version)]
struct Args {
    #[arg(long)]
    connect: String,
    /// Directory holding the client identity and the pinned measurement.
    #[arg(long)]
    key_dir: PathBuf,
    /// Publication as `attr=val,...`; may be repeated.
    #[arg(long, required = true)]
    publish: Vec<String>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ECBR_LOG", "warn")).init();
    let args = Args::parse();
    let keys = KeyDir::load_or_create(&args.key_dir)?;
    let mut client = Client::connect(&args.connect, keys.identity, keys.measurement).await?;
    for text in &args.publish {
        let p = Publication::parse(text, PubId::random(&mut rand::thread_rng()))
            .with_context(|| format!("parsing publication {text:?}"))?;
        let ack = client.publish(&p).await?;
        match ack.rejected {
            None => println!("{} matched={}", hex::encode(ack.id), ack.matched),
            Some(r) => bail!("publication rejected: {r}"),
        }
    }
    Ok(())
}
