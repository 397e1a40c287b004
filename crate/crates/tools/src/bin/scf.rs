use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use ecbr_core::enclave::{build_manifest, measure};
use ecbr_core::{Measurement, ScfTable, StartupConfig};
use ecbr_tools::{hex32, load_model};
use rand::RngCore;

/// Maintains the table of startup configurations released to measured enclaves.
#[derive(Parser)]
#[command(name = "scf", version)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the enclave measurement for a cost model.
    Measure {
        #[arg(long)]
        cost_model: Option<PathBuf>,
    },
    /// Add or replace the configuration registered for a measurement.
    Register {
        #[arg(long)]
        table: PathBuf,
        /// Measurement hex; defaults to the measurement of --cost-model.
        #[arg(long)]
        measurement: Option<String>,
        #[arg(long, conflicts_with = "measurement")]
        cost_model: Option<PathBuf>,
        /// Stream key as `label=hex`, or a bare label for a fresh random key.
        #[arg(long)]
        stream: Vec<String>,
        #[arg(long)]
        manifest_hash: Option<String>,
        #[arg(long)]
        manifest_key: Option<String>,
        #[arg(long = "arg", allow_hyphen_values = true)]
        args: Vec<String>,
        /// Environment entry `KEY=VALUE`.
        #[arg(long)]
        env: Vec<String>,
    },
    /// List the registered measurements and what each receives.
    List {
        #[arg(long)]
        table: PathBuf,
    },
}

fn read_table(path: &PathBuf) -> anyhow::Result<ScfTable> {
    match fs::read_to_string(path) {
        Ok(text) => ScfTable::parse(&text).map_err(|e| anyhow!("{}: {e}", path.display())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(ScfTable::new()),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

fn main() -> anyhow::Result<()> {
    match Args::parse().cmd {
        Cmd::Measure { cost_model } => {
            println!("{}", measure(&build_manifest(&load_model(cost_model.as_deref())?)));
        }
        Cmd::Register { table, measurement, cost_model, stream, manifest_hash, manifest_key, args, env } => {
            let m = match measurement {
                Some(h) => Measurement::from_hex(h.trim()).ok_or_else(|| anyhow!("invalid measurement {h:?}"))?,
                None => measure(&build_manifest(&load_model(cost_model.as_deref())?)),
            };
            let mut stream_keys = BTreeMap::new();
            for s in &stream {
                let (label, key) = match s.split_once('=') {
                    Some((l, k)) => (l, hex32(k)?),
                    None => {
                        let mut k = [0u8; 32];
                        rand::rngs::OsRng.fill_bytes(&mut k);
                        (s.as_str(), k)
                    }
                };
                stream_keys.insert(label.to_owned(), key);
            }
            let env = env
                .iter()
                .map(|e| e.split_once('=').map(|(k, v)| (k.to_owned(), v.to_owned())).ok_or_else(|| anyhow!("expected KEY=VALUE, got {e:?}")))
                .collect::<anyhow::Result<_>>()?;
            let scf = StartupConfig {
                stream_keys,
                manifest_hash: manifest_hash.as_deref().map(hex32).transpose()?.unwrap_or_default(),
                manifest_key: manifest_key.as_deref().map(hex32).transpose()?.unwrap_or_default(),
                args,
                env,
            };
            ecbr_core::provisioning::encode_scf(&scf)?;
            let mut t = read_table(&table)?;
            let replaced = t.register(m, scf).is_some();
            fs::write(&table, t.render()?).with_context(|| format!("writing {}", table.display()))?;
            println!("{} {m}", if replaced { "replaced" } else { "registered" });
        }
        Cmd::List { table } => {
            let t = read_table(&table)?;
            for line in t.render()?.lines() {
                let (m, _) = line.split_once(' ').unwrap();
                let scf = t.get(&Measurement::from_hex(m).unwrap()).unwrap();
                let streams: Vec<&str> = scf.stream_keys.keys().map(String::as_str).collect();
                let env: Vec<&str> = scf.env.keys().map(String::as_str).collect();
                println!(
                    "{m} streams=[{}] args={} env=[{}] manifest={}",
                    streams.join(","),
                    scf.args.len(),
                    env.join(","),
                    hex::encode(&scf.manifest_hash[..8])
                );
            }
        }
    }
    Ok(())
}
