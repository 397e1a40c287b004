use std::path::PathBuf;

use anyhow::bail;
use clap::{Args as ClapArgs, Parser, Subcommand, ValueEnum};
use ecbr_core::bundle::{customize, finalize, protect, Bundle, BundleInfo, Mode, Trust, DEFAULT_CHUNK_SIZE};
use ecbr_tools::{hex32, load_or_create_identity, verifying_key};
use rand::rngs::OsRng;

/// Protects file trees into sealed bundles and verifies them.
#[derive(Parser)]
#[command(name = "bundle", version)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Encrypted,
    Signed,
}

#[derive(ClapArgs)]
struct TrustArgs {
    /// Manifest key (encrypted bundles).
    #[arg(long, requires = "manifest_hash")]
    manifest_key: Option<String>,
    /// Manifest hash (encrypted bundles).
    #[arg(long)]
    manifest_hash: Option<String>,
    /// Creator public key (sign-only bundles).
    #[arg(long, conflicts_with = "manifest_key")]
    creator: Option<String>,
}

impl TrustArgs {
    fn trust(&self) -> anyhow::Result<Trust> {
        match (&self.manifest_key, &self.manifest_hash, &self.creator) {
            (Some(k), Some(h), None) => Ok(Trust::manifest(hex32(k)?, hex32(h)?)),
            (None, None, Some(pk)) => Ok(Trust::creator(verifying_key(pk)?)),
            _ => bail!("give either --manifest-key with --manifest-hash, or --creator"),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Protect every regular file under a directory.
    Protect {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "encrypted")]
        mode: ModeArg,
        /// Signing key file (hex seed); created when missing.
        #[arg(long)]
        key: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CHUNK_SIZE)]
        chunk_size: u32,
    },
    /// Verify every file of a bundle.
    Verify {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        trust: TrustArgs,
    },
    /// Add a layer of files to a sign-only bundle and re-sign it.
    Customize {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        layer: PathBuf,
        #[command(flatten)]
        trust: TrustArgs,
        /// Key file of the customizer.
        #[arg(long)]
        key: PathBuf,
    },
    /// Convert a sign-only bundle to encrypted mode in place.
    Finalize {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        trust: TrustArgs,
        #[arg(long)]
        key: PathBuf,
    },
    /// Print the public key of a key file.
    Pubkey {
        #[arg(long)]
        key: PathBuf,
    },
}

fn print_info(info: &BundleInfo) {
    println!("files {}", info.files);
    println!("manifest_hash {}", hex::encode(info.manifest_hash));
    if let Some(k) = info.manifest_key {
        println!("manifest_key {}", hex::encode(k));
    }
}

fn main() -> anyhow::Result<()> {
    match Args::parse().cmd {
        Cmd::Protect { tree, out, mode, key, chunk_size } => {
            if chunk_size == 0 {
                bail!("--chunk-size must be positive");
            }
            let creator = load_or_create_identity(&key)?;
            let mode = match mode {
                ModeArg::Encrypted => Mode::Encrypted,
                ModeArg::Signed => Mode::SignedOnly,
            };
            print_info(&protect(&tree, &out, mode, &creator, chunk_size, &mut OsRng)?);
        }
        Cmd::Verify { bundle, trust } => {
            let files = Bundle::open(&bundle).verify_all(&trust.trust()?)?;
            for (path, data) in &files {
                println!("{} {path}", data.len());
            }
        }
        Cmd::Customize { bundle, layer, trust, key } => {
            let who = load_or_create_identity(&key)?;
            print_info(&customize(&bundle, &trust.trust()?, &layer, &who, &mut OsRng)?);
        }
        Cmd::Finalize { bundle, trust, key } => {
            let who = load_or_create_identity(&key)?;
            print_info(&finalize(&bundle, &trust.trust()?, &who, &mut OsRng)?);
        }
        Cmd::Pubkey { key } => println!("{}", hex::encode(load_or_create_identity(&key)?.verifying_key().as_bytes())),
    }
    Ok(())
}
