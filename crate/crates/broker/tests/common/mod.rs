#![allow(dead_code)]

use std::net::SocketAddr;

use ecbr_broker::{Client, Server, ServerConfig};
use ecbr_core::enclave::{build_manifest, measure};
use ecbr_core::{CostModel, Identity, Measurement, ScfTable, StartupConfig};

pub fn scf() -> StartupConfig {
    StartupConfig {
        stream_keys: [("stdout".to_string(), [0x51; 32])].into_iter().collect(),
        manifest_hash: [0x52; 32],
        manifest_key: [0x53; 32],
        args: vec!["--serve".into()],
        env: [("REGION".to_string(), "eu-1".to_string())].into_iter().collect(),
    }
}

pub fn table_for(model: &CostModel) -> ScfTable {
    let mut t = ScfTable::new();
    t.register(measure(&build_manifest(model)), scf());
    t
}

pub async fn start_with(config: ServerConfig) -> (SocketAddr, Measurement) {
    let server = Server::bind("127.0.0.1:0", config).await.expect("broker starts");
    let m = server.measurement();
    let (addr, _) = server.spawn();
    (addr, m)
}

pub async fn start() -> (SocketAddr, Measurement) {
    let model = CostModel::default();
    let table = table_for(&model);
    start_with(ServerConfig::new(model, table)).await
}

pub async fn client(addr: SocketAddr, m: Measurement, seed: u8) -> Client {
    Client::connect(addr, Identity::from_seed([seed; 32]), Some(m)).await.expect("session")
}
