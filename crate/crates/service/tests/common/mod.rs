#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cocon::block;
use cocon::checkpoint::{self, CheckpointMeta};
use cocon::lm::{self, LMConfig, LM_GROUP};
use cocon::tokenizer::Vocab;
use serde_json::Value;
use tokio::io::{AsyncReadExt, AsyncWriteExt};

pub fn tiny_config() -> LMConfig {
    LMConfig {
        n_layers: 2,
        n_alpha: 1,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: Vocab::bytes_only().size(),
        max_seq_len: 64,
    }
}

/// Writes an untrained checkpoint and a byte-level vocabulary into `dir`.
pub fn write_model(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let cfg = tiny_config();
    let mut store = lm::init_params(&cfg, seed).unwrap();
    store.merge(block::init_params(&cfg, seed + 1).unwrap()).unwrap();
    store.freeze_group(LM_GROUP);
    let ckpt = dir.join("model.ckpt");
    let vocab = dir.join("vocab.txt");
    checkpoint::save(&ckpt, &CheckpointMeta::new(cfg), &store).unwrap();
    Vocab::bytes_only().save(&vocab).unwrap();
    (ckpt, vocab)
}

/// POST over a fresh TCP connection, bypassing any client library.
pub async fn post_raw(addr: std::net::SocketAddr, path: &str, payload: &str) -> (u16, Value) {
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    let req = format!(
        "POST {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).await.unwrap();
    let text = String::from_utf8(raw).unwrap();
    let status: u16 = text.split(' ').nth(1).unwrap().parse().unwrap();
    let (_, body) = text.split_once("\r\n\r\n").unwrap();
    (status, serde_json::from_str(body).unwrap())
}
