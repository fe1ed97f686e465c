//! Binary snapshots of a training run that resume bit-exactly.
//!
//! Layout:
//!
//! ```text
//! "DFMCKPT1"                          8-byte magic
//! u64 le                              length of the header text
//! header text                         `key = value` lines, UTF-8
//! u64 le                              number of f64 blocks (14)
//! repeated: u64 le length, f64 le...  7 parameter blocks then 7 momentum
//!                                     blocks, in layer order
//! ```
//!
//! The header carries the full training config, the epoch counter and the
//! exact positions of the shuffle and branch-selection RNG streams, so a
//! loaded run continues on the same random trajectory.

use std::collections::HashMap;
use std::path::Path;

use crate::dfm::DfmConfig;
use crate::error::{CoreError, Result};
use crate::io::atomic_write;
use crate::net::{Network, TrainConfig, TrainState};
use crate::rng::{RngState, RngStream};

pub const MAGIC: &[u8; 8] = b"DFMCKPT1";

fn push_block(buf: &mut Vec<u8>, values: &[f64]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn header_text(state: &TrainState) -> String {
    let cfg = &state.cfg;
    let d = &cfg.dfm;
    let sh = state.shuffle.state();
    let se = state.select.state();
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    kv("epoch", state.epoch.to_string());
    kv("num_classes", state.net.num_classes.to_string());
    kv("lr", format!("{}", cfg.lr));
    kv("momentum", format!("{}", cfg.momentum));
    kv("epochs", cfg.epochs.to_string());
    kv("batch_size", cfg.batch_size.to_string());
    kv("seed", cfg.seed.to_string());
    kv("dfm_slots", cfg.dfm_slots.as_str().to_string());
    kv("alpha", format!("{}", d.alpha));
    kv("beta", format!("{}", d.beta));
    kv("omega", format!("{}", d.omega));
    kv("delta", format!("{}", d.delta));
    kv("gamma", format!("{}", d.gamma));
    kv("tau", format!("{}", d.tau));
    kv("apply_mode", d.apply_mode.as_str().to_string());
    kv("active_in_eval", d.active_in_eval.to_string());
    kv("variant", d.variant.as_str().to_string());
    kv("shuffle_stream", sh.stream.to_string());
    kv("shuffle_word_pos", sh.word_pos.to_string());
    kv("select_stream", se.stream.to_string());
    kv("select_word_pos", se.word_pos.to_string());
    s
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let text = header_text(state);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&14u64.to_le_bytes());
    for block in state.net.param_blocks() {
        push_block(&mut buf, block);
    }
    for block in &state.velocity {
        push_block(&mut buf, block);
    }
    buf
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    atomic_write(path, &encode(state))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn block(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn parse_header(text: &str) -> Result<HashMap<&str, &str>> {
    let mut map = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CoreError::Checkpoint(format!("bad header line {line:?}")))?;
        map.insert(k.trim(), v.trim());
    }
    Ok(map)
}

fn field<'a>(map: &HashMap<&str, &'a str>, key: &str) -> Result<&'a str> {
    map.get(key)
        .copied()
        .ok_or_else(|| CoreError::Checkpoint(format!("missing header field {key:?}")))
}

fn parse<T: std::str::FromStr>(map: &HashMap<&str, &str>, key: &str) -> Result<T> {
    field(map, key)?
        .parse()
        .map_err(|_| CoreError::Checkpoint(format!("unparseable header field {key:?}")))
}

pub fn decode(buf: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CoreError::Checkpoint("bad magic (not a checkpoint file)".into()));
    }
    let text_len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(text_len)?)
        .map_err(|_| CoreError::Checkpoint("header is not UTF-8".into()))?;
    let map = parse_header(text)?;

    let cfg = TrainConfig {
        lr: parse(&map, "lr")?,
        momentum: parse(&map, "momentum")?,
        epochs: parse(&map, "epochs")?,
        batch_size: parse(&map, "batch_size")?,
        seed: parse(&map, "seed")?,
        dfm_slots: parse(&map, "dfm_slots")?,
        dfm: DfmConfig {
            alpha: parse(&map, "alpha")?,
            beta: parse(&map, "beta")?,
            omega: parse(&map, "omega")?,
            delta: parse(&map, "delta")?,
            gamma: parse(&map, "gamma")?,
            tau: parse(&map, "tau")?,
            apply_mode: parse(&map, "apply_mode")?,
            active_in_eval: parse(&map, "active_in_eval")?,
            variant: parse(&map, "variant")?,
        },
    };
    cfg.validate().map_err(|e| CoreError::Checkpoint(format!("invalid config: {e}")))?;
    let num_classes: usize = parse(&map, "num_classes")?;
    let epoch: usize = parse(&map, "epoch")?;

    let shuffle = RngStream::restore(RngState {
        seed: cfg.seed,
        stream: parse(&map, "shuffle_stream")?,
        word_pos: parse(&map, "shuffle_word_pos")?,
    });
    let select = RngStream::restore(RngState {
        seed: cfg.seed,
        stream: parse(&map, "select_stream")?,
        word_pos: parse(&map, "select_word_pos")?,
    });

    let block_count = r.u64()?;
    if block_count != 14 {
        return Err(CoreError::Checkpoint(format!("expected 14 blocks, found {block_count}")));
    }
    let mut net = Network::zeros(num_classes);
    for slot in net.param_blocks_mut() {
        let block = r.block()?;
        if block.len() != slot.len() {
            return Err(CoreError::Checkpoint(format!(
                "parameter block holds {} values, expected {}",
                block.len(),
                slot.len()
            )));
        }
        *slot = block;
    }
    let mut velocity: [Vec<f64>; 7] = Default::default();
    for (i, v) in velocity.iter_mut().enumerate() {
        let block = r.block()?;
        if block.len() != net.param_blocks()[i].len() {
            return Err(CoreError::Checkpoint(format!(
                "momentum block holds {} values, expected {}",
                block.len(),
                net.param_blocks()[i].len()
            )));
        }
        *v = block;
    }
    if r.pos != buf.len() {
        return Err(CoreError::Checkpoint(format!(
            "{} trailing bytes after last block",
            buf.len() - r.pos
        )));
    }
    net.assert_finite()
        .map_err(|e| CoreError::Checkpoint(format!("corrupt parameters: {e}")))?;

    Ok(TrainState { net, cfg, epoch, shuffle, select, velocity, log: Vec::new() })
}

pub fn load(path: &Path) -> Result<TrainState> {
    let buf = std::fs::read(path)?;
    decode(&buf)
}
