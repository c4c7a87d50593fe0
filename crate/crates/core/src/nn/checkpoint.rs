//! Single-file parameter container.
//!
//! ```text
//! DISMOB-CHECKPOINT 1
//! meta <key> <json>
//! param <name> f32 <d0xd1...> <byte-offset> <shared|private:city> <trainable 1|0>
//! end <payload-bytes> <fnv1a-64 of payload, hex>
//! <little-endian f32 payload in header order>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::param::{ParamSet, Parameter, Tag};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::fnv1a;

pub const MAGIC: &str = "DISMOB-CHECKPOINT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: ParamSet,
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::InvalidInput(format!("{kind} `{s}` must be non-empty without whitespace")));
    }
    Ok(())
}

/// Serializes parameters and metadata. Values are written as 32-bit floats;
/// parameters already held at 32-bit precision round-trip bitwise.
pub fn encode(params: &ParamSet, meta: &BTreeMap<String, serde_json::Value>) -> Result<Vec<u8>> {
    let mut header = format!("{MAGIC} {VERSION}\n");
    for (k, v) in meta {
        check_token("meta key", k)?;
        header.push_str(&format!("meta {k} {}\n", serde_json::to_string(v)?));
    }
    let mut payload = Vec::with_capacity(params.num_values() * 4);
    for p in params.iter() {
        check_token("parameter name", &p.name)?;
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!(
            "param {} f32 {} {} {} {}\n",
            p.name,
            if dims.is_empty() { "scalar".to_string() } else { dims.join("x") },
            payload.len(),
            p.tag,
            u8::from(p.trainable)
        ));
        for &v in p.value.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    header.push_str(&format!("end {} {:016x}\n", payload.len(), fnv1a(&payload)));
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<String> {
        let rest = &bytes[*pos..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| integrity("truncated header"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| integrity("header is not UTF-8"))?.to_string();
        *pos += nl + 1;
        Ok(line)
    };
    let first = next_line(&mut pos)?;
    let version = first.strip_prefix(MAGIC).map(str::trim).ok_or_else(|| integrity("missing checkpoint magic"))?;
    if version != VERSION.to_string() {
        return Err(Error::Version { found: version.to_string(), expected: VERSION.to_string() });
    }
    let mut meta = BTreeMap::new();
    let mut specs = Vec::new();
    let (payload_len, digest) = loop {
        let line = next_line(&mut pos)?;
        let mut it = line.splitn(2, ' ');
        match (it.next(), it.next()) {
            (Some("meta"), Some(rest)) => {
                let (k, v) = rest.split_once(' ').ok_or_else(|| integrity(format!("bad meta line `{line}`")))?;
                meta.insert(k.to_string(), serde_json::from_str(v).map_err(|e| integrity(format!("meta `{k}`: {e}")))?);
            }
            (Some("param"), Some(rest)) => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 6 || f[1] != "f32" {
                    return Err(integrity(format!("bad param line `{line}`")));
                }
                let shape: Vec<usize> = if f[2] == "scalar" {
                    Vec::new()
                } else {
                    f[2].split('x').map(|d| d.parse().map_err(|_| integrity(format!("bad shape `{}`", f[2])))).collect::<Result<_>>()?
                };
                let offset: usize = f[3].parse().map_err(|_| integrity(format!("bad offset `{}`", f[3])))?;
                let tag = Tag::parse(f[4]).ok_or_else(|| integrity(format!("bad tag `{}`", f[4])))?;
                let trainable = match f[5] {
                    "1" => true,
                    "0" => false,
                    other => return Err(integrity(format!("bad trainable flag `{other}`"))),
                };
                specs.push((f[0].to_string(), shape, offset, tag, trainable));
            }
            (Some("end"), Some(rest)) => {
                let (n, h) = rest.split_once(' ').ok_or_else(|| integrity("bad end line"))?;
                let n: usize = n.parse().map_err(|_| integrity("bad payload length"))?;
                let h = u64::from_str_radix(h, 16).map_err(|_| integrity("bad payload digest"))?;
                break (n, h);
            }
            _ => return Err(integrity(format!("unexpected header line `{line}`"))),
        }
    };
    let payload = &bytes[pos..];
    if payload.len() != payload_len {
        return Err(integrity(format!("payload has {} bytes, header declares {payload_len}", payload.len())));
    }
    if fnv1a(payload) != digest {
        return Err(integrity("payload digest mismatch"));
    }
    let mut params = ParamSet::new();
    let mut expected_offset = 0;
    for (name, shape, offset, tag, trainable) in specs {
        let n: usize = shape.iter().product();
        if offset != expected_offset || offset + 4 * n > payload.len() {
            return Err(integrity(format!("parameter `{name}` has inconsistent offset {offset}")));
        }
        let data = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        expected_offset = offset + 4 * n;
        let mut p = Parameter::new(name, Tensor::from_vec(&shape, data)?, tag);
        p.trainable = trainable;
        params.insert(p).map_err(|e| integrity(e.to_string()))?;
    }
    if expected_offset != payload.len() {
        return Err(integrity("payload has trailing bytes"));
    }
    Ok(Checkpoint { meta, params })
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &BTreeMap<String, serde_json::Value>) -> Result<()> {
    let bytes = encode(params, meta)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
