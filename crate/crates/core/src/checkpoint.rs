//! Checkpoint files: an ASCII manifest (format version, spec hash, the spec
//! itself, tensor names) followed by tensor records and a trailing SHA-256
//! over everything before it.

use std::collections::BTreeMap;
use std::io::{BufRead, Cursor};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::arch::{Network, NetworkSpec, TrainState};
use crate::error::{Error, Result};
use crate::nn::RunningStats;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "STVFR-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes `net` to bytes.
pub fn checkpoint_bytes(net: &Network) -> Result<Vec<u8>> {
    let spec_text = net.spec.to_text();
    let mut names: Vec<String> = net.params.keys().map(|k| format!("param {k}")).collect();
    let mut tensors: Vec<Tensor> = net.params.values().cloned().collect();
    for (node, rs) in &net.state.bn {
        names.push(format!("bn_mean {node}"));
        tensors.push(Tensor::vector(&rs.mean)?);
        names.push(format!("bn_var {node}"));
        tensors.push(Tensor::vector(&rs.var)?);
    }
    let mut out = Vec::new();
    out.extend_from_slice(format!("{CHECKPOINT_MAGIC}\nversion: {CHECKPOINT_VERSION}\n").as_bytes());
    out.extend_from_slice(format!("spec_hash: {}\n", net.spec.hash()).as_bytes());
    out.extend_from_slice(format!("spec_lines: {}\n", spec_text.lines().count()).as_bytes());
    out.extend_from_slice(spec_text.as_bytes());
    out.extend_from_slice(format!("tensors: {}\n", names.len()).as_bytes());
    for n in &names {
        out.extend_from_slice(format!("tensor {n}\n").as_bytes());
    }
    out.extend_from_slice(b"end\n");
    for t in &tensors {
        t.write_to(&mut out)?;
    }
    let digest = hex(&Sha256::digest(&out));
    out.extend_from_slice(format!("checksum: {digest}\n").as_bytes());
    Ok(out)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, checkpoint_bytes(net)?)?;
    Ok(())
}

fn read_line(r: &mut Cursor<&[u8]>) -> Result<String> {
    let mut s = String::new();
    let n = r
        .read_line(&mut s)
        .map_err(|_| Error::Corrupt("manifest is not valid text".into()))?;
    if n == 0 || !s.ends_with('\n') {
        return Err(Error::Corrupt("truncated manifest".into()));
    }
    s.pop();
    Ok(s)
}

fn field(line: &str, key: &str) -> Result<String> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(": "))
        .map(str::to_string)
        .ok_or_else(|| Error::Corrupt(format!("expected `{key}:` but found `{line}`")))
}

/// Parses checkpoint bytes.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Cursor::new(bytes);
    if read_line(&mut r)? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("not a checkpoint file".into()));
    }
    let version = field(&read_line(&mut r)?, "version")?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    // integrity: the fixed-width final line carries a digest of everything
    // before it
    const TAIL: usize = "checksum: ".len() + 64 + 1;
    let body_end = bytes
        .len()
        .checked_sub(TAIL)
        .ok_or_else(|| Error::Corrupt("missing checksum".into()))?;
    let tail = std::str::from_utf8(&bytes[body_end..]).map_err(|_| Error::Corrupt("missing checksum".into()))?;
    let stored = tail
        .strip_prefix("checksum: ")
        .and_then(|s| s.strip_suffix('\n'))
        .ok_or_else(|| Error::Corrupt("missing checksum".into()))?;
    if stored != hex(&Sha256::digest(&bytes[..body_end])) {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }

    let spec_hash = field(&read_line(&mut r)?, "spec_hash")?;
    let n_lines: usize = field(&read_line(&mut r)?, "spec_lines")?
        .parse()
        .map_err(|_| Error::Corrupt("bad spec_lines".into()))?;
    let mut spec_text = String::new();
    for _ in 0..n_lines {
        spec_text.push_str(&read_line(&mut r)?);
        spec_text.push('\n');
    }
    let spec = NetworkSpec::from_text(&spec_text).map_err(|e| Error::Corrupt(format!("embedded spec: {e}")))?;
    if spec.hash() != spec_hash {
        return Err(Error::Corrupt("embedded spec does not match its hash".into()));
    }
    let count: usize = field(&read_line(&mut r)?, "tensors")?
        .parse()
        .map_err(|_| Error::Corrupt("bad tensor count".into()))?;
    let mut names = Vec::with_capacity(count);
    for _ in 0..count {
        let line = read_line(&mut r)?;
        let rest = line
            .strip_prefix("tensor ")
            .ok_or_else(|| Error::Corrupt(format!("bad tensor entry `{line}`")))?;
        let (kind, name) = rest
            .split_once(' ')
            .ok_or_else(|| Error::Corrupt(format!("bad tensor entry `{line}`")))?;
        names.push((kind.to_string(), name.to_string()));
    }
    if read_line(&mut r)? != "end" {
        return Err(Error::Corrupt("manifest not terminated".into()));
    }
    let mut params = BTreeMap::new();
    let mut bn: BTreeMap<String, RunningStats> = BTreeMap::new();
    for (kind, name) in names {
        let t = Tensor::read_from(&mut r)?;
        match kind.as_str() {
            "param" => {
                params.insert(name, t);
            }
            "bn_mean" => bn.entry(name).or_insert_with(|| RunningStats::new(0)).mean = t.data().to_vec(),
            "bn_var" => bn.entry(name).or_insert_with(|| RunningStats::new(0)).var = t.data().to_vec(),
            other => return Err(Error::Corrupt(format!("unknown tensor kind `{other}`"))),
        }
    }
    if r.position() as usize != body_end {
        return Err(Error::Corrupt("trailing bytes after tensor data".into()));
    }
    let fresh = Network::new(spec.clone(), 0)?;
    if fresh.state.bn.len() != bn.len()
        || fresh
            .state
            .bn
            .iter()
            .any(|(k, rs)| bn.get(k).is_none_or(|s| s.mean.len() != rs.mean.len() || s.var.len() != rs.var.len()))
    {
        return Err(Error::Corrupt("batch-norm statistics do not match the spec".into()));
    }
    Network::from_parts(spec, params, TrainState { bn }).map_err(|e| match e {
        Error::ShapeMismatch { .. } => Error::Corrupt(e.to_string()),
        other => other,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint that must have been written for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &NetworkSpec) -> Result<Network> {
    let net = load_checkpoint(path)?;
    if net.spec.hash() != expected.hash() {
        return Err(Error::SpecHash {
            found: net.spec.hash(),
            expected: expected.hash(),
        });
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ccm_spec, CcmOptions};

    fn net(head: usize) -> Network {
        let spec = ccm_spec(&CcmOptions {
            head_hidden: head,
            ..CcmOptions::desk()
        })
        .unwrap();
        let mut n = Network::new(spec, 4).unwrap();
        for rs in n.state.bn.values_mut() {
            rs.mean.iter_mut().for_each(|m| *m = 0.125);
        }
        n
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let n = net(32);
        save_checkpoint(&n, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, n);
        assert_eq!(back.spec.hash(), n.spec.hash());
        for (a, b) in n.params.values().zip(back.params.values()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(load_checkpoint_for(&path, &n.spec).unwrap(), n);
    }

    #[test]
    fn distinct_errors() {
        let n = net(32);
        let bytes = checkpoint_bytes(&n).unwrap();
        let truncated = &bytes[..bytes.len() / 2];
        assert!(matches!(checkpoint_from_bytes(truncated), Err(Error::Corrupt(_))));
        let mut flipped = bytes.clone();
        let k = flipped.len() - 200;
        flipped[k] ^= 1;
        assert!(matches!(checkpoint_from_bytes(&flipped), Err(Error::Corrupt(_))));
        let text = String::from_utf8_lossy(&bytes).replacen("version: 1", "version: 7", 1);
        let v = checkpoint_from_bytes(text.as_bytes());
        assert!(matches!(v, Err(Error::Version { .. })), "{v:?}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&n, &path).unwrap();
        let other = net(16);
        assert!(matches!(load_checkpoint_for(&path, &other.spec), Err(Error::SpecHash { .. })));
    }
}
