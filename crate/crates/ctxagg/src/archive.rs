//! Checkpoints: a flat little-endian parameter file plus a JSON manifest.
//!
//! `params.bin` layout: the 8-byte magic, a `u64` entry count, then per entry a
//! `u32` name length, the UTF-8 name, a `u32` rank, `rank` `u64` dims and the
//! values as `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use ctxagg_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"CTXAGGP1";
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub precision: String,
    pub seed: u64,
    pub parameters: usize,
    pub scalars: usize,
    pub config: RunConfig,
    pub notes: Vec<String>,
}

/// Writes `bytes` to `path` through a sibling temp file and a rename, so a
/// failed write never leaves a truncated file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path
        .file_name()
        .context("path has no file name")?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| -> Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.with_context(|| format!("writing {}", path.display()))
}

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let dims = p.value.dims();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(
            self.buf.len() - self.pos >= n,
            "truncated parameter file at byte {}",
            self.pos
        );
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }
}

/// Decodes a parameter file into `(name, tensor)` pairs in file order.
pub fn decode_params(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    ensure!(r.take(8)? == MAGIC, "not a parameter file");
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name =
            String::from_utf8(r.take(len)?.to_vec()).context("parameter name is not UTF-8")?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| Ok(r.u64()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .context("shape overflows")?;
        let data = r
            .take(numel.checked_mul(8).context("shape overflows")?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    ensure!(
        r.pos == bytes.len(),
        "{} trailing bytes in parameter file",
        bytes.len() - r.pos
    );
    Ok(out)
}

/// Copies decoded values into `store`. Names and shapes must match exactly.
pub fn load_into(store: &mut ParamStore, entries: Vec<(String, Tensor)>) -> Result<()> {
    ensure!(
        entries.len() == store.len(),
        "checkpoint has {} parameters, model has {}",
        entries.len(),
        store.len()
    );
    for (name, value) in entries {
        let Some(id) = store.id(&name) else {
            bail!("checkpoint parameter {name} is not in the model");
        };
        ensure!(
            store.value(id).shape() == value.shape(),
            "{name}: checkpoint shape {:?} vs model {:?}",
            value.dims(),
            store.value(id).dims()
        );
        store.set(id, value)?;
    }
    Ok(())
}

pub fn manifest_for(store: &ParamStore, config: &RunConfig) -> Manifest {
    Manifest {
        precision: "f64".into(),
        seed: config.seed,
        parameters: store.len(),
        scalars: store.numel(),
        config: config.clone(),
        notes: vec!["every convolution carries a bias".into()],
    }
}

pub fn save(dir: &Path, store: &ParamStore, config: &RunConfig) -> Result<()> {
    let manifest = serde_json::to_string_pretty(&manifest_for(store, config))? + "\n";
    write_atomic(&dir.join(PARAMS_FILE), &encode_params(store))?;
    write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let m: Manifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    ensure!(
        m.precision == "f64",
        "unsupported precision {:?}",
        m.precision
    );
    Ok(m)
}

pub fn load_params(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    load_into(store, decode_params(&bytes)?).with_context(|| format!("loading {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctxagg_core::param::{InitSpec, ParamKind, ParamRegistry};

    fn store() -> ParamStore {
        let mut s = ParamStore::new(3);
        s.register(
            "a/weight".into(),
            [2, 3].into(),
            ParamKind::Weight,
            InitSpec::Uniform { bound: 1.0 },
        )
        .unwrap();
        s.register(
            "a/bias".into(),
            [2].into(),
            ParamKind::Bias,
            InitSpec::Zeros,
        )
        .unwrap();
        s.register(
            "s".into(),
            Vec::<usize>::new().into(),
            ParamKind::Reweight,
            InitSpec::Constant {
                value: f64::MIN_POSITIVE,
            },
        )
        .unwrap();
        s
    }

    #[test]
    fn encode_decode_is_bit_exact() {
        let s = store();
        let back = decode_params(&encode_params(&s)).unwrap();
        for ((_, p), (name, t)) in s.iter().zip(&back) {
            assert_eq!(&p.name, name);
            assert_eq!(p.value.dims(), t.dims());
            let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(p.value.data()), bits(t.data()));
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_params(&store());
        assert!(decode_params(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_params(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode_params(&magic).is_err());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut s = store();
        let mut entries = decode_params(&encode_params(&s)).unwrap();
        entries[1].1 = Tensor::zeros([3]);
        assert!(load_into(&mut s, entries).is_err());
    }
}
