//! Binary checkpoint bundle, all integers and floats little-endian:
//!
//! ```text
//! "DKCK" | u32 version
//! u32 n_attrs  { u32 len | key utf8 | u32 len | value utf8 }*
//! u32 n_nets   { u32 len | name utf8
//!                u32 layers | u32 dims[layers + 1] | u8 activation[layers] | u8 norm[layers]
//!                u64 n_params | f64 params[n_params] }*
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{Activation, Network, NetworkSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DKCK";
const VERSION: u32 = 1;

/// Named networks plus free-form string attributes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub attributes: BTreeMap<String, String>,
    pub networks: Vec<(String, Network)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_network(mut self, name: &str, net: &Network) -> Self {
        self.networks.push((name.to_string(), net.clone()));
        self
    }

    pub fn with_attribute(mut self, key: &str, value: impl ToString) -> Self {
        self.attributes.insert(key.to_string(), value.to_string());
        self
    }

    pub fn network(&self, name: &str) -> Result<&Network> {
        self.networks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, net)| net)
            .ok_or_else(|| Error::Data(format!("checkpoint has no network named {name:?}")))
    }

    pub fn attribute(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.attributes.len());
        for (k, v) in &self.attributes {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.networks.len());
        for (name, net) in &self.networks {
            put_str(&mut out, name);
            let spec = net.spec();
            put_u32(&mut out, spec.num_layers());
            for d in &spec.layer_dims {
                put_u32(&mut out, *d);
            }
            out.extend(spec.activations.iter().map(|a| a.code()));
            out.extend(spec.layer_norm.iter().map(|f| *f as u8));
            out.extend_from_slice(&(net.params().len() as u64).to_le_bytes());
            for p in net.params() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.attributes.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let layers = r.u32()? as usize;
            if layers == 0 || layers > 1024 {
                return Err(Error::Data(format!("implausible layer count {layers}")));
            }
            let dims = (0..=layers)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let activations = r
                .take(layers)?
                .iter()
                .map(|c| {
                    Activation::from_code(*c)
                        .ok_or_else(|| Error::Data(format!("unknown activation code {c}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = r.take(layers)?.iter().map(|f| *f != 0).collect();
            let spec = NetworkSpec::new(dims, activations, norm)
                .map_err(|e| Error::Data(format!("network {name:?}: {e}")))?;
            let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            if count != spec.param_count() {
                return Err(Error::Data(format!(
                    "network {name:?}: {count} parameters stored, spec needs {}",
                    spec.param_count()
                )));
            }
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Data("overflow".into()))?)?;
            let params = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let net = Network::from_params(spec, params)
                .map_err(|e| Error::Data(format!("network {name:?}: {e}")))?;
            ck.networks.push((name, net));
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Data("truncated checkpoint".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Data("checkpoint string is not utf-8".into()))
    }
}
