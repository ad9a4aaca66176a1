//! Versioned checkpoint container: named entries holding either shaped
//! 64-bit float blocks, raw bytes (generator states), or unsigned counters.
//! The binary encoding is little-endian and round-trips bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::networks::{Adam, Mlp, ScalarAdam};
use crate::rng::RngState;

const MAGIC: &[u8; 4] = b"ECKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Floats { shape: Vec<usize>, values: Vec<f64> },
    Bytes(Vec<u8>),
    UInt(u64),
}

/// Ordered named entries; ordering makes the byte encoding canonical.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Payload>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn put_floats(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        self.entries.insert(
            name.to_string(),
            Payload::Floats {
                shape: shape.to_vec(),
                values: values.to_vec(),
            },
        );
    }

    pub fn put_array(&mut self, name: &str, array: &Array) {
        self.put_floats(name, array.shape(), array.values());
    }

    pub fn put_bytes(&mut self, name: &str, bytes: Vec<u8>) {
        self.entries.insert(name.to_string(), Payload::Bytes(bytes));
    }

    pub fn put_uint(&mut self, name: &str, value: u64) {
        self.entries.insert(name.to_string(), Payload::UInt(value));
    }

    pub fn put_f64(&mut self, name: &str, value: f64) {
        self.put_floats(name, &[1], &[value]);
    }

    fn missing(name: &str) -> Error {
        Error::Checkpoint(format!("missing entry {name:?}"))
    }

    pub fn get_array(&self, name: &str) -> Result<Array> {
        match self.entries.get(name) {
            Some(Payload::Floats { shape, values }) => Array::new(shape.clone(), values.clone()),
            Some(_) => Err(Error::Checkpoint(format!("entry {name:?} is not a float block"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn get_f64(&self, name: &str) -> Result<f64> {
        let arr = self.get_array(name)?;
        if arr.numel() != 1 {
            return Err(Error::Checkpoint(format!("entry {name:?} is not scalar")));
        }
        Ok(arr.values()[0])
    }

    pub fn get_bytes(&self, name: &str) -> Result<&[u8]> {
        match self.entries.get(name) {
            Some(Payload::Bytes(b)) => Ok(b),
            Some(_) => Err(Error::Checkpoint(format!("entry {name:?} is not a byte block"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn get_uint(&self, name: &str) -> Result<u64> {
        match self.entries.get(name) {
            Some(Payload::UInt(v)) => Ok(*v),
            Some(_) => Err(Error::Checkpoint(format!("entry {name:?} is not a counter"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    // -- network and optimizer helpers --------------------------------

    /// Store every parameter block of `mlp` under `prefix.layerI.{weight,bias}`.
    pub fn put_mlp(&mut self, prefix: &str, mlp: &Mlp) {
        for (name, block) in mlp.block_names().iter().zip(mlp.blocks()) {
            self.put_array(&format!("{prefix}.{name}"), block);
        }
    }

    /// Load parameter blocks into an existing (shape-compatible) `mlp`.
    pub fn load_mlp(&self, prefix: &str, mlp: &mut Mlp) -> Result<()> {
        let names = mlp.block_names();
        for (name, block) in names.iter().zip(mlp.blocks_mut()) {
            let loaded = self.get_array(&format!("{prefix}.{name}"))?;
            if loaded.shape() != block.shape() {
                return Err(Error::Checkpoint(format!(
                    "entry {prefix}.{name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    block.shape()
                )));
            }
            *block = loaded;
        }
        Ok(())
    }

    pub fn put_adam(&mut self, prefix: &str, names: &[String], opt: &Adam) {
        self.put_uint(&format!("{prefix}.step_count"), opt.step_count);
        for (i, name) in names.iter().enumerate() {
            self.put_array(&format!("{prefix}.m.{name}"), &opt.m[i]);
            self.put_array(&format!("{prefix}.v.{name}"), &opt.v[i]);
        }
    }

    pub fn load_adam(&self, prefix: &str, names: &[String], opt: &mut Adam) -> Result<()> {
        opt.step_count = self.get_uint(&format!("{prefix}.step_count"))?;
        for (i, name) in names.iter().enumerate() {
            opt.m[i] = self.get_array(&format!("{prefix}.m.{name}"))?;
            opt.v[i] = self.get_array(&format!("{prefix}.v.{name}"))?;
        }
        Ok(())
    }

    pub fn put_scalar_adam(&mut self, prefix: &str, opt: &ScalarAdam) {
        self.put_uint(&format!("{prefix}.step_count"), opt.step_count);
        self.put_f64(&format!("{prefix}.m"), opt.m);
        self.put_f64(&format!("{prefix}.v"), opt.v);
    }

    pub fn load_scalar_adam(&self, prefix: &str, opt: &mut ScalarAdam) -> Result<()> {
        opt.step_count = self.get_uint(&format!("{prefix}.step_count"))?;
        opt.m = self.get_f64(&format!("{prefix}.m"))?;
        opt.v = self.get_f64(&format!("{prefix}.v"))?;
        Ok(())
    }

    pub fn put_rng(&mut self, name: &str, state: &RngState) {
        let mut bytes = Vec::with_capacity(32 + 8 + 16);
        bytes.extend_from_slice(&state.seed);
        bytes.extend_from_slice(&state.stream.to_le_bytes());
        bytes.extend_from_slice(&state.word_pos.to_le_bytes());
        self.put_bytes(name, bytes);
    }

    pub fn get_rng(&self, name: &str) -> Result<RngState> {
        let bytes = self.get_bytes(name)?;
        if bytes.len() != 56 {
            return Err(Error::Checkpoint(format!(
                "entry {name:?} has {} bytes, expected 56",
                bytes.len()
            )));
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&bytes[..32]);
        let stream = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let word_pos = u128::from_le_bytes(bytes[40..56].try_into().unwrap());
        Ok(RngState {
            seed,
            stream,
            word_pos,
        })
    }

    /// String entries ride on byte blocks.
    pub fn put_string(&mut self, name: &str, value: &str) {
        self.put_bytes(name, value.as_bytes().to_vec());
    }

    pub fn get_string(&self, name: &str) -> Result<String> {
        String::from_utf8(self.get_bytes(name)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("entry {name:?} is not utf-8")))
    }

    // -- binary encoding ----------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, payload) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match payload {
                Payload::Floats { shape, values } => {
                    out.push(0);
                    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                    for &d in shape {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Payload::Bytes(bytes) => {
                    out.push(1);
                    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
                    out.extend_from_slice(bytes);
                }
                Payload::UInt(v) => {
                    out.push(2);
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&out)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} is incompatible with supported version {VERSION}"
            )));
        }
        let count = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("non-utf8 entry name".to_string()))?;
            let kind = cur.take(1)?[0];
            let payload = match kind {
                0 => {
                    let rank = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
                    let mut shape = Vec::with_capacity(rank);
                    for _ in 0..rank {
                        shape.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
                    }
                    let len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
                    let mut values = Vec::with_capacity(len);
                    for _ in 0..len {
                        values.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
                    }
                    Payload::Floats { shape, values }
                }
                1 => {
                    let len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
                    Payload::Bytes(cur.take(len)?.to_vec())
                }
                2 => Payload::UInt(u64::from_le_bytes(cur.take(8)?.try_into().unwrap())),
                other => {
                    return Err(Error::Checkpoint(format!(
                        "unknown payload kind {other} for entry {name:?}"
                    )))
                }
            };
            entries.insert(name, payload);
        }
        Ok(Checkpoint { entries })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".to_string()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{capture, substream};

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.eckp");

        let mut mlp = Mlp::init(&[3, 8, 2], &mut substream(1, "ck")).unwrap();
        // exercise awkward values
        mlp.weights[0].values_mut()[0] = f64::MIN_POSITIVE;
        mlp.weights[0].values_mut()[1] = -0.1 + 0.2; // not representable exactly
        let opt = Adam::for_mlp(&mlp, 1e-3);
        let mut rng = substream(2, "ck");
        for _ in 0..13 {
            let _ = crate::rng::standard_normal(&mut rng);
        }

        let mut ck = Checkpoint::new();
        ck.put_mlp("policy", &mlp);
        ck.put_adam("adam.policy", &mlp.block_names(), &opt);
        ck.put_rng("rng.action", &capture(&rng));
        ck.put_uint("step", 12345);
        ck.put_f64("log_alpha", -0.7523);
        ck.put_string("env", "pendulum");
        ck.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);

        let mut mlp2 = Mlp::init(&[3, 8, 2], &mut substream(99, "other")).unwrap();
        loaded.load_mlp("policy", &mut mlp2).unwrap();
        assert_eq!(mlp, mlp2);

        let rng_state = loaded.get_rng("rng.action").unwrap();
        let mut resumed = crate::rng::restore(&rng_state);
        assert_eq!(
            crate::rng::standard_normal(&mut rng),
            crate::rng::standard_normal(&mut resumed)
        );
        assert_eq!(loaded.get_uint("step").unwrap(), 12345);
        assert_eq!(loaded.get_f64("log_alpha").unwrap(), -0.7523);
        assert_eq!(loaded.get_string("env").unwrap(), "pendulum");
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.eckp");
        let ck = Checkpoint::new();
        ck.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // bump version field
        std::fs::write(&path, bytes).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn missing_entries_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.eckp");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path).is_err());

        let ck = Checkpoint::new();
        assert!(ck.get_uint("step").is_err());
    }
}
