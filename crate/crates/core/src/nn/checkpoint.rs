//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "MOEVRDCK"
//! version     u32
//! meta_len    u32, then meta_len bytes of UTF-8 JSON
//! n_params    u32
//! per param:  path_len u32, path bytes, rows u32, cols u32, rows·cols f64
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load roundtrip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Matrix, ParamStore};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOEVRDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form JSON metadata (model config, seed, vocabulary sizes).
    pub meta: String,
    pub params: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: String) -> Self {
        Self {
            meta,
            params: store.entries().map(|(k, v)| (k.to_owned(), v.clone())).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(self.meta.len() as u32)?;
        w.write_all(self.meta.as_bytes())?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (path, m) in &self.params {
            w.write_u32::<LittleEndian>(path.len() as u32)?;
            w.write_all(path.as_bytes())?;
            w.write_u32::<LittleEndian>(m.rows() as u32)?;
            w.write_u32::<LittleEndian>(m.cols() as u32)?;
            for &v in m.as_slice() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> std::result::Result<Self, String> {
        let io = |e: std::io::Error| e.to_string();
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err("bad magic; not a checkpoint".into());
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let meta = read_string(&mut r)?;
        let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let path = read_string(&mut r)?;
            let rows = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let cols = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut data = vec![0.0; rows * cols];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
            let m = Matrix::from_vec(rows, cols, data).map_err(|e| format!("{path}: {e}"))?;
            params.push((path, m));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f)).map_err(|msg| Error::Format {
            path: path.to_owned(),
            msg,
        })
    }
}

fn read_string<R: Read>(r: &mut R) -> std::result::Result<String, String> {
    let len = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| e.to_string())?;
    String::from_utf8(buf).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            shapes in proptest::collection::vec((1usize..5, 1usize..5), 1..5),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            for (i, (r, c)) in shapes.iter().enumerate() {
                let data = (0..r * c).map(|_| rng.random::<f64>() * 1e3 - 500.0).collect();
                store.add(format!("layer/{i}/w"), Matrix::from_vec(*r, *c, data).unwrap()).unwrap();
            }
            let ck = Checkpoint::from_store(&store, "{\"k\":1}".into());
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(buf.as_slice()).unwrap();
            prop_assert_eq!(&back.meta, &ck.meta);
            for ((pa, a), (pb, b)) in ck.params.iter().zip(&back.params) {
                prop_assert_eq!(pa, pb);
                prop_assert_eq!(a.shape(), b.shape());
                for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::read_from(&b"NOTACKPT\x01\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        Checkpoint { meta: String::new(), params: vec![] }.write_to(&mut buf).unwrap();
        buf[8] = 99;
        assert!(Checkpoint::read_from(buf.as_slice()).unwrap_err().contains("version"));
    }
}
