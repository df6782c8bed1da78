//! Checkpoint container: one little-endian binary file holding the resolved
//! config snapshot, the step counter, generator RNG state, every named
//! parameter tensor (f32), and per-group Adam state (f64).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::AdamGroup;
use crate::error::{Error, Result};
use crate::params::ParamMap;

const MAGIC: &[u8; 4] = b"TCSN";
const VERSION: u32 = 1;

/// Serializable ChaCha8 generator state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Full training state at one step.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub config_text: String,
    pub rng: RngState,
    pub params: ParamMap<f32>,
    pub groups: Vec<AdamGroup>,
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("bad utf8: {e}")))
}

fn write_shape<W: Write>(w: &mut W, shape: &[usize]) -> Result<()> {
    w.write_u8(shape.len() as u8)?;
    for d in shape {
        w.write_u32::<LittleEndian>(*d as u32)?;
    }
    Ok(())
}

fn read_shape<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let ndim = r.read_u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    Ok(shape)
}

fn write_f32_tensor<W: Write>(w: &mut W, a: &ArrayD<f32>) -> Result<()> {
    write_shape(w, a.shape())?;
    for v in a.iter() {
        w.write_f32::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_f32_tensor<R: Read>(r: &mut R) -> Result<ArrayD<f32>> {
    let shape = read_shape(r)?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.read_f32::<LittleEndian>()?);
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))
}

fn write_f64_tensor<W: Write>(w: &mut W, a: &ArrayD<f64>) -> Result<()> {
    write_shape(w, a.shape())?;
    for v in a.iter() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_f64_tensor<R: Read>(r: &mut R) -> Result<ArrayD<f64>> {
    let shape = read_shape(r)?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        write_string(&mut w, &self.config_text)?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_all(&self.rng.seed)?;
        w.write_u128::<LittleEndian>(self.rng.word_pos)?;
        w.write_u64::<LittleEndian>(self.rng.stream)?;

        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, p) in self.params.iter() {
            write_string(&mut w, name)?;
            w.write_u8(u8::from(p.trainable))?;
            write_f32_tensor(&mut w, &p.value)?;
        }

        w.write_u8(self.groups.len() as u8)?;
        for g in &self.groups {
            write_string(&mut w, &g.name)?;
            w.write_f64::<LittleEndian>(g.lr)?;
            w.write_f64::<LittleEndian>(g.beta1)?;
            w.write_f64::<LittleEndian>(g.beta2)?;
            w.write_f64::<LittleEndian>(g.eps)?;
            w.write_u64::<LittleEndian>(g.t)?;
            w.write_u32::<LittleEndian>(g.m.len() as u32)?;
            for (name, m) in &g.m {
                write_string(&mut w, name)?;
                write_f64_tensor(&mut w, m)?;
                write_f64_tensor(&mut w, &g.v[name])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(
            File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
        );
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let config_text = read_string(&mut r)?;
        let step = r.read_u64::<LittleEndian>()?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let word_pos = r.read_u128::<LittleEndian>()?;
        let stream = r.read_u64::<LittleEndian>()?;

        let n_params = r.read_u32::<LittleEndian>()? as usize;
        let mut params = ParamMap::new();
        for _ in 0..n_params {
            let name = read_string(&mut r)?;
            let trainable = r.read_u8()? != 0;
            let value = read_f32_tensor(&mut r)?;
            params.insert(name, value, trainable);
        }

        let n_groups = r.read_u8()? as usize;
        let mut groups = Vec::with_capacity(n_groups);
        for _ in 0..n_groups {
            let name = read_string(&mut r)?;
            let lr = r.read_f64::<LittleEndian>()?;
            let beta1 = r.read_f64::<LittleEndian>()?;
            let beta2 = r.read_f64::<LittleEndian>()?;
            let eps = r.read_f64::<LittleEndian>()?;
            let t = r.read_u64::<LittleEndian>()?;
            let n_entries = r.read_u32::<LittleEndian>()? as usize;
            let mut m = IndexMap::new();
            let mut v = IndexMap::new();
            for _ in 0..n_entries {
                let pname = read_string(&mut r)?;
                m.insert(pname.clone(), read_f64_tensor(&mut r)?);
                v.insert(pname, read_f64_tensor(&mut r)?);
            }
            groups.push(AdamGroup {
                name,
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            });
        }
        Ok(Checkpoint {
            step,
            config_text,
            rng: RngState {
                seed,
                word_pos,
                stream,
            },
            params,
            groups,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamMap::new();
        params.insert(
            "a.w",
            ArrayD::from_shape_fn(IxDyn(&[3, 4]), |_| rng.random_range(-1.0..1.0f32)),
            true,
        );
        params.insert("a.running", ArrayD::zeros(IxDyn(&[4])), false);
        let mut group = AdamGroup::new("main", 1e-3, 0.5, 0.999, vec!["a.w".into()], &params);
        group.t = 17;
        group.m.get_mut("a.w").unwrap().fill(0.25);

        let _ = rng.random_range(0..100); // advance the stream
        let ckpt = Checkpoint {
            step: 42,
            config_text: "train.seed = 7\n".into(),
            rng: RngState::capture(&rng),
            params,
            groups: vec![group],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt_00000042.bin");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.config_text, ckpt.config_text);
        assert_eq!(loaded.rng, ckpt.rng);
        assert_eq!(loaded.params.get("a.w"), ckpt.params.get("a.w"));
        assert_eq!(loaded.groups[0].t, 17);
        assert_eq!(loaded.groups[0].m["a.w"], ckpt.groups[0].m["a.w"]);
        assert_eq!(
            loaded.params.content_hash(),
            ckpt.params.content_hash()
        );

        // The restored generator continues the exact stream.
        let mut original = rng;
        let mut restored = loaded.rng.restore();
        for _ in 0..8 {
            assert_eq!(
                original.random_range(0..u32::MAX),
                restored.random_range(0..u32::MAX)
            );
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"nope").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
