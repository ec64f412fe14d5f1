//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!   magic "MTVC0001"
//!   depth u8, width u8, input_side u32, n_distill u32, model seed u64
//!   teacher n_cls u32, n_det u32, teacher seed u64
//!   param count u64; per parameter: numel u64, f32 values
//!   batch-norm stat count u64; per stat: channels u64, mean f32s, var f32s
//!
//! Parameters are stored in declaration order, which is deterministic given
//! the architecture, so loading rebuilds the model from (config, seed) and
//! overwrites values in place. Saving and reloading is bit-exact.

use crate::error::{Error, Result};
use crate::model::{build_model, ArchitectureConfig, Depth, MultiTaskModel, Width};
use crate::teachers::TeacherBundle;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MTVC0001";

/// Everything needed to reconstruct a trained pipeline: the model and the
/// frozen teacher it was distilled from.
pub struct Checkpoint {
    pub model: MultiTaskModel<f32>,
    pub teacher: TeacherBundle,
}

fn depth_code(d: Depth) -> u8 {
    match d {
        Depth::Shallow => 0,
        Depth::Deep => 1,
    }
}

fn width_code(w: Width) -> u8 {
    match w {
        Width::Narrow => 0,
        Width::Wide => 1,
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(format!(
                "truncated checkpoint {}: needed {} bytes at offset {}",
                self.path.display(),
                n,
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn save(path: &Path, model: &MultiTaskModel<f32>, teacher: &TeacherBundle) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(depth_code(model.config.depth));
    out.push(width_code(model.config.width));
    put_u32(&mut out, model.config.input_side as u32);
    put_u32(&mut out, model.config.n_distill as u32);
    put_u64(&mut out, model.seed);
    put_u32(&mut out, teacher.n_cls as u32);
    put_u32(&mut out, teacher.n_det as u32);
    put_u64(&mut out, teacher.seed);

    put_u64(&mut out, model.store.len() as u64);
    for id in model.store.ids() {
        let t = model.store.value(id);
        put_u64(&mut out, t.numel() as u64);
        put_f32s(&mut out, t.data());
    }
    let stats = model.bn_stats();
    put_u64(&mut out, stats.len() as u64);
    for s in stats {
        put_u64(&mut out, s.mean.numel() as u64);
        put_f32s(&mut out, s.mean.data());
        put_f32s(&mut out, s.var.data());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::format(format!(
            "{}: not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let depth = match r.u8()? {
        0 => Depth::Shallow,
        1 => Depth::Deep,
        d => return Err(Error::format(format!("unknown depth code {d}"))),
    };
    let width = match r.u8()? {
        0 => Width::Narrow,
        1 => Width::Wide,
        w => return Err(Error::format(format!("unknown width code {w}"))),
    };
    let input_side = r.u32()? as usize;
    let n_distill = r.u32()? as usize;
    let model_seed = r.u64()?;
    let n_cls = r.u32()? as usize;
    let n_det = r.u32()? as usize;
    let teacher_seed = r.u64()?;

    let config = ArchitectureConfig {
        depth,
        width,
        input_side,
        n_distill,
    };
    let mut model = build_model::<f32>(config, model_seed)?;
    let n_params = r.u64()? as usize;
    if n_params != model.store.len() {
        return Err(Error::format(format!(
            "checkpoint holds {} parameters, architecture defines {}",
            n_params,
            model.store.len()
        )));
    }
    for id in model.store.ids().collect::<Vec<_>>() {
        let numel = r.u64()? as usize;
        let t = model.store.value_mut(id);
        if numel != t.numel() {
            return Err(Error::format(format!(
                "parameter size mismatch: checkpoint {numel}, architecture {}",
                t.numel()
            )));
        }
        t.data_mut().copy_from_slice(&r.f32s(numel)?);
    }
    let n_stats = r.u64()? as usize;
    if n_stats != model.bn_stats().len() {
        return Err(Error::format(format!(
            "checkpoint holds {} batch-norm stats, architecture defines {}",
            n_stats,
            model.bn_stats().len()
        )));
    }
    for i in 0..n_stats {
        let channels = r.u64()? as usize;
        let stat = &mut model.bn_stats_mut()[i];
        if channels != stat.mean.numel() {
            return Err(Error::format(format!(
                "batch-norm stat size mismatch: checkpoint {channels}, architecture {}",
                stat.mean.numel()
            )));
        }
        let mean = r.f32s(channels)?;
        let var = r.f32s(channels)?;
        stat.mean.data_mut().copy_from_slice(&mean);
        stat.var.data_mut().copy_from_slice(&var);
    }
    if r.pos != buf.len() {
        return Err(Error::format(format!(
            "{}: {} trailing bytes after checkpoint data",
            path.display(),
            buf.len() - r.pos
        )));
    }
    let teacher = TeacherBundle::new(n_cls, n_det, teacher_seed)?;
    Ok(Checkpoint { model, teacher })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchitectureConfig, Depth, Width};
    use crate::rng::derive_rng;
    use rand::Rng;

    fn sample_model() -> MultiTaskModel<f32> {
        let arch = ArchitectureConfig::new(Depth::Shallow, Width::Narrow, 40);
        let mut model = build_model::<f32>(arch, 7).unwrap();
        // perturb away from the seeded init so loading can't pass by accident
        let mut rng = derive_rng(99, "checkpoint-perturb", &[]);
        for id in model.store.ids().collect::<Vec<_>>() {
            for v in model.store.value_mut(id).data_mut() {
                *v += rng.gen_range(-0.1..0.1) as f32;
            }
        }
        for s in model.bn_stats_mut() {
            for v in s.mean.data_mut() {
                *v = rng.gen_range(-1.0..1.0) as f32;
            }
            for v in s.var.data_mut() {
                *v = rng.gen_range(0.1..2.0) as f32;
            }
        }
        model
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = sample_model();
        let teacher = TeacherBundle::new(32, 8, 3).unwrap();
        save(&path, &model, &teacher).unwrap();

        let loaded = load(&path).unwrap();
        assert_eq!(loaded.model.config, model.config);
        assert_eq!(loaded.model.seed, model.seed);
        assert_eq!(loaded.teacher.n_cls, 32);
        assert_eq!(loaded.teacher.n_det, 8);
        assert_eq!(loaded.teacher.seed, 3);
        for id in model.store.ids() {
            let a: Vec<u32> = model.store.value(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> =
                loaded.model.store.value(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        for (a, b) in model.bn_stats().iter().zip(loaded.model.bn_stats()) {
            assert_eq!(a.mean.data(), b.mean.data());
            assert_eq!(a.var.data(), b.var.data());
        }

        // saving the loaded model reproduces the file byte for byte
        let path2 = dir.path().join("model2.ckpt");
        save(&path2, &loaded.model, &loaded.teacher).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = sample_model();
        let teacher = TeacherBundle::new(32, 8, 3).unwrap();
        save(&path, &model, &teacher).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("bad_magic.ckpt");
        std::fs::write(&bad_magic, b"NOTACKPT").unwrap();
        assert!(load(&bad_magic).is_err());

        let truncated = dir.path().join("truncated.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load(&truncated).is_err());

        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 4]);
        let trailing = dir.path().join("trailing.ckpt");
        std::fs::write(&trailing, &extended).unwrap();
        assert!(load(&trailing).is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        let Err(err) = load(Path::new("/nonexistent/model.ckpt")) else {
            panic!("expected an error");
        };
        assert!(err.to_string().contains("model.ckpt"));
    }
}
