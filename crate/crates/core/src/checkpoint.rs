//! Binary checkpoints: flow parameters, mixture, label names, and the
//! optional feature standardization, with a magic/version header. Values are
//! stored as little-endian f64 bit patterns, so a save/load round trip is
//! bit-exact. Writes go to a temporary file renamed into place.

use std::fs;
use std::path::Path;

use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::gmm::GaussianMixture;
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"FGMM";
const VERSION: u32 = 1;

/// Everything needed to resume evaluation of a trained model.
pub struct Checkpoint {
    pub model: FlowModel,
    pub mixture: GaussianMixture,
    pub label_names: Vec<String>,
    pub standardization: Option<Standardization>,
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    push_u64(buf, vs.len() as u64);
    for &v in vs {
        push_f64(buf, v);
    }
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    push_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
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

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible {what} length {v}")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.len(what)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());

        push_u64(&mut buf, self.model.dim as u64);
        push_u64(&mut buf, self.model.layers.len() as u64);
        push_u64(&mut buf, self.model.hidden as u64);
        for layer in &self.model.layers {
            for &m in &layer.mask {
                buf.push(if m != 0.0 { 1 } else { 0 });
            }
        }
        push_f64s(&mut buf, &self.model.params.flat_values());

        push_u64(&mut buf, self.mixture.n_classes() as u64);
        push_u64(&mut buf, self.mixture.dim() as u64);
        push_f64(&mut buf, self.mixture.log_var);
        push_f64s(&mut buf, &self.mixture.log_priors);
        push_f64s(&mut buf, &self.mixture.means.data);

        push_u64(&mut buf, self.label_names.len() as u64);
        for name in &self.label_names {
            push_str(&mut buf, name);
        }

        match &self.standardization {
            None => buf.push(0),
            Some(s) => {
                buf.push(1);
                push_f64s(&mut buf, &s.mean);
                push_f64s(&mut buf, &s.std);
            }
        }

        let tmp = path.with_extension("bin.tmp");
        fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { buf: &buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }

        let dim = r.len("dim")?;
        let n_layers = r.len("layer count")?;
        let hidden = r.len("hidden width")?;
        let mut model = FlowModel::new(dim, n_layers, hidden, 0)?;
        for (li, layer) in model.layers.iter().enumerate() {
            let stored = r.take(dim)?;
            for (d, &m) in layer.mask.iter().enumerate() {
                let expect = if m != 0.0 { 1u8 } else { 0u8 };
                if stored[d] != expect {
                    return Err(Error::Checkpoint(format!(
                        "mask mismatch at layer {li}, coordinate {d}; file was written \
                         by an incompatible build"
                    )));
                }
            }
        }
        let values = r.f64s("parameter vector")?;
        model.params.load_flat(&values)?;

        let n_classes = r.len("class count")?;
        let gdim = r.len("mixture dim")?;
        if n_classes < 2 || gdim == 0 {
            return Err(Error::Checkpoint(format!(
                "implausible mixture shape {n_classes} x {gdim}"
            )));
        }
        let mut mixture = GaussianMixture::init_random(gdim, n_classes, 0)?;
        mixture.log_var = r.f64()?;
        let priors = r.f64s("log priors")?;
        if priors.len() != n_classes {
            return Err(Error::Checkpoint(format!(
                "{} log priors for {} classes",
                priors.len(),
                n_classes
            )));
        }
        mixture.log_priors = priors;
        let means = r.f64s("means")?;
        mixture.means = Matrix::from_vec(n_classes, gdim, means)
            .map_err(|e| Error::Checkpoint(format!("bad means block: {e}")))?;

        let n_names = r.len("label name count")?;
        let mut label_names = Vec::with_capacity(n_names);
        for _ in 0..n_names {
            label_names.push(r.string("label name")?);
        }

        let standardization = match r.take(1)?[0] {
            0 => None,
            1 => {
                let mean = r.f64s("standardization mean")?;
                let std = r.f64s("standardization std")?;
                if mean.len() != std.len() {
                    return Err(Error::Checkpoint(
                        "standardization mean/std length mismatch".to_string(),
                    ));
                }
                Some(Standardization { mean, std })
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "bad standardization flag {other}"
                )))
            }
        };

        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint payload",
                buf.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model,
            mixture,
            label_names,
            standardization,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let mut model = FlowModel::new(3, 4, 8, 21).unwrap();
        model.randomize(22, 0.4);
        let mut mixture = GaussianMixture::init_random(3, 2, 23).unwrap();
        mixture.log_var = 0.37;
        mixture.set_priors(&[0.25, 0.75]).unwrap();
        Checkpoint {
            model,
            mixture,
            label_names: vec!["cat".to_string(), "dog".to_string()],
            standardization: Some(Standardization {
                mean: vec![0.5, -1.5, 2.25],
                std: vec![1.0, 2.0, 0.125],
            }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();

        assert_eq!(
            ck.model.params.flat_values(),
            loaded.model.params.flat_values()
        );
        assert_eq!(ck.model.dim, loaded.model.dim);
        assert_eq!(ck.model.hidden, loaded.model.hidden);
        assert_eq!(ck.mixture.log_var.to_bits(), loaded.mixture.log_var.to_bits());
        assert_eq!(ck.mixture.means.data, loaded.mixture.means.data);
        assert_eq!(ck.mixture.log_priors, loaded.mixture.log_priors);
        assert_eq!(ck.label_names, loaded.label_names);
        let s = ck.standardization.as_ref().unwrap();
        let l = loaded.standardization.as_ref().unwrap();
        assert_eq!(s.mean, l.mean);
        assert_eq!(s.std, l.std);

        // Behavioral equality on a forward pass.
        let x = Matrix::from_vec(2, 3, vec![0.4, -0.2, 1.0, -0.9, 0.3, 0.1]).unwrap();
        let a = ck.model.forward(&x).unwrap();
        let b = loaded.model.forward(&x).unwrap();
        assert_eq!(a.z.data, b.z.data);
        assert_eq!(a.logdet, b.logdet);
    }

    #[test]
    fn save_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        let ck = sample_checkpoint();
        ck.save(&p1).unwrap();
        ck.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();

        // Wrong magic.
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad_magic.bin");
        fs::write(&bad, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&bad), Err(Error::Checkpoint(_))));

        // Wrong version.
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        let bad = dir.path().join("bad_version.bin");
        fs::write(&bad, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&bad), Err(Error::Checkpoint(_))));

        // Truncation.
        let bytes = fs::read(&path).unwrap();
        let bad = dir.path().join("truncated.bin");
        fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&bad), Err(Error::Checkpoint(_))));

        // Trailing garbage.
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        let bad = dir.path().join("trailing.bin");
        fs::write(&bad, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&bad), Err(Error::Checkpoint(_))));

        // Missing file.
        assert!(matches!(
            Checkpoint::load(&dir.path().join("absent.bin")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn no_standardization_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut ck = sample_checkpoint();
        ck.standardization = None;
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert!(loaded.standardization.is_none());
    }
}
