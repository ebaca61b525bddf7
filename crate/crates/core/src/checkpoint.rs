//! Versioned binary checkpoints for module parameters and Gaussian sets.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "SPTC" | version u32 | kind u8 | float width u8 (4 or 8) | reserved u16
//! payload
//! "CTPS"
//! ```
//!
//! Module payload: `K`, encoder widths, decoder widths and neighbourhood
//! size as u32 (each width list prefixed by its length), the step counter
//! (u64), the ChaCha8 generator state (32-byte seed, u64 stream, u128 word
//! position), the parameter tensors (u32 count, then per tensor a u64
//! length and its floats), and an optional Adam block (u8 flag; learning
//! rate and betas and epsilon as f64, step u64, first then second moments in
//! the tensor layout).
//!
//! Gaussian payload: space tag u8 (0 normalized, 1 world), count u64, then
//! positions, scales, opacities, SH coefficients, normals and angles, each
//! as a contiguous float array.
//!
//! Files are parsed completely before anything is returned.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussians::{Gaussian2DSet, Space, SH_COEFFS};
use crate::network::{AdamState, Architecture, ModuleParams};
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"SPTC";
pub const END_MARKER: &[u8; 4] = b"CTPS";
pub const VERSION: u32 = 1;

const KIND_MODULE: u8 = 1;
const KIND_GAUSSIANS: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn width(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    /// Native precision of `T`.
    pub fn of<T: Real>() -> Self {
        if T::BYTES == 8 {
            Precision::F64
        } else {
            Precision::F32
        }
    }
}

/// Serializable ChaCha8 generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleCheckpoint<T> {
    pub params: ModuleParams<T>,
    pub rng: RngState,
    pub step: u64,
    pub adam: Option<AdamState<T>>,
}

struct Writer {
    buf: Vec<u8>,
    precision: Precision,
}

impl Writer {
    fn new(kind: u8, precision: Precision) -> Self {
        let mut buf = MAGIC.to_vec();
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(kind);
        buf.push(precision.width());
        buf.extend_from_slice(&0u16.to_le_bytes());
        Self { buf, precision }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn float<T: Real>(&mut self, v: T) {
        match self.precision {
            Precision::F32 => self.buf.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
            Precision::F64 => self.buf.extend_from_slice(&v.f64().to_le_bytes()),
        }
    }

    fn tensor<T: Real>(&mut self, t: &[T]) {
        self.u64(t.len() as u64);
        for &v in t {
            self.float(v);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        self.buf.extend_from_slice(END_MARKER);
        self.buf
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
    precision: Precision,
}

impl<'a> Reader<'a> {
    /// Validate the header and return a reader positioned at the payload.
    fn open(path: &'a Path, bytes: &'a [u8], kind: u8) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic { path: path.to_path_buf() });
        }
        let mut r = Self {
            path,
            bytes,
            pos: 4,
            precision: Precision::F32,
        };
        let version = r.u32("version")? as u32;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let k = r.u8("kind")?;
        if k != kind {
            return Err(Error::format(path, format!("checkpoint kind {k}, expected {kind}")));
        }
        r.precision = match r.u8("float width")? {
            4 => Precision::F32,
            8 => Precision::F64,
            w => return Err(Error::format(path, format!("unsupported float width {w}"))),
        };
        r.take(2, "header")?;
        Ok(r)
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::UnexpectedEof {
            path: self.path.to_path_buf(),
            what,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn floats<T: Real>(&mut self, out: &mut [T], what: &'static str) -> Result<()> {
        let w = self.precision.width() as usize;
        let bytes = self.take(out.len().checked_mul(w).unwrap_or(usize::MAX), what)?;
        for (o, b) in out.iter_mut().zip(bytes.chunks_exact(w)) {
            *o = match self.precision {
                Precision::F32 => T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64),
                Precision::F64 => T::of(f64::from_le_bytes(b.try_into().unwrap())),
            };
        }
        Ok(())
    }

    fn tensor_into<T: Real>(&mut self, out: &mut [T], name: &str, what: &'static str) -> Result<()> {
        let len = self.u64(what)?;
        if len != out.len() as u64 {
            return Err(Error::format(
                self.path,
                format!("tensor {name} has {len} values, architecture needs {}", out.len()),
            ));
        }
        self.floats(out, what)
    }

    fn widths(&mut self, what: &'static str) -> Result<Vec<usize>> {
        let n = self.u32(what)?;
        if n > 1024 {
            return Err(Error::format(self.path, format!("implausible {what} count {n}")));
        }
        (0..n).map(|_| self.u32(what)).collect()
    }

    fn finish(mut self) -> Result<()> {
        let end = self.take(4, "end marker")?;
        if end != END_MARKER {
            return Err(Error::format(self.path, "missing end marker"));
        }
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes after end marker"));
        }
        Ok(())
    }
}

pub fn encode_module<T: Real>(ck: &ModuleCheckpoint<T>, precision: Precision) -> Vec<u8> {
    let mut w = Writer::new(KIND_MODULE, precision);
    let a = &ck.params.arch;
    w.u32(a.k);
    w.u32(a.encoder_widths.len());
    a.encoder_widths.iter().for_each(|&v| w.u32(v));
    w.u32(a.decoder_hidden.len());
    a.decoder_hidden.iter().for_each(|&v| w.u32(v));
    w.u32(a.encoder_knn);
    w.u64(ck.step);
    w.buf.extend_from_slice(&ck.rng.seed);
    w.u64(ck.rng.stream);
    w.buf.extend_from_slice(&ck.rng.word_pos.to_le_bytes());
    let tensors = ck.params.tensors();
    w.u32(tensors.len());
    for t in &tensors {
        w.tensor(t);
    }
    match &ck.adam {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            w.f64(s.lr);
            w.f64(s.beta1);
            w.f64(s.beta2);
            w.f64(s.eps);
            w.u64(s.step);
            for t in s.m.iter().chain(&s.v) {
                w.tensor(t);
            }
        }
    }
    w.finish()
}

pub fn decode_module<T: Real>(path: &Path, bytes: &[u8]) -> Result<ModuleCheckpoint<T>> {
    let mut r = Reader::open(path, bytes, KIND_MODULE)?;
    let k = r.u32("architecture")?;
    let encoder_widths = r.widths("encoder widths")?;
    let decoder_hidden = r.widths("decoder widths")?;
    let encoder_knn = r.u32("architecture")?;
    let arch = Architecture {
        k,
        encoder_widths,
        decoder_hidden,
        encoder_knn,
    };
    arch.validate().map_err(|e| Error::format(path, e.to_string()))?;
    let step = r.u64("step counter")?;
    let seed: [u8; 32] = r.take(32, "rng state")?.try_into().unwrap();
    let stream = r.u64("rng state")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng state")?.try_into().unwrap());
    let mut params = ModuleParams::<T>::zeros(&arch)?;
    let names = params.tensor_names();
    let count = r.u32("tensor count")?;
    if count != names.len() {
        return Err(Error::format(
            path,
            format!("{count} tensors stored, architecture has {}", names.len()),
        ));
    }
    for (t, name) in params.tensors_mut().into_iter().zip(&names) {
        r.tensor_into(t, name, "parameters")?;
    }
    let adam = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let mut s = AdamState::new(&params, r.f64("optimizer state")?);
            s.beta1 = r.f64("optimizer state")?;
            s.beta2 = r.f64("optimizer state")?;
            s.eps = r.f64("optimizer state")?;
            s.step = r.u64("optimizer state")?;
            for (t, name) in s.m.iter_mut().chain(s.v.iter_mut()).zip(names.iter().chain(&names)) {
                r.tensor_into(t, name, "optimizer moments")?;
            }
            Some(s)
        }
        f => return Err(Error::format(path, format!("bad optimizer flag {f}"))),
    };
    r.finish()?;
    Ok(ModuleCheckpoint {
        params,
        rng: RngState { seed, stream, word_pos },
        step,
        adam,
    })
}

pub fn save_checkpoint<T: Real>(ck: &ModuleCheckpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_with(ck, path, Precision::of::<T>())
}

pub fn save_checkpoint_with<T: Real>(ck: &ModuleCheckpoint<T>, path: impl AsRef<Path>, precision: Precision) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode_module(ck, precision))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<ModuleCheckpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_module(path, &bytes)
}

pub fn encode_gaussians<T: Real>(g: &Gaussian2DSet<T>, precision: Precision) -> Vec<u8> {
    let mut w = Writer::new(KIND_GAUSSIANS, precision);
    w.u8(match g.space {
        Space::Normalized => 0,
        Space::World => 1,
    });
    w.u64(g.len() as u64);
    g.positions.iter().flatten().for_each(|&v| w.float(v));
    g.scales.iter().flatten().for_each(|&v| w.float(v));
    g.opacities.iter().for_each(|&v| w.float(v));
    g.sh.iter().flatten().for_each(|&v| w.float(v));
    g.normals.iter().flatten().for_each(|&v| w.float(v));
    g.angles.iter().for_each(|&v| w.float(v));
    w.finish()
}

pub fn decode_gaussians<T: Real>(path: &Path, bytes: &[u8]) -> Result<Gaussian2DSet<T>> {
    let mut r = Reader::open(path, bytes, KIND_GAUSSIANS)?;
    let space = match r.u8("space tag")? {
        0 => Space::Normalized,
        1 => Space::World,
        s => return Err(Error::format(path, format!("bad space tag {s}"))),
    };
    let n = r.u64("count")? as usize;
    let per = 3 + 2 + 1 + SH_COEFFS + 3 + 1;
    let need = n.checked_mul(per * r.precision.width() as usize);
    if need.is_none_or(|b| b > bytes.len()) {
        return Err(Error::UnexpectedEof {
            path: path.to_path_buf(),
            what: "Gaussian fields",
        });
    }
    let z = T::zero();
    let mut g = Gaussian2DSet {
        positions: vec![[z; 3]; n],
        scales: vec![[z; 2]; n],
        opacities: vec![z; n],
        sh: vec![[z; SH_COEFFS]; n],
        normals: vec![[z; 3]; n],
        angles: vec![z; n],
        space,
    };
    r.floats(g.positions.as_flattened_mut(), "positions")?;
    r.floats(g.scales.as_flattened_mut(), "scales")?;
    r.floats(&mut g.opacities, "opacities")?;
    r.floats(g.sh.as_flattened_mut(), "SH coefficients")?;
    r.floats(g.normals.as_flattened_mut(), "normals")?;
    r.floats(&mut g.angles, "angles")?;
    r.finish()?;
    Ok(g)
}

pub fn save_gaussians<T: Real>(g: &Gaussian2DSet<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode_gaussians(g, Precision::of::<T>()))
}

pub fn load_gaussians<T: Real>(path: impl AsRef<Path>) -> Result<Gaussian2DSet<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_gaussians(path, &bytes)
}

/// Write through a sibling temporary file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_arch() -> Architecture {
        Architecture {
            k: 2,
            encoder_widths: vec![4, 6],
            decoder_hidden: vec![5],
            encoder_knn: 3,
        }
    }

    #[test]
    fn module_round_trip_bitwise() {
        let params = ModuleParams::<f32>::init(&small_arch(), 9).unwrap();
        let mut adam = AdamState::new(&params, 1e-3);
        adam.step = 7;
        adam.m[0][0] = 0.25;
        let rng = ChaCha8Rng::seed_from_u64(3);
        let ck = ModuleCheckpoint {
            params,
            rng: RngState::capture(&rng),
            step: 42,
            adam: Some(adam),
        };
        let bytes = encode_module(&ck, Precision::F32);
        let back: ModuleCheckpoint<f32> = decode_module(Path::new("m.ckpt"), &bytes).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn every_truncation_fails() {
        let params = ModuleParams::<f64>::init(&small_arch(), 1).unwrap();
        let ck = ModuleCheckpoint {
            params,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
            step: 0,
            adam: None,
        };
        let bytes = encode_module(&ck, Precision::F64);
        for cut in 0..bytes.len() {
            let e = decode_module::<f64>(Path::new("m.ckpt"), &bytes[..cut]).unwrap_err();
            if cut < 4 {
                assert!(matches!(e, Error::BadMagic { .. }), "cut {cut}: {e}");
            } else {
                assert!(matches!(e, Error::UnexpectedEof { .. }), "cut {cut}: {e}");
            }
        }
    }

    #[test]
    fn version_and_magic_checked() {
        let g = Gaussian2DSet::<f32>::empty(Space::World);
        let mut bytes = encode_gaussians(&g, Precision::F32);
        bytes[4] = 9;
        let e = decode_gaussians::<f32>(Path::new("g"), &bytes).unwrap_err();
        assert!(matches!(e, Error::VersionMismatch { found: 9, expected: 1, .. }));
        bytes[0] = b'X';
        let e = decode_gaussians::<f32>(Path::new("g"), &bytes).unwrap_err();
        assert!(matches!(e, Error::BadMagic { .. }));
    }

    #[test]
    fn rng_state_resumes_stream() {
        use rand::Rng;
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let _: u64 = a.random();
        let state = RngState::capture(&a);
        let x: [u64; 4] = a.random();
        let mut b = state.restore();
        let y: [u64; 4] = b.random();
        assert_eq!(x, y);
    }
}
