//! Little-endian byte writer/reader with offset-tagged parse errors and an
//! FNV-1a trailer checksum.

use bridge_autodiff::{ParamSet, Tensor};

use crate::CoreError;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for d in t.shape() {
            self.u64(*d as u64);
        }
        for v in t.data() {
            self.f64(*v);
        }
    }

    /// Shape table (names and shapes) followed by the flat value blob.
    pub fn param_set(&mut self, ps: &ParamSet) {
        self.u32(ps.len() as u32);
        for (name, t) in ps.iter() {
            self.str(name);
            self.u32(t.shape().len() as u32);
            for d in t.shape() {
                self.u64(*d as u64);
            }
        }
        for (_, t) in ps.iter() {
            for v in t.data() {
                self.f64(*v);
            }
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let sum = fnv1a(&self.buf);
        self.u64(sum);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub pos: usize,
}

const MAX_DIMS: usize = 8;
const MAX_ELEMS: u64 = 1 << 28;

impl<'a> Reader<'a> {
    /// Verify the trailer checksum and position at the start.
    pub fn checked(buf: &'a [u8]) -> Result<Self, CoreError> {
        if buf.len() < 8 {
            return Err(CoreError::Parse {
                offset: buf.len(),
                message: "truncated: no checksum".into(),
            });
        }
        let body = buf.len() - 8;
        let stored = u64::from_le_bytes(buf[body..].try_into().unwrap());
        if stored != fnv1a(&buf[..body]) {
            return Err(CoreError::Parse {
                offset: body,
                message: "checksum mismatch".into(),
            });
        }
        Ok(Self {
            buf: &buf[..body],
            pos: 0,
        })
    }

    /// Reader over the whole buffer without checksum handling.
    pub fn raw(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn invalid(&self, at: usize, message: impl Into<String>) -> CoreError {
        CoreError::Parse {
            offset: at,
            message: message.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CoreError> {
        if self.buf.len() - self.pos < n {
            return Err(self.invalid(
                self.pos,
                format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, CoreError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CoreError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, CoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, CoreError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String, CoreError> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.invalid(at, "string is not UTF-8"))
    }

    fn shape(&mut self) -> Result<Vec<usize>, CoreError> {
        let at = self.pos;
        let nd = self.u32()? as usize;
        if nd > MAX_DIMS {
            return Err(self.invalid(at, format!("tensor rank {nd} exceeds {MAX_DIMS}")));
        }
        let mut shape = Vec::with_capacity(nd);
        let mut total: u64 = 1;
        for _ in 0..nd {
            let d = self.u64()?;
            total = total.saturating_mul(d);
            shape.push(d as usize);
        }
        if total > MAX_ELEMS {
            return Err(self.invalid(at, format!("tensor of {total} elements is implausibly large")));
        }
        Ok(shape)
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>, CoreError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn tensor(&mut self) -> Result<Tensor, CoreError> {
        let shape = self.shape()?;
        let n = shape.iter().product();
        Ok(Tensor::new(&shape, self.values(n)?))
    }

    pub fn param_set(&mut self) -> Result<ParamSet, CoreError> {
        let count = self.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = self.str()?;
            let shape = self.shape()?;
            table.push((name, shape));
        }
        let mut ps = ParamSet::new();
        for (name, shape) in table {
            let n = shape.iter().product();
            ps.push(name, Tensor::new(&shape, self.values(n)?));
        }
        Ok(ps)
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_set_round_trip() {
        let mut ps = ParamSet::new();
        ps.push("a.w", Tensor::new(&[2, 1], vec![1.5, -0.25]));
        ps.push("a.b", Tensor::scalar(3.0));
        let mut w = Writer::default();
        w.param_set(&ps);
        w.str("tail");
        let bytes = w.finish();
        let mut r = Reader::checked(&bytes).unwrap();
        assert_eq!(r.param_set().unwrap(), ps);
        assert_eq!(r.str().unwrap(), "tail");
        assert!(r.at_end());
    }

    #[test]
    fn checksum_detects_flip() {
        let mut w = Writer::default();
        w.u64(42);
        let mut bytes = w.finish();
        bytes[0] ^= 1;
        assert!(Reader::checked(&bytes).is_err());
        assert!(Reader::checked(&[1, 2]).is_err());
    }
}
