//! Netpbm grayscale (PGM) codec, plain (`P2`) and raw (`P5`), 8- and 16-bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frame::Frame;

/// Refuse headers that would allocate more than this many samples.
const MAX_SAMPLES: usize = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmEncoding {
    Plain,
    Raw,
}

/// Integer sample image as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples, each `<= maxval`.
    pub samples: Vec<u16>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn uint(&mut self, what: &str) -> Result<u64> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        let mut value: u64 = 0;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add(u64::from(self.bytes[self.pos] - b'0')))
                .ok_or_else(|| Error::Pgm(format!("{what} overflows")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Pgm(format!("expected {what} at byte {start}")));
        }
        Ok(value)
    }
}

impl Pgm {
    pub fn decode(bytes: &[u8]) -> Result<Pgm> {
        if bytes.len() < 2 || bytes[0] != b'P' {
            return Err(Error::Pgm("missing magic number".into()));
        }
        let encoding = match bytes[1] {
            b'2' => PgmEncoding::Plain,
            b'5' => PgmEncoding::Raw,
            other => {
                return Err(Error::Pgm(format!(
                    "unsupported magic P{}",
                    char::from(other).escape_default()
                )))
            }
        };
        let mut cur = Cursor { bytes, pos: 2 };
        let width = cur.uint("width")?;
        let height = cur.uint("height")?;
        let maxval = cur.uint("maxval")?;
        if width == 0 || height == 0 {
            return Err(Error::Pgm(format!("empty image {width}x{height}")));
        }
        if maxval == 0 || maxval > u64::from(u16::MAX) {
            return Err(Error::Pgm(format!("maxval {maxval} outside 1..=65535")));
        }
        let count = width
            .checked_mul(height)
            .filter(|&c| c <= MAX_SAMPLES as u64)
            .ok_or_else(|| Error::Pgm(format!("image {width}x{height} too large")))?
            as usize;
        let maxval = maxval as u16;

        let samples = match encoding {
            PgmEncoding::Raw => {
                // Exactly one whitespace byte separates the header from the raster.
                match bytes.get(cur.pos) {
                    Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
                    _ => return Err(Error::Pgm("missing raster separator".into())),
                }
                let bytes_per = if maxval > 255 { 2 } else { 1 };
                let raster = &bytes[cur.pos..];
                if raster.len() < count * bytes_per {
                    return Err(Error::Pgm(format!(
                        "raster truncated: need {} bytes, have {}",
                        count * bytes_per,
                        raster.len()
                    )));
                }
                let mut samples = Vec::with_capacity(count);
                for idx in 0..count {
                    let v = if bytes_per == 2 {
                        u16::from_be_bytes([raster[2 * idx], raster[2 * idx + 1]])
                    } else {
                        u16::from(raster[idx])
                    };
                    samples.push(v);
                }
                samples
            }
            PgmEncoding::Plain => {
                let mut samples = Vec::with_capacity(count.min(bytes.len()));
                for _ in 0..count {
                    let v = cur.uint("sample")?;
                    if v > u64::from(maxval) {
                        return Err(Error::Pgm(format!("sample {v} exceeds maxval {maxval}")));
                    }
                    samples.push(v as u16);
                }
                samples
            }
        };
        if let Some(v) = samples.iter().find(|&&v| v > maxval) {
            return Err(Error::Pgm(format!("sample {v} exceeds maxval {maxval}")));
        }
        Ok(Pgm {
            width: width as usize,
            height: height as usize,
            maxval,
            samples,
        })
    }

    pub fn encode(&self, encoding: PgmEncoding) -> Vec<u8> {
        let mut out = Vec::new();
        match encoding {
            PgmEncoding::Raw => {
                out.extend_from_slice(
                    format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).as_bytes(),
                );
                for &v in &self.samples {
                    if self.maxval > 255 {
                        out.extend_from_slice(&v.to_be_bytes());
                    } else {
                        out.push(v as u8);
                    }
                }
            }
            PgmEncoding::Plain => {
                out.extend_from_slice(
                    format!("P2\n{} {}\n{}\n", self.width, self.height, self.maxval).as_bytes(),
                );
                for row in self.samples.chunks(self.width) {
                    let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                    out.extend_from_slice(line.join(" ").as_bytes());
                    out.push(b'\n');
                }
            }
        }
        out
    }

    /// Maps samples linearly so that 0 → `lo` and `maxval` → `hi`.
    pub fn to_frame(&self, lo: f64, hi: f64) -> Frame {
        let scale = (hi - lo) / f64::from(self.maxval);
        let pixels = self
            .samples
            .iter()
            .map(|&v| lo + f64::from(v) * scale)
            .collect();
        Frame::new(self.width, self.height, pixels, 0).expect("finite scaled samples")
    }

    /// Quantizes `frame` onto `0..=maxval` over the intensity window `[lo, hi]`,
    /// clamping values outside it.
    pub fn from_frame(frame: &Frame, lo: f64, hi: f64, maxval: u16) -> Pgm {
        let span = if hi > lo { hi - lo } else { 1.0 };
        let samples = frame
            .pixels()
            .iter()
            .map(|&v| {
                let q = ((v - lo) / span * f64::from(maxval)).round();
                q.clamp(0.0, f64::from(maxval)) as u16
            })
            .collect();
        Pgm {
            width: frame.width(),
            height: frame.height(),
            maxval,
            samples,
        }
    }

    pub fn read(path: &Path) -> Result<Pgm> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Pgm::decode(&bytes).map_err(|e| match e {
            Error::Pgm(msg) => Error::Pgm(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path, encoding: PgmEncoding) -> Result<()> {
        fs::write(path, self.encode(encoding)).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_plain_with_comments() {
        let src = b"P2\n# made by hand\n2 2\n255\n0 255\n0 255\n";
        let pgm = Pgm::decode(src).unwrap();
        assert_eq!(pgm.samples, vec![0, 255, 0, 255]);
        let frame = pgm.to_frame(0.0, 1.0);
        assert_eq!(frame.pixels(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn decodes_raw_16bit() {
        let mut src = b"P5 2 1 65535\n".to_vec();
        src.extend_from_slice(&[0x01, 0x02, 0xff, 0xff]);
        let pgm = Pgm::decode(&src).unwrap();
        assert_eq!(pgm.samples, vec![0x0102, 0xffff]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(Pgm::decode(b"").is_err());
        assert!(Pgm::decode(b"P6 1 1 255\n\0\0\0").is_err());
        assert!(Pgm::decode(b"P5 2 2 255\n\0").is_err());
        assert!(Pgm::decode(b"P2 1 1 10\n11\n").is_err());
        assert!(Pgm::decode(b"P2 0 1 10\n").is_err());
        assert!(Pgm::decode(b"P2 1 1 70000\n1").is_err());
        assert!(Pgm::decode(b"P5 99999999 99999999 255\n").is_err());
        assert!(Pgm::decode(b"P2 99999999999999999999999 1 255\n").is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(
            width in 1usize..12,
            height in 1usize..12,
            maxval in prop_oneof![Just(255u16), Just(65535u16), 1u16..1000],
            plain in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let mut state = seed;
            let samples = (0..width * height)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((state >> 33) % (u64::from(maxval) + 1)) as u16
                })
                .collect();
            let pgm = Pgm { width, height, maxval, samples };
            let enc = if plain { PgmEncoding::Plain } else { PgmEncoding::Raw };
            prop_assert_eq!(Pgm::decode(&pgm.encode(enc)).unwrap(), pgm);
        }
    }
}
