//! The spatio-temporal DAS array: `bins × shots` phase-displacement values
//! (radians), one contiguous time series per fibre bin.
//!
//! On disk a waterfall is a `DASW` file (all fields little-endian):
//!
//! | field          | type            |
//! |----------------|-----------------|
//! | magic          | `b"DASW"`       |
//! | version        | u16 = 1         |
//! | bins (B)       | u32             |
//! | shots (M)      | u32             |
//! | bin pitch, m   | f64             |
//! | shot period, s | f64             |
//! | payload        | B·M × f32, row-major by bin |
//! | payload CRC-32 | u32             |
//! | trailer magic  | `b"WSAD"`       |

use std::path::Path;

use crate::binio::{self, Reader};
use crate::error::{invalid, Error, Result};

pub const DEFAULT_BIN_PITCH_M: f64 = 0.68;
pub const DEFAULT_SHOT_PERIOD_S: f64 = 1.0 / 1000.04;

const MAGIC: &[u8; 4] = b"DASW";
const TRAILER: &[u8; 4] = b"WSAD";
const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 8 + 8;
pub const TRAILER_LEN: usize = 4 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Waterfall {
    bins: usize,
    shots: usize,
    bin_pitch_m: f64,
    shot_period_s: f64,
    values: Vec<f32>,
}

impl Waterfall {
    pub fn new(
        bins: usize,
        shots: usize,
        bin_pitch_m: f64,
        shot_period_s: f64,
        values: Vec<f32>,
    ) -> Result<Self> {
        if bins == 0 || shots == 0 {
            return Err(invalid(format!("waterfall must be non-empty, got {bins}x{shots}")));
        }
        if bins > u32::MAX as usize || shots > u32::MAX as usize {
            return Err(invalid("waterfall dimensions exceed u32"));
        }
        if !(bin_pitch_m > 0.0 && bin_pitch_m.is_finite()) {
            return Err(invalid(format!("bin pitch must be positive, got {bin_pitch_m}")));
        }
        if !(shot_period_s > 0.0 && shot_period_s.is_finite()) {
            return Err(invalid(format!("shot period must be positive, got {shot_period_s}")));
        }
        if values.len() != bins * shots {
            return Err(invalid(format!(
                "expected {} values for {bins}x{shots}, got {}",
                bins * shots,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                bin: i / shots,
                shot: i % shots,
            });
        }
        Ok(Waterfall {
            bins,
            shots,
            bin_pitch_m,
            shot_period_s,
            values,
        })
    }

    /// An all-zero waterfall at the default pitch and shot period.
    pub fn zeros(bins: usize, shots: usize) -> Result<Self> {
        Self::new(
            bins,
            shots,
            DEFAULT_BIN_PITCH_M,
            DEFAULT_SHOT_PERIOD_S,
            vec![0.0; bins * shots],
        )
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn bin_pitch_m(&self) -> f64 {
        self.bin_pitch_m
    }

    pub fn shot_period_s(&self) -> f64 {
        self.shot_period_s
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// The full time series of one bin.
    pub fn row(&self, bin: usize) -> &[f32] {
        &self.values[bin * self.shots..(bin + 1) * self.shots]
    }

    pub fn get(&self, bin: usize, shot: usize) -> f32 {
        self.values[bin * self.shots + shot]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len() + TRAILER_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.bins as u32).to_le_bytes());
        out.extend_from_slice(&(self.shots as u32).to_le_bytes());
        out.extend_from_slice(&self.bin_pitch_m.to_le_bytes());
        out.extend_from_slice(&self.shot_period_s.to_le_bytes());
        let payload_start = out.len();
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[payload_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out.extend_from_slice(TRAILER);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "waterfall");
        r.magic(MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                format: "DASW",
                version,
            });
        }
        let bins = r.u32()? as usize;
        let shots = r.u32()? as usize;
        let bin_pitch_m = r.f64()?;
        let shot_period_s = r.f64()?;
        let payload_len = (bins as u64) * (shots as u64) * 4;
        if (r.remaining() as u64) < payload_len + TRAILER_LEN as u64 {
            return Err(Error::Truncated {
                what: format!("waterfall payload ({bins}x{shots})"),
                needed: payload_len + TRAILER_LEN as u64,
                available: r.remaining() as u64,
            });
        }
        let payload = r.take(payload_len as usize)?;
        let stored = r.u32()?;
        let computed = crc32fast::hash(payload);
        let trailer = r.take(4)?;
        if trailer != TRAILER {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(TRAILER).into_owned(),
                found: String::from_utf8_lossy(trailer).into_owned(),
            });
        }
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Waterfall::new(bins, shots, bin_pitch_m, shot_period_s, values)
    }

    /// Binary PGM (P5) image, width = shots, height = bins, with `v` mapped
    /// to `round(255·clamp((v−lo)/(hi−lo), 0, 1))`.
    pub fn render_pgm(&self, lo: f64, hi: f64) -> Result<Vec<u8>> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(invalid(format!("render range needs lo < hi, got {lo}:{hi}")));
        }
        let header = format!("P5\n{} {}\n255\n", self.shots, self.bins);
        let mut out = Vec::with_capacity(header.len() + self.values.len());
        out.extend_from_slice(header.as_bytes());
        let span = hi - lo;
        out.extend(self.values.iter().map(|&v| {
            let t = ((v as f64 - lo) / span).clamp(0.0, 1.0);
            (255.0 * t).round() as u8
        }));
        Ok(out)
    }
}

pub fn save_waterfall(w: &Waterfall, path: impl AsRef<Path>) -> Result<()> {
    binio::write_atomic(path.as_ref(), &w.to_bytes())
}

pub fn load_waterfall(path: impl AsRef<Path>) -> Result<Waterfall> {
    Waterfall::from_bytes(&binio::read_file(path.as_ref())?)
}

pub fn render_pgm(w: &Waterfall, lo: f64, hi: f64) -> Result<Vec<u8>> {
    w.render_pgm(lo, hi)
}
