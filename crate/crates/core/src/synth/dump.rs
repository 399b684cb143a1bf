//! Binary record dump.
//!
//! ```text
//! RASE-SHOT-DUMP\n
//! version <u32>\n
//! header-bytes <n>\n
//! <n bytes of JSON header>\n
//! record*  (all little-endian)
//!     u64 shot_id
//!     u64 flags            bit 0: background shot
//!     f64 truth phase (rad)
//!     u64 rng stream id
//!     u64 n_samples
//!     f64 x 2 n_samples    interleaved re, im
//! ```

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{NoiseModel, SequenceConfig, ShotRecord, ShotTruth};
use crate::error::{Error, Result};

pub const MAGIC: &str = "RASE-SHOT-DUMP";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_BACKGROUND: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub format_version: u32,
    pub generator: String,
    pub sequence: SequenceConfig,
    pub noise: NoiseModel,
    pub n_records: usize,
    pub samples_per_record: usize,
}

impl DumpHeader {
    pub fn new(sequence: &SequenceConfig, noise: &NoiseModel) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            generator: concat!("rase-core ", env!("CARGO_PKG_VERSION")).to_string(),
            sequence: sequence.clone(),
            noise: *noise,
            n_records: sequence.n_records(),
            samples_per_record: sequence.timeline().total,
        }
    }
}

pub struct DumpWriter<W: Write> {
    out: W,
    samples_per_record: usize,
    written: usize,
    expected: usize,
}

impl DumpWriter<BufWriter<std::fs::File>> {
    pub fn create(path: impl AsRef<Path>, header: &DumpHeader) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        Self::new(BufWriter::new(file), header)
    }
}

impl<W: Write> DumpWriter<W> {
    pub fn new(mut out: W, header: &DumpHeader) -> Result<Self> {
        let json = serde_json::to_string(header).map_err(|e| Error::Format(e.to_string()))?;
        write!(out, "{MAGIC}\nversion {}\nheader-bytes {}\n{json}\n", header.format_version, json.len())?;
        Ok(Self {
            out,
            samples_per_record: header.samples_per_record,
            written: 0,
            expected: header.n_records,
        })
    }

    pub fn write_record(&mut self, rec: &ShotRecord) -> Result<()> {
        if rec.trace.len() != self.samples_per_record {
            return Err(Error::Format(format!(
                "record {} has {} samples, header declares {}",
                rec.shot_id,
                rec.trace.len(),
                self.samples_per_record
            )));
        }
        let flags = if rec.background { FLAG_BACKGROUND } else { 0 };
        let mut buf = Vec::with_capacity(40 + 16 * rec.trace.len());
        buf.extend_from_slice(&rec.shot_id.to_le_bytes());
        buf.extend_from_slice(&flags.to_le_bytes());
        buf.extend_from_slice(&rec.truth.interferometer_phase_rad.to_le_bytes());
        buf.extend_from_slice(&rec.truth.rng_stream_id.to_le_bytes());
        buf.extend_from_slice(&(rec.trace.len() as u64).to_le_bytes());
        for z in &rec.trace {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
        self.out.write_all(&buf)?;
        self.written += 1;
        Ok(())
    }

    /// Flushes and checks that the declared number of records was written.
    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        if self.written != self.expected {
            return Err(Error::Format(format!(
                "wrote {} records, header declares {}",
                self.written, self.expected
            )));
        }
        Ok(self.out)
    }
}

pub struct DumpReader<R: Read> {
    input: R,
    header: DumpHeader,
    remaining: usize,
}

impl DumpReader<BufReader<std::fs::File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_line(input: &mut impl BufRead) -> Result<String> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(Error::Format("truncated dump header".into()));
    }
    line.pop();
    Ok(line)
}

impl<R: BufRead> DumpReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        if read_line(&mut input)? != MAGIC {
            return Err(Error::Format("not a RASE shot dump (bad magic line)".into()));
        }
        let version: u32 = read_line(&mut input)?
            .strip_prefix("version ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("missing version line".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let n: usize = read_line(&mut input)?
            .strip_prefix("header-bytes ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("missing header-bytes line".into()))?;
        let mut json = vec![0u8; n + 1];
        input.read_exact(&mut json)?;
        if json.pop() != Some(b'\n') {
            return Err(Error::Format("header not terminated by newline".into()));
        }
        let header: DumpHeader =
            serde_json::from_slice(&json).map_err(|e| Error::Format(format!("dump header: {e}")))?;
        if header.format_version != version {
            return Err(Error::Format("header version disagrees with version line".into()));
        }
        let remaining = header.n_records;
        Ok(Self { input, header, remaining })
    }

    pub fn header(&self) -> &DumpHeader {
        &self.header
    }

    fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.input.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.read_u64()?))
    }

    fn read_record(&mut self) -> Result<ShotRecord> {
        let shot_id = self.read_u64()?;
        let flags = self.read_u64()?;
        let phase = self.read_f64()?;
        let stream = self.read_u64()?;
        let n = self.read_u64()? as usize;
        if n != self.header.samples_per_record {
            return Err(Error::Format(format!(
                "record {shot_id} has {n} samples, header declares {}",
                self.header.samples_per_record
            )));
        }
        let mut raw = vec![0u8; 16 * n];
        self.input.read_exact(&mut raw)?;
        let trace = raw
            .chunks_exact(16)
            .map(|c| {
                let re = f64::from_le_bytes(c[..8].try_into().unwrap());
                let im = f64::from_le_bytes(c[8..].try_into().unwrap());
                Complex64::new(re, im)
            })
            .collect();
        Ok(ShotRecord {
            shot_id,
            background: flags & FLAG_BACKGROUND != 0,
            trace,
            truth: ShotTruth { interferometer_phase_rad: phase, rng_stream_id: stream },
        })
    }
}

impl<R: BufRead> Iterator for DumpReader<R> {
    type Item = Result<ShotRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(self.read_record().map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
                Error::Format("dump ends before the declared number of records".into())
            }
            other => other,
        }))
    }
}

/// Reads a whole dump into memory.
pub fn read_dump(path: impl AsRef<Path>) -> Result<(DumpHeader, Vec<ShotRecord>)> {
    let reader = DumpReader::open(path)?;
    let header = reader.header().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthesize_run_par;
    use proptest::prelude::*;

    fn roundtrip(cfg: &SequenceConfig, noise: &NoiseModel) -> (Vec<u8>, Vec<ShotRecord>) {
        let recs = synthesize_run_par(cfg, noise).unwrap();
        let mut w = DumpWriter::new(Vec::new(), &DumpHeader::new(cfg, noise)).unwrap();
        for r in &recs {
            w.write_record(r).unwrap();
        }
        (w.finish().unwrap(), recs)
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let cfg = SequenceConfig { n_shots: 2, ..Default::default() };
        let (bytes, _) = roundtrip(&cfg, &NoiseModel::default());
        let text = String::from_utf8_lossy(&bytes[..40]).replace("version 1", "version 7");
        let mut patched = text.into_bytes();
        patched.extend_from_slice(&bytes[40..]);
        let err = DumpReader::new(&patched[..]).err().unwrap();
        assert!(matches!(err, Error::VersionMismatch { found: 7, expected: 1 }));
    }

    #[test]
    fn truncated_dump_is_a_format_error() {
        let cfg = SequenceConfig { n_shots: 3, ..Default::default() };
        let (bytes, _) = roundtrip(&cfg, &NoiseModel::default());
        let cut = &bytes[..bytes.len() - 100];
        let res: Result<Vec<_>> = DumpReader::new(cut).unwrap().collect();
        assert!(matches!(res, Err(Error::Format(_))));
        assert!(matches!(DumpReader::new(&b"garbage\n"[..]), Err(Error::Format(_))));
    }

    #[test]
    fn writer_checks_record_count() {
        let cfg = SequenceConfig { n_shots: 2, ..Default::default() };
        let w = DumpWriter::new(Vec::new(), &DumpHeader::new(&cfg, &NoiseModel::default())).unwrap();
        assert!(w.finish().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn dump_roundtrip_is_lossless(seed in any::<u64>(), n in 1usize..6, alpha in 0.0..2.0f64, bg in 0usize..3) {
            let mut cfg = SequenceConfig { n_shots: n, rng_seed: seed, background_every: bg, ..Default::default() };
            cfg.gain.alpha_l = alpha;
            let noise = NoiseModel::default();
            let (bytes, recs) = roundtrip(&cfg, &noise);
            let reader = DumpReader::new(&bytes[..]).unwrap();
            prop_assert_eq!(reader.header(), &DumpHeader::new(&cfg, &noise));
            let back: Vec<ShotRecord> = reader.collect::<Result<_>>().unwrap();
            prop_assert_eq!(back, recs);
        }
    }
}
