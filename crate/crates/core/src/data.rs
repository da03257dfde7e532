//! Dataset files: one CSV per split with records
//! `trajectory_id,t,x,y,k`, an optional packed binary form, and a manifest.
//!
//! Regimes are written as 1-based labels. Floats use the shortest decimal
//! form that parses back to the same value, so a CSV round trip is exact.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ssm::Trajectory;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const CSV_HEADER: [&str; 5] = ["trajectory_id", "t", "x", "y", "k"];

pub fn write_csv(trajectories: &[Trajectory], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for (id, tr) in trajectories.iter().enumerate() {
        for t in 0..tr.len() {
            out.write_record([
                id.to_string(),
                t.to_string(),
                tr.x[t].to_string(),
                tr.y[t].to_string(),
                (tr.k[t] + 1).to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads records grouped by trajectory id. Ids must be `0, 1, ...` in
/// order and each trajectory's steps `0, 1, ...` in order.
pub fn read_csv(r: impl Read) -> Result<Vec<Trajectory>> {
    let mut reader = csv::Reader::from_reader(r);
    if reader.headers()?.iter().ne(CSV_HEADER) {
        return Err(DataError::Malformed(format!(
            "expected header {}",
            CSV_HEADER.join(",")
        )));
    }
    let mut out: Vec<Trajectory> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let bad = |what: &str| DataError::Malformed(format!("record {}: {what}", line + 1));
        if record.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let int = |i: usize| record[i].parse::<usize>().map_err(|_| bad(CSV_HEADER[i]));
        let float = |i: usize| record[i].parse::<f64>().map_err(|_| bad(CSV_HEADER[i]));
        let (id, t, x, y, label) = (int(0)?, int(1)?, float(2)?, float(3)?, int(4)?);
        if label == 0 {
            return Err(bad("regime labels start at 1"));
        }
        if id == out.len() {
            out.push(Trajectory {
                x: vec![],
                y: vec![],
                k: vec![],
            });
        } else if id + 1 != out.len() {
            return Err(bad("trajectory ids out of order"));
        }
        let tr = out.last_mut().expect("pushed above");
        if t != tr.len() {
            return Err(bad("time steps out of order"));
        }
        tr.x.push(x);
        tr.y.push(y);
        tr.k.push(label - 1);
    }
    if out.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(DataError::Malformed("trajectories differ in length".into()));
    }
    Ok(out)
}

pub const PACKED_MAGIC: &[u8; 4] = b"RLPD";
pub const PACKED_VERSION: u32 = 1;

/// Header `magic, version, n_traj, T` (16 bytes), then per trajectory and
/// step `x` and `y` as f64 and the regime label as u64, little-endian.
pub fn write_packed(trajectories: &[Trajectory], mut w: impl Write) -> Result<()> {
    let steps = trajectories.first().map_or(0, |t| t.len());
    if trajectories.iter().any(|t| t.len() != steps) {
        return Err(DataError::Malformed("trajectories differ in length".into()));
    }
    let t_final = steps.saturating_sub(1) as u32;
    let mut buf = Vec::with_capacity(16 + trajectories.len() * steps * 24);
    buf.extend_from_slice(PACKED_MAGIC);
    buf.extend_from_slice(&PACKED_VERSION.to_le_bytes());
    buf.extend_from_slice(&(trajectories.len() as u32).to_le_bytes());
    buf.extend_from_slice(&t_final.to_le_bytes());
    for tr in trajectories {
        for t in 0..steps {
            buf.extend_from_slice(&tr.x[t].to_le_bytes());
            buf.extend_from_slice(&tr.y[t].to_le_bytes());
            buf.extend_from_slice(&(tr.k[t] as u64 + 1).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_packed(mut r: impl Read) -> Result<Vec<Trajectory>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != PACKED_MAGIC {
        return Err(DataError::Malformed("bad packed header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    if word(4) != PACKED_VERSION as usize {
        return Err(DataError::Malformed(format!("unsupported version {}", word(4))));
    }
    let (n, steps) = (word(8), word(12) + 1);
    if n > 0 && bytes.len() != 16 + n * steps * 24 {
        return Err(DataError::Malformed("packed body has the wrong length".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut chunks = bytes[16..].chunks_exact(8).map(|c| c.try_into().expect("8 bytes"));
    let mut next = || chunks.next().expect("length checked");
    for _ in 0..n {
        let mut tr = Trajectory {
            x: Vec::with_capacity(steps),
            y: Vec::with_capacity(steps),
            k: Vec::with_capacity(steps),
        };
        for _ in 0..steps {
            tr.x.push(f64::from_le_bytes(next()));
            tr.y.push(f64::from_le_bytes(next()));
            let label = u64::from_le_bytes(next());
            if label == 0 {
                return Err(DataError::Malformed("regime labels start at 1".into()));
            }
            tr.k.push(label as usize - 1);
        }
        out.push(tr);
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// What was generated, and the digest of each split file.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub experiment: String,
    pub seed: u64,
    pub n_regimes: usize,
    pub t_final: usize,
    /// `(split name, file name, trajectory count, sha256)`.
    pub splits: Vec<(String, String, usize, String)>,
}

impl Manifest {
    /// `key = value` lines, one `[split]` section per split.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment = \"{}\"", self.experiment);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "n_regimes = {}", self.n_regimes);
        let _ = writeln!(s, "t_final = {}", self.t_final);
        for (name, file, count, hash) in &self.splits {
            let _ = write!(
                s,
                "\n[{name}]\nfile = \"{file}\"\ntrajectories = {count}\nsha256 = \"{hash}\"\n"
            );
        }
        s
    }

    /// Digest of the manifest text.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

/// Writes `bytes` to `path` and returns their digest.
pub fn write_hashed(path: &Path, bytes: &[u8]) -> Result<String> {
    std::fs::write(path, bytes)?;
    Ok(sha256_hex(bytes))
}
