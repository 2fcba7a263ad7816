//! On-disk formats: counts CSV, JSON artifacts with a provenance header, JSON-lines
//! checkpoint streams and file digests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mle::CountTable;
use crate::model::idx;

pub const TOOL: &str = "diqre";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Where an artifact came from: stage, inputs by digest and the parameters used. Carries no
/// timestamps, so identical inputs give byte-identical artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub inputs: Vec<InputDigest>,
    pub parameters: serde_json::Value,
}

impl Provenance {
    pub fn new(stage: &str, inputs: &[&Path], parameters: serde_json::Value) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok(InputDigest { path: p.display().to_string(), sha256: file_sha256(p)? }))
            .collect::<Result<_>>()?;
        Ok(Provenance { tool: TOOL.into(), version: VERSION.into(), stage: stage.into(), inputs, parameters })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub provenance: Provenance,
    pub body: T,
}

impl<T: Serialize + DeserializeOwned> Artifact<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = open(path)?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(File::create(path)?)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Parameter(format!("cannot open {}: {e}", path.display())))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Serialize, Deserialize)]
struct CountRow {
    a: u8,
    b: u8,
    x: u8,
    y: u8,
    count: u64,
}

/// Sixteen rows `a,b,x,y,count` in flat-index order.
pub fn write_counts_csv<W: Write>(w: W, c: &CountTable) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for i in 0..16 {
        let (a, b, x, y) = ((i >> 3) & 1, (i >> 2) & 1, (i >> 1) & 1, i & 1);
        wr.serialize(CountRow { a: a as u8, b: b as u8, x: x as u8, y: y as u8, count: c.counts[i] })
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads a counts CSV; rows may come in any order but each (a,b,x,y) exactly once.
pub fn read_counts_csv<R: Read>(r: R) -> Result<CountTable> {
    let mut rd = csv::Reader::from_reader(r);
    let mut counts = [0u64; 16];
    let mut seen = [false; 16];
    for row in rd.deserialize::<CountRow>() {
        let row = row.map_err(|e| Error::Format(format!("counts csv: {e}")))?;
        if row.a > 1 || row.b > 1 || row.x > 1 || row.y > 1 {
            return Err(Error::Format(format!("counts csv: non-binary label in {row:?}")));
        }
        let i = idx(row.a as usize, row.b as usize, row.x as usize, row.y as usize);
        if seen[i] {
            return Err(Error::Format(format!("counts csv: duplicate row for {row:?}")));
        }
        seen[i] = true;
        counts[i] = row.count;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Format("counts csv: missing (a,b,x,y) rows".into()));
    }
    CountTable::new(counts)
}

pub fn save_counts(path: &Path, c: &CountTable) -> Result<()> {
    write_counts_csv(BufWriter::new(create(path)?), c)
}

pub fn load_counts(path: &Path) -> Result<CountTable> {
    read_counts_csv(BufReader::new(open(path)?))
}

/// Appends one JSON value per line.
pub struct JsonLines {
    w: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonLines { w: BufWriter::new(create(path)?) })
    }

    pub fn push<T: Serialize>(&mut self, v: &T) -> Result<()> {
        serde_json::to_writer(&mut self.w, v)?;
        self.w.write_all(b"\n")?;
        self.w.flush()?;
        Ok(())
    }
}
