//! Feature-matrix export.
//!
//! CSV: header `region_id,f0,...,f{D-1}`, one row per region, values in
//! shortest round-trip decimal form.
//!
//! Binary (little-endian):
//!
//! | field        | type           |
//! |--------------|----------------|
//! | magic        | `b"URFCFEAT"`  |
//! | version      | u32 (= 1)      |
//! | rows         | u64            |
//! | dims         | u64            |
//! | per row: id length | u32      |
//! | per row: id bytes  | UTF-8    |
//! | per row: values    | dims × f64 |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 8] = b"URFCFEAT";
pub const BINARY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub dims: usize,
}

impl FeatureMatrix {
    pub fn new(dims: usize) -> Self {
        FeatureMatrix { ids: Vec::new(), rows: Vec::new(), dims }
    }

    pub fn push(&mut self, id: impl Into<String>, row: Vec<f64>) -> Result<()> {
        if row.len() != self.dims {
            return Err(Error::Dimension { expected: self.dims, actual: row.len() });
        }
        self.ids.push(id.into());
        self.rows.push(row);
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["region_id".to_owned()];
        header.extend((0..self.dims).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for (id, row) in self.ids.iter().zip(&self.rows) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(BINARY_MAGIC)?;
        out.write_all(&BINARY_VERSION.to_le_bytes())?;
        out.write_all(&(self.rows.len() as u64).to_le_bytes())?;
        out.write_all(&(self.dims as u64).to_le_bytes())?;
        for (id, row) in self.ids.iter().zip(&self.rows) {
            out.write_all(&(id.len() as u32).to_le_bytes())?;
            out.write_all(id.as_bytes())?;
            for v in row {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| Error::Format("truncated feature file".into()))?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Format("not a feature matrix file".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut read =
            |buf: &mut [u8]| input.read_exact(buf).map_err(|_| Error::Format("truncated feature file".into()));
        read(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != BINARY_VERSION {
            return Err(Error::Format(format!("unsupported feature file version {version}")));
        }
        read(&mut b8)?;
        let rows = u64::from_le_bytes(b8) as usize;
        read(&mut b8)?;
        let dims = u64::from_le_bytes(b8) as usize;
        let mut m = FeatureMatrix::new(dims);
        for _ in 0..rows {
            read(&mut b4)?;
            let mut id = vec![0u8; u32::from_le_bytes(b4) as usize];
            read(&mut id)?;
            let id = String::from_utf8(id).map_err(|_| Error::Format("region id is not UTF-8".into()))?;
            let mut row = Vec::with_capacity(dims);
            for _ in 0..dims {
                read(&mut b8)?;
                row.push(f64::from_le_bytes(b8));
            }
            m.push(id, row)?;
        }
        Ok(m)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::file(path, e))?;
        self.write_csv(BufWriter::new(f))
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::file(path, e))?;
        self.write_binary(BufWriter::new(f))
    }

    pub fn load_binary(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::file(path, e))?;
        FeatureMatrix::read_binary(BufReader::new(f))
    }
}
