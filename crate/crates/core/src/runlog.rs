//! Append-only CSV and JSON-lines logs with a versioned header.
//!
//! CSV files start with `# schema <name> v<version>` followed by the column
//! row. JSON-lines records carry `schema` and `version` fields. Nothing
//! time-dependent is written, so equal runs give equal files.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const LOG_SCHEMA_VERSION: u32 = 1;

pub struct CsvLog {
    out: csv::Writer<BufWriter<File>>,
    columns: usize,
}

impl CsvLog {
    /// Creates (truncating) a log with the given columns.
    pub fn create(path: &Path, schema: &str, columns: &[&str]) -> Result<Self> {
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "# schema {schema} v{LOG_SCHEMA_VERSION}")?;
        let mut out = csv::Writer::from_writer(f);
        out.write_record(columns).map_err(csv_err)?;
        out.flush()?;
        Ok(Self { out, columns: columns.len() })
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> Result<()> {
        if fields.len() != self.columns {
            return Err(Error::usage(format!("row of {} fields for {} columns", fields.len(), self.columns)));
        }
        self.out.write_record(fields.iter().map(AsRef::as_ref)).map_err(csv_err)?;
        self.out.flush()?;
        Ok(())
    }
}

pub struct JsonlLog {
    out: BufWriter<File>,
    schema: String,
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    schema: &'a str,
    version: u32,
    #[serde(flatten)]
    record: &'a T,
}

impl JsonlLog {
    pub fn create(path: &Path, schema: &str) -> Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?), schema: schema.into() })
    }

    /// Opens an existing log for appending.
    pub fn append(path: &Path, schema: &str) -> Result<Self> {
        let f = OpenOptions::new().append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f), schema: schema.into() })
    }

    pub fn record<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let env = Envelope { schema: &self.schema, version: LOG_SCHEMA_VERSION, record };
        serde_json::to_writer(&mut self.out, &env).map_err(|e| Error::usage(e.to_string()))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Reads a log written by [`CsvLog`], checking the schema line.
pub fn read_csv(path: &Path, schema: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
    let (head, body) = text.split_once('\n').unwrap_or((&text, ""));
    let want = format!("# schema {schema} v{LOG_SCHEMA_VERSION}");
    if head != want {
        return Err(Error::Schema(format!("{}: header `{head}`, expected `{want}`", path.display())));
    }
    let mut rd = csv::Reader::from_reader(body.as_bytes());
    let columns = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for r in rd.records() {
        rows.push(r.map_err(csv_err)?.iter().map(str::to_string).collect());
    }
    Ok((columns, rows))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Schema(e.to_string())
}
