use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::CliError;

/// An in-memory CSV table with LF line endings.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn row(&mut self, cells: &[&dyn Display]) {
        assert_eq!(cells.len(), self.header.len(), "row width");
        self.rows.push(cells.iter().map(|c| c.to_string()).collect());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

/// Formats an optional value as an empty field when absent.
pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub enum Content {
    Csv(Vec<u8>),
    Bytes(Vec<u8>),
}

/// Files produced by one subcommand, written together or not at all.
pub struct Outputs {
    files: Vec<(String, Content)>,
    meta: Vec<(String, String)>,
    config_echo: Option<String>,
}

impl Outputs {
    pub fn new(command: &str, seed: u64) -> Self {
        let meta = vec![
            ("command".to_string(), command.to_string()),
            ("seed".to_string(), seed.to_string()),
            ("build".to_string(), build_id()),
        ];
        Self { files: Vec::new(), meta, config_echo: None }
    }

    pub fn csv(&mut self, name: &str, table: &Table) {
        self.files.push((name.to_string(), Content::Csv(table.to_bytes())));
    }

    pub fn raw_csv(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), Content::Csv(bytes)));
    }

    pub fn bytes(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), Content::Bytes(bytes)));
    }

    pub fn meta(&mut self, key: &str, value: impl Display) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn config(&mut self, text: String) {
        self.config_echo = Some(text);
    }

    pub fn names(&self) -> Vec<&str> {
        self.files.iter().map(|(n, _)| n.as_str()).collect()
    }

    fn sidecar(&self) -> Vec<u8> {
        let mut s = String::new();
        for (k, v) in &self.meta {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str(&format!("outputs={}\n", self.names().join(",")));
        if let Some(c) = &self.config_echo {
            s.push_str("\n[config]\n");
            s.push_str(c);
        }
        s.into_bytes()
    }

    /// Checks every CSV, then writes each file to a temporary name and
    /// renames it into place.
    pub fn commit(mut self, dir: &Path, command: &str) -> Result<Vec<String>, CliError> {
        for (name, content) in &self.files {
            if let Content::Csv(bytes) = content {
                validate_csv(bytes).map_err(|e| CliError::Domain(format!("{name}: {e}")))?;
            }
        }
        let side = format!("{}.meta", command.replace('-', "_"));
        let bytes = self.sidecar();
        self.files.push((side, Content::Bytes(bytes)));

        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut staged = Vec::with_capacity(self.files.len());
        for (name, content) in &self.files {
            let bytes = match content {
                Content::Csv(b) | Content::Bytes(b) => b,
            };
            let tmp = dir.join(format!(".{name}.tmp"));
            let res = fs::File::create(&tmp).and_then(|mut f| {
                f.write_all(bytes)?;
                f.sync_all()
            });
            if let Err(e) = res {
                for t in &staged {
                    let _ = fs::remove_file(t);
                }
                let _ = fs::remove_file(&tmp);
                return Err(io_err(&tmp, e));
            }
            staged.push(tmp);
        }
        for ((name, content), tmp) in self.files.iter().zip(&staged) {
            let dest = dir.join(name);
            fs::rename(tmp, &dest).map_err(|e| io_err(&dest, e))?;
            let expect = match content {
                Content::Csv(b) | Content::Bytes(b) => b,
            };
            if fs::read(&dest).map_err(|e| io_err(&dest, e))? != *expect {
                return Err(CliError::Domain(format!("{} did not read back intact", dest.display())));
            }
        }
        Ok(self.files.iter().map(|(n, _)| n.clone()).collect())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Domain(format!("{}: {e}", path.display()))
}

fn validate_csv(bytes: &[u8]) -> Result<(), String> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let width = r.headers().map_err(|e| e.to_string())?.len();
    if width == 0 {
        return Err("empty header".into());
    }
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        if rec.len() != width {
            return Err(format!("row with {} fields, header has {width}", rec.len()));
        }
    }
    Ok(())
}

pub fn build_id() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}
