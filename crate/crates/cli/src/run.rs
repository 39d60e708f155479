//! Shared plumbing: exit-code classification, input/output path checks and
//! JSON file helpers.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use lchd_core::llm_client::ClientConfig;
use lchd_core::Error;

/// Exit status 1.
pub const USAGE: u8 = 1;
/// Exit status 2.
pub const DATA: u8 = 2;
/// Exit status 3.
pub const RUNTIME: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure {
            code: DATA,
            message: message.into(),
        }
    }

    pub fn code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::MissingCredential(_) => USAGE,
            Error::Data { .. }
            | Error::Json(_)
            | Error::EmptyCorpus
            | Error::EmptyResponse
            | Error::AllChunksMasked
            | Error::TokenOutOfRange { .. }
            | Error::LengthMismatch(..)
            | Error::SingleClass
            | Error::Integrity(_)
            | Error::VersionMismatch { .. } => DATA,
            _ => RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

/// Everything a subcommand reads or writes, checked before any long-running
/// work starts.
#[derive(Debug, Default)]
pub struct RunConfig {
    pub inputs: Vec<PathBuf>,
    pub input_dirs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub client: Option<ClientConfig>,
}

impl RunConfig {
    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn input_opt(self, path: Option<&PathBuf>) -> Self {
        match path {
            Some(p) => self.input(p),
            None => self,
        }
    }

    pub fn checkpoint(mut self, dir: &Path) -> Self {
        self.input_dirs.push(dir.to_path_buf());
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    pub fn output_opt(self, path: Option<&PathBuf>) -> Self {
        match path {
            Some(p) => self.output(p),
            None => self,
        }
    }

    /// Loads a client config file and validates it.
    pub fn client_config(mut self, path: &Path) -> Outcome<Self> {
        self.inputs.push(path.to_path_buf());
        check_file(path)?;
        let cfg: ClientConfig = read_json(path).map_err(|f| Failure::usage(format!("{}: {f}", path.display())))?;
        cfg.validate()?;
        self.client = Some(cfg);
        Ok(self)
    }

    pub fn validate(self) -> Outcome<Self> {
        for p in &self.inputs {
            check_file(p)?;
        }
        for d in &self.input_dirs {
            if !d.is_dir() {
                return Err(Failure::usage(format!("checkpoint directory {} does not exist", d.display())));
            }
        }
        for out in &self.outputs {
            if self.inputs.iter().any(|i| same_file(i, out)) {
                return Err(Failure::usage(format!("output {} would overwrite an input", out.display())));
            }
            if out.is_dir() {
                return Err(Failure::usage(format!("output {} is a directory", out.display())));
            }
        }
        Ok(self)
    }
}

fn check_file(p: &Path) -> Outcome {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("input file {} does not exist", p.display())))
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

pub fn open(path: &Path) -> Outcome<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::usage(format!("cannot open {}: {e}", path.display())))
}

pub fn create(path: &Path) -> Outcome<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Outcome<T> {
    serde_json::from_reader(open(path)?).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn print_json<T: Serialize>(value: &T) -> Outcome {
    println!("{}", serde_json::to_string_pretty(value).map_err(Error::from)?);
    Ok(())
}

/// Prefixes a data error with the file it came from.
pub fn in_file<T>(path: &Path, r: lchd_core::Result<T>) -> Outcome<T> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}
