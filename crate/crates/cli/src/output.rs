use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

/// Why a command stopped. Usage covers bad arguments, configs and inputs.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<soundloc::Error> for Failure {
    fn from(e: soundloc::Error) -> Self {
        use soundloc::Error::*;
        match e {
            Io { .. } | Wav(_) | Image(_) | NoBox(_) => Failure::Runtime(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn runtime(msg: impl Into<String>) -> Failure {
    Failure::Runtime(msg.into())
}

pub fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} `{}` does not exist", path.display())))
    }
}

/// Tracks what a command writes under its output directory and records it
/// in `manifest.json`.
pub struct OutDir {
    root: PathBuf,
    files: Vec<String>,
    command: &'static str,
}

impl OutDir {
    pub fn create(root: &Path, command: &'static str) -> CmdResult<Self> {
        if root.exists() && !root.is_dir() {
            return Err(usage(format!("output `{}` exists and is not a directory", root.display())));
        }
        fs::create_dir_all(root).map_err(|e| usage(format!("cannot create `{}`: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
            command,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Registers `name` and returns its full path.
    pub fn file(&mut self, name: impl AsRef<Path>) -> PathBuf {
        let name = name.as_ref();
        self.files.push(name.to_string_lossy().replace('\\', "/"));
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CmdResult {
        let path = self.file(name);
        fs::write(&path, contents).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CmdResult {
        let mut text = serde_json::to_string_pretty(&serde_json::to_value(value).map_err(|e| runtime(e.to_string()))?)
            .map_err(|e| runtime(e.to_string()))?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> CmdResult {
        let mut text = String::new();
        for row in rows {
            text.push_str(&serde_json::to_string(row).map_err(|e| runtime(e.to_string()))?);
            text.push('\n');
        }
        self.write(name, text)
    }

    pub fn finish(mut self) -> CmdResult {
        self.files.sort();
        self.files.dedup();
        let manifest = json!({ "command": self.command, "files": self.files });
        let path = self.root.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| runtime(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
    }
}
