//! Run manifests: `key = value` text written next to every output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bem_core::dataio::{parse_kv, write_atomic};

use crate::{CliResult, Failure};

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub command: String,
    /// Command line after the program name, as given.
    pub args: Vec<String>,
    pub cwd: PathBuf,
    pub seed: Option<u64>,
    pub wall_clock: f64,
    pub config: Vec<(String, String)>,
    pub inputs: Vec<(String, PathBuf)>,
    /// Name, path and CRC32 of every output file.
    pub outputs: Vec<(String, PathBuf, u32)>,
}

pub fn file_crc(path: &Path) -> CliResult<u32> {
    let bytes = fs::read(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    Ok(crc32fast::hash(&bytes))
}

impl Manifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Manifest {
            command: command.to_string(),
            args,
            cwd: std::env::current_dir().unwrap_or_default(),
            seed: None,
            wall_clock: 0.0,
            config: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.push((name.to_string(), path.to_path_buf()));
    }

    pub fn output(&mut self, name: &str, path: &Path) -> CliResult<()> {
        let crc = file_crc(path)?;
        self.outputs
            .push((name.to_string(), path.to_path_buf(), crc));
        Ok(())
    }

    pub fn config_text(&mut self, kv: &str) {
        for line in kv.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.config
                    .push((k.trim().to_string(), v.trim().to_string()));
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# bem run manifest\n");
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(
            s,
            "args = {}",
            serde_json::to_string(&self.args).expect("strings serialize")
        );
        let _ = writeln!(s, "cwd = {}", self.cwd.display());
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed = {seed}");
        }
        let _ = writeln!(s, "wall_clock_seconds = {:.3}", self.wall_clock);
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k} = {v}");
        }
        for (k, p) in &self.inputs {
            let _ = writeln!(s, "input.{k} = {}", p.display());
        }
        for (k, p, crc) in &self.outputs {
            let _ = writeln!(s, "output.{k} = {}", p.display());
            let _ = writeln!(s, "output.{k}.crc32 = {crc:08x}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_atomic(path, self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|msg| Failure::data(format!("{}: {msg}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let kv = parse_kv(text).map_err(|(line, msg)| format!("line {line}: {msg}"))?;
        let get = |k: &str| kv.get(k).ok_or_else(|| format!("missing `{k}`"));
        let args: Vec<String> =
            serde_json::from_str(get("args")?).map_err(|e| format!("bad `args`: {e}"))?;
        let mut config: Vec<(String, String)> = kv
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix("config.")
                    .map(|k| (k.to_string(), v.clone()))
            })
            .collect();
        config.sort();
        let mut inputs: Vec<(String, PathBuf)> = kv
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix("input.")
                    .map(|k| (k.to_string(), PathBuf::from(v)))
            })
            .collect();
        inputs.sort();
        let mut outputs = Vec::new();
        for (k, v) in &kv {
            let Some(name) = k.strip_prefix("output.") else {
                continue;
            };
            if name.ends_with(".crc32") {
                continue;
            }
            let crc = kv
                .get(&format!("{k}.crc32"))
                .ok_or_else(|| format!("output `{name}` has no checksum"))?;
            let crc =
                u32::from_str_radix(crc, 16).map_err(|_| format!("bad checksum for `{name}`"))?;
            outputs.push((name.to_string(), PathBuf::from(v), crc));
        }
        outputs.sort();
        Ok(Manifest {
            command: get("command")?.clone(),
            args,
            cwd: PathBuf::from(get("cwd")?),
            seed: kv
                .get("seed")
                .map(|s| s.parse().map_err(|_| "bad seed".to_string()))
                .transpose()?,
            wall_clock: kv
                .get("wall_clock_seconds")
                .and_then(|s| s.parse().ok())
                .unwrap_or(0.0),
            config,
            inputs,
            outputs,
        })
    }
}
