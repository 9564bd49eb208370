//! Embedding tables, label tables and the model file.
//!
//! Text formats (UTF-8, one record per line, single-tab separators):
//!
//! - embeddings: optional header `#dim=<d>`, then `id<TAB>v1<TAB>…<TAB>vd`.
//!   Values are written with 17 significant digits so a write/read cycle is
//!   exact.
//! - labels: `id<TAB>class1,class2,…`.
//!
//! The model file is binary: magic `BEM1`, a `u32` format version, a
//! length-prefixed `key = value` header, eight length-prefixed tensors of
//! little-endian `f64`, and a trailing CRC32 of everything before it.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use crate::diffcore::DiffNet;
use crate::error::{BemError, Result};
use crate::trainer::TrainConfig;

/// Row-major `N × d` matrix with one identifier per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    data: Vec<f64>,
    dim: usize,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(BemError::shape("embedding dimension must be positive"));
        }
        if data.len() != ids.len() * dim {
            return Err(BemError::shape(format!(
                "{} ids with dimension {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(BemError::shape(format!("duplicate id `{id}`")));
            }
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(BemError::Domain(format!(
                "non-finite value in row `{}`",
                ids[pos / dim]
            )));
        }
        Ok(EmbeddingTable { ids, data, dim })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != dim) {
            return Err(BemError::shape(format!("row {r} has ragged length")));
        }
        Self::new(ids, rows.concat(), dim)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Rows at the given positions, in that order.
    pub fn select(&self, positions: &[usize]) -> EmbeddingTable {
        let ids = positions.iter().map(|&p| self.ids[p].clone()).collect();
        let data = positions
            .iter()
            .flat_map(|&p| self.row(p).iter().copied())
            .collect();
        EmbeddingTable {
            ids,
            data,
            dim: self.dim,
        }
    }

    /// Copy with every non-zero row scaled to unit L2 norm. Zero rows stay zero.
    pub fn l2_normalized(&self) -> EmbeddingTable {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        out
    }

    /// Horizontal concatenation of two tables with identical id order.
    pub fn concat(&self, other: &EmbeddingTable) -> Result<EmbeddingTable> {
        if self.ids != other.ids {
            return Err(BemError::Alignment(
                "concatenation needs both tables in the same id order".into(),
            ));
        }
        let data = self
            .rows()
            .zip(other.rows())
            .flat_map(|(a, b)| a.iter().chain(b).copied())
            .collect();
        Ok(EmbeddingTable {
            ids: self.ids.clone(),
            data,
            dim: self.dim + other.dim,
        })
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> BemError {
    BemError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn load_table(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = fs::File::open(path)?;
    read_table(BufReader::new(file), path, expected_dim)
}

/// Parses the embedding text format. `origin` is only used in error messages.
pub fn read_table<R: BufRead>(
    reader: R,
    origin: &Path,
    expected_dim: Option<usize>,
) -> Result<EmbeddingTable> {
    let mut dim = expected_dim;
    let mut header_dim = None;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut first_seen: HashMap<String, usize> = HashMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#dim=") {
            if !ids.is_empty() || header_dim.is_some() {
                return Err(parse_err(
                    origin,
                    lineno,
                    "#dim header must be the first line",
                ));
            }
            let d: usize = rest
                .trim()
                .parse()
                .map_err(|_| parse_err(origin, lineno, format!("bad dimension header `{line}`")))?;
            if let Some(e) = expected_dim {
                if e != d {
                    return Err(parse_err(
                        origin,
                        lineno,
                        format!("header declares dimension {d}, expected {e}"),
                    ));
                }
            }
            header_dim = Some(d);
            dim = Some(d);
            continue;
        }

        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default();
        if id.is_empty() {
            return Err(parse_err(origin, lineno, "empty entity id"));
        }
        let start = data.len();
        for (col, field) in fields.enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                parse_err(
                    origin,
                    lineno,
                    format!("column {}: `{field}` is not a number", col + 2),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    origin,
                    lineno,
                    format!("column {}: non-finite value `{field}`", col + 2),
                ));
            }
            data.push(v);
        }
        let width = data.len() - start;
        match dim {
            Some(d) if d != width => {
                return Err(parse_err(
                    origin,
                    lineno,
                    format!("row has {width} values, expected {d}"),
                ))
            }
            None if width == 0 => return Err(parse_err(origin, lineno, "row has no values")),
            None => dim = Some(width),
            _ => {}
        }
        if let Some(prev) = first_seen.insert(id.to_string(), lineno) {
            return Err(parse_err(
                origin,
                lineno,
                format!("duplicate id `{id}` (lines {prev} and {lineno})"),
            ));
        }
        ids.push(id.to_string());
    }

    let dim = match dim {
        Some(d) => d,
        None => return Err(parse_err(origin, 0, "table has no rows and no #dim header")),
    };
    EmbeddingTable::new(ids, data, dim)
}

/// Exactly-round-tripping decimal form: 17 significant digits.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_table_to<W: Write>(mut out: W, table: &EmbeddingTable) -> Result<()> {
    writeln!(out, "#dim={}", table.dim)?;
    for (id, row) in table.ids.iter().zip(table.rows()) {
        out.write_all(id.as_bytes())?;
        for v in row {
            write!(out, "\t{}", format_value(*v))?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_table(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    let mut buf = Vec::with_capacity(table.data.len() * 24);
    write_table_to(&mut buf, table)?;
    write_atomic(path.as_ref(), &buf)
}

/// Writes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Multi-label class assignments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelTable {
    ids: Vec<String>,
    labels: Vec<Vec<String>>,
}

impl LabelTable {
    pub fn new(ids: Vec<String>, labels: Vec<Vec<String>>) -> Result<Self> {
        if ids.len() != labels.len() {
            return Err(BemError::shape(
                "label table: ids and label sets differ in length",
            ));
        }
        let mut seen = HashSet::new();
        for (id, set) in ids.iter().zip(&labels) {
            if !seen.insert(id.as_str()) {
                return Err(BemError::shape(format!("label table: duplicate id `{id}`")));
            }
            if set.is_empty() {
                return Err(BemError::shape(format!(
                    "label table: `{id}` has no labels"
                )));
            }
        }
        Ok(LabelTable { ids, labels })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[Vec<String>] {
        &self.labels
    }

    pub fn get(&self, id: &str) -> Option<&[String]> {
        self.ids
            .iter()
            .position(|i| i == id)
            .map(|p| self.labels[p].as_slice())
    }

    pub fn to_map(&self) -> HashMap<&str, &[String]> {
        self.ids
            .iter()
            .zip(&self.labels)
            .map(|(i, l)| (i.as_str(), l.as_slice()))
            .collect()
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelTable> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, classes) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, lineno, "expected `id<TAB>classes`"))?;
        if id.is_empty() {
            return Err(parse_err(path, lineno, "empty entity id"));
        }
        let set: Vec<String> = classes
            .split(',')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(String::from)
            .collect();
        if set.is_empty() {
            return Err(parse_err(path, lineno, format!("`{id}` has no labels")));
        }
        if let Some(prev) = first_seen.insert(id.to_string(), lineno) {
            return Err(parse_err(
                path,
                lineno,
                format!("duplicate id `{id}` (lines {prev} and {lineno})"),
            ));
        }
        ids.push(id.to_string());
        labels.push(set);
    }
    LabelTable::new(ids, labels)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelTable) -> Result<()> {
    let mut buf = Vec::new();
    for (id, set) in labels.ids.iter().zip(&labels.labels) {
        writeln!(buf, "{id}\t{}", set.join(","))?;
    }
    write_atomic(path.as_ref(), &buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignPolicy {
    Strict,
    Intersect,
}

#[derive(Debug, Clone)]
pub struct Aligned {
    pub kg: EmbeddingTable,
    pub bg: EmbeddingTable,
    /// Rows of the kg table with no bg partner.
    pub dropped_kg: usize,
    /// Rows of the bg table with no kg partner.
    pub dropped_bg: usize,
}

const MAX_EXAMPLE_IDS: usize = 10;

/// Pairs rows of two tables by id. The output follows kg row order.
pub fn align(kg: &EmbeddingTable, bg: &EmbeddingTable, policy: AlignPolicy) -> Result<Aligned> {
    let bg_index = bg.index();
    let kg_index = kg.index();
    let only_kg: Vec<&str> = kg
        .ids
        .iter()
        .map(String::as_str)
        .filter(|id| !bg_index.contains_key(id))
        .collect();
    let only_bg: Vec<&str> = bg
        .ids
        .iter()
        .map(String::as_str)
        .filter(|id| !kg_index.contains_key(id))
        .collect();

    if policy == AlignPolicy::Strict && (!only_kg.is_empty() || !only_bg.is_empty()) {
        let sample = |v: &[&str]| {
            v.iter()
                .take(MAX_EXAMPLE_IDS)
                .copied()
                .collect::<Vec<_>>()
                .join(", ")
        };
        return Err(BemError::Alignment(format!(
            "entity sets differ: {} ids only in kg [{}]; {} ids only in bg [{}]",
            only_kg.len(),
            sample(&only_kg),
            only_bg.len(),
            sample(&only_bg)
        )));
    }

    let mut kg_pos = Vec::with_capacity(kg.len());
    let mut bg_pos = Vec::with_capacity(kg.len());
    for (i, id) in kg.ids.iter().enumerate() {
        if let Some(&j) = bg_index.get(id.as_str()) {
            kg_pos.push(i);
            bg_pos.push(j);
        }
    }
    if kg_pos.is_empty() {
        return Err(BemError::Alignment("tables share no entity ids".into()));
    }
    Ok(Aligned {
        kg: kg.select(&kg_pos),
        bg: bg.select(&bg_pos),
        dropped_kg: only_kg.len(),
        dropped_bg: only_bg.len(),
    })
}

const MODEL_MAGIC: &[u8; 4] = b"BEM1";
pub const MODEL_VERSION: u32 = 1;

/// Serializes both networks and the training configuration.
pub fn model_to_bytes(f: &DiffNet, h: &DiffNet, cfg: &TrainConfig) -> Vec<u8> {
    let d_w = f.in_dim();
    let d_z = f.out_dim();
    let mut header = String::new();
    header.push_str(&format!("d_w = {d_w}\nd_z = {d_z}\n"));
    header.push_str(&format!("d_g = {}\n", cfg.edge.output_dim(d_z)));
    header.push_str(&format!("d_s = {}\n", cfg.edge.latent_scale_dim(d_z)));
    for (name, net) in [("f", f), ("h", h)] {
        header.push_str(&format!(
            "{name}.dims = {} {} {}\n",
            net.in_dim(),
            net.hidden_dim(),
            net.out_dim()
        ));
    }
    header.push_str(&cfg.to_kv());

    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for net in [f, h] {
        for t in net.tensors() {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(BemError::ModelFile("unexpected end of payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn tensor(&mut self, expected: usize, name: &str) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n != expected {
            return Err(BemError::ModelFile(format!(
                "tensor {name}: header dims imply {expected} values, file has {n}"
            )));
        }
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| BemError::ModelFile("tensor too large".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn header_dims(kv: &HashMap<String, String>, key: &str) -> Result<(usize, usize, usize)> {
    let raw = kv
        .get(key)
        .ok_or_else(|| BemError::ModelFile(format!("header lacks `{key}`")))?;
    let parts: Vec<usize> = raw
        .split_whitespace()
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| BemError::ModelFile(format!("bad `{key}` = `{raw}`")))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(BemError::ModelFile(format!("bad `{key}` = `{raw}`"))),
    }
}

fn header_usize(kv: &HashMap<String, String>, key: &str) -> Result<usize> {
    kv.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| BemError::ModelFile(format!("header lacks a valid `{key}`")))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<(DiffNet, DiffNet, TrainConfig)> {
    if bytes.len() < MODEL_MAGIC.len() + 4 + 8 + 4 {
        return Err(BemError::ModelFile(
            "checksum failure: file is truncated".into(),
        ));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(BemError::ModelFile(
            "checksum failure: file is corrupt or truncated".into(),
        ));
    }
    if &payload[..4] != MODEL_MAGIC {
        return Err(BemError::ModelFile("bad magic, not a model file".into()));
    }
    let version = u32::from_le_bytes(payload[4..8].try_into().expect("4 bytes"));
    if version != MODEL_VERSION {
        return Err(BemError::ModelFile(format!(
            "version mismatch: file has {version}, reader supports {MODEL_VERSION}"
        )));
    }
    let mut cur = Cursor {
        buf: payload,
        pos: 8,
    };
    let header_len = cur.u64()? as usize;
    let header = std::str::from_utf8(cur.take(header_len)?)
        .map_err(|_| BemError::ModelFile("header is not UTF-8".into()))?;
    let kv = parse_kv(header)
        .map_err(|(line, msg)| BemError::ModelFile(format!("header line {line}: {msg}")))?;
    let cfg = TrainConfig::from_kv(&kv)
        .map_err(|e| BemError::ModelFile(format!("header config: {e}")))?;

    let (fi, fh, fo) = header_dims(&kv, "f.dims")?;
    let (hi, hh, ho) = header_dims(&kv, "h.dims")?;
    let mut nets = Vec::with_capacity(2);
    for (name, (i, hd, o)) in [("f", (fi, fh, fo)), ("h", (hi, hh, ho))] {
        let w1 = cur.tensor(hd * i, &format!("{name}.w1"))?;
        let b1 = cur.tensor(hd, &format!("{name}.b1"))?;
        let w2 = cur.tensor(o * hd, &format!("{name}.w2"))?;
        let b2 = cur.tensor(o, &format!("{name}.b2"))?;
        nets.push(
            DiffNet::from_parts(i, hd, o, w1, b1, w2, b2)
                .map_err(|e| BemError::ModelFile(format!("{name}: {e}")))?,
        );
    }
    if cur.pos != payload.len() {
        return Err(BemError::ModelFile("trailing bytes after tensors".into()));
    }
    let h = nets.pop().expect("two nets");
    let f = nets.pop().expect("two nets");

    let d_w = header_usize(&kv, "d_w")?;
    let d_z = header_usize(&kv, "d_z")?;
    let d_g = header_usize(&kv, "d_g")?;
    let d_s = header_usize(&kv, "d_s")?;
    let checks = [
        ("f input", f.in_dim(), d_w),
        ("f output", f.out_dim(), d_z),
        ("h input", h.in_dim(), d_w + d_z),
        ("h output", h.out_dim(), 2 * d_w + 2 * d_s),
        ("d_g", cfg.edge.output_dim(d_z), d_g),
        ("d_s", cfg.edge.latent_scale_dim(d_z), d_s),
    ];
    for (what, got, want) in checks {
        if got != want {
            return Err(BemError::ModelFile(format!(
                "header inconsistent with tensors: {what} is {got}, expected {want}"
            )));
        }
    }
    Ok((f, h, cfg))
}

pub fn save_model(
    path: impl AsRef<Path>,
    f: &DiffNet,
    h: &DiffNet,
    cfg: &TrainConfig,
) -> Result<()> {
    write_atomic(path.as_ref(), &model_to_bytes(f, h, cfg))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(DiffNet, DiffNet, TrainConfig)> {
    let mut bytes = Vec::new();
    fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    model_from_bytes(&bytes)
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
/// Errors carry the 1-based line number.
pub fn parse_kv(text: &str) -> std::result::Result<HashMap<String, String>, (usize, String)> {
    let mut out = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| (idx + 1, format!("expected `key = value`, got `{line}`")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
