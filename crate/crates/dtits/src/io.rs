//! Dataset, raster and table file formats.
//!
//! Text dataset: a header line `T=<int>,C=<int>,N=<int>,labeled=<0|1>`,
//! then for every series a line of `T*C` comma-separated values (time-major),
//! a line of `T` mask weights and, when labeled, a line with the 1-based
//! label. Binary dataset: magic `PTS1`, little-endian `u32` fields `T, C, N,
//! labeled`, then per series `T*C` then `T` `f32` values and, when labeled,
//! a `u32` label.
//!
//! Rasters: text starts with `H=<int>,W=<int>` followed by `H` lines of `W`
//! integers (`-1` is void); binary is magic `PRS1`, `u32` `H, W` and `H*W`
//! little-endian `i32`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use dtits_core::aggregate::{InstanceRaster, LabelRaster, Raster};
use dtits_core::{Dataset, Mask, TimeSeries};

use crate::error::{CliError, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"PTS1";
pub const RASTER_MAGIC: &[u8; 4] = b"PRS1";

fn open(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> CliError {
    CliError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

/// Parses `k1=v1,k2=v2` into values for the expected keys, in order.
fn header_fields(path: &Path, line: &str, keys: &[&str]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(keys.len());
    let parts: Vec<&str> = line.trim().split(',').collect();
    if parts.len() != keys.len() {
        return Err(parse_err(path, 1, format!("expected header fields {}", keys.join(","))));
    }
    for (part, key) in parts.iter().zip(keys) {
        let (k, v) = part.split_once('=').ok_or_else(|| parse_err(path, 1, format!("malformed header field {part:?}")))?;
        if k.trim() != *key {
            return Err(parse_err(path, 1, format!("expected header key {key}, found {k}")));
        }
        out.push(v.trim().parse().map_err(|_| parse_err(path, 1, format!("bad value for {key}: {v:?}")))?);
    }
    Ok(out)
}

fn parse_row(path: &Path, line_no: usize, line: &str, expect: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .trim()
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(path, line_no, format!("bad number: {e}")))?;
    if vals.len() != expect {
        return Err(parse_err(path, line_no, format!("expected {expect} values, found {}", vals.len())));
    }
    Ok(vals)
}

fn join(vals: &[f64]) -> String {
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Reads either dataset format, told apart by the magic bytes.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = open(path)?;
    if bytes.starts_with(DATASET_MAGIC) {
        parse_dataset_binary(path, &bytes)
    } else {
        parse_dataset_text(path, &bytes)
    }
}

fn build_dataset(series: Vec<TimeSeries>, masks: Vec<Mask>, labels: Option<Vec<usize>>) -> Dataset {
    Dataset::new(series, masks, labels)
}

fn parse_dataset_text(path: &Path, bytes: &[u8]) -> Result<Dataset> {
    let text = std::str::from_utf8(bytes).map_err(|_| CliError::Data(format!("{}: not UTF-8 text", path.display())))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let h = header_fields(path, header, &["T", "C", "N", "labeled"])?;
    let (len, ch, n, labeled) = (h[0], h[1], h[2], h[3]);
    if labeled > 1 {
        return Err(parse_err(path, 1, "labeled must be 0 or 1"));
    }
    let mut series = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut labels = Vec::new();
    for i in 0..n {
        let mut next = |what: &str| lines.next().ok_or_else(|| parse_err(path, 0, format!("series {}: missing {what} line", i + 1)));
        let (ln, vl) = next("values")?;
        let vals = parse_row(path, ln + 1, vl, len * ch)?;
        let (lm, ml) = next("mask")?;
        let w = parse_row(path, lm + 1, ml, len)?;
        if labeled == 1 {
            let (ll, l) = next("label")?;
            let y: usize = l.trim().parse().map_err(|_| parse_err(path, ll + 1, format!("bad label {l:?}")))?;
            if y == 0 {
                return Err(parse_err(path, ll + 1, "labels are 1-based"));
            }
            labels.push(y - 1);
        }
        series.push(TimeSeries::new(len, ch, vals).map_err(|e| parse_err(path, ln + 1, e.to_string()))?);
        masks.push(Mask::infer(w));
    }
    if let Some((ln, _)) = lines.next() {
        return Err(parse_err(path, ln + 1, format!("trailing data after {n} series")));
    }
    Ok(build_dataset(series, masks, (labeled == 1).then_some(labels)))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| CliError::Data(format!("{}: truncated at byte {}", self.path.display(), self.pos)))?;
        self.pos = end;
        Ok(chunk.try_into().expect("slice of length N"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f32::from_le_bytes(self.take()?) as f64)).collect()
    }
}

fn parse_dataset_binary(path: &Path, bytes: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { path, bytes, pos: 4 };
    let (len, ch, n, labeled) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize, c.u32()?);
    if labeled > 1 {
        return Err(CliError::Data(format!("{}: labeled flag must be 0 or 1", path.display())));
    }
    let mut series = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut labels = Vec::new();
    for _ in 0..n {
        series.push(TimeSeries::new(len, ch, c.f32s(len * ch)?)?);
        masks.push(Mask::infer(c.f32s(len)?));
        if labeled == 1 {
            let y = c.u32()? as usize;
            if y == 0 {
                return Err(CliError::Data(format!("{}: labels are 1-based", path.display())));
            }
            labels.push(y - 1);
        }
    }
    if c.pos != bytes.len() {
        return Err(CliError::Data(format!("{}: {} trailing bytes", path.display(), bytes.len() - c.pos)));
    }
    Ok(build_dataset(series, masks, (labeled == 1).then_some(labels)))
}

fn dataset_shape(d: &Dataset) -> (usize, usize) {
    d.shape().unwrap_or((0, 0))
}

pub fn write_dataset_text(path: &Path, d: &Dataset) -> Result<()> {
    let mut w = create(path)?;
    let (len, ch) = dataset_shape(d);
    let io = |e| CliError::io(path, e);
    writeln!(w, "T={len},C={ch},N={},labeled={}", d.len(), u8::from(d.labels.is_some())).map_err(io)?;
    for i in 0..d.len() {
        writeln!(w, "{}", join(d.series[i].values())).map_err(io)?;
        writeln!(w, "{}", join(d.masks[i].weights())).map_err(io)?;
        if let Some(y) = d.label(i) {
            writeln!(w, "{}", y + 1).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Values are stored as `f32`; anything not exactly representable in
/// single precision is rounded.
pub fn write_dataset_binary(path: &Path, d: &Dataset) -> Result<()> {
    let mut w = create(path)?;
    let (len, ch) = dataset_shape(d);
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [len, ch, d.len(), usize::from(d.labels.is_some())] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for i in 0..d.len() {
        for &v in d.series[i].values().iter().chain(d.masks[i].weights()) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(y) = d.label(i) {
            buf.extend_from_slice(&((y + 1) as u32).to_le_bytes());
        }
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// Writes the binary format for `.bin`/`.pts` paths and text otherwise.
pub fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin" | "pts") => write_dataset_binary(path, d),
        _ => write_dataset_text(path, d),
    }
}

fn read_raster_raw(path: &Path) -> Result<Raster<i64>> {
    let bytes = open(path)?;
    if bytes.starts_with(RASTER_MAGIC) {
        let mut c = Cursor { path, bytes: &bytes, pos: 4 };
        let (h, w) = (c.u32()? as usize, c.u32()? as usize);
        let data = (0..h * w).map(|_| c.i32().map(i64::from)).collect::<Result<Vec<_>>>()?;
        if c.pos != bytes.len() {
            return Err(CliError::Data(format!("{}: trailing bytes", path.display())));
        }
        return Ok(Raster::new(h, w, data)?);
    }
    let text = std::str::from_utf8(&bytes).map_err(|_| CliError::Data(format!("{}: not UTF-8 text", path.display())))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let hw = header_fields(path, header, &["H", "W"])?;
    let mut data = Vec::with_capacity(hw[0] * hw[1]);
    for _ in 0..hw[0] {
        let (ln, l) = lines.next().ok_or_else(|| parse_err(path, 0, "missing raster rows"))?;
        let row: Vec<i64> = l
            .trim()
            .split(',')
            .map(|v| v.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(path, ln + 1, format!("bad integer: {e}")))?;
        if row.len() != hw[1] {
            return Err(parse_err(path, ln + 1, format!("expected {} values", hw[1])));
        }
        data.extend(row);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(parse_err(path, ln + 1, "trailing raster rows"));
    }
    Ok(Raster::new(hw[0], hw[1], data)?)
}

fn convert<T: Copy>(path: &Path, r: Raster<i64>, f: impl Fn(i64) -> Option<T>) -> Result<Raster<T>> {
    let data = r
        .data()
        .iter()
        .map(|&v| f(v).ok_or_else(|| CliError::Data(format!("{}: value {v} out of range", path.display()))))
        .collect::<Result<Vec<T>>>()?;
    Ok(Raster::new(r.height(), r.width(), data)?)
}

/// Labels are read as written; `-1` is void, other negatives are rejected.
pub fn read_label_raster(path: &Path) -> Result<LabelRaster> {
    convert(path, read_raster_raw(path)?, |v| (v >= -1).then(|| i32::try_from(v).ok()).flatten())
}

pub fn read_instance_raster(path: &Path) -> Result<InstanceRaster> {
    convert(path, read_raster_raw(path)?, |v| u32::try_from(v).ok().filter(|&x| x <= i32::MAX as u32))
}

pub fn write_raster<T: Copy + Into<i64>>(path: &Path, r: &Raster<T>) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| CliError::io(path, e);
    if matches!(path.extension().and_then(|e| e.to_str()), Some("bin")) {
        let mut buf = Vec::from(&RASTER_MAGIC[..]);
        buf.extend_from_slice(&(r.height() as u32).to_le_bytes());
        buf.extend_from_slice(&(r.width() as u32).to_le_bytes());
        for &v in r.data() {
            buf.extend_from_slice(&(v.into() as i32).to_le_bytes());
        }
        return w.write_all(&buf).and_then(|_| w.flush()).map_err(io);
    }
    writeln!(w, "H={},W={}", r.height(), r.width()).map_err(io)?;
    for row in r.data().chunks(r.width().max(1)) {
        let s: Vec<String> = row.iter().map(|&v| v.into().to_string()).collect();
        writeln!(w, "{}", s.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads an `index,label` CSV (1-based labels) into 0-based labels.
pub fn read_predictions(path: &Path) -> Result<Vec<usize>> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let label = line
            .split(',')
            .nth(1)
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&v| v >= 1)
            .ok_or_else(|| parse_err(path, i + 1, "expected index,label with a 1-based label"))?;
        out.push(label - 1);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, labels: &[usize]) -> Result<()> {
    let mut rows = vec!["index,label".to_string()];
    rows.extend(labels.iter().enumerate().map(|(i, y)| format!("{},{}", i + 1, y + 1)));
    write_text(path, &(rows.join("\n") + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    fs::File::open(path).and_then(|mut f| f.read_to_string(&mut s)).map_err(|e| CliError::io(path, e))?;
    Ok(s)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}
