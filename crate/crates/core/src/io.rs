//! File formats: volume containers, deformation files, label masks, JSON
//! checkpoints and the metrics log.
//!
//! Binary files share one layout: `key value...` text lines closed by an
//! `end_header` line, then a little-endian payload in C order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::deform::DeformationField;
use crate::error::{Error, Result};
use crate::geometry::{QVector, Vec3};
use crate::pipeline::RawDwi;

const VOLUME_MAGIC: &str = "pqreg-volume 1";
const DEFORMATION_MAGIC: &str = "pqreg-deformation 1";
const MASK_MAGIC: &str = "pqreg-mask 1";

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Header lines up to `end_header`, and the reader positioned at the payload.
fn read_header(path: &Path, magic: &str) -> Result<(Vec<Vec<String>>, BufReader<File>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut lines = Vec::new();
    let mut first = true;
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(fmt_err(format!("{}: missing end_header", path.display())));
        }
        let line = line.trim_end();
        if first {
            if line != magic {
                return Err(fmt_err(format!("{}: expected {magic:?}, found {line:?}", path.display())));
            }
            first = false;
            continue;
        }
        if line == "end_header" {
            return Ok((lines, r));
        }
        lines.push(line.split_whitespace().map(str::to_string).collect());
    }
}

fn field<'a>(lines: &'a [Vec<String>], key: &str) -> Result<&'a [String]> {
    lines
        .iter()
        .find(|l| l.first().map(String::as_str) == Some(key))
        .map(|l| &l[1..])
        .ok_or_else(|| fmt_err(format!("header lacks {key:?}")))
}

fn nums<T: std::str::FromStr>(v: &[String], n: usize, what: &str) -> Result<Vec<T>> {
    if v.len() != n {
        return Err(fmt_err(format!("{what}: expected {n} values, got {}", v.len())));
    }
    v.iter().map(|s| s.parse::<T>().map_err(|_| fmt_err(format!("{what}: bad number {s:?}")))).collect()
}

fn shape3(lines: &[Vec<String>]) -> Result<[usize; 3]> {
    let s: Vec<usize> = nums(field(lines, "shape")?, 3, "shape")?;
    Ok([s[0], s[1], s[2]])
}

fn read_payload(r: &mut impl Read, n_bytes: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(n_bytes);
    r.read_to_end(&mut buf)?;
    if buf.len() != n_bytes {
        return Err(fmt_err(format!("payload is {} bytes, expected {n_bytes}", buf.len())));
    }
    Ok(buf)
}

/// Writes `[X, Y, Z, Q]` float32 values. Values are rounded to f32.
pub fn write_volume(path: &Path, v: &RawDwi) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{VOLUME_MAGIC}")?;
    writeln!(w, "shape {} {} {}", v.shape[0], v.shape[1], v.shape[2])?;
    writeln!(w, "spacing {} {} {}", v.spacing[0], v.spacing[1], v.spacing[2])?;
    writeln!(w, "axes XYZQ")?;
    writeln!(w, "dtype f32le")?;
    writeln!(w, "nq {}", v.qvecs.len())?;
    for q in &v.qvecs {
        // b = 0 entries carry a placeholder unit direction
        let d = if q.b == 0.0 { Vec3::z() } else { q.direction() };
        writeln!(w, "q {} {} {} {}", q.b, d.x, d.y, d.z)?;
    }
    writeln!(w, "end_header")?;
    for x in v.data.iter() {
        w.write_all(&(*x as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<RawDwi> {
    let (lines, mut r) = read_header(path, VOLUME_MAGIC)?;
    let shape = shape3(&lines)?;
    let sp: Vec<f64> = nums(field(&lines, "spacing")?, 3, "spacing")?;
    if field(&lines, "axes")?.first().map(String::as_str) != Some("XYZQ") {
        return Err(fmt_err("axes must be XYZQ"));
    }
    if field(&lines, "dtype")?.first().map(String::as_str) != Some("f32le") {
        return Err(fmt_err("dtype must be f32le"));
    }
    let nq: usize = nums(field(&lines, "nq")?, 1, "nq")?[0];
    let mut qvecs = Vec::with_capacity(nq);
    for l in lines.iter().filter(|l| l[0] == "q") {
        let v: Vec<f64> = nums(&l[1..], 4, "q")?;
        let d = Vec3::new(v[1], v[2], v[3]);
        if (d.norm() - 1.0).abs() > 1e-6 {
            return Err(fmt_err(format!("q direction {d:?} is not unit")));
        }
        qvecs.push(QVector::from_b(v[0], &d)?);
    }
    if qvecs.len() != nq {
        return Err(fmt_err(format!("nq {nq} but {} q lines", qvecs.len())));
    }
    let n: usize = shape.iter().product();
    let buf = read_payload(&mut r, n * nq * 4)?;
    let vals: Vec<f64> = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    let data = Array2::from_shape_vec((n, nq), vals).map_err(|e| fmt_err(e.to_string()))?;
    RawDwi::new(shape, [sp[0], sp[1], sp[2]], qvecs, data)
}

/// Deformations are kept at float64: `[X, Y, Z, D, 6]` with `(p, g)`.
pub fn write_deformation(path: &Path, phi: &DeformationField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{DEFORMATION_MAGIC}")?;
    writeln!(w, "shape {} {} {}", phi.shape[0], phi.shape[1], phi.shape[2])?;
    writeln!(w, "axes XYZD6")?;
    writeln!(w, "dtype f64le")?;
    writeln!(w, "ndirs {}", phi.dirs.len())?;
    for d in &phi.dirs {
        writeln!(w, "dir {} {} {}", d.x, d.y, d.z)?;
    }
    writeln!(w, "end_header")?;
    for x in phi.data.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_deformation(path: &Path) -> Result<DeformationField> {
    let (lines, mut r) = read_header(path, DEFORMATION_MAGIC)?;
    let shape = shape3(&lines)?;
    let nd: usize = nums(field(&lines, "ndirs")?, 1, "ndirs")?[0];
    let dirs: Vec<Vec3> = lines
        .iter()
        .filter(|l| l[0] == "dir")
        .map(|l| nums::<f64>(&l[1..], 3, "dir").map(|v| Vec3::new(v[0], v[1], v[2])))
        .collect::<Result<_>>()?;
    if dirs.len() != nd {
        return Err(fmt_err(format!("ndirs {nd} but {} dir lines", dirs.len())));
    }
    let n: usize = shape.iter().product();
    let buf = read_payload(&mut r, n * nd * 6 * 8)?;
    let vals: Vec<f64> = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let data = Array2::from_shape_vec((n, 6 * nd), vals).map_err(|e| fmt_err(e.to_string()))?;
    Ok(DeformationField { shape, dirs, data })
}

pub fn write_mask(path: &Path, shape: [usize; 3], labels: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MASK_MAGIC}")?;
    writeln!(w, "shape {} {} {}", shape[0], shape[1], shape[2])?;
    writeln!(w, "dtype u8")?;
    writeln!(w, "end_header")?;
    w.write_all(labels)?;
    w.flush()?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<([usize; 3], Vec<u8>)> {
    let (lines, mut r) = read_header(path, MASK_MAGIC)?;
    let shape = shape3(&lines)?;
    let buf = read_payload(&mut r, shape.iter().product())?;
    Ok((shape, buf))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// One training epoch in the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub data: f64,
    pub reg: f64,
    pub total: f64,
}

impl EpochMetrics {
    pub fn to_line(&self) -> String {
        format!("{} {:e} {:e} {:e} {:e}", self.epoch, self.lr, self.data, self.reg, self.total)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let v: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        let epoch: usize = nums(&v[..1.min(v.len())], 1, "epoch")?[0];
        let f: Vec<f64> = nums(&v[1.min(v.len())..], 4, "metrics")?;
        Ok(Self {
            epoch,
            lr: f[0],
            data: f[1],
            reg: f[2],
            total: f[3],
        })
    }
}

pub fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# epoch lr data reg total")?;
    for r in rows {
        writeln!(w, "{}", r.to_line())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_affine(path: &Path) -> Result<nalgebra::Matrix4<f64>> {
    crate::pipeline::parse_affine(&std::fs::read_to_string(path)?)
}
