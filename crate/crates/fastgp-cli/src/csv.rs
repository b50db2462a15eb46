//! Minimal CSV I/O: header `x1,..,xd,y`, comma-separated, no missing
//! values. Floats are written with 17 significant digits so a
//! write/parse round trip is bit-exact.

use anyhow::{bail, Context, Result};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_points_csv(path: &Path, columns: &[Vec<f64>], responses: Option<&[f64]>) -> Result<()> {
    let file = std::fs::File::create(path)
        .with_context(|| format!("cannot create output file {}", path.display()))?;
    let mut w = BufWriter::new(file);
    let d = columns.len();
    let n = columns[0].len();
    let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    if responses.is_some() {
        header.push("y".into());
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..n {
        let mut fields: Vec<String> = columns.iter().map(|c| format_f64(c[i])).collect();
        if let Some(y) = responses {
            fields.push(format_f64(y[i]));
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub struct CsvData {
    /// Column-major coordinates.
    pub columns: Vec<Vec<f64>>,
    /// Response column, when the file has one.
    pub responses: Option<Vec<f64>>,
}

/// Reads `x1..xd[,y]`; malformed rows are reported with their line number.
pub fn read_points_csv(path: &Path) -> Result<CsvData> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("cannot open input file {}", path.display()))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .context("empty CSV file")?
        .context("cannot read CSV header")?;
    let names: Vec<&str> = header.trim().split(',').collect();
    let mut d = 0;
    for (k, name) in names.iter().enumerate() {
        if *name == format!("x{}", k + 1) {
            d += 1;
        } else if *name == "y" && k == names.len() - 1 {
            break;
        } else {
            bail!("unexpected CSV header column {:?} (want x1..xd then optional y)", name);
        }
    }
    if d == 0 {
        bail!("CSV header must start with x1");
    }
    let has_y = names.len() == d + 1;
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut responses: Vec<f64> = Vec::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line.with_context(|| format!("cannot read CSV line {lineno}"))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != names.len() {
            bail!("line {lineno}: expected {} fields, found {}", names.len(), fields.len());
        }
        for k in 0..d {
            let v: f64 = fields[k]
                .trim()
                .parse()
                .with_context(|| format!("line {lineno}: cannot parse x{} value {:?}", k + 1, fields[k]))?;
            columns[k].push(v);
        }
        if has_y {
            let v: f64 = fields[d]
                .trim()
                .parse()
                .with_context(|| format!("line {lineno}: cannot parse y value {:?}", fields[d]))?;
            responses.push(v);
        }
    }
    if columns[0].is_empty() {
        bail!("CSV file has a header but no data rows");
    }
    Ok(CsvData { columns, responses: if has_y { Some(responses) } else { None } })
}
