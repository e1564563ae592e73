//! CSV reading and writing for experiment data.
//!
//! Data files have the header `group_id,saturation,z,d,y` with one row per
//! individual. Floats are written with Rust's shortest round-trip formatting,
//! so a write followed by a read reproduces the data exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::dgp::{ExperimentData, Group};
use crate::error::{Error, Result};

pub const DATA_HEADER: [&str; 5] = ["group_id", "saturation", "z", "d", "y"];
pub const LATENT_HEADER: [&str; 6] = ["group_id", "complier", "alpha", "beta", "gamma", "delta"];

struct GroupRows {
    first_line: usize,
    saturation: f64,
    z: Vec<bool>,
    d: Vec<bool>,
    y: Vec<f64>,
}

fn parse_binary(field: &str, name: &str, line: usize) -> Result<bool> {
    match field.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::InvalidData {
            line,
            message: format!("{name} must be 0 or 1, got {other:?}"),
        }),
    }
}

fn parse_float(field: &str, name: &str, line: usize) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::InvalidData {
        line,
        message: format!("{name} is not a number: {field:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::InvalidData {
            line,
            message: format!("{name} is not finite"),
        });
    }
    Ok(v)
}

/// Reads and validates experiment data. Line numbers in errors count the
/// header as line 1.
pub fn read_csv<R: Read>(reader: R) -> Result<ExperimentData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != DATA_HEADER {
        return Err(Error::InvalidData {
            line: 1,
            message: format!(
                "expected header {:?}, got {:?}",
                DATA_HEADER.join(","),
                header.join(",")
            ),
        });
    }

    let mut groups: BTreeMap<u64, GroupRows> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != DATA_HEADER.len() {
            return Err(Error::InvalidData {
                line,
                message: format!("expected 5 fields, got {}", record.len()),
            });
        }
        let id: u64 = record[0].trim().parse().map_err(|_| Error::InvalidData {
            line,
            message: format!("group_id must be a nonnegative integer, got {:?}", &record[0]),
        })?;
        let s = parse_float(&record[1], "saturation", line)?;
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidData {
                line,
                message: format!("saturation {s} outside [0, 1]"),
            });
        }
        let z = parse_binary(&record[2], "z", line)?;
        let d = parse_binary(&record[3], "d", line)?;
        let y = parse_float(&record[4], "y", line)?;
        if d && !z {
            return Err(Error::InvalidData {
                line,
                message: "d = 1 with z = 0 violates one-sided non-compliance".into(),
            });
        }
        let g = groups.entry(id).or_insert_with(|| GroupRows {
            first_line: line,
            saturation: s,
            z: Vec::new(),
            d: Vec::new(),
            y: Vec::new(),
        });
        if g.saturation != s {
            return Err(Error::InvalidData {
                line,
                message: format!(
                    "saturation {s} differs from {} earlier in group {id}",
                    g.saturation
                ),
            });
        }
        g.z.push(z);
        g.d.push(d);
        g.y.push(y);
    }

    if groups.is_empty() {
        return Err(Error::InvalidDataset("no data rows".into()));
    }
    let mut out = Vec::with_capacity(groups.len());
    for (id, g) in groups {
        if g.z.len() < 2 {
            return Err(Error::InvalidData {
                line: g.first_line,
                message: format!("group {id} has a single member; each group needs at least two"),
            });
        }
        out.push(Group {
            id,
            saturation: g.saturation,
            z: g.z,
            d: g.d,
            y: g.y,
            latent: None,
        });
    }
    Ok(ExperimentData { groups: out })
}

pub fn ingest_csv(path: impl AsRef<Path>) -> Result<ExperimentData> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file))
}

fn bit(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn write_data<W: Write>(data: &ExperimentData, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(DATA_HEADER)?;
    for g in &data.groups {
        let id = g.id.to_string();
        let s = g.saturation.to_string();
        for i in 0..g.len() {
            w.write_record([id.as_str(), s.as_str(), bit(g.z[i]), bit(g.d[i]), &g.y[i].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(data: &ExperimentData, path: impl AsRef<Path>) -> Result<()> {
    write_data(data, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn write_latent<W: Write>(data: &ExperimentData, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(LATENT_HEADER)?;
    for g in &data.groups {
        let latent = g.latent.as_ref().ok_or_else(|| {
            Error::InvalidDataset(format!("group {} carries no latent truth", g.id))
        })?;
        let id = g.id.to_string();
        for l in latent {
            w.write_record([
                id.clone(),
                bit(l.complier).to_string(),
                l.alpha.to_string(),
                l.beta.to_string(),
                l.gamma.to_string(),
                l.delta.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_latent_csv(data: &ExperimentData, path: impl AsRef<Path>) -> Result<()> {
    write_latent(data, std::io::BufWriter::new(std::fs::File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate_experiment, SimConfig};

    fn parse(text: &str) -> Result<ExperimentData> {
        read_csv(text.as_bytes())
    }

    #[test]
    fn round_trip_is_exact() {
        let data = simulate_experiment(&SimConfig::benchmark(15, 2)).unwrap();
        let mut buf = Vec::new();
        write_data(&data, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, data.without_latent());
    }

    #[test]
    fn three_groups() {
        let data = parse(
            "group_id,saturation,z,d,y\n1,0.5,1,1,2.0\n1,0.5,0,0,1.5\n2,0,0,0,1\n2,0,0,0,1.25\n0,1,1,0,3\n0,1,1,1,-1e-3\n",
        )
        .unwrap();
        assert_eq!(data.groups.len(), 3);
        assert_eq!(data.groups.iter().map(|g| g.id).collect::<Vec<_>>(), [0, 1, 2]);
        assert_eq!(data.groups[0].y, [3.0, -1e-3]);
    }

    #[test]
    fn takeup_without_offer_names_the_line() {
        let err = parse("group_id,saturation,z,d,y\n1,0.5,1,1,2\n1,0.5,0,1,2\n").unwrap_err();
        match err {
            Error::InvalidData { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("one-sided"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn singleton_group_rejected() {
        let err = parse("group_id,saturation,z,d,y\n1,0.5,1,1,2\n1,0.5,0,0,2\n7,0.5,1,0,1\n").unwrap_err();
        assert!(matches!(err, Error::InvalidData { line: 4, .. }), "{err}");
    }

    #[test]
    fn malformed_rows() {
        for (text, line) in [
            ("group_id,saturation,z,d,y\n1,0.5,2,0,1\n", 2),
            ("group_id,saturation,z,d,y\n1,0.5,1,0,1\n1,0.25,1,0,1\n", 3),
            ("group_id,saturation,z,d,y\n1,1.5,1,0,1\n", 2),
            ("group_id,saturation,z,d,y\n1,0.5,1,0,abc\n", 2),
            ("group,saturation,z,d,y\n1,0.5,1,0,1\n", 1),
        ] {
            match parse(text) {
                Err(Error::InvalidData { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }
}
