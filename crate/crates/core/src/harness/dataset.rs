//! Basin datasets and their on-disk CSV layout.
//!
//! ```text
//! <dir>/attributes.csv        basin_id,a1,...,ad
//! <dir>/truth_params.csv      basin_id,param_name,value   (optional)
//! <dir>/forcings/<id>.csv     date,P,T,PET,Q
//! <dir>/synthetic.txt         generator settings          (optional)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;

use crate::coupling::{parameter_dump_csv, BasinAttributes};
use crate::error::{Error, Result};
use crate::hbv::{FluxRecord, ForcingRecord, HbvParameters, HbvState, ParamName, SimulationOutput};

use super::synthetic::SyntheticSpec;

pub fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Basin {
    pub id: u32,
    pub attributes: BasinAttributes,
    pub forcings: Vec<ForcingRecord>,
    /// Observed discharge, mm/day, aligned with `forcings`.
    pub observed: Vec<f64>,
    /// Date of the first record.
    pub start: NaiveDate,
    /// Ground-truth parameters (synthetic data only).
    pub truth: Option<HbvParameters<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BasinDataset {
    /// Sorted by id.
    pub basins: Vec<Basin>,
    pub synthetic: Option<SyntheticSpec>,
}

impl BasinDataset {
    pub fn new(mut basins: Vec<Basin>, synthetic: Option<SyntheticSpec>) -> Result<Self> {
        basins.sort_by_key(|b| b.id);
        for w in basins.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Config(format!("duplicate basin id {}", w[0].id)));
            }
        }
        for b in &basins {
            if b.forcings.len() != b.observed.len() {
                return Err(Error::Dimension {
                    context: "observed discharge",
                    expected: b.forcings.len(),
                    got: b.observed.len(),
                });
            }
        }
        if let Some(first) = basins.first() {
            let dim = first.attributes.dim();
            if let Some(b) = basins.iter().find(|b| b.attributes.dim() != dim) {
                return Err(Error::Dimension {
                    context: "basin attributes",
                    expected: dim,
                    got: b.attributes.dim(),
                });
            }
        }
        Ok(Self { basins, synthetic })
    }

    pub fn len(&self) -> usize {
        self.basins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basins.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Basin> {
        self.basins.iter().find(|b| b.id == id)
    }

    pub fn attribute_dim(&self) -> usize {
        self.basins.first().map_or(0, |b| b.attributes.dim())
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(dataset: &BasinDataset, dir: &Path) -> Result<()> {
    let forcing_dir = dir.join("forcings");
    fs::create_dir_all(&forcing_dir).map_err(|e| Error::io(&forcing_dir, e))?;

    let dim = dataset.attribute_dim();
    let mut attrs = String::from("basin_id");
    for j in 1..=dim {
        attrs.push_str(&format!(",a{j}"));
    }
    attrs.push('\n');
    for b in &dataset.basins {
        attrs.push_str(&b.id.to_string());
        for v in &b.attributes.values {
            attrs.push_str(&format!(",{v}"));
        }
        attrs.push('\n');
        write(&forcing_dir.join(format!("{}.csv", b.id)), &forcing_csv(b.start, &b.forcings, Some(&b.observed)))?;
    }
    write(&dir.join("attributes.csv"), &attrs)?;

    let truth: Vec<_> = dataset.basins.iter().filter_map(|b| b.truth.map(|t| (b.id, t))).collect();
    if !truth.is_empty() {
        write(&dir.join("truth_params.csv"), &parameter_dump_csv(&truth))?;
    }
    if let Some(spec) = &dataset.synthetic {
        write(&dir.join("synthetic.txt"), &spec.to_config())?;
    }
    Ok(())
}

/// `date,P,T,PET[,Q]` text for one basin.
pub fn forcing_csv(start: NaiveDate, forcings: &[ForcingRecord], observed: Option<&[f64]>) -> String {
    let mut out = String::from(if observed.is_some() { "date,P,T,PET,Q\n" } else { "date,P,T,PET\n" });
    for (i, (f, date)) in forcings.iter().zip(start.iter_days()).enumerate() {
        out.push_str(&format!("{},{},{},{}", date.format("%Y-%m-%d"), f.p, f.t, f.pet));
        if let Some(q) = observed {
            out.push_str(&format!(",{}", q[i]));
        }
        out.push('\n');
    }
    out
}

/// Model output in the `date,Q_routed,...,SP` layout.
pub fn output_csv(start: NaiveDate, output: &SimulationOutput<f64>) -> String {
    let mut out = String::from("date,Q_routed,Q0,Q1,Q2,ET,recharge,melt,SM,SUZ,SLZ,SP\n");
    for ((f, s), date) in output.fluxes.iter().zip(&output.states).zip(start.iter_days()) {
        let FluxRecord {
            q_routed,
            q0,
            q1,
            q2,
            et,
            recharge,
            melt,
            ..
        } = *f;
        let HbvState { sm, suz, slz, sp, .. } = *s;
        out.push_str(&format!(
            "{},{q_routed},{q0},{q1},{q2},{et},{recharge},{melt},{sm},{suz},{slz},{sp}\n",
            date.format("%Y-%m-%d")
        ));
    }
    out
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes())
}

fn data_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    data_err(path, line, e.to_string())
}

fn parse_f64(path: &Path, line: u64, column: &str, raw: &str) -> Result<f64> {
    raw.parse::<f64>()
        .map_err(|_| data_err(path, line, format!("column {column}: `{raw}` is not a number")))
}

/// A parsed forcing file.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingFile {
    pub start: NaiveDate,
    pub forcings: Vec<ForcingRecord>,
    pub observed: Option<Vec<f64>>,
}

pub fn read_forcing_csv(path: &Path) -> Result<ForcingFile> {
    let text = read_text(path)?;
    parse_forcing_csv(&text, path)
}

pub fn parse_forcing_csv(text: &str, path: &Path) -> Result<ForcingFile> {
    let mut rdr = reader(text);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let has_q = match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["date", "P", "T", "PET"] => false,
        ["date", "P", "T", "PET", "Q"] => true,
        _ => {
            let missing: Vec<_> = ["date", "P", "T", "PET"]
                .into_iter()
                .filter(|c| !header.iter().any(|h| h == c))
                .collect();
            let message = if missing.is_empty() {
                format!("expected header date,P,T,PET[,Q], found {}", header.join(","))
            } else {
                format!("missing column(s) {}", missing.join(","))
            };
            return Err(Error::Schema {
                path: path.to_path_buf(),
                message,
            });
        }
    };

    let mut start = None;
    let mut prev: Option<NaiveDate> = None;
    let mut forcings = Vec::new();
    let mut observed = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|_| data_err(path, line, format!("`{}` is not an ISO date", &record[0])))?;
        if let Some(p) = prev {
            if p.succ_opt() != Some(date) {
                return Err(data_err(path, line, format!("date {date} does not follow {p}")));
            }
        }
        prev = Some(date);
        start.get_or_insert(date);
        let p = parse_f64(path, line, "P", &record[1])?;
        let t = parse_f64(path, line, "T", &record[2])?;
        let pet = parse_f64(path, line, "PET", &record[3])?;
        forcings.push(ForcingRecord::new(p, t, pet).map_err(|e| data_err(path, line, e.to_string()))?);
        if has_q {
            let q = parse_f64(path, line, "Q", &record[4])?;
            if !(q.is_finite() && q >= 0.0) {
                return Err(data_err(path, line, format!("discharge {q} must be finite and non-negative")));
            }
            observed.push(q);
        }
    }
    let start = start.ok_or_else(|| Error::Schema {
        path: path.to_path_buf(),
        message: "no records".into(),
    })?;
    Ok(ForcingFile {
        start,
        forcings,
        observed: has_q.then_some(observed),
    })
}

fn parse_attributes(path: &Path) -> Result<BTreeMap<u32, Vec<f64>>> {
    let text = read_text(path)?;
    let mut rdr = reader(&text);
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let ok = header.get(0) == Some("basin_id")
        && header.len() >= 2
        && header.iter().skip(1).enumerate().all(|(j, h)| h == format!("a{}", j + 1));
    if !ok {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: format!("expected header basin_id,a1..ad, found {}", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut out = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let id: u32 = record[0]
            .parse()
            .map_err(|_| data_err(path, line, format!("`{}` is not a basin id", &record[0])))?;
        let values = (1..record.len())
            .map(|j| parse_f64(path, line, &header[j], &record[j]))
            .collect::<Result<Vec<_>>>()?;
        if out.insert(id, values).is_some() {
            return Err(data_err(path, line, format!("duplicate basin id {id}")));
        }
    }
    Ok(out)
}

/// Reads a `basin_id,param_name,value` file.
pub fn read_parameter_dump(path: &Path) -> Result<BTreeMap<u32, HbvParameters<f64>>> {
    let text = read_text(path)?;
    let mut rdr = reader(&text);
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["basin_id", "param_name", "value"] {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: "expected header basin_id,param_name,value".into(),
        });
    }
    let mut seen: BTreeMap<u32, BTreeMap<ParamName, f64>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let id: u32 = record[0]
            .parse()
            .map_err(|_| data_err(path, line, format!("`{}` is not a basin id", &record[0])))?;
        let name: ParamName = record[1].parse().map_err(|e: Error| data_err(path, line, e.to_string()))?;
        let value = parse_f64(path, line, "value", &record[2])?;
        if seen.entry(id).or_default().insert(name, value).is_some() {
            return Err(data_err(path, line, format!("duplicate {name} for basin {id}")));
        }
    }
    seen.into_iter()
        .map(|(id, values)| {
            if values.len() != ParamName::ALL.len() {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    message: format!("basin {id} lists {} of 13 parameters", values.len()),
                });
            }
            let mut p = HbvParameters::midpoints();
            for (name, v) in values {
                p.set(name, v);
            }
            Ok((id, p))
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<BasinDataset> {
    let attrs = parse_attributes(&dir.join("attributes.csv"))?;
    let truth_path = dir.join("truth_params.csv");
    let truth = if truth_path.exists() {
        Some(read_parameter_dump(&truth_path)?)
    } else {
        None
    };
    if let Some(t) = &truth {
        let a: BTreeSet<_> = attrs.keys().collect();
        let b: BTreeSet<_> = t.keys().collect();
        if a != b {
            return Err(Error::Schema {
                path: truth_path,
                message: "basin ids differ from attributes.csv".into(),
            });
        }
    }
    let mut basins = Vec::with_capacity(attrs.len());
    for (id, values) in attrs {
        let path: PathBuf = dir.join("forcings").join(format!("{id}.csv"));
        let file = read_forcing_csv(&path)?;
        let observed = file.observed.ok_or_else(|| Error::Schema {
            path: path.clone(),
            message: "missing column Q".into(),
        })?;
        basins.push(Basin {
            id,
            attributes: BasinAttributes::new(values)?,
            forcings: file.forcings,
            observed,
            start: file.start,
            truth: truth.as_ref().map(|t| t[&id]),
        });
    }
    let spec_path = dir.join("synthetic.txt");
    let synthetic = if spec_path.exists() {
        Some(SyntheticSpec::from_config(&read_text(&spec_path)?, &spec_path)?)
    } else {
        None
    };
    BasinDataset::new(basins, synthetic)
}
