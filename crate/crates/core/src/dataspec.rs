//! Dataset and domain types, CSV ingestion and validation.
//!
//! Times are stored twice: `time` on the caller's scale and `t` rescaled to
//! `[0, 1]`. Every kernel and penalty works on the rescaled value.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    /// Time main effect, factor main effect and their interaction.
    Interaction,
    /// Parallel curves across factor levels (no interaction term).
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// End of the time interval on the original scale.
    pub t_max: f64,
    /// Number of levels `a` of the nominal covariate.
    pub factor_levels: usize,
    pub structure: Structure,
}

impl DomainSpec {
    pub fn new(t_max: f64, factor_levels: usize, structure: Structure) -> Result<Self> {
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(Error::InvalidConfig(format!("t_max must be positive, got {t_max}")));
        }
        if factor_levels == 0 {
            return Err(Error::InvalidConfig("factor_levels must be at least 1".into()));
        }
        Ok(Self { t_max, factor_levels, structure })
    }
}

/// A point of the domain `[0, 1] x {1..a}` on the normalized time scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub t: f64,
    pub tau: usize,
}

impl Point {
    pub fn new(t: f64, tau: usize) -> Self {
        Self { t, tau }
    }

    /// Canonical (tau, t) ordering used for knots.
    pub fn canonical_cmp(&self, other: &Point) -> std::cmp::Ordering {
        self.tau.cmp(&other.tau).then(self.t.total_cmp(&other.t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Time on the original scale.
    pub time: f64,
    /// Time rescaled to `[0, 1]`.
    pub t: f64,
    /// Factor level, 1-based.
    pub tau: usize,
    pub y: f64,
}

impl Observation {
    pub fn point(&self) -> Point {
        Point::new(self.t, self.tau)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Sorted by (tau, t); replicated points are kept.
    pub obs: Vec<Observation>,
}

impl Subject {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// One long-format input row before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub subject: String,
    pub time: f64,
    pub tau: usize,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RandomEffectKind {
    /// `p = 1`, design row `[1]`.
    Intercept,
    /// `p = 2`, design row `[1, t]`.
    InterceptSlope,
}

impl RandomEffectKind {
    pub fn dim(self) -> usize {
        match self {
            RandomEffectKind::Intercept => 1,
            RandomEffectKind::InterceptSlope => 2,
        }
    }
}

/// Random-effect design `Z_i` for one subject (`n_i x p`).
pub fn design_z(subject: &Subject, kind: RandomEffectKind) -> DMatrix<f64> {
    let p = kind.dim();
    DMatrix::from_fn(subject.len(), p, |r, c| if c == 0 { 1.0 } else { subject.obs[r].t })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    pub subjects: Vec<Subject>,
    pub domain: DomainSpec,
    /// `N = sum_i n_i`.
    pub total_obs: usize,
    /// Distinct (t, tau) combinations in canonical order.
    pub knots: Vec<Point>,
    offsets: Vec<usize>,
    time_scale: f64,
}

impl FunctionalDataset {
    /// Build a validated dataset. Subjects appear in order of first
    /// appearance; `normalize` rescales time by `domain.t_max`.
    pub fn from_records(records: &[Record], domain: DomainSpec, normalize: bool) -> Result<Self> {
        let time_scale = if normalize { domain.t_max } else { 1.0 };
        if !normalize && domain.t_max > 1.0 {
            return Err(Error::InvalidConfig(
                "time must be normalized when t_max exceeds 1".into(),
            ));
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut subjects: Vec<Subject> = Vec::new();
        for (row, rec) in records.iter().enumerate() {
            if !(rec.time.is_finite() && rec.time >= 0.0 && rec.time <= domain.t_max) {
                return Err(Error::OutOfDomain {
                    row: row + 1,
                    detail: format!("time {} outside [0, {}]", rec.time, domain.t_max),
                });
            }
            if rec.tau < 1 || rec.tau > domain.factor_levels {
                return Err(Error::OutOfDomain {
                    row: row + 1,
                    detail: format!("factor {} outside 1..={}", rec.tau, domain.factor_levels),
                });
            }
            if !rec.y.is_finite() {
                return Err(Error::UnparseableValue {
                    row: row + 1,
                    column: "response".into(),
                    value: rec.y.to_string(),
                });
            }
            let slot = *index.entry(rec.subject.as_str()).or_insert_with(|| {
                subjects.push(Subject { id: rec.subject.clone(), obs: Vec::new() });
                subjects.len() - 1
            });
            let t = (rec.time / time_scale).clamp(0.0, 1.0);
            subjects[slot].obs.push(Observation { time: rec.time, t, tau: rec.tau, y: rec.y });
        }
        Self::from_subjects(subjects, domain, time_scale)
    }

    fn from_subjects(mut subjects: Vec<Subject>, domain: DomainSpec, time_scale: f64) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::InvalidConfig("dataset has no subjects".into()));
        }
        let mut offsets = Vec::with_capacity(subjects.len() + 1);
        let mut total = 0;
        let mut knots: Vec<Point> = Vec::new();
        for s in subjects.iter_mut() {
            if s.obs.is_empty() {
                return Err(Error::EmptySubject(s.id.clone()));
            }
            s.obs.sort_by(|a, b| a.point().canonical_cmp(&b.point()));
            offsets.push(total);
            total += s.obs.len();
            knots.extend(s.obs.iter().map(Observation::point));
        }
        offsets.push(total);
        knots.sort_by(|a, b| a.canonical_cmp(b));
        knots.dedup_by(|a, b| a.tau == b.tau && a.t == b.t);
        Ok(Self { subjects, domain, total_obs: total, knots, offsets, time_scale })
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Rows of subject `i` in the stacked response vector.
    pub fn rows(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Factor by which normalized time is multiplied to get original time.
    pub fn time_scale(&self) -> f64 {
        self.time_scale
    }

    pub fn responses(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.total_obs,
            self.subjects.iter().flat_map(|s| s.obs.iter().map(|o| o.y)),
        )
    }

    pub fn points(&self) -> Vec<Point> {
        self.subjects.iter().flat_map(|s| s.obs.iter().map(Observation::point)).collect()
    }

    /// Knot set after uniform subsampling down to `cap` points. The flag is
    /// true when subsampling happened.
    pub fn knots_capped(&self, cap: usize) -> (Vec<Point>, bool) {
        let total = self.knots.len();
        if cap == 0 || total <= cap {
            return (self.knots.clone(), false);
        }
        if cap == 1 {
            return (vec![self.knots[0]], true);
        }
        let picked = (0..cap)
            .map(|i| {
                let pos = (i as f64) * ((total - 1) as f64) / ((cap - 1) as f64);
                self.knots[pos.round() as usize]
            })
            .collect();
        (picked, true)
    }

    /// Copy holding only the listed subjects, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let subjects = indices.iter().map(|&i| self.subjects[i].clone()).collect();
        Self::from_subjects(subjects, self.domain, self.time_scale)
    }

    /// Same data with subjects reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        self.subset(order)
    }

    pub fn records(&self) -> Vec<Record> {
        self.subjects
            .iter()
            .flat_map(|s| {
                s.obs.iter().map(move |o| Record {
                    subject: s.id.clone(),
                    time: o.time,
                    tau: o.tau,
                    y: o.y,
                })
            })
            .collect()
    }
}

/// Column names of the long-format CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub subject: String,
    pub time: String,
    /// Optional; when the column is absent every row gets level 1.
    pub factor: String,
    pub response: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            subject: "subject".into(),
            time: "time".into(),
            factor: "factor".into(),
            response: "response".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    pub columns: ColumnMap,
    /// Defaults to the largest observed time.
    pub t_max: Option<f64>,
    /// Defaults to the largest observed level.
    pub factor_levels: Option<usize>,
    /// Defaults to Interaction when there are two or more levels.
    pub structure: Option<Structure>,
    pub normalize: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            columns: ColumnMap::default(),
            t_max: None,
            factor_levels: None,
            structure: None,
            normalize: true,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<FunctionalDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, opts)
}

pub fn read_csv<R: Read>(reader: R, opts: &LoadOptions) -> Result<FunctionalDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let col = |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.to_string()));
    let c_subject = col(&opts.columns.subject)?;
    let c_time = col(&opts.columns.time)?;
    let c_response = col(&opts.columns.response)?;
    let c_factor = find(&opts.columns.factor);

    let parse_f64 = |row: usize, column: &str, raw: &str| -> Result<f64> {
        raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::UnparseableValue {
            row,
            column: column.to_string(),
            value: raw.to_string(),
        })
    };

    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let subject = field(c_subject).to_string();
        let time = parse_f64(row, &opts.columns.time, field(c_time))?;
        let y = parse_f64(row, &opts.columns.response, field(c_response))?;
        let tau = match c_factor {
            Some(c) => field(c).parse::<usize>().map_err(|_| Error::UnparseableValue {
                row,
                column: opts.columns.factor.clone(),
                value: field(c).to_string(),
            })?,
            None => 1,
        };
        if time < 0.0 {
            return Err(Error::OutOfDomain { row, detail: format!("negative time {time}") });
        }
        if tau == 0 {
            return Err(Error::OutOfDomain { row, detail: "factor levels start at 1".into() });
        }
        if subject.is_empty() {
            return Err(Error::UnparseableValue { row, column: opts.columns.subject.clone(), value: subject });
        }
        records.push(Record { subject, time, tau, y });
    }
    dataset_from_records(&records, c_factor.is_some(), opts)
}

/// Infers the domain the way [`read_csv`] does; `has_factor` says whether a
/// factor column was supplied.
pub fn dataset_from_records(records: &[Record], has_factor: bool, opts: &LoadOptions) -> Result<FunctionalDataset> {
    if records.is_empty() {
        return Err(Error::InvalidConfig("input has no data rows".into()));
    }
    let observed_t = records.iter().map(|r| r.time).fold(0.0_f64, f64::max);
    let observed_a = records.iter().map(|r| r.tau).max().unwrap_or(1);
    let t_max = match opts.t_max {
        Some(v) => v,
        None if observed_t > 0.0 => observed_t,
        None => 1.0,
    };
    let levels = if !has_factor { 1 } else { opts.factor_levels.unwrap_or(observed_a) };
    let structure = if levels == 1 {
        Structure::Additive
    } else {
        opts.structure.unwrap_or(Structure::Interaction)
    };
    let domain = DomainSpec::new(t_max, levels, structure)?;
    FunctionalDataset::from_records(records, domain, opts.normalize)
}

pub fn save_csv(dataset: &FunctionalDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(dataset, std::io::BufWriter::new(file))
}

/// Writes `subject,time,factor,response` using shortest round-trip float text.
pub fn write_csv<W: Write>(dataset: &FunctionalDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subject", "time", "factor", "response"])?;
    for s in &dataset.subjects {
        for o in &s.obs {
            w.write_record([s.id.clone(), o.time.to_string(), o.tau.to_string(), o.y.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
