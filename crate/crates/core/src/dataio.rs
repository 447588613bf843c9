//! Forced-choice conjoint records: CSV input/output and respondent-level splits.
//!
//! Columns: `respondent_id,task_id,stage,group,chose_a`, then `<factor>_a`
//! for every factor, then `<factor>_b` for every factor. Level strings are
//! matched case-sensitively against the design.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::design::{ConjointDesign, Profile};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Primary,
    General,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Primary => "primary",
            Stage::General => "general",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primary" => Ok(Stage::Primary),
            "general" => Ok(Stage::General),
            other => Err(Error::InvalidArgument(format!(
                "stage must be `primary` or `general`, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskRecord {
    pub respondent_id: String,
    pub task_id: String,
    pub profile_a: Profile,
    pub profile_b: Profile,
    pub chose_a: bool,
    pub group: String,
    pub stage: Stage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForcedChoiceDataset {
    design: ConjointDesign,
    records: Vec<TaskRecord>,
}

const FIXED_COLUMNS: [&str; 5] = ["respondent_id", "task_id", "stage", "group", "chose_a"];

impl ForcedChoiceDataset {
    /// Validates every profile against the design.
    pub fn new(design: ConjointDesign, records: Vec<TaskRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InsufficientData("dataset has no records".into()));
        }
        let counts = design.level_counts();
        for (i, r) in records.iter().enumerate() {
            for t in [&r.profile_a, &r.profile_b] {
                if t.0.len() != counts.len() || t.0.iter().zip(&counts).any(|(&l, &c)| l >= c) {
                    return Err(Error::ShapeMismatch(format!("record {i} has an invalid profile")));
                }
            }
        }
        Ok(Self { design, records })
    }

    pub fn design(&self) -> &ConjointDesign {
        &self.design
    }

    pub fn records(&self) -> &[TaskRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct respondent ids in sorted order.
    pub fn respondents(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.respondent_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Records whose respondent is in `keep`, in original order.
    pub fn subset_by_respondents(&self, keep: &BTreeSet<String>) -> Result<Self> {
        let records: Vec<TaskRecord> = self
            .records
            .iter()
            .filter(|r| keep.contains(&r.respondent_id))
            .cloned()
            .collect();
        Self::new(self.design.clone(), records)
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
}

/// Reads a dataset from CSV text.
pub fn read_dataset<R: Read>(reader: R, design: &ConjointDesign) -> Result<ForcedChoiceDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let fixed: Vec<usize> = FIXED_COLUMNS
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<_>>()?;
    let mut side_cols = Vec::new();
    for suffix in ["a", "b"] {
        let cols: Vec<(String, usize)> = design
            .factors()
            .iter()
            .map(|f| {
                let name = format!("{}_{suffix}", f.name);
                column_index(&headers, &name).map(|i| (name, i))
            })
            .collect::<Result<_>>()?;
        side_cols.push(cols);
    }

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let rownum = i + 1;
        let field = |idx: usize| row.get(idx).unwrap_or("");
        let stage = field(fixed[2]).parse::<Stage>().map_err(|e| Error::Parse {
            row: rownum,
            column: "stage".into(),
            message: e.to_string(),
        })?;
        let chose_a = match field(fixed[4]) {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    row: rownum,
                    column: "chose_a".into(),
                    message: format!("expected 0 or 1, got `{other}`"),
                })
            }
        };
        let mut profiles = Vec::with_capacity(2);
        for cols in &side_cols {
            let mut levels = Vec::with_capacity(cols.len());
            for (d, (name, idx)) in cols.iter().enumerate() {
                let value = field(*idx);
                let l = design.level_index(d, value).ok_or_else(|| Error::Parse {
                    row: rownum,
                    column: name.clone(),
                    message: format!(
                        "unknown level `{value}` for factor `{}`",
                        design.factors()[d].name
                    ),
                })?;
                levels.push(l);
            }
            profiles.push(Profile(levels));
        }
        let profile_b = profiles.pop().expect("two sides");
        let profile_a = profiles.pop().expect("two sides");
        records.push(TaskRecord {
            respondent_id: field(fixed[0]).to_string(),
            task_id: field(fixed[1]).to_string(),
            profile_a,
            profile_b,
            chose_a,
            group: field(fixed[3]).to_string(),
            stage,
        });
    }
    ForcedChoiceDataset::new(design.clone(), records)
}

pub fn load_dataset(path: impl AsRef<Path>, design: &ConjointDesign) -> Result<ForcedChoiceDataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, design)
}

/// Writes a dataset in the canonical column order.
pub fn write_dataset<W: Write>(writer: W, data: &ForcedChoiceDataset) -> Result<()> {
    let design = data.design();
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    for suffix in ["a", "b"] {
        header.extend(design.factors().iter().map(|f| format!("{}_{suffix}", f.name)));
    }
    wtr.write_record(&header)?;
    for r in data.records() {
        let mut row: Vec<&str> = vec![
            &r.respondent_id,
            &r.task_id,
            r.stage.as_str(),
            &r.group,
            if r.chose_a { "1" } else { "0" },
        ];
        row.extend(design.profile_labels(&r.profile_a));
        row.extend(design.profile_labels(&r.profile_b));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, data: &ForcedChoiceDataset) -> Result<()> {
    write_dataset(std::fs::File::create(path)?, data)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitInfo {
    pub seed: u64,
    pub fraction: f64,
    pub first_respondents: usize,
    pub second_respondents: usize,
}

/// Respondents in sorted order, shuffled by a seeded SplitMix64 stream.
fn shuffled_respondents(data: &ForcedChoiceDataset, seed: u64) -> Vec<String> {
    let mut ids = data.respondents();
    ids.shuffle(&mut SplitMix64::seed_from_u64(seed));
    ids
}

/// Splits by respondent: the first part receives ⌊fraction · n_resp⌋
/// respondents (kept between 1 and n_resp − 1), so no respondent spans both.
pub fn split_dataset(
    data: &ForcedChoiceDataset,
    fraction: f64,
    seed: u64,
) -> Result<(ForcedChoiceDataset, ForcedChoiceDataset, SplitInfo)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("fraction {fraction} not in (0, 1)")));
    }
    let ids = shuffled_respondents(data, seed);
    if ids.len() < 2 {
        return Err(Error::Split(format!("{} respondent(s); need at least 2", ids.len())));
    }
    let k = ((fraction * ids.len() as f64).floor() as usize).clamp(1, ids.len() - 1);
    let first: BTreeSet<String> = ids[..k].iter().cloned().collect();
    let second: BTreeSet<String> = ids[k..].iter().cloned().collect();
    let info = SplitInfo {
        seed,
        fraction,
        first_respondents: first.len(),
        second_respondents: second.len(),
    };
    Ok((
        data.subset_by_respondents(&first)?,
        data.subset_by_respondents(&second)?,
        info,
    ))
}

/// Assigns respondents round-robin to `k` folds after a seeded shuffle.
/// Returns (training, held-out) pairs.
pub fn respondent_folds(
    data: &ForcedChoiceDataset,
    k: usize,
    seed: u64,
) -> Result<Vec<(ForcedChoiceDataset, ForcedChoiceDataset)>> {
    let ids = shuffled_respondents(data, seed);
    if k < 2 || ids.len() < k {
        return Err(Error::Split(format!(
            "{} respondent(s) cannot fill {k} folds",
            ids.len()
        )));
    }
    (0..k)
        .map(|fold| {
            let (held, train): (Vec<_>, Vec<_>) =
                ids.iter().enumerate().partition(|(i, _)| i % k == fold);
            let held: BTreeSet<String> = held.into_iter().map(|(_, s)| s.clone()).collect();
            let train: BTreeSet<String> = train.into_iter().map(|(_, s)| s.clone()).collect();
            Ok((data.subset_by_respondents(&train)?, data.subset_by_respondents(&held)?))
        })
        .collect()
}
