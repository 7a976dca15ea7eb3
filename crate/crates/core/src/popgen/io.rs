use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use super::{Attribute, AttributeLabels, MarginalTable, Population, Stage};

#[derive(Debug, Error)]
pub enum PopulationIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column {0}")]
    MissingColumn(String),
    #[error("row {row}, column {column}: invalid value {value:?}")]
    BadValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: household {household} is not contiguous")]
    NonContiguousHousehold { row: usize, household: u32 },
    #[error("marginals json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Marginal(#[from] super::PopgenError),
}

pub const REQUIRED_COLUMNS: [&str; 7] = [
    "agent_id",
    "age_band",
    "gender",
    "borough",
    "income_band",
    "occupation",
    "household_id",
];
pub const DYNAMIC_COLUMNS: [&str; 7] = [
    "disease_stage",
    "stage_timer",
    "doses_received",
    "last_dose_step",
    "employed_flag",
    "willingness_to_work",
    "isolation_flag",
];

/// Writes the population as CSV: the required static columns followed by
/// the dynamic state columns.
pub fn write_population(pop: &Population, path: &Path) -> Result<(), PopulationIoError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    header.extend(DYNAMIC_COLUMNS);
    w.write_record(&header)?;
    for i in 0..pop.len() {
        w.write_record(&[
            pop.agent_id[i].to_string(),
            pop.label(Attribute::AgeBand, i).to_string(),
            pop.label(Attribute::Gender, i).to_string(),
            pop.label(Attribute::Borough, i).to_string(),
            pop.label(Attribute::IncomeBand, i).to_string(),
            pop.label(Attribute::Occupation, i).to_string(),
            pop.household_id[i].to_string(),
            pop.disease_stage[i].letter().to_string(),
            pop.stage_timer[i].to_string(),
            pop.doses_received[i].to_string(),
            pop.last_dose_step[i].to_string(),
            (pop.employed[i] as u8).to_string(),
            pop.willingness[i].to_string(),
            (pop.isolating[i] as u8).to_string(),
        ])?;
    }
    w.flush().map_err(|e| PopulationIoError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Reads a population CSV. Dynamic columns are optional and default to a
/// susceptible, unvaccinated, employed, non-isolating agent.
///
/// `dictionaries` fixes the code order of each attribute's labels (labels not
/// listed are appended in order of first appearance). Without it, codes
/// follow first appearance.
pub fn read_population(
    path: &Path,
    dictionaries: Option<&AttributeLabels>,
) -> Result<Population, PopulationIoError> {
    let file = std::fs::File::open(path).map_err(|e| PopulationIoError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_population_from(file, dictionaries)
}

pub(crate) fn read_population_from<R: std::io::Read>(
    reader: R,
    dictionaries: Option<&AttributeLabels>,
) -> Result<Population, PopulationIoError> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut required = [0usize; 7];
    for (k, name) in REQUIRED_COLUMNS.iter().enumerate() {
        required[k] =
            col(name).ok_or_else(|| PopulationIoError::MissingColumn(name.to_string()))?;
    }
    let dynamic: Vec<Option<usize>> = DYNAMIC_COLUMNS.iter().map(|c| col(c)).collect();

    let mut labels = dictionaries.cloned().unwrap_or_default();
    let mut lookup: Vec<HashMap<String, u16>> = Attribute::ALL
        .iter()
        .map(|&a| {
            labels
                .get(a)
                .iter()
                .enumerate()
                .map(|(k, l)| (l.clone(), k as u16))
                .collect()
        })
        .collect();

    let mut agent_id = Vec::new();
    let mut attrs: [Vec<u16>; 5] = Default::default();
    let mut household_id = Vec::new();
    let mut stage = Vec::new();
    let mut timer = Vec::new();
    let mut doses = Vec::new();
    let mut last_dose = Vec::new();
    let mut employed = Vec::new();
    let mut willingness = Vec::new();
    let mut isolating = Vec::new();

    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let row1 = row + 1;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let bad = |column: &str, value: &str| PopulationIoError::BadValue {
            row: row1,
            column: column.to_string(),
            value: value.to_string(),
        };
        fn parse<T: std::str::FromStr>(s: &str) -> Option<T> {
            s.parse().ok()
        }

        agent_id.push(
            parse::<u64>(field(required[0])).ok_or_else(|| bad("agent_id", field(required[0])))?,
        );
        for (a, attr) in Attribute::ALL.iter().enumerate() {
            let v = field(required[1 + a]);
            if v.is_empty() {
                return Err(bad(attr.name(), v));
            }
            let code = match lookup[a].get(v) {
                Some(&c) => c,
                None => {
                    let list = labels.get_mut(*attr);
                    list.push(v.to_string());
                    let c = (list.len() - 1) as u16;
                    lookup[a].insert(v.to_string(), c);
                    c
                }
            };
            attrs[a].push(code);
        }
        household_id.push(
            parse::<u32>(field(required[6]))
                .ok_or_else(|| bad("household_id", field(required[6])))?,
        );

        let dyn_field = |k: usize| dynamic[k].map(&field);
        stage.push(match dyn_field(0) {
            Some(v) => Stage::from_letter(v).ok_or_else(|| bad(DYNAMIC_COLUMNS[0], v))?,
            None => Stage::S,
        });
        timer.push(match dyn_field(1) {
            Some(v) => parse(v).ok_or_else(|| bad(DYNAMIC_COLUMNS[1], v))?,
            None => 0,
        });
        doses.push(match dyn_field(2) {
            Some(v) => parse(v).ok_or_else(|| bad(DYNAMIC_COLUMNS[2], v))?,
            None => 0,
        });
        last_dose.push(match dyn_field(3) {
            Some(v) => parse(v).ok_or_else(|| bad(DYNAMIC_COLUMNS[3], v))?,
            None => -1,
        });
        let flag = |k: usize, default: bool| -> Result<bool, PopulationIoError> {
            match dyn_field(k) {
                Some("1") | Some("true") => Ok(true),
                Some("0") | Some("false") => Ok(false),
                Some(v) => Err(bad(DYNAMIC_COLUMNS[k], v)),
                None => Ok(default),
            }
        };
        employed.push(flag(4, true)?);
        willingness.push(match dyn_field(5) {
            Some(v) => parse::<f64>(v)
                .filter(|w| (0.0..=1.0).contains(w))
                .ok_or_else(|| bad(DYNAMIC_COLUMNS[5], v))?,
            None => 1.0,
        });
        isolating.push(flag(6, false)?);
    }

    // Households must be contiguous.
    let mut seen = std::collections::HashSet::new();
    for i in 0..household_id.len() {
        if (i == 0 || household_id[i] != household_id[i - 1]) && !seen.insert(household_id[i]) {
            return Err(PopulationIoError::NonContiguousHousehold {
                row: i + 1,
                household: household_id[i],
            });
        }
    }

    let mut pop = Population::from_static(agent_id, labels, attrs, household_id);
    pop.disease_stage = stage;
    pop.stage_timer = timer;
    pop.doses_received = doses;
    pop.last_dose_step = last_dose;
    pop.employed = employed;
    pop.willingness = willingness;
    pop.isolating = isolating;
    Ok(pop)
}

/// Reads a JSON array of marginal tables.
pub fn read_marginals(path: &Path) -> Result<Vec<MarginalTable>, PopulationIoError> {
    let text = std::fs::read_to_string(path).map_err(|e| PopulationIoError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let tables: Vec<MarginalTable> = serde_json::from_str(&text)?;
    for t in &tables {
        t.validate()?;
    }
    Ok(tables)
}
