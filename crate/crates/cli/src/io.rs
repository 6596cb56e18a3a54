use std::path::Path;

use flowcrypt::format::{self, Dataset};
use flowcrypt::{Error, Result};
use serde::Serialize;

use crate::{DataArgs, DataFormat};

/// Version of every JSON report this tool prints.
pub const SCHEMA_VERSION: u32 = 1;

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn load_dataset(args: &DataArgs) -> Result<Dataset> {
    load_dataset_at(&args.path, args.labeled)
}

pub fn load_dataset_at(path: &Path, labeled: bool) -> Result<Dataset> {
    if is_csv(path) {
        format::parse_csv(&std::fs::read_to_string(path)?, labeled)
    } else {
        format::read_dataset(path)
    }
}

pub fn save_dataset(path: &Path, ds: &Dataset, fmt: DataFormat) -> Result<()> {
    match fmt {
        DataFormat::Ftns => format::write_dataset(path, ds),
        DataFormat::Csv => Ok(std::fs::write(path, format::to_csv(ds))?),
    }
}

/// Prints `report` as one JSON object with a `schema_version` field.
pub fn print_report<T: Serialize>(report: &T) -> Result<()> {
    let mut value = serde_json::to_value(report).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("schema_version".into(), SCHEMA_VERSION.into());
    }
    println!("{value}");
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}
