//! Directory layout of a generated universe:
//!
//! ```text
//! generator.json   spec used to generate (echoed for reproducibility)
//! stores.json      store profiles
//! calendar.json    holiday calendar
//! products.json    source and target metadata
//! sales/<id>.csv   one hourly sales panel per product
//! calibration.csv  realised statistics against the calibration targets
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_universe, GeneratorSpec, ProductData, StoreProfile, Universe};
use crate::features::io::{read_json, read_sales_csv, write_json, write_sales_csv, DataIoError};
use crate::features::{FeatureError, HolidayCalendar, ProductMeta, SalesPanel};

#[derive(Debug, thiserror::Error)]
pub enum UniverseIoError {
    #[error(transparent)]
    Data(#[from] DataIoError),
    #[error("{0}")]
    Feature(#[from] FeatureError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

#[derive(Serialize, Deserialize)]
struct Products {
    sources: Vec<ProductMeta>,
    target: ProductMeta,
}

fn sales_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join("sales").join(format!("{id}.csv"))
}

pub fn write_universe(dir: &Path, u: &Universe) -> Result<(), UniverseIoError> {
    let sales_dir = dir.join("sales");
    fs::create_dir_all(&sales_dir).map_err(|source| UniverseIoError::Io {
        path: sales_dir.display().to_string(),
        source,
    })?;
    write_json(&dir.join("generator.json"), &u.spec)?;
    write_json(&dir.join("stores.json"), &u.stores)?;
    write_json(&dir.join("calendar.json"), &u.calendar)?;
    write_json(
        &dir.join("products.json"),
        &Products {
            sources: u.sources.iter().map(|p| p.meta.clone()).collect(),
            target: u.target.meta.clone(),
        },
    )?;
    for p in u.products() {
        write_sales_csv(&sales_path(dir, &p.meta.product_id), &p.panel.records())?;
    }
    validate_universe(u).write_csv(&dir.join("calibration.csv"))?;
    Ok(())
}

pub fn read_universe(dir: &Path) -> Result<Universe, UniverseIoError> {
    let spec: GeneratorSpec = read_json(&dir.join("generator.json"))?;
    let stores: Vec<StoreProfile> = read_json(&dir.join("stores.json"))?;
    let calendar: HolidayCalendar = read_json(&dir.join("calendar.json"))?;
    calendar.validate()?;
    let products: Products = read_json(&dir.join("products.json"))?;
    let load = |meta: ProductMeta| -> Result<ProductData, UniverseIoError> {
        meta.validate()?;
        let records = read_sales_csv(&sales_path(dir, &meta.product_id))?;
        let panel = SalesPanel::from_records(meta.product_id.clone(), records)?;
        Ok(ProductData { meta, panel })
    };
    let sources = products.sources.into_iter().map(load).collect::<Result<Vec<_>, _>>()?;
    let target = load(products.target)?;
    Ok(Universe {
        spec,
        stores,
        calendar,
        sources,
        target,
    })
}
