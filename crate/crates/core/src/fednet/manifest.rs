//! Per-site CSV ingestion driven by a JSON manifest.
//!
//! ```json
//! {
//!   "family": "logistic",
//!   "outcome": "y",
//!   "common": ["x"],
//!   "intercept": true,
//!   "sites": ["site1.csv", "site2.csv"]
//! }
//! ```
//!
//! Columns other than the outcome and the common covariates are nuisance
//! covariates, in the header order of the first site file. With
//! `intercept` (the default) a constant column is prepended to them.
//! Relative site paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::model::{FamilyKind, ModelFamily, ParameterPartition};

fn default_family() -> FamilyKind {
    FamilyKind::Logistic
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default = "default_family")]
    pub family: FamilyKind,
    pub outcome: String,
    pub common: Vec<String>,
    #[serde(default = "default_true")]
    pub intercept: bool,
    pub sites: Vec<PathBuf>,
}

/// Column roles resolved from the manifest and the first site header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnLayout {
    pub outcome: String,
    pub common: Vec<String>,
    /// Includes `"(intercept)"` first when an intercept is added.
    pub nuisance: Vec<String>,
}

pub const INTERCEPT: &str = "(intercept)";

#[derive(Debug, Clone)]
pub struct LoadedSites {
    pub model: ModelFamily,
    pub layout: ColumnLayout,
    pub datasets: Vec<SiteDataset>,
    pub files: Vec<PathBuf>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("manifest {}: {e}", path.display())))?;
    if manifest.sites.is_empty() {
        return Err(Error::Data(format!("manifest {} lists no site files", path.display())));
    }
    if manifest.common.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} declares no common covariates",
            path.display()
        )));
    }
    Ok(manifest)
}

/// Reads the manifest and every site file it lists.
pub fn load_sites(manifest_path: &Path) -> Result<LoadedSites> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let files: Vec<PathBuf> = manifest
        .sites
        .iter()
        .map(|p| if p.is_absolute() { p.clone() } else { base.join(p) })
        .collect();

    let mut layout: Option<ColumnLayout> = None;
    let mut model: Option<ModelFamily> = None;
    let mut datasets = Vec::with_capacity(files.len());
    for (site, file) in files.iter().enumerate() {
        let (headers, rows) = read_csv(file)?;
        let lay = match &layout {
            Some(l) => l.clone(),
            None => {
                let l = resolve_layout(&manifest, &headers, file)?;
                let q = l.nuisance.len();
                let partition = ParameterPartition::new(l.common.len(), q).map_err(|_| {
                    Error::Data(format!(
                        "{}: no nuisance columns (enable the intercept or add covariates)",
                        file.display()
                    ))
                })?;
                model = Some(ModelFamily::new(manifest.family, partition));
                layout = Some(l.clone());
                l
            }
        };
        let m = model.expect("model set with layout");
        let idx = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Data(format!("{}: missing column '{name}'", file.display())))
        };
        let expected = lay.common.len() + lay.nuisance.iter().filter(|c| c.as_str() != INTERCEPT).count() + 1;
        if headers.len() != expected {
            return Err(Error::Data(format!(
                "{}: expected {expected} columns matching the first site, found {}",
                file.display(),
                headers.len()
            )));
        }
        let y_col = idx(&lay.outcome)?;
        let x_cols = lay.common.iter().map(|c| idx(c)).collect::<Result<Vec<_>>>()?;
        let z_cols = lay
            .nuisance
            .iter()
            .map(|c| if c == INTERCEPT { Ok(None) } else { idx(c).map(Some) })
            .collect::<Result<Vec<_>>>()?;

        let mut y = Vec::with_capacity(rows.len());
        let mut x = Vec::with_capacity(rows.len() * x_cols.len());
        let mut z = Vec::with_capacity(rows.len() * z_cols.len());
        for (r, row) in rows.iter().enumerate() {
            let out = row[y_col];
            if !m.valid_outcome(out) {
                return Err(Error::Data(format!(
                    "{} row {} column '{}': outcome {out} invalid for the {} family",
                    file.display(),
                    r + 2,
                    lay.outcome,
                    m.kind
                )));
            }
            y.push(out);
            x.extend(x_cols.iter().map(|&c| row[c]));
            z.extend(z_cols.iter().map(|c| c.map_or(1.0, |c| row[c])));
        }
        let ds = SiteDataset::new(site, &m, y, x, z).map_err(|e| Error::Data(format!("{}: {e}", file.display())))?;
        datasets.push(ds);
    }
    Ok(LoadedSites {
        model: model.expect("at least one site"),
        layout: layout.expect("at least one site"),
        datasets,
        files,
    })
}

fn resolve_layout(manifest: &Manifest, headers: &[String], file: &Path) -> Result<ColumnLayout> {
    for name in std::iter::once(&manifest.outcome).chain(&manifest.common) {
        if !headers.contains(name) {
            return Err(Error::Data(format!("{}: missing column '{name}'", file.display())));
        }
    }
    if manifest.common.contains(&manifest.outcome) {
        return Err(Error::Data("outcome column is also declared common".into()));
    }
    let mut nuisance = Vec::new();
    if manifest.intercept {
        nuisance.push(INTERCEPT.to_string());
    }
    nuisance.extend(
        headers
            .iter()
            .filter(|h| **h != manifest.outcome && !manifest.common.contains(h))
            .cloned(),
    );
    Ok(ColumnLayout {
        outcome: manifest.outcome.clone(),
        common: manifest.common.clone(),
        nuisance,
    })
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: unreadable header: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Data(format!("{}: empty site file", path.display())));
    }
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{} row {}: {e}", path.display(), r + 2)))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Data(format!(
                        "{} row {} column '{}': cannot parse '{cell}' as a finite number",
                        path.display(),
                        r + 2,
                        headers[c]
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{}: empty site file (no data rows)",
            path.display()
        )));
    }
    Ok((headers, rows))
}
