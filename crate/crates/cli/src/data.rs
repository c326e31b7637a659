//! Dataset files: a CSV plus a JSON sidecar with the same stem.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use isnn::mech::{DatasetMeta, MaterialDataset};
use isnn::train::{ToyDataset, ToyFunction};
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const OUTPUT_FORMAT_VERSION: u32 = 1;

/// Sidecar of a toy regression dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyMeta {
    pub format_version: u32,
    pub function: ToyFunction,
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum AnyMeta {
    Toy(ToyMeta),
    Material(DatasetMeta),
}

pub enum Dataset {
    Toy(ToyDataset),
    Material(MaterialDataset),
}

pub fn sidecar(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| io_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes through `f` into a buffer, then to `path`.
pub fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> isnn::Result<()>) -> Result<(), Failure> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| io_err(path, e))?;
    write_text(path, &String::from_utf8(buf).expect("writers emit UTF-8"))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    write_text(path, &(text + "\n"))
}

pub fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Loads a dataset CSV, using its sidecar to tell toy data from material
/// data. A toy CSV without a sidecar is accepted.
pub fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    let meta_path = sidecar(path);
    if !meta_path.exists() {
        let toy = ToyDataset::read_csv(open(path)?).map_err(|e| io_err(path, e))?;
        return Ok(Dataset::Toy(toy));
    }
    let meta: AnyMeta = serde_json::from_str(&read_text(&meta_path)?).map_err(|e| io_err(&meta_path, e))?;
    match meta {
        AnyMeta::Toy(m) => {
            if m.format_version != OUTPUT_FORMAT_VERSION {
                return Err(io_err(&meta_path, format!("unsupported format version {}", m.format_version)));
            }
            let mut toy = ToyDataset::read_csv(open(path)?).map_err(|e| io_err(path, e))?;
            (toy.lo, toy.hi, toy.seed) = (m.lo, m.hi, m.seed);
            Ok(Dataset::Toy(toy))
        }
        AnyMeta::Material(m) => {
            Ok(Dataset::Material(MaterialDataset::read_csv(open(path)?, m).map_err(|e| io_err(path, e))?))
        }
    }
}

pub fn load_material(path: &Path) -> Result<MaterialDataset, Failure> {
    match load_dataset(path)? {
        Dataset::Material(d) => Ok(d),
        Dataset::Toy(_) => Err(Failure::Config(format!("{} is a toy dataset; a material dataset is needed", path.display()))),
    }
}

pub fn save_toy(path: &Path, data: &ToyDataset, function: ToyFunction) -> Result<(), Failure> {
    write_with(path, |b| data.write_csv(b))?;
    let meta =
        ToyMeta { format_version: OUTPUT_FORMAT_VERSION, function, n: data.len(), lo: data.lo, hi: data.hi, seed: data.seed };
    write_json(&sidecar(path), &meta)
}

pub fn save_material(path: &Path, data: &MaterialDataset) -> Result<(), Failure> {
    write_with(path, |b| data.write_csv(b))?;
    write_json(&sidecar(path), &data.meta)
}
