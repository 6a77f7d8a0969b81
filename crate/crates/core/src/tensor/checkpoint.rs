use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: a version tag, a caller-defined header, and every
/// parameter by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<H> {
    pub version: u32,
    pub header: H,
    pub params: BTreeMap<String, Tensor>,
}

impl<H: Serialize + DeserializeOwned> Checkpoint<H> {
    pub fn new(header: H, params: BTreeMap<String, Tensor>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            header,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_reader(BufReader::new(file))?;
        match raw.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Version(format!(
                    "checkpoint version {v}, expected {CHECKPOINT_VERSION}"
                )))
            }
            None => return Err(Error::Version("checkpoint has no version field".into())),
        }
        let ckpt: Self = serde_json::from_value(raw)?;
        for (name, t) in &ckpt.params {
            let n: usize = t.shape().iter().product();
            if n != t.len() {
                return Err(Error::Version(format!(
                    "parameter {name}: shape/data mismatch"
                )));
            }
        }
        Ok(ckpt)
    }
}
