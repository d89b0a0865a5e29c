//! CSV output with a provenance column.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

/// First 16 hex digits of the SHA-256 of `value`'s JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configuration serializes");
    Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Writes `rows` with a header row taken from the row type's field names.
/// Lines end in LF.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> AppResult<()> {
    let file = fs::File::create(path).map_err(|e| AppError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        a: u32,
        b: f64,
        config_hash: &'static str,
    }

    #[test]
    fn header_and_lf() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_csv(&p, &[Row { a: 1, b: 0.5, config_hash: "x" }, Row { a: 2, b: -1.25, config_hash: "x" }]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b,config_hash\n1,0.5,x\n2,-1.25,x\n");
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let h = config_hash(&serde_json::json!({"seed": 1}));
        assert_eq!(h.len(), 16);
        assert_eq!(h, config_hash(&serde_json::json!({"seed": 1})));
        assert_ne!(h, config_hash(&serde_json::json!({"seed": 2})));
    }
}
