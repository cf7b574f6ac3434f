use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

/// Bytes per record: one label byte and a 3x32x32 image.
pub const CIFAR_RECORD: usize = 3073;

/// Parses one CIFAR-10 binary batch file.
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse(&bytes)
}

pub(crate) fn parse(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Format {
            offset: whole as u64,
            msg: format!(
                "truncated record: {} trailing bytes, expected {CIFAR_RECORD}",
                bytes.len() - whole
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                offset: (i * CIFAR_RECORD) as u64,
                msg: format!("label {} out of range", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(images, labels, 10, 3, 32)
}

/// Reads `data_batch_1.bin` .. `data_batch_5.bin` (train) or
/// `test_batch.bin` from `dir`.
pub fn load_cifar10_dir(dir: &Path, train: bool) -> Result<Dataset> {
    let names: Vec<String> = if train {
        (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
    } else {
        vec!["test_batch.bin".into()]
    };
    let mut all: Option<Dataset> = None;
    for name in names {
        let ds = load_cifar10_binary(&dir.join(name))?;
        match &mut all {
            None => all = Some(ds),
            Some(acc) => {
                acc.images.extend(ds.images);
                acc.labels.extend(ds.labels);
            }
        }
    }
    Ok(all.expect("at least one file"))
}
