use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILES: [&str; 1] = ["test_batch.bin"];

/// Parse `label byte + C·H·W pixel bytes` records.
pub fn decode_records(
    bytes: &[u8],
    path: &str,
    shape: [usize; 3],
    num_classes: usize,
    split: Split,
) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::format(path, "empty file"));
    }
    let per = shape.iter().product::<usize>();
    let record = per + 1;
    if !bytes.len().is_multiple_of(record) {
        let start = bytes.len() - bytes.len() % record;
        return Err(Error::format(
            path,
            format!(
                "truncated record at byte offset {start}: {} of {record} bytes",
                bytes.len() - start
            ),
        ));
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * per);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        if rec[0] as usize >= num_classes {
            return Err(Error::format(
                path,
                format!(
                    "label {} at byte offset {} exceeds {}",
                    rec[0],
                    i * record,
                    num_classes - 1
                ),
            ));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Dataset::from_bytes(shape, pixels, labels, num_classes, split)
}

/// Inverse of [`decode_records`].
pub fn encode_records(dataset: &Dataset) -> Vec<u8> {
    let per = dataset.per_image();
    let mut out = Vec::with_capacity(dataset.len() * (per + 1));
    for i in 0..dataset.len() {
        out.push(dataset.labels[i]);
        out.extend_from_slice(dataset.image_bytes(i));
    }
    out
}

pub fn read_records(path: &Path, shape: [usize; 3], num_classes: usize, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    decode_records(&bytes, &path.display().to_string(), shape, num_classes, split)
}

pub fn write_records(path: &Path, dataset: &Dataset) -> Result<()> {
    fs::write(path, encode_records(dataset))?;
    Ok(())
}

/// Load the standard CIFAR-10 binary files from `dir`.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: &[&str] = match split {
        Split::Train => &TRAIN_FILES,
        Split::Test => &TEST_FILES,
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(name);
        if !path.exists() {
            return Err(Error::format(path.display().to_string(), "missing CIFAR-10 file"));
        }
        let part = read_records(&path, CIFAR_SHAPE, 10, split)?;
        if part.len() != CIFAR_RECORDS_PER_FILE {
            return Err(Error::format(
                path.display().to_string(),
                format!("{} records, expected {CIFAR_RECORDS_PER_FILE}", part.len()),
            ));
        }
        pixels.extend_from_slice(&part.pixels);
        labels.extend_from_slice(&part.labels);
    }
    Dataset::from_bytes(CIFAR_SHAPE, pixels, labels, 10, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, first: u8) -> Vec<u8> {
        let mut r = vec![0u8; CIFAR_RECORD_BYTES];
        r[0] = label;
        r[1] = first;
        r
    }

    #[test]
    fn hand_built_record() {
        let d = decode_records(&record(7, 255), "r", CIFAR_SHAPE, 10, Split::Test).unwrap();
        let img = d.image(0);
        assert_eq!(img.label, 7);
        assert_eq!(img.pixels.data()[0], 1.0);
        assert_eq!(img.pixels.data()[1], 0.0);
    }

    #[test]
    fn channel_major_layout() {
        let mut r = record(0, 0);
        // green channel, row 1, column 2
        r[1 + 1024 + 32 + 2] = 51;
        let d = decode_records(&r, "r", CIFAR_SHAPE, 10, Split::Test).unwrap();
        assert_eq!(d.image(0).pixels.data()[1024 + 32 + 2], 0.2);
    }

    #[test]
    fn errors_name_offsets() {
        let e = decode_records(&[], "e.bin", CIFAR_SHAPE, 10, Split::Test).unwrap_err();
        assert!(e.to_string().contains("empty file"));
        let mut bytes = record(1, 0);
        bytes.extend(record(10, 0));
        let e = decode_records(&bytes, "l.bin", CIFAR_SHAPE, 10, Split::Test).unwrap_err();
        assert!(e.to_string().contains("byte offset 3073"), "{e}");
        let mut bytes = record(1, 0);
        bytes.extend([3u8; 100]);
        let e = decode_records(&bytes, "t.bin", CIFAR_SHAPE, 10, Split::Test).unwrap_err();
        assert!(e.to_string().contains("truncated record at byte offset 3073"), "{e}");
    }

    #[test]
    fn round_trip_bytes() {
        let mut bytes = record(3, 9);
        bytes.extend(record(9, 200));
        bytes[3073 + 500] = 17;
        let d = decode_records(&bytes, "r", CIFAR_SHAPE, 10, Split::Train).unwrap();
        assert_eq!(encode_records(&d), bytes);
    }
}
