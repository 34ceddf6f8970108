//! `.rec` container: a `key: value` text header ended by a blank line,
//! followed by little-endian `f32` samples. A cohort is a directory of
//! `.rec` files plus a `manifest` listing `filename<TAB>subject_id`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{DataError, Recording, StageLabel, EPOCH_SECONDS};

pub const MANIFEST_NAME: &str = "manifest";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_recording(rec: &Recording) -> Vec<u8> {
    let codes: Vec<String> = rec
        .epoch_labels
        .iter()
        .map(|l| l.index().to_string())
        .collect();
    let header = format!(
        "subject_id: {}\nchannel: {}\nsample_rate: {}\nn_epochs: {}\nlights_off: {}\nlights_on: {}\nlabel_codes: {}\n\n",
        rec.subject_id,
        rec.channel,
        rec.sample_rate,
        rec.n_epochs(),
        rec.lights_off,
        rec.lights_on,
        codes.join(",")
    );
    let mut out = header.into_bytes();
    out.reserve(rec.samples.len() * 4);
    for s in &rec.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

fn malformed(field: &str, reason: impl Into<String>) -> DataError {
    DataError::MalformedHeader {
        field: field.to_string(),
        reason: reason.into(),
    }
}

pub fn decode_recording(bytes: &[u8]) -> Result<Recording, DataError> {
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| malformed("header", "no blank line terminating the header"))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| malformed("header", "header is not UTF-8"))?;
    let body = &bytes[split + 2..];

    let mut fields: HashMap<&str, &str> = HashMap::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| malformed(line, "expected `key: value`"))?;
        fields.insert(k.trim(), v.trim());
    }
    let get = |name: &str| {
        fields
            .get(name)
            .copied()
            .ok_or_else(|| malformed(name, "missing"))
    };
    let parse_usize = |name: &str| -> Result<usize, DataError> {
        get(name)?
            .parse::<usize>()
            .map_err(|e| malformed(name, e.to_string()))
    };

    let subject_id = get("subject_id")?.to_string();
    let channel = get("channel")?.to_string();
    let sample_rate: u32 = get("sample_rate")?
        .parse()
        .map_err(|e: std::num::ParseIntError| malformed("sample_rate", e.to_string()))?;
    if sample_rate == 0 {
        return Err(malformed("sample_rate", "must be positive"));
    }
    let n_epochs = parse_usize("n_epochs")?;
    let lights_off = parse_usize("lights_off")?;
    let lights_on = parse_usize("lights_on")?;
    let codes = get("label_codes")?;
    let mut epoch_labels = Vec::with_capacity(n_epochs);
    if !codes.is_empty() {
        for (epoch, code) in codes.split(',').enumerate() {
            let label = code
                .trim()
                .parse::<usize>()
                .ok()
                .and_then(StageLabel::from_index)
                .ok_or_else(|| DataError::UnknownLabelCode {
                    epoch,
                    code: code.trim().to_string(),
                })?;
            epoch_labels.push(label);
        }
    }
    if epoch_labels.len() != n_epochs {
        return Err(malformed(
            "label_codes",
            format!("{} codes for n_epochs = {n_epochs}", epoch_labels.len()),
        ));
    }

    let expected = n_epochs * EPOCH_SECONDS * sample_rate as usize;
    if body.len() % 4 != 0 || body.len() / 4 != expected {
        return Err(DataError::SampleCountMismatch {
            expected,
            found: body.len() / 4,
        });
    }
    let samples = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let rec = Recording {
        subject_id,
        channel,
        sample_rate,
        samples,
        epoch_labels,
        lights_off,
        lights_on,
    };
    rec.validate()?;
    Ok(rec)
}

pub fn load_recording(path: &Path) -> Result<Recording, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_recording(&bytes)
}

pub fn save_recording(path: &Path, rec: &Recording) -> Result<(), DataError> {
    rec.validate()?;
    fs::write(path, encode_recording(rec)).map_err(io_err(path))
}

/// Writes recordings as `NNN_<subject>.rec` plus the manifest.
pub fn save_cohort(dir: &Path, recordings: &[Recording]) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    for (i, rec) in recordings.iter().enumerate() {
        let name = format!("{i:03}_{}.rec", rec.subject_id);
        save_recording(&dir.join(&name), rec)?;
        manifest.push_str(&format!("{name}\t{}\n", rec.subject_id));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(io_err(&path))
}

/// Loads every recording listed in the manifest, in manifest order.
pub fn load_cohort(dir: &Path) -> Result<Vec<Recording>, DataError> {
    let path = dir.join(MANIFEST_NAME);
    let manifest = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let (file, subject) = line
            .split_once('\t')
            .ok_or_else(|| malformed("manifest", format!("bad line `{line}`")))?;
        let rec = load_recording(&dir.join(file.trim()))?;
        if rec.subject_id != subject.trim() {
            return Err(malformed(
                "subject_id",
                format!("{file} says {} but manifest says {subject}", rec.subject_id),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::EPOCH_SAMPLES;

    fn sample_rec(n_epochs: usize) -> Recording {
        let samples = (0..n_epochs * EPOCH_SAMPLES)
            .map(|i| ((i as f32) * 0.01).sin())
            .collect();
        let labels = (0..n_epochs).map(|i| StageLabel::ALL[(i / 3) % 5]).collect();
        Recording::new("S07", "Fpz-Cz", 100, samples, labels).unwrap()
    }

    #[test]
    fn hundred_epoch_file_loads_with_300k_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rec");
        let rec = sample_rec(100);
        save_recording(&path, &rec).unwrap();
        let back = load_recording(&path).unwrap();
        assert_eq!(back.samples.len(), 300_000);
        assert_eq!(back, rec);
        assert!(back
            .samples
            .iter()
            .zip(&rec.samples)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_body_is_a_sample_count_mismatch() {
        let mut bytes = encode_recording(&sample_rec(3));
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            decode_recording(&bytes),
            Err(DataError::SampleCountMismatch { expected: 9000, found: 8999 })
        ));
    }

    #[test]
    fn bad_label_code_is_reported() {
        let bytes = encode_recording(&sample_rec(2));
        let text = String::from_utf8_lossy(&bytes).replacen("label_codes: 0,0", "label_codes: 0,9", 1);
        let err = decode_recording(text.as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::UnknownLabelCode { epoch: 1, ref code } if code == "9"));
    }

    #[test]
    fn missing_field_is_named() {
        let bytes = b"subject_id: S\nchannel: X\n\n".to_vec();
        match decode_recording(&bytes) {
            Err(DataError::MalformedHeader { field, .. }) => assert_eq!(field, "sample_rate"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cohort_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = sample_rec(2);
        a.subject_id = "A".into();
        let b = sample_rec(3);
        save_cohort(dir.path(), &[a.clone(), b.clone()]).unwrap();
        let back = load_cohort(dir.path()).unwrap();
        assert_eq!(back, vec![a, b]);
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(manifest, "000_A.rec\tA\n001_S07.rec\tS07\n");
    }
}
