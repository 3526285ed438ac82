use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{CLS_ID, PAD_ID, SEP_ID};
use crate::error::{Error, Result};

/// One framed sentence pair with its prediction targets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainExample {
    pub tokens: Vec<u32>,
    pub segments: Vec<u8>,
    pub predict_positions: Vec<usize>,
    pub predict_labels: Vec<u32>,
    pub nsp_label: u8,
}

impl PretrainExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks the structural invariants: matching lengths, strictly
    /// increasing targets that avoid framing tokens, and segment ids that
    /// switch from 0 to 1 right after the first `[SEP]`.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.tokens.is_empty() {
            return bad("example has no tokens".into());
        }
        if self.segments.len() != self.tokens.len() {
            return bad(format!(
                "{} segment ids for {} tokens",
                self.segments.len(),
                self.tokens.len()
            ));
        }
        if self.predict_positions.len() != self.predict_labels.len() {
            return bad(format!(
                "{} prediction positions but {} labels",
                self.predict_positions.len(),
                self.predict_labels.len()
            ));
        }
        if self.predict_positions.windows(2).any(|w| w[0] >= w[1]) {
            return bad("prediction positions not strictly increasing".into());
        }
        for &p in &self.predict_positions {
            match self.tokens.get(p) {
                None => return bad(format!("prediction position {p} beyond length {}", self.tokens.len())),
                Some(&t) if t == CLS_ID || t == SEP_ID || t == PAD_ID => {
                    return bad(format!("prediction position {p} points at a framing token"));
                }
                _ => {}
            }
        }
        if self.nsp_label > 1 {
            return bad(format!("NSP label {} is not 0 or 1", self.nsp_label));
        }
        let boundary = self.tokens.iter().position(|&t| t == SEP_ID).map_or(self.tokens.len(), |i| i + 1);
        let segments_ok = self.segments[..boundary].iter().all(|&s| s == 0)
            && self.segments[boundary..].iter().all(|&s| s == 1);
        if !segments_ok {
            return bad("segment ids must switch from 0 to 1 right after the first [SEP]".into());
        }
        Ok(())
    }
}

/// Writes one JSON object per line.
pub fn write_examples<'a>(path: &Path, examples: impl IntoIterator<Item = &'a PretrainExample>) -> Result<usize> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut count = 0;
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        count += 1;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(count)
}

/// Reads and validates a JSON-lines example file. Blank lines are skipped.
pub fn read_examples(path: &Path) -> Result<Vec<PretrainExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let ex: PretrainExample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        ex.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> PretrainExample {
        PretrainExample {
            tokens: vec![2, 4, 9, 3, 11, 3],
            segments: vec![0, 0, 0, 0, 1, 1],
            predict_positions: vec![1, 4],
            predict_labels: vec![8, 11],
            nsp_label: 1,
        }
    }

    #[test]
    fn roundtrip_and_field_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ex.jsonl");
        write_examples(&path, [&sample()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"tokens\":[2,4,9,3,11,3],\"segments\":[0,0,0,0,1,1],\"predict_positions\":[1,4],\
             \"predict_labels\":[8,11],\"nsp_label\":1}\n"
        );
        assert_eq!(read_examples(&path).unwrap(), vec![sample()]);
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_examples(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&sample()).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"tokens\":[1]}}\n")).unwrap();
        assert!(matches!(read_examples(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v = serde_json::to_value(sample()).unwrap();
        v["extra"] = 1.into();
        assert!(serde_json::from_value::<PretrainExample>(v).is_err());
    }

    #[test]
    fn validation_catches_bad_targets_and_segments() {
        let mut ex = sample();
        ex.predict_positions = vec![3, 4];
        assert!(ex.validate().is_err());
        let mut ex = sample();
        ex.segments[3] = 1;
        assert!(ex.validate().is_err());
        let mut ex = sample();
        ex.predict_positions = vec![4, 1];
        assert!(ex.validate().is_err());
        assert!(sample().validate().is_ok());
    }
}
