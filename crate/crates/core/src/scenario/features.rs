//! `MCILFEAT v1` text feature files.
//!
//! ```text
//! MCILFEAT v1 <n_samples> <d_v_raw> <d_a_raw> <n_classes>
//! CLASS <id> <name>                      (n_classes lines)
//! <sample_id> <label_id> <train|test> <d_v_raw floats> <d_a_raw floats>
//! ```
//!
//! Floats are written with 17 significant digits, which round-trips every
//! finite `f64` exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{ClassLabel, Dataset, MultimodalSample, Split};
use crate::error::{Error, Result};

const MAGIC: &str = "MCILFEAT";
const VERSION: &str = "v1";

pub fn write_features(dataset: &Dataset, out: &mut impl Write) -> Result<()> {
    writeln!(
        out,
        "{MAGIC} {VERSION} {} {} {} {}",
        dataset.samples().len(),
        dataset.visual_dim(),
        dataset.audio_dim(),
        dataset.num_classes()
    )?;
    for c in dataset.classes() {
        writeln!(out, "CLASS {} {}", c.id, c.name)?;
    }
    for s in dataset.samples() {
        write!(out, "{} {} {}", s.sample_id, s.label, s.split.as_str())?;
        for z in s.visual.iter().chain(&s.audio) {
            write!(out, " {z:.16e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn save_precomputed(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_features(dataset, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_precomputed(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("cannot open: {e}"),
    })?;
    read_features(BufReader::new(file), path)
}

fn parse<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> std::result::Result<T, String> {
    let tok = tok.ok_or_else(|| format!("missing {what}"))?;
    tok.parse().map_err(|_| format!("bad {what} '{tok}'"))
}

/// Parses a feature file; `origin` is only used in error messages.
pub fn read_features(reader: impl BufRead, origin: &Path) -> Result<Dataset> {
    let err = |line: usize, msg: String| Error::Ingest {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut lines = reader
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));

    let (hline, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let header = header?;
    let mut tok = header.split_whitespace();
    if tok.next() != Some(MAGIC) || tok.next() != Some(VERSION) {
        return Err(err(hline, format!("expected '{MAGIC} {VERSION}' header")));
    }
    let counts: std::result::Result<Vec<usize>, String> = ["n_samples", "d_v_raw", "d_a_raw", "n_classes"]
        .iter()
        .map(|what| parse(tok.next(), what))
        .collect();
    let [n_samples, dv, da, n_classes]: [usize; 4] = counts
        .map_err(|m| err(hline, format!("malformed header: {m}")))?
        .try_into()
        .expect("four fields");
    if tok.next().is_some() {
        return Err(err(hline, "malformed header: trailing fields".into()));
    }
    if dv == 0 || da == 0 {
        return Err(err(hline, "malformed header: dimensions must be positive".into()));
    }

    let mut classes = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| err(hline, format!("expected {n_classes} CLASS lines")))?;
        let line = line?;
        let mut tok = line.split_whitespace();
        if tok.next() != Some("CLASS") {
            return Err(err(ln, "expected a CLASS line".into()));
        }
        let id = parse(tok.next(), "class id").map_err(|m| err(ln, m))?;
        let name: String = parse(tok.next(), "class name").map_err(|m| err(ln, m))?;
        if tok.next().is_some() {
            return Err(err(ln, "class names may not contain whitespace".into()));
        }
        classes.push(ClassLabel { id, name });
    }

    let mut samples = Vec::with_capacity(n_samples);
    for (ln, line) in lines {
        let line = line?;
        let mut tok = line.split_whitespace();
        let row = samples.len() + 1;
        let ctx = |m: String| err(ln, format!("sample row {row}: {m}"));
        let sample_id = parse(tok.next(), "sample id").map_err(ctx)?;
        let label: usize = parse(tok.next(), "label id").map_err(ctx)?;
        if !classes.iter().any(|c| c.id == label) {
            return Err(ctx(format!("unknown label id {label}")));
        }
        let split = match tok.next() {
            Some("train") => Split::Train,
            Some("test") => Split::Test,
            other => return Err(ctx(format!("bad split {other:?}"))),
        };
        let values: std::result::Result<Vec<f64>, String> =
            tok.map(|t| parse(Some(t), "feature value")).collect();
        let mut values = values.map_err(ctx)?;
        if values.len() != dv + da {
            return Err(ctx(format!(
                "expected {} feature values ({dv} visual + {da} audio), found {}",
                dv + da,
                values.len()
            )));
        }
        let audio = values.split_off(dv);
        samples.push(MultimodalSample {
            sample_id,
            visual: values,
            audio,
            label,
            split,
        });
    }
    if samples.len() != n_samples {
        return Err(err(
            hline,
            format!("header declares {n_samples} samples, file holds {}", samples.len()),
        ));
    }
    Dataset::new(samples, classes, dv, da).map_err(|e| err(hline, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_synthetic, SyntheticConfig};

    const SMALL: &str = "MCILFEAT v1 4 2 1 2
CLASS 0 dog
CLASS 1 rain
0 0 train 1.0 2.0 3.0
1 0 test 1.5 2.5 3.5
2 1 train -1.0 0.0 0.5
3 1 test -1.5 0.25 0.75
";

    fn read(s: &str) -> Result<Dataset> {
        read_features(s.as_bytes(), Path::new("mem"))
    }

    #[test]
    fn reads_small_file() {
        let ds = read(SMALL).unwrap();
        assert_eq!(ds.samples().len(), 4);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.sample(3).unwrap().audio, vec![0.75]);
    }

    #[test]
    fn short_row_names_the_row() {
        let bad = SMALL.replace("2 1 train -1.0 0.0 0.5", "2 1 train -1.0 0.5");
        let e = read(&bad).unwrap_err().to_string();
        assert!(e.contains("sample row 3"), "{e}");
        assert!(e.contains("line 6"), "{e}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(read("MCILFEAT v2 0 1 1 0\n").is_err());
        assert!(read("MCILFEAT v1 4 x 1 2\n").is_err());
        let unknown = SMALL.replace("3 1 test", "3 7 test");
        assert!(read(&unknown).unwrap_err().to_string().contains("unknown label"));
        let missing = load_precomputed(Path::new("/nonexistent/features.txt"));
        assert!(matches!(missing, Err(Error::Ingest { .. })));
        let count = SMALL.replace("MCILFEAT v1 4", "MCILFEAT v1 5");
        assert!(read(&count).is_err());
    }

    #[test]
    fn synthetic_round_trip_is_bit_exact() {
        let ds = generate_synthetic(&SyntheticConfig {
            classes: 3,
            samples_per_class: 10,
            visual_dim: 5,
            audio_dim: 7,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        save_precomputed(&ds, &path).unwrap();
        let back = load_precomputed(&path).unwrap();
        assert!(ds.bit_identical(&back));
        assert_eq!(ds, back);
    }

    proptest::proptest! {
        #[test]
        fn float_text_round_trip(v in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 1..6)) {
            let classes = vec![ClassLabel { id: 0, name: "a".into() }];
            let samples = vec![
                MultimodalSample { sample_id: 0, visual: v.clone(), audio: v.clone(), label: 0, split: Split::Train },
                MultimodalSample { sample_id: 1, visual: v.clone(), audio: v.clone(), label: 0, split: Split::Test },
            ];
            let ds = Dataset::new(samples, classes, v.len(), v.len()).unwrap();
            let mut buf = Vec::new();
            write_features(&ds, &mut buf).unwrap();
            let back = read_features(buf.as_slice(), Path::new("mem")).unwrap();
            proptest::prop_assert!(ds.bit_identical(&back));
        }
    }
}
