use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tokenize, AttributeSpace, Dataset, Record, Split};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    user: String,
    item: String,
    attribute: String,
    rating: f64,
    explanation: String,
}

pub const SPLIT_FILES: [(Split, &str); 3] = [
    (Split::Train, "train.jsonl"),
    (Split::Valid, "valid.jsonl"),
    (Split::Test, "test.jsonl"),
];

/// Writes one flat JSON object per line.
pub fn save_records<'a>(path: &Path, records: impl IntoIterator<Item = &'a Record>) -> Result<()> {
    let tmp = crate::artifact::temp_path(path);
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        for r in records {
            let line = Line {
                user: r.user.clone(),
                item: r.item.clone(),
                attribute: r.attribute.clone(),
                rating: r.rating,
                explanation: r.explanation.join(" "),
            };
            serde_json::to_writer(&mut w, &line).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads and validates records; errors carry the 1-based line number.
pub fn load_records(path: &Path, space: &AttributeSpace) -> Result<Vec<Record>> {
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let raw: Line = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let record = Record {
            user: raw.user,
            item: raw.item,
            attribute: raw.attribute,
            rating: raw.rating,
            explanation: tokenize(&raw.explanation),
        };
        record.validate(space).map_err(|e| parse_err(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

/// Writes `train.jsonl`, `valid.jsonl` and `test.jsonl` under `dir`.
pub fn save_dir(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (split, name) in SPLIT_FILES {
        save_records(&dir.join(name), dataset.split_records(split))?;
    }
    Ok(())
}

pub fn load_dir(dir: &Path, space: &AttributeSpace) -> Result<Dataset> {
    let mut parts = Vec::new();
    for (_, name) in SPLIT_FILES {
        parts.push(load_records(&dir.join(name), space)?);
    }
    let test = parts.pop().expect("three");
    let valid = parts.pop().expect("three");
    let train = parts.pop().expect("three");
    Dataset::from_splits(train, valid, test, space.clone())
}

/// One token per line; blank lines ignored; tokens are lowercased.
pub fn load_lexicon(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::space;

    #[test]
    fn missing_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(
            &p,
            "{\"user\":\"u\",\"item\":\"i\",\"attribute\":\"male\",\"rating\":3,\"explanation\":\"ok\"}\n{\"user\":\"u\",\"item\":\"i\",\"rating\":3,\"explanation\":\"ok\"}\n",
        )
        .unwrap();
        let err = load_records(&p, &space()).unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("attribute"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_rating_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(
            &p,
            "{\"user\":\"u\",\"item\":\"i\",\"attribute\":\"male\",\"rating\":7,\"explanation\":\"ok\"}\n",
        )
        .unwrap();
        let err = load_records(&p, &space()).unwrap_err().to_string();
        assert!(err.contains("outside [1, 5]"), "{err}");
    }

    #[test]
    fn explanation_is_tokenized_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(
            &p,
            "{\"user\":\"u\",\"item\":\"i\",\"attribute\":\"female\",\"rating\":5,\"explanation\":\"Great game!\"}\n",
        )
        .unwrap();
        let recs = load_records(&p, &space()).unwrap();
        assert_eq!(recs[0].explanation, vec!["great", "game", "!"]);
    }

    #[test]
    fn lexicon_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lex.txt");
        fs::write(&p, "Graphics\n\nsound\n").unwrap();
        let lex = load_lexicon(&p).unwrap();
        assert_eq!(lex.into_iter().collect::<Vec<_>>(), vec!["graphics", "sound"]);
    }
}
