//! Flat `key=value` files. Blank lines and lines starting with `#` are
//! skipped; whitespace around keys and values is trimmed.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::TrainConfig;

use super::{parse_error, read_text, write_atomic};

/// Entries with their 1-based line numbers. Duplicate keys are rejected.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(String, String, usize)>> {
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(parse_error(path, i + 1, format!("expected key=value, found `{line}`")));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(parse_error(path, i + 1, "empty key"));
        }
        if let Some((_, _, first)) = out.iter().find(|(k, _, _)| k == key) {
            return Err(parse_error(path, i + 1, format!("`{key}` already set on line {first}")));
        }
        out.push((key.to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<Vec<(String, String, usize)>> {
    parse_key_values(&read_text(path)?, path)
}

pub fn write_key_values(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    for (k, v) in pairs {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::invalid(format!("cannot write `{k}` as a key=value line")));
        }
    }
    write_atomic(path, |w| {
        for (k, v) in pairs {
            writeln!(w, "{k}={v}")?;
        }
        Ok(())
    })
}

/// Applies the keys of a config file on top of `base`. Unknown keys and
/// values of the wrong type are errors carrying the line number.
pub fn load_train_config(path: &Path, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    for (k, v, line) in read_key_values(path)? {
        cfg.set(&k, &v).map_err(|e| parse_error(path, line, e.to_string()))?;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_reports_lines() {
        let p = Path::new("c.cfg");
        let kv = parse_key_values("# comment\n\n lr = 0.5 \nmode=unsupervised\n", p).unwrap();
        assert_eq!(kv, vec![("lr".into(), "0.5".into(), 3), ("mode".into(), "unsupervised".into(), 4)]);
        let e = parse_key_values("a=1\nnonsense\n", p).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(parse_key_values("a=1\na=2\n", p).is_err());
    }

    #[test]
    fn file_overrides_defaults_and_mismatches_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.cfg");
        std::fs::write(&p, "epochs = 3\n# note\nlr=0.002\n").unwrap();
        let cfg = load_train_config(&p, TrainConfig::default()).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr, 0.002);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
        std::fs::write(&p, "epochs=3\nepochs_typo=1\n").unwrap();
        assert!(load_train_config(&p, TrainConfig::default()).unwrap_err().to_string().contains("line 2"));
        std::fs::write(&p, "epochs=three\n").unwrap();
        assert!(load_train_config(&p, TrainConfig::default()).unwrap_err().to_string().contains("line 1"));
    }

    #[test]
    fn written_pairs_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.cfg");
        let pairs = TrainConfig::default().to_pairs();
        write_key_values(&p, &pairs).unwrap();
        let back: Vec<(String, String)> = read_key_values(&p).unwrap().into_iter().map(|(k, v, _)| (k, v)).collect();
        assert_eq!(back, pairs);
        assert_eq!(load_train_config(&p, TrainConfig::default()).unwrap(), TrainConfig::default());
    }
}
