//! Small shared pieces for the file formats the toolkit emits.
//!
//! Every output file starts with a `#`-prefixed metadata block carrying the
//! tool version, a hash of the effective configuration and the seed, so any
//! artifact can be traced back to the invocation that produced it. Numbers
//! are written with the shortest round-trip decimal representation (Rust's
//! `Display` for floats), making CSV files bit-faithful on reload.

use std::fmt::Display;
use std::io::{self, BufRead, Write};

/// Provenance header carried by every output file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileMeta {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: Option<u64>,
}

impl FileMeta {
    pub fn new(config_hash: impl Into<String>) -> Self {
        FileMeta {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.into(),
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

impl Default for FileMeta {
    fn default() -> Self {
        FileMeta::new("unhashed")
    }
}

/// Writes the `#` metadata block: tool version, config hash, seed and any
/// caller-provided extras, one `# key=value` line each.
pub fn write_meta_lines<W: Write>(
    w: &mut W,
    meta: &FileMeta,
    extra: &[(&str, String)],
) -> io::Result<()> {
    writeln!(w, "# tool_version={}", meta.tool_version)?;
    writeln!(w, "# config_hash={}", meta.config_hash)?;
    if let Some(seed) = meta.seed {
        writeln!(w, "# seed={seed}")?;
    }
    for (k, v) in extra {
        writeln!(w, "# {k}={v}")?;
    }
    Ok(())
}

/// Shortest round-trip decimal form of a scalar.
pub fn fmt_scalar<T: Display>(v: T) -> String {
    format!("{v}")
}

/// Reads all non-metadata lines of a CSV stream (skips `#` lines and blanks).
pub fn read_csv_lines<R: BufRead>(r: R) -> io::Result<Vec<String>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(trimmed.to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1f64, 1.0 / 3.0, 2e-300, -5.5, f64::MAX] {
            let s = fmt_scalar(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn meta_block_shape() {
        let mut buf = Vec::new();
        let meta = FileMeta::new("abc").with_seed(7);
        write_meta_lines(&mut buf, &meta, &[("family", "example3".into())]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("# config_hash=abc"));
        assert!(text.contains("# seed=7"));
        assert!(text.contains("# family=example3"));
    }

    #[test]
    fn csv_reader_skips_meta() {
        let data = "# a=1\nk,z\n1,2\n\n# trailing\n2,3\n";
        let lines = read_csv_lines(data.as_bytes()).unwrap();
        assert_eq!(lines, vec!["k,z", "1,2", "2,3"]);
    }
}
