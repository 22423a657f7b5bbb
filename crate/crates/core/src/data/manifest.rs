//! Plain-text dataset manifests.
//!
//! One block per sequence, blocks separated by blank lines:
//!
//! ```text
//! # comment
//! frame scene/a.ppm 0.25
//! frame scene/b.ppm 1
//! frame scene/c.ppm 4
//! ref 1
//! gt scene/gt.pfm
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::imageio::read_image;
use super::ExposureSequence;
use crate::error::{Error, Result};

/// A sequence listed in a manifest; pixels are read by [`SequenceDescriptor::load`].
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDescriptor {
    pub name: String,
    pub frames: Vec<(PathBuf, f64)>,
    pub ref_index: usize,
    pub gt: Option<PathBuf>,
}

impl SequenceDescriptor {
    pub fn load(&self) -> Result<ExposureSequence> {
        let frames = self
            .frames
            .iter()
            .map(|(p, _)| read_image(p))
            .collect::<Result<Vec<_>>>()?;
        let times = self.frames.iter().map(|(_, t)| *t).collect();
        let gt = self.gt.as_deref().map(read_image).transpose()?;
        ExposureSequence::new(frames, times, self.ref_index, gt)
    }
}

#[derive(Default)]
struct Block {
    first_line: usize,
    frames: Vec<(PathBuf, f64)>,
    ref_index: Option<usize>,
    gt: Option<PathBuf>,
}

fn manifest_err(line: usize, detail: impl Into<String>) -> Error {
    Error::Manifest {
        line,
        detail: detail.into(),
    }
}

fn resolve(base: &Path, raw: &str, line: usize) -> Result<PathBuf> {
    let p = Path::new(raw);
    let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if !full.is_file() {
        return Err(manifest_err(line, format!("file not found: {}", full.display())));
    }
    Ok(full)
}

fn finish(block: Block, index: usize) -> Result<SequenceDescriptor> {
    let line = block.first_line;
    if block.frames.is_empty() {
        return Err(manifest_err(line, "sequence has no frames"));
    }
    let ref_index = block
        .ref_index
        .ok_or_else(|| manifest_err(line, "sequence has no `ref` line"))?;
    if ref_index >= block.frames.len() {
        return Err(manifest_err(
            line,
            format!("ref {} out of range for {} frames", ref_index, block.frames.len()),
        ));
    }
    let name = block.frames[0]
        .0
        .parent()
        .and_then(Path::file_name)
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .unwrap_or_else(|| format!("seq{:03}", index));
    Ok(SequenceDescriptor {
        name,
        frames: block.frames,
        ref_index,
        gt: block.gt,
    })
}

/// Parse manifest text; `base` is the directory relative paths start from.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<SequenceDescriptor>> {
    let mut out = Vec::new();
    let mut block: Option<Block> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            if let Some(b) = block.take() {
                out.push(finish(b, out.len())?);
            }
            continue;
        }
        let b = block.get_or_insert_with(|| Block {
            first_line: line_no,
            ..Block::default()
        });
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["frame", path, secs] => {
                let t: f64 = secs
                    .parse()
                    .map_err(|_| manifest_err(line_no, format!("bad exposure time `{}`", secs)))?;
                if !(t > 0.0 && t.is_finite()) {
                    return Err(manifest_err(
                        line_no,
                        format!("exposure time must be positive, got {}", secs),
                    ));
                }
                b.frames.push((resolve(base, path, line_no)?, t));
            }
            ["ref", idx] => {
                if b.ref_index.is_some() {
                    return Err(manifest_err(line_no, "duplicate `ref` line"));
                }
                let r = idx
                    .parse()
                    .map_err(|_| manifest_err(line_no, format!("bad reference index `{}`", idx)))?;
                b.ref_index = Some(r);
            }
            ["gt", path] => {
                if b.gt.is_some() {
                    return Err(manifest_err(line_no, "duplicate `gt` line"));
                }
                b.gt = Some(resolve(base, path, line_no)?);
            }
            [kw @ ("frame" | "ref" | "gt"), ..] => {
                return Err(manifest_err(line_no, format!("wrong number of fields for `{}`", kw)));
            }
            [other, ..] => return Err(manifest_err(line_no, format!("unknown keyword `{}`", other))),
            [] => unreachable!("blank lines handled above"),
        }
    }
    if let Some(b) = block.take() {
        out.push(finish(b, out.len())?);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<SequenceDescriptor>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

/// Write descriptors as a manifest, with paths relative to the manifest's
/// directory where possible.
pub fn write_manifest(path: &Path, sequences: &[SequenceDescriptor]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let rel = |p: &Path| -> String { p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned() };
    let mut text = String::new();
    for (i, seq) in sequences.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        for (p, t) in &seq.frames {
            writeln!(text, "frame {} {}", rel(p), t).expect("write to string");
        }
        writeln!(text, "ref {}", seq.ref_index).expect("write to string");
        if let Some(gt) = &seq.gt {
            writeln!(text, "gt {}", rel(gt)).expect("write to string");
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str) {
        let p = dir.join(name);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, b"").unwrap();
    }

    #[test]
    fn parses_blocks_and_names() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["s1/a.ppm", "s1/b.ppm", "s1/gt.pfm", "s2/x.ppm"] {
            touch(dir.path(), f);
        }
        let text =
            "# two sequences\nframe s1/a.ppm 0.5\nframe s1/b.ppm 2\nref 1\ngt s1/gt.pfm\n\n\nframe s2/x.ppm 1\nref 0\n";
        let seqs = parse_manifest(text, dir.path()).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].name, "s1");
        assert_eq!(seqs[0].frames[1].1, 2.0);
        assert_eq!(seqs[0].frames[0].0, dir.path().join("s1/a.ppm"));
        assert!(seqs[0].gt.is_some());
        assert_eq!(seqs[1].ref_index, 0);
        assert!(seqs[1].gt.is_none());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.ppm");
        let line_of = |text: &str| match parse_manifest(text, dir.path()) {
            Err(Error::Manifest { line, .. }) => line,
            other => panic!("expected manifest error, got {:?}", other),
        };
        assert_eq!(line_of("frame a.ppm 1\n"), 1);
        assert_eq!(line_of("frame a.ppm 1\nframe a.ppm 0\nref 0\n"), 2);
        assert_eq!(line_of("frame a.ppm -1\n"), 1);
        assert_eq!(line_of("frame a.ppm 1\nframe missing.ppm 2\nref 0\n"), 2);
        assert_eq!(line_of("frame a.ppm 1\nexposure 3\n"), 2);
        assert_eq!(line_of("frame a.ppm 1\nref 4\n"), 1);
        assert_eq!(line_of("frame a.ppm\n"), 1);
    }

    #[test]
    fn written_manifest_parses_back() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "s/a.ppm");
        touch(dir.path(), "s/gt.pfm");
        let seq = SequenceDescriptor {
            name: "s".into(),
            frames: vec![(dir.path().join("s/a.ppm"), 0.1 + 0.2)],
            ref_index: 0,
            gt: Some(dir.path().join("s/gt.pfm")),
        };
        let path = dir.path().join("manifest.txt");
        write_manifest(&path, std::slice::from_ref(&seq)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("frame s/a.ppm "));
        assert_eq!(load_manifest(&path).unwrap(), vec![seq]);
    }
}
