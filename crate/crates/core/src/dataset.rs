//! Dataset manifests: one JSON object per line pointing at an image PNG and
//! its mask PNG, with paths relative to the manifest file.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, RegionMask};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub defect_type: String,
    pub background_id: String,
    pub seed: u64,
}

/// An entry with its files loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub entry: ManifestEntry,
    pub image: Image,
    pub mask: RegionMask,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|source| Error::Manifest {
            path: path.to_owned(),
            line: i + 1,
            source,
        })?;
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e).expect("manifest entries serialize");
        buf.push(b'\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn resolve(manifest: &Path, rel: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(rel)
}

pub fn load_sample(manifest: &Path, entry: &ManifestEntry) -> Result<Sample> {
    let image = Image::load_png(&resolve(manifest, &entry.image))?;
    let mask = RegionMask::load_png(&resolve(manifest, &entry.mask))?;
    if (mask.height(), mask.width()) != (image.height(), image.width()) {
        return Err(Error::shape(format!("{}: mask and image differ in size", entry.image)));
    }
    Ok(Sample { entry: entry.clone(), image, mask })
}

pub fn load_samples(manifest: &Path) -> Result<Vec<Sample>> {
    read_manifest(manifest)?.iter().map(|e| load_sample(manifest, e)).collect()
}

/// Writes `image` and `mask` under `dir` as `<stem>.png` and `<stem>_mask.png`
/// and returns the manifest entry relative to `dir`.
pub fn write_pair(
    dir: &Path,
    stem: &str,
    image: &Image,
    mask: &RegionMask,
    defect_type: &str,
    background_id: &str,
    seed: u64,
) -> Result<ManifestEntry> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (img_name, mask_name) = (format!("{stem}.png"), format!("{stem}_mask.png"));
    image.save_png(&dir.join(&img_name))?;
    mask.save_png(&dir.join(&mask_name))?;
    Ok(ManifestEntry {
        image: img_name,
        mask: mask_name,
        defect_type: defect_type.to_owned(),
        background_id: background_id.to_owned(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(16, 16, 3, |y, x, c| ((y + x + c) % 5) as f32 / 4.0).unwrap();
        let mask = RegionMask::from_fn(16, 16, |y, x| y < 4 && x < 9);
        let e = write_pair(&dir.path().join("set"), "a", &img, &mask, "stain", "bg3", 7).unwrap();
        let path = dir.path().join("set/manifest.jsonl");
        write_manifest(&path, std::slice::from_ref(&e)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"image\":\"a.png\",\"mask\":\"a_mask.png\",\"defect_type\":\"stain\",\"background_id\":\"bg3\",\"seed\":7}\n"
        );
        let s = load_samples(&path).unwrap();
        assert_eq!(s[0].image, img.quantized());
        assert_eq!(s[0].mask, mask);
    }

    #[test]
    fn bad_lines_report_their_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            "\n{\"image\":\"a\",\"mask\":\"b\",\"defect_type\":\"x\",\"background_id\":\"y\",\"seed\":1}\n{oops}\n",
        )
        .unwrap();
        match read_manifest(&path) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(
            &path,
            "{\"image\":\"a\",\"mask\":\"b\",\"defect_type\":\"x\",\"background_id\":\"y\",\"seed\":1,\"extra\":0}\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Manifest { .. })));
        assert!(matches!(read_manifest(&dir.path().join("none")), Err(Error::Io { .. })));
    }
}
