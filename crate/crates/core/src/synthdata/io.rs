//! Bit-exact dataset IO: binary PPM (P6) / PGM (P5) images, one JSON
//! sidecar per sample, and a top-level manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BinImage, GenSpec, GlyphCrop, PosterSample, RgbImage};
use crate::error::{Error, Result};

/// `maxval` is always 255 in this format.
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    bytes.extend_from_slice(&img.data);
    atomic_write(path, &bytes)
}

pub fn write_pgm(path: &Path, img: &BinImage) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.w, img.h).into_bytes();
    bytes.extend(img.data.iter().map(|&v| if v != 0 { 255u8 } else { 0 }));
    atomic_write(path, &bytes)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct NetpbmHeader {
    w: usize,
    h: usize,
    data_start: usize,
}

/// Parses "P6\n<w> <h>\n<maxval>\n" style headers, tolerating any
/// whitespace runs between fields. Errors carry the byte offset.
fn parse_netpbm_header(path: &Path, bytes: &[u8], magic: &[u8]) -> Result<NetpbmHeader> {
    let err = |offset: usize, msg: String| Error::Parse {
        file: path.to_path_buf(),
        offset,
        msg,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(err(0, format!("expected magic {:?}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(err(start, "expected decimal field".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|_| err(start, format!("bad integer {text:?}")))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err(pos, "expected single whitespace before raster".into()));
    }
    pos += 1;
    if fields[2] != 255 {
        return Err(err(0, format!("maxval {} unsupported, need 255", fields[2])));
    }
    Ok(NetpbmHeader {
        w: fields[0],
        h: fields[1],
        data_start: pos,
    })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let hdr = parse_netpbm_header(path, &bytes, b"P6")?;
    let need = 3 * hdr.w * hdr.h;
    let raster = &bytes[hdr.data_start..];
    if raster.len() != need {
        return Err(Error::Parse {
            file: path.to_path_buf(),
            offset: hdr.data_start,
            msg: format!("raster holds {} bytes, expected {need}", raster.len()),
        });
    }
    Ok(RgbImage {
        h: hdr.h,
        w: hdr.w,
        data: raster.to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<BinImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let hdr = parse_netpbm_header(path, &bytes, b"P5")?;
    let need = hdr.w * hdr.h;
    let raster = &bytes[hdr.data_start..];
    if raster.len() != need {
        return Err(Error::Parse {
            file: path.to_path_buf(),
            offset: hdr.data_start,
            msg: format!("raster holds {} bytes, expected {need}", raster.len()),
        });
    }
    let mut data = Vec::with_capacity(need);
    for (i, &v) in raster.iter().enumerate() {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                return Err(Error::Parse {
                    file: path.to_path_buf(),
                    offset: hdr.data_start + i,
                    msg: format!("binary image byte must be 0 or 255, got {other}"),
                })
            }
        }
    }
    Ok(BinImage {
        h: hdr.h,
        w: hdr.w,
        data,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: GenSpec,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    seed: u64,
    prompt: String,
    crops: Vec<GlyphCrop>,
}

/// Writes samples under `dir`: a manifest, then one subdirectory per sample
/// holding PPM/PGM images plus a JSON sidecar.
pub fn write_dataset(dir: &Path, spec: &GenSpec, samples: &[PosterSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:05}");
        let sdir = dir.join(&name);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        write_ppm(&sdir.join("poster.ppm"), &s.poster)?;
        write_ppm(&sdir.join("style.ppm"), &s.style_image)?;
        write_ppm(&sdir.join("subject.ppm"), &s.subject_image)?;
        write_pgm(&sdir.join("subject_mask.pgm"), &s.subject_mask)?;
        write_pgm(&sdir.join("glyph.pgm"), &s.glyph_image)?;
        let meta = SampleMeta {
            seed: s.seed,
            prompt: s.prompt.clone(),
            crops: s.crops.clone(),
        };
        let meta_path = sdir.join("meta.json");
        atomic_write(&meta_path, serde_json::to_string_pretty(&meta)?.as_bytes())?;
        entries.push(ManifestEntry { dir: name, seed: s.seed });
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        samples: entries,
    };
    atomic_write(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads and validates every sample listed in the manifest.
pub fn read_dataset(dir: &Path) -> Result<(GenSpec, Vec<PosterSample>)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let sdir = dir.join(&entry.dir);
        let meta_path = sdir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: SampleMeta = serde_json::from_str(&text)?;
        let sample = PosterSample {
            poster: read_ppm(&sdir.join("poster.ppm"))?,
            style_image: read_ppm(&sdir.join("style.ppm"))?,
            subject_image: read_ppm(&sdir.join("subject.ppm"))?,
            subject_mask: read_pgm(&sdir.join("subject_mask.pgm"))?,
            glyph_image: read_pgm(&sdir.join("glyph.pgm"))?,
            crops: meta.crops,
            prompt: meta.prompt,
            seed: meta.seed,
        };
        if sample.seed != entry.seed {
            return Err(Error::contract(format!(
                "{}: sidecar seed {} disagrees with manifest seed {}",
                meta_path.display(),
                sample.seed,
                entry.seed
            )));
        }
        sample.validate()?;
        samples.push(sample);
    }
    Ok((manifest.spec, samples))
}

/// Convenience path helper used by the CLI and tests.
pub fn dataset_dir_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|er| Error::io(dir, er))?;
        out.push(e.path());
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_sample, GenSpec};
    use super::*;

    #[test]
    fn ppm_header_is_exact() {
        let spec = GenSpec::default();
        let s = generate_sample(1, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("poster.ppm");
        write_ppm(&p, &s.poster).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = b"P6\n32 32\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 3072);
    }

    #[test]
    fn dataset_round_trip_is_structural_identity() {
        let spec = GenSpec::default();
        let samples: Vec<_> = (0..4).map(|s| generate_sample(s, &spec).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &spec, &samples).unwrap();
        let (spec2, loaded) = read_dataset(dir.path()).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(samples, loaded);
        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest.samples.len(), 4);
        // manifest count == sample directories on disk
        let dirs = dataset_dir_files(dir.path())
            .unwrap()
            .into_iter()
            .filter(|p| p.is_dir())
            .count();
        assert_eq!(dirs, manifest.samples.len());
    }

    #[test]
    fn corrupted_image_errors_name_file_and_offset() {
        let spec = GenSpec::default();
        let s = generate_sample(2, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        write_pgm(&p, &s.glyph_image).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = 7; // neither 0 nor 255
        std::fs::write(&p, &bytes).unwrap();
        let err = read_pgm(&p).unwrap_err();
        match err {
            crate::Error::Parse { file, offset, .. } => {
                assert_eq!(file, p);
                assert_eq!(offset, last);
            }
            other => panic!("unexpected error {other:?}"),
        }
        // truncated raster
        let p2 = dir.path().join("y.ppm");
        write_ppm(&p2, &s.poster).unwrap();
        let bytes = std::fs::read(&p2).unwrap();
        std::fs::write(&p2, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_ppm(&p2), Err(crate::Error::Parse { .. })));
    }

    #[test]
    fn write_is_byte_identical_across_runs() {
        let spec = GenSpec::default();
        let samples: Vec<_> = (0..2).map(|s| generate_sample(s, &spec).unwrap()).collect();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_dataset(d1.path(), &spec, &samples).unwrap();
        write_dataset(d2.path(), &spec, &samples).unwrap();
        for name in ["manifest.json", "sample_00000/poster.ppm", "sample_00001/meta.json"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }
}
