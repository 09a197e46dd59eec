//! On-disk dataset layout.
//!
//! ```text
//! <root>/<name>/rgb/000000.png     8-bit RGB
//! <root>/<name>/depth/000000.png   16-bit grayscale
//! <root>/<name>/tir/000000.png     16-bit grayscale
//! <root>/<name>/groundtruth.txt
//! ```
//!
//! `groundtruth.txt` holds one `x,y,w,h` line per frame when the annotation is
//! dense, or `index:x,y,w,h` lines when it is sparse.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, Array3};

use super::{BoundingBox, Image, Sequence, TriModalFrame};
use crate::error::{Error, Result};

const MODALITIES: [&str; 3] = ["rgb", "depth", "tir"];

/// Parses a groundtruth file body. Line numbers in errors are 1-based.
pub fn parse_groundtruth(text: &str) -> Result<BTreeMap<usize, BoundingBox>> {
    let mut out = BTreeMap::new();
    let mut sparse: Option<bool> = None;
    let mut dense_index = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let is_sparse = line.contains(':');
        match sparse {
            None => sparse = Some(is_sparse),
            Some(s) if s != is_sparse => {
                return Err(Error::Parse {
                    line: lineno,
                    reason: "mixed dense and indexed lines".into(),
                })
            }
            _ => {}
        }
        let (index, body) = if is_sparse {
            let (idx, body) = line.split_once(':').expect("checked above");
            let idx = idx.trim().parse::<usize>().map_err(|e| Error::Parse {
                line: lineno,
                reason: format!("bad frame index `{idx}`: {e}"),
            })?;
            (idx, body)
        } else {
            (dense_index, line)
        };
        dense_index += 1;
        let bbox = body.parse::<BoundingBox>().map_err(|e| Error::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        if out.insert(index, bbox).is_some() {
            return Err(Error::Parse {
                line: lineno,
                reason: format!("frame {index} annotated twice"),
            });
        }
    }
    Ok(out)
}

/// Formats annotations, dense when every one of `n_frames` frames is present.
pub fn format_groundtruth(annotations: &BTreeMap<usize, BoundingBox>, n_frames: usize) -> String {
    let dense = annotations.len() == n_frames && annotations.keys().copied().eq(0..n_frames);
    let mut s = String::new();
    for (i, b) in annotations {
        if dense {
            s.push_str(&format!("{b}\n"));
        } else {
            s.push_str(&format!("{i}:{b}\n"));
        }
    }
    s
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn load_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = px[c] as f32 / 255.0;
        }
    }
    Ok(Image::from_array(data))
}

fn load_gray(path: &Path) -> Result<Image> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let mut plane = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        plane[[y as usize, x as usize]] = px[0] as f32 / 65535.0;
    }
    Ok(Image::from_plane(plane))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn save_rgb(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = img.size();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([to_u8(img.get(0, y, x)), to_u8(img.get(1, y, x)), to_u8(img.get(2, y, x))])
    });
    out.save(path)?;
    Ok(())
}

/// Writes a single-channel image as 16-bit grayscale PNG.
fn save_gray(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = img.size();
    let out: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u16(img.get(0, y as usize, x as usize))]));
    out.save(path)?;
    Ok(())
}

/// Loads a PNG as a three-channel image if it has colour, otherwise as a
/// single-channel one.
pub fn load_image(path: &Path) -> Result<Image> {
    if image::open(path)?.color().has_color() {
        load_rgb(path)
    } else {
        load_gray(path)
    }
}

/// Writes 8-bit RGB for three channels, 16-bit grayscale for one.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    match img.channels() {
        3 => save_rgb(img, path),
        1 => save_gray(img, path),
        c => Err(Error::Argument(format!("cannot save a {c}-channel image"))),
    }
}

/// Loads `<root>/<name>` in the layout described at module level.
pub fn load_sequence(root: impl AsRef<Path>, name: &str) -> Result<Sequence> {
    let dir = root.as_ref().join(name);
    if !dir.is_dir() {
        return Err(Error::Load {
            path: dir,
            reason: "sequence directory does not exist".into(),
        });
    }
    let mut per_modality = Vec::with_capacity(3);
    for m in MODALITIES {
        let sub = dir.join(m);
        if !sub.is_dir() {
            return Err(Error::Alignment(format!(
                "modality folder `{m}/` missing in {}",
                dir.display()
            )));
        }
        per_modality.push(frame_files(&sub)?);
    }
    let n = per_modality[0].len();
    for (m, files) in MODALITIES.iter().zip(&per_modality) {
        if files.len() != n {
            return Err(Error::Alignment(format!(
                "`{m}/` has {} frames but `rgb/` has {n}",
                files.len()
            )));
        }
    }
    if n == 0 {
        return Err(Error::Load {
            path: dir.join("rgb"),
            reason: "no frames".into(),
        });
    }

    let gt_path = dir.join("groundtruth.txt");
    let text = fs::read_to_string(&gt_path).map_err(|e| Error::Load {
        path: gt_path.clone(),
        reason: e.to_string(),
    })?;
    let annotations = parse_groundtruth(&text)?;
    if let Some((&i, _)) = annotations.range(n..).next_back() {
        return Err(Error::Alignment(format!(
            "groundtruth annotates frame {i} but only {n} frames exist"
        )));
    }

    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let rgb = load_rgb(&per_modality[0][i])?;
        let depth = load_gray(&per_modality[1][i])?;
        let tir = load_gray(&per_modality[2][i])?;
        frames.push(TriModalFrame::new(rgb, depth, tir, i)?);
    }
    Sequence::new(name, frames, annotations)
}

/// Names of the sequence directories under `root`, sorted. A directory
/// counts when it holds a `groundtruth.txt`.
pub fn list_sequences(root: impl AsRef<Path>) -> Result<Vec<String>> {
    let root = root.as_ref();
    let entries = fs::read_dir(root).map_err(|e| Error::Load {
        path: root.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("groundtruth.txt").is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    Ok(names)
}

/// Writes `seq` to `<root>/<seq.name>`, creating directories as needed.
pub fn save_sequence(seq: &Sequence, root: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = root.as_ref().join(&seq.name);
    for m in MODALITIES {
        fs::create_dir_all(dir.join(m))?;
    }
    for (i, f) in seq.frames.iter().enumerate() {
        let file = format!("{i:06}.png");
        save_rgb(&f.rgb, &dir.join("rgb").join(&file))?;
        save_gray(&f.depth, &dir.join("depth").join(&file))?;
        save_gray(&f.tir, &dir.join("tir").join(&file))?;
    }
    fs::write(
        dir.join("groundtruth.txt"),
        format_groundtruth(&seq.annotations, seq.len()),
    )?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_and_sparse_groundtruth() {
        let dense = parse_groundtruth("1,2,3,4\n5,6,7,8\n").unwrap();
        assert_eq!(dense.len(), 2);
        assert_eq!(dense[&1], BoundingBox::new(5.0, 6.0, 7.0, 8.0).unwrap());
        assert_eq!(format_groundtruth(&dense, 2), "1,2,3,4\n5,6,7,8\n");

        let sparse = parse_groundtruth("0:1,2,3,4\n17:5,6,7,8\n").unwrap();
        assert_eq!(sparse.keys().copied().collect::<Vec<_>>(), vec![0, 17]);
        assert_eq!(format_groundtruth(&sparse, 20), "0:1,2,3,4\n17:5,6,7,8\n");
    }

    #[test]
    fn zero_width_line_reports_line_number() {
        match parse_groundtruth("1,2,3,4\n10,20,0,30\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mixed_formats_rejected() {
        assert!(matches!(
            parse_groundtruth("1,2,3,4\n3:1,2,3,4\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
