use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DatasetError, DatasetIndex, Frame, Label, SampleRef, SubProtocol, VideoSample};
use crate::modality::{ModalityId, PerModality};

/// Manifest file name written by the synthetic generator.
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Compares strings treating digit runs as numbers (`2.png` < `10.png`).
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut a, mut b) = (a.as_bytes(), b.as_bytes());
    loop {
        match (a.first(), b.first()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) if x.is_ascii_digit() && y.is_ascii_digit() => {
                let da = a.iter().take_while(|c| c.is_ascii_digit()).count();
                let db = b.iter().take_while(|c| c.is_ascii_digit()).count();
                let strip = |s: &[u8]| {
                    let z = s.iter().take_while(|&&c| c == b'0').count();
                    s[z..].to_vec()
                };
                let (na, nb) = (strip(&a[..da]), strip(&b[..db]));
                let ord = na.len().cmp(&nb.len()).then_with(|| na.cmp(&nb)).then(da.cmp(&db));
                if ord != Ordering::Equal {
                    return ord;
                }
                a = &a[da..];
                b = &b[db..];
            }
            (Some(x), Some(y)) => {
                if x != y {
                    return x.cmp(y);
                }
                a = &a[1..];
                b = &b[1..];
            }
        }
    }
}

fn list_frames(dir: &Path) -> Result<Vec<String>, DatasetError> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| DatasetError::io(dir, e))? {
        let entry = entry.map_err(|e| DatasetError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let is_png = Path::new(&name)
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort_by(|a, b| natural_cmp(a, b));
    Ok(names)
}

/// Lists and cross-checks the frame files of one sample directory.
fn scan_sample(sample_id: &str, root: &Path) -> Result<Vec<String>, DatasetError> {
    let mut listing = Vec::with_capacity(3);
    for m in ModalityId::ALL {
        let dir = root.join(m.as_str());
        if !dir.is_dir() {
            return Err(DatasetError::MissingModalityDir {
                sample: sample_id.to_string(),
                modality: m,
            });
        }
        listing.push(list_frames(&dir)?);
    }
    let (rgb, depth, ir) = (&listing[0], &listing[1], &listing[2]);
    if rgb.len() != depth.len() || rgb.len() != ir.len() {
        return Err(DatasetError::FrameCountMismatch {
            sample: sample_id.to_string(),
            rgb: rgb.len(),
            depth: depth.len(),
            ir: ir.len(),
        });
    }
    for (m, names) in [(ModalityId::Depth, depth), (ModalityId::Ir, ir)] {
        if names != rgb {
            return Err(DatasetError::FrameNameMismatch {
                sample: sample_id.to_string(),
                modality: m,
            });
        }
    }
    if rgb.is_empty() {
        return Err(DatasetError::NoFrames(sample_id.to_string()));
    }
    Ok(listing.swap_remove(0))
}

/// Reads a manifest; sample directories resolve relative to the manifest's directory.
pub fn load_manifest(manifest_path: &Path) -> Result<DatasetIndex, DatasetError> {
    let text = fs::read_to_string(manifest_path).map_err(|e| DatasetError::io(manifest_path, e))?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(DatasetError::MalformedLine {
                line: line_no,
                reason: format!("expected `<dir> <label>`, found {} tokens", tokens.len()),
            });
        }
        let label = Label::from_digit(tokens[1]).ok_or_else(|| DatasetError::MalformedLine {
            line: line_no,
            reason: format!("label must be 0 or 1, found `{}`", tokens[1]),
        })?;
        let sample_id = tokens[0].to_string();
        let root_path = base.join(&sample_id);
        let frames = scan_sample(&sample_id, &root_path)?;
        let sub_protocol = Path::new(&sample_id)
            .components()
            .next()
            .and_then(|c| c.as_os_str().to_str())
            .and_then(|s| s.parse::<SubProtocol>().ok());
        samples.push(SampleRef {
            sample_id,
            root_path,
            label,
            sub_protocol,
            frame_count: frames.len(),
        });
    }
    DatasetIndex::new(samples)
}

fn decode(path: &Path, modality: ModalityId) -> Result<Frame, DatasetError> {
    let img = image::open(path).map_err(|e| DatasetError::DecodeError {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(match modality {
        ModalityId::Rgb => Frame::new(w, h, 3, img.to_rgb8().into_raw()),
        ModalityId::Depth | ModalityId::Ir => Frame::new(w, h, 1, img.to_luma8().into_raw()),
    })
}

/// Decodes all frames of a sample in natural filename order.
pub fn load_video(sample: &SampleRef) -> Result<VideoSample, DatasetError> {
    let names = scan_sample(&sample.sample_id, &sample.root_path)?;
    let mut frames: PerModality<Vec<Frame>> = PerModality::from_fn(|_| Vec::with_capacity(names.len()));
    for m in ModalityId::ALL {
        let dir: PathBuf = sample.modality_dir(m);
        for name in &names {
            frames[m].push(decode(&dir.join(name), m)?);
        }
    }
    Ok(VideoSample {
        sample: SampleRef {
            frame_count: names.len(),
            ..sample.clone()
        },
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn natural_order() {
        let mut v = vec!["10.png", "2.png", "001.png", "1.png", "a.png"];
        v.sort_by(|a, b| natural_cmp(a, b));
        assert_eq!(v, ["1.png", "001.png", "2.png", "10.png", "a.png"]);
    }
}
