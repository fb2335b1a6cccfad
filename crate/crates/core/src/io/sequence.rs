use std::path::{Path, PathBuf};

use super::{read_pgm, read_ppm, ImageFrame, LabelMask, ObjectSet};
use crate::{Error, Result};

/// A loaded video: ordered frames plus the first-frame annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<ImageFrame>,
    pub first_mask: LabelMask,
    pub objects: ObjectSet,
}

/// Files in `dir` with the given extension, in lexicographic order.
pub fn list_files(dir: &Path, extension: &str) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == extension) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn load_sequence(frame_dir: impl AsRef<Path>, first_mask: impl AsRef<Path>) -> Result<Sequence> {
    let frame_dir = frame_dir.as_ref();
    let mask_path = first_mask.as_ref();
    let files = list_files(frame_dir, "ppm")?;
    if files.is_empty() {
        return Err(Error::format(frame_dir, "no .ppm frames found"));
    }
    let mut frames = Vec::with_capacity(files.len());
    for path in &files {
        let frame = read_ppm(path)?;
        if let Some(first) = frames.first() {
            let first: &ImageFrame = first;
            if (first.width(), first.height()) != (frame.width(), frame.height()) {
                return Err(Error::format(
                    path,
                    format!(
                        "frame size {}x{} differs from first frame {}x{}",
                        frame.width(),
                        frame.height(),
                        first.width(),
                        first.height()
                    ),
                ));
            }
        }
        frames.push(frame);
    }
    let mask = read_pgm(mask_path)?;
    if (mask.width(), mask.height()) != (frames[0].width(), frames[0].height()) {
        return Err(Error::format(
            mask_path,
            format!(
                "mask/frame size mismatch: mask {}x{}, frame {}x{}",
                mask.width(),
                mask.height(),
                frames[0].width(),
                frames[0].height()
            ),
        ));
    }
    let objects = ObjectSet::from_mask(&mask).map_err(|e| Error::format(mask_path, e.to_string()))?;
    Ok(Sequence {
        frames,
        first_mask: mask,
        objects,
    })
}
