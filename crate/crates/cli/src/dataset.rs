//! Image-directory ingestion.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use latmark::Image;

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Sorted list of image files under one directory (not recursive).
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub paths: Vec<PathBuf>,
    pub resolution: usize,
    pub split: String,
}

impl DatasetManifest {
    pub fn scan(root: &Path, resolution: usize, split: &str) -> Result<Self> {
        let mut paths = Vec::new();
        for entry in std::fs::read_dir(root).with_context(|| format!("cannot read dataset directory {}", root.display()))? {
            let p = entry?.path();
            let ok = p
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            if p.is_file() && ok {
                paths.push(p);
            }
        }
        paths.sort();
        if paths.is_empty() {
            bail!("no images found in {}", root.display());
        }
        Ok(DatasetManifest { root: root.to_path_buf(), paths, resolution, split: split.to_string() })
    }

    pub fn load(&self) -> Result<Vec<Image>> {
        let mut resized = 0;
        let out = self
            .paths
            .iter()
            .map(|p| {
                let (img, changed) = load_at(p, self.resolution)?;
                resized += usize::from(changed);
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        if resized > 0 {
            log::info!("{resized} of {} {} images in {} resized to {r}x{r}", out.len(), self.split, self.root.display(), r = self.resolution);
        }
        Ok(out)
    }
}

/// Loads an image and resizes it to `res x res` when needed.
pub fn load_at(path: &Path, res: usize) -> Result<(Image, bool)> {
    let img = Image::load(path).with_context(|| format!("cannot load image {}", path.display()))?;
    if img.h == res && img.w == res {
        return Ok((img, false));
    }
    Ok((img.resize(res, res), true))
}
