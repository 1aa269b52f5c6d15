//! Dataset directory layout.
//!
//! ```text
//! <root>/cameras.toml          rig document with raster templates
//! <root>/points/<frame>.ply    initial point set of the first tracked frame
//! <root>/truth/<frame>.ply     optional ground-truth frames
//! ```
//!
//! Raster locations come from the templates in `cameras.toml`.

use std::path::{Path, PathBuf};

use crate::error::{EgsError, Result};
use crate::io::cameras::{read_cameras, CameraRig, LoadOptions};
use crate::io::ply::read_gaussian_ply;
use crate::model::GaussianFrame;

pub const CAMERAS_FILE: &str = "cameras.toml";

pub fn frame_file(dir: &Path, frame: u32) -> PathBuf {
    dir.join(format!("{frame:04}.ply"))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub rig: CameraRig,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(EgsError::InvalidInput(format!("dataset directory {} does not exist", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            rig: read_cameras(&root.join(CAMERAS_FILE))?,
        })
    }

    pub fn points_path(&self, frame: u32) -> PathBuf {
        frame_file(&self.root.join("points"), frame)
    }

    pub fn truth_path(&self, frame: u32) -> PathBuf {
        frame_file(&self.root.join("truth"), frame)
    }

    pub fn initial_frame(&self, frame: u32) -> Result<GaussianFrame> {
        let mut f = read_gaussian_ply(&self.points_path(frame))?;
        f.frame_index = frame;
        Ok(f)
    }

    pub fn truth(&self, frame: u32) -> Option<Result<GaussianFrame>> {
        let p = self.truth_path(frame);
        p.exists().then(|| read_gaussian_ply(&p))
    }

    /// Lists every missing input for tracking `first..=last`, so a run can
    /// fail before any compute. Frame `first` only needs its point file.
    pub fn missing_inputs(&self, first: u32, last: u32, opts: LoadOptions) -> Vec<PathBuf> {
        let mut need = vec![self.points_path(first)];
        for t in first.saturating_add(1)..=last {
            need.extend(self.rig.paths_for(t, opts));
        }
        need.into_iter().filter(|p| !p.exists()).collect()
    }
}
