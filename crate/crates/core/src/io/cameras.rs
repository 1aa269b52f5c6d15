//! Camera rig documents in TOML.
//!
//! ```toml
//! [[camera]]
//! id = "cam00"
//! width = 64            # pixels
//! height = 64
//! fx = 70.4             # pixels
//! fy = 70.4
//! cx = 32.0
//! cy = 32.0
//! near = 0.1            # meters
//! far = 20.0
//! world_to_camera = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 2.6], [0.0, 0.0, 0.0, 1.0]]
//! image = "images/cam00/{frame}.png"
//! mask = "masks/cam00/{frame}.png"
//! flow = "flow/cam00/{frame}.flo2"
//! ```
//!
//! Templates are relative to the document's directory; `{frame}` expands to
//! the zero-padded four-digit frame index. The flow file of frame `t` maps
//! pixels of frame `t - 1` to frame `t`.

use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{EgsError, Result};
use crate::io::{flow, images};
use crate::model::{CameraView, Extrinsics, Intrinsics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
    pub world_to_camera: [[f64; 4]; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<String>,
}

fn default_near() -> f64 {
    0.01
}

fn default_far() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigDoc {
    camera: Vec<CameraEntry>,
}

impl CameraEntry {
    pub fn from_view(view: &CameraView) -> Self {
        let k = &view.intrinsics;
        let m = view.extrinsics.to_matrix();
        Self {
            id: view.view_id.clone(),
            width: k.width,
            height: k.height,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            near: view.near,
            far: view.far,
            world_to_camera: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
            image: None,
            mask: None,
            flow: None,
        }
    }

    /// Geometry-only view.
    pub fn view(&self) -> Result<CameraView> {
        let m = Matrix4::from_fn(|r, c| self.world_to_camera[r][c]);
        if m.row(3).iter().zip([0.0, 0.0, 0.0, 1.0]).any(|(a, b)| *a != b) {
            return Err(EgsError::Format(format!("camera {}: last row of world_to_camera must be 0 0 0 1", self.id)));
        }
        let extrinsics = Extrinsics::from_matrix(&m).map_err(|e| EgsError::Format(format!("camera {}: {e}", self.id)))?;
        let k = Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        };
        CameraView::new(self.id.clone(), k, extrinsics, self.near, self.far)
    }
}

/// Expands `{frame}` in a path template.
pub fn expand_template(template: &str, frame: u32) -> String {
    template.replace("{frame}", &format!("{frame:04}"))
}

/// A rig document together with the directory its templates resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub base_dir: PathBuf,
    pub cameras: Vec<CameraEntry>,
}

/// Reads and validates a rig document.
pub fn read_cameras(path: &Path) -> Result<CameraRig> {
    let text = std::fs::read_to_string(path).map_err(|e| EgsError::InvalidInput(format!("{}: {e}", path.display())))?;
    let doc: RigDoc = toml::from_str(&text).map_err(|e| EgsError::Format(format!("{}: {e}", path.display())))?;
    if doc.camera.is_empty() {
        return Err(EgsError::Format(format!("{}: no [[camera]] entries", path.display())));
    }
    let mut ids: Vec<&str> = doc.camera.iter().map(|c| c.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(EgsError::Format(format!("{}: duplicate camera id {}", path.display(), w[0])));
    }
    for c in &doc.camera {
        c.view()?;
    }
    Ok(CameraRig {
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        cameras: doc.camera,
    })
}

pub fn write_cameras(cameras: &[CameraEntry], path: &Path) -> Result<()> {
    let doc = RigDoc { camera: cameras.to_vec() };
    let text = toml::to_string(&doc).map_err(|e| EgsError::Format(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Which per-frame rasters to attach when loading views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub image: bool,
    pub mask: bool,
    pub flow: bool,
}

impl CameraRig {
    pub fn views(&self) -> Result<Vec<CameraView>> {
        self.cameras.iter().map(CameraEntry::view).collect()
    }

    fn resolve(&self, template: &str, frame: u32) -> PathBuf {
        self.base_dir.join(expand_template(template, frame))
    }

    /// Every file the requested rasters of `frame` would be read from.
    /// Missing templates are skipped; flow is never requested for frame 0.
    pub fn paths_for(&self, frame: u32, opts: LoadOptions) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for c in &self.cameras {
            let wanted = [(opts.image, &c.image), (opts.mask, &c.mask), (opts.flow && frame > 0, &c.flow)];
            out.extend(wanted.into_iter().filter_map(|(on, t)| t.as_deref().filter(|_| on)).map(|t| self.resolve(t, frame)));
        }
        out
    }

    /// Views for `frame` with rasters attached and dimension-checked.
    pub fn load_frame(&self, frame: u32, opts: LoadOptions) -> Result<Vec<CameraView>> {
        self.cameras
            .iter()
            .map(|c| {
                let mut v = c.view()?;
                if let Some(t) = c.image.as_deref().filter(|_| opts.image) {
                    v.image = Some(images::read_image(&self.resolve(t, frame))?);
                }
                if let Some(t) = c.mask.as_deref().filter(|_| opts.mask) {
                    v.mask = Some(images::read_mask(&self.resolve(t, frame))?);
                }
                if let Some(t) = c.flow.as_deref().filter(|_| opts.flow && frame > 0) {
                    v.flow = Some(flow::read_flow(&self.resolve(t, frame))?);
                }
                v.validate()?;
                Ok(v)
            })
            .collect()
    }
}
