//! On-disk scenes and curated sample archives.
//!
//! A scene directory holds `frames/NNNNN.png` plus any of
//!
//! * `depth/NNNNN.pfm`: metric depth of each frame;
//! * `pose.txt`: an intrinsics line `fx fy cx cy`, then one 3x4 row-major
//!   world-to-camera matrix per frame (12 numbers per line);
//! * `flow/NNNNN.flo`: flow from the reference frame to frame `NNNNN`;
//! * `disparity/NNNNN.pfm`: disparity on the reference frame that shifts it
//!   onto frame `NNNNN`.
//!
//! A manifest (`scenes.txt`) lists scene directories, one per line, relative
//! to the manifest's own directory. Blank lines and `#` comments are ignored.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{list_pngs, read_flo, read_mask_png, read_pfm, read_png, write_mask_png, write_png};
use crate::training::{reference_index, TrainingSample};
use crate::warp::{
    estimate_flow, CameraIntrinsics, CameraPose, DepthMap, DisparityMap, FlowEstimator, ViewTransform,
};

/// How reference views are aligned to the other frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpMode {
    Geometry,
    Disparity,
    Flow,
}

impl FromStr for WarpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometry" => Ok(Self::Geometry),
            "disparity" => Ok(Self::Disparity),
            "flow" => Ok(Self::Flow),
            other => Err(Error::Config(format!(
                "unknown warp mode '{other}' (expected geometry, disparity or flow)"
            ))),
        }
    }
}

impl fmt::Display for WarpMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WarpMode::Geometry => "geometry",
            WarpMode::Disparity => "disparity",
            WarpMode::Flow => "flow",
        })
    }
}

/// World-to-camera extrinsics `X_cam = R X_world + t`.
pub type Extrinsics = (Matrix3<f64>, Vector3<f64>);

#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub dir: PathBuf,
    /// Frame file stems, sorted.
    pub stems: Vec<String>,
    pub frames: Vec<Image>,
}

impl Scene {
    pub fn reference(&self) -> usize {
        reference_index(self.frames.len()).expect("scenes have frames")
    }
}

fn stem(name: &str) -> String {
    name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name).to_string()
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let frames_dir = dir.join("frames");
    let names = list_pngs(&frames_dir)?;
    if names.is_empty() {
        return Err(Error::InvalidInput(format!("no frames in {}", frames_dir.display())));
    }
    let frames = names
        .iter()
        .map(|n| read_png(frames_dir.join(n)))
        .collect::<Result<Vec<_>>>()?;
    let dims = frames[0].dims();
    if let Some(bad) = frames.iter().position(|f| f.dims() != dims || f.channels() != frames[0].channels()) {
        return Err(Error::Shape(format!("frame {} differs in size from frame {}", names[bad], names[0])));
    }
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(Scene {
        name,
        dir: dir.to_path_buf(),
        stems: names.iter().map(|n| stem(n)).collect(),
        frames,
    })
}

/// Scene directories listed in a manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let dirs: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect();
    if dirs.is_empty() {
        return Err(Error::InvalidInput(format!("manifest {} lists no scenes", path.display())));
    }
    Ok(dirs)
}

fn numbers(line: &str, path: &Path, want: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::format(path, format!("bad number '{t}'"))))
        .collect::<Result<_>>()?;
    if v.len() != want || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::format(path, format!("expected {want} finite numbers, got '{line}'")));
    }
    Ok(v)
}

fn content_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'))
}

/// Parses `fx fy cx cy` followed by 3x4 matrices, one per line.
pub fn parse_poses(text: &str, path: &Path) -> Result<(CameraIntrinsics, Vec<Extrinsics>)> {
    let mut lines = content_lines(text);
    let first = lines.next().ok_or_else(|| Error::format(path, "missing intrinsics line"))?;
    let k = numbers(first, path, 4)?;
    let intrinsics = CameraIntrinsics::new(k[0], k[1], k[2], k[3])?;
    let poses = lines
        .map(|l| {
            let v = numbers(l, path, 12)?;
            let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
            Ok((r, Vector3::new(v[3], v[7], v[11])))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((intrinsics, poses))
}

fn require(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::InvalidInput(format!("missing {what}: {}", path.display())))
    }
}

fn depth_map(path: &Path) -> Result<DepthMap> {
    let g = read_pfm(path)?;
    let valid: Vec<bool> = g.data.iter().map(|&d| d.is_finite() && d > 0.0).collect();
    let data = g.data.iter().map(|&d| if d.is_finite() && d > 0.0 { d } else { 1.0 }).collect();
    DepthMap::with_mask(g.height, g.width, data, valid)
}

/// Per-frame transforms from the scene's reference view. The entry at the
/// reference index is the identity.
pub fn scene_transforms(scene: &Scene, mode: WarpMode, estimator: Option<&dyn FlowEstimator>) -> Result<Vec<ViewTransform>> {
    let r = scene.reference();
    let (h, w) = scene.frames[r].dims();
    let mut out = Vec::with_capacity(scene.frames.len());
    let poses = if mode == WarpMode::Geometry {
        let p = require(scene.dir.join("pose.txt"), "pose file")?;
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let (k, ext) = parse_poses(&text, &p)?;
        if ext.len() != scene.frames.len() {
            return Err(Error::format(&p, format!("{} poses for {} frames", ext.len(), scene.frames.len())));
        }
        let depth = depth_map(&require(scene.dir.join("depth").join(format!("{}.pfm", scene.stems[r])), "reference depth")?)?;
        Some((k, ext, depth))
    } else {
        None
    };
    for (i, s) in scene.stems.iter().enumerate() {
        if i == r {
            out.push(ViewTransform::identity(h, w));
            continue;
        }
        let t = match mode {
            WarpMode::Geometry => {
                let (k, ext, depth) = poses.as_ref().expect("loaded above");
                let rel = CameraPose::relative((&ext[r].0, &ext[r].1), (&ext[i].0, &ext[i].1))?;
                ViewTransform::DepthPose {
                    depth: depth.clone(),
                    intrinsics: *k,
                    relative_pose: rel,
                }
            }
            WarpMode::Disparity => {
                let g = read_pfm(require(scene.dir.join("disparity").join(format!("{s}.pfm")), "disparity")?)?;
                ViewTransform::Disparity(DisparityMap::new(g.height, g.width, g.data)?)
            }
            WarpMode::Flow => {
                let p = scene.dir.join("flow").join(format!("{s}.flo"));
                if p.is_file() {
                    ViewTransform::Flow(read_flo(&p)?)
                } else {
                    ViewTransform::Flow(estimate_flow(&scene.frames[r], &scene.frames[i], estimator)?)
                }
            }
        };
        if t.dims() != (h, w) {
            return Err(Error::Shape(format!("transform for frame {s} does not match the frame size")));
        }
        out.push(t);
    }
    Ok(out)
}

pub const INDEX_FILE: &str = "index.csv";
const INDEX_HEADER: &str = "scene,frame,deg,warped,gt,mask";

fn sample_stem(s: &TrainingSample) -> String {
    format!("{}_{:05}", s.scene_id, s.frame_index)
}

/// Writes PNG triplets, validity masks and `index.csv` under `dir`.
/// Rewriting the same samples produces identical files.
pub fn write_samples(dir: &Path, samples: &[TrainingSample]) -> Result<()> {
    let img_dir = dir.join("samples");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    for s in samples {
        if s.scene_id.contains([',', '/', '\\', '\n']) {
            return Err(Error::InvalidInput(format!("scene id '{}' cannot be stored", s.scene_id)));
        }
        let st = sample_stem(s);
        let names = [
            format!("{st}_deg.png"),
            format!("{st}_warped.png"),
            format!("{st}_gt.png"),
            format!("{st}_mask.png"),
        ];
        write_png(img_dir.join(&names[0]), &s.i_deg)?;
        write_png(img_dir.join(&names[1]), &s.i_warped)?;
        write_png(img_dir.join(&names[2]), &s.i_gt)?;
        let (h, w) = s.dims();
        write_mask_png(img_dir.join(&names[3]), &s.i_warped.valid_or_all(), h, w)?;
        index.push_str(&format!(
            "{},{},samples/{},samples/{},samples/{},samples/{}\n",
            s.scene_id, s.frame_index, names[0], names[1], names[2], names[3]
        ));
    }
    let p = dir.join(INDEX_FILE);
    fs::write(&p, index).map_err(|e| Error::io(&p, e))
}

/// Reads an archive written by [`write_samples`].
pub fn read_samples(dir: &Path) -> Result<Vec<TrainingSample>> {
    let p = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(Error::format(&p, format!("expected header '{INDEX_HEADER}'")));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::format(&p, format!("line {}: expected 6 fields", n + 2)));
        }
        let frame = f[1]
            .parse::<usize>()
            .map_err(|_| Error::format(&p, format!("line {}: bad frame index", n + 2)))?;
        let warped = read_png(dir.join(f[3]))?;
        let valid = read_mask_png(dir.join(f[5]))?;
        let warped = warped.with_valid(valid)?;
        out.push(TrainingSample::new(read_png(dir.join(f[2]))?, warped, read_png(dir.join(f[4]))?, f[0], frame)?);
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!("{} lists no samples", p.display())));
    }
    Ok(out)
}

/// Writes a scene in the on-disk layout: frames and, when given, per-frame
/// flows from the reference.
pub fn write_scene(dir: &Path, frames: &[Image], flows: Option<&[ViewTransform]>) -> Result<()> {
    let fd = dir.join("frames");
    fs::create_dir_all(&fd).map_err(|e| Error::io(&fd, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_png(fd.join(format!("{i:05}.png")), f)?;
    }
    if let Some(ts) = flows {
        let fl = dir.join("flow");
        fs::create_dir_all(&fl).map_err(|e| Error::io(&fl, e))?;
        for (i, t) in ts.iter().enumerate() {
            if let ViewTransform::Flow(f) = t {
                crate::io::write_flo(fl.join(format!("{i:05}.flo")), f)?;
            }
        }
    }
    Ok(())
}
