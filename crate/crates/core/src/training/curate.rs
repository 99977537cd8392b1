//! Training-pair curation with a middle-frame reference.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::warp::{pre_align, ViewTransform};

use super::degrade::Degrader;

/// One curated training unit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub i_deg: Image,
    /// Pre-aligned reference, carrying its validity mask.
    pub i_warped: Image,
    pub i_gt: Image,
    pub scene_id: String,
    pub frame_index: usize,
}

impl TrainingSample {
    pub fn new(i_deg: Image, i_warped: Image, i_gt: Image, scene_id: impl Into<String>, frame_index: usize) -> Result<Self> {
        if !i_deg.same_dims(&i_gt) || !i_warped.same_dims(&i_gt) {
            return Err(Error::Shape(format!(
                "sample images differ in size: deg {:?}, warped {:?}, gt {:?}",
                i_deg.dims(),
                i_warped.dims(),
                i_gt.dims()
            )));
        }
        Ok(Self {
            i_deg,
            i_warped,
            i_gt,
            scene_id: scene_id.into(),
            frame_index,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.i_gt.dims()
    }
}

/// Zero-based index of the reference frame: the 1-based `ceil(n / 2)`.
pub fn reference_index(n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::InvalidInput("empty frame sequence".into()));
    }
    Ok(n.div_ceil(2) - 1)
}

/// Builds one sample per frame. `transforms[i]` maps the reference view onto
/// frame `i`; the entry at the reference index is ignored (the reference is
/// used as its own warp).
pub fn curate_pairs(
    frames: &[Image],
    transforms: &[ViewTransform],
    degrader: &dyn Degrader,
    scene_id: &str,
    temperature: f64,
) -> Result<Vec<TrainingSample>> {
    let r = reference_index(frames.len())?;
    if transforms.len() != frames.len() {
        return Err(Error::InvalidInput(format!(
            "{} transforms for {} frames",
            transforms.len(),
            frames.len()
        )));
    }
    let reference = frames[r].clone().without_valid();
    for (i, f) in frames.iter().enumerate() {
        if !f.same_dims(&reference) {
            return Err(Error::Shape(format!("frame {i} differs in size from the reference")));
        }
        if i != r && transforms[i].dims() != f.dims() {
            return Err(Error::Shape(format!("transform {i} does not match frame size")));
        }
    }
    let degraded = degrader.degrade(frames)?;
    if degraded.len() != frames.len() {
        return Err(Error::InvalidInput(format!(
            "degrader '{}' returned {} frames for {}",
            degrader.name(),
            degraded.len(),
            frames.len()
        )));
    }
    let mut out = Vec::with_capacity(frames.len());
    for (i, (gt, deg)) in frames.iter().zip(degraded).enumerate() {
        let warped = if i == r {
            reference.clone()
        } else {
            pre_align(&reference, &transforms[i], Some(&deg), temperature)?
        };
        out.push(TrainingSample::new(deg, warped, gt.clone().without_valid(), scene_id, i)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::degrade::{DegraderKind, NamedDegrader};
    use crate::warp::FlowField;

    fn frame(seed: usize) -> Image {
        Image::from_fn(8, 8, 3, |y, x, c| ((y * 3 + x * 5 + c + seed) % 7) as f64 / 6.0).unwrap()
    }

    #[test]
    fn reference_index_is_middle() {
        assert_eq!(reference_index(5).unwrap(), 2);
        assert_eq!(reference_index(1).unwrap(), 0);
        assert_eq!(reference_index(2).unwrap(), 0);
        assert_eq!(reference_index(4).unwrap(), 1);
        assert!(reference_index(0).is_err());
    }

    #[test]
    fn identity_setup_yields_identical_triples() {
        let frames = vec![frame(0); 3];
        let t = vec![ViewTransform::identity(8, 8); 3];
        let id = NamedDegrader::new(DegraderKind::Identity, 0);
        let s = curate_pairs(&frames, &t, &id, "a", 1.0).unwrap();
        for x in &s {
            assert_eq!(x.i_deg.data(), x.i_gt.data());
            assert_eq!(x.i_warped.data(), x.i_gt.data());
        }
    }

    #[test]
    fn reference_sample_uses_reference_exactly() {
        let frames: Vec<Image> = (0..4).map(frame).collect();
        let shift = ViewTransform::Flow(FlowField::constant(8, 8, 1.0, 0.0));
        let t = vec![shift; 4];
        let d = NamedDegrader::new(DegraderKind::BLUR_NOISE, 3);
        let s = curate_pairs(&frames, &t, &d, "a", 1.0).unwrap();
        assert_eq!(s[1].i_warped, frames[1]);
        assert_ne!(s[0].i_warped.data(), frames[1].data());
        assert!(s.iter().enumerate().all(|(i, x)| x.frame_index == i && x.i_gt == frames[i]));
        assert_ne!(s[0].i_deg, s[0].i_gt);
    }
}
