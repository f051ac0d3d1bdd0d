//! Pyramidal Farneback dense optical flow and flow-map encodings.

mod encode;
mod poly;

pub use encode::{
    color_wheel, encode_flow, flow_to_colorwheel, flow_to_mag, flow_to_magdir, resolve_max_mag,
    FlowEncoding, MaxMag, WHEEL_SEGMENTS,
};
pub use poly::{flow_increment, poly_expansion, PolyCoeffs, PolyExpansionField, DET_EPSILON};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imagecore::{downsample_half, sample_bilinear, warp_bilinear, FlowField, Image};

/// Smallest side accepted at full resolution and at the coarsest level.
pub const MIN_SIDE: usize = 8;

/// Farneback estimator configuration. The pyramid scale is fixed at 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    pub levels: usize,
    pub iterations: usize,
    pub poly_radius: usize,
    pub poly_sigma: f64,
    pub win_radius: usize,
    pub win_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations: 3,
            poly_radius: 3,
            poly_sigma: 1.1,
            win_radius: 6,
            win_sigma: 2.4,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.iterations < 1 {
            return invalid("levels and iterations must be at least 1");
        }
        if self.poly_radius < 1 || self.win_radius < 1 {
            return invalid("polynomial and window radii must be at least 1");
        }
        if !(self.poly_sigma > 0.0) || !(self.win_sigma > 0.0) {
            return invalid("polynomial and window sigmas must be positive");
        }
        Ok(())
    }

    /// Number of pyramid levels actually used for an image of the given
    /// size: `levels`, reduced so the coarsest level keeps both sides at
    /// least [`MIN_SIDE`].
    pub fn effective_levels(&self, width: usize, height: usize) -> usize {
        let (mut w, mut h) = (width, height);
        let mut n = 1;
        while n < self.levels && w.div_ceil(2) >= MIN_SIDE && h.div_ceil(2) >= MIN_SIDE {
            w = w.div_ceil(2);
            h = h.div_ceil(2);
            n += 1;
        }
        n
    }
}

/// Doubles a coarse flow onto the next finer grid. Fine pixel `x` sits at
/// coarse coordinate `x / 2`, matching the 2x subsample in the pyramid.
fn upsample_flow(coarse: &FlowField, width: usize, height: usize) -> Result<FlowField> {
    let img = coarse.to_image();
    let mut out = FlowField::zeros(width, height)?;
    for y in 0..height {
        for x in 0..width {
            let (cx, cy) = (x as f32 * 0.5, y as f32 * 0.5);
            let u = 2.0 * sample_bilinear(&img, cx, cy, 0);
            let v = 2.0 * sample_bilinear(&img, cx, cy, 1);
            out.set(x, y, u, v);
        }
    }
    Ok(out)
}

/// Dense flow from `frame1` to `frame2` (both 1-channel).
///
/// Coarse to fine: the coarsest level starts from zero flow; each finer
/// level starts from the doubled, upsampled flow of the level below and
/// runs `iterations` rounds of warp, expansion and increment.
pub fn farneback(frame1: &Image, frame2: &Image, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    if frame1.channels() != 1 || frame2.channels() != 1 {
        return invalid("farneback needs 1-channel frames");
    }
    if frame1.dims() != frame2.dims() {
        return invalid(format!(
            "frame dims differ: {:?} vs {:?}",
            frame1.dims(),
            frame2.dims()
        ));
    }
    let (w, h) = frame1.dims();
    if w < MIN_SIDE || h < MIN_SIDE {
        return invalid(format!(
            "frames must be at least {MIN_SIDE}x{MIN_SIDE}, got {w}x{h}"
        ));
    }

    let levels = params.effective_levels(w, h);
    let mut pyr1 = vec![frame1.clone()];
    let mut pyr2 = vec![frame2.clone()];
    for _ in 1..levels {
        pyr1.push(downsample_half(pyr1.last().expect("non-empty"))?);
        pyr2.push(downsample_half(pyr2.last().expect("non-empty"))?);
    }

    let mut flow: Option<FlowField> = None;
    for (f1, f2) in pyr1.iter().zip(pyr2.iter()).rev() {
        let (lw, lh) = f1.dims();
        let mut current = match flow {
            None => FlowField::zeros(lw, lh)?,
            Some(coarse) => upsample_flow(&coarse, lw, lh)?,
        };
        let exp1 = poly_expansion(f1, params.poly_sigma, params.poly_radius)?;
        for _ in 0..params.iterations {
            let warped = warp_bilinear(f2, &current)?;
            let exp2 = poly_expansion(&warped, params.poly_sigma, params.poly_radius)?;
            current = flow_increment(&exp1, &exp2, &current, params.win_sigma, params.win_radius)?;
        }
        flow = Some(current);
    }
    Ok(flow.expect("at least one level"))
}

/// Per-pixel endpoint errors between two flow fields of equal size.
pub fn endpoint_errors(estimate: &FlowField, truth: &FlowField) -> Result<Vec<f32>> {
    if estimate.dims() != truth.dims() {
        return invalid("endpoint error needs flows of equal size");
    }
    Ok(estimate
        .data()
        .chunks_exact(2)
        .zip(truth.data().chunks_exact(2))
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .collect())
}
