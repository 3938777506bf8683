//! Prior map of the environment and everything derived from it: the analytic
//! renderer that stands in for a learned radiance field, the per-cell
//! structural-similarity gate that rejects stale map regions, a segment-test
//! corner detector for the rendered view, render scheduling against the
//! camera clock, and the on-disk map format.
//!
//! The map holds point landmarks splatted as Gaussian intensity blobs over a
//! smooth direction-dependent background, so rendering is deterministic,
//! differentiable-in-pose, and cheap enough for photometric baselines. The
//! change mask records how the real scene drifted from the stored map; cells
//! covering changed regions must fail the similarity gate before their
//! features can ever reach the filter.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::img::ImagePlane;
use crate::se3::Pose;

/// Points closer than this to the camera plane do not project.
pub const Z_MIN: f64 = 1e-6;

/// Similarity-gate defaults: standard SSIM constants on unit dynamic range
/// with an 11x11 Gaussian window, sigma 1.5.
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_L: f64 = 1.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Cells at or above this score pass the gate.
pub const SSIM_THRESHOLD: f64 = 0.8;

/// Pinhole camera: square pixels, no distortion.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Pixel coordinates of a camera-frame point, or `None` behind the
    /// camera. Bounds are not checked here.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<(f64, f64)> {
        if p_cam.z <= Z_MIN {
            return None;
        }
        Some((
            self.focal * p_cam.x / p_cam.z + self.cx,
            self.focal * p_cam.y / p_cam.z + self.cy,
        ))
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Normalized image coordinates of a pixel.
    pub fn to_normalized(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.cx) / self.focal, (v - self.cy) / self.focal)
    }
}

/// Point landmark splatted as an isotropic Gaussian blob.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub id: u32,
    pub position: Vector3<f64>,
    /// Signed intensity added at the blob center; negative blobs are dark.
    pub amplitude: f64,
    /// Blob radius in pixels at the reference depth of 1 m; the drawn radius
    /// scales inversely with depth.
    pub sigma_px: f64,
}

/// One entry of the environment-change mask: the real scene's landmark `id`
/// sits at `position + offset` with `amplitude` replaced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkChange {
    pub id: u32,
    pub offset: Vector3<f64>,
    pub amplitude: f64,
}

/// Smooth direction-dependent background so every view has texture. The
/// field depends only on the world-frame ray direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundModel {
    pub amplitude: f64,
}

impl BackgroundModel {
    pub fn value(&self, dir_world: &Vector3<f64>) -> f64 {
        let d = dir_world;
        self.amplitude
            * (0.5
                + 0.18 * (18.0 * d.x + 1.1).sin() * (15.0 * d.y - 2.0).sin()
                + 0.14 * (13.0 * d.z + 0.5).sin())
    }
}

/// Prior map: landmarks, camera model, render latency, and the mask of
/// landmarks whose real-world state has drifted from the stored map.
#[derive(Debug, Clone, PartialEq)]
pub struct MapModel {
    pub intrinsics: CameraIntrinsics,
    pub landmarks: Vec<Landmark>,
    pub background: BackgroundModel,
    /// Seconds between a render request and its delivery.
    pub render_latency: f64,
    pub changes: Vec<LandmarkChange>,
}

impl MapModel {
    /// The scene as it really is: change mask applied, mask cleared.
    /// Rendering `self` shows the (possibly stale) map; rendering the world
    /// model shows what a camera actually observes.
    pub fn world_model(&self) -> MapModel {
        let mut world = self.clone();
        for ch in &self.changes {
            if let Some(lm) = world.landmarks.iter_mut().find(|l| l.id == ch.id) {
                lm.position += ch.offset;
                lm.amplitude = ch.amplitude;
            }
        }
        world.changes.clear();
        world
    }

    pub fn landmark(&self, id: u32) -> Option<&Landmark> {
        self.landmarks.iter().find(|l| l.id == id)
    }
}

/// Output of [`render`]: the image, the pose it was rendered from, and the
/// landmarks that fell inside the frame with their pixel projections,
/// ordered by id.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub image: ImagePlane,
    pub world_to_camera: Pose,
    pub in_view: Vec<(u32, f64, f64)>,
}

/// Renders the map from a world-to-camera pose. Blobs accumulate over the
/// background and the result is clamped to `[0, 1]`; landmarks behind the
/// camera or outside a one-blob margin of the frame are skipped.
pub fn render(map: &MapModel, world_to_camera: &Pose) -> RenderedFrame {
    let k = &map.intrinsics;
    let (w, h) = (k.width, k.height);
    let mut image = ImagePlane::new(w, h);

    let cam_to_world_rot = world_to_camera.rotation.transpose();
    for y in 0..h {
        for x in 0..w {
            let (nx, ny) = k.to_normalized(x as f64 + 0.5, y as f64 + 0.5);
            let dir_cam = Vector3::new(nx, ny, 1.0).normalize();
            let dir_world = cam_to_world_rot * dir_cam;
            image.set(x, y, map.background.value(&dir_world));
        }
    }

    let mut in_view = Vec::new();
    for lm in &map.landmarks {
        let p_cam = world_to_camera.transform_point(&lm.position);
        let Some((u, v)) = k.project(&p_cam) else {
            continue;
        };
        let sigma = lm.sigma_px / p_cam.z;
        let margin = 3.5 * sigma;
        if u < -margin
            || v < -margin
            || u >= w as f64 + margin
            || v >= h as f64 + margin
        {
            continue;
        }
        if k.contains(u, v) {
            in_view.push((lm.id, u, v));
        }
        let x0 = ((u - margin).floor().max(0.0)) as usize;
        let x1 = ((u + margin).ceil().min(w as f64 - 1.0)) as usize;
        let y0 = ((v - margin).floor().max(0.0)) as usize;
        let y1 = ((v + margin).ceil().min(h as f64 - 1.0)) as usize;
        let inv_two_sq = 1.0 / (2.0 * sigma * sigma);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dx = px as f64 + 0.5 - u;
                let dy = py as f64 + 0.5 - v;
                let g = (-(dx * dx + dy * dy) * inv_two_sq).exp();
                let v0 = image.get(px, py);
                image.set(px, py, v0 + lm.amplitude * g);
            }
        }
    }
    for v in image.as_mut_slice() {
        *v = v.clamp(0.0, 1.0);
    }
    in_view.sort_by_key(|e| e.0);
    RenderedFrame {
        image,
        world_to_camera: *world_to_camera,
        in_view,
    }
}

/// Per-cell result of the similarity gate.
#[derive(Debug, Clone)]
pub struct GridFilterReport {
    pub grid: (usize, usize),
    /// Row-major cell scores, `grid.1` rows of `grid.0` cells.
    pub cell_ssim: Vec<f64>,
    pub accepted: Vec<bool>,
    pub threshold: f64,
}

impl GridFilterReport {
    /// Cell column/row containing a pixel, for images of the given size.
    pub fn cell_of(&self, u: f64, v: f64, width: usize, height: usize) -> (usize, usize) {
        let cx = ((u as usize).min(width - 1) * self.grid.0) / width;
        let cy = ((v as usize).min(height - 1) * self.grid.1) / height;
        (cx, cy)
    }

    pub fn is_accepted(&self, cx: usize, cy: usize) -> bool {
        self.accepted[cy * self.grid.0 + cx]
    }
}

/// Structural similarity per grid cell, windows clipped at cell borders.
///
/// Each cell's score is the mean over its pixels of the Gaussian-windowed
/// SSIM statistic, with window weights renormalized over the part of the
/// window inside the cell. Identical inputs score exactly 1 in every cell.
pub fn ssim_grid_filter(
    rendered: &ImagePlane,
    captured: &ImagePlane,
    grid: (usize, usize),
    threshold: f64,
) -> Result<GridFilterReport> {
    if rendered.width() != captured.width() || rendered.height() != captured.height() {
        return Err(Error::InvalidArgument(
            "similarity gate requires equally sized images".into(),
        ));
    }
    let (w, h) = (rendered.width(), rendered.height());
    let (gx, gy) = grid;
    if gx == 0 || gy == 0 || gx > w || gy > h {
        return Err(Error::InvalidArgument(format!(
            "grid {gx}x{gy} invalid for {w}x{h} image"
        )));
    }

    let half = (SSIM_WINDOW / 2) as isize;
    let mut weights = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
    for (dy, row) in weights.iter_mut().enumerate() {
        for (dx, wgt) in row.iter_mut().enumerate() {
            let rx = dx as f64 - half as f64;
            let ry = dy as f64 - half as f64;
            *wgt = (-(rx * rx + ry * ry) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }

    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);

    let mut cell_ssim = Vec::with_capacity(gx * gy);
    let mut accepted = Vec::with_capacity(gx * gy);
    for cy in 0..gy {
        let y0 = cy * h / gy;
        let y1 = (cy + 1) * h / gy;
        for cx in 0..gx {
            let x0 = cx * w / gx;
            let x1 = (cx + 1) * w / gx;
            let mut acc = 0.0;
            for py in y0..y1 {
                for px in x0..x1 {
                    let mut sw = 0.0;
                    let (mut mx, mut my) = (0.0, 0.0);
                    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
                    for dy in -half..=half {
                        let qy = py as isize + dy;
                        if qy < y0 as isize || qy >= y1 as isize {
                            continue;
                        }
                        for dx in -half..=half {
                            let qx = px as isize + dx;
                            if qx < x0 as isize || qx >= x1 as isize {
                                continue;
                            }
                            let wgt =
                                weights[(dy + half) as usize][(dx + half) as usize];
                            let a = rendered.get(qx as usize, qy as usize);
                            let b = captured.get(qx as usize, qy as usize);
                            sw += wgt;
                            mx += wgt * a;
                            my += wgt * b;
                            sxx += wgt * a * a;
                            syy += wgt * b * b;
                            sxy += wgt * a * b;
                        }
                    }
                    mx /= sw;
                    my /= sw;
                    let vx = (sxx / sw - mx * mx).max(0.0);
                    let vy = (syy / sw - my * my).max(0.0);
                    let cov = sxy / sw - mx * my;
                    let ssim = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    acc += ssim;
                }
            }
            let score = acc / ((y1 - y0) * (x1 - x0)) as f64;
            cell_ssim.push(score);
            accepted.push(score >= threshold);
        }
    }
    Ok(GridFilterReport {
        grid,
        cell_ssim,
        accepted,
        threshold,
    })
}

/// Detected corner with its segment-test score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

/// Offsets of the 16-pixel Bresenham circle of radius 3, clockwise from
/// twelve o'clock.
const CIRCLE: [(isize, isize); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// Minimum contiguous arc length for the segment test.
const FAST_ARC: usize = 9;

/// Segment-test corner detector (arc of at least 9 of the 16 circle pixels
/// all brighter than center + t, or all darker than center - t), with 3x3
/// nonmax suppression on the min-margin arc score. Intensities are the
/// `[0, 1]` floats of [`ImagePlane`]; `threshold` is in the same units.
pub fn fast_detect(image: &ImagePlane, threshold: f64) -> Vec<Corner> {
    let (w, h) = (image.width(), image.height());
    if w < 7 || h < 7 {
        return Vec::new();
    }
    let mut scores = vec![0.0f64; w * h];
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            if let Some(s) = segment_score(image, x, y, threshold) {
                scores[y * w + x] = s;
            }
        }
    }
    let mut corners = Vec::new();
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            let s = scores[y * w + x];
            if s <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = scores[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
                    // Strict comparison with a coordinate tiebreak keeps
                    // exactly one corner per plateau.
                    if n > s || (n == s && (dy, dx) < (0, 0)) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                corners.push(Corner { x, y, score: s });
            }
        }
    }
    corners
}

/// Segment-test score at a pixel, or `None` if the test fails for both
/// polarities. The score is the summed margin above threshold over all
/// qualifying circle pixels, so suppression prefers the pixel that sees the
/// most contrast even where individual margins saturate.
fn segment_score(image: &ImagePlane, x: usize, y: usize, threshold: f64) -> Option<f64> {
    let c = image.get(x, y);
    let mut margins = [0.0f64; 16];
    for (i, (dx, dy)) in CIRCLE.iter().enumerate() {
        let v = image.get((x as isize + dx) as usize, (y as isize + dy) as usize);
        margins[i] = v - c;
    }
    let mut best: Option<f64> = None;
    for sign in [1.0, -1.0] {
        let pass: Vec<bool> = margins.iter().map(|&m| sign * m > threshold).collect();
        let mut run = 0usize;
        let mut longest = 0usize;
        for i in 0..2 * pass.len() {
            if pass[i % pass.len()] {
                run += 1;
                longest = longest.max(run.min(pass.len()));
            } else {
                run = 0;
            }
        }
        if longest >= FAST_ARC {
            let score: f64 = margins
                .iter()
                .zip(&pass)
                .filter(|(_, &p)| p)
                .map(|(&m, _)| sign * m - threshold)
                .sum();
            best = Some(best.map_or(score, |b: f64| b.max(score)));
        }
    }
    best
}

/// One scheduled render: requested at `request_ts` using the pose estimate
/// current at that moment, delivered `latency` later.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderEvent {
    pub request_ts: f64,
    pub delivery_ts: f64,
}

/// Render requests at the render rate over `[0, horizon)`, each delivered
/// after the fixed latency. The render rate may not exceed the camera rate.
pub fn schedule_renders(
    camera_rate_hz: f64,
    render_rate_hz: f64,
    latency: f64,
    horizon: f64,
) -> Result<Vec<RenderEvent>> {
    if !(camera_rate_hz > 0.0) || !(render_rate_hz > 0.0) {
        return Err(Error::InvalidArgument("rates must be positive".into()));
    }
    if render_rate_hz > camera_rate_hz {
        return Err(Error::InvalidArgument(format!(
            "render rate {render_rate_hz} Hz exceeds camera rate {camera_rate_hz} Hz"
        )));
    }
    if !(latency >= 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidArgument(
            "latency must be nonnegative and horizon positive".into(),
        ));
    }
    let period = 1.0 / render_rate_hz;
    let mut events = Vec::new();
    let mut k = 0u64;
    loop {
        let t = k as f64 * period;
        if t >= horizon {
            break;
        }
        events.push(RenderEvent {
            request_ts: t,
            delivery_ts: t + latency,
        });
        k += 1;
    }
    Ok(events)
}

const MAP_FORMAT_VERSION: u32 = 1;

/// Writes the map in the versioned text format:
///
/// ```text
/// mapvio-map 1
/// intrinsics <width> <height> <focal> <cx> <cy>
/// latency <seconds>
/// background <amplitude>
/// landmark <id> <x> <y> <z> <amplitude> <sigma_px>
/// changed <id> <dx> <dy> <dz> <amplitude>
/// ```
///
/// Floats use the shortest exact decimal representation, so write/read
/// round-trips bit for bit.
pub fn write_map_file(map: &MapModel, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "mapvio-map {MAP_FORMAT_VERSION}")?;
    let k = &map.intrinsics;
    writeln!(
        out,
        "intrinsics {} {} {:?} {:?} {:?}",
        k.width, k.height, k.focal, k.cx, k.cy
    )?;
    writeln!(out, "latency {:?}", map.render_latency)?;
    writeln!(out, "background {:?}", map.background.amplitude)?;
    for lm in &map.landmarks {
        writeln!(
            out,
            "landmark {} {:?} {:?} {:?} {:?} {:?}",
            lm.id, lm.position.x, lm.position.y, lm.position.z, lm.amplitude, lm.sigma_px
        )?;
    }
    for ch in &map.changes {
        writeln!(
            out,
            "changed {} {:?} {:?} {:?} {:?}",
            ch.id, ch.offset.x, ch.offset.y, ch.offset.z, ch.amplitude
        )?;
    }
    Ok(())
}

/// Parses the format written by [`write_map_file`]. Unknown directives,
/// version mismatches, duplicate landmark ids, and change entries without a
/// matching landmark are all rejected.
pub fn read_map_file(path: &Path) -> Result<MapModel> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();

    let header = lines
        .next()
        .ok_or_else(|| Error::format("map file", "empty file"))??;
    let mut hp = header.split_whitespace();
    if hp.next() != Some("mapvio-map") {
        return Err(Error::format("map file", "missing mapvio-map header"));
    }
    let version: u32 = hp
        .next()
        .ok_or_else(|| Error::format("map file", "missing version"))?
        .parse()
        .map_err(|e| Error::format("map file", format!("bad version: {e}")))?;
    if version != MAP_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: MAP_FORMAT_VERSION,
        });
    }

    let mut intrinsics = None;
    let mut latency = None;
    let mut background = None;
    let mut landmarks: Vec<Landmark> = Vec::new();
    let mut changes = Vec::new();

    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let directive = parts.next().unwrap();
        let rest: Vec<&str> = parts.collect();
        let ctx = |msg: String| Error::format("map file", format!("line {}: {msg}", lineno + 2));
        let f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| ctx(format!("bad float {s:?}: {e}")))
        };
        match directive {
            "intrinsics" => {
                if rest.len() != 5 {
                    return Err(ctx("intrinsics needs 5 fields".into()));
                }
                intrinsics = Some(CameraIntrinsics {
                    width: rest[0].parse().map_err(|e| ctx(format!("bad width: {e}")))?,
                    height: rest[1]
                        .parse()
                        .map_err(|e| ctx(format!("bad height: {e}")))?,
                    focal: f(rest[2])?,
                    cx: f(rest[3])?,
                    cy: f(rest[4])?,
                });
            }
            "latency" => {
                if rest.len() != 1 {
                    return Err(ctx("latency needs 1 field".into()));
                }
                latency = Some(f(rest[0])?);
            }
            "background" => {
                if rest.len() != 1 {
                    return Err(ctx("background needs 1 field".into()));
                }
                background = Some(BackgroundModel {
                    amplitude: f(rest[0])?,
                });
            }
            "landmark" => {
                if rest.len() != 6 {
                    return Err(ctx("landmark needs 6 fields".into()));
                }
                let id: u32 = rest[0].parse().map_err(|e| ctx(format!("bad id: {e}")))?;
                if landmarks.iter().any(|l| l.id == id) {
                    return Err(ctx(format!("duplicate landmark id {id}")));
                }
                landmarks.push(Landmark {
                    id,
                    position: Vector3::new(f(rest[1])?, f(rest[2])?, f(rest[3])?),
                    amplitude: f(rest[4])?,
                    sigma_px: f(rest[5])?,
                });
            }
            "changed" => {
                if rest.len() != 5 {
                    return Err(ctx("changed needs 5 fields".into()));
                }
                let id: u32 = rest[0].parse().map_err(|e| ctx(format!("bad id: {e}")))?;
                changes.push(LandmarkChange {
                    id,
                    offset: Vector3::new(f(rest[1])?, f(rest[2])?, f(rest[3])?),
                    amplitude: f(rest[4])?,
                });
            }
            other => {
                return Err(ctx(format!("unknown directive {other:?}")));
            }
        }
    }

    let intrinsics =
        intrinsics.ok_or_else(|| Error::format("map file", "missing intrinsics"))?;
    for ch in &changes {
        if !landmarks.iter().any(|l| l.id == ch.id) {
            return Err(Error::format(
                "map file",
                format!("change entry for unknown landmark {}", ch.id),
            ));
        }
    }
    Ok(MapModel {
        intrinsics,
        landmarks,
        background: background.ok_or_else(|| Error::format("map file", "missing background"))?,
        render_latency: latency.ok_or_else(|| Error::format("map file", "missing latency"))?,
        changes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics {
            width: 64,
            height: 64,
            focal: 60.0,
            cx: 32.0,
            cy: 32.0,
        }
    }

    fn single_blob_map(position: Vector3<f64>) -> MapModel {
        MapModel {
            intrinsics: test_intrinsics(),
            landmarks: vec![Landmark {
                id: 0,
                position,
                amplitude: 0.8,
                sigma_px: 2.0,
            }],
            background: BackgroundModel { amplitude: 0.0 },
            render_latency: 0.1,
            changes: Vec::new(),
        }
    }

    /// Looking down the world +z axis from the origin.
    fn identity_view() -> Pose {
        Pose::identity()
    }

    #[test]
    fn blob_centroid_matches_projection() {
        // Oracle: intensity-weighted centroid of the rendered blob.
        for pos in [
            Vector3::new(0.05, -0.03, 1.2),
            Vector3::new(-0.1, 0.08, 0.9),
            Vector3::new(0.0, 0.0, 1.0),
        ] {
            let map = single_blob_map(pos);
            let frame = render(&map, &identity_view());
            let (mut sw, mut su, mut sv) = (0.0, 0.0, 0.0);
            for y in 0..64 {
                for x in 0..64 {
                    let w = frame.image.get(x, y);
                    sw += w;
                    su += w * (x as f64 + 0.5);
                    sv += w * (y as f64 + 0.5);
                }
            }
            let (cu, cv) = (su / sw, sv / sw);
            let (eu, ev) = map.intrinsics.project(&pos).unwrap();
            assert!(
                ((cu - eu).powi(2) + (cv - ev).powi(2)).sqrt() < 0.5,
                "centroid ({cu:.3},{cv:.3}) vs projection ({eu:.3},{ev:.3})"
            );
            assert_eq!(frame.in_view, vec![(0, eu, ev)]);
        }
    }

    #[test]
    fn render_skips_behind_camera() {
        let map = single_blob_map(Vector3::new(0.0, 0.0, -1.0));
        let frame = render(&map, &identity_view());
        assert!(frame.in_view.is_empty());
        assert!(frame.image.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn render_deterministic_and_in_range() {
        let mut map = single_blob_map(Vector3::new(0.0, 0.0, 1.0));
        map.background.amplitude = 0.9;
        map.landmarks.push(Landmark {
            id: 1,
            position: Vector3::new(0.02, 0.0, 0.8),
            amplitude: 0.9,
            sigma_px: 3.0,
        });
        let a = render(&map, &identity_view());
        let b = render(&map, &identity_view());
        assert_eq!(a.image, b.image);
        assert!(a
            .image
            .as_slice()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn world_model_applies_changes() {
        let mut map = single_blob_map(Vector3::new(0.0, 0.0, 1.0));
        map.changes.push(LandmarkChange {
            id: 0,
            offset: Vector3::new(0.1, 0.0, 0.0),
            amplitude: 0.2,
        });
        let world = map.world_model();
        assert!(world.changes.is_empty());
        let lm = world.landmark(0).unwrap();
        assert_eq!(lm.position, Vector3::new(0.1, 0.0, 1.0));
        assert_eq!(lm.amplitude, 0.2);
        // Original untouched.
        assert_eq!(map.landmark(0).unwrap().position, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn ssim_identical_images_all_cells_pass() {
        let mut map = single_blob_map(Vector3::new(0.03, -0.05, 1.0));
        map.background.amplitude = 0.7;
        let frame = render(&map, &identity_view());
        let report =
            ssim_grid_filter(&frame.image, &frame.image, (8, 8), SSIM_THRESHOLD).unwrap();
        assert!(report.accepted.iter().all(|&a| a));
        assert!(report
            .cell_ssim
            .iter()
            .all(|&s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ssim_flat_patches_stable() {
        let a = ImagePlane::from_vec(16, 16, vec![0.5; 256]).unwrap();
        let b = ImagePlane::from_vec(16, 16, vec![0.5; 256]).unwrap();
        let r = ssim_grid_filter(&a, &b, (2, 2), SSIM_THRESHOLD).unwrap();
        assert!(r.cell_ssim.iter().all(|s| (s - 1.0).abs() < 1e-12));
        // Different flat levels: luminance term alone decides.
        let c = ImagePlane::from_vec(16, 16, vec![0.9; 256]).unwrap();
        let r2 = ssim_grid_filter(&a, &c, (2, 2), SSIM_THRESHOLD).unwrap();
        let expected = (2.0 * 0.5 * 0.9 + 1e-4) / (0.25 + 0.81 + 1e-4);
        assert!(r2.cell_ssim.iter().all(|s| (s - expected).abs() < 1e-9));
        assert!(r2.accepted.iter().all(|&acc| acc == (expected >= 0.8)));
    }

    #[test]
    fn ssim_altered_cell_rejected_others_pass() {
        // Blob centers sit at cell centers of the 4x4 grid over 64 px:
        // pixel 40 = normalized (40 - 32) / 60.
        let at_cell_center = 8.0 / 60.0;
        let mut map = single_blob_map(Vector3::new(-at_cell_center, -at_cell_center, 1.0));
        map.background.amplitude = 0.7;
        map.landmarks.push(Landmark {
            id: 1,
            position: Vector3::new(at_cell_center, at_cell_center, 1.0),
            amplitude: 0.8,
            sigma_px: 3.0,
        });
        let clean = render(&map, &identity_view());
        // The real scene lost landmark 1.
        map.changes.push(LandmarkChange {
            id: 1,
            offset: Vector3::zeros(),
            amplitude: 0.0,
        });
        let world = map.world_model();
        let observed = render(&world, &identity_view());
        let report =
            ssim_grid_filter(&clean.image, &observed.image, (4, 4), SSIM_THRESHOLD).unwrap();
        let (u, v) = map
            .intrinsics
            .project(&Vector3::new(at_cell_center, at_cell_center, 1.0))
            .unwrap();
        let (cx, cy) = report.cell_of(u, v, 64, 64);
        assert!(!report.is_accepted(cx, cy), "altered cell passed the gate");
        let (u0, v0) = map
            .intrinsics
            .project(&Vector3::new(-at_cell_center, -at_cell_center, 1.0))
            .unwrap();
        let (ax, ay) = report.cell_of(u0, v0, 64, 64);
        assert!(report.is_accepted(ax, ay), "unaltered cell rejected");
    }

    /// Exhaustive segment-test oracle without suppression.
    fn segment_test_oracle(img: &ImagePlane, t: f64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 3..img.height() - 3 {
            for x in 3..img.width() - 3 {
                let c = img.get(x, y);
                for bright in [true, false] {
                    let ok: Vec<bool> = CIRCLE
                        .iter()
                        .map(|(dx, dy)| {
                            let v = img.get((x as isize + dx) as usize, (y as isize + dy) as usize);
                            if bright {
                                v > c + t
                            } else {
                                v < c - t
                            }
                        })
                        .collect();
                    let mut run = 0;
                    let mut longest = 0;
                    for i in 0..32 {
                        if ok[i % 16] {
                            run += 1;
                            longest = longest.max(run);
                        } else {
                            run = 0;
                        }
                    }
                    if longest >= FAST_ARC {
                        out.push((x, y));
                        break;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn fast_square_corners() {
        let mut img = ImagePlane::new(32, 32);
        for y in 10..22 {
            for x in 10..22 {
                img.set(x, y, 1.0);
            }
        }
        let corners = fast_detect(&img, 0.1);
        let oracle = segment_test_oracle(&img, 0.1);
        for c in &corners {
            assert!(
                oracle.contains(&(c.x, c.y)),
                "({}, {}) not in oracle set",
                c.x,
                c.y
            );
        }
        // One detection within 1 px of each square corner.
        for (ex, ey) in [(10, 10), (21, 10), (10, 21), (21, 21)] {
            let hit = corners.iter().any(|c| {
                (c.x as isize - ex as isize).abs() <= 1 && (c.y as isize - ey as isize).abs() <= 1
            });
            assert!(hit, "no corner near ({ex}, {ey}): {corners:?}");
        }
    }

    #[test]
    fn fast_uniform_image_no_corners() {
        let img = ImagePlane::from_vec(32, 32, vec![0.4; 1024]).unwrap();
        assert!(fast_detect(&img, 0.05).is_empty());
    }

    #[test]
    fn fast_nms_isolated_peak_single_detection() {
        let mut img = ImagePlane::new(16, 16);
        img.set(8, 8, 1.0);
        let corners = fast_detect(&img, 0.1);
        assert_eq!(corners.len(), 1);
        assert_eq!((corners[0].x, corners[0].y), (8, 8));
    }

    #[test]
    fn schedule_two_hz_over_three_seconds() {
        let events = schedule_renders(30.0, 2.0, 0.2, 3.0).unwrap();
        let req: Vec<f64> = events.iter().map(|e| e.request_ts).collect();
        assert_eq!(req, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5]);
        for e in &events {
            assert_eq!(e.delivery_ts, e.request_ts + 0.2);
        }
    }

    #[test]
    fn schedule_rejects_render_faster_than_camera() {
        assert!(schedule_renders(30.0, 31.0, 0.1, 3.0).is_err());
        assert!(schedule_renders(30.0, 30.0, 0.1, 1.0).is_ok());
        assert!(schedule_renders(30.0, 2.0, -0.1, 3.0).is_err());
    }

    #[test]
    fn map_file_roundtrip_bitwise() {
        let mut map = single_blob_map(Vector3::new(0.1234567890123, -0.5, 1.0 / 3.0));
        map.changes.push(LandmarkChange {
            id: 0,
            offset: Vector3::new(0.1, 0.2, -0.3),
            amplitude: 0.25,
        });
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.map");
        let p2 = dir.path().join("b.map");
        write_map_file(&map, &p1).unwrap();
        let back = read_map_file(&p1).unwrap();
        assert_eq!(map, back);
        write_map_file(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn map_file_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.map");

        std::fs::write(&p, "mapvio-map 2\n").unwrap();
        assert!(matches!(read_map_file(&p), Err(Error::Version { .. })));

        std::fs::write(&p, "mapvio-map 1\nfrobnicate 1 2 3\n").unwrap();
        assert!(read_map_file(&p).is_err());

        std::fs::write(
            &p,
            "mapvio-map 1\nintrinsics 64 64 60.0 32.0 32.0\nlatency 0.1\nbackground 0.5\n\
             landmark 0 0 0 1 0.5 2\nlandmark 0 0 0 1 0.5 2\n",
        )
        .unwrap();
        assert!(read_map_file(&p).is_err());

        std::fs::write(
            &p,
            "mapvio-map 1\nintrinsics 64 64 60.0 32.0 32.0\nlatency 0.1\nbackground 0.5\n\
             changed 7 0 0 0 0.1\n",
        )
        .unwrap();
        assert!(read_map_file(&p).is_err());
    }

    #[test]
    fn render_view_rotation_moves_background() {
        let mut map = single_blob_map(Vector3::new(0.0, 0.0, 1.0));
        map.landmarks.clear();
        map.background.amplitude = 0.8;
        let a = render(&map, &identity_view());
        let rot = Pose::new(
            Matrix3::new(
                0.9800665778412416,
                0.0,
                -0.19866933079506122,
                0.0,
                1.0,
                0.0,
                0.19866933079506122,
                0.0,
                0.9800665778412416,
            ),
            Vector3::zeros(),
        );
        let b = render(&map, &rot);
        assert!(a.image.mean_sq_diff(&b.image) > 1e-5);
    }
}
