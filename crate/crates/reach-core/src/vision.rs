//! Synthetic top-view camera and the classic-CV target extraction pipeline:
//! background-mask averaging, differencing, thresholding, blob centroid, and
//! an affine pixel→world calibration.
//!
//! The renderer is an orthographic stand-in for a ceiling camera: light table
//! rectangle, dark arm polyline through the kinematic frame origins, and the
//! target cylinder as a filled blue disk. Everything is deterministic, so
//! images are bitwise reproducible.

use std::io::{BufRead, Write};

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::agents::Agent;
use crate::curriculum::{evaluate_with_target_source, EpisodeTarget, EvalReport};
use crate::environment::{ActionSpace, EnvHandle};
use crate::error::{ReachError, Result};
use crate::kinematics::{
    frame_positions, JointVector, KinematicChain, TableGeometry, TargetPosition,
};

/// 8-bit RGB image, row-major, row 0 at the top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopViewImage {
    pub width: u32,
    pub height: u32,
    /// `3 * width * height` bytes, RGB per pixel.
    pub pixels: Vec<u8>,
}

impl TopViewImage {
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity((width * height * 3) as usize);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self { width, height, pixels }
    }

    fn index(&self, x: u32, y: u32) -> usize {
        3 * (y * self.width + x) as usize
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.index(x, y);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.index(x, y);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Writes the image as binary PPM (P6, maxval 255).
    pub fn write_ppm(&self, w: &mut dyn Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        Ok(())
    }

    /// Reads a binary PPM (P6). Accepts whitespace and `#` comments in the
    /// header, as the format allows.
    pub fn read_ppm(r: &mut dyn BufRead) -> Result<Self> {
        let mut magic = [0u8; 2];
        r.read_exact(&mut magic)?;
        if &magic != b"P6" {
            return Err(ReachError::InvalidConfig("not a P6 PPM file".into()));
        }
        let mut fields = [0u64; 3];
        for field in &mut fields {
            *field = read_ppm_int(r)?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(ReachError::InvalidConfig(format!(
                "unsupported PPM maxval {maxval} (need 255)"
            )));
        }
        if width == 0 || height == 0 || width > 1 << 15 || height > 1 << 15 {
            return Err(ReachError::InvalidConfig(format!(
                "unreasonable PPM dimensions {width}x{height}"
            )));
        }
        let mut pixels = vec![0u8; (width * height * 3) as usize];
        r.read_exact(&mut pixels)?;
        Ok(Self { width: width as u32, height: height as u32, pixels })
    }
}

/// Skips whitespace/comments, then parses one decimal integer; consumes the
/// single whitespace byte that terminates it.
fn read_ppm_int(r: &mut dyn BufRead) -> Result<u64> {
    let mut byte = [0u8; 1];
    // Skip whitespace and comment lines.
    loop {
        r.read_exact(&mut byte)?;
        match byte[0] {
            b' ' | b'\t' | b'\r' | b'\n' => continue,
            b'#' => {
                while byte[0] != b'\n' {
                    r.read_exact(&mut byte)?;
                }
            }
            _ => break,
        }
    }
    if !byte[0].is_ascii_digit() {
        return Err(ReachError::InvalidConfig("malformed PPM header".into()));
    }
    let mut value: u64 = 0;
    while byte[0].is_ascii_digit() {
        value = value
            .saturating_mul(10)
            .saturating_add((byte[0] - b'0') as u64);
        r.read_exact(&mut byte)?;
    }
    if !byte[0].is_ascii_whitespace() {
        return Err(ReachError::InvalidConfig("malformed PPM header".into()));
    }
    Ok(value)
}

/// Affine map between continuous pixel coordinates and world meters on the
/// table plane. Pixel (i + 0.5, j + 0.5) is the center of column i, row j;
/// row 0 is the far (+y) edge, so `scale_y` is negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub scale_x: f64,
    pub scale_y: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    /// World z assigned to extracted targets (the cylinder center height).
    pub target_z: f64,
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        let finite = self.scale_x.is_finite()
            && self.scale_y.is_finite()
            && self.origin_x.is_finite()
            && self.origin_y.is_finite()
            && self.target_z.is_finite();
        if !finite {
            return Err(ReachError::NonFinite("calibration".into()));
        }
        if self.scale_x == 0.0 || self.scale_y == 0.0 {
            return Err(ReachError::InvalidConfig("calibration scales must be nonzero".into()));
        }
        Ok(())
    }

    pub fn pixel_to_world(&self, px: f64, py: f64) -> [f64; 2] {
        [self.origin_x + self.scale_x * px, self.origin_y + self.scale_y * py]
    }

    pub fn world_to_pixel(&self, x: f64, y: f64) -> [f64; 2] {
        [(x - self.origin_x) / self.scale_x, (y - self.origin_y) / self.scale_y]
    }
}

/// Top-view camera description: image size, the world rectangle it covers,
/// and the draw palette.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub width: u32,
    pub height: u32,
    /// World extent covered by the image, meters.
    pub world_x: [f64; 2],
    pub world_y: [f64; 2],
    pub cylinder_radius_px: f64,
    pub arm_width_px: f64,
    /// The visible tabletop is the sampling rectangle inflated by this margin
    /// (meters); it must stay inside the camera's world rectangle.
    pub table_margin: f64,
    pub background_rgb: [u8; 3],
    pub table_rgb: [u8; 3],
    pub arm_rgb: [u8; 3],
    pub cylinder_rgb: [u8; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        // Covers the default sampling rectangle plus a 0.10 m margin. The
        // margin keeps target disks away from the image border and keeps the
        // arm's zero pose (above the base at y=0) out of frame, so reset-pose
        // query images contain only the cylinder.
        Self {
            width: 256,
            height: 256,
            world_x: [-0.9, 0.9],
            world_y: [0.05, 0.95],
            cylinder_radius_px: 6.0,
            arm_width_px: 2.4,
            table_margin: 0.06,
            background_rgb: [90, 90, 90],
            table_rgb: [200, 200, 200],
            arm_rgb: [110, 110, 110],
            cylinder_rgb: [30, 60, 220],
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(ReachError::InvalidConfig("camera dimensions must be positive".into()));
        }
        if self.world_x[0] >= self.world_x[1] || self.world_y[0] >= self.world_y[1] {
            return Err(ReachError::InvalidConfig(
                "camera world rectangle must be non-degenerate".into(),
            ));
        }
        if !(self.cylinder_radius_px > 0.0) || !(self.arm_width_px > 0.0) {
            return Err(ReachError::InvalidConfig(
                "cylinder radius and arm width must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The camera covering `table`'s sampling rectangle plus a 0.10 m margin.
    pub fn for_table(table: &TableGeometry) -> Self {
        let margin = 0.10;
        Self {
            world_x: [table.x_range[0] - margin, table.x_range[1] + margin],
            world_y: [table.y_range[0] - margin, table.y_range[1] + margin],
            ..Self::default()
        }
    }

    /// The affine pixel↔world map implied by the camera rectangle.
    pub fn calibration(&self, table: &TableGeometry) -> Calibration {
        Calibration {
            scale_x: (self.world_x[1] - self.world_x[0]) / self.width as f64,
            scale_y: -(self.world_y[1] - self.world_y[0]) / self.height as f64,
            origin_x: self.world_x[0],
            origin_y: self.world_y[1],
            target_z: table.target_z(),
        }
    }
}

/// Renders the orthographic top view: table rectangle, arm polyline, and the
/// target cylinder (if present) on top. Deterministic.
pub fn render_scene(
    chain: &KinematicChain,
    q: &JointVector,
    table: &TableGeometry,
    target: Option<&TargetPosition>,
    cam: &CameraConfig,
) -> Result<TopViewImage> {
    cam.validate()?;
    table.validate()?;
    let cal = cam.calibration(table);
    let mut img = TopViewImage::filled(cam.width, cam.height, cam.background_rgb);

    // Tabletop: the sampling rectangle inflated by the configured margin.
    let tx = [table.x_range[0] - cam.table_margin, table.x_range[1] + cam.table_margin];
    let ty = [table.y_range[0] - cam.table_margin, table.y_range[1] + cam.table_margin];
    for py in 0..cam.height {
        for px in 0..cam.width {
            let [wx, wy] = cal.pixel_to_world(px as f64 + 0.5, py as f64 + 0.5);
            if wx >= tx[0] && wx <= tx[1] && wy >= ty[0] && wy <= ty[1] {
                img.set(px, py, cam.table_rgb);
            }
        }
    }

    // Arm: thick polyline through the frame origins, projected onto the
    // table plane.
    let points = frame_positions(chain, q)?;
    let px_points: Vec<[f64; 2]> = points
        .iter()
        .map(|p| cal.world_to_pixel(p[0], p[1]))
        .collect();
    for pair in px_points.windows(2) {
        draw_segment(&mut img, &pair[0], &pair[1], cam.arm_width_px, cam.arm_rgb);
    }

    // Cylinder on top.
    if let Some(target) = target {
        let center = cal.world_to_pixel(target.p[0], target.p[1]);
        draw_disk(&mut img, &center, cam.cylinder_radius_px, cam.cylinder_rgb);
    }
    Ok(img)
}

fn draw_segment(img: &mut TopViewImage, a: &[f64; 2], b: &[f64; 2], width_px: f64, rgb: [u8; 3]) {
    let radius = width_px / 2.0;
    let (x0, x1) = (a[0].min(b[0]) - radius, a[0].max(b[0]) + radius);
    let (y0, y1) = (a[1].min(b[1]) - radius, a[1].max(b[1]) + radius);
    let px0 = x0.floor().max(0.0) as u32;
    let px1 = (x1.ceil().min(img.width as f64 - 1.0)).max(0.0) as u32;
    let py0 = y0.floor().max(0.0) as u32;
    let py1 = (y1.ceil().min(img.height as f64 - 1.0)).max(0.0) as u32;
    if x1 < 0.0 || y1 < 0.0 || x0 > img.width as f64 || y0 > img.height as f64 {
        return;
    }
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    for py in py0..=py1 {
        for px in px0..=px1 {
            let p = [px as f64 + 0.5, py as f64 + 0.5];
            let ap = [p[0] - a[0], p[1] - a[1]];
            let t = if len2 > 0.0 {
                ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let dx = ap[0] - t * ab[0];
            let dy = ap[1] - t * ab[1];
            if dx * dx + dy * dy <= radius * radius {
                img.set(px, py, rgb);
            }
        }
    }
}

fn draw_disk(img: &mut TopViewImage, center: &[f64; 2], radius: f64, rgb: [u8; 3]) {
    let px0 = (center[0] - radius).floor().max(0.0) as u32;
    let px1 = ((center[0] + radius).ceil().min(img.width as f64 - 1.0)).max(0.0) as u32;
    let py0 = (center[1] - radius).floor().max(0.0) as u32;
    let py1 = ((center[1] + radius).ceil().min(img.height as f64 - 1.0)).max(0.0) as u32;
    for py in py0..=py1 {
        for px in px0..=px1 {
            let dx = px as f64 + 0.5 - center[0];
            let dy = py as f64 + 0.5 - center[1];
            if dx * dx + dy * dy <= radius * radius {
                img.set(px, py, rgb);
            }
        }
    }
}

/// Per-pixel, per-channel arithmetic mean of cylinder-free scenes, rounded to
/// 8 bits. The input images must share dimensions.
pub fn build_background_mask(images: &[TopViewImage]) -> Result<TopViewImage> {
    let first = images
        .first()
        .ok_or_else(|| ReachError::InvalidConfig("background mask needs at least one image".into()))?;
    let mut sums = vec![0u64; first.pixels.len()];
    for img in images {
        if img.width != first.width || img.height != first.height {
            return Err(ReachError::Dimension {
                what: "background mask image",
                expected: first.pixels.len(),
                got: img.pixels.len(),
            });
        }
        for (sum, &value) in sums.iter_mut().zip(img.pixels.iter()) {
            *sum += value as u64;
        }
    }
    let n = images.len() as f64;
    let pixels = sums
        .iter()
        .map(|&sum| (sum as f64 / n).round() as u8)
        .collect();
    Ok(TopViewImage { width: first.width, height: first.height, pixels })
}

/// Subtracts the mask from a query image (max-channel absolute difference),
/// binarizes strictly above `theta`, and returns the blob centroid mapped to
/// world coordinates; `None` when no pixel passes.
pub fn extract_target(
    img: &TopViewImage,
    mask: &TopViewImage,
    theta: u8,
    cal: &Calibration,
) -> Result<Option<[f64; 3]>> {
    if img.width != mask.width || img.height != mask.height {
        return Err(ReachError::Dimension {
            what: "extraction query vs mask",
            expected: mask.pixels.len(),
            got: img.pixels.len(),
        });
    }
    if theta == 0 {
        return Err(ReachError::InvalidConfig("binarization threshold must be in 1..=255".into()));
    }
    cal.validate()?;
    let mut count = 0u64;
    let mut sum_x = 0.0;
    let mut sum_y = 0.0;
    for py in 0..img.height {
        for px in 0..img.width {
            let a = img.get(px, py);
            let b = mask.get(px, py);
            let diff = (0..3)
                .map(|c| (a[c] as i16 - b[c] as i16).unsigned_abs() as u8)
                .max()
                .unwrap();
            if diff > theta {
                count += 1;
                sum_x += px as f64 + 0.5;
                sum_y += py as f64 + 0.5;
            }
        }
    }
    if count == 0 {
        return Ok(None);
    }
    let centroid = cal.pixel_to_world(sum_x / count as f64, sum_y / count as f64);
    Ok(Some([centroid[0], centroid[1], cal.target_z]))
}

/// Builds the background mask the extraction pipeline subtracts: `n_images`
/// cylinder-free renders with arm poses drawn uniformly from `space`,
/// averaged per pixel.
pub fn background_mask_for(
    chain: &KinematicChain,
    table: &TableGeometry,
    cam: &CameraConfig,
    space: &ActionSpace,
    n_images: usize,
    rng: &mut ChaCha20Rng,
) -> Result<TopViewImage> {
    if n_images == 0 {
        return Err(ReachError::Usage("background mask needs at least one image".into()));
    }
    let mut images = Vec::with_capacity(n_images);
    for _ in 0..n_images {
        let pose = space.sample_uniform(rng);
        images.push(render_scene(chain, &pose, table, None, cam)?);
    }
    build_background_mask(&images)
}

/// Evaluates a frozen policy on camera images instead of ground-truth
/// observations: each episode renders the reset scene, extracts the target
/// via mask differencing, and substitutes the estimate into the observation
/// the policy sees. The environment still scores against the true target.
///
/// Episodes where no blob passes the threshold are recorded as failures
/// (NaN distance, excluded from the average) and counted in
/// `extraction_failures`.
pub fn eval_from_images(
    agent: &dyn Agent,
    env: &mut dyn EnvHandle,
    mask: &TopViewImage,
    theta: u8,
    cal: &Calibration,
    n_episodes: usize,
    thresholds: &[f64],
    rng: &mut ChaCha20Rng,
) -> Result<EvalReport> {
    cal.validate()?;
    evaluate_with_target_source(agent, env, n_episodes, thresholds, rng, &mut |env, _obs| {
        let img = env.render()?;
        Ok(match extract_target(&img, mask, theta, cal)? {
            Some(p) => EpisodeTarget::Substituted(p),
            None => EpisodeTarget::Unavailable,
        })
    })
}

/// The image-evaluation loop with the extractor replaced by the true target
/// coordinates. Exists to prove the substitution plumbing is lossless: with
/// perfect "extraction" the report must be bitwise identical to a direct
/// evaluation under the same seeds.
pub fn eval_with_ground_truth_injection(
    agent: &dyn Agent,
    env: &mut dyn EnvHandle,
    n_episodes: usize,
    thresholds: &[f64],
    rng: &mut ChaCha20Rng,
) -> Result<EvalReport> {
    evaluate_with_target_source(agent, env, n_episodes, thresholds, rng, &mut |_, obs| {
        Ok(EpisodeTarget::Substituted(obs.target_position))
    })
}
