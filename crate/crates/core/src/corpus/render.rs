//! Procedural pseudo-images and skeleton templates.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::vocab::Appearance;
use crate::error::Result;
use crate::model::{ImageInput, Keypoint, PoseInput, NUM_JOINTS};
use crate::numerics::Tensor;

type Rgb = [f32; 3];

const CLOTH_RGB: [Rgb; 8] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.30, 0.85],
    [0.15, 0.70, 0.25],
    [0.08, 0.08, 0.08],
    [0.92, 0.92, 0.92],
    [0.90, 0.85, 0.15],
    [0.50, 0.50, 0.50],
    [0.55, 0.20, 0.70],
];

const SCENE_RGB: [Rgb; 8] = [
    [0.35, 0.35, 0.40],
    [0.30, 0.55, 0.30],
    [0.60, 0.50, 0.40],
    [0.75, 0.70, 0.60],
    [0.55, 0.35, 0.30],
    [0.70, 0.70, 0.75],
    [0.20, 0.20, 0.25],
    [0.40, 0.65, 0.45],
];

/// Body box inside the unit image square that templates are drawn into.
const BOX_X: (f32, f32) = (0.25, 0.75);
const BOX_Y: (f32, f32) = (0.15, 0.90);

const LIMBS: [(usize, usize); 14] = [
    (0, 5),
    (0, 6),
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

const STANDING: [(f32, f32); NUM_JOINTS] = [
    (0.50, 0.08),
    (0.46, 0.05),
    (0.54, 0.05),
    (0.42, 0.07),
    (0.58, 0.07),
    (0.36, 0.20),
    (0.64, 0.20),
    (0.32, 0.37),
    (0.68, 0.37),
    (0.30, 0.52),
    (0.70, 0.52),
    (0.42, 0.55),
    (0.58, 0.55),
    (0.42, 0.76),
    (0.58, 0.76),
    (0.42, 0.96),
    (0.58, 0.96),
];

fn with(mut base: [(f32, f32); NUM_JOINTS], edits: &[(usize, (f32, f32))]) -> [(f32, f32); NUM_JOINTS] {
    for &(j, p) in edits {
        base[j] = p;
    }
    base
}

fn rotate(base: [(f32, f32); NUM_JOINTS], center: (f32, f32), degrees: f32) -> [(f32, f32); NUM_JOINTS] {
    let (s, c) = degrees.to_radians().sin_cos();
    base.map(|(u, v)| {
        let (du, dv) = (u - center.0, v - center.1);
        ((center.0 + du * c - dv * s).clamp(0.0, 1.0), (center.1 + du * s + dv * c).clamp(0.0, 1.0))
    })
}

/// Keypoints of an action label in body-box coordinates.
pub fn skeleton_template(action: &str) -> Option<[(f32, f32); NUM_JOINTS]> {
    let t = match action {
        "standing" => STANDING,
        "walking" => with(
            STANDING,
            &[(9, (0.22, 0.47)), (10, (0.76, 0.55)), (13, (0.38, 0.76)), (14, (0.64, 0.75)), (15, (0.30, 0.95)), (16, (0.70, 0.94))],
        ),
        "running" => with(
            STANDING,
            &[
                (7, (0.30, 0.33)),
                (8, (0.74, 0.36)),
                (9, (0.40, 0.25)),
                (10, (0.66, 0.50)),
                (13, (0.34, 0.70)),
                (14, (0.68, 0.66)),
                (15, (0.22, 0.86)),
                (16, (0.82, 0.80)),
            ],
        ),
        "waving" => with(STANDING, &[(8, (0.78, 0.14)), (10, (0.80, 0.0))]),
        "falling" => rotate(STANDING, (0.5, 0.6), 55.0),
        "lying" => STANDING.map(|(u, v)| {
            let (ru, rv) = (v, 1.0 - u);
            (ru, 0.8 + (rv - 0.5) * 0.3)
        }),
        "fighting" => with(
            STANDING,
            &[
                (7, (0.26, 0.26)),
                (8, (0.74, 0.26)),
                (9, (0.20, 0.12)),
                (10, (0.80, 0.12)),
                (13, (0.34, 0.76)),
                (14, (0.66, 0.76)),
                (15, (0.24, 0.96)),
                (16, (0.76, 0.96)),
            ],
        ),
        "climbing" => with(
            STANDING,
            &[(7, (0.34, 0.12)), (8, (0.66, 0.12)), (9, (0.34, 0.0)), (10, (0.66, 0.0)), (13, (0.60, 0.45)), (15, (0.62, 0.62))],
        ),
        _ => return None,
    };
    Some(t)
}

/// Maps body-box coordinates into the unit image square.
pub fn box_to_image(u: f32, v: f32) -> (f32, f32) {
    (BOX_X.0 + u * (BOX_X.1 - BOX_X.0), BOX_Y.0 + v * (BOX_Y.1 - BOX_Y.0))
}

/// Jittered keypoints for an action. Roughly one joint in twenty is marked
/// as occluded with a low confidence.
pub fn sample_keypoints<R: Rng>(template: &[(f32, f32); NUM_JOINTS], jitter: f32, rng: &mut R) -> Vec<Keypoint> {
    let n = Normal::new(0.0f32, jitter.max(0.0)).expect("finite jitter");
    template
        .iter()
        .map(|&(u, v)| {
            let (x, y) = box_to_image((u + n.sample(rng)).clamp(0.0, 1.0), (v + n.sample(rng)).clamp(0.0, 1.0));
            let confidence = if rng.random::<f32>() < 0.05 {
                rng.random_range(0.0..0.25)
            } else {
                rng.random_range(0.7..=1.0)
            };
            Keypoint { x, y, confidence }
        })
        .collect()
}

/// Heatmap spread in pixels for a given image size.
pub fn heatmap_sigma(size: usize) -> f32 {
    size as f32 / 16.0
}

pub fn render_pose(keypoints: Vec<Keypoint>, size: usize) -> Result<PoseInput> {
    PoseInput::new(keypoints, size, heatmap_sigma(size))
}

/// Colour and texture code per identity: top RGB, top-type one-hot, bottom RGB,
/// bottom-type one-hot.
pub fn appearance_vector(app: &Appearance) -> Vec<f32> {
    let mut v = Vec::with_capacity(14);
    v.extend(CLOTH_RGB[app.top_color]);
    v.extend((0..4).map(|k| (k == app.top_type) as u8 as f32));
    v.extend(CLOTH_RGB[app.bottom_color]);
    v.extend((0..4).map(|k| (k == app.bottom_type) as u8 as f32));
    v
}

/// Scene RGB followed by a one-hot border pattern.
pub fn background_vector(app: &Appearance) -> Vec<f32> {
    let mut v = Vec::with_capacity(7);
    v.extend(SCENE_RGB[app.scene]);
    v.extend((0..4).map(|k| (k == app.scene % 4) as u8 as f32));
    v
}

fn texture(kind: usize, r: usize, c: usize, unit: usize) -> f32 {
    let (r, c) = (r / unit, c / unit);
    match kind {
        1 => [1.0, -1.0][r % 2],
        2 => [1.0, -1.0][c % 2],
        3 => [1.0, -1.0][(r + c) % 2],
        _ => 0.0,
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Pixels covered by the stick figure through the keypoints.
pub fn silhouette_mask(keypoints: &[Keypoint], size: usize, thickness: f32) -> Vec<bool> {
    let s = size as f32;
    let mut mask = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            let p = ((c as f32 + 0.5) / s, (r as f32 + 0.5) / s);
            mask[r * size + c] = LIMBS.iter().any(|&(a, b)| {
                let (ka, kb) = (keypoints[a], keypoints[b]);
                segment_distance(p, (ka.x, ka.y), (kb.x, kb.y)) < thickness
            });
        }
    }
    mask
}

#[derive(Clone, Copy, Debug)]
pub struct RenderNoise {
    pub base_std: f32,
    pub silhouette_std: f32,
}

/// Background pattern in the border ring, clothing colours and textures in the
/// centre. The pose only changes the variance of zero-mean noise along the
/// silhouette, so the mean image of an identity does not depend on its action.
pub fn render_image<R: Rng>(
    app: &Appearance,
    keypoints: &[Keypoint],
    size: usize,
    noise: RenderNoise,
    rng: &mut R,
) -> Result<ImageInput> {
    let border = size / 4;
    let unit = (size / 16).max(1);
    let mask = silhouette_mask(keypoints, size, 0.06);
    let base = Normal::new(0.0f32, noise.base_std).expect("finite noise");
    let sil = Normal::new(0.0f32, noise.silhouette_std).expect("finite noise");
    let scene = SCENE_RGB[app.scene];
    let mut data = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            let inner = (border..size - border).contains(&r) && (border..size - border).contains(&c);
            let (rgb, shade) = if inner {
                if r < size / 2 {
                    (CLOTH_RGB[app.top_color], 0.25 * texture(app.top_type, r, c, unit))
                } else {
                    (CLOTH_RGB[app.bottom_color], 0.25 * texture(app.bottom_type, r, c, unit))
                }
            } else {
                let (y, x) = (r as f32 / size as f32, c as f32 / size as f32);
                let shade = match app.scene % 4 {
                    1 => 0.3 * (y - 0.5),
                    2 => 0.3 * (x - 0.5),
                    3 => 0.15 * texture(1, r + c, 0, unit),
                    _ => 0.0,
                };
                (scene, shade)
            };
            let dist = if mask[r * size + c] { &sil } else { &base };
            for ch in rgb {
                data.push(ch * (1.0 + shade) + dist.sample(rng));
            }
        }
    }
    ImageInput::new(Tensor::new(&[size, size, 3], data)?)
}
