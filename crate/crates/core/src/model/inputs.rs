use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const CLS: u32 = 0;
pub const PAD: u32 = 1;
pub const MASK: u32 = 2;
pub const SEP: u32 = 3;
/// Ids below this value are special tokens.
pub const NUM_SPECIAL: u32 = 4;
pub const MAX_TEXT_LEN: usize = 56;
pub const NUM_JOINTS: usize = 17;

pub fn is_special(token: u32) -> bool {
    token < NUM_SPECIAL
}

/// Caption token ids, `CLS` first, at most [`MAX_TEXT_LEN`] long.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct TextInput {
    tokens: Vec<u32>,
}

impl TextInput {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.first() != Some(&CLS) {
            return Err(Error::invalid("text_input", "sequence must start with CLS"));
        }
        if tokens.len() > MAX_TEXT_LEN {
            return Err(Error::invalid(
                "text_input",
                format!("{} tokens exceeds the maximum of {MAX_TEXT_LEN}", tokens.len()),
            ));
        }
        Ok(Self { tokens })
    }

    /// Prepends `CLS` to body tokens, truncating to the maximum length.
    pub fn from_body(body: &[u32]) -> Self {
        let mut tokens = Vec::with_capacity(body.len() + 1);
        tokens.push(CLS);
        tokens.extend(body.iter().copied().take(MAX_TEXT_LEN - 1));
        Self { tokens }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Tokens after `CLS`.
    pub fn body(&self) -> &[u32] {
        &self.tokens[1..]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }
}

impl TryFrom<Vec<u32>> for TextInput {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TextInput> for Vec<u32> {
    fn from(t: TextInput) -> Self {
        t.tokens
    }
}

/// RGB image, `H × W × 3` with values roughly in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    pub pixels: Tensor<f32>,
}

impl ImageInput {
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        match pixels.shape() {
            [h, w, 3] if h == w => Ok(Self { pixels }),
            s => Err(Error::invalid("image_input", format!("expected square H×W×3, got {s:?}"))),
        }
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub confidence: f32,
}

/// Human pose as 17 keypoints plus their rasterized heatmaps (`H × W × 17`).
#[derive(Clone, Debug, PartialEq)]
pub struct PoseInput {
    pub keypoints: Vec<Keypoint>,
    pub heatmaps: Tensor<f32>,
}

impl PoseInput {
    pub fn new(keypoints: Vec<Keypoint>, size: usize, sigma: f32) -> Result<Self> {
        let heatmaps = rasterize_keypoints(&keypoints, size, sigma)?;
        Ok(Self { keypoints, heatmaps })
    }

    pub fn from_parts(keypoints: Vec<Keypoint>, heatmaps: Tensor<f32>) -> Result<Self> {
        match heatmaps.shape() {
            [h, w, k] if h == w && *k == NUM_JOINTS => Ok(Self { keypoints, heatmaps }),
            s => Err(Error::invalid("pose_input", format!("expected H×W×{NUM_JOINTS}, got {s:?}"))),
        }
    }

    pub fn size(&self) -> usize {
        self.heatmaps.shape()[0]
    }

    /// Joints at or above a detection confidence.
    pub fn visible(&self, min_confidence: f32) -> usize {
        self.keypoints.iter().filter(|k| k.confidence >= min_confidence).count()
    }
}

/// Gaussian heatmap per joint, centred on the keypoint and scaled by its
/// confidence. Pixel `(r, c)` samples the point `((c + 0.5)/W, (r + 0.5)/H)`.
pub fn rasterize_keypoints(keypoints: &[Keypoint], size: usize, sigma: f32) -> Result<Tensor<f32>> {
    if keypoints.len() > NUM_JOINTS {
        return Err(Error::invalid("rasterize_keypoints", format!("more than {NUM_JOINTS} keypoints")));
    }
    for k in keypoints {
        let in_unit = |v: f32| (0.0..=1.0).contains(&v);
        if !in_unit(k.x) || !in_unit(k.y) || !in_unit(k.confidence) {
            return Err(Error::invalid("rasterize_keypoints", format!("keypoint outside the unit square: {k:?}")));
        }
    }
    let mut data = vec![0.0f32; size * size * NUM_JOINTS];
    let s = size as f32;
    let two_sigma2 = 2.0 * (sigma / s) * (sigma / s);
    for r in 0..size {
        for c in 0..size {
            let (px, py) = ((c as f32 + 0.5) / s, (r as f32 + 0.5) / s);
            for (j, k) in keypoints.iter().enumerate() {
                let d2 = (px - k.x).powi(2) + (py - k.y).powi(2);
                data[(r * size + c) * NUM_JOINTS + j] = k.confidence * (-d2 / two_sigma2).exp();
            }
        }
    }
    Tensor::new(&[size, size, NUM_JOINTS], data)
}

/// Splits an `H × W × C` map into non-overlapping `p × p` patches, one row per
/// patch in raster order, each row laid out as `(dy, dx, channel)`.
pub fn patchify<T: Scalar>(map: &Tensor<f32>, patch: usize) -> Result<Tensor<T>> {
    let [h, w, ch] = map.shape() else {
        return Err(Error::invalid("patchify", format!("expected rank 3, got {:?}", map.shape())));
    };
    let (h, w, ch) = (*h, *w, *ch);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(
            "corpus.patch_size",
            format!("patch size {patch} does not divide image size {h}×{w}"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row_len = patch * patch * ch;
    let src = map.data();
    let mut out = Vec::with_capacity(gh * gw * row_len);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                let r = py * patch + dy;
                let start = (r * w + px * patch) * ch;
                out.extend(src[start..start + patch * ch].iter().map(|&v| T::from_f64_lossy(v as f64)));
            }
        }
    }
    Tensor::new(&[gh * gw, row_len], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_input_contract() {
        assert!(TextInput::new(vec![]).is_err());
        assert!(TextInput::new(vec![5, 6]).is_err());
        assert!(TextInput::new(vec![CLS; MAX_TEXT_LEN + 1]).is_err());
        let long: Vec<u32> = (10..100).collect();
        let t = TextInput::from_body(&long);
        assert_eq!(t.len(), MAX_TEXT_LEN);
        assert_eq!(t.tokens()[0], CLS);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<TextInput>(&json).unwrap(), t);
        assert!(serde_json::from_str::<TextInput>("[4,5]").is_err());
    }

    #[test]
    fn heatmap_channel_peaks_at_keypoint() {
        let kps: Vec<Keypoint> = (0..NUM_JOINTS)
            .map(|j| Keypoint {
                x: (2.0 * j as f32 + 0.5) / 34.0,
                y: (33.5 - 2.0 * j as f32) / 34.0,
                confidence: 1.0,
            })
            .collect();
        let size = 34;
        let t = rasterize_keypoints(&kps, size, 1.0).unwrap();
        for (j, k) in kps.iter().enumerate() {
            let mut best = (0.0, 0, 0);
            for r in 0..size {
                for c in 0..size {
                    let v = t.data()[(r * size + c) * NUM_JOINTS + j];
                    if v > best.0 {
                        best = (v, r, c);
                    }
                }
            }
            assert_eq!(best.2, (k.x * size as f32) as usize);
            assert_eq!(best.1, (k.y * size as f32) as usize);
        }
        let bad = vec![Keypoint { x: 1.5, y: 0.0, confidence: 1.0 }];
        assert!(rasterize_keypoints(&bad, 8, 1.0).is_err());
    }

    #[test]
    fn patchify_layout() {
        let data: Vec<f32> = (0..4 * 4 * 3).map(|v| v as f32).collect();
        let img = Tensor::new(&[4, 4, 3], data).unwrap();
        let p = patchify::<f64>(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 12]);
        // Patch (0, 1): rows 0..2, cols 2..4.
        assert_eq!(&p.row(1)[..6], &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
        assert_eq!(&p.row(1)[6..], &[18.0, 19.0, 20.0, 21.0, 22.0, 23.0]);
        assert!(patchify::<f64>(&img, 3).is_err());
    }
}
