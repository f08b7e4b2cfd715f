//! Fixed codecs between pixel-space modalities and the diffusion latent grid.
//!
//! Every latent is an `H × W × C` grid in roughly [−1, 1]: images keep their
//! three channels, depth is one channel, masks become palette colors.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Result, TideError};
use crate::tape::Mat;

/// Minimum pairwise distance between palette colors.
pub const PALETTE_MARGIN: f64 = 0.5;

const CUBE_CORNERS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
];

/// Category colors used to diffuse masks as continuous grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    colors: Vec<[f64; 3]>,
    names: Vec<String>,
}

impl Palette {
    pub fn new(colors: Vec<[f64; 3]>, names: Vec<String>) -> Result<Self> {
        if colors.is_empty() || colors.len() != names.len() {
            return Err(TideError::invalid("palette needs one name per color"));
        }
        if colors.len() > u8::MAX as usize {
            return Err(TideError::invalid("too many palette entries"));
        }
        for (i, a) in colors.iter().enumerate() {
            for b in &colors[i + 1..] {
                if dist2(a, b).sqrt() < PALETTE_MARGIN {
                    return Err(TideError::invalid(format!("palette colors {a:?} and {b:?} closer than margin")));
                }
            }
        }
        Ok(Self { colors, names })
    }

    /// Corners of the [−1, 1]³ cube in a fixed order, one per name (at most 8).
    pub fn cube<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.len() > CUBE_CORNERS.len() {
            return Err(TideError::invalid("cube palette holds at most 8 categories"));
        }
        Self::new(
            CUBE_CORNERS[..names.len()].to_vec(),
            names.iter().map(|n| n.as_ref().to_string()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Index of the nearest color; ties go to the lowest index.
    pub fn nearest(&self, c: [f64; 3]) -> u8 {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, p) in self.colors.iter().enumerate() {
            let d = dist2(p, &c);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best as u8
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn encode_mask(mask: ArrayView2<'_, u8>, palette: &Palette) -> Result<Array3<f64>> {
    let (h, w) = mask.dim();
    let mut out = Array3::zeros((h, w, 3));
    for ((y, x), &k) in mask.indexed_iter() {
        let color = palette
            .colors
            .get(k as usize)
            .ok_or_else(|| TideError::invalid(format!("category {k} outside palette of {}", palette.len())))?;
        for c in 0..3 {
            out[[y, x, c]] = color[c];
        }
    }
    Ok(out)
}

pub fn decode_mask(grid: ArrayView3<'_, f64>, palette: &Palette) -> Result<Array2<u8>> {
    let (h, w, c) = grid.dim();
    if c != 3 {
        return Err(TideError::shape(format!("mask grid needs 3 channels, got {c}")));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(TideError::NonFinite("mask grid".into()));
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        palette.nearest([grid[[y, x, 0]], grid[[y, x, 1]], grid[[y, x, 2]]])
    }))
}

/// Maps depth in [0, 1] to a single-channel grid in [−1, 1].
pub fn encode_depth(depth: ArrayView2<'_, f32>) -> Result<Array3<f64>> {
    if let Some(v) = depth.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(TideError::invalid(format!("depth {v} outside [0, 1]")));
    }
    let (h, w) = depth.dim();
    Ok(Array3::from_shape_fn((h, w, 1), |(y, x, _)| 2.0 * depth[[y, x]] as f64 - 1.0))
}

/// Inverse of [`encode_depth`], clamping to [0, 1].
pub fn decode_depth(grid: ArrayView3<'_, f64>) -> Result<Array2<f32>> {
    let (h, w, c) = grid.dim();
    if c != 1 {
        return Err(TideError::shape(format!("depth grid needs 1 channel, got {c}")));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(TideError::NonFinite("depth grid".into()));
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| (((grid[[y, x, 0]] + 1.0) / 2.0).clamp(0.0, 1.0)) as f32))
}

/// Maps an RGB image in [0, 1] to [−1, 1].
pub fn encode_image(image: ArrayView3<'_, f32>) -> Array3<f64> {
    image.mapv(|v| 2.0 * v as f64 - 1.0)
}

/// Inverse of [`encode_image`], clamping to [0, 1].
pub fn decode_image(grid: ArrayView3<'_, f64>) -> Result<Array3<f32>> {
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(TideError::NonFinite("image grid".into()));
    }
    Ok(grid.mapv(|v| (((v + 1.0) / 2.0).clamp(0.0, 1.0)) as f32))
}

/// Flattens non-overlapping `patch × patch` tiles into rows, raster order.
/// Features within a row are ordered (dy, dx, channel).
pub fn patchify(grid: ArrayView3<'_, f64>, patch: usize) -> Result<Mat> {
    let (h, w, c) = grid.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(TideError::shape(format!("patch {patch} does not divide {h}×{w}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Mat::zeros((gh * gw, patch * patch * c));
    for py in 0..gh {
        for px in 0..gw {
            let row = py * gw + px;
            let mut f = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..c {
                        out[[row, f]] = grid[[py * patch + dy, px * patch + dx, ch]];
                        f += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn unpatchify(tokens: ArrayView2<'_, f64>, h: usize, w: usize, channels: usize, patch: usize) -> Result<Array3<f64>> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(TideError::shape(format!("patch {patch} does not divide {h}×{w}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    if tokens.dim() != (gh * gw, patch * patch * channels) {
        return Err(TideError::shape(format!(
            "tokens {:?} do not tile {h}×{w}×{channels} at patch {patch}",
            tokens.dim()
        )));
    }
    let mut out = Array3::zeros((h, w, channels));
    for py in 0..gh {
        for px in 0..gw {
            let row = py * gw + px;
            let mut f = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..channels {
                        out[[py * patch + dy, px * patch + dx, ch]] = tokens[[row, f]];
                        f += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Patchify followed by a linear projection `tokens · Wᵀ` (W is width × patch features).
pub fn patch_embed(grid: ArrayView3<'_, f64>, patch: usize, projection: &Mat) -> Result<Mat> {
    let tokens = patchify(grid, patch)?;
    if projection.ncols() != tokens.ncols() {
        return Err(TideError::shape(format!(
            "projection expects {} features, patches have {}",
            projection.ncols(),
            tokens.ncols()
        )));
    }
    Ok(tokens.dot(&projection.t()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array};
    use proptest::prelude::*;

    fn six() -> Palette {
        Palette::cube(&["background", "fish", "reef", "plant", "wreck", "diver"]).unwrap()
    }

    fn two() -> Palette {
        Palette::new(vec![[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]], vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn uniform_mask_is_constant_color() {
        let p = six();
        let g = encode_mask(Array2::zeros((3, 2)).view(), &p).unwrap();
        assert!(g.iter().all(|&v| v == -1.0));
    }

    #[test]
    fn two_color_lookup() {
        let g = encode_mask(arr2(&[[0u8], [1]]).view(), &two()).unwrap();
        assert_eq!(g.as_slice().unwrap(), &[-1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn decode_rules() {
        let p = two();
        let mut g = Array3::zeros((1, 3, 3));
        g.slice_mut(ndarray::s![0, 1, ..]).fill(0.9);
        g.slice_mut(ndarray::s![0, 2, ..]).fill(-1.0);
        // (0,0,0) is equidistant and goes to the lower id
        assert_eq!(decode_mask(g.view(), &p).unwrap(), arr2(&[[0u8, 1, 0]]));
        g[[0, 0, 0]] = f64::NAN;
        assert!(decode_mask(g.view(), &p).is_err());
    }

    #[test]
    fn mask_id_out_of_range() {
        assert!(encode_mask(arr2(&[[2u8]]).view(), &two()).is_err());
    }

    #[test]
    fn palette_margin_enforced() {
        assert!(Palette::new(vec![[0.0; 3], [0.1, 0.0, 0.0]], vec!["a".into(), "b".into()]).is_err());
        assert!(Palette::cube(&["x"; 9]).is_err());
    }

    #[test]
    fn depth_codec() {
        let d = arr2(&[[0.5f32, 0.0, 1.0]]);
        let g = encode_depth(d.view()).unwrap();
        assert_eq!(g[[0, 0, 0]], 0.0);
        assert_eq!(decode_depth(g.view()).unwrap(), d);
        let over = Array3::from_elem((1, 1, 1), 1.4);
        assert_eq!(decode_depth(over.view()).unwrap()[[0, 0]], 1.0);
        assert!(encode_depth(arr2(&[[1.2f32]]).view()).is_err());
    }

    #[test]
    fn patchify_arithmetic() {
        let g = Array::from_shape_fn((16, 16, 3), |(y, x, c)| (y * 100 + x * 3 + c) as f64);
        let t = patchify(g.view(), 4).unwrap();
        assert_eq!(t.dim(), (16, 48));
        assert_eq!(unpatchify(t.view(), 16, 16, 3, 4).unwrap(), g);
        let whole = patchify(g.view(), 16).unwrap();
        assert_eq!(whole.dim(), (1, 768));
        assert_eq!(whole.row(0).to_vec(), g.iter().copied().collect::<Vec<_>>());
        assert!(patchify(g.view(), 5).is_err());
    }

    #[test]
    fn identity_projection_round_trip() {
        let g = Array::from_shape_fn((8, 8, 1), |(y, x, _)| (y as f64 - x as f64) * 0.1);
        let e = patch_embed(g.view(), 2, &Mat::eye(4)).unwrap();
        assert_eq!(unpatchify(e.view(), 8, 8, 1, 2).unwrap(), g);
    }

    proptest! {
        #[test]
        fn codecs_invert(cats in proptest::collection::vec(0u8..6, 12), depths in proptest::collection::vec(0u32..(1 << 24), 12)) {
            let p = six();
            let m = Array2::from_shape_vec((3, 4), cats).unwrap();
            prop_assert_eq!(decode_mask(encode_mask(m.view(), &p).unwrap().view(), &p).unwrap(), m);
            let d = Array2::from_shape_vec((3, 4), depths.into_iter().map(|k| k as f32 / (1 << 24) as f32).collect()).unwrap();
            prop_assert_eq!(decode_depth(encode_depth(d.view()).unwrap().view()).unwrap(), d);
        }
    }
}
