//! Multi-scale crop planning over an image raster, plus the bilinear
//! resampling used to feed each crop (and the whole image) to an encoder.

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CropError {
    #[error("crop configuration has no sizes and does not include the full image")]
    EmptyConfig,
    #[error("crop size {0}x{1} must be non-zero")]
    ZeroSize(u32, u32),
    #[error("rect {rect} does not fit inside a {width}x{height} image")]
    OutOfBounds { rect: CropRect, width: u32, height: u32 },
    #[error("target size {0}x{1} must be non-zero")]
    ZeroTarget(u32, u32),
    #[error("raster of {width}x{height} needs {expected} bytes, got {actual}")]
    BadRaster { width: u32, height: u32, expected: usize, actual: usize },
    #[error("image decode failed: {0}")]
    Decode(#[from] image::ImageError),
}

/// Axis-aligned pixel rectangle, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl CropRect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self { x: 0, y: 0, w: width, h: height }
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && u64::from(self.x) + u64::from(self.w) <= u64::from(width)
            && u64::from(self.y) + u64::from(self.h) <= u64::from(height)
    }
}

impl std::fmt::Display for CropRect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Stride equals the crop size: same-size crops never overlap.
    Grid,
    /// Stride is half the crop size (rounded down) on each axis.
    Overlap,
}

impl Placement {
    pub fn stride(self, size: u32) -> u32 {
        match self {
            Placement::Grid => size,
            Placement::Overlap => (size / 2).max(1),
        }
    }
}

impl std::str::FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "grid" => Ok(Placement::Grid),
            "overlap" => Ok(Placement::Overlap),
            other => Err(format!("unknown placement {other:?} (expected grid or overlap)")),
        }
    }
}

pub const DEFAULT_CROP_SIZES: [(u32, u32); 6] =
    [(32, 32), (56, 56), (112, 112), (224, 224), (56, 112), (112, 56)];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropConfig {
    /// `(width, height)` pairs in emission order.
    pub sizes: Vec<(u32, u32)>,
    pub placement: Placement,
    /// Append the whole-image rect unless a planned crop already covers it.
    pub include_full_image: bool,
}

impl CropConfig {
    pub fn new(placement: Placement) -> Self {
        Self { sizes: DEFAULT_CROP_SIZES.to_vec(), placement, include_full_image: false }
    }

    pub fn grid() -> Self {
        Self::new(Placement::Grid)
    }

    pub fn overlap() -> Self {
        Self::new(Placement::Overlap)
    }

    /// A plan with exactly one crop: the whole image.
    pub fn full_image_only() -> Self {
        Self { sizes: Vec::new(), placement: Placement::Grid, include_full_image: true }
    }
}

impl Default for CropConfig {
    fn default() -> Self {
        Self::grid()
    }
}

/// Number of crop positions along one axis. Partial tiles are dropped.
pub fn positions_per_axis(dim: u32, size: u32, stride: u32) -> u32 {
    if size == 0 || stride == 0 || size > dim {
        0
    } else {
        (dim - size) / stride + 1
    }
}

/// Plans every crop for a `width x height` image.
///
/// Sizes are visited in config order and positions row-major within each
/// size, starting at the origin. Sizes that do not fit on either axis
/// contribute nothing.
pub fn plan_crops(width: u32, height: u32, config: &CropConfig) -> Result<Vec<CropRect>, CropError> {
    if config.sizes.is_empty() && !config.include_full_image {
        return Err(CropError::EmptyConfig);
    }
    let mut rects = Vec::new();
    for &(w, h) in &config.sizes {
        if w == 0 || h == 0 {
            return Err(CropError::ZeroSize(w, h));
        }
        let sx = config.placement.stride(w);
        let sy = config.placement.stride(h);
        let nx = positions_per_axis(width, w, sx);
        let ny = positions_per_axis(height, h, sy);
        for row in 0..ny {
            for col in 0..nx {
                rects.push(CropRect::new(col * sx, row * sy, w, h));
            }
        }
    }
    if config.include_full_image && width > 0 && height > 0 {
        let full = CropRect::full(width, height);
        if !rects.contains(&full) {
            rects.push(full);
        }
    }
    Ok(rects)
}

/// Row-major interleaved RGB8 pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRaster {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl ImageRaster {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, CropError> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(CropError::BadRaster { width, height, expected, actual: pixels.len() });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self { width, height, pixels }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Decodes a PNG or JPEG file into RGB8.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CropError> {
        let img = image::open(path)?.to_rgb8();
        let (width, height) = img.dimensions();
        Ok(Self { width, height, pixels: img.into_raw() })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CropError> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        let (width, height) = img.dimensions();
        Ok(Self { width, height, pixels: img.into_raw() })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, CropError> {
        let buf = image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("raster length checked at construction");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CropError> {
        let buf = image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("raster length checked at construction");
        buf.save(path)?;
        Ok(())
    }
}

// Output sample `o` of `out` maps onto source coordinate o * (in - 1) / (out - 1),
// so the first and last output samples sit on the first and last source pixel centers.
fn source_coord(o: u32, out: u32, input: u32) -> f64 {
    if out <= 1 {
        (f64::from(input) - 1.0) / 2.0
    } else {
        f64::from(o) * (f64::from(input) - 1.0) / (f64::from(out) - 1.0)
    }
}

fn axis_taps(out: u32, input: u32, origin: u32) -> Vec<(u32, u32, f64)> {
    (0..out)
        .map(|o| {
            let s = source_coord(o, out, input);
            let i0 = s.floor() as u32;
            let i1 = (i0 + 1).min(input - 1);
            (origin + i0, origin + i1, s - f64::from(i0))
        })
        .collect()
}

/// Cuts `rect` out of `image` and resamples it to `target` with bilinear
/// interpolation.
pub fn extract_and_resize(
    image: &ImageRaster,
    rect: CropRect,
    target: (u32, u32),
) -> Result<ImageRaster, CropError> {
    if !rect.fits_in(image.width, image.height) {
        return Err(CropError::OutOfBounds { rect, width: image.width, height: image.height });
    }
    let (tw, th) = target;
    if tw == 0 || th == 0 {
        return Err(CropError::ZeroTarget(tw, th));
    }
    let xs = axis_taps(tw, rect.w, rect.x);
    let ys = axis_taps(th, rect.h, rect.y);
    let stride = image.width as usize * 3;
    let src = &image.pixels;
    let mut pixels = Vec::with_capacity(tw as usize * th as usize * 3);
    for &(y0, y1, fy) in &ys {
        let r0 = y0 as usize * stride;
        let r1 = y1 as usize * stride;
        for &(x0, x1, fx) in &xs {
            let c0 = x0 as usize * 3;
            let c1 = x1 as usize * 3;
            for ch in 0..3 {
                let p00 = f64::from(src[r0 + c0 + ch]);
                let p01 = f64::from(src[r0 + c1 + ch]);
                let p10 = f64::from(src[r1 + c0 + ch]);
                let p11 = f64::from(src[r1 + c1 + ch]);
                let top = p00 + (p01 - p00) * fx;
                let bottom = p10 + (p11 - p10) * fx;
                let v = top + (bottom - top) * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(ImageRaster { width: tw, height: th, pixels })
}

/// Scales the shorter side to `side` (aspect preserved), then takes the
/// centered `side x side` square.
pub fn preprocess_input(image: &ImageRaster, side: u32) -> Result<ImageRaster, CropError> {
    if side == 0 {
        return Err(CropError::ZeroTarget(side, side));
    }
    if image.width == 0 || image.height == 0 {
        return Err(CropError::BadRaster {
            width: image.width,
            height: image.height,
            expected: 1,
            actual: 0,
        });
    }
    let (scaled_w, scaled_h) = scaled_dims(image.width, image.height, side);
    let resized = if (scaled_w, scaled_h) == (image.width, image.height) {
        image.clone()
    } else {
        extract_and_resize(image, CropRect::full(image.width, image.height), (scaled_w, scaled_h))?
    };
    let x = (scaled_w - side) / 2;
    let y = (scaled_h - side) / 2;
    extract_and_resize(&resized, CropRect::new(x, y, side, side), (side, side))
}

/// Dimensions after scaling so the shorter side equals `side`.
pub fn scaled_dims(width: u32, height: u32, side: u32) -> (u32, u32) {
    let short = width.min(height);
    let scale = f64::from(side) / f64::from(short);
    let w = if width == short { side } else { ((f64::from(width) * scale).round() as u32).max(side) };
    let h = if height == short { side } else { ((f64::from(height) * scale).round() as u32).max(side) };
    (w, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent enumerator: test every integer position and keep those
    // that land on the stride lattice and fit.
    fn brute_force(width: u32, height: u32, size: (u32, u32), placement: Placement) -> usize {
        let (w, h) = size;
        let (sx, sy) = match placement {
            Placement::Grid => (w, h),
            Placement::Overlap => (w / 2, h / 2),
        };
        let mut n = 0;
        for y in 0..height {
            for x in 0..width {
                if x % sx == 0 && y % sy == 0 && x + w <= width && y + h <= height {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn grid_on_224_gives_86() {
        let rects = plan_crops(224, 224, &CropConfig::grid()).unwrap();
        assert_eq!(rects.len(), 86);
    }

    #[test]
    fn overlap_on_224_gives_270() {
        let rects = plan_crops(224, 224, &CropConfig::overlap()).unwrap();
        assert_eq!(rects.len(), 270);
    }

    #[test]
    fn per_size_grid_counts_match_enumeration() {
        let expected = [49, 16, 4, 1, 8, 8];
        for (size, want) in DEFAULT_CROP_SIZES.iter().zip(expected) {
            let cfg = CropConfig { sizes: vec![*size], ..CropConfig::grid() };
            let got = plan_crops(224, 224, &cfg).unwrap().len();
            assert_eq!(got, want, "size {size:?}");
            assert_eq!(got, brute_force(224, 224, *size, Placement::Grid));
        }
    }

    #[test]
    fn tiny_image_only_fits_smallest_crop() {
        let rects = plan_crops(32, 32, &CropConfig::grid()).unwrap();
        assert_eq!(rects, vec![CropRect::new(0, 0, 32, 32)]);
    }

    #[test]
    fn empty_sizes_is_error() {
        let cfg = CropConfig { sizes: vec![], ..CropConfig::grid() };
        assert!(matches!(plan_crops(224, 224, &cfg), Err(CropError::EmptyConfig)));
    }

    #[test]
    fn full_image_only_plan() {
        let rects = plan_crops(224, 224, &CropConfig::full_image_only()).unwrap();
        assert_eq!(rects, vec![CropRect::full(224, 224)]);
        let with_full = CropConfig { include_full_image: true, ..CropConfig::grid() };
        assert_eq!(plan_crops(224, 224, &with_full).unwrap().len(), 86);
        assert_eq!(plan_crops(300, 224, &with_full).unwrap().last(), Some(&CropRect::full(300, 224)));
    }

    #[test]
    fn order_is_size_then_row_major() {
        let cfg = CropConfig { sizes: vec![(112, 112)], ..CropConfig::grid() };
        let rects = plan_crops(224, 224, &cfg).unwrap();
        assert_eq!(
            rects,
            vec![
                CropRect::new(0, 0, 112, 112),
                CropRect::new(112, 0, 112, 112),
                CropRect::new(0, 112, 112, 112),
                CropRect::new(112, 112, 112, 112),
            ]
        );
    }

    #[test]
    fn identity_resize() {
        let img = ImageRaster::from_fn(5, 3, |x, y| [(x * 40) as u8, (y * 70) as u8, (x + y) as u8]);
        let out = extract_and_resize(&img, CropRect::full(5, 3), (5, 3)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn checkerboard_upsample() {
        // 0 255 / 255 0, upsampled 2x2 -> 4x4. Sample coordinates 0, 1/3, 2/3, 1.
        // Interior (1,1): 255 * (1/3*2/3 + 2/3*1/3) = 255 * 4/9 = 113.33 -> 113.
        // Interior (2,1): 255 * (2/3*2/3 + 1/3*1/3) = 255 * 5/9 = 141.67 -> 142.
        let img = ImageRaster::from_fn(2, 2, |x, y| if (x + y) % 2 == 0 { [0; 3] } else { [255; 3] });
        let out = extract_and_resize(&img, CropRect::full(2, 2), (4, 4)).unwrap();
        let grey = |x, y| out.pixel(x, y)[0];
        assert_eq!(grey(0, 0), 0);
        assert_eq!(grey(3, 0), 255);
        assert_eq!(grey(0, 3), 255);
        assert_eq!(grey(3, 3), 0);
        assert_eq!(grey(1, 1), 113);
        assert_eq!(grey(2, 2), 113);
        assert_eq!(grey(2, 1), 142);
        assert_eq!(grey(1, 2), 142);
        // Edge (1,0): 255 * 1/3 = 85.
        assert_eq!(grey(1, 0), 85);
    }

    #[test]
    fn out_of_bounds_rect() {
        let img = ImageRaster::filled(10, 10, [1, 2, 3]);
        let err = extract_and_resize(&img, CropRect::new(5, 5, 6, 2), (4, 4)).unwrap_err();
        assert!(matches!(err, CropError::OutOfBounds { .. }));
    }

    #[test]
    fn preprocess_square_is_noop() {
        let img = ImageRaster::from_fn(224, 224, |x, y| [x as u8, y as u8, 7]);
        assert_eq!(preprocess_input(&img, 224).unwrap(), img);
    }

    #[test]
    fn preprocess_wide_takes_center() {
        // 448x224: the short side already matches, offset = (448 - 224) / 2 = 112.
        let img = ImageRaster::from_fn(448, 224, |x, y| [(x % 256) as u8, (x / 256) as u8, y as u8]);
        let out = preprocess_input(&img, 224).unwrap();
        assert_eq!((out.width(), out.height()), (224, 224));
        assert_eq!(out.pixel(0, 0), img.pixel(112, 0));
        assert_eq!(out.pixel(223, 223), img.pixel(335, 223));
    }

    #[test]
    fn preprocess_tall_scales_then_crops() {
        // 100x300 -> scale 2.24 -> 224x672, center offset y = (672 - 224) / 2 = 224.
        assert_eq!(scaled_dims(100, 300, 224), (224, 672));
        let img = ImageRaster::from_fn(100, 300, |_, y| [(y % 256) as u8, 0, 0]);
        let out = preprocess_input(&img, 224).unwrap();
        assert_eq!((out.width(), out.height()), (224, 224));
        let resized = extract_and_resize(&img, CropRect::full(100, 300), (224, 672)).unwrap();
        let expected = extract_and_resize(&resized, CropRect::new(0, 224, 224, 224), (224, 224)).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn png_round_trip() {
        let img = ImageRaster::from_fn(7, 4, |x, y| [x as u8 * 30, y as u8 * 50, 99]);
        let bytes = img.encode_png().unwrap();
        assert_eq!(ImageRaster::decode(&bytes).unwrap(), img);
    }
}
