//! Image and mask representation, foreground/background splitting, fast
//! marching inpainting and final compositing.

use crate::error::{Error, Result};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

/// RGB image with all channel values in [0,1], stored as `[3, H, W]` planes.
#[derive(Clone, Debug, PartialEq)]
pub struct PortraitImage {
    width: usize,
    height: usize,
    /// Planar layout: channel-major, then rows.
    data: Vec<f32>,
}

/// Per-pixel foreground weight in [0,1]; binary in generated data.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMask {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl PortraitImage {
    pub fn new(width: usize, height: usize) -> Self {
        PortraitImage {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn from_planes(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(format!(
                "image data length {} != 3*{}*{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(PortraitImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn planes(&self) -> &[f32] {
        &self.data
    }

    pub fn planes_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

impl SegMask {
    pub fn new(width: usize, height: usize) -> Self {
        SegMask {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "mask data length {} != {}*{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(SegMask {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Threshold at 0.5 into a strictly binary mask.
    pub fn binarized(&self) -> SegMask {
        SegMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }
}

fn check_dims(img: &PortraitImage, mask: &SegMask) -> Result<()> {
    if img.width != mask.width || img.height != mask.height {
        return Err(Error::shape(format!(
            "image {}x{} vs mask {}x{}",
            img.width, img.height, mask.width, mask.height
        )));
    }
    Ok(())
}

/// Foreground/background masking: returns `(I (*) M, I (*) (1-M))`.
pub fn split(image: &PortraitImage, mask: &SegMask) -> Result<(PortraitImage, PortraitImage)> {
    check_dims(image, mask)?;
    let (w, h) = (image.width, image.height);
    let mut fg = PortraitImage::new(w, h);
    let mut bg = PortraitImage::new(w, h);
    for c in 0..3 {
        for i in 0..w * h {
            let m = mask.data[i];
            let v = image.data[c * w * h + i];
            fg.data[c * w * h + i] = v * m;
            bg.data[c * w * h + i] = v * (1.0 - m);
        }
    }
    Ok((fg, bg))
}

/// `relit_fg * M + inpainted_bg * (1 - M)`, optionally feathering the mask
/// edge by one pixel (3x3 average) before blending.
pub fn composite(
    relit_fg: &PortraitImage,
    mask: &SegMask,
    inpainted_bg: &PortraitImage,
    feather: bool,
) -> Result<PortraitImage> {
    check_dims(relit_fg, mask)?;
    check_dims(inpainted_bg, mask)?;
    let (w, h) = (mask.width, mask.height);
    let blend_mask = if feather { feather_mask(mask) } else { mask.clone() };
    let mut out = PortraitImage::new(w, h);
    for c in 0..3 {
        for i in 0..w * h {
            let m = blend_mask.data[i];
            out.data[c * w * h + i] =
                relit_fg.data[c * w * h + i] * m + inpainted_bg.data[c * w * h + i] * (1.0 - m);
        }
    }
    Ok(out)
}

fn feather_mask(mask: &SegMask) -> SegMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = SegMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        acc += mask.get(yy as usize, xx as usize);
                        n += 1.0;
                    }
                }
            }
            out.set(y, x, acc / n);
        }
    }
    out
}

// --- Fast marching (Telea) inpainting ---------------------------------------

const KNOWN: u8 = 0;
const BAND: u8 = 1;
const INSIDE: u8 = 2;

const FAR: f64 = 1e6;

#[derive(PartialEq)]
struct HeapEntry {
    t: f64,
    idx: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance; ties broken by index for determinism.
        other
            .t
            .partial_cmp(&self.t)
            .unwrap_or(Ordering::Equal)
            .then(other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Telea fast-marching inpainting. Pixels where `hole > 0.5` are filled in
/// increasing distance-to-boundary order by a distance/direction weighted
/// average of already-known neighbors within `radius`; all other pixels are
/// returned bit-identical.
pub fn inpaint_fast_marching(
    image: &PortraitImage,
    hole: &SegMask,
    radius: usize,
) -> Result<PortraitImage> {
    let (out, _trace) = inpaint_traced(image, hole, radius)?;
    Ok(out)
}

/// As [`inpaint_fast_marching`], additionally returning the distance value of
/// every processed pixel in pop order, for instrumentation.
pub fn inpaint_traced(
    image: &PortraitImage,
    hole: &SegMask,
    radius: usize,
) -> Result<(PortraitImage, Vec<f64>)> {
    check_dims(image, hole)?;
    let (w, h) = (image.width, image.height);
    let n = w * h;
    let hole = hole.binarized();
    let hole_count = hole.foreground_count();
    if hole_count == 0 {
        return Ok((image.clone(), Vec::new()));
    }
    if hole_count == n {
        return Err(Error::config("inpainting hole covers the entire image"));
    }

    let mut flags = vec![KNOWN; n];
    let mut dist = vec![0.0f64; n];
    for i in 0..n {
        if hole.data()[i] > 0.0 {
            flags[i] = INSIDE;
            dist[i] = FAR;
        }
    }

    let neighbors = |idx: usize| -> [Option<usize>; 4] {
        let (y, x) = (idx / w, idx % w);
        [
            (x > 0).then(|| idx - 1),
            (x + 1 < w).then(|| idx + 1),
            (y > 0).then(|| idx - w),
            (y + 1 < h).then(|| idx + w),
        ]
    };

    // Initial band: known pixels adjacent to the hole, at distance zero.
    let mut heap = BinaryHeap::new();
    for i in 0..n {
        if flags[i] != KNOWN {
            continue;
        }
        if neighbors(i)
            .iter()
            .flatten()
            .any(|&q| flags[q] == INSIDE)
        {
            flags[i] = BAND;
            heap.push(HeapEntry { t: 0.0, idx: i });
        }
    }

    let mut out = image.clone();
    let mut trace = Vec::with_capacity(hole_count);

    while let Some(HeapEntry { t, idx }) = heap.pop() {
        if flags[idx] == KNOWN {
            continue; // stale duplicate
        }
        flags[idx] = KNOWN;
        trace.push(t);
        for q in neighbors(idx).iter().flatten().copied() {
            if flags[q] == KNOWN {
                continue;
            }
            let new_t = solve_eikonal(q, w, h, &flags, &dist);
            if flags[q] == INSIDE {
                dist[q] = new_t;
                telea_fill(&mut out, q, w, h, radius, &flags, &dist);
                flags[q] = BAND;
                heap.push(HeapEntry { t: new_t, idx: q });
            } else if new_t < dist[q] {
                dist[q] = new_t;
                heap.push(HeapEntry { t: new_t, idx: q });
            }
        }
    }
    Ok((out, trace))
}

/// Discrete eikonal update: distance from the smaller of each axis pair of
/// already-accepted neighbors.
fn solve_eikonal(idx: usize, w: usize, h: usize, flags: &[u8], dist: &[f64]) -> f64 {
    let (y, x) = (idx / w, idx % w);
    let axis_min = |a: Option<usize>, b: Option<usize>| -> f64 {
        let va = a
            .filter(|&i| flags[i] != INSIDE)
            .map(|i| dist[i])
            .unwrap_or(FAR);
        let vb = b
            .filter(|&i| flags[i] != INSIDE)
            .map(|i| dist[i])
            .unwrap_or(FAR);
        va.min(vb)
    };
    let dx = axis_min(
        (x > 0).then(|| idx - 1),
        (x + 1 < w).then(|| idx + 1),
    );
    let dy = axis_min(
        (y > 0).then(|| idx - w),
        (y + 1 < h).then(|| idx + w),
    );
    let (a, b) = (dx.min(dy), dx.max(dy));
    if a >= FAR {
        return FAR;
    }
    if b - a >= 1.0 {
        a + 1.0
    } else {
        let s = 2.0 - (a - b) * (a - b);
        (a + b + s.sqrt()) / 2.0
    }
}

/// Gradient of the distance field at `idx`, one-sided where a neighbor is
/// still unprocessed.
fn dist_gradient(idx: usize, w: usize, h: usize, flags: &[u8], dist: &[f64]) -> (f64, f64) {
    let (y, x) = (idx / w, idx % w);
    let sample = |i: usize| -> Option<f64> {
        if flags[i] == INSIDE {
            None
        } else {
            Some(dist[i])
        }
    };
    let axis = |m: Option<usize>, p: Option<usize>| -> f64 {
        let vm = m.and_then(sample);
        let vp = p.and_then(sample);
        match (vm, vp) {
            (Some(a), Some(b)) => (b - a) / 2.0,
            (Some(a), None) => dist[idx] - a,
            (None, Some(b)) => b - dist[idx],
            (None, None) => 0.0,
        }
    };
    let gx = axis((x > 0).then(|| idx - 1), (x + 1 < w).then(|| idx + 1));
    let gy = axis((y > 0).then(|| idx - w), (y + 1 < h).then(|| idx + w));
    (gx, gy)
}

/// Telea weighted average over known pixels within `radius` of `idx`.
fn telea_fill(
    out: &mut PortraitImage,
    idx: usize,
    w: usize,
    h: usize,
    radius: usize,
    flags: &[u8],
    dist: &[f64],
) {
    let (y, x) = (idx / w, idx % w);
    let (gx, gy) = dist_gradient(idx, w, h, flags, dist);
    let r = radius as i64;
    let mut acc = [0.0f64; 3];
    let mut wsum = 0.0f64;
    for dy in -r..=r {
        for dx in -r..=r {
            if dy == 0 && dx == 0 {
                continue;
            }
            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
            if yy < 0 || yy >= h as i64 || xx < 0 || xx >= w as i64 {
                continue;
            }
            let q = yy as usize * w + xx as usize;
            if flags[q] != KNOWN {
                continue;
            }
            let len2 = (dx * dx + dy * dy) as f64;
            if len2 > (radius * radius) as f64 {
                continue;
            }
            let len = len2.sqrt();
            // Direction: alignment of the offset with the marching front.
            let mut dir = (dx as f64 * gx + dy as f64 * gy).abs() / len;
            if dir < 1e-6 {
                dir = 1e-6;
            }
            // Geometric distance falloff (d0 = 1).
            let dst = 1.0 / len2;
            // Level-set proximity (T0 = 1).
            let lev = 1.0 / (1.0 + (dist[q] - dist[idx]).abs());
            let wgt = dir * dst * lev;
            for c in 0..3 {
                acc[c] += wgt * out.get(c, yy as usize, xx as usize) as f64;
            }
            wsum += wgt;
        }
    }
    if wsum > 0.0 {
        for c in 0..3 {
            out.set(c, y, x, (acc[c] / wsum) as f32);
        }
    }
}

// --- PNG I/O -----------------------------------------------------------------

/// Write an 8-bit RGB PNG; values are quantized with round-to-nearest.
pub fn write_image(path: &Path, image: &PortraitImage) -> Result<()> {
    let (w, h) = (image.width, image.height);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                quantize(image.get(0, y, x)),
                quantize(image.get(1, y, x)),
                quantize(image.get(2, y, x)),
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<PortraitImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = PortraitImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out.set(c, y, x, px[c] as f32 / 255.0);
            }
        }
    }
    Ok(out)
}

/// Write an 8-bit grayscale mask PNG.
pub fn write_mask(path: &Path, mask: &SegMask) -> Result<()> {
    let (w, h) = (mask.width, mask.height);
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([quantize(mask.get(y, x))]));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<SegMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = SegMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0);
        }
    }
    Ok(out)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient_image(w: usize, h: usize) -> PortraitImage {
        let mut img = PortraitImage::new(w, h);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    img.set(c, y, x, (x + y) as f32 / (w + h) as f32 * (c as f32 * 0.2 + 0.6));
                }
            }
        }
        img
    }

    fn ones_mask(w: usize, h: usize) -> SegMask {
        SegMask::from_data(w, h, vec![1.0; w * h]).unwrap()
    }

    #[test]
    fn split_with_full_mask_keeps_image_and_zero_background() {
        let img = gradient_image(8, 8);
        let (fg, bg) = split(&img, &ones_mask(8, 8)).unwrap();
        assert_eq!(fg, img);
        assert!(bg.planes().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_with_zero_mask_keeps_image_in_background() {
        let img = gradient_image(8, 8);
        let (fg, bg) = split(&img, &SegMask::new(8, 8)).unwrap();
        assert_eq!(bg, img);
        assert!(fg.planes().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkerboard_split_partitions_exactly() {
        let img = PortraitImage::from_planes(4, 4, vec![0.5; 48]).unwrap();
        let mut mask = SegMask::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                mask.set(y, x, ((x + y) % 2) as f32);
            }
        }
        let (fg, bg) = split(&img, &mask).unwrap();
        for i in 0..48 {
            assert_eq!(fg.planes()[i] + bg.planes()[i], img.planes()[i]);
        }
    }

    #[test]
    fn composite_selects_by_mask() {
        let a = PortraitImage::from_planes(4, 4, vec![1.0; 48]).unwrap();
        let b = PortraitImage::from_planes(4, 4, vec![0.25; 48]).unwrap();
        let all = composite(&a, &ones_mask(4, 4), &b, false).unwrap();
        assert_eq!(all, a);
        let none = composite(&a, &SegMask::new(4, 4), &b, false).unwrap();
        assert_eq!(none, b);
    }

    #[test]
    fn composite_binary_mask_matches_pixel_loop_oracle() {
        let a = gradient_image(6, 5);
        let mut b = gradient_image(6, 5);
        for v in b.planes_mut() {
            *v = 1.0 - *v;
        }
        let mut mask = SegMask::new(6, 5);
        for y in 0..5 {
            for x in 0..6 {
                mask.set(y, x, ((x * 3 + y) % 2) as f32);
            }
        }
        let got = composite(&a, &mask, &b, false).unwrap();
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..6 {
                    let want = if mask.get(y, x) > 0.5 {
                        a.get(c, y, x)
                    } else {
                        b.get(c, y, x)
                    };
                    assert_eq!(got.get(c, y, x), want);
                }
            }
        }
    }

    #[test]
    fn single_pixel_hole_in_constant_image_fills_exactly() {
        let img = PortraitImage::from_planes(7, 7, vec![0.62; 3 * 49]).unwrap();
        let mut hole = SegMask::new(7, 7);
        hole.set(3, 3, 1.0);
        let out = inpaint_fast_marching(&img, &hole, 5).unwrap();
        for c in 0..3 {
            assert!((out.get(c, 3, 3) - 0.62).abs() < 1e-6);
        }
    }

    #[test]
    fn non_hole_pixels_are_bit_identical() {
        let img = gradient_image(9, 9);
        let mut hole = SegMask::new(9, 9);
        for y in 3..6 {
            for x in 3..6 {
                hole.set(y, x, 1.0);
            }
        }
        let out = inpaint_fast_marching(&img, &hole, 4).unwrap();
        for c in 0..3 {
            for y in 0..9 {
                for x in 0..9 {
                    if hole.get(y, x) == 0.0 {
                        assert_eq!(out.get(c, y, x).to_bits(), img.get(c, y, x).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn inpaint_on_empty_hole_is_identity() {
        let img = gradient_image(8, 8);
        let out = inpaint_fast_marching(&img, &SegMask::new(8, 8), 5).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn hole_covering_entire_image_errors() {
        let img = gradient_image(4, 4);
        assert!(inpaint_fast_marching(&img, &ones_mask(4, 4), 5).is_err());
    }

    #[test]
    fn march_order_is_nondecreasing_in_distance() {
        let img = gradient_image(12, 12);
        let mut hole = SegMask::new(12, 12);
        for y in 2..9 {
            for x in 4..10 {
                hole.set(y, x, 1.0);
            }
        }
        let (_, trace) = inpaint_traced(&img, &hole, 5).unwrap();
        assert!(!trace.is_empty());
        for pair in trace.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-12, "order regressed: {pair:?}");
        }
    }

    #[test]
    fn gradient_hole_fill_stays_within_boundary_ring_range() {
        let img = gradient_image(7, 7);
        let mut hole = SegMask::new(7, 7);
        for y in 2..5 {
            for x in 2..5 {
                hole.set(y, x, 1.0);
            }
        }
        // Range of the one-pixel ring around the hole.
        let mut lo = f32::MAX;
        let mut hi = f32::MIN;
        for y in 1..6 {
            for x in 1..6 {
                if (2..5).contains(&y) && (2..5).contains(&x) {
                    continue;
                }
                for c in 0..3 {
                    lo = lo.min(img.get(c, y, x));
                    hi = hi.max(img.get(c, y, x));
                }
            }
        }
        let out = inpaint_fast_marching(&img, &hole, 5).unwrap();
        for y in 2..5 {
            for x in 2..5 {
                for c in 0..3 {
                    let v = out.get(c, y, x);
                    assert!(v >= lo - 1e-6 && v <= hi + 1e-6, "{v} outside [{lo},{hi}]");
                }
            }
        }
    }

    #[test]
    fn png_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = gradient_image(16, 16);
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        for (a, b) in img.planes().iter().zip(back.planes().iter()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn quantized_constant_image_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        // 128/255 is exactly representable through the 8-bit round trip.
        let img = PortraitImage::from_planes(8, 8, vec![128.0 / 255.0; 3 * 64]).unwrap();
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn corrupt_file_surfaces_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png at all").unwrap();
        assert!(read_image(&path).is_err());
        assert!(read_mask(&path).is_err());
    }

    #[test]
    fn missing_file_surfaces_io_error() {
        assert!(read_image(Path::new("/nonexistent/img.png")).is_err());
    }

    proptest! {
        #[test]
        fn split_then_composite_is_identity_for_binary_masks(
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (6usize, 6usize);
            let img = PortraitImage::from_planes(
                w, h,
                (0..3 * w * h).map(|_| rng.random_range(0.0..1.0f32)).collect(),
            ).unwrap();
            let mask = SegMask::from_data(
                w, h,
                (0..w * h).map(|_| if rng.random_range(0.0..1.0f32) < 0.5 { 1.0 } else { 0.0 }).collect(),
            ).unwrap();
            let (fg, bg) = split(&img, &mask).unwrap();
            let back = composite(&fg, &mask, &bg, false).unwrap();
            for (a, b) in back.planes().iter().zip(img.planes().iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
