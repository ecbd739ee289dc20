//! RGB rasters and the pixel-level transforms shared by augmentation and the
//! synthetic domain shifts.

use ndarray::Array3;

/// An H x W x 3 image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    data: Array3<f64>,
}

impl Raster {
    /// A black image of the given size.
    pub fn new(height: usize, width: usize) -> Self {
        Raster {
            data: Array3::zeros((height, width, 3)),
        }
    }

    /// A constant-colored image.
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut r = Raster::new(height, width);
        for y in 0..height {
            for x in 0..width {
                r.set(y, x, rgb);
            }
        }
        r
    }

    pub fn from_array(data: Array3<f64>) -> Self {
        assert_eq!(data.dim().2, 3, "raster must have 3 channels");
        Raster { data }
    }

    /// Build from a flat row-major `[h * w * 3]` buffer.
    pub fn from_flat(height: usize, width: usize, flat: &[f64]) -> Option<Self> {
        if flat.len() != height * width * 3 {
            return None;
        }
        Array3::from_shape_vec((height, width, 3), flat.to_vec())
            .ok()
            .map(Raster::from_array)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.data.iter().copied().collect()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        [
            self.data[(y, x, 0)],
            self.data[(y, x, 1)],
            self.data[(y, x, 2)],
        ]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        self.data[(y, x, 0)] = rgb[0];
        self.data[(y, x, 1)] = rgb[1];
        self.data[(y, x, 2)] = rgb[2];
    }

    /// Copy the `[y0, y1) x [x0, x1)` window.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Raster {
        assert!(x0 < x1 && y0 < y1 && x1 <= self.width() && y1 <= self.height());
        Raster {
            data: self.data.slice(ndarray::s![y0..y1, x0..x1, ..]).to_owned(),
        }
    }

    /// Paste `src` with its top-left corner at `(x0, y0)`.
    pub fn paste(&mut self, src: &Raster, x0: usize, y0: usize) {
        assert!(x0 + src.width() <= self.width() && y0 + src.height() <= self.height());
        self.data
            .slice_mut(ndarray::s![
                y0..y0 + src.height(),
                x0..x0 + src.width(),
                ..
            ])
            .assign(&src.data);
    }

    /// Mirror left-right. Applying twice restores the original exactly.
    pub fn hflip(&self) -> Raster {
        let (h, w, _) = self.data.dim();
        let mut out = Raster::new(h, w);
        for y in 0..h {
            for x in 0..w {
                out.set(y, w - 1 - x, self.get(y, x));
            }
        }
        out
    }

    /// Bilinear sample at continuous coordinates (pixel-center convention);
    /// out-of-range coordinates return `fill`.
    fn sample_bilinear(&self, x: f64, y: f64, fill: [f64; 3]) -> [f64; 3] {
        let (h, w) = (self.height() as f64, self.width() as f64);
        if x < -0.5 || y < -0.5 || x > w - 0.5 || y > h - 0.5 {
            return fill;
        }
        let xc = x.clamp(0.0, w - 1.0);
        let yc = y.clamp(0.0, h - 1.0);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width() - 1);
        let y1 = (y0 + 1).min(self.height() - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let p00 = self.get(y0, x0);
        let p01 = self.get(y0, x1);
        let p10 = self.get(y1, x0);
        let p11 = self.get(y1, x1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - fx) + p01[c] * fx;
            let bot = p10[c] * (1.0 - fx) + p11[c] * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }

    /// Rescale about the image center by `factor`, keeping the original size.
    /// Shrinking pads with `fill`; growing crops centrally.
    pub fn scale_about_center(&self, factor: f64, fill: [f64; 3]) -> Raster {
        let (h, w) = (self.height(), self.width());
        let mut out = Raster::new(h, w);
        let cx = w as f64 / 2.0;
        let cy = h as f64 / 2.0;
        for y in 0..h {
            for x in 0..w {
                // Invert x' = s*(x - c) + c at pixel centers.
                let sx = (x as f64 + 0.5 - cx) / factor + cx - 0.5;
                let sy = (y as f64 + 0.5 - cy) / factor + cy - 0.5;
                out.set(y, x, self.sample_bilinear(sx, sy, fill));
            }
        }
        out
    }

    /// Separable Gaussian blur with kernel radius `ceil(3*sigma)`, replicated
    /// edges.
    pub fn gaussian_blur(&self, sigma: f64) -> Raster {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        let mut sum = 0.0;
        for i in -radius..=radius {
            let v = (-0.5 * (i as f64 / sigma).powi(2)).exp();
            kernel.push(v);
            sum += v;
        }
        for v in &mut kernel {
            *v /= sum;
        }

        let (h, w) = (self.height(), self.width());
        // Horizontal pass.
        let mut tmp = Raster::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    let p = self.get(y, sx);
                    for c in 0..3 {
                        acc[c] += kv * p[c];
                    }
                }
                tmp.set(y, x, acc);
            }
        }
        // Vertical pass.
        let mut out = Raster::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    let p = tmp.get(sy, x);
                    for c in 0..3 {
                        acc[c] += kv * p[c];
                    }
                }
                out.set(y, x, acc);
            }
        }
        out
    }

    /// Rec. 601 luminance.
    pub fn luminance(&self, y: usize, x: usize) -> f64 {
        let p = self.get(y, x);
        0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
    }

    /// Mean luminance over the whole raster.
    pub fn mean_luminance(&self) -> f64 {
        let mut sum = 0.0;
        for y in 0..self.height() {
            for x in 0..self.width() {
                sum += self.luminance(y, x);
            }
        }
        sum / (self.height() * self.width()) as f64
    }

    /// Mean over all channel values.
    pub fn mean_value(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp01(&mut self) {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hflip_is_involution() {
        let mut r = Raster::new(3, 5);
        let mut v = 0.0;
        for y in 0..3 {
            for x in 0..5 {
                r.set(y, x, [v, v * 0.5, 1.0 - v]);
                v += 0.02;
            }
        }
        assert_eq!(r.hflip().hflip(), r);
    }

    #[test]
    fn crop_paste_round_trip() {
        let mut r = Raster::new(8, 8);
        r.set(3, 4, [0.1, 0.2, 0.3]);
        let c = r.crop(2, 2, 6, 6);
        assert_eq!(c.get(1, 2), [0.1, 0.2, 0.3]);
        let mut big = Raster::new(8, 8);
        big.paste(&c, 2, 2);
        assert_eq!(big.get(3, 4), [0.1, 0.2, 0.3]);
    }

    #[test]
    fn identity_scale_preserves_pixels() {
        let mut r = Raster::new(6, 6);
        for y in 0..6 {
            for x in 0..6 {
                r.set(y, x, [(y as f64) / 6.0, (x as f64) / 6.0, 0.5]);
            }
        }
        let s = r.scale_about_center(1.0, [0.5; 3]);
        for y in 0..6 {
            for x in 0..6 {
                let a = r.get(y, x);
                let b = s.get(y, x);
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let r = Raster::filled(5, 5, [0.25, 0.5, 0.75]);
        let b = r.gaussian_blur(1.5);
        for y in 0..5 {
            for x in 0..5 {
                let p = b.get(y, x);
                assert!((p[0] - 0.25).abs() < 1e-12);
                assert!((p[1] - 0.5).abs() < 1e-12);
                assert!((p[2] - 0.75).abs() < 1e-12);
            }
        }
    }
}
