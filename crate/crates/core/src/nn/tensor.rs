use crate::error::{shape_err, Result};

/// Dense `channels × height × width` activation tensor, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Slab {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Slab {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err(
                format!("{channels}x{height}x{width}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Slab) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn check_shape(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        if self.channels != channels || self.height != height || self.width != width {
            return Err(shape_err(
                format!("{channels}x{height}x{width}"),
                format!("{}x{}x{}", self.channels, self.height, self.width),
            ));
        }
        Ok(())
    }

    /// Stacks `self` and `other` along the channel axis.
    pub fn concat(&self, other: &Slab) -> Slab {
        debug_assert_eq!((self.height, self.width), (other.height, other.width));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Slab { channels: self.channels + other.channels, height: self.height, width: self.width, data }
    }

    /// Splits off the first `channels` channels.
    pub fn split(&self, channels: usize) -> (Slab, Slab) {
        let at = channels * self.plane();
        (
            Slab { channels, height: self.height, width: self.width, data: self.data[..at].to_vec() },
            Slab {
                channels: self.channels - channels,
                height: self.height,
                width: self.width,
                data: self.data[at..].to_vec(),
            },
        )
    }

    pub fn add_assign(&mut self, other: &Slab) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Writes `out[i][j] = plane[(i + di) mod h][(j + dj) mod w]`.
///
/// Implemented as one rotation of the flat buffer, which is correct except
/// for the `|dj|` columns per row that wrap around; those are patched after.
pub(crate) fn shift_into(plane: &[f64], h: usize, w: usize, di: isize, dj: isize, out: &mut [f64]) {
    let n = h * w;
    let dj_mod = dj.rem_euclid(w as isize) as usize;
    let dj = if dj_mod > w / 2 { dj_mod as isize - w as isize } else { dj_mod as isize };
    let s = (di * w as isize + dj).rem_euclid(n as isize) as usize;
    out[..n - s].copy_from_slice(&plane[s..]);
    out[n - s..].copy_from_slice(&plane[..s]);
    if dj == 0 {
        return;
    }
    let di = di.rem_euclid(h as isize) as usize;
    for i in 0..h {
        let src = ((i + di) % h) * w;
        let dst = &mut out[i * w..(i + 1) * w];
        if dj > 0 {
            for j in w - dj as usize..w {
                dst[j] = plane[src + j + dj as usize - w];
            }
        } else {
            for j in 0..(-dj) as usize {
                dst[j] = plane[src + w + j - (-dj) as usize];
            }
        }
    }
}

#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociation.
    let mut acc = [0.0f64; 4];
    let chunks = x.len() / 4;
    for k in 0..chunks {
        for l in 0..4 {
            acc[l] += x[4 * k + l] * y[4 * k + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..x.len() {
        s += x[k] * y[k];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_wraps_both_axes() {
        let plane: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let mut out = vec![0.0; 6];
        shift_into(&plane, 2, 3, 1, -1, &mut out);
        // out[i][j] = plane[(i+1)%2][(j-1)%3]
        assert_eq!(out, vec![5.0, 3.0, 4.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn shift_matches_modular_indexing() {
        for (h, w) in [(4, 4), (3, 5), (1, 7), (6, 1), (2, 8)] {
            let plane: Vec<f64> = (0..h * w).map(|x| x as f64).collect();
            let mut out = vec![0.0; h * w];
            for di in -3isize..=3 {
                for dj in -3isize..=3 {
                    shift_into(&plane, h, w, di, dj, &mut out);
                    for i in 0..h {
                        for j in 0..w {
                            let si = (i as isize + di).rem_euclid(h as isize) as usize;
                            let sj = (j as isize + dj).rem_euclid(w as isize) as usize;
                            assert_eq!(out[i * w + j], plane[si * w + sj], "{h}x{w} shift ({di},{dj})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dot_matches_naive() {
        let x: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let y: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((dot(&x, &y) - naive).abs() < 1e-12);
    }
}
