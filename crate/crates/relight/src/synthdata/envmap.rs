//! Procedural equirectangular environment maps and their horizontal
//! rotation.
//!
//! Azimuth convention used throughout the crate: phi = 0 points along +z
//! (behind the camera, which sits on +z looking toward -z), increasing
//! counterclockwise viewed from above, so phi = 90 points along +x. A
//! positive rotation angle turns the environment counterclockwise seen from
//! above: a feature at azimuth phi moves to phi + angle.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rgb = [f32; 3];

/// Equirectangular RGB radiance grid, `width = 2 * height`. Row 0 is the
/// zenith (elevation +90 degrees), column 0 is azimuth 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvMap {
    width: usize,
    height: usize,
    data: Vec<Rgb>,
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    azimuth_deg: f32,
    elevation_deg: f32,
    sigma_deg: f32,
    color: Rgb,
}

impl EnvMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn texel(&self, row: usize, col: usize) -> Rgb {
        self.data[row * self.width + col]
    }

    /// Seeded procedural sky: vertical gradient plus one dominant sun blob
    /// and up to three smaller colored area lights.
    pub fn from_seed(seed: u64, width: usize) -> EnvMap {
        assert!(width % 2 == 0 && width >= 4, "env width must be even and >= 4");
        let height = width / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let sun = Blob {
            azimuth_deg: rng.random_range(0.0..360.0),
            elevation_deg: rng.random_range(10.0..55.0),
            sigma_deg: rng.random_range(6.0..14.0),
            color: {
                let i = rng.random_range(6.0..16.0f32);
                [i, i * rng.random_range(0.85..0.95), i * rng.random_range(0.70..0.90)]
            },
        };
        let zenith: Rgb = [
            rng.random_range(0.10..0.30),
            rng.random_range(0.15..0.35),
            rng.random_range(0.25..0.50),
        ];
        let horizon: Rgb = [
            rng.random_range(0.30..0.65),
            rng.random_range(0.30..0.65),
            rng.random_range(0.30..0.65),
        ];
        let ground: Rgb = [
            rng.random_range(0.05..0.25),
            rng.random_range(0.05..0.25),
            rng.random_range(0.05..0.20),
        ];
        let n_lights = rng.random_range(1..=3usize);
        let lights: Vec<Blob> = (0..n_lights)
            .map(|_| Blob {
                azimuth_deg: rng.random_range(0.0..360.0),
                elevation_deg: rng.random_range(-20.0..45.0),
                sigma_deg: rng.random_range(8.0..25.0),
                color: {
                    let i = rng.random_range(0.5..3.0f32);
                    let (r, g, b) = hsv_to_rgb(
                        rng.random_range(0.0..360.0),
                        rng.random_range(0.4..0.9),
                        1.0,
                    );
                    [r * i, g * i, b * i]
                },
            })
            .collect();

        let mut data = vec![[0.0f32; 3]; width * height];
        for row in 0..height {
            let elevation = 90.0 - (row as f32 + 0.5) / height as f32 * 180.0;
            for col in 0..width {
                let azimuth = (col as f32 + 0.5) / width as f32 * 360.0;
                let dir = dir_from_angles(azimuth, elevation);
                let mut c = sky_gradient(elevation, zenith, horizon, ground);
                add_blob(&mut c, dir, &sun);
                for l in &lights {
                    add_blob(&mut c, dir, l);
                }
                data[row * width + col] = c;
            }
        }
        EnvMap {
            width,
            height,
            data,
        }
    }

    /// Horizontal rotation by `degrees`: a circular column shift of
    /// `degrees / 360 * width`. Exact integer shifts move columns without
    /// interpolation; fractional shifts blend the two straddled columns.
    pub fn rotated(&self, degrees: f64) -> EnvMap {
        let w = self.width;
        let shift = degrees / 360.0 * w as f64;
        let nearest = shift.round();
        let mut out = EnvMap {
            width: w,
            height: self.height,
            data: vec![[0.0; 3]; self.data.len()],
        };
        if (shift - nearest).abs() < 1e-9 {
            let k = (nearest as i64).rem_euclid(w as i64) as usize;
            for row in 0..self.height {
                for col in 0..w {
                    let src = (col + w - k) % w;
                    out.data[row * w + col] = self.data[row * w + src];
                }
            }
        } else {
            let k = shift.floor();
            let f = (shift - k) as f32;
            let k = (k as i64).rem_euclid(w as i64) as usize;
            for row in 0..self.height {
                for col in 0..w {
                    let a = self.data[row * w + (col + w - k) % w];
                    let b = self.data[row * w + (col + 2 * w - k - 1) % w];
                    let px = &mut out.data[row * w + col];
                    for c in 0..3 {
                        px[c] = a[c] * (1.0 - f) + b[c] * f;
                    }
                }
            }
        }
        out
    }

    /// Bilinear radiance lookup along a unit direction.
    pub fn sample_dir(&self, dir: [f32; 3]) -> Rgb {
        let azimuth = dir[0].atan2(dir[2]).to_degrees().rem_euclid(360.0);
        let elevation = dir[1].clamp(-1.0, 1.0).asin().to_degrees();
        self.sample_angles(azimuth, elevation)
    }

    /// Bilinear radiance lookup at (azimuth, elevation) in degrees.
    pub fn sample_angles(&self, azimuth_deg: f32, elevation_deg: f32) -> Rgb {
        let (w, h) = (self.width as f32, self.height as f32);
        let u = azimuth_deg.rem_euclid(360.0) / 360.0 * w - 0.5;
        let v = (90.0 - elevation_deg.clamp(-90.0, 90.0)) / 180.0 * h - 0.5;
        let u0 = u.floor();
        let v0 = v.floor();
        let fu = u - u0;
        let fv = v - v0;
        let wrap = |c: i64| -> usize { c.rem_euclid(self.width as i64) as usize };
        let clampr = |r: i64| -> usize { r.clamp(0, self.height as i64 - 1) as usize };
        let (c0, c1) = (wrap(u0 as i64), wrap(u0 as i64 + 1));
        let (r0, r1) = (clampr(v0 as i64), clampr(v0 as i64 + 1));
        let mut out = [0.0f32; 3];
        for ch in 0..3 {
            let top = self.data[r0 * self.width + c0][ch] * (1.0 - fu)
                + self.data[r0 * self.width + c1][ch] * fu;
            let bot = self.data[r1 * self.width + c0][ch] * (1.0 - fu)
                + self.data[r1 * self.width + c1][ch] * fu;
            out[ch] = top * (1.0 - fv) + bot * fv;
        }
        out
    }

    /// Direction and color of the brightest texel; the stand-in dominant
    /// light for the specular term.
    pub fn dominant_light(&self) -> ([f32; 3], Rgb) {
        let mut best = 0usize;
        let mut best_lum = -1.0f32;
        for (i, px) in self.data.iter().enumerate() {
            let lum = 0.2126 * px[0] + 0.7152 * px[1] + 0.0722 * px[2];
            if lum > best_lum {
                best_lum = lum;
                best = i;
            }
        }
        let row = best / self.width;
        let col = best % self.width;
        let azimuth = (col as f32 + 0.5) / self.width as f32 * 360.0;
        let elevation = 90.0 - (row as f32 + 0.5) / self.height as f32 * 180.0;
        (dir_from_angles(azimuth, elevation), self.data[best])
    }

    pub fn all_nonnegative(&self) -> bool {
        self.data.iter().all(|px| px.iter().all(|&v| v >= 0.0))
    }

    /// Uniform white map, mostly for tests.
    pub fn constant(width: usize, value: Rgb) -> EnvMap {
        let height = width / 2;
        EnvMap {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Map that is zero except for one gaussian blob; used by tests to place
    /// a single dominant light.
    pub fn single_light(width: usize, azimuth_deg: f32, elevation_deg: f32, intensity: f32) -> EnvMap {
        let height = width / 2;
        let blob = Blob {
            azimuth_deg,
            elevation_deg,
            sigma_deg: 12.0,
            color: [intensity; 3],
        };
        let mut data = vec![[0.0f32; 3]; width * height];
        for row in 0..height {
            let elevation = 90.0 - (row as f32 + 0.5) / height as f32 * 180.0;
            for col in 0..width {
                let azimuth = (col as f32 + 0.5) / width as f32 * 360.0;
                let dir = dir_from_angles(azimuth, elevation);
                let mut c = [0.0f32; 3];
                add_blob(&mut c, dir, &blob);
                data[row * width + col] = c;
            }
        }
        EnvMap {
            width,
            height,
            data,
        }
    }
}

/// Unit direction for (azimuth, elevation) in degrees under the crate
/// convention (azimuth 0 -> +z, azimuth 90 -> +x, y up).
pub fn dir_from_angles(azimuth_deg: f32, elevation_deg: f32) -> [f32; 3] {
    let az = azimuth_deg.to_radians();
    let el = elevation_deg.to_radians();
    [el.cos() * az.sin(), el.sin(), el.cos() * az.cos()]
}

fn sky_gradient(elevation_deg: f32, zenith: Rgb, horizon: Rgb, ground: Rgb) -> Rgb {
    let s = elevation_deg.to_radians().sin();
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        out[c] = if s >= 0.0 {
            horizon[c] + (zenith[c] - horizon[c]) * s
        } else {
            horizon[c] + (ground[c] - horizon[c]) * (-s)
        };
    }
    out
}

fn add_blob(acc: &mut Rgb, dir: [f32; 3], blob: &Blob) {
    let bdir = dir_from_angles(blob.azimuth_deg, blob.elevation_deg);
    let cosang = (dir[0] * bdir[0] + dir[1] * bdir[1] + dir[2] * bdir[2]).clamp(-1.0, 1.0);
    let angle = cosang.acos().to_degrees();
    let g = (-(angle / blob.sigma_deg) * (angle / blob.sigma_deg)).exp();
    for c in 0..3 {
        acc[c] += blob.color[c] * g;
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirty_degrees_on_width_96_is_an_exact_8_column_shift() {
        let env = EnvMap::from_seed(11, 96);
        let rot = env.rotated(30.0);
        for row in 0..env.height() {
            for col in 0..96 {
                assert_eq!(rot.texel(row, (col + 8) % 96), env.texel(row, col));
            }
        }
    }

    #[test]
    fn full_turn_is_identity() {
        let env = EnvMap::from_seed(5, 96);
        assert_eq!(env.rotated(360.0), env);
        let mut acc = env.clone();
        for _ in 0..12 {
            acc = acc.rotated(30.0);
        }
        assert_eq!(acc, env);
    }

    #[test]
    fn integer_shifts_compose_additively() {
        let env = EnvMap::from_seed(9, 48);
        let a = env.rotated(30.0).rotated(60.0);
        let b = env.rotated(90.0);
        assert_eq!(a, b);
    }

    #[test]
    fn radiance_is_nonnegative_and_deterministic() {
        let a = EnvMap::from_seed(123, 96);
        let b = EnvMap::from_seed(123, 96);
        assert_eq!(a, b);
        assert!(a.all_nonnegative());
        assert_ne!(a, EnvMap::from_seed(124, 96));
    }

    #[test]
    fn dominant_light_tracks_rotation() {
        let env = EnvMap::single_light(96, 90.0, 30.0, 10.0);
        let (d0, _) = env.dominant_light();
        let (d180, _) = env.rotated(180.0).dominant_light();
        // At azimuth 90 the light points along +x; rotated 180 it points -x.
        assert!(d0[0] > 0.5, "{d0:?}");
        assert!(d180[0] < -0.5, "{d180:?}");
    }

    #[test]
    fn sample_angles_hits_texel_centers() {
        let env = EnvMap::from_seed(3, 32);
        // Azimuth/elevation of texel (row 4, col 7) center.
        let az = (7.0 + 0.5) / 32.0 * 360.0;
        let el = 90.0 - (4.0 + 0.5) / 16.0 * 180.0;
        let s = env.sample_angles(az, el);
        let t = env.texel(4, 7);
        for c in 0..3 {
            assert!((s[c] - t[c]).abs() < 1e-5);
        }
    }
}
