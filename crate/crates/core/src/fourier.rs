//! Centered, orthonormal 2D DFT between the image domain and k-space.
//!
//! Both directions scale by `1/sqrt(H*W)`, so the pair is unitary and the
//! backward pass of one direction is the other direction. The DC bin lives
//! at `(H/2, W/2)`; spatial coordinates are centered the same way.

use rustfft::num_complex::Complex;

use crate::diffcore::{Real, Tensor};
use crate::error::{ensure_eq, Result};
use crate::par;

/// H×W complex raster in the image domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage<T = f32> {
    pub height: usize,
    pub width: usize,
    pub real: Vec<T>,
    pub imag: Vec<T>,
}

/// H×W complex raster in k-space, DC at `(H/2, W/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceGrid<T = f32> {
    pub height: usize,
    pub width: usize,
    pub real: Vec<T>,
    pub imag: Vec<T>,
}

macro_rules! complex_raster {
    ($ty:ident) => {
        impl<T: Real> $ty<T> {
            pub fn zeros(height: usize, width: usize) -> Self {
                Self {
                    height,
                    width,
                    real: vec![T::zero(); height * width],
                    imag: vec![T::zero(); height * width],
                }
            }

            pub fn from_parts(height: usize, width: usize, real: Vec<T>, imag: Vec<T>) -> Result<Self> {
                ensure_eq("real plane length", height * width, real.len())?;
                ensure_eq("imaginary plane length", height * width, imag.len())?;
                Ok(Self { height, width, real, imag })
            }

            /// Purely real raster.
            pub fn from_real(height: usize, width: usize, real: Vec<T>) -> Result<Self> {
                Self::from_parts(height, width, real, vec![T::zero(); height * width])
            }

            /// `[1, 2, H, W]` tensor: channel 0 real, channel 1 imaginary.
            pub fn to_tensor(&self) -> Tensor<T> {
                let mut data = Vec::with_capacity(2 * self.real.len());
                data.extend_from_slice(&self.real);
                data.extend_from_slice(&self.imag);
                Tensor::new(vec![1, 2, self.height, self.width], data).expect("plane sizes")
            }

            /// Sample `n` of a `[N, 2, H, W]` tensor.
            pub fn from_tensor(t: &Tensor<T>, n: usize) -> Result<Self> {
                let (_, c, h, w) = t.nchw()?;
                ensure_eq("complex channels", 2, c)?;
                let hw = h * w;
                let base = n * 2 * hw;
                Ok(Self {
                    height: h,
                    width: w,
                    real: t.data()[base..base + hw].to_vec(),
                    imag: t.data()[base + hw..base + 2 * hw].to_vec(),
                })
            }

            pub fn magnitude(&self) -> Vec<T> {
                self.real
                    .iter()
                    .zip(&self.imag)
                    .map(|(&r, &i)| (r * r + i * i).sqrt())
                    .collect()
            }

            pub fn norm(&self) -> T {
                self.real
                    .iter()
                    .chain(&self.imag)
                    .map(|&v| v * v)
                    .sum::<T>()
                    .sqrt()
            }

            pub fn cast<U: Real>(&self) -> $ty<U> {
                let c = |v: &Vec<T>| v.iter().map(|&x| U::real(x.to_f64_real())).collect();
                $ty {
                    height: self.height,
                    width: self.width,
                    real: c(&self.real),
                    imag: c(&self.imag),
                }
            }

            pub fn add(&self, other: &Self) -> Self {
                let add = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| x + y).collect();
                Self {
                    height: self.height,
                    width: self.width,
                    real: add(&self.real, &other.real),
                    imag: add(&self.imag, &other.imag),
                }
            }

            pub fn scale(&self, s: T) -> Self {
                Self {
                    height: self.height,
                    width: self.width,
                    real: self.real.iter().map(|&v| v * s).collect(),
                    imag: self.imag.iter().map(|&v| v * s).collect(),
                }
            }

            pub fn max_abs_diff(&self, other: &Self) -> T {
                self.real
                    .iter()
                    .zip(&other.real)
                    .chain(self.imag.iter().zip(&other.imag))
                    .map(|(&a, &b)| (a - b).abs())
                    .fold(T::zero(), T::max)
            }

            fn to_complex(&self) -> Vec<Complex<T>> {
                self.real
                    .iter()
                    .zip(&self.imag)
                    .map(|(&re, &im)| Complex::new(re, im))
                    .collect()
            }

            fn from_complex(height: usize, width: usize, buf: &[Complex<T>]) -> Self {
                Self {
                    height,
                    width,
                    real: buf.iter().map(|c| c.re).collect(),
                    imag: buf.iter().map(|c| c.im).collect(),
                }
            }
        }
    };
}

complex_raster!(ComplexImage);
complex_raster!(KSpaceGrid);

/// Either kind of complex raster, for code that is agnostic to the domain.
pub trait ComplexRaster<T: Real>: Sized {
    fn to_tensor(&self) -> Tensor<T>;
    fn from_tensor(t: &Tensor<T>, n: usize) -> Result<Self>;
}

impl<T: Real> ComplexRaster<T> for ComplexImage<T> {
    fn to_tensor(&self) -> Tensor<T> {
        ComplexImage::to_tensor(self)
    }
    fn from_tensor(t: &Tensor<T>, n: usize) -> Result<Self> {
        ComplexImage::from_tensor(t, n)
    }
}

impl<T: Real> ComplexRaster<T> for KSpaceGrid<T> {
    fn to_tensor(&self) -> Tensor<T> {
        KSpaceGrid::to_tensor(self)
    }
    fn from_tensor(t: &Tensor<T>, n: usize) -> Result<Self> {
        KSpaceGrid::from_tensor(t, n)
    }
}

/// Forward transform: image → centered k-space.
pub fn fft2c<T: Real>(img: &ComplexImage<T>) -> KSpaceGrid<T> {
    let mut buf = img.to_complex();
    transform_centered(&mut buf, img.height, img.width, false);
    KSpaceGrid::from_complex(img.height, img.width, &buf)
}

/// Inverse transform: centered k-space → image.
pub fn ifft2c<T: Real>(k: &KSpaceGrid<T>) -> ComplexImage<T> {
    let mut buf = k.to_complex();
    transform_centered(&mut buf, k.height, k.width, true);
    ComplexImage::from_complex(k.height, k.width, &buf)
}

/// Orthonormal centered 2D DFT in place on a row-major `h×w` buffer.
pub(crate) fn transform_centered<T: Real>(buf: &mut [Complex<T>], h: usize, w: usize, inverse: bool) {
    // ifftshift: move the centre sample to index 0
    let mut tmp = shifted(buf, h, w, h / 2, w / 2);
    let row_plan = T::fft_plan(w, inverse);
    for row in tmp.chunks_mut(w) {
        row_plan.process(row);
    }
    let col_plan = T::fft_plan(h, inverse);
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = tmp[y * w + x];
        }
        col_plan.process(&mut col);
        for y in 0..h {
            tmp[y * w + x] = col[y];
        }
    }
    // fftshift: move index 0 back to the centre
    let out = shifted(&tmp, h, w, h - h / 2, w - w / 2);
    let scale = T::one() / T::real(((h * w) as f64).sqrt());
    for (d, s) in buf.iter_mut().zip(out) {
        *d = s * scale;
    }
}

/// `out[y][x] = src[(y + dy) % h][(x + dx) % w]`
fn shifted<T: Copy>(src: &[T], h: usize, w: usize, dy: usize, dx: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        let sy = (y + dy) % h;
        for x in 0..w {
            out.push(src[sy * w + (x + dx) % w]);
        }
    }
    out
}

/// Batched transform of a `[N, 2, H, W]` tensor.
pub(crate) fn transform_tensor<T: Real>(t: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
    let (_, c, h, w) = t.nchw()?;
    ensure_eq("complex channels", 2, c)?;
    let hw = h * w;
    let mut out = t.data().to_vec();
    par::for_each_chunk(&mut out, 2 * hw, |_, s| {
        let mut buf: Vec<Complex<T>> = (0..hw).map(|i| Complex::new(s[i], s[hw + i])).collect();
        transform_centered(&mut buf, h, w, inverse);
        for (i, v) in buf.iter().enumerate() {
            s[i] = v.re;
            s[hw + i] = v.im;
        }
    });
    Tensor::new(t.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force centered DFT straight from the definition.
    fn naive_dft(img: &ComplexImage<f64>, inverse: bool) -> ComplexImage<f64> {
        let (h, w) = (img.height, img.width);
        let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
        let sign = if inverse { 1.0 } else { -1.0 };
        let norm = 1.0 / ((h * w) as f64).sqrt();
        let mut out = ComplexImage::zeros(h, w);
        for ky in 0..h {
            for kx in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let phase = sign
                            * 2.0
                            * std::f64::consts::PI
                            * ((ky as f64 - ch) * (y as f64 - ch) / h as f64
                                + (kx as f64 - cw) * (x as f64 - cw) / w as f64);
                        let (s, c) = phase.sin_cos();
                        let (a, b) = (img.real[y * w + x], img.imag[y * w + x]);
                        re += a * c - b * s;
                        im += a * s + b * c;
                    }
                }
                out.real[ky * w + kx] = re * norm;
                out.imag[ky * w + kx] = im * norm;
            }
        }
        out
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = || (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let re = g();
        let im = g();
        ComplexImage::from_parts(h, w, re, im).unwrap()
    }

    #[test]
    fn single_point_transform_is_identity() {
        let img = ComplexImage::from_real(1, 1, vec![3.5f64]).unwrap();
        let k = fft2c(&img);
        assert_eq!(k.real, vec![3.5]);
        assert_eq!(k.imag, vec![0.0]);
    }

    #[test]
    fn constant_image_has_only_dc() {
        let n = 8;
        let c = 0.7f64;
        let k = fft2c(&ComplexImage::from_real(n, n, vec![c; n * n]).unwrap());
        let dc = (n / 2) * n + n / 2;
        for i in 0..n * n {
            let expected = if i == dc { c * n as f64 } else { 0.0 };
            assert!((k.real[i] - expected).abs() < 1e-12, "bin {i}");
            assert!(k.imag[i].abs() < 1e-12);
        }
    }

    #[test]
    fn centre_impulse_inverts_to_constant() {
        let n = 16;
        let mut k = KSpaceGrid::<f64>::zeros(n, n);
        k.real[(n / 2) * n + n / 2] = 1.0;
        let img = ifft2c(&k);
        for (&r, &i) in img.real.iter().zip(&img.imag) {
            assert!((r - 1.0 / n as f64).abs() < 1e-12);
            assert!(i.abs() < 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_dft() {
        for (h, w, seed) in [(8, 8, 1), (6, 10, 2), (5, 7, 3)] {
            let img = random_image(h, w, seed);
            let fast = fft2c(&img);
            let slow = naive_dft(&img, false);
            let fast_img = ComplexImage::from_parts(h, w, fast.real, fast.imag).unwrap();
            assert!(fast_img.max_abs_diff(&slow) < 1e-10, "{h}x{w}");

            let k = KSpaceGrid::from_parts(h, w, img.real.clone(), img.imag.clone()).unwrap();
            let inv = ifft2c(&k);
            assert!(inv.max_abs_diff(&naive_dft(&img, true)) < 1e-10);
        }
    }

    #[test]
    fn round_trip_f32() {
        let img = random_image(64, 64, 9).cast::<f32>();
        let back = ifft2c(&fft2c(&img));
        assert!(back.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn parseval_and_linearity() {
        let x = random_image(32, 32, 4);
        let z = random_image(32, 32, 5);
        let kx = fft2c(&x);
        let rel = (kx.norm() - x.norm()).abs() / x.norm();
        assert!(rel < 1e-12);

        let (a, b) = (0.3, -1.7);
        let lhs = fft2c(&x.scale(a).add(&z.scale(b)));
        let rhs = kx.scale(a).add(&fft2c(&z).scale(b));
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn batched_tensor_transform_matches_single() {
        let a = random_image(8, 8, 11);
        let b = random_image(8, 8, 12);
        let t = Tensor::stack(&[a.to_tensor(), b.to_tensor()]).unwrap();
        let k = transform_tensor(&t, false).unwrap();
        let kb = KSpaceGrid::from_tensor(&k, 1).unwrap();
        assert!(kb == fft2c(&b));
    }
}
