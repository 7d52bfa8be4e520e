//! 2-D discrete Fourier transforms over the trailing two axes.
//!
//! Convention: the forward transform is unnormalized and the inverse is
//! scaled by `1/(H·W)`, so `Σ|x|² = Σ|X|² / (H·W)`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{invalid, shape_err, Result, Tensor};

/// Paired real/imaginary arrays sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(shape: &[usize], re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n || shape.contains(&0) {
            return Err(shape_err(
                "complex",
                format!("shape {shape:?} vs parts {}/{}", re.len(), im.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            re,
            im,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn norm_sqr_sum(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(r, i)| r * r + i * i).sum()
    }

    pub fn magnitude(&self) -> Tensor {
        let data = self
            .re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| (r * r + i * i).sqrt())
            .collect();
        Tensor::new(&self.shape, data).expect("same shape")
    }

    pub fn real(&self) -> Tensor {
        Tensor::new(&self.shape, self.re.clone()).expect("same shape")
    }
}

fn plane_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(op, format!("need at least 2 axes, got {shape:?}")));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let planes = shape[..shape.len() - 2].iter().product();
    Ok((planes, h, w))
}

fn check_pow2(op: &'static str, h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(invalid(
            op,
            format!("extents {h}x{w} are not powers of two; use the padded variant"),
        ));
    }
    Ok(())
}

/// Unnormalized in-place 2-D DFT of every `h×w` plane in `buf`.
/// `inverse` flips the exponent sign only.
pub(crate) fn transform_planes(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for plane in buf.chunks_mut(h * w) {
        row_fft.process(plane);
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            col_fft.process(&mut column);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
    }
}

/// Forward 2-D FFT over the last two axes. Extents must be powers of two.
pub fn fft2(x: &Tensor) -> Result<ComplexTensor> {
    let (_, h, w) = plane_dims("fft2", x.shape())?;
    check_pow2("fft2", h, w)?;
    let mut buf: Vec<Complex<f64>> = x.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    transform_planes(&mut buf, h, w, false);
    Ok(split(x.shape(), buf))
}

/// Zero-pads the last two axes up to the next power of two, then transforms.
pub fn fft2_padded(x: &Tensor) -> Result<ComplexTensor> {
    let (planes, h, w) = plane_dims("fft2", x.shape())?;
    let (ph, pw) = (h.next_power_of_two(), w.next_power_of_two());
    let mut data = vec![0.0; planes * ph * pw];
    for p in 0..planes {
        for y in 0..h {
            let src = &x.data()[(p * h + y) * w..(p * h + y + 1) * w];
            data[(p * ph + y) * pw..(p * ph + y) * pw + w].copy_from_slice(src);
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ph;
    shape[r - 1] = pw;
    fft2(&Tensor::new(&shape, data)?)
}

/// Inverse 2-D FFT scaled by `1/(H·W)`.
pub fn ifft2(x: &ComplexTensor) -> Result<ComplexTensor> {
    let (_, h, w) = plane_dims("ifft2", x.shape())?;
    check_pow2("ifft2", h, w)?;
    let mut buf = join(x);
    transform_planes(&mut buf, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    Ok(split(x.shape(), buf))
}

/// Quadrant swap moving the DC bin of each plane to `(H/2, W/2)`.
/// Self-inverse for even extents; odd extents are rejected.
pub fn fftshift(x: &ComplexTensor) -> Result<ComplexTensor> {
    let (planes, h, w) = plane_dims("fftshift", x.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid("fftshift", format!("odd extents {h}x{w}")));
    }
    let mut re = vec![0.0; x.re.len()];
    let mut im = vec![0.0; x.im.len()];
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                let src = p * h * w + y * w + xx;
                let dst = p * h * w + ((y + h / 2) % h) * w + (xx + w / 2) % w;
                re[dst] = x.re[src];
                im[dst] = x.im[src];
            }
        }
    }
    ComplexTensor::new(x.shape(), re, im)
}

fn join(x: &ComplexTensor) -> Vec<Complex<f64>> {
    x.re.iter()
        .zip(&x.im)
        .map(|(&r, &i)| Complex::new(r, i))
        .collect()
}

fn split(shape: &[usize], buf: Vec<Complex<f64>>) -> ComplexTensor {
    let re = buf.iter().map(|c| c.re).collect();
    let im = buf.iter().map(|c| c.im).collect();
    ComplexTensor::new(shape, re, im).expect("same shape")
}
