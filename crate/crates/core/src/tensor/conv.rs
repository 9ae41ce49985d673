//! Spatial (per-frame 2-D) and temporal (1-D over frames) convolutions on
//! clips laid out as `[T, C, H, W]`. Composed they form the separable
//! spatiotemporal convolution used by the motion feature extractor.

use super::array::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ConvKind {
    Spatial,
    Temporal,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    kind: ConvKind,
    t: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    /// kernel height (spatial) or length (temporal)
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    /// output frames, height, width
    to: usize,
    ho: usize,
    wo: usize,
}

fn out_len(input: usize, kernel: usize, stride: usize, pad: usize, what: &str) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config(format!("{what} stride must be positive")));
    }
    if kernel.is_multiple_of(2) {
        return Err(Error::config(format!("{what} kernel size {kernel} must be odd")));
    }
    if input + 2 * pad < kernel {
        return Err(Error::shape(format!(
            "{what} kernel of size {kernel} exceeds padded input of size {}",
            input + 2 * pad
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

impl ConvGeometry {
    pub(crate) fn spatial(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(Error::shape(format!("spatial conv of {x:?} with kernel {w:?}")));
        }
        let ho = out_len(x[2], w[2], stride, pad, "spatial")?;
        let wo = out_len(x[3], w[3], stride, pad, "spatial")?;
        Ok(Self {
            kind: ConvKind::Spatial,
            t: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            to: x[0],
            ho,
            wo,
        })
    }

    pub(crate) fn temporal(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 3 || x[1] != w[1] {
            return Err(Error::shape(format!("temporal conv of {x:?} with kernel {w:?}")));
        }
        let to = out_len(x[0], w[2], stride, pad, "temporal")?;
        Ok(Self {
            kind: ConvKind::Temporal,
            t: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: w[0],
            kh: w[2],
            kw: 1,
            stride,
            pad,
            to,
            ho: x[2],
            wo: x[3],
        })
    }

    pub(crate) fn out_shape(&self) -> Vec<usize> {
        vec![self.to, self.cout, self.ho, self.wo]
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Unfolds one frame `[cin, h, w]` into columns `[cin*kh*kw, ho*wo]`.
fn im2col<T: Real>(g: &ConvGeometry, frame: &[T], cols: &mut [T]) {
    let npix = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w;
                        cols[row * npix + oy * g.wo + ox] = if inside {
                            frame[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeometry, cols: &[T], frame: &mut [T]) {
    let npix = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        let dst = &mut frame[(c * g.h + iy as usize) * g.w + ix as usize];
                        *dst = *dst + cols[row * npix + oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn spatial_forward<T: Real>(g: &ConvGeometry, x: &[T], w: &[T]) -> Vec<T> {
    debug_assert_eq!(g.kind, ConvKind::Spatial);
    let (in_frame, npix, plen) = (g.cin * g.h * g.w, g.ho * g.wo, g.patch_len());
    let out_frame = g.cout * npix;
    let mut out = vec![T::zero(); g.t * out_frame];
    let mut cols = vec![T::zero(); plen * npix];
    for t in 0..g.t {
        im2col(g, &x[t * in_frame..(t + 1) * in_frame], &mut cols);
        T::gemm(
            g.cout,
            plen,
            npix,
            T::one(),
            w,
            (plen as isize, 1),
            &cols,
            (npix as isize, 1),
            T::zero(),
            &mut out[t * out_frame..(t + 1) * out_frame],
            (npix as isize, 1),
        );
    }
    out
}

pub(crate) fn spatial_backward_weight<T: Real>(g: &ConvGeometry, x: &[T], gout: &[T], gw: &mut [T]) {
    let (in_frame, npix, plen) = (g.cin * g.h * g.w, g.ho * g.wo, g.patch_len());
    let out_frame = g.cout * npix;
    let mut cols = vec![T::zero(); plen * npix];
    for t in 0..g.t {
        im2col(g, &x[t * in_frame..(t + 1) * in_frame], &mut cols);
        T::gemm(
            g.cout,
            npix,
            plen,
            T::one(),
            &gout[t * out_frame..(t + 1) * out_frame],
            (npix as isize, 1),
            &cols,
            (1, npix as isize),
            T::one(),
            gw,
            (plen as isize, 1),
        );
    }
}

pub(crate) fn spatial_backward_input<T: Real>(g: &ConvGeometry, w: &[T], gout: &[T], gx: &mut [T]) {
    let (in_frame, npix, plen) = (g.cin * g.h * g.w, g.ho * g.wo, g.patch_len());
    let out_frame = g.cout * npix;
    let mut cols = vec![T::zero(); plen * npix];
    for t in 0..g.t {
        T::gemm(
            plen,
            g.cout,
            npix,
            T::one(),
            w,
            (1, plen as isize),
            &gout[t * out_frame..(t + 1) * out_frame],
            (npix as isize, 1),
            T::zero(),
            &mut cols,
            (npix as isize, 1),
        );
        col2im_add(g, &cols, &mut gx[t * in_frame..(t + 1) * in_frame]);
    }
}

/// Input frame feeding tap `j` of output frame `to`, if inside the clip.
fn source_frame(g: &ConvGeometry, to: usize, j: usize) -> Option<usize> {
    let ti = (to * g.stride + j) as isize - g.pad as isize;
    (ti >= 0 && (ti as usize) < g.t).then_some(ti as usize)
}

pub(crate) fn temporal_forward<T: Real>(g: &ConvGeometry, x: &[T], w: &[T]) -> Vec<T> {
    debug_assert_eq!(g.kind, ConvKind::Temporal);
    let hw = g.h * g.w;
    let (in_frame, out_frame, kt) = (g.cin * hw, g.cout * hw, g.kh);
    let mut out = vec![T::zero(); g.to * out_frame];
    for to in 0..g.to {
        for j in 0..kt {
            let Some(ti) = source_frame(g, to, j) else { continue };
            T::gemm(
                g.cout,
                g.cin,
                hw,
                T::one(),
                &w[j..],
                ((g.cin * kt) as isize, kt as isize),
                &x[ti * in_frame..(ti + 1) * in_frame],
                (hw as isize, 1),
                T::one(),
                &mut out[to * out_frame..(to + 1) * out_frame],
                (hw as isize, 1),
            );
        }
    }
    out
}

pub(crate) fn temporal_backward_weight<T: Real>(g: &ConvGeometry, x: &[T], gout: &[T], gw: &mut [T]) {
    let hw = g.h * g.w;
    let (in_frame, out_frame, kt) = (g.cin * hw, g.cout * hw, g.kh);
    for to in 0..g.to {
        for j in 0..kt {
            let Some(ti) = source_frame(g, to, j) else { continue };
            T::gemm(
                g.cout,
                hw,
                g.cin,
                T::one(),
                &gout[to * out_frame..(to + 1) * out_frame],
                (hw as isize, 1),
                &x[ti * in_frame..(ti + 1) * in_frame],
                (1, hw as isize),
                T::one(),
                &mut gw[j..],
                ((g.cin * kt) as isize, kt as isize),
            );
        }
    }
}

pub(crate) fn temporal_backward_input<T: Real>(g: &ConvGeometry, w: &[T], gout: &[T], gx: &mut [T]) {
    let hw = g.h * g.w;
    let (in_frame, out_frame, kt) = (g.cin * hw, g.cout * hw, g.kh);
    for to in 0..g.to {
        for j in 0..kt {
            let Some(ti) = source_frame(g, to, j) else { continue };
            T::gemm(
                g.cin,
                g.cout,
                hw,
                T::one(),
                &w[j..],
                (kt as isize, (g.cin * kt) as isize),
                &gout[to * out_frame..(to + 1) * out_frame],
                (hw as isize, 1),
                T::one(),
                &mut gx[ti * in_frame..(ti + 1) * in_frame],
                (hw as isize, 1),
            );
        }
    }
}
