//! Stride-1 2-d cross-correlation kernels on NCHW buffers.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    /// Output rows `oy` whose input row `oy + ky - pad` is in range.
    #[inline]
    fn span(&self, kk: usize, len_in: usize, len_out: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kk);
        let hi = (len_in + self.pad).saturating_sub(kk).min(len_out);
        (lo, hi.max(lo))
    }
}

pub(crate) fn forward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane_in = g.h * g.w;
    let plane_out = oh * ow;
    let mut out = vec![0.0; g.batch * g.cout * plane_out];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let oplane = &mut out[(b * g.cout + co) * plane_out..][..plane_out];
            if let Some(bias) = bias {
                oplane.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..g.cin {
                let iplane = &input[(b * g.cin + ci) * plane_in..][..plane_in];
                let wk = &weight[(co * g.cin + ci) * g.k * g.k..][..g.k * g.k];
                for ky in 0..g.k {
                    let (y0, y1) = g.span(ky, g.h, oh);
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = g.span(kx, g.w, ow);
                        let ix0 = x0 + kx - g.pad;
                        let n = x1 - x0;
                        for oy in y0..y1 {
                            let iy = oy + ky - g.pad;
                            let src = &iplane[iy * g.w + ix0..][..n];
                            let dst = &mut oplane[oy * ow + x0..][..n];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_in: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane_in = g.h * g.w;
    let plane_out = oh * ow;
    if let Some(gb) = grad_b {
        for b in 0..g.batch {
            for (co, gbv) in gb.iter_mut().enumerate() {
                *gbv += grad_out[(b * g.cout + co) * plane_out..][..plane_out]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
    for b in 0..g.batch {
        for co in 0..g.cout {
            let gplane = &grad_out[(b * g.cout + co) * plane_out..][..plane_out];
            for ci in 0..g.cin {
                let in_off = (b * g.cin + ci) * plane_in;
                let w_off = (co * g.cin + ci) * g.k * g.k;
                for ky in 0..g.k {
                    let (y0, y1) = g.span(ky, g.h, oh);
                    for kx in 0..g.k {
                        let (x0, x1) = g.span(kx, g.w, ow);
                        let ix0 = x0 + kx - g.pad;
                        let n = x1 - x0;
                        let wv = weight[w_off + ky * g.k + kx];
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy + ky - g.pad;
                            let go = &gplane[oy * ow + x0..][..n];
                            if let Some(gi) = grad_in.as_deref_mut() {
                                let dst = &mut gi[in_off + iy * g.w + ix0..][..n];
                                for (d, s) in dst.iter_mut().zip(go) {
                                    *d += wv * s;
                                }
                            }
                            if grad_w.is_some() {
                                let src = &input[in_off + iy * g.w + ix0..][..n];
                                acc += go.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                        if let Some(gw) = grad_w.as_deref_mut() {
                            gw[w_off + ky * g.k + kx] += acc;
                        }
                    }
                }
            }
        }
    }
}
