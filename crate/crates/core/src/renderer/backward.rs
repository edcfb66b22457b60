//! Reverse pass of the compositing chain: per-splat gradients of the
//! photometric loss with respect to the splat's 2D mean, inverse
//! covariance, opacity and color. Sort order and the visible set are those
//! of the forward pass.

use nalgebra::Vector2;
use rayon::prelude::*;

use super::{
    composite_pixel, AlphaSample, Image, LossKind, Packed, RenderSettings, SplatList, TileBins,
    TILE,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrads {
    pub d_uv: Vec<Vector2<f64>>,
    /// Gradient w.r.t. the conic entries (a, b, c) with
    /// `m² = a·dx² + 2b·dx·dy + c·dy²`.
    pub d_conic: Vec<[f64; 3]>,
    pub d_opacity: Vec<f64>,
    pub d_color: Vec<[f64; 3]>,
}

// per-splat accumulator layout: uv(2) conic(3) opacity(1) color(3)
const STRIDE: usize = 9;

struct Contribution<'a> {
    splat: &'a Packed,
    a: AlphaSample,
    t: f64,
    dx: f64,
    dy: f64,
}

/// Gradient of `loss(rasterize(list), target)` with respect to every splat
/// attribute. `image` must be the rasterized output of `list`.
pub fn backward(
    list: &SplatList,
    image: &Image,
    target: &Image,
    kind: LossKind,
    settings: &RenderSettings,
) -> Result<SplatGrads> {
    image.same_dims(target)?;
    check_list_dims(list, image)?;
    Ok(reverse(list, Some(image), target, kind, settings).1)
}

/// Rasterizes `list` and differentiates the loss against `target` in one
/// pass. The image equals `rasterize(list, settings)` bit for bit.
pub fn render_and_backward(
    list: &SplatList,
    target: &Image,
    kind: LossKind,
    settings: &RenderSettings,
) -> Result<(Image, SplatGrads)> {
    check_list_dims(list, target)?;
    Ok(reverse(list, None, target, kind, settings))
}

fn check_list_dims(list: &SplatList, image: &Image) -> Result<()> {
    if image.width != list.width || image.height != list.height {
        return Err(Error::dims(
            format!("{}×{}", list.width, list.height),
            format!("{}×{}", image.width, image.height),
        ));
    }
    Ok(())
}

fn reverse(
    list: &SplatList,
    image: Option<&Image>,
    target: &Image,
    kind: LossKind,
    settings: &RenderSettings,
) -> (Image, SplatGrads) {
    let bins = TileBins::build(list);
    let n = list.len();
    let w = list.width as usize;
    let h = list.height as usize;
    let norm = 1.0 / (target.data.len() as f64);
    let bg = settings.background;
    let mut rendered = Image::new(list.width, list.height);

    // one accumulator per band of tile rows, summed in band order afterwards
    let band_sums: Vec<Vec<f64>> = rendered
        .data
        .par_chunks_mut(3 * w * TILE)
        .enumerate()
        .map(|(band, out_rows)| {
            let mut acc = vec![0.0; n * STRIDE];
            let mut contribs: Vec<Contribution> = Vec::new();
            let y0 = band * TILE;
            bins.for_each_pixel(w, y0, (y0 + TILE).min(h), |x, y, tile| {
                let pix = 3 * (y * w + x);
                contribs.clear();
                let (raw, t_final) = composite_pixel(
                    tile,
                    x as f64 + 0.5,
                    y as f64 + 0.5,
                    &bg,
                    |splat, a, t, dx, dy| {
                        contribs.push(Contribution {
                            splat,
                            a,
                            t,
                            dx,
                            dy,
                        })
                    },
                );
                let local = pix - 3 * w * TILE * band;
                for k in 0..3 {
                    out_rows[local + k] = raw[k].clamp(0.0, 1.0);
                }
                let shown = match image {
                    Some(img) => [img.data[pix], img.data[pix + 1], img.data[pix + 2]],
                    None => [out_rows[local], out_rows[local + 1], out_rows[local + 2]],
                };
                let mut dl_dc = [0.0; 3];
                let mut any = false;
                for k in 0..3 {
                    if !(0.0..=1.0).contains(&raw[k]) {
                        continue;
                    }
                    let d = shown[k] - target.data[pix + k];
                    dl_dc[k] = match kind {
                        LossKind::L2 => 2.0 * d * norm,
                        LossKind::L1 => {
                            if d > 0.0 {
                                norm
                            } else if d < 0.0 {
                                -norm
                            } else {
                                0.0
                            }
                        }
                    };
                    any |= dl_dc[k] != 0.0;
                }
                if !any {
                    return;
                }
                // color accumulated behind the current splat
                let mut behind = [t_final * bg[0], t_final * bg[1], t_final * bg[2]];
                for c in contribs.iter().rev() {
                    let s = c.splat;
                    let alpha = c.a.alpha;
                    let wgt = alpha * c.t;
                    let inv = 1.0 / (1.0 - alpha);
                    let mut g_alpha = 0.0;
                    for k in 0..3 {
                        g_alpha += dl_dc[k] * (s.color[k] * c.t - behind[k] * inv);
                        behind[k] += s.color[k] * wgt;
                    }
                    let base = s.index * STRIDE;
                    acc[base + 6] += wgt * dl_dc[0];
                    acc[base + 7] += wgt * dl_dc[1];
                    acc[base + 8] += wgt * dl_dc[2];
                    acc[base + 5] += g_alpha * c.a.d_opacity;
                    let g_m2 = g_alpha * c.a.d_m2;
                    let [ca, cb, cc] = s.conic;
                    // m² depends on uv through d = pixel − uv
                    acc[base] += -2.0 * g_m2 * (ca * c.dx + cb * c.dy);
                    acc[base + 1] += -2.0 * g_m2 * (cb * c.dx + cc * c.dy);
                    acc[base + 2] += g_m2 * c.dx * c.dx;
                    acc[base + 3] += g_m2 * 2.0 * c.dx * c.dy;
                    acc[base + 4] += g_m2 * c.dy * c.dy;
                }
            });
            acc
        })
        .collect();

    let mut total = vec![0.0; n * STRIDE];
    for band in &band_sums {
        for (t, b) in total.iter_mut().zip(band) {
            *t += b;
        }
    }
    let mut out = SplatGrads {
        d_uv: Vec::with_capacity(n),
        d_conic: Vec::with_capacity(n),
        d_opacity: Vec::with_capacity(n),
        d_color: Vec::with_capacity(n),
    };
    for g in total.chunks_exact(STRIDE) {
        out.d_uv.push(Vector2::new(g[0], g[1]));
        out.d_conic.push([g[2], g[3], g[4]]);
        out.d_opacity.push(g[5]);
        out.d_color.push([g[6], g[7], g[8]]);
    }
    (rendered, out)
}

/// Per-splat `dL/duv` with covariance, opacity, color and sort order held
/// fixed.
pub fn backward_duv(
    list: &SplatList,
    image: &Image,
    target: &Image,
    kind: LossKind,
    settings: &RenderSettings,
) -> Result<Vec<Vector2<f64>>> {
    Ok(backward(list, image, target, kind, settings)?.d_uv)
}
