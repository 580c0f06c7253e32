//! Brute-force reference implementations used as oracles: nested-loop
//! convolutions, flood-fill labeling, global histogram equalization, and a
//! direct weighted-sum resampler. These deliberately share no code with the
//! production paths they check.

use ctnext::imaging::{BinaryMask, ImageGray, Region};

pub fn naive_conv2d(
    x: &[f64],
    (n, h, w, cin): (usize, usize, usize, usize),
    k: &[f64],
    (kh, kw, cout): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * oh * ow * cout];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x[((ni * h + iy as usize) * w + ix as usize) * cin + ci];
                                let kv = k[((ky * kw + kx) * cin + ci) * cout + co];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((ni * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    out
}

pub fn naive_depthwise(
    x: &[f64],
    (n, h, w, c): (usize, usize, usize, usize),
    k: &[f64],
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * oh * ow * c];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            acc += x[((ni * h + iy as usize) * w + ix as usize) * c + ci]
                                * k[(ky * kw + kx) * c + ci];
                        }
                    }
                    out[((ni * oh + oy) * ow + ox) * c + ci] = acc;
                }
            }
        }
    }
    out
}

/// Plain stack-based flood fill, sorted like the production labeling.
pub fn flood_fill_regions(mask: &BinaryMask) -> Vec<Region> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    for start_r in 0..h {
        for start_c in 0..w {
            if mask.get(start_r, start_c) == 0 || seen[start_r * w + start_c] {
                continue;
            }
            let mut stack = vec![(start_r, start_c)];
            seen[start_r * w + start_c] = true;
            let (mut area, mut row0, mut col0, mut row1, mut col1) =
                (0usize, start_r, start_c, start_r, start_c);
            let (mut rsum, mut csum) = (0.0f64, 0.0f64);
            while let Some((rr, cc)) = stack.pop() {
                area += 1;
                row0 = row0.min(rr);
                col0 = col0.min(cc);
                row1 = row1.max(rr);
                col1 = col1.max(cc);
                rsum += rr as f64;
                csum += cc as f64;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (nr, nc) = (rr as i64 + dr, cc as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if mask.get(nr, nc) == 1 && !seen[nr * w + nc] {
                            seen[nr * w + nc] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            regions.push(Region {
                area,
                row0,
                col0,
                row1,
                col1,
                centroid: (rsum / area as f64, csum / area as f64),
            });
        }
    }
    regions.sort_by(|a, b| {
        b.area
            .cmp(&a.area)
            .then(a.row0.cmp(&b.row0))
            .then(a.col0.cmp(&b.col0))
    });
    regions
}

pub fn quantize_256(v: f32) -> usize {
    ((v * 256.0).floor() as i64).clamp(0, 255) as usize
}

/// Global histogram equalization over the 256-bin quantization.
pub fn global_hist_eq(img: &ImageGray) -> Vec<f32> {
    let mut hist = [0u64; 256];
    for &v in &img.pixels {
        hist[quantize_256(v)] += 1;
    }
    let mut cdf = [0u64; 256];
    let mut acc = 0;
    for (b, c) in cdf.iter_mut().enumerate() {
        acc += hist[b];
        *c = acc;
    }
    let n = img.pixels.len() as f64;
    img.pixels
        .iter()
        .map(|&v| (cdf[quantize_256(v)] as f64 / n) as f32)
        .collect()
}

/// Direct weighted-sum resampler in f64 with half-pixel centers.
pub fn reference_resize(img: &ImageGray, out_h: usize, out_w: usize) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let mut out = vec![0.0; out_h * out_w];
    for dr in 0..out_h {
        let sr = (((dr as f64 + 0.5) * h as f64 / out_h as f64) - 0.5).clamp(0.0, (h - 1) as f64);
        let r0 = sr.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let fr = sr - r0 as f64;
        for dc in 0..out_w {
            let sc =
                (((dc as f64 + 0.5) * w as f64 / out_w as f64) - 0.5).clamp(0.0, (w - 1) as f64);
            let c0 = sc.floor() as usize;
            let c1 = (c0 + 1).min(w - 1);
            let fc = sc - c0 as f64;
            let v00 = img.get(r0, c0) as f64;
            let v01 = img.get(r0, c1) as f64;
            let v10 = img.get(r1, c0) as f64;
            let v11 = img.get(r1, c1) as f64;
            out[dr * out_w + dc] = (1.0 - fr) * ((1.0 - fc) * v00 + fc * v01)
                + fr * ((1.0 - fc) * v10 + fc * v11);
        }
    }
    out
}
