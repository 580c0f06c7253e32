//! Lung masking, 8-connected component labeling, and the two-lung ROI crop
//! that produces the 250x250 model input.

use super::{resize_bilinear, ImageGray, ROI_HEIGHT, ROI_WIDTH};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), height * width);
        debug_assert!(pixels.iter().all(|&p| p <= 1));
        Self {
            height,
            width,
            pixels,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

/// A labeled foreground region. The bounding box is inclusive on all sides.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub area: usize,
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
    pub centroid: (f64, f64),
}

/// Thresholds dark pixels (`v < threshold`) as lung candidates, then removes
/// every 8-connected foreground component that touches the image border
/// (background air).
pub fn lung_mask(img: &ImageGray, threshold: f32) -> BinaryMask {
    let (h, w) = (img.height, img.width);
    let mut fg: Vec<u8> = img
        .pixels
        .iter()
        .map(|&v| u8::from(v < threshold))
        .collect();
    // Flood out border-touching foreground.
    let mut stack: Vec<(usize, usize)> = Vec::new();
    let push_if_fg = |fg: &mut Vec<u8>, stack: &mut Vec<(usize, usize)>, r: usize, c: usize| {
        if fg[r * w + c] == 1 {
            fg[r * w + c] = 0;
            stack.push((r, c));
        }
    };
    for c in 0..w {
        push_if_fg(&mut fg, &mut stack, 0, c);
        push_if_fg(&mut fg, &mut stack, h - 1, c);
    }
    for r in 0..h {
        push_if_fg(&mut fg, &mut stack, r, 0);
        push_if_fg(&mut fg, &mut stack, r, w - 1);
    }
    while let Some((r, c)) = stack.pop() {
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr >= 0 && nr < h as i64 && nc >= 0 && nc < w as i64 {
                    let (nr, nc) = (nr as usize, nc as usize);
                    if fg[nr * w + nc] == 1 {
                        fg[nr * w + nc] = 0;
                        stack.push((nr, nc));
                    }
                }
            }
        }
    }
    BinaryMask::new(h, w, fg)
}

/// Labels 8-connected foreground regions with a two-pass union-find sweep.
///
/// Regions come back sorted by area descending; ties break on the smaller
/// bounding-box origin `(row0, col0)`.
pub fn connected_components(mask: &BinaryMask) -> Vec<Region> {
    let (h, w) = (mask.height, mask.width);
    if h == 0 || w == 0 {
        return Vec::new();
    }
    let mut labels = vec![0u32; h * w]; // 0 = background
    let mut parent: Vec<u32> = vec![0]; // parent[label]; label 0 unused

    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }

    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) == 0 {
                continue;
            }
            // Already-visited 8-neighbours: W, NW, N, NE.
            let mut neighbor = 0u32;
            let consider = |lbl: u32, parent: &mut Vec<u32>, neighbor: &mut u32| {
                if lbl != 0 {
                    let root = find(parent, lbl);
                    if *neighbor == 0 {
                        *neighbor = root;
                    } else if root != *neighbor {
                        let a = find(parent, *neighbor);
                        let (lo, hi) = if a < root { (a, root) } else { (root, a) };
                        parent[hi as usize] = lo;
                        *neighbor = lo;
                    }
                }
            };
            if c > 0 {
                consider(labels[r * w + c - 1], &mut parent, &mut neighbor);
            }
            if r > 0 {
                if c > 0 {
                    consider(labels[(r - 1) * w + c - 1], &mut parent, &mut neighbor);
                }
                consider(labels[(r - 1) * w + c], &mut parent, &mut neighbor);
                if c + 1 < w {
                    consider(labels[(r - 1) * w + c + 1], &mut parent, &mut neighbor);
                }
            }
            if neighbor == 0 {
                let fresh = parent.len() as u32;
                parent.push(fresh);
                labels[r * w + c] = fresh;
            } else {
                labels[r * w + c] = neighbor;
            }
        }
    }

    struct Acc {
        area: usize,
        row0: usize,
        col0: usize,
        row1: usize,
        col1: usize,
        row_sum: f64,
        col_sum: f64,
    }
    let mut accs: Vec<Option<Acc>> = (0..parent.len()).map(|_| None).collect();
    for r in 0..h {
        for c in 0..w {
            let lbl = labels[r * w + c];
            if lbl == 0 {
                continue;
            }
            let root = find(&mut parent, lbl) as usize;
            let acc = accs[root].get_or_insert(Acc {
                area: 0,
                row0: r,
                col0: c,
                row1: r,
                col1: c,
                row_sum: 0.0,
                col_sum: 0.0,
            });
            acc.area += 1;
            acc.row0 = acc.row0.min(r);
            acc.col0 = acc.col0.min(c);
            acc.row1 = acc.row1.max(r);
            acc.col1 = acc.col1.max(c);
            acc.row_sum += r as f64;
            acc.col_sum += c as f64;
        }
    }
    let mut regions: Vec<Region> = accs
        .into_iter()
        .flatten()
        .map(|a| Region {
            area: a.area,
            row0: a.row0,
            col0: a.col0,
            row1: a.row1,
            col1: a.col1,
            centroid: (a.row_sum / a.area as f64, a.col_sum / a.area as f64),
        })
        .collect();
    regions.sort_by(|a, b| {
        b.area
            .cmp(&a.area)
            .then(a.row0.cmp(&b.row0))
            .then(a.col0.cmp(&b.col0))
    });
    regions
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiFallback {
    None,
    SingleComponent,
    WholeImage,
}

#[derive(Debug, Clone)]
pub struct RoiResult {
    pub image: ImageGray,
    /// The cropped boxes in left/right order, inclusive coordinates.
    pub boxes: Vec<(usize, usize, usize, usize)>,
    pub fallback_used: RoiFallback,
}

fn crop(img: &ImageGray, row0: usize, col0: usize, row1: usize, col1: usize) -> ImageGray {
    let (h, w) = (row1 - row0 + 1, col1 - col0 + 1);
    let mut out = ImageGray::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            out.set(r, c, img.get(row0 + r, col0 + c));
        }
    }
    out
}

/// Crops the two largest mask components from `img`, resizes each to
/// 250x125 and concatenates them left/right (ordered by centroid column)
/// into one 250x250 image.
///
/// Degenerate masks fall back: one component is split into vertical halves,
/// an empty mask resizes the whole image.
pub fn extract_lung_roi(img: &ImageGray, mask: &BinaryMask) -> RoiResult {
    assert_eq!((img.height, img.width), (mask.height, mask.width));
    let regions = connected_components(mask);
    let half_w = ROI_WIDTH / 2;

    let (boxes, fallback) = match regions.len() {
        0 => {
            return RoiResult {
                image: resize_bilinear(img, ROI_HEIGHT, ROI_WIDTH),
                boxes: Vec::new(),
                fallback_used: RoiFallback::WholeImage,
            }
        }
        1 => {
            let r = &regions[0];
            let width = r.col1 - r.col0 + 1;
            if width < 2 {
                return RoiResult {
                    image: resize_bilinear(img, ROI_HEIGHT, ROI_WIDTH),
                    boxes: Vec::new(),
                    fallback_used: RoiFallback::WholeImage,
                };
            }
            let mid = r.col0 + width / 2;
            (
                vec![
                    (r.row0, r.col0, r.row1, mid - 1),
                    (r.row0, mid, r.row1, r.col1),
                ],
                RoiFallback::SingleComponent,
            )
        }
        _ => {
            let mut pair = [&regions[0], &regions[1]];
            // Left/right by centroid column; centroid row breaks ties.
            if (pair[1].centroid.1, pair[1].centroid.0) < (pair[0].centroid.1, pair[0].centroid.0) {
                pair.swap(0, 1);
            }
            (
                vec![
                    (pair[0].row0, pair[0].col0, pair[0].row1, pair[0].col1),
                    (pair[1].row0, pair[1].col0, pair[1].row1, pair[1].col1),
                ],
                RoiFallback::None,
            )
        }
    };

    let mut out = ImageGray::zeros(ROI_HEIGHT, ROI_WIDTH);
    for (side, &(r0, c0, r1, c1)) in boxes.iter().enumerate() {
        let resized = resize_bilinear(&crop(img, r0, c0, r1, c1), ROI_HEIGHT, half_w);
        let col_off = side * half_w;
        for r in 0..ROI_HEIGHT {
            for c in 0..half_w {
                out.set(r, col_off + c, resized.get(r, c));
            }
        }
    }
    RoiResult {
        image: out,
        boxes,
        fallback_used: fallback,
    }
}
