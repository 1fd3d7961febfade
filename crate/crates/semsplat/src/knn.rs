//! Exact k-nearest-neighbor search with uniform-grid acceleration and ring
//! expansion, for 3D point clouds and for labeled pixels in 2D. Results are
//! identical to exhaustive search, including tie ordering.

use crate::image_io::{LabelImage, BACKGROUND_LABEL};
use crate::parallel;
use nalgebra::Vector3;
use std::collections::HashMap;

/// Uniform-grid index over 3D points.
pub struct PointGrid3 {
    cell: f64,
    cells: HashMap<[i32; 3], Vec<u32>>,
    points: Vec<Vector3<f64>>,
    max_ring: i32,
}

impl PointGrid3 {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let n = points.len().max(1);
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let extent = if points.is_empty() {
            1.0
        } else {
            (hi - lo).norm().max(1e-9)
        };
        // Aim for a handful of points per cell.
        let cell = (extent / (n as f64).cbrt()).max(1e-9);
        let mut cells: HashMap<[i32; 3], Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::coord(p, cell)).or_default().push(i as u32);
        }
        let max_ring = (extent / cell).ceil() as i32 + 2;
        PointGrid3 {
            cell,
            cells,
            points: points.to_vec(),
            max_ring,
        }
    }

    fn coord(p: &Vector3<f64>, cell: f64) -> [i32; 3] {
        [
            (p.x / cell).floor() as i32,
            (p.y / cell).floor() as i32,
            (p.z / cell).floor() as i32,
        ]
    }

    /// The `k` nearest points to `query`, excluding `exclude`, sorted by
    /// `(distance², index)`. Exact: ring expansion stops only when no closer
    /// point can exist in farther rings.
    pub fn knn(&self, query: Vector3<f64>, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let c0 = Self::coord(&query, self.cell);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 8);
        let mut ring = 0i32;
        loop {
            // Visit cells at Chebyshev distance `ring`.
            let mut visit = |cc: [i32; 3], best: &mut Vec<(f64, usize)>| {
                if let Some(list) = self.cells.get(&cc) {
                    for &i in list {
                        let i = i as usize;
                        if Some(i) == exclude {
                            continue;
                        }
                        let d2 = (self.points[i] - query).norm_squared();
                        best.push((d2, i));
                    }
                }
            };
            if ring == 0 {
                visit(c0, &mut best);
            } else {
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            visit([c0[0] + dx, c0[1] + dy, c0[2] + dz], &mut best);
                        }
                    }
                }
            }
            best.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            best.truncate(k.max(1) * 4 + 16);
            // A point in ring r+1 or beyond is at least `ring * cell` away.
            let bound = ring as f64 * self.cell;
            if best.len() >= k && best[k - 1].0.sqrt() <= bound {
                break;
            }
            if ring > self.max_ring {
                break;
            }
            ring += 1;
        }
        best.truncate(k);
        best.into_iter().map(|(d2, i)| (i, d2)).collect()
    }
}

/// Exhaustive reference used by tests and as an internal fallback.
pub fn knn_exhaustive(
    points: &[Vector3<f64>],
    query: Vector3<f64>,
    k: usize,
    exclude: Option<usize>,
) -> Vec<(usize, f64)> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| ((p - query).norm_squared(), i))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter().map(|(d2, i)| (i, d2)).collect()
}

/// k-nearest-neighbor graph over a cloud (self excluded): `n × k` neighbor
/// indices, rows sorted by `(distance², index)`.
pub fn knn_graph(points: &[Vector3<f64>], k: usize) -> Vec<u32> {
    let grid = PointGrid3::build(points);
    let rows: Vec<Vec<u32>> = parallel::map_indexed(points.len(), |i| {
        grid.knn(points[i], k, Some(i))
            .into_iter()
            .map(|(j, _)| j as u32)
            .collect()
    });
    let mut out = Vec::with_capacity(points.len() * k);
    for r in rows {
        debug_assert_eq!(r.len(), k);
        out.extend_from_slice(&r);
    }
    out
}

/// Grid index over the labeled (non-background) pixels of a label image.
pub struct LabeledPixelGrid {
    bucket: i32,
    buckets: HashMap<[i32; 2], Vec<u32>>,
    /// Packed labeled pixels: (x, y, label).
    pixels: Vec<(u16, u16, u8)>,
    max_ring: i32,
}

impl LabeledPixelGrid {
    pub fn build(labels: &LabelImage) -> Self {
        let bucket = 8i32;
        let mut buckets: HashMap<[i32; 2], Vec<u32>> = HashMap::new();
        let mut pixels = Vec::new();
        for y in 0..labels.height {
            for x in 0..labels.width {
                let l = labels.get(y, x);
                if l != BACKGROUND_LABEL {
                    let idx = pixels.len() as u32;
                    pixels.push((x as u16, y as u16, l));
                    buckets
                        .entry([(x as i32) / bucket, (y as i32) / bucket])
                        .or_default()
                        .push(idx);
                }
            }
        }
        let max_ring = ((labels.width.max(labels.height) as i32) / bucket) + 2;
        LabeledPixelGrid {
            bucket,
            buckets,
            pixels,
            max_ring,
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.pixels.len()
    }

    /// The `k` nearest labeled pixels to `(x, y)`, sorted by squared pixel
    /// distance with ties broken by row-major pixel order. Exact integer
    /// arithmetic throughout.
    pub fn knn(&self, x: i32, y: i32, k: usize, width: usize) -> Vec<(u16, u16, u8, i64)> {
        let c0 = [x / self.bucket, y / self.bucket];
        let mut best: Vec<(i64, u32)> = Vec::with_capacity(k * 4 + 8);
        let key = |px: u16, py: u16| (py as i64) * width as i64 + px as i64;
        let mut ring = 0i32;
        loop {
            let mut visit = |cc: [i32; 2], best: &mut Vec<(i64, u32)>| {
                if let Some(list) = self.buckets.get(&cc) {
                    for &i in list {
                        let (px, py, _) = self.pixels[i as usize];
                        let dx = px as i64 - x as i64;
                        let dy = py as i64 - y as i64;
                        best.push((dx * dx + dy * dy, i));
                    }
                }
            };
            if ring == 0 {
                visit(c0, &mut best);
            } else {
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        if dx.abs().max(dy.abs()) != ring {
                            continue;
                        }
                        visit([c0[0] + dx, c0[1] + dy], &mut best);
                    }
                }
            }
            best.sort_by(|a, b| {
                a.0.cmp(&b.0).then_with(|| {
                    let pa = self.pixels[a.1 as usize];
                    let pb = self.pixels[b.1 as usize];
                    key(pa.0, pa.1).cmp(&key(pb.0, pb.1))
                })
            });
            best.truncate(k.max(1) * 4 + 16);
            let bound = (ring as i64) * self.bucket as i64;
            if best.len() >= k && best[k - 1].0 <= bound * bound {
                break;
            }
            if ring > self.max_ring {
                break;
            }
            ring += 1;
        }
        best.truncate(k);
        best.into_iter()
            .map(|(d2, i)| {
                let (px, py, l) = self.pixels[i as usize];
                (px, py, l, d2)
            })
            .collect()
    }
}

/// Exhaustive labeled-pixel scan, the oracle for [`LabeledPixelGrid::knn`].
pub fn labeled_knn_exhaustive(
    labels: &LabelImage,
    x: i32,
    y: i32,
    k: usize,
) -> Vec<(u16, u16, u8, i64)> {
    let mut all: Vec<(i64, i64, u16, u16, u8)> = Vec::new();
    for py in 0..labels.height {
        for px in 0..labels.width {
            let l = labels.get(py, px);
            if l == BACKGROUND_LABEL {
                continue;
            }
            let dx = px as i64 - x as i64;
            let dy = py as i64 - y as i64;
            all.push((
                dx * dx + dy * dy,
                (py * labels.width + px) as i64,
                px as u16,
                py as u16,
                l,
            ));
        }
    }
    all.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter().map(|(d2, _, px, py, l)| (px, py, l, d2)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::LabelProvenance;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn point_knn_matches_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        for round in 0..200 {
            let n = rng.gen_range(2..80);
            let points: Vec<Vector3<f64>> = (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let grid = PointGrid3::build(&points);
            let k = rng.gen_range(1..=8.min(n - 1));
            let qi = rng.gen_range(0..n);
            let got = grid.knn(points[qi], k, Some(qi));
            let want = knn_exhaustive(&points, points[qi], k, Some(qi));
            assert_eq!(got, want, "round {round}");
        }
    }

    #[test]
    fn point_knn_handles_duplicates_and_small_sets() {
        let points = vec![Vector3::zeros(), Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)];
        let grid = PointGrid3::build(&points);
        let got = grid.knn(Vector3::zeros(), 3, Some(0));
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].0, 1);
        assert_eq!(got[1].0, 2);
    }

    #[test]
    fn graph_rows_exclude_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(112);
        let points: Vec<Vector3<f64>> = (0..40)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let k = 5;
        let graph = knn_graph(&points, k);
        for i in 0..40 {
            for j in 0..k {
                assert_ne!(graph[i * k + j] as usize, i);
            }
        }
    }

    #[test]
    fn pixel_knn_matches_exhaustive_all_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        for round in 0..200 {
            let h = rng.gen_range(6..40);
            let w = rng.gen_range(6..40);
            let mut labels = crate::image_io::LabelImage::background(
                h,
                w,
                LabelProvenance::ProjectedTemplate,
            );
            let count = rng.gen_range(1..(h * w / 2).max(2));
            for _ in 0..count {
                let y = rng.gen_range(0..h);
                let x = rng.gen_range(0..w);
                labels.set(y, x, rng.gen_range(0..5));
            }
            let grid = LabeledPixelGrid::build(&labels);
            let k = rng.gen_range(1..=8usize).min(grid.labeled_count());
            let qx = rng.gen_range(0..w) as i32;
            let qy = rng.gen_range(0..h) as i32;
            let got = grid.knn(qx, qy, k, w);
            let want = labeled_knn_exhaustive(&labels, qx, qy, k);
            assert_eq!(got, want, "round {round}");
        }
    }
}
