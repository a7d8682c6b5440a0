//! Fused multi-view feature point clouds and exact kNN search.

use std::cmp::Ordering;
use std::path::Path;

use crate::encoder::STRIDE;
use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthMap};
use crate::io;
use crate::tensor::{Real, Tensor};

/// Below this many points kNN scans every point.
pub const BRUTE_FORCE_BELOW: usize = 512;

/// Where a cloud point came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PointTag {
    pub view: u32,
    pub row: u32,
    pub col: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn closer(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index))
}

/// Keeps the `k` best neighbors in ascending order.
struct TopK {
    k: usize,
    items: Vec<Neighbor>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn push(&mut self, n: Neighbor) {
        if self.items.len() == self.k && closer(&n, &self.items[self.k - 1]) != Ordering::Less {
            return;
        }
        let at = self.items.partition_point(|x| closer(x, &n) == Ordering::Less);
        self.items.insert(at, n);
        self.items.truncate(self.k);
    }

    fn full(&self) -> bool {
        self.items.len() == self.k
    }
}

/// Uniform voxel grid in compressed-row layout.
#[derive(Clone, Debug)]
struct Grid {
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl Grid {
    fn build(points: &[[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let extent: Vec<f64> = (0..3).map(|i| (hi[i] - lo[i]).max(0.0)).collect();
        let mut cell = mean_nn_spacing(points).max(1e-9);
        // bound the number of cells by a small multiple of the point count
        let dims_for = |c: f64| -> [usize; 3] { [0, 1, 2].map(|i| ((extent[i] / c).floor() as usize + 1).max(1)) };
        while dims_for(cell).iter().map(|&d| d as f64).product::<f64>() > 4.0 * points.len() as f64 {
            cell *= 1.25;
        }
        let dims = dims_for(cell);
        let n_cells = dims[0] * dims[1] * dims[2];
        let cell_of = |p: &[f64; 3]| -> usize {
            let c = [0, 1, 2].map(|i| (((p[i] - lo[i]) / cell).floor() as usize).min(dims[i] - 1));
            (c[0] * dims[1] + c[1]) * dims[2] + c[2]
        };
        let mut counts = vec![0u32; n_cells + 1];
        let ids: Vec<usize> = points.iter().map(cell_of).collect();
        for &c in &ids {
            counts[c + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut items = vec![0u32; points.len()];
        for (i, &c) in ids.iter().enumerate() {
            items[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        Self {
            origin: lo,
            cell,
            dims,
            starts: counts,
            items,
        }
    }

    fn knn(&self, points: &[[f64; 3]], q: &[f64; 3], k: usize) -> Vec<Neighbor> {
        let qc: [i64; 3] = [0, 1, 2].map(|i| ((q[i] - self.origin[i]) / self.cell).floor() as i64);
        let dims = self.dims.map(|d| d as i64);
        let max_ring = (0..3).map(|i| qc[i].abs().max((dims[i] - 1 - qc[i]).abs())).max().unwrap();
        let mut top = TopK::new(k);
        for r in 0..=max_ring {
            let lo = [0, 1, 2].map(|i| (qc[i] - r).max(0));
            let hi = [0, 1, 2].map(|i| (qc[i] + r).min(dims[i] - 1));
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    let on_shell_xy = (x - qc[0]).abs() == r || (y - qc[1]).abs() == r;
                    let mut z = lo[2];
                    while z <= hi[2] {
                        if on_shell_xy || (z - qc[2]).abs() == r {
                            let c = ((x * dims[1] + y) * dims[2] + z) as usize;
                            for &i in &self.items[self.starts[c] as usize..self.starts[c + 1] as usize] {
                                let i = i as usize;
                                top.push(Neighbor {
                                    index: i,
                                    distance: dist(&points[i], q),
                                });
                            }
                            z += 1;
                        } else {
                            // interior of the shell was covered by earlier rings
                            z = qc[2] + r;
                        }
                    }
                }
            }
            // every unvisited point is at least r cells away
            if top.full() && top.items[k - 1].distance < r as f64 * self.cell {
                break;
            }
        }
        top.items
    }
}

/// Mean nearest-neighbor spacing estimated from up to 64 evenly strided points.
fn mean_nn_spacing(points: &[[f64; 3]]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let step = (points.len() / 64).max(1);
    let mut sum = 0.0;
    let mut n = 0;
    for i in (0..points.len()).step_by(step) {
        let mut best = f64::INFINITY;
        for (j, p) in points.iter().enumerate() {
            if j != i {
                let d = dist(p, &points[i]);
                if d > 0.0 {
                    best = best.min(d);
                }
            }
        }
        if best.is_finite() {
            sum += best;
            n += 1;
        }
    }
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

/// Exact kNN index over a fixed point set.
#[derive(Clone, Debug)]
pub enum SpatialIndex {
    Brute,
    Grid(Box<GridIndex>),
}

/// Opaque wrapper so the grid layout stays private.
#[derive(Clone, Debug)]
pub struct GridIndex(Grid);

impl SpatialIndex {
    pub fn build(points: &[[f64; 3]]) -> Self {
        if points.len() < BRUTE_FORCE_BELOW {
            SpatialIndex::Brute
        } else {
            SpatialIndex::Grid(Box::new(GridIndex(Grid::build(points))))
        }
    }

    pub fn is_grid(&self) -> bool {
        matches!(self, SpatialIndex::Grid(_))
    }
}

/// Scan every point; the reference the grid must agree with.
pub fn knn_brute_force(points: &[[f64; 3]], q: &[f64; 3], k: usize) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = points
        .iter()
        .enumerate()
        .map(|(index, p)| Neighbor {
            index,
            distance: dist(p, q),
        })
        .collect();
    let k = k.min(all.len());
    if k < all.len() && k > 0 {
        all.select_nth_unstable_by(k - 1, closer);
        all.truncate(k);
    }
    all.sort_by(closer);
    all.truncate(k);
    all
}

/// Point positions, origin tags and feature-row indices of one fused cloud.
///
/// Points are stored in (view, row, col) order so that index order is the
/// kNN tie-break order.
#[derive(Clone, Debug)]
pub struct CloudGeometry {
    pub positions: Vec<[f64; 3]>,
    pub tags: Vec<PointTag>,
    /// Row of each point's feature in the flattened `[images * h * w, d]` level tensor.
    pub feature_rows: Vec<usize>,
    index: SpatialIndex,
}

impl CloudGeometry {
    pub fn new(positions: Vec<[f64; 3]>, tags: Vec<PointTag>, feature_rows: Vec<usize>) -> Result<Self> {
        if positions.len() != tags.len() || positions.len() != feature_rows.len() {
            return Err(Error::invalid("cloud positions, tags and feature rows must have equal length"));
        }
        if positions.iter().any(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid("cloud positions must be finite"));
        }
        let index = SpatialIndex::build(&positions);
        Ok(Self {
            positions,
            tags,
            feature_rows,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn index(&self) -> &SpatialIndex {
        &self.index
    }

    /// `min(k, N)` nearest points, ascending by distance then storage index.
    pub fn knn(&self, q: &[f64; 3], k: usize) -> Result<Vec<Neighbor>> {
        if self.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if k == 0 {
            return Err(Error::invalid("knn needs K >= 1"));
        }
        Ok(match &self.index {
            SpatialIndex::Brute => knn_brute_force(&self.positions, q, k),
            SpatialIndex::Grid(g) => g.0.knn(&self.positions, q, k.min(self.len())),
        })
    }

    /// Debug dump as `x,y,z,view,row,col`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .positions
            .iter()
            .zip(&self.tags)
            .map(|(p, t)| {
                vec![
                    p[0].to_string(),
                    p[1].to_string(),
                    p[2].to_string(),
                    t.view.to_string(),
                    t.row.to_string(),
                    t.col.to_string(),
                ]
            })
            .collect();
        io::write_table(path, &["x", "y", "z", "view", "row", "col"], &rows)?;
        Ok(())
    }
}

/// One view's inputs to fusion at a single frame.
#[derive(Clone, Copy, Debug)]
pub struct ViewInput<'a> {
    pub camera: &'a Camera,
    pub depth: &'a DepthMap,
    /// First row of this view's feature map in the flattened level tensor.
    pub feature_base: usize,
}

/// Pixel sampled for feature cell `c` at a grid with the given stride.
pub fn cell_pixel(c: usize, stride: usize) -> usize {
    stride * c + stride / 2
}

/// Lift every valid cell of a `grid_h x grid_w` feature grid into world space.
///
/// Each cell takes the depth of the full-resolution pixel nearest its center
/// and is unprojected at that pixel. Views are visited in `view_id` order.
pub fn fuse_geometry(views: &[ViewInput], grid_h: usize, grid_w: usize) -> Result<CloudGeometry> {
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by_key(|&i| views[i].camera.view_id);
    let mut positions = Vec::new();
    let mut tags = Vec::new();
    let mut rows = Vec::new();
    for &vi in &order {
        let v = &views[vi];
        let d = v.depth;
        if grid_h == 0 || grid_w == 0 || !d.height.is_multiple_of(grid_h) || !d.width.is_multiple_of(grid_w) || d.height / grid_h != d.width / grid_w {
            return Err(Error::invalid(format!(
                "depth {}x{} does not tile into a {grid_h}x{grid_w} feature grid",
                d.height, d.width
            )));
        }
        let stride = d.height / grid_h;
        for r in 0..grid_h {
            for c in 0..grid_w {
                let (pr, pc) = (cell_pixel(r, stride), cell_pixel(c, stride));
                let Some(z) = d.valid(pr, pc) else { continue };
                let x = v.camera.unproject_pixel(pc as f64, pr as f64, z as f64)?;
                positions.push([x.x, x.y, x.z]);
                tags.push(PointTag {
                    view: v.camera.view_id,
                    row: r as u32,
                    col: c as u32,
                });
                rows.push(v.feature_base + r * grid_w + c);
            }
        }
    }
    CloudGeometry::new(positions, tags, rows)
}

/// A cloud with its own copy of the point features.
#[derive(Clone, Debug)]
pub struct FusedPointCloud<T: Real = f32> {
    pub geometry: CloudGeometry,
    /// `[N, d]`, row `i` belongs to point `i`.
    pub features: Tensor<T>,
}

impl<T: Real> FusedPointCloud<T> {
    pub fn from_geometry(geometry: CloudGeometry, level: &Tensor<T>) -> Result<Self> {
        let d = level.last_dim();
        let rows = level.numel() / d.max(1);
        let mut data = Vec::with_capacity(geometry.len() * d);
        for &r in &geometry.feature_rows {
            if r >= rows {
                return Err(Error::invalid(format!("feature row {r} out of {rows}")));
            }
            data.extend_from_slice(&level.data()[r * d..(r + 1) * d]);
        }
        let features = Tensor::new(vec![geometry.len(), d], data)?;
        Ok(Self { geometry, features })
    }

    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[T] {
        let d = self.features.last_dim();
        &self.features.data()[i * d..(i + 1) * d]
    }

    /// `(neighbor, distance)` list; see [`CloudGeometry::knn`].
    pub fn knn_query(&self, q: &[f64; 3], k: usize) -> Result<Vec<Neighbor>> {
        self.geometry.knn(q, k)
    }
}

/// Fuse all views at one frame into one cloud per pyramid level.
///
/// `pyramids[v][s]` is view `v`'s level-`s` feature map `[h_s, w_s, d]`
/// (a leading batch dimension of 1 is accepted).
pub fn fuse_views<T: Real>(
    depths: &[&DepthMap],
    pyramids: &[Vec<Tensor<T>>],
    cams: &[&Camera],
) -> Result<Vec<FusedPointCloud<T>>> {
    if depths.len() != cams.len() || pyramids.len() != cams.len() || cams.is_empty() {
        return Err(Error::invalid("fuse_views needs one depth map and pyramid per camera"));
    }
    let levels = pyramids[0].len();
    let mut out = Vec::with_capacity(levels);
    for s in 0..levels {
        let mut flat = Vec::new();
        let mut views = Vec::with_capacity(cams.len());
        let (mut gh, mut gw, mut d) = (0, 0, 0);
        let mut base = 0;
        for v in 0..cams.len() {
            let t = &pyramids[v][s];
            let sh = t.shape();
            let (h, w, c) = match sh.len() {
                3 => (sh[0], sh[1], sh[2]),
                4 if sh[0] == 1 => (sh[1], sh[2], sh[3]),
                _ => return Err(Error::invalid(format!("feature map must be [h, w, d], got {sh:?}"))),
            };
            if v > 0 && (h, w, c) != (gh, gw, d) {
                return Err(Error::invalid("all views need equal feature map sizes"));
            }
            (gh, gw, d) = (h, w, c);
            flat.extend_from_slice(t.data());
            views.push(ViewInput {
                camera: cams[v],
                depth: depths[v],
                feature_base: base,
            });
            base += h * w;
        }
        let geometry = fuse_geometry(&views, gh, gw)?;
        if geometry.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let level = Tensor::new(vec![base, d], flat)?;
        out.push(FusedPointCloud::from_geometry(geometry, &level)?);
    }
    Ok(out)
}

/// Nearest level-1 cloud point to a query and its feature.
pub fn init_track_feature<T: Real>(cloud: &FusedPointCloud<T>, q: &[f64; 3]) -> Result<(Neighbor, Vec<T>)> {
    let n = cloud.knn_query(q, 1)?[0];
    Ok((n, cloud.feature(n.index).to_vec()))
}

/// Feature-grid stride of pyramid level `s` (0-based).
pub fn level_stride(s: usize) -> usize {
    STRIDE << s
}
