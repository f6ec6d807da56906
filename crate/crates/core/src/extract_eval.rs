//! Iso-surface extraction, voxel IoU, silhouette re-rendering agreement and
//! OBJ export.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::field::{AnalyticShape, OccupancyField};
use crate::geom::{Camera, Vec3, WORLD_HALF};
use crate::imaging::{render_with, SilhouetteImage};
use crate::par;

pub const ISO: f64 = 0.5;
/// Triangles at or below this area are dropped during cleanup.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(c - a).norm()
    }

    pub fn face_normal(&self, t: &[u32; 3]) -> Option<Vec3> {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        let n = (b - a).cross(c - a);
        let len = n.norm();
        (len > 0.0).then(|| n / len)
    }

    fn edge_faces(&self) -> HashMap<(u32, u32), Vec<usize>> {
        let mut map: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
        for (f, t) in self.triangles.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                map.entry((a.min(b), a.max(b))).or_default().push(f);
            }
        }
        map
    }

    pub fn n_edges(&self) -> usize {
        self.edge_faces().len()
    }

    /// `V - E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.n_edges() as i64 + self.triangles.len() as i64
    }

    /// True when every edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        self.edge_faces().values().all(|f| f.len() == 2)
    }

    /// Mean angle in radians between the normals of triangles sharing an
    /// edge; `None` when no edge is shared by exactly two triangles.
    pub fn mean_adjacent_normal_angle(&self) -> Option<f64> {
        let normals: Vec<Option<Vec3>> = self.triangles.iter().map(|t| self.face_normal(t)).collect();
        let mut edges: Vec<((u32, u32), Vec<usize>)> = self.edge_faces().into_iter().collect();
        edges.sort_unstable_by_key(|(k, _)| *k);
        let (mut sum, mut count) = (0.0, 0usize);
        for (_, faces) in edges {
            if let [a, b] = faces[..] {
                if let (Some(na), Some(nb)) = (normals[a], normals[b]) {
                    sum += na.dot(nb).clamp(-1.0, 1.0).acos();
                    count += 1;
                }
            }
        }
        (count > 0).then(|| sum / count as f64)
    }

    /// Merge coincident vertices, drop collapsed or tiny triangles and
    /// unreferenced vertices.
    pub fn cleanup(&mut self) {
        let mut remap = Vec::with_capacity(self.vertices.len());
        let mut seen: HashMap<[u64; 3], u32> = HashMap::new();
        let mut merged = Vec::new();
        for v in &self.vertices {
            let key = v.to_array().map(f64::to_bits);
            let id = *seen.entry(key).or_insert_with(|| {
                merged.push(*v);
                (merged.len() - 1) as u32
            });
            remap.push(id);
        }
        self.vertices = merged;
        let tris: Vec<[u32; 3]> = self
            .triangles
            .iter()
            .map(|t| t.map(|i| remap[i as usize]))
            .filter(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2])
            .collect();
        self.triangles = tris;
        self.triangles.retain(|t| {
            let [a, b, c] = t.map(|i| self.vertices[i as usize]);
            0.5 * (b - a).cross(c - a).norm() > MIN_TRIANGLE_AREA
        });
        let mut used = vec![u32::MAX; self.vertices.len()];
        let mut kept = Vec::new();
        for t in &mut self.triangles {
            for i in t.iter_mut() {
                if used[*i as usize] == u32::MAX {
                    used[*i as usize] = kept.len() as u32;
                    kept.push(self.vertices[*i as usize]);
                }
                *i = used[*i as usize];
            }
        }
        self.vertices = kept;
    }
}

/// Corner `c` of a unit cell sits at `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The twelve cell edges as `(low corner, axis)`, low corner having a 0 bit
/// along `axis`.
fn cell_edges() -> &'static [(usize, usize); 12] {
    static EDGES: OnceLock<[(usize, usize); 12]> = OnceLock::new();
    EDGES.get_or_init(|| {
        let mut out = [(0, 0); 12];
        let mut k = 0;
        for axis in 0..3 {
            for c in 0..8 {
                if c & (1 << axis) == 0 {
                    out[k] = (c, axis);
                    k += 1;
                }
            }
        }
        out
    })
}

fn edge_between(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    let axis = (hi ^ lo).trailing_zeros() as usize;
    cell_edges()
        .iter()
        .position(|&e| e == (lo, axis))
        .expect("corners share an edge")
}

/// Cell faces as corner cycles, counter-clockwise seen from outside.
fn cell_faces() -> [[usize; 4]; 6] {
    let mut faces = [[0; 4]; 6];
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let base = side << axis;
            let cyc = [base, base | 1 << u, base | 1 << u | 1 << v, base | 1 << v];
            // (u, v, axis) is right-handed, so this cycle faces +axis.
            faces[axis * 2 + side] = if side == 1 {
                cyc
            } else {
                [cyc[0], cyc[3], cyc[2], cyc[1]]
            };
        }
    }
    faces
}

/// Outward-facing triangles of one corner sign pattern. Indices below 12 are
/// cell edges; index `12 + i` is the centroid of the crossings in
/// `centroids[i]`.
struct CellCase {
    tris: Vec<[u8; 3]>,
    centroids: Vec<Vec<u8>>,
}

/// Triangles for every corner sign
/// pattern. Iso-contours are traced on each face, pairing each crossing where
/// the boundary walk leaves the inside with the crossing that entered it, so
/// ambiguous faces keep their inside corners apart. Face segments chain into
/// loops around the cell which are fan-triangulated.
fn case_table() -> &'static Vec<CellCase> {
    static TABLE: OnceLock<Vec<CellCase>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let faces = cell_faces();
        (0..256usize)
            .map(|case| {
                let inside = |c: usize| case & (1 << c) != 0;
                let mut next = [usize::MAX; 12];
                for face in &faces {
                    // Crossings alternate between entering and leaving the
                    // inside along the walk.
                    let crossings: Vec<(usize, bool)> = (0..4)
                        .filter_map(|k| {
                            let (a, b) = (face[k], face[(k + 1) % 4]);
                            (inside(a) != inside(b)).then(|| (edge_between(a, b), inside(a)))
                        })
                        .collect();
                    let m = crossings.len();
                    for (p, &(e, leaving)) in crossings.iter().enumerate() {
                        if leaving {
                            next[e] = crossings[(p + m - 1) % m].0;
                        }
                    }
                }
                let mut used = [false; 12];
                let mut tris = Vec::new();
                let mut centroids = Vec::new();
                for start in 0..12 {
                    if next[start] == usize::MAX || used[start] {
                        continue;
                    }
                    let mut cycle = vec![start];
                    used[start] = true;
                    let mut e = next[start];
                    while e != start {
                        used[e] = true;
                        cycle.push(e);
                        e = next[e];
                    }
                    // Walking exit -> entry orbits the inside region; reverse
                    // it so triangles face away from the solid.
                    cycle.reverse();
                    triangulate_loop(&cycle, &mut tris, &mut centroids);
                }
                CellCase { tris, centroids }
            })
            .collect()
    })
}

/// Faces (as a bit mask over the six cell faces) containing cell edge `e`.
fn edge_face_mask(e: usize) -> u8 {
    let (c, axis) = cell_edges()[e];
    (0..3)
        .filter(|&a| a != axis)
        .fold(0, |m, a| m | 1 << (a * 2 + (c >> a & 1)))
}

/// Fan-triangulate a crossing loop from the first vertex whose diagonals all
/// leave the cell faces; a diagonal lying in a face could be reused by the
/// neighboring cell. Falls back to a fan around the loop centroid.
fn triangulate_loop(cycle: &[usize], tris: &mut Vec<[u8; 3]>, centroids: &mut Vec<Vec<u8>>) {
    let k = cycle.len();
    let in_face = |a: usize, b: usize| edge_face_mask(cycle[a]) & edge_face_mask(cycle[b]) != 0;
    let center = (0..k).find(|&s| (2..k - 1).all(|j| !in_face(s, (s + j) % k)));
    match center {
        Some(s) => {
            for j in 1..k - 1 {
                tris.push([cycle[s] as u8, cycle[(s + j) % k] as u8, cycle[(s + j + 1) % k] as u8]);
            }
        }
        None => {
            let c = (12 + centroids.len()) as u8;
            centroids.push(cycle.iter().map(|&e| e as u8).collect());
            for j in 0..k {
                tris.push([c, cycle[j] as u8, cycle[(j + 1) % k] as u8]);
            }
        }
    }
}

/// Lattice coordinate of index `i` on an `n`-point axis over the world box.
fn lattice_coord(i: usize, n: usize) -> f64 {
    -WORLD_HALF + 2.0 * WORLD_HALF * i as f64 / (n - 1) as f64
}

/// Field values on the `n^3` lattice, x fastest.
pub fn sample_lattice<F: OccupancyField + ?Sized>(field: &F, n: usize) -> Vec<f64> {
    let points: Vec<Vec3> = (0..n * n * n)
        .map(|idx| {
            Vec3::new(
                lattice_coord(idx % n, n),
                lattice_coord(idx / n % n, n),
                lattice_coord(idx / (n * n), n),
            )
        })
        .collect();
    field.eval_batch(&points)
}

/// Marching cubes over the `n^3` lattice spanning the world box. A lattice
/// point is inside when its value is at least `iso`.
pub fn marching_cubes<F: OccupancyField + ?Sized>(field: &F, n: usize, iso: f64) -> Result<TriMesh> {
    if n < 2 {
        return Err(Error::Invalid(format!("marching cubes needs n >= 2, got {n}")));
    }
    let values = sample_lattice(field, n);
    Ok(marching_cubes_lattice(&values, n, iso))
}

pub fn marching_cubes_lattice(values: &[f64], n: usize, iso: f64) -> TriMesh {
    let table = case_table();
    let edges = cell_edges();
    let at = |i: usize, j: usize, k: usize| values[(k * n + j) * n + i];
    let mut vertex_of: HashMap<(usize, usize), u32> = HashMap::new();
    let mut mesh = TriMesh::default();
    let cells = n - 1;
    for k in 0..cells {
        for j in 0..cells {
            for i in 0..cells {
                let mut case = 0usize;
                let mut corner_vals = [0.0; 8];
                for (c, val) in corner_vals.iter_mut().enumerate() {
                    let o = corner_offset(c);
                    *val = at(i + o[0], j + o[1], k + o[2]);
                    if *val >= iso {
                        case |= 1 << c;
                    }
                }
                let cell = &table[case];
                if cell.tris.is_empty() {
                    continue;
                }
                let mut local = [u32::MAX; 12];
                for e in cell.tris.iter().flatten().map(|&e| e as usize).filter(|&e| e < 12) {
                    if local[e] != u32::MAX {
                        continue;
                    }
                    let (c0, axis) = edges[e];
                    let c1 = c0 | 1 << axis;
                    let o = corner_offset(c0);
                    let (gi, gj, gk) = (i + o[0], j + o[1], k + o[2]);
                    let key = ((gk * n + gj) * n + gi, axis);
                    local[e] = *vertex_of.entry(key).or_insert_with(|| {
                        let (v0, v1) = (corner_vals[c0], corner_vals[c1]);
                        let t = ((iso - v0) / (v1 - v0)).clamp(0.0, 1.0);
                        let mut p = [lattice_coord(gi, n), lattice_coord(gj, n), lattice_coord(gk, n)];
                        let next = [gi, gj, gk][axis] + 1;
                        p[axis] += t * (lattice_coord(next, n) - p[axis]);
                        mesh.vertices.push(Vec3::from(p));
                        (mesh.vertices.len() - 1) as u32
                    });
                }
                let first_centroid = mesh.vertices.len() as u32;
                for ring in &cell.centroids {
                    let sum = ring
                        .iter()
                        .fold(Vec3::ZERO, |acc, &e| acc + mesh.vertices[local[e as usize] as usize]);
                    mesh.vertices.push(sum / ring.len() as f64);
                }
                for t in &cell.tris {
                    mesh.triangles.push(t.map(|e| {
                        if e < 12 {
                            local[e as usize]
                        } else {
                            first_centroid + (e as u32 - 12)
                        }
                    }));
                }
            }
        }
    }
    mesh.cleanup();
    mesh
}

/// Voxel-center lattice coordinate for voxel `i` of `n`.
fn voxel_center(i: usize, n: usize) -> f64 {
    -WORLD_HALF + (i as f64 + 0.5) / n as f64
}

fn voxel_centers(n: usize) -> Vec<Vec3> {
    (0..n * n * n)
        .map(|idx| {
            Vec3::new(
                voxel_center(idx % n, n),
                voxel_center(idx / n % n, n),
                voxel_center(idx / (n * n), n),
            )
        })
        .collect()
}

/// IoU of two occupancy sets given as flags; 1 when both are empty.
pub fn iou_of(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU between `{field >= 0.5}` and the shape, both sampled at the centers
/// of an `n^3` voxel grid.
pub fn voxel_iou<F: OccupancyField + ?Sized>(field: &F, gt: &AnalyticShape, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Invalid(format!("IoU resolution must be >= 2, got {n}")));
    }
    let centers = voxel_centers(n);
    let pred: Vec<bool> = field.eval_batch(&centers).iter().map(|v| *v >= ISO).collect();
    let truth: Vec<bool> = par::map(&centers, |p| gt.contains(*p));
    Ok(iou_of(&pred, &truth))
}

/// Binary silhouette of `{field >= 0.5}` by per-pixel ray marching.
pub fn render_field<F: OccupancyField + ?Sized>(field: &F, cam: &Camera) -> SilhouetteImage {
    render_with(cam, |p| field.eval(p) >= ISO)
}

/// Fraction of pixels whose re-rendered label matches the binarized ground
/// truth, averaged over views.
pub fn silhouette_agreement<F: OccupancyField + ?Sized>(
    field: &F,
    sils: &[SilhouetteImage],
    cams: &[Camera],
) -> Result<f64> {
    if sils.is_empty() || sils.len() != cams.len() {
        return Err(Error::Invalid(format!(
            "{} silhouettes for {} cameras",
            sils.len(),
            cams.len()
        )));
    }
    let mut total = 0.0;
    for (sil, cam) in sils.iter().zip(cams) {
        let rendered = render_field(field, cam);
        let agree = rendered
            .values
            .iter()
            .zip(&sil.values)
            .filter(|(r, g)| (**r >= 0.5) == (**g >= 0.5))
            .count();
        total += agree as f64 / sil.values.len() as f64;
    }
    Ok(total / sils.len() as f64)
}

/// Trilinear interpolation of a field sampled on an `n^3` lattice; a cheap
/// stand-in for expensive fields during ray marching.
#[derive(Debug, Clone)]
pub struct SampledField {
    n: usize,
    values: Vec<f64>,
}

impl SampledField {
    pub fn new<F: OccupancyField + ?Sized>(field: &F, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Invalid(format!("sampling resolution must be >= 2, got {n}")));
        }
        Ok(SampledField {
            n,
            values: sample_lattice(field, n),
        })
    }

    pub fn resolution(&self) -> usize {
        self.n
    }
}

impl OccupancyField for SampledField {
    fn eval(&self, p: Vec3) -> f64 {
        let n = self.n;
        let cell = |x: f64| {
            let g = ((x + WORLD_HALF) * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
            let i = (g.floor() as usize).min(n - 2);
            (i, g - i as f64)
        };
        let (i, fx) = cell(p.x);
        let (j, fy) = cell(p.y);
        let (k, fz) = cell(p.z);
        let at = |a: usize, b: usize, c: usize| self.values[((k + c) * n + j + b) * n + i + a];
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let x00 = lerp(at(0, 0, 0), at(1, 0, 0), fx);
        let x10 = lerp(at(0, 1, 0), at(1, 1, 0), fx);
        let x01 = lerp(at(0, 0, 1), at(1, 0, 1), fx);
        let x11 = lerp(at(0, 1, 1), at(1, 1, 1), fx);
        lerp(lerp(x00, x10, fy), lerp(x01, x11, fy), fz)
    }
}

/// ASCII OBJ: a comment header, `v` lines, then 1-based `f` lines.
pub fn export_obj(mesh: &TriMesh, path: &Path) -> Result<()> {
    let mut out = String::from("# probefield iso-surface\n");
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {:.8e} {:.8e} {:.8e}", v.x, v.y, v.z);
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_obj(path: &Path) -> Result<TriMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, why: &str| Error::format("obj", path, format!("line {line}: {why}"));
    let mut mesh = TriMesh::default();
    for (no, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let c: Vec<f64> = parts
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(no + 1, "bad coordinate"))?;
                if c.len() != 3 {
                    return Err(bad(no + 1, "vertex needs 3 coordinates"));
                }
                mesh.vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = parts
                    .map(|s| s.parse::<u32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(no + 1, "bad index"))?;
                if idx.len() != 3 || idx.iter().any(|&i| i == 0 || i as usize > mesh.vertices.len()) {
                    return Err(bad(no + 1, "face needs 3 valid indices"));
                }
                mesh.triangles.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    Ok(mesh)
}
