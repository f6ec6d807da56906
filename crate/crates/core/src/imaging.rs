//! Silhouettes, visual hulls and the contour weight maps that drive
//! importance sampling.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::AnalyticShape;
use crate::geom::{look_at_frame, ray_box_interval, Camera, Frame, Vec3, WORLD_HALF};
use crate::par;

/// Step used when marching pixel rays through the world box.
pub const MARCH_STEP: f64 = 1e-3;

/// Grayscale mask, row-major, 1 = object.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl SilhouetteImage {
    pub fn new(width: usize, height: usize) -> Self {
        SilhouetteImage {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut img = SilhouetteImage::new(width, height);
        for v in 0..height {
            for u in 0..width {
                img.values[v * width + u] = f(u, v);
            }
        }
        img
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    fn get_clamped(&self, u: isize, v: isize) -> f64 {
        let u = u.clamp(0, self.width as isize - 1) as usize;
        let v = v.clamp(0, self.height as isize - 1) as usize;
        self.get(u, v)
    }

    /// Fraction of pixels with value >= 0.5.
    pub fn foreground_fraction(&self) -> f64 {
        self.values.iter().filter(|&&v| v >= 0.5).count() as f64 / self.values.len() as f64
    }

    pub fn inverted(&self) -> Self {
        SilhouetteImage {
            values: self.values.iter().map(|v| 1.0 - v).collect(),
            ..self.clone()
        }
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend(self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Read a binary PGM; bytes >= 128 map to 1, the rest to 0.
    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::format("pgm", path, why);
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(bad("expected P5 magic"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        if width == 0 || height == 0 {
            return Err(bad("empty image"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let n = width * height;
        if bytes.len() < pos + n {
            return Err(bad("truncated raster"));
        }
        let values = bytes[pos..pos + n]
            .iter()
            .map(|&b| if b >= 128 { 1.0 } else { 0.0 })
            .collect();
        Ok(SilhouetteImage { width, height, values })
    }
}

/// Render a binary silhouette by marching each pixel-center ray through the
/// world box and testing the shape at every step.
pub fn render_silhouette(shape: &AnalyticShape, cam: &Camera) -> SilhouetteImage {
    render_with(cam, |p| shape.contains(p))
}

/// Same as [`render_silhouette`] for any inside predicate.
pub fn render_with(cam: &Camera, inside: impl Fn(Vec3) -> bool + Sync) -> SilhouetteImage {
    let frame = look_at_frame(cam).expect("degenerate camera frame");
    let (w, h) = (cam.width, cam.height);
    let values = par::map_range(w * h, |idx| {
        let (u, v) = (idx % w, idx / w);
        let ray = cam.ray_with_frame(&frame, u as f64 + 0.5, v as f64 + 0.5);
        let Some((t0, t1)) = ray_box_interval(&ray, WORLD_HALF) else {
            return 0.0;
        };
        let mut t = t0;
        while t <= t1 {
            if inside(ray.at(t)) {
                return 1.0;
            }
            t += MARCH_STEP;
        }
        0.0
    });
    SilhouetteImage {
        width: w,
        height: h,
        values,
    }
}

/// Bilinear interpolation between pixel centers; coordinates outside the
/// center lattice are clamped to the border.
pub fn bilinear_sample(img: &SilhouetteImage, x: (f64, f64)) -> f64 {
    let axis = |c: f64, n: usize| -> (usize, usize, f64) {
        let c = (c - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (c.floor() as usize).min(n.saturating_sub(2));
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let (u0, u1, tu) = axis(x.0, img.width);
    let (v0, v1, tv) = axis(x.1, img.height);
    let top = img.get(u0, v0) * (1.0 - tu) + img.get(u1, v0) * tu;
    let bottom = img.get(u0, v1) * (1.0 - tu) + img.get(u1, v1) * tu;
    top * (1.0 - tv) + bottom * tv
}

/// `|4 s(u,v) - s(u+-1,v) - s(u,v+-1)|` with border replication.
pub fn contour_weights_2d(img: &SilhouetteImage) -> SilhouetteImage {
    let mut out = SilhouetteImage::new(img.width, img.height);
    for v in 0..img.height as isize {
        for u in 0..img.width as isize {
            let c = img.get_clamped(u, v);
            let lap = 4.0 * c
                - img.get_clamped(u - 1, v)
                - img.get_clamped(u + 1, v)
                - img.get_clamped(u, v - 1)
                - img.get_clamped(u, v + 1);
            out.values[v as usize * img.width + u as usize] = lap.abs();
        }
    }
    out
}

/// Scalar grid over the world box; cell `(i, j, k)` is centered at
/// `-0.5 + (i + 0.5) / n` per axis and stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub n: usize,
    pub values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(n: usize) -> Self {
        VoxelGrid {
            n,
            values: vec![0.0; n * n * n],
        }
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n * (j + self.n * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn voxel_size(&self) -> f64 {
        2.0 * WORLD_HALF / self.n as f64
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = self.voxel_size();
        Vec3::new(
            -WORLD_HALF + (i as f64 + 0.5) * s,
            -WORLD_HALF + (j as f64 + 0.5) * s,
            -WORLD_HALF + (k as f64 + 0.5) * s,
        )
    }

    pub fn center_of(&self, idx: usize) -> Vec3 {
        let n = self.n;
        self.center(idx % n, (idx / n) % n, idx / (n * n))
    }

    /// Cell containing `p`, clamped into the grid.
    pub fn cell_of(&self, p: Vec3) -> (usize, usize, usize) {
        let c = |x: f64| (((x + WORLD_HALF) / self.voxel_size()).floor().max(0.0) as usize).min(self.n - 1);
        (c(p.x), c(p.y), c(p.z))
    }

    pub fn count_at_least(&self, t: f64) -> usize {
        self.values.iter().filter(|&&v| v >= t).count()
    }

    /// Debug dump: `PFVG`, `n` as u32, then `n^3` little-endian f64.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + 8 * self.values.len());
        buf.extend_from_slice(b"PFVG");
        buf.extend_from_slice(&(self.n as u32).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_raw(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::format("voxel grid", path, why);
        if bytes.len() < 8 || &bytes[..4] != b"PFVG" {
            return Err(bad("bad magic"));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + 8 * n * n * n {
            return Err(bad("size does not match header"));
        }
        let values = bytes[8..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(VoxelGrid { n, values })
    }
}

/// Point-in-hull test shared by voxel carving and anchor labelling.
pub struct HullTester<'a> {
    views: Vec<(&'a Camera, Frame, &'a SilhouetteImage)>,
}

impl<'a> HullTester<'a> {
    pub fn new(sils: &'a [SilhouetteImage], cams: &'a [Camera]) -> Result<Self> {
        if sils.len() != cams.len() || sils.is_empty() {
            return Err(Error::Invalid(format!(
                "{} silhouettes for {} cameras",
                sils.len(),
                cams.len()
            )));
        }
        let mut views = Vec::with_capacity(cams.len());
        for (s, c) in sils.iter().zip(cams) {
            if s.width != c.width || s.height != c.height {
                return Err(Error::Invalid("silhouette size does not match its camera".into()));
            }
            views.push((c, look_at_frame(c)?, s));
        }
        Ok(HullTester { views })
    }

    /// True iff `p` projects onto the foreground (bilinear >= 0.5) of every view.
    pub fn contains(&self, p: Vec3) -> bool {
        self.views.iter().all(|(cam, frame, sil)| match cam.project(frame, p) {
            Some((x, y)) if x >= 0.0 && y >= 0.0 && x <= cam.width as f64 && y <= cam.height as f64 => {
                bilinear_sample(sil, (x, y)) >= 0.5
            }
            _ => false,
        })
    }
}

/// Binary visual hull sampled at voxel centers.
pub fn visual_hull(sils: &[SilhouetteImage], cams: &[Camera], n: usize) -> Result<VoxelGrid> {
    if n < 2 {
        return Err(Error::Invalid("hull resolution must be >= 2".into()));
    }
    let tester = HullTester::new(sils, cams)?;
    let mut grid = VoxelGrid::new(n);
    let values = par::map_range(n * n * n, |idx| tester.contains(grid.center_of(idx)) as u8 as f64);
    grid.values = values;
    Ok(grid)
}

/// `4 m (1 - m)` of the 3x3x3 box mean `m` (border replication).
pub fn contour_weights_3d(hull: &VoxelGrid) -> VoxelGrid {
    let n = hull.n as isize;
    let get = |i: isize, j: isize, k: isize| {
        hull.get(
            i.clamp(0, n - 1) as usize,
            j.clamp(0, n - 1) as usize,
            k.clamp(0, n - 1) as usize,
        )
    };
    let mut out = VoxelGrid::new(hull.n);
    let values = par::map_range(hull.values.len(), |idx| {
        let (i, j, k) = (
            (idx % hull.n) as isize,
            ((idx / hull.n) % hull.n) as isize,
            (idx / (hull.n * hull.n)) as isize,
        );
        let mut sum = 0.0;
        for dk in -1..=1 {
            for dj in -1..=1 {
                for di in -1..=1 {
                    sum += get(i + di, j + dj, k + dk);
                }
            }
        }
        let m = sum / 27.0;
        4.0 * m * (1.0 - m)
    });
    out.values = values;
    out
}
