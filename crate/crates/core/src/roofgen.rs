//! Synthetic roof generation, labeled `.xyzl` files and dataset manifests.
//!
//! A roof is a height field over a rectangular (or union-of-rectangles)
//! footprint whose pieces are planar facets. Points are drawn uniformly by
//! surface area, perturbed along the facet normal and normalized to zero
//! centroid and unit maximum radius.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geom::{edge_labels_from_table, EdgeLabels, NeighborTable, Point3, PointCloud};

/// Neighbor count used for edge labels unless configured otherwise.
pub const DEFAULT_EDGE_K: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoofFamily {
    Flat,
    Shed,
    Gable,
    Hip,
    Pyramid,
    CrossHipped,
    LGable,
}

impl RoofFamily {
    pub const ALL: [RoofFamily; 7] = [
        RoofFamily::Flat,
        RoofFamily::Shed,
        RoofFamily::Gable,
        RoofFamily::Hip,
        RoofFamily::Pyramid,
        RoofFamily::CrossHipped,
        RoofFamily::LGable,
    ];

    /// Nominal number of planar facets.
    pub fn plane_count(self) -> usize {
        match self {
            RoofFamily::Flat | RoofFamily::Shed => 1,
            RoofFamily::Gable => 2,
            RoofFamily::Hip | RoofFamily::Pyramid | RoofFamily::LGable => 4,
            RoofFamily::CrossHipped => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RoofFamily::Flat => "flat",
            RoofFamily::Shed => "shed",
            RoofFamily::Gable => "gable",
            RoofFamily::Hip => "hip",
            RoofFamily::Pyramid => "pyramid",
            RoofFamily::CrossHipped => "cross-hipped",
            RoofFamily::LGable => "l-gable",
        }
    }
}

impl fmt::Display for RoofFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoofFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        RoofFamily::ALL
            .into_iter()
            .find(|f| f.name() == key)
            .ok_or_else(|| Error::invalid(format!("unknown roof family '{s}'")))
    }
}

/// Parameters of one synthetic roof.
#[derive(Debug, Clone, PartialEq)]
pub struct RoofSpec {
    pub family: RoofFamily,
    /// Footprint extent along x (main wing length).
    pub length: f64,
    /// Footprint extent along y (main wing width).
    pub width: f64,
    /// Length of the secondary wing for cross-hipped and L-gable roofs.
    pub wing_length: f64,
    /// Pitch of the long facets, radians.
    pub pitch: f64,
    /// Pitch of hip-end facets, radians.
    pub end_pitch: f64,
    pub points: usize,
    /// Noise along facet normals, in normalized units.
    pub sigma: f64,
    pub seed: u64,
    pub edge_k: usize,
}

impl RoofSpec {
    pub fn new(family: RoofFamily, points: usize, sigma: f64, seed: u64) -> Self {
        Self {
            family,
            length: 14.0,
            width: 8.0,
            wing_length: 6.0,
            pitch: 35f64.to_radians(),
            end_pitch: 35f64.to_radians(),
            points,
            sigma,
            seed,
            edge_k: DEFAULT_EDGE_K,
        }
    }

    /// Randomized footprint and pitches drawn from `seed`.
    pub fn random(family: RoofFamily, points: usize, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_700f);
        let width = rng.random_range(6.0..10.0);
        let length = width * rng.random_range(1.3..2.2);
        let pitch = rng.random_range(20f64..45.0).to_radians();
        let end_pitch = rng.random_range(25f64..50.0).to_radians();
        let wing_length = width * rng.random_range(0.6..1.2);
        Self {
            family,
            length,
            width,
            wing_length,
            pitch,
            end_pitch,
            points,
            sigma,
            seed,
            edge_k: DEFAULT_EDGE_K,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let half_pi = std::f64::consts::FRAC_PI_2;
        for (name, p) in [("pitch", self.pitch), ("end_pitch", self.end_pitch)] {
            if !(p > 0.0 && p < half_pi) {
                return Err(Error::invalid(format!("{name} must lie in (0, pi/2), got {p}")));
            }
        }
        for (name, v) in [
            ("length", self.length),
            ("width", self.width),
            ("wing_length", self.wing_length),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma must be nonnegative"));
        }
        if self.points < 3 * self.family.plane_count() {
            return Err(Error::invalid(format!(
                "{} points cannot cover {} planes with 3 points each",
                self.points,
                self.family.plane_count()
            )));
        }
        if self.edge_k == 0 {
            return Err(Error::invalid("edge_k must be positive"));
        }
        Ok(())
    }
}

/// A labeled roof point cloud with derived edge labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RoofSample {
    pub cloud: PointCloud,
    pub edge: EdgeLabels,
    pub family: Option<RoofFamily>,
    pub sigma: f64,
    pub plane_count: usize,
}

impl RoofSample {
    /// Builds a sample from labeled points, remapping labels to `0..G` in
    /// ascending order and deriving edge labels with `edge_k` neighbors.
    pub fn from_labeled(
        coords: Vec<Point3>,
        labels: Vec<usize>,
        family: Option<RoofFamily>,
        sigma: f64,
        edge_k: usize,
    ) -> Result<Self> {
        let (labels, plane_count) = compact_labels(&labels);
        let cloud = PointCloud::new(coords, Some(labels))?;
        let edge = edge_labels_for(&cloud, edge_k)?;
        Ok(Self {
            cloud,
            edge,
            family,
            sigma,
            plane_count,
        })
    }

    pub fn labels(&self) -> &[usize] {
        self.cloud.labels().expect("samples are labeled")
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

/// Edge labels with `k` clipped to `N - 1`; a single point has no edges.
pub fn edge_labels_for(cloud: &PointCloud, k: usize) -> Result<EdgeLabels> {
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::invalid("edge labeling requires instance labels"))?;
    if cloud.len() < 2 {
        return Ok(EdgeLabels {
            flags: vec![false; cloud.len()],
        });
    }
    let table = NeighborTable::build(cloud.coords(), k.min(cloud.len() - 1))?;
    Ok(edge_labels_from_table(labels, &table))
}

/// Maps arbitrary labels onto `0..G` preserving their order.
pub fn compact_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let out = labels
        .iter()
        .map(|l| distinct.binary_search(l).expect("present"))
        .collect();
    (out, distinct.len())
}

struct Facet {
    id: usize,
    z: f64,
    normal: Point3,
}

fn unit(v: Point3) -> Point3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// A hip roof over an axis-aligned rectangle centred at `(cx, cy)` with
/// half extents `hx`, `hy`. Facets: 0 = -y side, 1 = +y side, 2 = -x end,
/// 3 = +x end. A zero `tan_x` end slope makes the x ends gables.
fn hip_surface(
    x: f64,
    y: f64,
    (cx, cy, hx, hy): (f64, f64, f64, f64),
    tan_y: f64,
    tan_x: Option<f64>,
) -> Option<Facet> {
    let (dx, dy) = (x - cx, y - cy);
    if dx.abs() > hx || dy.abs() > hy {
        return None;
    }
    let side = tan_y * (hy - dy.abs());
    let end = tan_x.map(|t| t * (hx - dx.abs()));
    match end {
        Some(e) if e < side => {
            let t = tan_x.unwrap();
            let (id, normal) = if dx < 0.0 {
                (2, unit([-t, 0.0, 1.0]))
            } else {
                (3, unit([t, 0.0, 1.0]))
            };
            Some(Facet { id, z: e, normal })
        }
        _ => {
            let (id, normal) = if dy < 0.0 {
                (0, unit([0.0, -tan_y, 1.0]))
            } else {
                (1, unit([0.0, tan_y, 1.0]))
            };
            Some(Facet { id, z: side, normal })
        }
    }
}

/// Gable along y over `(cx, cy, hx, hy)`: facets 0 = -x side, 1 = +x side.
fn gable_y_surface(x: f64, y: f64, (cx, cy, hx, hy): (f64, f64, f64, f64), tan: f64) -> Option<Facet> {
    let (dx, dy) = (x - cx, y - cy);
    if dx.abs() > hx || dy.abs() > hy {
        return None;
    }
    let z = tan * (hx - dx.abs());
    let (id, normal) = if dx < 0.0 {
        (0, unit([-tan, 0.0, 1.0]))
    } else {
        (1, unit([tan, 0.0, 1.0]))
    };
    Some(Facet { id, z, normal })
}

fn upper(a: Option<Facet>, b: Option<Facet>, b_offset: usize) -> Option<Facet> {
    let b = b.map(|f| Facet {
        id: f.id + b_offset,
        ..f
    });
    match (a, b) {
        (Some(a), Some(b)) => Some(if b.z > a.z { b } else { a }),
        (a, b) => a.or(b),
    }
}

struct Footprint {
    min: [f64; 2],
    max: [f64; 2],
}

fn layout(spec: &RoofSpec) -> Footprint {
    let (hl, hw) = (spec.length / 2.0, spec.width / 2.0);
    match spec.family {
        RoofFamily::Pyramid => Footprint {
            min: [-hw, -hw],
            max: [hw, hw],
        },
        RoofFamily::CrossHipped => {
            let hwing = spec.wing_length.max(spec.width) / 2.0 + hw;
            Footprint {
                min: [-hl, -hwing],
                max: [hl, hwing],
            }
        }
        RoofFamily::LGable => Footprint {
            min: [-hl, -hw - spec.wing_length],
            max: [hl, hw],
        },
        _ => Footprint {
            min: [-hl, -hw],
            max: [hl, hw],
        },
    }
}

fn surface(spec: &RoofSpec, x: f64, y: f64) -> Option<Facet> {
    let (hl, hw) = (spec.length / 2.0, spec.width / 2.0);
    let tp = spec.pitch.tan();
    let te = spec.end_pitch.tan();
    match spec.family {
        RoofFamily::Flat => {
            if x.abs() <= hl && y.abs() <= hw {
                Some(Facet {
                    id: 0,
                    z: 0.0,
                    normal: [0.0, 0.0, 1.0],
                })
            } else {
                None
            }
        }
        RoofFamily::Shed => {
            if x.abs() <= hl && y.abs() <= hw {
                Some(Facet {
                    id: 0,
                    z: tp * (y + hw),
                    normal: unit([0.0, -tp, 1.0]),
                })
            } else {
                None
            }
        }
        RoofFamily::Gable => hip_surface(x, y, (0.0, 0.0, hl, hw), tp, None),
        RoofFamily::Hip => hip_surface(x, y, (0.0, 0.0, hl, hw), tp, Some(te)),
        RoofFamily::Pyramid => hip_surface(x, y, (0.0, 0.0, hw, hw), tp, Some(tp)),
        RoofFamily::CrossHipped => {
            // main wing along x, cross wing along y through the centre
            let cross_half_len = spec.wing_length.max(spec.width) / 2.0 + hw;
            let cross_half_w = hw * 0.8;
            let a = hip_surface(x, y, (0.0, 0.0, hl, hw), tp, Some(te));
            // swap axes for the cross wing
            let b = hip_surface(y, x, (0.0, 0.0, cross_half_len, cross_half_w), tp, Some(te)).map(
                |f| Facet {
                    id: f.id,
                    z: f.z,
                    normal: [f.normal[1], f.normal[0], f.normal[2]],
                },
            );
            upper(a, b, 4)
        }
        RoofFamily::LGable => {
            let a = hip_surface(x, y, (0.0, 0.0, hl, hw), tp, None);
            // wing along y sharing the +x end of the main wing
            let wing_cy = -spec.wing_length / 2.0;
            let wing_hy = hw + spec.wing_length / 2.0;
            let b = gable_y_surface(x, y, (hl - hw, wing_cy, hw, wing_hy), tp);
            upper(a, b, 2)
        }
    }
}

/// Samples a roof according to `spec`. Deterministic for a fixed seed.
pub fn generate_roof(spec: &RoofSpec) -> Result<RoofSample> {
    spec.validate()?;
    // Retry with derived seeds until every visible facet has >= 3 points.
    for attempt in 0..64u64 {
        let seed = spec.seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        if let Some(sample) = try_generate(spec, seed)? {
            return Ok(sample);
        }
    }
    Err(Error::invalid(format!(
        "could not place 3 points on every facet of a {} roof with {} points",
        spec.family, spec.points
    )))
}

fn try_generate(spec: &RoofSpec, seed: u64) -> Result<Option<RoofSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fp = layout(spec);
    // Area element of a facet is dx*dy / n_z; accept with probability
    // proportional to 1 / n_z so that sampling is uniform by area.
    let min_nz = spec.pitch.cos().min(spec.end_pitch.cos());
    let mut clean = Vec::with_capacity(spec.points);
    let mut normals = Vec::with_capacity(spec.points);
    let mut facet_ids = Vec::with_capacity(spec.points);
    while clean.len() < spec.points {
        let x = rng.random_range(fp.min[0]..=fp.max[0]);
        let y = rng.random_range(fp.min[1]..=fp.max[1]);
        let Some(f) = surface(spec, x, y) else { continue };
        let accept = min_nz / f.normal[2];
        if accept < 1.0 && rng.random::<f64>() >= accept {
            continue;
        }
        clean.push([x, y, f.z]);
        normals.push(f.normal);
        facet_ids.push(f.id);
    }
    let max_id = facet_ids.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max_id + 1];
    for &id in &facet_ids {
        counts[id] += 1;
    }
    if counts.iter().any(|&c| c > 0 && c < 3) {
        return Ok(None);
    }

    let scale = {
        let c = centroid(&clean);
        clean
            .iter()
            .map(|p| norm3(sub3(*p, c)))
            .fold(0.0, f64::max)
    };
    let mut pts = clean;
    if spec.sigma > 0.0 {
        let noise = Normal::new(0.0, spec.sigma * scale).expect("valid sigma");
        for (p, n) in pts.iter_mut().zip(&normals) {
            let t = noise.sample(&mut rng);
            for c in 0..3 {
                p[c] += t * n[c];
            }
        }
    }
    normalize_unit_sphere(&mut pts);
    let sample = RoofSample::from_labeled(pts, facet_ids, Some(spec.family), spec.sigma, spec.edge_k)?;
    Ok(Some(sample))
}

fn centroid(pts: &[Point3]) -> Point3 {
    let mut c = [0.0; 3];
    for p in pts {
        for i in 0..3 {
            c[i] += p[i];
        }
    }
    let n = pts.len() as f64;
    [c[0] / n, c[1] / n, c[2] / n]
}

fn sub3(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Translates to zero centroid and scales so the farthest point has norm 1.
pub fn normalize_unit_sphere(pts: &mut [Point3]) {
    if pts.is_empty() {
        return;
    }
    let c = centroid(pts);
    for p in pts.iter_mut() {
        *p = sub3(*p, c);
    }
    let r = pts.iter().map(|p| norm3(*p)).fold(0.0, f64::max);
    if r > 0.0 {
        for p in pts.iter_mut() {
            for v in p.iter_mut() {
                *v /= r;
            }
        }
    }
}

/// Resamples to exactly `n` points: without replacement when the sample is
/// large enough, with replacement otherwise. Edge labels are recomputed.
pub fn resample<R: Rng + ?Sized>(sample: &RoofSample, n: usize, edge_k: usize, rng: &mut R) -> Result<RoofSample> {
    if n == 0 {
        return Err(Error::invalid("resample size must be positive"));
    }
    let total = sample.len();
    let idx: Vec<usize> = if total >= n {
        sample_indices(rng, total, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..total)).collect()
    };
    let sub = sample.cloud.select(&idx);
    let labels = sub.labels().expect("labeled").to_vec();
    RoofSample::from_labeled(sub.coords().to_vec(), labels, sample.family, sample.sigma, edge_k)
}

/// Writes `x y z label` rows with 9 significant digits after optional
/// `#` header lines.
pub fn write_xyzl(path: &Path, coords: &[Point3], labels: &[usize], header: &[String]) -> Result<()> {
    if coords.len() != labels.len() {
        return Err(Error::invalid("coordinate and label counts differ"));
    }
    let mut out = String::with_capacity(coords.len() * 64);
    for h in header {
        out.push_str("# ");
        out.push_str(h);
        out.push('\n');
    }
    for (p, l) in coords.iter().zip(labels) {
        out.push_str(&format!("{:.8e} {:.8e} {:.8e} {}\n", p[0], p[1], p[2], l));
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Rows of an `.xyzl` file plus any `key value` header comments.
pub struct XyzlContents {
    pub coords: Vec<Point3>,
    pub labels: Vec<usize>,
    pub header: Vec<(String, String)>,
}

pub fn read_xyzl(path: &Path) -> Result<XyzlContents> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyzl(&text, path)
}

pub fn parse_xyzl(text: &str, path: &Path) -> Result<XyzlContents> {
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    let mut header = Vec::new();
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let mut parts = comment.trim().splitn(2, char::is_whitespace);
            if let (Some(k), Some(v)) = (parts.next(), parts.next()) {
                header.push((k.to_string(), v.trim().to_string()));
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(
                line_no,
                format!("expected 4 fields 'x y z label', found {}", fields.len()),
            ));
        }
        let mut p = [0.0; 3];
        for c in 0..3 {
            p[c] = fields[c]
                .parse::<f64>()
                .map_err(|e| err(line_no, format!("bad coordinate '{}': {e}", fields[c])))?;
            if !p[c].is_finite() {
                return Err(err(line_no, "non-finite coordinate".into()));
            }
        }
        let l = fields[3]
            .parse::<usize>()
            .map_err(|e| err(line_no, format!("bad label '{}': {e}", fields[3])))?;
        coords.push(p);
        labels.push(l);
    }
    if coords.is_empty() {
        return Err(Error::invalid(format!("{} contains no points", path.display())));
    }
    Ok(XyzlContents {
        coords,
        labels,
        header,
    })
}

pub fn save_labeled_xyz(sample: &RoofSample, path: &Path) -> Result<()> {
    let mut header = vec!["format xyzl-1".to_string()];
    if let Some(f) = sample.family {
        header.push(format!("family {f}"));
    }
    header.push(format!("sigma {}", sample.sigma));
    header.push(format!("planes {}", sample.plane_count));
    write_xyzl(path, sample.cloud.coords(), sample.labels(), &header)
}

pub fn load_labeled_xyz(path: &Path) -> Result<RoofSample> {
    load_labeled_xyz_with_k(path, DEFAULT_EDGE_K)
}

pub fn load_labeled_xyz_with_k(path: &Path, edge_k: usize) -> Result<RoofSample> {
    let contents = read_xyzl(path)?;
    let lookup = |key: &str| {
        contents
            .header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
    };
    let family = lookup("family").and_then(|v| v.parse().ok());
    let sigma = lookup("sigma").and_then(|v| v.parse().ok()).unwrap_or(0.0);
    RoofSample::from_labeled(contents.coords, contents.labels, family, sigma, edge_k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// How to synthesize a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecipe {
    pub train: usize,
    pub test: usize,
    pub families: Vec<RoofFamily>,
    pub sigma: f64,
    pub points: usize,
    pub seed: u64,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        Self {
            train: 300,
            test: 30,
            families: vec![
                RoofFamily::Gable,
                RoofFamily::Hip,
                RoofFamily::Pyramid,
                RoofFamily::LGable,
            ],
            sigma: 0.005,
            points: 2048,
            seed: 0,
        }
    }
}

/// SplitMix64 step, used to derive independent per-item seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const MANIFEST_NAME: &str = "index.txt";

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub split: Split,
}

/// Generates `recipe` into `dir` as `.xyzl` files plus `index.txt`.
pub fn write_dataset(dir: &Path, recipe: &DatasetRecipe) -> Result<Vec<ManifestEntry>> {
    if recipe.families.is_empty() {
        return Err(Error::invalid("dataset recipe needs at least one roof family"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let total = recipe.train + recipe.test;
    let mut entries = Vec::with_capacity(total);
    for i in 0..total {
        let seed = derive_seed(recipe.seed, i as u64);
        let family = recipe.families[(seed % recipe.families.len() as u64) as usize];
        let spec = RoofSpec::random(family, recipe.points, recipe.sigma, seed);
        let sample = generate_roof(&spec)?;
        let file = format!("roof_{i:05}.xyzl");
        save_labeled_xyz(&sample, &dir.join(&file))?;
        let split = if i < recipe.train { Split::Train } else { Split::Test };
        entries.push(ManifestEntry { file, split });
    }
    let index: String = entries
        .iter()
        .map(|e| format!("{} {}\n", e.file, e.split))
        .collect();
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: "expected '<file> <split>'".into(),
            });
        }
        let split = fields[1].parse().map_err(|_| Error::Parse {
            path: path.clone(),
            line: i + 1,
            message: format!("unknown split '{}'", fields[1]),
        })?;
        out.push(ManifestEntry {
            file: fields[0].to_string(),
            split,
        });
    }
    Ok(out)
}

/// Loads every sample of `split` listed in the manifest.
pub fn load_split(dir: &Path, split: Split, edge_k: usize) -> Result<Vec<(PathBuf, RoofSample)>> {
    read_manifest(dir)?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let p = dir.join(&e.file);
            load_labeled_xyz_with_k(&p, edge_k).map(|s| (p, s))
        })
        .collect()
}
