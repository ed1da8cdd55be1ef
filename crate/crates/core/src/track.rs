//! Closed race tracks: a centerline polyline with constant half-width and
//! convex polygonal obstacles.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, KernelSet};

pub const TRACK_FORMAT_VERSION: u32 = 1;

/// On-disk track description.
///
/// ```toml
/// version = 1
/// half_width = 0.35
/// centerline = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]
///
/// [[obstacles]]
/// vertices = [[0.4, -0.1], [0.6, -0.1], [0.6, 0.1], [0.4, 0.1]]
/// ```
///
/// The centerline is implicitly closed; repeating the first vertex at the end
/// is allowed. Obstacles are convex polygons in either orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackFile {
    pub version: u32,
    pub half_width: f64,
    pub centerline: Vec<[f64; 2]>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleFile {
    pub vertices: Vec<[f64; 2]>,
}

/// Convex polygon.
#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    vertices: Vec<[f64; 2]>,
    orientation: f64,
}

impl Obstacle {
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidTrack(
                "obstacle needs at least three vertices".into(),
            ));
        }
        let n = vertices.len();
        let mut sign = 0.0;
        for i in 0..n {
            let (a, b, c) = (vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross.abs() < 1e-15 {
                continue;
            }
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return Err(Error::InvalidTrack("obstacle polygon is not convex".into()));
            }
        }
        if sign == 0.0 {
            return Err(Error::InvalidTrack("degenerate obstacle polygon".into()));
        }
        Ok(Self {
            vertices,
            orientation: sign,
        })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            cross * self.orientation >= 0.0
        })
    }

    /// Euclidean distance to the polygon, zero inside.
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        if self.contains(p) {
            return 0.0;
        }
        let n = self.vertices.len();
        (0..n)
            .map(|i| segment_distance(p, self.vertices[i], self.vertices[(i + 1) % n]).0)
            .fold(f64::INFINITY, f64::min)
    }

    fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        bounds_of(&self.vertices)
    }
}

fn bounds_of(pts: &[[f64; 2]]) -> ([f64; 2], [f64; 2]) {
    pts.iter().fold(
        ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]),
        |(lo, hi), p| {
            (
                [lo[0].min(p[0]), lo[1].min(p[1])],
                [hi[0].max(p[0]), hi[1].max(p[1])],
            )
        },
    )
}

/// Distance from `p` to segment `ab` and the clamped projection parameter.
fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
    let len2 = ex * ex + ey * ey;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (p[0] - a[0] - t * ex, p[1] - a[1] - t * ey);
    (dx.hypot(dy), t)
}

/// Uniform buckets listing the centerline pieces that can be within the
/// half-width of any point of the bucket.
#[derive(Debug, Clone, PartialEq)]
struct SegmentBins {
    lo: [f64; 2],
    size: f64,
    dims: [usize; 2],
    bins: Vec<Vec<u32>>,
}

impl SegmentBins {
    fn build(points: &[[f64; 2]], reach: f64, size: f64) -> Self {
        let (lo, hi) = bounds_of(points);
        let lo = [lo[0] - reach - size, lo[1] - reach - size];
        let dims = [
            ((hi[0] + reach + size - lo[0]) / size).ceil() as usize + 1,
            ((hi[1] + reach + size - lo[1]) / size).ceil() as usize + 1,
        ];
        let n = points.len();
        let half_diag = size * std::f64::consts::FRAC_1_SQRT_2;
        let mut bins = vec![Vec::new(); dims[0] * dims[1]];
        for i in 0..n {
            let (a, b) = (points[i], points[(i + 1) % n]);
            let (slo, shi) = bounds_of(&[a, b]);
            let ix0 = (((slo[0] - reach - lo[0]) / size).floor().max(0.0)) as usize;
            let iy0 = (((slo[1] - reach - lo[1]) / size).floor().max(0.0)) as usize;
            let ix1 = (((shi[0] + reach - lo[0]) / size).ceil() as usize).min(dims[0] - 1);
            let iy1 = (((shi[1] + reach - lo[1]) / size).ceil() as usize).min(dims[1] - 1);
            for iy in iy0..=iy1 {
                for ix in ix0..=ix1 {
                    let c = [
                        lo[0] + (ix as f64 + 0.5) * size,
                        lo[1] + (iy as f64 + 0.5) * size,
                    ];
                    if segment_distance(c, a, b).0 <= reach + half_diag {
                        bins[iy * dims[0] + ix].push(i as u32);
                    }
                }
            }
        }
        Self {
            lo,
            size,
            dims,
            bins,
        }
    }

    fn get(&self, p: [f64; 2]) -> Option<&[u32]> {
        let fx = (p[0] - self.lo[0]) / self.size;
        let fy = (p[1] - self.lo[1]) / self.size;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        (ix < self.dims[0] && iy < self.dims[1])
            .then(|| self.bins[iy * self.dims[0] + ix].as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    centerline: Vec<[f64; 2]>,
    half_width: f64,
    obstacles: Vec<Obstacle>,
    cumulative: Vec<f64>,
    total_length: f64,
    bins: SegmentBins,
}

impl Track {
    pub fn new(
        centerline: Vec<[f64; 2]>,
        half_width: f64,
        obstacles: Vec<Obstacle>,
    ) -> Result<Self> {
        let mut centerline = centerline;
        if centerline.len() >= 2 && centerline.first() == centerline.last() {
            centerline.pop();
        }
        if centerline.len() < 3 {
            return Err(Error::InvalidTrack(
                "centerline needs at least three distinct vertices".into(),
            ));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::InvalidTrack(format!(
                "half_width must be > 0, got {half_width}"
            )));
        }
        if centerline.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTrack("non-finite centerline vertex".into()));
        }
        let n = centerline.len();
        let mut cumulative = Vec::with_capacity(n + 1);
        cumulative.push(0.0);
        for i in 0..n {
            let (a, b) = (centerline[i], centerline[(i + 1) % n]);
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            if len < 1e-9 {
                return Err(Error::InvalidTrack(format!(
                    "degenerate centerline piece {i}"
                )));
            }
            cumulative.push(cumulative[i] + len);
        }
        let total_length = cumulative[n];
        let bins = SegmentBins::build(
            &centerline,
            half_width,
            (half_width * 0.5).max(total_length / 4096.0),
        );
        Ok(Self {
            centerline,
            half_width,
            obstacles,
            cumulative,
            total_length,
            bins,
        })
    }

    pub fn from_file(file: TrackFile) -> Result<Self> {
        if file.version != TRACK_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported track format version {}",
                file.version
            )));
        }
        let obstacles = file
            .obstacles
            .into_iter()
            .map(|o| Obstacle::new(o.vertices))
            .collect::<Result<_>>()?;
        Self::new(file.centerline, file.half_width, obstacles)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_file(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_file(&self) -> TrackFile {
        TrackFile {
            version: TRACK_FORMAT_VERSION,
            half_width: self.half_width,
            centerline: self.centerline.clone(),
            obstacles: self
                .obstacles
                .iter()
                .map(|o| ObstacleFile {
                    vertices: o.vertices.clone(),
                })
                .collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("track serializes")
    }

    pub fn centerline(&self) -> &[[f64; 2]] {
        &self.centerline
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn n_pieces(&self) -> usize {
        self.centerline.len()
    }

    pub fn with_obstacles(&self, obstacles: Vec<Obstacle>) -> Self {
        Self {
            obstacles,
            ..self.clone()
        }
    }

    /// Same track with the centerline re-sampled into `n` pieces of equal
    /// arclength.
    pub fn resampled(&self, n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidTrack("need at least three pieces".into()));
        }
        let pts = (0..n)
            .map(|k| self.point_at(self.total_length * k as f64 / n as f64))
            .collect();
        Self::new(pts, self.half_width, self.obstacles.clone())
    }

    fn piece(&self, i: usize) -> ([f64; 2], [f64; 2]) {
        (
            self.centerline[i],
            self.centerline[(i + 1) % self.centerline.len()],
        )
    }

    /// Centerline point at arclength `s` (taken modulo the lap length).
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let s = s.rem_euclid(self.total_length);
        let i = self
            .cumulative
            .partition_point(|&c| c <= s)
            .saturating_sub(1)
            .min(self.n_pieces() - 1);
        let (a, b) = self.piece(i);
        let t = (s - self.cumulative[i]) / (self.cumulative[i + 1] - self.cumulative[i]);
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    /// Unit tangent direction angle at arclength `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let s = s.rem_euclid(self.total_length);
        let i = self
            .cumulative
            .partition_point(|&c| c <= s)
            .saturating_sub(1)
            .min(self.n_pieces() - 1);
        let (a, b) = self.piece(i);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Nearest piece (first in index order on ties), its distance and the
    /// clamped projection parameter.
    fn nearest(&self, p: [f64; 2]) -> (usize, f64, f64) {
        let scan = |it: &mut dyn Iterator<Item = usize>| {
            let mut best = (usize::MAX, f64::INFINITY, 0.0);
            for i in it {
                let (a, b) = self.piece(i);
                let (d, t) = segment_distance(p, a, b);
                if d < best.1 || (d == best.1 && i < best.0) {
                    best = (i, d, t);
                }
            }
            best
        };
        if let Some(list) = self.bins.get(p) {
            let best = scan(&mut list.iter().map(|&i| i as usize));
            if best.1 <= self.half_width {
                return best;
            }
        }
        scan(&mut (0..self.n_pieces()))
    }

    /// Distance from `p` to the centerline polyline.
    pub fn centerline_distance(&self, p: [f64; 2]) -> f64 {
        self.nearest(p).1
    }

    /// True iff `p` is at least `margin` inside the track edges and farther
    /// than `margin` from every obstacle.
    pub fn inside(&self, p: [f64; 2], margin: f64) -> bool {
        let limit = self.half_width - margin;
        if !(limit >= 0.0) || !p[0].is_finite() || !p[1].is_finite() {
            return false;
        }
        let within = match self.bins.get(p) {
            Some(list) => list.iter().any(|&i| {
                let (a, b) = self.piece(i as usize);
                segment_distance(p, a, b).0 <= limit
            }),
            None => false,
        };
        within && self.clear_of_obstacles(p, margin)
    }

    pub fn clear_of_obstacles(&self, p: [f64; 2], margin: f64) -> bool {
        self.obstacles.iter().all(|o| {
            let (lo, hi) = o.bounds();
            let far = p[0] < lo[0] - margin
                || p[0] > hi[0] + margin
                || p[1] < lo[1] - margin
                || p[1] > hi[1] + margin;
            far || (!o.contains(p) && o.distance(p) > margin)
        })
    }

    /// Signed distance to the nearest track edge or obstacle: positive inside.
    pub fn boundary_clearance(&self, p: [f64; 2]) -> f64 {
        let edge = self.half_width - self.centerline_distance(p);
        self.obstacles.iter().fold(edge, |m, o| {
            let d = if o.contains(p) { -0.0 } else { o.distance(p) };
            m.min(d)
        })
    }

    /// Arclength of the orthogonal projection onto the nearest piece, in
    /// `[0, total_length)`.
    pub fn progress(&self, p: [f64; 2]) -> f64 {
        let (i, _, t) = self.nearest(p);
        let s = self.cumulative[i] + t * (self.cumulative[i + 1] - self.cumulative[i]);
        if s >= self.total_length {
            0.0
        } else {
            s
        }
    }

    /// Shortest signed progress difference `to - from` around the lap.
    pub fn progress_delta(&self, from: f64, to: f64) -> f64 {
        let l = self.total_length;
        (to - from + 0.5 * l).rem_euclid(l) - 0.5 * l
    }

    /// Axis-aligned bounds of the drivable area.
    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let (lo, hi) = bounds_of(&self.centerline);
        let w = self.half_width;
        ([lo[0] - w, lo[1] - w], [hi[0] + w, hi[1] + w])
    }

    /// Per-cell `X`/`Y` membership mask of one heading plane, `i_x` fastest.
    pub fn xy_mask(&self, spec: &GridSpec, margin: f64) -> Vec<bool> {
        let mut out = Vec::with_capacity(spec.counts[0] * spec.counts[1]);
        for iy in 0..spec.counts[1] {
            for ix in 0..spec.counts[0] {
                out.push(self.inside([spec.axis_center(0, ix), spec.axis_center(1, iy)], margin));
            }
        }
        out
    }

    /// Gridded constraint set: every `(phi, q)` at each `X`/`Y` cell whose
    /// center is inside the track with the given margin.
    pub fn build_k(&self, spec: &GridSpec, margin: f64) -> Result<KernelSet> {
        if spec.wrap[0] || spec.wrap[1] {
            return Err(Error::InvalidGrid(
                "track grids need bounded X and Y axes".into(),
            ));
        }
        let (lo, hi) = self.bounds();
        let covered = |a: usize| spec.lo[a] - spec.r <= lo[a] && spec.hi[a] + spec.r >= hi[a];
        if !covered(0) || !covered(1) {
            return Err(Error::InvalidGrid(
                "grid box does not cover the track".into(),
            ));
        }
        let mask = self.xy_mask(spec, margin);
        let mut k = KernelSet::empty(spec);
        let plane = spec.counts[0] * spec.counts[1];
        for q in 0..spec.n_modes {
            for ip in 0..spec.counts[2] {
                for (j, &inside) in mask.iter().enumerate() {
                    if inside {
                        k.set_linear(q, ip * plane + j, true);
                    }
                }
            }
        }
        Ok(k)
    }
}

/// Turtle-style centerline construction from straights and constant-radius
/// arcs. Points are emitted at most `step` apart.
#[derive(Debug, Clone)]
pub struct TrackBuilder {
    pos: [f64; 2],
    heading: f64,
    step: f64,
    points: Vec<[f64; 2]>,
}

impl TrackBuilder {
    pub fn new(start: [f64; 2], heading: f64, step: f64) -> Self {
        Self {
            pos: start,
            heading,
            step,
            points: vec![start],
        }
    }

    pub fn straight(mut self, length: f64) -> Self {
        let n = (length / self.step).ceil().max(1.0) as usize;
        let (s, c) = self.heading.sin_cos();
        let start = self.pos;
        for k in 1..=n {
            let d = length * k as f64 / n as f64;
            self.points.push([start[0] + c * d, start[1] + s * d]);
        }
        self.pos = *self.points.last().expect("nonempty");
        self
    }

    /// Arc of `radius` through `angle` radians, positive turning left.
    pub fn arc(mut self, radius: f64, angle: f64) -> Self {
        let n = (radius * angle.abs() / self.step).ceil().max(1.0) as usize;
        let side = angle.signum();
        let (s, c) = self.heading.sin_cos();
        let center = [
            self.pos[0] - side * radius * s,
            self.pos[1] + side * radius * c,
        ];
        let start_angle = self.heading - side * std::f64::consts::FRAC_PI_2;
        for k in 1..=n {
            let a = start_angle + angle * k as f64 / n as f64;
            self.points
                .push([center[0] + radius * a.cos(), center[1] + radius * a.sin()]);
        }
        self.pos = *self.points.last().expect("nonempty");
        self.heading += angle;
        self
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn heading(&self) -> f64 {
        self.heading
    }

    /// Finishes the loop; the last point must return to the start within `tol`.
    pub fn close(mut self, tol: f64) -> Result<Vec<[f64; 2]>> {
        let first = self.points[0];
        let last = *self.points.last().expect("nonempty");
        let gap = (last[0] - first[0]).hypot(last[1] - first[1]);
        if gap > tol {
            return Err(Error::InvalidTrack(format!(
                "centerline does not close, gap {gap}"
            )));
        }
        self.points.pop();
        Ok(self.points)
    }
}

/// Counts completed laps from successive progress readings.
///
/// A lap counts when progress wraps from the last tenth of the lap into the
/// first tenth; the counter re-arms only after progress has passed through
/// the middle of the lap, which rejects jitter around the start line.
#[derive(Debug, Clone, PartialEq)]
pub struct LapCounter {
    total: f64,
    armed: bool,
    last: Option<f64>,
    laps: usize,
}

impl LapCounter {
    pub const HYSTERESIS: f64 = 0.1;

    pub fn new(total_length: f64) -> Self {
        Self {
            total: total_length,
            armed: false,
            last: None,
            laps: 0,
        }
    }

    /// Feeds one progress reading; returns true when it completes a lap.
    pub fn update(&mut self, s: f64) -> bool {
        let lo = Self::HYSTERESIS * self.total;
        let hi = (1.0 - Self::HYSTERESIS) * self.total;
        let mut completed = false;
        if let Some(prev) = self.last {
            if self.armed && prev > hi && s < lo {
                self.laps += 1;
                self.armed = false;
                completed = true;
            }
        }
        if s >= lo && s <= hi {
            self.armed = true;
        }
        self.last = Some(s);
        completed
    }

    pub fn laps(&self) -> usize {
        self.laps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(side: f64, hw: f64) -> Track {
        Track::new(
            vec![[0.0, 0.0], [side, 0.0], [side, side], [0.0, side]],
            hw,
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn inside_examples() {
        let t = square(10.0, 1.0);
        assert!(t.inside([0.0, 0.0], 0.0));
        assert!(t.inside([5.0, 0.99], 0.0));
        assert!(!t.inside([5.0, 1.0 + 1e-9], 0.0));
        assert!(!t.inside([5.0, 0.99], 0.05));
        assert!(!t.inside([5.0, 5.0], 0.0));
        let box_ = Obstacle::new(vec![[4.0, -0.2], [4.4, -0.2], [4.4, 0.2], [4.0, 0.2]]).unwrap();
        let t2 = t.with_obstacles(vec![box_]);
        assert!(!t2.inside([4.2, 0.0], 0.0));
        assert!(t2.inside([4.2, 0.5], 0.0));
        assert!(!t2.inside([4.2, 0.5], 0.35));
    }

    #[test]
    fn progress_examples() {
        let t = square(10.0, 1.0);
        assert!((t.progress([3.2, 0.5]) - 3.2).abs() < 1e-12);
        assert_eq!(t.progress([0.0, 0.0]), 0.0);
        assert!((t.progress([0.5, 5.0]) - 35.0).abs() < 1e-12);
        assert!((t.progress_delta(39.0, 1.0) - 2.0).abs() < 1e-12);
        assert!((t.progress_delta(1.0, 39.0) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn convexity_enforced() {
        assert!(Obstacle::new(vec![[0.0, 0.0], [1.0, 0.0], [0.2, 0.2], [0.0, 1.0]]).is_err());
        let cw = Obstacle::new(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]).unwrap();
        assert!(cw.contains([0.5, 0.5]) && !cw.contains([1.5, 0.5]));
        assert!((cw.distance([2.0, 0.5]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn builder_closes_circle() {
        let pts = TrackBuilder::new([0.0, 0.0], 0.0, 0.05)
            .arc(1.0, std::f64::consts::TAU)
            .close(1e-9)
            .unwrap();
        let t = Track::new(pts, 0.2, vec![]).unwrap();
        assert!((t.total_length() - std::f64::consts::TAU).abs() < 1e-3);
        assert!(t.inside([0.0, 1.0 + 0.99], 0.0) || t.inside([0.0, 2.0 - 0.19], 0.0));
    }

    #[test]
    fn lap_counter_hysteresis() {
        let mut c = LapCounter::new(100.0);
        for s in [
            0.0, 5.0, 95.0, 3.0, 50.0, 95.0, 2.0, 98.0, 1.0, 60.0, 99.0, 0.5,
        ] {
            c.update(s);
        }
        assert_eq!(c.laps(), 2);
    }

    #[test]
    fn toml_roundtrip() {
        let t = square(4.0, 0.5).with_obstacles(vec![Obstacle::new(vec![
            [1.0, -0.1],
            [1.2, -0.1],
            [1.1, 0.1],
        ])
        .unwrap()]);
        let back = Track::parse(&t.to_toml()).unwrap();
        assert_eq!(back.centerline(), t.centerline());
        assert_eq!(back.obstacles().len(), 1);
    }
}
