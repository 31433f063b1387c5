//! Vector shorelines from label masks by marching squares.
//!
//! The land indicator is sampled at pixel centers, which sit at integer
//! `(row, col)` coordinates. Contours follow the 0.5 level, so with binary
//! input every vertex is the midpoint of an edge between a land and a water
//! center. Ambiguous saddle cells treat their center as water. Segments are
//! oriented with land on the left as seen with north up, so closed contours
//! around land run counter-clockwise and contours around lakes run
//! clockwise. Contours that reach the edge of the sampled grid stay open.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_io::{GeoTransform, LabelMask, LAND};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShorelinePolyline {
    /// `(row, col)` in pixel-center coordinates. Closed polylines do not
    /// repeat their first vertex.
    pub vertices: Vec<(f64, f64)>,
    pub closed: bool,
}

impl ShorelinePolyline {
    /// Shoelace area with north up: positive for counter-clockwise rings.
    /// Zero for open polylines.
    pub fn signed_area(&self) -> f64 {
        if !self.closed {
            return 0.0;
        }
        let n = self.vertices.len();
        let mut twice = 0.0;
        for i in 0..n {
            let (r0, c0) = self.vertices[i];
            let (r1, c1) = self.vertices[(i + 1) % n];
            // x = col, y = -row
            twice += c0 * -r1 - c1 * -r0;
        }
        twice / 2.0
    }

    fn segments(&self) -> impl Iterator<Item = ((f64, f64), (f64, f64))> + '_ {
        let n = self.vertices.len();
        let count = if self.closed { n } else { n.saturating_sub(1) };
        (0..count).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Length in pixels.
    pub fn pixel_length(&self) -> f64 {
        self.segments()
            .map(|((r0, c0), (r1, c1))| (r1 - r0).hypot(c1 - c0))
            .sum()
    }
}

/// Length in meters at `resolution_m` meters per pixel.
pub fn polyline_length(polyline: &ShorelinePolyline, resolution_m: f64) -> f64 {
    polyline.pixel_length() * resolution_m
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Edge {
    Top,
    Right,
    Bottom,
    Left,
}

/// Edge midpoint in doubled integer coordinates, so keys are exact.
fn midpoint(r: usize, c: usize, e: Edge) -> (i64, i64) {
    let (r, c) = (2 * r as i64, 2 * c as i64);
    match e {
        Edge::Top => (r, c + 1),
        Edge::Right => (r + 1, c + 2),
        Edge::Bottom => (r + 2, c + 1),
        Edge::Left => (r + 1, c),
    }
}

/// True when `k` lies left of `p → q` with north up.
fn left_of(p: (i64, i64), q: (i64, i64), k: (i64, i64)) -> bool {
    // x = col, y = -row
    let (dx, dy) = (q.1 - p.1, -(q.0 - p.0));
    let (kx, ky) = (k.1 - p.1, -(k.0 - p.0));
    dx * ky - dy * kx > 0
}

/// Directed edge between doubled-coordinate points.
type Segment = ((i64, i64), (i64, i64));

/// Directed contour segments of one cell whose top-left center is `(r, c)`.
fn cell_segments(mask: &LabelMask, r: usize, c: usize, out: &mut Vec<Segment>) {
    let land = |rr: usize, cc: usize| mask.get(rr, cc) == LAND;
    let (tl, tr, br, bl) = (land(r, c), land(r, c + 1), land(r + 1, c + 1), land(r + 1, c));
    let corner = |k: usize| -> ((i64, i64), bool) {
        let (rr, cc, v) = match k {
            0 => (r, c, tl),
            1 => (r, c + 1, tr),
            2 => (r + 1, c + 1, br),
            _ => (r + 1, c, bl),
        };
        ((2 * rr as i64, 2 * cc as i64), v)
    };
    let mut pairs: Vec<(Edge, Edge, usize)> = Vec::with_capacity(2);
    // Each pair carries a reference corner: land on the left iff it is land.
    match (tl, tr, br, bl) {
        (true, false, true, false) => {
            pairs.push((Edge::Top, Edge::Left, 0));
            pairs.push((Edge::Bottom, Edge::Right, 2));
        }
        (false, true, false, true) => {
            pairs.push((Edge::Top, Edge::Right, 1));
            pairs.push((Edge::Bottom, Edge::Left, 3));
        }
        _ => {
            let crossings: Vec<Edge> = [
                (Edge::Top, tl != tr),
                (Edge::Right, tr != br),
                (Edge::Bottom, br != bl),
                (Edge::Left, bl != tl),
            ]
            .into_iter()
            .filter_map(|(e, x)| x.then_some(e))
            .collect();
            if let [a, b] = crossings[..] {
                let reference = match (a, b) {
                    (Edge::Top, Edge::Right) => 1,
                    (Edge::Right, Edge::Bottom) => 2,
                    (Edge::Bottom, Edge::Left) => 3,
                    (Edge::Top, Edge::Left) => 0,
                    (Edge::Top, Edge::Bottom) => 0,
                    (Edge::Right, Edge::Left) => 0,
                    _ => unreachable!("crossings are listed in edge order"),
                };
                pairs.push((a, b, reference));
            }
        }
    }
    for (a, b, k) in pairs {
        let (p, q) = (midpoint(r, c, a), midpoint(r, c, b));
        let (kp, is_land) = corner(k);
        if left_of(p, q, kp) == is_land {
            out.push((p, q));
        } else {
            out.push((q, p));
        }
    }
}

/// Contours of the land/water interface. Open polylines come first, then
/// closed ones; within each group polylines are ordered by their first
/// vertex, and closed polylines start at their smallest vertex.
pub fn extract_shorelines(mask: &LabelMask) -> Vec<ShorelinePolyline> {
    let (h, w) = (mask.height(), mask.width());
    if h < 2 || w < 2 {
        return Vec::new();
    }
    let mut segs = Vec::new();
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            cell_segments(mask, r, c, &mut segs);
        }
    }
    let mut next: BTreeMap<(i64, i64), (i64, i64)> = BTreeMap::new();
    let mut has_incoming: BTreeSet<(i64, i64)> = BTreeSet::new();
    for &(p, q) in &segs {
        let dup = next.insert(p, q);
        debug_assert!(dup.is_none(), "two segments leave {p:?}");
        has_incoming.insert(q);
    }
    let to_point = |k: (i64, i64)| (k.0 as f64 / 2.0, k.1 as f64 / 2.0);
    let mut out = Vec::new();
    let starts: Vec<(i64, i64)> = next.keys().filter(|k| !has_incoming.contains(k)).copied().collect();
    for s in starts {
        let mut verts = vec![to_point(s)];
        let mut cur = s;
        while let Some(q) = next.remove(&cur) {
            verts.push(to_point(q));
            cur = q;
        }
        out.push(ShorelinePolyline {
            vertices: verts,
            closed: false,
        });
    }
    while let Some((&s, _)) = next.iter().next() {
        let mut verts = Vec::new();
        let mut cur = s;
        while let Some(q) = next.remove(&cur) {
            verts.push(to_point(cur));
            cur = q;
        }
        debug_assert_eq!(cur, s, "loop did not close");
        out.push(ShorelinePolyline {
            vertices: verts,
            closed: true,
        });
    }
    out
}

fn perpendicular_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dr, dc) = (b.0 - a.0, b.1 - a.1);
    let len = dr.hypot(dc);
    if len == 0.0 {
        return (p.0 - a.0).hypot(p.1 - a.1);
    }
    ((p.0 - a.0) * dc - (p.1 - a.1) * dr).abs() / len
}

fn rdp(points: &[(f64, f64)], tol: f64, keep: &mut Vec<bool>, offset: usize) {
    if points.len() < 3 {
        return;
    }
    let (a, b) = (points[0], points[points.len() - 1]);
    let (idx, dist) = points[1..points.len() - 1]
        .iter()
        .enumerate()
        .map(|(i, &p)| (i + 1, perpendicular_distance(p, a, b)))
        .fold((0, -1.0), |best, x| if x.1 > best.1 { x } else { best });
    if dist > tol {
        keep[offset + idx] = true;
        rdp(&points[..=idx], tol, keep, offset);
        rdp(&points[idx..], tol, keep, offset + idx);
    }
}

/// Ramer-Douglas-Peucker vertex decimation with tolerance in pixels.
/// Closed polylines keep at least three vertices.
pub fn simplify(polyline: &ShorelinePolyline, tolerance: f64) -> ShorelinePolyline {
    let v = &polyline.vertices;
    if tolerance <= 0.0 || v.len() < 3 {
        return polyline.clone();
    }
    let mut pts = v.clone();
    if polyline.closed {
        pts.push(v[0]);
    }
    let mut keep = vec![false; pts.len()];
    keep[0] = true;
    *keep.last_mut().unwrap() = true;
    if polyline.closed {
        // Anchor the ring at the vertex farthest from the start.
        let far = (1..v.len())
            .max_by(|&i, &j| {
                let d = |k: usize| (v[k].0 - v[0].0).hypot(v[k].1 - v[0].1);
                d(i).total_cmp(&d(j))
            })
            .unwrap();
        keep[far] = true;
        rdp(&pts[..=far], tolerance, &mut keep, 0);
        rdp(&pts[far..], tolerance, &mut keep, far);
    } else {
        rdp(&pts, tolerance, &mut keep, 0);
    }
    let mut out: Vec<(f64, f64)> = pts.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| *p).collect();
    if polyline.closed {
        out.pop();
        if out.len() < 3 {
            return polyline.clone();
        }
    }
    ShorelinePolyline {
        vertices: out,
        closed: polyline.closed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShorelineRecord {
    pub closed: bool,
    pub length_m: f64,
    pub vertices: Vec<[f64; 2]>,
    /// Map coordinates of each vertex when the source raster was georeferenced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_vertices: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShorelineSet {
    pub scene_id: String,
    pub resolution_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo: Option<GeoTransform>,
    pub polylines: Vec<ShorelineRecord>,
}

impl ShorelineSet {
    pub fn new(scene_id: &str, polylines: &[ShorelinePolyline], resolution_m: f64, geo: Option<&GeoTransform>) -> Self {
        let polylines = polylines
            .iter()
            .map(|p| ShorelineRecord {
                closed: p.closed,
                length_m: polyline_length(p, resolution_m),
                vertices: p.vertices.iter().map(|&(r, c)| [r, c]).collect(),
                // Pixel centers sit half a pixel inside the raster corner.
                map_vertices: geo.map(|g| {
                    p.vertices
                        .iter()
                        .map(|&(r, c)| {
                            let (x, y) = g.apply(r + 0.5, c + 0.5);
                            [x, y]
                        })
                        .collect()
                }),
            })
            .collect();
        Self {
            scene_id: scene_id.to_string(),
            resolution_m,
            geo: geo.cloned(),
            polylines,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(rows: &[&str]) -> LabelMask {
        let h = rows.len();
        let w = rows[0].len();
        let classes = rows.iter().flat_map(|r| r.bytes().map(|b| (b == b'#') as u8)).collect();
        LabelMask::new("t", h, w, classes).unwrap()
    }

    #[test]
    fn uniform_masks_have_no_shoreline() {
        assert!(extract_shorelines(&mask_from(&["....", "....", "...."])).is_empty());
        assert!(extract_shorelines(&mask_from(&["####", "####"])).is_empty());
    }

    #[test]
    fn two_by_two_block_gives_the_octagon() {
        let m = mask_from(&["......", "......", "..##..", "..##..", "......", "......"]);
        let lines = extract_shorelines(&m);
        assert_eq!(lines.len(), 1);
        let l = &lines[0];
        assert!(l.closed);
        let want = vec![
            (1.5, 2.0),
            (2.0, 1.5),
            (3.0, 1.5),
            (3.5, 2.0),
            (3.5, 3.0),
            (3.0, 3.5),
            (2.0, 3.5),
            (1.5, 3.0),
        ];
        assert_eq!(l.vertices, want);
        assert_eq!(l.signed_area(), 3.5);
    }

    #[test]
    fn single_pixel_is_a_ccw_diamond() {
        let m = mask_from(&["...", ".#.", "..."]);
        let l = &extract_shorelines(&m)[0];
        assert_eq!(l.vertices.len(), 4);
        assert_eq!(l.signed_area(), 0.5);
    }

    #[test]
    fn lake_runs_clockwise() {
        let m = mask_from(&[".....", ".###.", ".#.#.", ".###.", "....."]);
        let lines = extract_shorelines(&m);
        assert_eq!(lines.len(), 2);
        let areas: Vec<f64> = lines.iter().map(|l| l.signed_area()).collect();
        assert!(areas.iter().any(|&a| a > 0.0) && areas.iter().any(|&a| a < 0.0));
    }

    #[test]
    fn saddle_center_is_water() {
        let m = mask_from(&["....", ".#..", "..#.", "...."]);
        let lines = extract_shorelines(&m);
        assert_eq!(lines.len(), 2, "diagonal land pixels stay separate");
        assert!(lines.iter().all(|l| l.closed && l.vertices.len() == 4));
    }

    #[test]
    fn border_land_gives_open_polyline() {
        let m = mask_from(&["##...", "##...", ".....", "....."]);
        let lines = extract_shorelines(&m);
        assert_eq!(lines.len(), 1);
        assert!(!lines[0].closed);
        let ends = [lines[0].vertices[0], *lines[0].vertices.last().unwrap()];
        for (r, c) in ends {
            assert!(
                r == 0.0 || c == 0.0 || r == 3.0 || c == 4.0,
                "({r},{c}) not on the border"
            );
        }
    }

    #[test]
    fn complement_has_same_vertices() {
        let m = mask_from(&["......", ".##.#.", ".#..#.", "...##.", "..#...", "......"]);
        let set = |m: &LabelMask| {
            let mut v: Vec<(i64, i64)> = extract_shorelines(m)
                .iter()
                .flat_map(|l| l.vertices.iter().map(|&(r, c)| ((2.0 * r) as i64, (2.0 * c) as i64)))
                .collect();
            v.sort();
            v.dedup();
            v
        };
        assert_eq!(set(&m), set(&m.complement()));
    }

    #[test]
    fn lengths() {
        let square = ShorelinePolyline {
            vertices: vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)],
            closed: true,
        };
        assert_eq!(polyline_length(&square, 10.0), 40.0);
        let seg = ShorelinePolyline {
            vertices: vec![(0.0, 0.0), (0.0, 3.0)],
            closed: false,
        };
        assert_eq!(polyline_length(&seg, 10.0), 30.0);
    }

    #[test]
    fn simplify_drops_collinear_points() {
        let line = ShorelinePolyline {
            vertices: vec![(0.0, 0.0), (0.0, 1.0), (0.0, 2.0), (1.0, 2.0)],
            closed: false,
        };
        assert_eq!(simplify(&line, 0.1).vertices, vec![(0.0, 0.0), (0.0, 2.0), (1.0, 2.0)]);
        let m = mask_from(&["......", "......", "..##..", "..##..", "......", "......"]);
        let ring = &extract_shorelines(&m)[0];
        assert!(simplify(ring, 0.01).vertices.len() == 8);
        assert!(simplify(ring, 2.0).vertices.len() >= 3);
    }

    #[test]
    fn geo_passthrough() {
        let m = mask_from(&["...", ".#.", "..."]);
        let g = GeoTransform {
            origin_x: 500.0,
            origin_y: 1000.0,
            pixel_width: 10.0,
            pixel_height: -10.0,
        };
        let set = ShorelineSet::new("t", &extract_shorelines(&m), 10.0, Some(&g));
        let mv = set.polylines[0].map_vertices.as_ref().unwrap();
        let v = set.polylines[0].vertices[0];
        assert_eq!(mv[0], [500.0 + (v[1] + 0.5) * 10.0, 1000.0 - (v[0] + 0.5) * 10.0]);
    }

    fn blob() -> impl Strategy<Value = (usize, usize, Vec<u8>)> {
        (4usize..20, 4usize..20).prop_flat_map(|(h, w)| {
            prop::collection::vec(prop::bool::weighted(0.45), h * w).prop_map(move |bits| {
                let classes = (0..h * w)
                    .map(|i| {
                        let (r, c) = (i / w, i % w);
                        let interior = r > 0 && c > 0 && r + 1 < h && c + 1 < w;
                        (interior && bits[i]) as u8
                    })
                    .collect();
                (h, w, classes)
            })
        })
    }

    proptest! {
        #[test]
        fn area_within_discretization_bound((h, w, classes) in blob()) {
            let m = LabelMask::new("p", h, w, classes).unwrap();
            let lines = extract_shorelines(&m);
            prop_assert!(lines.iter().all(|l| l.closed && l.vertices.len() >= 3));
            let area: f64 = lines.iter().map(|l| l.signed_area()).sum();
            let length: f64 = lines.iter().map(|l| l.pixel_length()).sum();
            prop_assert!((area - m.land_pixels() as f64).abs() <= length + 1e-9);
            for l in &lines {
                let n = l.vertices.len();
                for i in 0..n {
                    prop_assert_ne!(l.vertices[i], l.vertices[(i + 1) % n]);
                }
            }
        }

        #[test]
        fn translation_equivariance((h, w, classes) in blob(), dr in 0usize..4, dc in 0usize..4) {
            let m = LabelMask::new("p", h, w, classes.clone()).unwrap();
            let (h2, w2) = (h + dr, w + dc);
            let mut shifted = vec![0u8; h2 * w2];
            for r in 0..h {
                for c in 0..w {
                    shifted[(r + dr) * w2 + c + dc] = classes[r * w + c];
                }
            }
            let m2 = LabelMask::new("p", h2, w2, shifted).unwrap();
            let a = extract_shorelines(&m);
            let b = extract_shorelines(&m2);
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                let moved: Vec<(f64, f64)> = x.vertices.iter().map(|&(r, c)| (r + dr as f64, c + dc as f64)).collect();
                prop_assert_eq!(&moved, &y.vertices);
            }
        }
    }
}
