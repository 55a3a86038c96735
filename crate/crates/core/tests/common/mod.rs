//! Brute-force oracles shared by the integration suites. These stay
//! independent of the library's solver and index paths: candidate
//! enumeration scans every integer point of a cell, nearest-road scans every
//! segment.
#![allow(dead_code)] // each test binary uses its own subset

use pride_core::geo::{corner_distances, GridRect, SquaredDistance, UtmPoint};
use pride_core::roadnet::RoadSegment;

/// Every integer point of `g` whose corner distances equal `ds` as a
/// multiset, by exhaustive scan.
pub fn brute_candidates(g: &GridRect, ds: &[SquaredDistance; 4]) -> Vec<UtmPoint> {
    let mut want: Vec<u64> = ds.iter().map(|d| d.value()).collect();
    want.sort_unstable();
    let mut out = Vec::new();
    for e in g.ll.easting..=g.rl.easting {
        for n in g.ll.northing..=g.lu.northing {
            let p = UtmPoint::new(e, n);
            let cd = corner_distances(p, g).expect("scan stays inside the cell");
            let mut got: Vec<u64> = cd.as_array().iter().map(|d| d.value()).collect();
            got.sort_unstable();
            if got == want {
                out.push(p);
            }
        }
    }
    out
}

/// Minimum point-to-segment distance by scanning every segment.
pub fn brute_nearest_road(p: UtmPoint, segments: &[RoadSegment]) -> f64 {
    segments
        .iter()
        .map(|s| s.distance_to(p))
        .fold(f64::INFINITY, f64::min)
}
