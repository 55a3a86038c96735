//! Exact integer geometry over UTM-encoded coordinates.
//!
//! All coordinates are integer metres in a planar UTM-style frame and every
//! distance in this crate is a *squared* Euclidean distance, so geometry
//! stays in exact integer arithmetic end to end. The module provides the
//! grid bookkeeping published by the service provider (rectangular cells,
//! 4-neighbourhoods) and the rectangle-corner multilateration used by the
//! harvesting attack: recovering the positions consistent with an unordered
//! multiset of four corner distances.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Northing values must stay below this bound so that every coordinate fits
/// in 24 bits, which is what makes the `[1, 2^24]` blinding range sensible.
pub const MAX_NORTHING: i64 = 10_000_000;

/// Safety bound on easting magnitude so that squared distances cannot
/// overflow `i64`.
pub const MAX_EASTING_ABS: i64 = 100_000_000;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("point ({0}, {1}) violates the coordinate bounds")]
    CoordinateOutOfRange(i64, i64),
    #[error("point {point} lies outside grid {grid}")]
    PointOutsideGrid { point: UtmPoint, grid: GridId },
    #[error("grid rectangle is degenerate or not axis-aligned")]
    BadRectangle,
    #[error("grid map has no cell with id {0}")]
    UnknownGrid(GridId),
    #[error("grid map dimensions must be positive and fit the coordinate bounds")]
    BadGridMap,
    #[error("malformed grid map file at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A planar position in integer metres (UTM easting/northing).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UtmPoint {
    pub easting: i64,
    pub northing: i64,
}

impl UtmPoint {
    pub fn new(easting: i64, northing: i64) -> Self {
        assert!(
            Self::in_bounds(easting, northing),
            "coordinates ({easting}, {northing}) out of range"
        );
        Self { easting, northing }
    }

    pub fn try_new(easting: i64, northing: i64) -> Result<Self, GeoError> {
        if Self::in_bounds(easting, northing) {
            Ok(Self { easting, northing })
        } else {
            Err(GeoError::CoordinateOutOfRange(easting, northing))
        }
    }

    fn in_bounds(easting: i64, northing: i64) -> bool {
        (0..MAX_NORTHING).contains(&northing) && easting.abs() <= MAX_EASTING_ABS
    }
}

impl fmt::Display for UtmPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.easting, self.northing)
    }
}

/// Exact squared Euclidean distance in square metres.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
pub struct SquaredDistance(pub u64);

impl SquaredDistance {
    pub fn value(self) -> u64 {
        self.0
    }
}

impl fmt::Display for SquaredDistance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifier of one rectangular grid cell, row-major within its map.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
pub struct GridId(pub u32);

impl fmt::Display for GridId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Corner labels of an axis-aligned cell: left/right x lower/upper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corner {
    LowerLeft,
    UpperLeft,
    LowerRight,
    UpperRight,
}

impl Corner {
    pub const ALL: [Corner; 4] = [
        Corner::LowerLeft,
        Corner::UpperLeft,
        Corner::LowerRight,
        Corner::UpperRight,
    ];
}

/// An axis-aligned rectangular grid cell, described by its four corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRect {
    pub grid_id: GridId,
    /// Lower-left corner (min easting, min northing).
    pub ll: UtmPoint,
    /// Upper-left corner.
    pub lu: UtmPoint,
    /// Lower-right corner.
    pub rl: UtmPoint,
    /// Upper-right corner.
    pub ru: UtmPoint,
}

impl GridRect {
    /// Builds a rectangle from its lower-left corner and positive side lengths.
    pub fn from_origin(grid_id: GridId, ll: UtmPoint, width: i64, height: i64) -> Self {
        assert!(width > 0 && height > 0, "degenerate rectangle");
        Self {
            grid_id,
            ll,
            lu: UtmPoint::new(ll.easting, ll.northing + height),
            rl: UtmPoint::new(ll.easting + width, ll.northing),
            ru: UtmPoint::new(ll.easting + width, ll.northing + height),
        }
    }

    pub fn corner(&self, c: Corner) -> UtmPoint {
        match c {
            Corner::LowerLeft => self.ll,
            Corner::UpperLeft => self.lu,
            Corner::LowerRight => self.rl,
            Corner::UpperRight => self.ru,
        }
    }

    pub fn width(&self) -> i64 {
        self.rl.easting - self.ll.easting
    }

    pub fn height(&self) -> i64 {
        self.lu.northing - self.ll.northing
    }

    pub fn is_square(&self) -> bool {
        self.width() == self.height()
    }

    /// Squared length of the cell diagonal (the basic-protocol threshold).
    pub fn diag_sq(&self) -> SquaredDistance {
        let w = self.width();
        let h = self.height();
        SquaredDistance((w * w + h * h) as u64)
    }

    /// Containment including the boundary; drivers report from inside or on
    /// the edge of their cell.
    pub fn contains(&self, p: UtmPoint) -> bool {
        p.easting >= self.ll.easting
            && p.easting <= self.rl.easting
            && p.northing >= self.ll.northing
            && p.northing <= self.lu.northing
    }
}

/// Exact squared Euclidean distance between two integer points.
pub fn squared_distance(p: UtmPoint, q: UtmPoint) -> SquaredDistance {
    let de = p.easting - q.easting;
    let dn = p.northing - q.northing;
    SquaredDistance((de * de + dn * dn) as u64)
}

/// The four squared distances from a point to the corners of its cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CornerDistances {
    pub ll: SquaredDistance,
    pub lu: SquaredDistance,
    pub rl: SquaredDistance,
    pub ru: SquaredDistance,
}

impl CornerDistances {
    pub fn as_array(&self) -> [SquaredDistance; 4] {
        [self.ll, self.lu, self.rl, self.ru]
    }

    /// Multiset equality against four unordered values.
    pub fn matches_multiset(&self, ds: &[SquaredDistance; 4]) -> bool {
        let mut a = self.as_array();
        let mut b = *ds;
        a.sort_unstable();
        b.sort_unstable();
        a == b
    }
}

/// Squared distances from `p` to each corner of `g`.
///
/// `p` must lie inside or on `g`; the protocol never has a driver report
/// corner distances for a cell she is not in.
pub fn corner_distances(p: UtmPoint, g: &GridRect) -> Result<CornerDistances, GeoError> {
    if !g.contains(p) {
        return Err(GeoError::PointOutsideGrid {
            point: p,
            grid: g.grid_id,
        });
    }
    Ok(CornerDistances {
        ll: squared_distance(p, g.ll),
        lu: squared_distance(p, g.lu),
        rl: squared_distance(p, g.rl),
        ru: squared_distance(p, g.ru),
    })
}

/// Every integer point of `g` whose corner distances equal `ds` as a multiset.
///
/// Solves each corner assignment by linearisation: two corners sharing an
/// easting give `D_a - D_b = (y_a - y_b)(y_a + y_b - 2y)`, which pins the
/// northing by one exact division, and symmetrically for the easting. An
/// assignment survives only if both divisions are exact, the point lies in
/// the cell, and all four distances verify exactly. The empty set is the
/// caller's inconsistency signal, not an error.
///
/// For a valid measurement on a non-square cell the result is the rectangle
/// symmetry orbit of the true point, at most 4 points; square cells can
/// yield up to 8.
pub fn candidate_points(g: &GridRect, ds: &[SquaredDistance; 4]) -> Vec<UtmPoint> {
    let vals: [i128; 4] = [
        ds[0].0 as i128,
        ds[1].0 as i128,
        ds[2].0 as i128,
        ds[3].0 as i128,
    ];
    let mut found = BTreeSet::new();

    // Assignment = which input value plays ll, lu, rl, ru.
    const PERMS: [[usize; 4]; 24] = permutations4();
    for perm in PERMS {
        let d_ll = vals[perm[0]];
        let d_lu = vals[perm[1]];
        let d_rl = vals[perm[2]];
        let d_ru = vals[perm[3]];
        // British-flag pairing: opposite corner pairs have equal sums.
        if d_ll + d_ru != d_lu + d_rl {
            continue;
        }
        let Some(y) = solve_axis(
            d_ll - d_lu,
            g.ll.northing as i128,
            g.lu.northing as i128,
        ) else {
            continue;
        };
        let Some(x) = solve_axis(d_ll - d_rl, g.ll.easting as i128, g.rl.easting as i128) else {
            continue;
        };
        let (Ok(x), Ok(y)) = (i64::try_from(x), i64::try_from(y)) else {
            continue;
        };
        let Ok(p) = UtmPoint::try_new(x, y) else {
            continue;
        };
        if !g.contains(p) {
            continue;
        }
        // Verify all four distances exactly before accepting.
        let cd = corner_distances(p, g).expect("containment checked");
        if cd.ll.0 as i128 == d_ll
            && cd.lu.0 as i128 == d_lu
            && cd.rl.0 as i128 == d_rl
            && cd.ru.0 as i128 == d_ru
        {
            found.insert((p.easting, p.northing));
        }
    }
    found
        .into_iter()
        .map(|(e, n)| UtmPoint::new(e, n))
        .collect()
}

/// Solves `diff = (c_a - c_b)(c_a + c_b - 2t)` for integer `t`, where `c_a`
/// and `c_b` are the two distinct corner coordinates on one axis. Returns
/// `None` when no exact integer solution exists.
fn solve_axis(diff: i128, c_a: i128, c_b: i128) -> Option<i128> {
    let span = c_a - c_b;
    debug_assert!(span != 0);
    if diff % span != 0 {
        return None;
    }
    let q = diff / span; // equals c_a + c_b - 2t
    let two_t = c_a + c_b - q;
    if two_t % 2 != 0 {
        return None;
    }
    Some(two_t / 2)
}

const fn permutations4() -> [[usize; 4]; 24] {
    let mut out = [[0usize; 4]; 24];
    let mut idx = 0;
    let mut a = 0;
    while a < 4 {
        let mut b = 0;
        while b < 4 {
            let mut c = 0;
            while c < 4 {
                let mut d = 0;
                while d < 4 {
                    if a != b && a != c && a != d && b != c && b != d && c != d {
                        out[idx] = [a, b, c, d];
                        idx += 1;
                    }
                    d += 1;
                }
                c += 1;
            }
            b += 1;
        }
        a += 1;
    }
    out
}

/// The published tiling of the operation area: `rows x cols` uniform
/// rectangular cells, row-major ids, origin at the lower-left corner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridMap {
    origin: UtmPoint,
    cell_width: i64,
    cell_height: i64,
    rows: u32,
    cols: u32,
}

impl GridMap {
    pub fn new(
        origin: UtmPoint,
        cell_width: i64,
        cell_height: i64,
        rows: u32,
        cols: u32,
    ) -> Result<Self, GeoError> {
        if cell_width <= 0 || cell_height <= 0 || rows == 0 || cols == 0 {
            return Err(GeoError::BadGridMap);
        }
        let top = origin.northing + cell_height * rows as i64;
        let right = origin.easting + cell_width * cols as i64;
        if top >= MAX_NORTHING || right > MAX_EASTING_ABS {
            return Err(GeoError::BadGridMap);
        }
        Ok(Self {
            origin,
            cell_width,
            cell_height,
            rows,
            cols,
        })
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn cell_width(&self) -> i64 {
        self.cell_width
    }

    pub fn cell_height(&self) -> i64 {
        self.cell_height
    }

    pub fn origin(&self) -> UtmPoint {
        self.origin
    }

    pub fn cell_count(&self) -> u32 {
        self.rows * self.cols
    }

    pub fn grid_ids(&self) -> impl Iterator<Item = GridId> {
        (0..self.cell_count()).map(GridId)
    }

    fn row_col(&self, id: GridId) -> Option<(u32, u32)> {
        if id.0 < self.cell_count() {
            Some((id.0 / self.cols, id.0 % self.cols))
        } else {
            None
        }
    }

    pub fn grid_id_at(&self, row: u32, col: u32) -> Option<GridId> {
        if row < self.rows && col < self.cols {
            Some(GridId(row * self.cols + col))
        } else {
            None
        }
    }

    pub fn cell(&self, id: GridId) -> Result<GridRect, GeoError> {
        let (row, col) = self.row_col(id).ok_or(GeoError::UnknownGrid(id))?;
        let ll = UtmPoint::new(
            self.origin.easting + col as i64 * self.cell_width,
            self.origin.northing + row as i64 * self.cell_height,
        );
        Ok(GridRect::from_origin(id, ll, self.cell_width, self.cell_height))
    }

    /// Cell owning `p`. Cells are half-open on their upper/right edges except
    /// for the outermost row/column, so the tiling has no overlap or gap.
    pub fn cell_at(&self, p: UtmPoint) -> Option<GridId> {
        let dx = p.easting - self.origin.easting;
        let dy = p.northing - self.origin.northing;
        if dx < 0 || dy < 0 {
            return None;
        }
        let width = self.cell_width * self.cols as i64;
        let height = self.cell_height * self.rows as i64;
        if dx > width || dy > height {
            return None;
        }
        let col = (dx / self.cell_width).min(self.cols as i64 - 1) as u32;
        let row = (dy / self.cell_height).min(self.rows as i64 - 1) as u32;
        self.grid_id_at(row, col)
    }

    /// The existing 4-neighbourhood of `id` in the fixed search order
    /// north, east, south, west.
    pub fn neighbors4(&self, id: GridId) -> Vec<GridId> {
        let Some((row, col)) = self.row_col(id) else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity(4);
        if row + 1 < self.rows {
            out.push(GridId((row + 1) * self.cols + col));
        }
        if col + 1 < self.cols {
            out.push(GridId(row * self.cols + col + 1));
        }
        if row > 0 {
            out.push(GridId((row - 1) * self.cols + col));
        }
        if col > 0 {
            out.push(GridId(row * self.cols + col - 1));
        }
        out
    }

    /// Cells reachable within search radius `sr`, ring by ring. Ring `d`
    /// holds the cells at Manhattan distance `d`, walked clockwise starting
    /// from the northernmost cell; the rider's own cell is never included.
    pub fn cells_within_radius(&self, id: GridId, sr: u32) -> Vec<GridId> {
        let Some((row, col)) = self.row_col(id) else {
            return Vec::new();
        };
        let (row, col) = (row as i64, col as i64);
        let mut out = Vec::new();
        for d in 1..=sr as i64 {
            let mut ring = Vec::with_capacity((4 * d) as usize);
            for i in 0..d {
                ring.push((row + d - i, col + i)); // N -> E
            }
            for i in 0..d {
                ring.push((row - i, col + d - i)); // E -> S
            }
            for i in 0..d {
                ring.push((row - d + i, col - i)); // S -> W
            }
            for i in 0..d {
                ring.push((row + i, col - d + i)); // W -> N
            }
            for (r, c) in ring {
                if r >= 0 && c >= 0 {
                    if let Some(g) = self.grid_id_at(r as u32, c as u32) {
                        out.push(g);
                    }
                }
            }
        }
        out
    }

    /// Cells whose full 4-neighbourhood exists (not on the map boundary).
    pub fn interior_grids(&self) -> Vec<GridId> {
        let mut out = Vec::new();
        for row in 1..self.rows.saturating_sub(1) {
            for col in 1..self.cols.saturating_sub(1) {
                out.push(GridId(row * self.cols + col));
            }
        }
        out
    }

    /// Writes the published map description: origin, cell size, rows, cols.
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), GeoError> {
        writeln!(w, "# pride grid map")?;
        writeln!(w, "origin {} {}", self.origin.easting, self.origin.northing)?;
        writeln!(w, "cell {} {}", self.cell_width, self.cell_height)?;
        writeln!(w, "dims {} {}", self.rows, self.cols)?;
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self, GeoError> {
        let mut origin = None;
        let mut cell = None;
        let mut dims = None;
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            let body = line.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let mut parts = body.split_whitespace();
            let key = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            let pair = |rest: &[&str]| -> Result<(i64, i64), GeoError> {
                if rest.len() != 2 {
                    return Err(GeoError::Parse {
                        line: line_no,
                        reason: "expected two integers".into(),
                    });
                }
                let a = rest[0].parse().map_err(|_| GeoError::Parse {
                    line: line_no,
                    reason: format!("bad integer `{}`", rest[0]),
                })?;
                let b = rest[1].parse().map_err(|_| GeoError::Parse {
                    line: line_no,
                    reason: format!("bad integer `{}`", rest[1]),
                })?;
                Ok((a, b))
            };
            match key {
                "origin" => {
                    let (e, n) = pair(&rest)?;
                    origin = Some(UtmPoint::try_new(e, n).map_err(|err| GeoError::Parse {
                        line: line_no,
                        reason: err.to_string(),
                    })?);
                }
                "cell" => cell = Some(pair(&rest)?),
                "dims" => dims = Some(pair(&rest)?),
                other => {
                    return Err(GeoError::Parse {
                        line: line_no,
                        reason: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        let missing = |what: &str| GeoError::Parse {
            line: 0,
            reason: format!("missing `{what}` line"),
        };
        let origin = origin.ok_or_else(|| missing("origin"))?;
        let (w, h) = cell.ok_or_else(|| missing("cell"))?;
        let (rows, cols) = dims.ok_or_else(|| missing("dims"))?;
        if rows <= 0 || cols <= 0 || rows > u32::MAX as i64 || cols > u32::MAX as i64 {
            return Err(GeoError::BadGridMap);
        }
        Self::new(origin, w, h, rows as u32, cols as u32)
    }
}
