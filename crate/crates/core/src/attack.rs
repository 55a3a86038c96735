//! The driver-location harvesting attack mounted by an adversary rider.
//!
//! From the five decrypted blinded values of one comparison round the rider
//! takes pairwise differences of the four corner values, which cancels the
//! additive mask `r` and leaves multiples of `e`. Their GCD, after dividing
//! out factors the grid corners contribute on their own (computable offline
//! from the published map), recovers `e`; the known comparand `D' = 2*D_0 -
//! delta` then yields `r`, the corner distances unblind exactly, and
//! rectangle-corner multilateration plus the rider-circle filter and a
//! nearest-road tiebreak pin the driver's position.
//!
//! Two recovery modes are provided. `GcdReduce` divides the difference GCD
//! by the offline grid factor and reports a failure whenever the result is a
//! strict multiple of the true `e` (detected by a negative remainder or an
//! inexact unblinding). `DivisorSearch` instead walks the divisors of the
//! difference GCD in decreasing order and keeps the first one under which
//! the whole tuple validates.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use num_integer::Integer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{
    candidate_points, squared_distance, GridId, GridMap, GridRect, SquaredDistance, UtmPoint,
};
use crate::protocol::{DriverId, ProtocolMode, SessionTranscript, SessionTruth};
use crate::roadnet::RoadNetwork;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttackError {
    #[error("transcript was produced by the basic protocol; there is nothing to unblind")]
    BasicTranscript,
    #[error("grid {0} is missing from the factor table")]
    UnknownGrid(GridId),
    #[error("all six pairwise differences are zero")]
    DegenerateDiffs,
    #[error("difference GCD is not divisible by the offline grid factor")]
    FactorMismatch,
    #[error("blinded comparand minus e*D' is negative")]
    NegativeRemainder,
    #[error("blinded values are not an exact affine image under the recovered (e, r)")]
    UnblindMismatch,
    #[error("no divisor of the difference GCD passes validation")]
    NoValidDivisor,
}

/// The six pairwise differences `v_i - v_j` (i < j) of the four decrypted
/// blinded corner values, in the canonical order of the received values.
/// Each equals `e * (D_a - D_b)` for some unknown corner pair `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffSet {
    pub diffs: [i64; 6],
}

impl DiffSet {
    /// GCD of the nonzero differences; `None` when all six vanish.
    pub fn gcd(&self) -> Option<u64> {
        let g = self
            .diffs
            .iter()
            .map(|d| d.unsigned_abs())
            .fold(0u64, |acc, d| acc.gcd(&d));
        (g != 0).then_some(g)
    }
}

pub fn pairwise_diffs(values: &[i64; 4]) -> DiffSet {
    let mut diffs = [0i64; 6];
    let mut k = 0;
    for i in 0..4 {
        for j in i + 1..4 {
            diffs[k] = values[i] - values[j];
            k += 1;
        }
    }
    DiffSet { diffs }
}

/// Per-grid factors that corner coordinates contribute to every pairwise
/// distance difference, precomputed once from the published map. For the
/// unordered corner pair `(a, b)` the factor is
/// `gcd(x_a - x_b, y_a - y_b) * gcd(2, x_a + x_b, y_a + y_b)`;
/// the per-grid `combined` value is the GCD of the six pair factors, the
/// largest divisor guaranteed under any assignment of differences to pairs.
#[derive(Debug, Clone)]
pub struct GridFactorTable {
    pairs: HashMap<GridId, [u64; 6]>,
    combined: HashMap<GridId, u64>,
}

pub fn pair_factor(a: UtmPoint, b: UtmPoint) -> u64 {
    let g = (a.easting - b.easting).gcd(&(a.northing - b.northing)) as u64;
    let even = (a.easting + b.easting) % 2 == 0 && (a.northing + b.northing) % 2 == 0;
    g * if even { 2 } else { 1 }
}

impl GridFactorTable {
    pub fn new(map: &GridMap) -> Self {
        let mut pairs = HashMap::new();
        let mut combined = HashMap::new();
        for id in map.grid_ids() {
            let rect = map.cell(id).expect("iterating existing ids");
            let fs = Self::rect_factors(&rect);
            combined.insert(id, fs.iter().fold(0u64, |acc, f| acc.gcd(f)));
            pairs.insert(id, fs);
        }
        Self { pairs, combined }
    }

    /// Pair factors in the canonical unordered corner order:
    /// (ll,lu), (ll,rl), (ll,ru), (lu,rl), (lu,ru), (rl,ru).
    pub fn rect_factors(rect: &GridRect) -> [u64; 6] {
        let corners = [rect.ll, rect.lu, rect.rl, rect.ru];
        let mut fs = [0u64; 6];
        let mut k = 0;
        for i in 0..4 {
            for j in i + 1..4 {
                fs[k] = pair_factor(corners[i], corners[j]);
                k += 1;
            }
        }
        fs
    }

    pub fn pair_factors(&self, id: GridId) -> Option<[u64; 6]> {
        self.pairs.get(&id).copied()
    }

    pub fn combined(&self, id: GridId) -> Option<u64> {
        self.combined.get(&id).copied()
    }
}

/// Direct recovery: GCD of the observed differences divided by the offline
/// grid factor. The result may still be a strict multiple of the true `e`,
/// which downstream checks surface as a failure.
pub fn recover_e_gcd(diffs: &DiffSet, grid_factor: u64) -> Result<u64, AttackError> {
    let g = diffs.gcd().ok_or(AttackError::DegenerateDiffs)?;
    debug_assert!(grid_factor >= 1);
    if g % grid_factor != 0 {
        return Err(AttackError::FactorMismatch);
    }
    Ok(g / grid_factor)
}

/// Validated recovery: first divisor of the difference GCD, in decreasing
/// order, accepted by `validate`.
pub fn recover_e_divisor_search(
    diffs: &DiffSet,
    mut validate: impl FnMut(u64) -> bool,
) -> Result<u64, AttackError> {
    let g = diffs.gcd().ok_or(AttackError::DegenerateDiffs)?;
    let mut divs = divisors(g);
    divs.sort_unstable_by(|a, b| b.cmp(a));
    divs.into_iter()
        .find(|&d| validate(d))
        .ok_or(AttackError::NoValidDivisor)
}

fn divisors(n: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut d = 1;
    while d <= n.isqrt() {
        if n.is_multiple_of(d) {
            out.push(d);
            if d != n / d {
                out.push(n / d);
            }
        }
        d += 1;
    }
    out
}

/// Additive mask from the known comparand: `r = V' - e * D'`. A negative
/// value proves the recovered `e` is too large.
pub fn recover_r(v_prime: i64, e: u64, d_prime: i64) -> Result<u64, AttackError> {
    let r = v_prime as i128 - e as i128 * d_prime as i128;
    u64::try_from(r).map_err(|_| AttackError::NegativeRemainder)
}

/// Strips the mask from the four blinded corner values. Fails unless every
/// value is exactly `e * D + r` with a non-negative integer `D`.
pub fn unblind(values: &[i64; 4], e: u64, r: u64) -> Result<[SquaredDistance; 4], AttackError> {
    debug_assert!(e >= 1);
    let mut out = [SquaredDistance(0); 4];
    for (slot, &v) in out.iter_mut().zip(values) {
        let n = v as i128 - r as i128;
        if n < 0 || n % e as i128 != 0 {
            return Err(AttackError::UnblindMismatch);
        }
        let d = n / e as i128;
        let d = u64::try_from(d).map_err(|_| AttackError::UnblindMismatch)?;
        *slot = SquaredDistance(d);
    }
    Ok(out)
}

/// Union of the candidate orbits over every searched grid, deduplicated.
pub fn candidate_union(ds: &[SquaredDistance; 4], grids: &[GridRect]) -> Vec<UtmPoint> {
    let mut set = BTreeSet::new();
    for g in grids {
        set.extend(candidate_points(g, ds));
    }
    set.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocateFailure {
    /// No candidate position survives the rider-circle filter.
    NoCandidate,
    /// Two candidates are closer to a road than the tiebreak can separate.
    Ambiguous,
}

/// Attack tuning knobs. The rider-circle filter is exact by default; the
/// tolerance exists only for perturbed-input experiments. Ties within
/// `ambiguity_threshold_m` of road distance are reported as failures rather
/// than guessed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub circle_tolerance: u64,
    pub ambiguity_threshold_m: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mode: AttackMode::GcdReduce,
            circle_tolerance: 0,
            ambiguity_threshold_m: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    /// GCD of the differences divided by the offline grid factor; multiples
    /// of the true blinding factor are reported as failures.
    GcdReduce,
    /// Decreasing divisor enumeration with full tuple validation.
    DivisorSearch,
}

impl AttackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackMode::GcdReduce => "gcd-reduce",
            AttackMode::DivisorSearch => "divisor-search",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gcd-reduce" => Some(AttackMode::GcdReduce),
            "divisor-search" => Some(AttackMode::DivisorSearch),
            _ => None,
        }
    }
}

/// Picks the driver position from recovered corner distances: keep the
/// candidates at exactly the known rider-driver distance, then let road
/// proximity break ties.
pub fn locate_driver(
    ds: &[SquaredDistance; 4],
    adjacent_grids: &[GridRect],
    rider: UtmPoint,
    delta: u64,
    roads: &RoadNetwork,
    cfg: &AttackConfig,
) -> Result<UtmPoint, LocateFailure> {
    let on_circle: Vec<UtmPoint> = candidate_union(ds, adjacent_grids)
        .into_iter()
        .filter(|&p| {
            squared_distance(rider, p).value().abs_diff(delta) <= cfg.circle_tolerance
        })
        .collect();
    match on_circle.len() {
        0 => Err(LocateFailure::NoCandidate),
        1 => Ok(on_circle[0]),
        _ => {
            let mut ranked: Vec<(f64, UtmPoint)> = on_circle
                .into_iter()
                .map(|p| {
                    let d = roads.nearest_road_distance(p).unwrap_or(f64::INFINITY);
                    (d, p)
                })
                .collect();
            ranked.sort_by(|a, b| a.partial_cmp(b).expect("road distances are not NaN"));
            if ranked[1].0 - ranked[0].0 < cfg.ambiguity_threshold_m {
                Err(LocateFailure::Ambiguous)
            } else {
                Ok(ranked[0].1)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryStatus {
    Recovered,
    FailureEMultiple,
    FailureRNegative,
    FailureNoCandidate,
    FailureAmbiguous,
}

impl RecoveryStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RecoveryStatus::Recovered => "recovered",
            RecoveryStatus::FailureEMultiple => "failure-e-multiple",
            RecoveryStatus::FailureRNegative => "failure-r-negative",
            RecoveryStatus::FailureNoCandidate => "failure-no-candidate",
            RecoveryStatus::FailureAmbiguous => "failure-ambiguous",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "recovered" => Some(RecoveryStatus::Recovered),
            "failure-e-multiple" => Some(RecoveryStatus::FailureEMultiple),
            "failure-r-negative" => Some(RecoveryStatus::FailureRNegative),
            "failure-no-candidate" => Some(RecoveryStatus::FailureNoCandidate),
            "failure-ambiguous" => Some(RecoveryStatus::FailureAmbiguous),
            _ => None,
        }
    }
}

/// Per-driver attack result. The location is present exactly when the
/// status is `Recovered`; the recovered `(e, r)` are kept on failures too so
/// a scoring harness can audit them against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryOutcome {
    pub driver_id: DriverId,
    pub status: RecoveryStatus,
    pub location: Option<UtmPoint>,
    pub recovered_e: Option<u64>,
    pub recovered_r: Option<u64>,
}

impl RecoveryOutcome {
    fn failed(driver_id: DriverId, status: RecoveryStatus, e: Option<u64>, r: Option<u64>) -> Self {
        Self {
            driver_id,
            status,
            location: None,
            recovered_e: e,
            recovered_r: r,
        }
    }
}

/// Runs the whole pipeline for one driver record.
#[allow(clippy::too_many_arguments)]
fn harvest_record(
    driver_id: DriverId,
    v_prime: i64,
    v_corners: &[i64; 4],
    d_prime: i64,
    delta: u64,
    grid_factor: u64,
    adjacent: &[GridRect],
    rider: UtmPoint,
    roads: &RoadNetwork,
    cfg: &AttackConfig,
) -> RecoveryOutcome {
    let diffs = pairwise_diffs(v_corners);

    let (e, r, ds) = match cfg.mode {
        AttackMode::GcdReduce => {
            let e = match recover_e_gcd(&diffs, grid_factor) {
                Ok(e) => e,
                Err(_) => {
                    return RecoveryOutcome::failed(
                        driver_id,
                        RecoveryStatus::FailureNoCandidate,
                        None,
                        None,
                    )
                }
            };
            let r = match recover_r(v_prime, e, d_prime) {
                Ok(r) => r,
                Err(_) => {
                    return RecoveryOutcome::failed(
                        driver_id,
                        RecoveryStatus::FailureRNegative,
                        Some(e),
                        None,
                    )
                }
            };
            let ds = match unblind(v_corners, e, r) {
                Ok(ds) => ds,
                Err(_) => {
                    return RecoveryOutcome::failed(
                        driver_id,
                        RecoveryStatus::FailureEMultiple,
                        Some(e),
                        Some(r),
                    )
                }
            };
            (e, r, ds)
        }
        AttackMode::DivisorSearch => {
            let accept = |cand: u64| -> Option<(u64, [SquaredDistance; 4])> {
                let r = recover_r(v_prime, cand, d_prime).ok()?;
                let ds = unblind(v_corners, cand, r).ok()?;
                let consistent = candidate_union(&ds, adjacent).into_iter().any(|p| {
                    squared_distance(rider, p).value().abs_diff(delta) <= cfg.circle_tolerance
                });
                consistent.then_some((r, ds))
            };
            let found = recover_e_divisor_search(&diffs, |cand| accept(cand).is_some());
            match found {
                Ok(e) => {
                    let (r, ds) = accept(e).expect("validator just accepted this divisor");
                    (e, r, ds)
                }
                Err(_) => {
                    return RecoveryOutcome::failed(
                        driver_id,
                        RecoveryStatus::FailureNoCandidate,
                        None,
                        None,
                    )
                }
            }
        }
    };

    match locate_driver(&ds, adjacent, rider, delta, roads, cfg) {
        Ok(p) => RecoveryOutcome {
            driver_id,
            status: RecoveryStatus::Recovered,
            location: Some(p),
            recovered_e: Some(e),
            recovered_r: Some(r),
        },
        Err(LocateFailure::NoCandidate) => RecoveryOutcome::failed(
            driver_id,
            RecoveryStatus::FailureNoCandidate,
            Some(e),
            Some(r),
        ),
        Err(LocateFailure::Ambiguous) => RecoveryOutcome::failed(
            driver_id,
            RecoveryStatus::FailureAmbiguous,
            Some(e),
            Some(r),
        ),
    }
}

/// Applies the attack to every driver in a session transcript
/// independently; deterministic given the transcript.
pub fn harvest_session(
    transcript: &SessionTranscript,
    grids: &GridMap,
    factors: &GridFactorTable,
    roads: &RoadNetwork,
    cfg: &AttackConfig,
) -> Result<Vec<RecoveryOutcome>, AttackError> {
    if transcript.records.is_empty() {
        return Ok(Vec::new());
    }
    if transcript.mode != ProtocolMode::Enhanced {
        return Err(AttackError::BasicTranscript);
    }
    let adjacent: Vec<GridRect> = grids
        .cells_within_radius(transcript.rider_grid, transcript.search_radius.max(1))
        .into_iter()
        .map(|id| grids.cell(id).expect("searched ids exist"))
        .collect();
    let d0 = transcript.d0().expect("non-empty records") as i64;

    let mut outcomes = Vec::with_capacity(transcript.records.len());
    for rec in &transcript.records {
        let view = rec.blinded.ok_or(AttackError::BasicTranscript)?;
        let grid_factor = factors
            .combined(rec.grid_id)
            .ok_or(AttackError::UnknownGrid(rec.grid_id))?;
        let d_prime = 2 * d0 - rec.distance as i64;
        outcomes.push(harvest_record(
            rec.driver_id,
            view.v_prime,
            &view.v_corners,
            d_prime,
            rec.distance,
            grid_factor,
            &adjacent,
            transcript.rider_location,
            roads,
            cfg,
        ));
    }
    Ok(outcomes)
}

/// Writes one outcome record per line: driver id, status, recovered
/// coordinates, true coordinates, recovered vs true `(e, r)`. Absent fields
/// are `-`; truth columns need the simulation's ground truth.
pub fn save_outcomes<W: Write>(
    outcomes: &[RecoveryOutcome],
    truth: Option<&SessionTruth>,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(
        w,
        "# driver status rec_e rec_n true_e true_n e_rec e_true r_rec r_true"
    )?;
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    for o in outcomes {
        let truth_rec = truth.and_then(|t| t.for_driver(o.driver_id));
        writeln!(
            w,
            "{} {} {} {} {} {} {} {} {} {}",
            o.driver_id,
            o.status.as_str(),
            opt(o.location.map(|p| p.easting.to_string())),
            opt(o.location.map(|p| p.northing.to_string())),
            opt(truth_rec.map(|t| t.location.easting.to_string())),
            opt(truth_rec.map(|t| t.location.northing.to_string())),
            opt(o.recovered_e.map(|e| e.to_string())),
            opt(truth_rec.and_then(|t| t.secret).map(|s| s.e.to_string())),
            opt(o.recovered_r.map(|r| r.to_string())),
            opt(truth_rec.and_then(|t| t.secret).map(|s| s.r.to_string())),
        )?;
    }
    Ok(())
}
