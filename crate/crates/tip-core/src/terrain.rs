//! Online terrain height-map generation from accepted SBP observations:
//! height clustering, Voronoi fill through an inverse-confidence map, and
//! the vertical root-velocity correction proposal.

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TerrainError {
    #[error("query position outside the height map")]
    OutOfBounds,
}

#[derive(Debug, Clone)]
pub struct TerrainConfig {
    /// Cell edge length (m).
    pub grid_size: f64,
    /// Total capture extent per axis (m); sets L = extent / grid_size.
    pub extent: f64,
    /// Vertical correction coefficient in p = -k * d.
    pub k: f64,
    /// Floor bound below the initial root height (m).
    pub w: f64,
    /// Half-width of the per-observation influence box (m).
    pub influence_radius: f64,
    /// Frames a newly active SBP is ignored before feeding the terrain.
    pub age_gate: usize,
    /// Minimum vertical pelvis-to-feet distance for pelvis observations (m).
    pub pelvis_foot_gap: f64,
    /// Cluster gates: maximum horizontal distance and height difference.
    pub cluster_radius: f64,
    pub cluster_height_gate: f64,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        TerrainConfig {
            grid_size: 0.1,
            extent: 40.0,
            k: 0.2,
            w: 0.05,
            influence_radius: 0.5,
            age_gate: 50,
            pelvis_foot_gap: 0.2,
            cluster_radius: 1.0,
            cluster_height_gate: 0.1,
        }
    }
}

/// A bucket of nearby SBP observations with similar heights.
#[derive(Debug, Clone)]
pub struct SbpCluster {
    pub count: usize,
    sum_height: f64,
    pub positions: Vec<Vector2<f64>>,
}

impl SbpCluster {
    /// Arithmetic mean of member heights, maintained incrementally.
    pub fn mean(&self) -> f64 {
        self.sum_height / self.count as f64
    }
}

/// Source body of a terrain observation. Hands are excluded by design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerrainSource {
    LeftFoot,
    RightFoot,
    Pelvis,
}

/// A gated SBP world position offered to the terrain generator.
#[derive(Debug, Clone, Copy)]
pub struct SbpObservation {
    pub position: Vector3<f64>,
    pub source: TerrainSource,
    /// Frames since the SBP activated.
    pub age: usize,
    /// True when the SBP deactivated before reaching the age gate; such
    /// observations are consumed once at deactivation.
    pub deactivated_early: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ObserveOutcome {
    pub cluster: usize,
    /// Vertical root correction proposal, meters per frame.
    pub proposal: f64,
    /// False when a fresh cluster was created.
    pub joined: bool,
}

/// Online terrain state: L x L height assignments (per-cell nearest cluster)
/// plus the inverse-confidence map of closest accepted-SBP distances.
#[derive(Debug, Clone)]
pub struct TerrainState {
    pub config: TerrainConfig,
    pub l: usize,
    /// World xy of the map's low corner.
    pub origin: Vector2<f64>,
    /// Height datum: assumed initial ground height minus w. Cells never
    /// drop below it.
    pub datum: f64,
    pub clusters: Vec<SbpCluster>,
    /// Closest accepted-SBP distance per cell; +inf when untouched.
    closest: Vec<f64>,
    /// Cluster backing each confident cell.
    cell_cluster: Vec<Option<u32>>,
}

impl TerrainState {
    /// `ground` is a world point whose z is the assumed initial ground
    /// height; the map is centered on its xy.
    pub fn new(config: TerrainConfig, ground: Vector3<f64>) -> Self {
        let l = (config.extent / config.grid_size).round() as usize;
        let half = config.extent / 2.0;
        let origin = Vector2::new(ground.x - half, ground.y - half);
        let datum = ground.z - config.w;
        TerrainState {
            config,
            l,
            origin,
            datum,
            clusters: Vec::new(),
            closest: vec![f64::INFINITY; l * l],
            cell_cluster: vec![None; l * l],
        }
    }

    fn cell_index(&self, xy: Vector2<f64>) -> Option<usize> {
        let gx = ((xy.x - self.origin.x) / self.config.grid_size).floor();
        let gy = ((xy.y - self.origin.y) / self.config.grid_size).floor();
        if gx < 0.0 || gy < 0.0 || gx >= self.l as f64 || gy >= self.l as f64 {
            return None;
        }
        Some(gy as usize * self.l + gx as usize)
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Vector2<f64> {
        Vector2::new(
            self.origin.x + (ix as f64 + 0.5) * self.config.grid_size,
            self.origin.y + (iy as f64 + 0.5) * self.config.grid_size,
        )
    }

    /// Cluster mean clamped to the floor datum.
    pub fn cluster_height(&self, id: usize) -> f64 {
        self.clusters[id].mean().max(self.datum)
    }

    /// Whether the observation passes the age and pelvis gates.
    pub fn accepts(&self, obs: &SbpObservation, feet_heights: &[f64]) -> bool {
        if !(obs.age >= self.config.age_gate || obs.deactivated_early) {
            return false;
        }
        if obs.source == TerrainSource::Pelvis {
            return feet_heights
                .iter()
                .all(|fz| (obs.position.z - fz).abs() > self.config.pelvis_foot_gap);
        }
        true
    }

    /// Folds an accepted observation into the cluster set, updates the
    /// Voronoi maps, and returns the vertical correction proposal.
    pub fn observe(&mut self, obs: &SbpObservation) -> ObserveOutcome {
        let xy = Vector2::new(obs.position.x, obs.position.y);
        let z = obs.position.z;
        // nearest cluster satisfying both gates
        let mut best: Option<(usize, f64)> = None;
        for (id, cl) in self.clusters.iter().enumerate() {
            if (z - cl.mean()).abs() >= self.config.cluster_height_gate {
                continue;
            }
            let dist = cl
                .positions
                .iter()
                .map(|p| (p - xy).norm())
                .fold(f64::INFINITY, f64::min);
            if dist < self.config.cluster_radius && best.map_or(true, |(_, d)| dist < d) {
                best = Some((id, dist));
            }
        }
        let outcome = match best {
            Some((id, _)) => {
                let cl = &mut self.clusters[id];
                cl.count += 1;
                cl.sum_height += z;
                cl.positions.push(xy);
                let d = z - self.cluster_height(id);
                ObserveOutcome { cluster: id, proposal: -self.config.k * d, joined: true }
            }
            None => {
                self.clusters.push(SbpCluster {
                    count: 1,
                    sum_height: z,
                    positions: vec![xy],
                });
                ObserveOutcome {
                    cluster: self.clusters.len() - 1,
                    proposal: 0.0,
                    joined: false,
                }
            }
        };
        self.voronoi_update(xy, outcome.cluster);
        outcome
    }

    /// Recomputed proposal for an SBP that remains active on a known
    /// cluster: p = -k * (current height - cluster mean).
    pub fn proposal_for(&self, cluster: usize, current_z: f64) -> f64 {
        -self.config.k * (current_z - self.cluster_height(cluster))
    }

    /// Claims every cell inside the observation's influence box whose center
    /// is closer to it than to any previously accepted observation.
    pub fn voronoi_update(&mut self, xy: Vector2<f64>, cluster: usize) {
        let r = self.config.influence_radius;
        let g = self.config.grid_size;
        let ix_lo = (((xy.x - r) - self.origin.x) / g).floor().max(0.0) as usize;
        let iy_lo = (((xy.y - r) - self.origin.y) / g).floor().max(0.0) as usize;
        let ix_hi = ((((xy.x + r) - self.origin.x) / g).ceil() as usize).min(self.l);
        let iy_hi = ((((xy.y + r) - self.origin.y) / g).ceil() as usize).min(self.l);
        for iy in iy_lo..iy_hi {
            for ix in ix_lo..ix_hi {
                let center = self.cell_center(ix, iy);
                if (center.x - xy.x).abs() > r || (center.y - xy.y).abs() > r {
                    continue;
                }
                let dist = (center - xy).norm();
                let idx = iy * self.l + ix;
                if dist < self.closest[idx] {
                    self.closest[idx] = dist;
                    self.cell_cluster[idx] = Some(cluster as u32);
                }
            }
        }
    }

    /// Height at the enclosing cell; cells never touched by an influence box
    /// sit at the floor datum.
    pub fn query_height(&self, xy: Vector2<f64>) -> Result<f64, TerrainError> {
        let idx = self.cell_index(xy).ok_or(TerrainError::OutOfBounds)?;
        Ok(match self.cell_cluster[idx] {
            Some(c) => self.cluster_height(c as usize),
            None => self.datum,
        })
    }

    /// Inverse-confidence value at the enclosing cell.
    pub fn query_confidence(&self, xy: Vector2<f64>) -> Result<f64, TerrainError> {
        let idx = self.cell_index(xy).ok_or(TerrainError::OutOfBounds)?;
        Ok(self.closest[idx])
    }

    /// Materialized L x L height map, row-major by y.
    pub fn height_map(&self) -> Vec<f64> {
        self.cell_cluster
            .iter()
            .map(|c| match c {
                Some(id) => self.cluster_height(*id as usize),
                None => self.datum,
            })
            .collect()
    }

    pub fn confidence_map(&self) -> &[f64] {
        &self.closest
    }

    pub fn cell_cluster_map(&self) -> &[Option<u32>] {
        &self.cell_cluster
    }
}

/// Vertical root correction: adds the proposal to the per-frame vertical
/// root displacement (both in meters per frame).
pub fn vertical_root_correction(v_z_step: f64, proposal: f64) -> f64 {
    v_z_step + proposal
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn state() -> TerrainState {
        let cfg = TerrainConfig { extent: 10.0, ..TerrainConfig::default() };
        TerrainState::new(cfg, Vector3::new(0.0, 0.0, 1.0))
    }

    fn obs(x: f64, y: f64, z: f64) -> SbpObservation {
        SbpObservation {
            position: Vector3::new(x, y, z),
            source: TerrainSource::LeftFoot,
            age: 60,
            deactivated_early: false,
        }
    }

    #[test]
    fn empty_state_is_floor_everywhere() {
        let st = state();
        assert_relative_eq!(st.datum, 0.95);
        assert_eq!(st.query_height(Vector2::new(0.0, 0.0)).unwrap(), 0.95);
        assert_eq!(st.query_height(Vector2::new(4.0, -4.0)).unwrap(), 0.95);
        assert!(st
            .query_height(Vector2::new(100.0, 0.0))
            .is_err());
    }

    #[test]
    fn first_observation_bootstraps() {
        let mut st = state();
        let o = obs(0.0, 0.0, 1.3);
        assert!(st.accepts(&o, &[]));
        let out = st.observe(&o);
        assert!(!out.joined);
        assert_eq!(out.proposal, 0.0);
        assert_eq!(st.clusters.len(), 1);
        assert_relative_eq!(st.query_height(Vector2::new(0.0, 0.0)).unwrap(), 1.3);
        // influence limited to 1m x 1m
        assert_relative_eq!(st.query_height(Vector2::new(3.0, 3.0)).unwrap(), st.datum);
        // confidence stores exact cell-center distances inside the box
        let c = st.query_confidence(Vector2::new(0.2, 0.0)).unwrap();
        let center_x = (0.2f64 / 0.1).floor() * 0.1 + 0.05;
        let center_y = (0.0f64 / 0.1).floor() * 0.1 + 0.05;
        assert_relative_eq!(c, (center_x * center_x + center_y * center_y).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn second_observation_joins_and_proposes() {
        let mut st = state();
        st.observe(&obs(0.0, 0.0, 1.30));
        let out = st.observe(&obs(0.3, 0.0, 1.34));
        assert!(out.joined);
        assert_eq!(st.clusters.len(), 1);
        let mean = st.clusters[0].mean();
        assert_relative_eq!(mean, 1.32, epsilon = 1e-12);
        let d = 1.34 - 1.32;
        assert_relative_eq!(out.proposal, -st.config.k * d, epsilon = 1e-12);
        // sign pulls the observation toward the mean
        assert!(out.proposal < 0.0);
    }

    #[test]
    fn stair_step_creates_new_cluster() {
        let mut st = state();
        st.observe(&obs(0.0, 0.0, 1.0));
        let out = st.observe(&obs(0.3, 0.0, 1.5));
        assert!(!out.joined);
        assert_eq!(out.proposal, 0.0);
        assert_eq!(st.clusters.len(), 2);
    }

    #[test]
    fn two_seed_voronoi_matches_bruteforce() {
        let mut st = state();
        let a = obs(-0.3, 0.0, 1.0);
        let b = obs(0.3, 0.0, 1.3);
        let ca = st.observe(&a).cluster;
        let cb = st.observe(&b).cluster;
        let seeds = [(a, ca), (b, cb)];
        for iy in 0..st.l {
            for ix in 0..st.l {
                let center = st.cell_center(ix, iy);
                // brute-force nearest covering seed, earliest wins ties
                let mut best: Option<(f64, usize)> = None;
                for (o, c) in &seeds {
                    let dx = (center.x - o.position.x).abs();
                    let dy = (center.y - o.position.y).abs();
                    if dx > st.config.influence_radius || dy > st.config.influence_radius {
                        continue;
                    }
                    let d = (center - Vector2::new(o.position.x, o.position.y)).norm();
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, *c));
                    }
                }
                let got = st.query_height(center).unwrap();
                let expect = match best {
                    Some((_, c)) => st.cluster_height(c),
                    None => st.datum,
                };
                assert_eq!(got, expect, "cell ({ix},{iy})");
            }
        }
    }

    #[test]
    fn reobservation_is_idempotent() {
        let mut st = state();
        st.observe(&obs(0.0, 0.0, 1.3));
        let h_before = st.height_map();
        let c_before = st.confidence_map().to_vec();
        // same location, cluster mean unchanged only if height matches
        st.observe(&obs(0.0, 0.0, 1.3));
        assert_eq!(st.height_map(), h_before);
        assert_eq!(st.confidence_map(), &c_before[..]);
    }

    #[test]
    fn confidence_is_nonincreasing() {
        let mut st = state();
        let probe = Vector2::new(0.0, 0.0);
        let mut last = st.query_confidence(probe).unwrap();
        for i in 0..10 {
            st.observe(&obs(0.4 - 0.05 * i as f64, 0.1, 1.0));
            let now = st.query_confidence(probe).unwrap();
            assert!(now <= last);
            last = now;
        }
    }

    #[test]
    fn cluster_mean_incremental_matches_batch() {
        let mut st = state();
        let heights = [1.0, 1.02, 0.98, 1.05, 1.01];
        for (i, h) in heights.iter().enumerate() {
            st.observe(&obs(0.05 * i as f64, 0.0, *h));
        }
        assert_eq!(st.clusters.len(), 1);
        let batch: f64 = heights.iter().sum::<f64>() / heights.len() as f64;
        assert!((st.clusters[0].mean() - batch).abs() < 1e-12);
    }

    #[test]
    fn floor_bound_clamps_cluster_height() {
        let mut st = state();
        st.observe(&obs(0.0, 0.0, 0.2)); // far below datum of 0.95
        let h = st.query_height(Vector2::new(0.0, 0.0)).unwrap();
        assert_eq!(h, st.datum);
        for v in st.height_map() {
            assert!(v >= st.datum);
        }
    }

    #[test]
    fn pelvis_gate() {
        let st = state();
        let mut o = obs(0.0, 0.0, 1.0);
        o.source = TerrainSource::Pelvis;
        assert!(!st.accepts(&o, &[0.95, 1.05]));
        assert!(st.accepts(&o, &[0.5, 0.6]));
    }

    #[test]
    fn age_gate() {
        let st = state();
        let mut o = obs(0.0, 0.0, 1.0);
        o.age = 10;
        assert!(!st.accepts(&o, &[]));
        o.deactivated_early = true;
        assert!(st.accepts(&o, &[]));
        o.deactivated_early = false;
        o.age = 50;
        assert!(st.accepts(&o, &[]));
    }

    #[test]
    fn vertical_correction_arithmetic() {
        assert_eq!(vertical_root_correction(0.02, 0.0), 0.02);
        // d = +0.05, k = 0.2 -> p = -0.01
        let st = state();
        let mut st = st;
        st.observe(&obs(0.0, 0.0, 1.0));
        let p = st.proposal_for(0, 1.05);
        assert_relative_eq!(p, -0.01, epsilon = 1e-12);
        assert_relative_eq!(vertical_root_correction(0.0, p), -0.01, epsilon = 1e-12);
    }

    #[test]
    fn repeated_correction_contracts_geometrically() {
        let mut st = state();
        st.observe(&obs(0.0, 0.0, 1.0));
        let mean = st.cluster_height(0);
        let mut z = mean + 0.1;
        for _ in 0..25 {
            let p = st.proposal_for(0, z);
            z += p;
        }
        assert!((z - mean).abs() < 0.01, "z={z} mean={mean}");
        // contraction factor is exactly (1 - k) per applied proposal
        let mut z2 = mean + 0.1;
        let p = st.proposal_for(0, z2);
        z2 += p;
        assert_relative_eq!(z2 - mean, 0.1 * (1.0 - st.config.k), epsilon = 1e-12);
    }
}
