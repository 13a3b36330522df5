//! Straight-highway map model and its discretized lane graph.
//!
//! The road is cut along `x` into blocks of `block_length` meters. A lane node
//! is the center of one block in one lane. Each vehicle sees at most three
//! nodes: the next block ahead in its own lane, and the blocks beside that one
//! in the adjacent lanes on its side of the divider.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Point;

/// Travel direction along the `x` axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Toward `+x`.
    Positive,
    /// Toward `-x`.
    Negative,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Positive => 1.0,
            Direction::Negative => -1.0,
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            Direction::Positive => Direction::Negative,
            Direction::Negative => Direction::Positive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    pub x_min: f64,
    pub x_max: f64,
    /// Lane centers ordered bottom to top.
    pub lane_centers_y: Vec<f64>,
    pub divider_y: f64,
    #[serde(default = "default_block_length")]
    pub block_length: f64,
    /// One entry per lane, same order as `lane_centers_y`.
    pub lane_direction: Vec<Direction>,
}

fn default_block_length() -> f64 {
    5.0
}

impl Default for MapSpec {
    /// Four 3.5 m lanes split by a divider at `y = 0`; the lower pair flows
    /// toward `+x`, the upper pair toward `-x`.
    fn default() -> Self {
        MapSpec {
            x_min: 0.0,
            x_max: 500.0,
            lane_centers_y: vec![-5.25, -1.75, 1.75, 5.25],
            divider_y: 0.0,
            block_length: default_block_length(),
            lane_direction: vec![
                Direction::Positive,
                Direction::Positive,
                Direction::Negative,
                Direction::Negative,
            ],
        }
    }
}

impl MapSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Parameter(format!("map: {msg}")));
        if !(self.block_length > 0.0) || !self.block_length.is_finite() {
            return bad("block_length must be positive");
        }
        if !(self.x_max > self.x_min) || !self.x_min.is_finite() || !self.x_max.is_finite() {
            return bad("x_max must exceed x_min");
        }
        if self.lane_centers_y.is_empty() {
            return bad("at least one lane is required");
        }
        if self.lane_direction.len() != self.lane_centers_y.len() {
            return bad("lane_direction must have one entry per lane");
        }
        if self.lane_centers_y.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("lane centers must be strictly increasing");
        }
        if self.lane_centers_y.iter().any(|&y| y == self.divider_y) {
            return bad("no lane center may lie on the divider");
        }
        let mut below = None;
        let mut above = None;
        for (lane, &dir) in self.lane_direction.iter().enumerate() {
            let side = if self.lane_centers_y[lane] < self.divider_y {
                &mut below
            } else {
                &mut above
            };
            match *side {
                None => *side = Some(dir),
                Some(d) if d != dir => return bad("lanes on one side of the divider must share a direction"),
                _ => {}
            }
        }
        if let (Some(b), Some(a)) = (below, above) {
            if a == b {
                return bad("opposite sides of the divider must flow in opposite directions");
            }
        }
        Ok(())
    }

    pub fn lane_count(&self) -> usize {
        self.lane_centers_y.len()
    }

    /// Nominal lane width: the smallest gap between lane centers, or 3.5 m
    /// for a single-lane map.
    pub fn lane_width(&self) -> f64 {
        let gap = self
            .lane_centers_y
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        if gap.is_finite() {
            gap
        } else {
            3.5
        }
    }

    /// Bottom and top edges of the paved lane band.
    pub fn road_band(&self) -> (f64, f64) {
        let half = 0.5 * self.lane_width();
        (
            self.lane_centers_y[0] - half,
            self.lane_centers_y[self.lane_count() - 1] + half,
        )
    }

    /// Nearest lane by `|y - center|`; ties go to the lower index.
    pub fn nearest_lane(&self, y: f64) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (lane, &c) in self.lane_centers_y.iter().enumerate() {
            let dist = (y - c).abs();
            if dist < best_dist {
                best = lane;
                best_dist = dist;
            }
        }
        best
    }

    fn below_divider(&self, lane: usize) -> bool {
        self.lane_centers_y[lane] < self.divider_y
    }

    fn same_side(&self, a: usize, b: usize) -> bool {
        self.below_divider(a) == self.below_divider(b)
    }
}

/// Result of mapping an `x` coordinate onto the block grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIndex {
    pub index: usize,
    /// The coordinate fell outside `[x_min, x_max)` and was clamped.
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct BlockIndexer {
    x_min: f64,
    block_length: f64,
    blocks: usize,
}

/// Builds the block indexer for a validated map.
pub fn discretize_map(map: &MapSpec) -> Result<BlockIndexer> {
    map.validate()?;
    let blocks = ((map.x_max - map.x_min) / map.block_length).ceil() as usize;
    Ok(BlockIndexer {
        x_min: map.x_min,
        block_length: map.block_length,
        blocks: blocks.max(1),
    })
}

impl BlockIndexer {
    pub fn block_count(&self) -> usize {
        self.blocks
    }

    pub fn block_of(&self, x: f64) -> BlockIndex {
        let raw = ((x - self.x_min) / self.block_length).floor();
        if raw < 0.0 || raw.is_nan() {
            BlockIndex {
                index: 0,
                clamped: true,
            }
        } else if raw >= self.blocks as f64 {
            BlockIndex {
                index: self.blocks - 1,
                clamped: true,
            }
        } else {
            BlockIndex {
                index: raw as usize,
                clamped: false,
            }
        }
    }

    /// Center of `block` in `lane`.
    pub fn node(&self, map: &MapSpec, block: usize, lane: usize) -> Point {
        [
            self.x_min + (block as f64 + 0.5) * self.block_length,
            map.lane_centers_y[lane],
        ]
    }
}

/// Slot order inside a [`LaneTuple`].
pub const FRONT: usize = 0;
pub const LEFT: usize = 1;
pub const RIGHT: usize = 2;

/// Permissible front/left/right lane nodes for one vehicle at one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LaneTuple {
    pub nodes: [Option<Point>; 3],
}

impl LaneTuple {
    pub fn front(&self) -> Option<Point> {
        self.nodes[FRONT]
    }

    pub fn left(&self) -> Option<Point> {
        self.nodes[LEFT]
    }

    pub fn right(&self) -> Option<Point> {
        self.nodes[RIGHT]
    }

    pub fn mask(&self) -> [bool; 3] {
        [
            self.nodes[0].is_some(),
            self.nodes[1].is_some(),
            self.nodes[2].is_some(),
        ]
    }
}

/// Lane nodes reachable from `position`.
///
/// The vehicle is assigned to its nearest lane. `front` is the next block in
/// that lane's travel direction; `left`/`right` are taken relative to the
/// travel direction, at the same block as `front`, and only in lanes on the
/// same side of the divider. Past the end of the road every slot is empty.
pub fn lane_nodes_for(position: Point, map: &MapSpec, indexer: &BlockIndexer) -> LaneTuple {
    let lane = map.nearest_lane(position[1]);
    let dir = map.lane_direction[lane];
    let block = indexer.block_of(position[0]).index as isize;
    let front_block = block + dir.sign() as isize;
    if front_block < 0 || front_block >= indexer.block_count() as isize {
        return LaneTuple::default();
    }
    let front_block = front_block as usize;

    // Lane indices grow with y; "left" of a +x vehicle is +y.
    let (left_lane, right_lane) = match dir {
        Direction::Positive => (lane.checked_add(1), lane.checked_sub(1)),
        Direction::Negative => (lane.checked_sub(1), lane.checked_add(1)),
    };
    let neighbor_node = |adj: Option<usize>| {
        adj.filter(|&l| l < map.lane_count() && map.same_side(l, lane))
            .map(|l| indexer.node(map, front_block, l))
    };

    LaneTuple {
        nodes: [
            Some(indexer.node(map, front_block, lane)),
            neighbor_node(left_lane),
            neighbor_node(right_lane),
        ],
    }
}
