//! Scripted two-vehicle highway scenes with per-timestep ground truth.
//!
//! Each vehicle follows a longitudinal speed profile along its lane direction
//! plus a lateral offset built from smooth cosine lane shifts. Anomalies are
//! scripted deviations from those primitives: abrupt cut-ins, reversal,
//! lateral oscillation and so on. Gaussian noise is added to every position.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Direction, Label, MapSpec, Point, Scene, Track};

pub const DEFAULT_DT: f64 = 0.1;
pub const DEFAULT_NOISE_STD: f64 = 0.005;
/// Braking steps before a wrong-way reversal; labeled `ignored`.
const BRAKE_STEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    SideBySide,
    Overtaking,
    Following,
    OppositeDirections,
    AggressiveOvertaking,
    PushingAside,
    Tailgating,
    OffRoad,
    WrongWay,
    Skidding,
    LeftSpreading,
    RightSpreading,
    Reeving,
}

impl ScenarioKind {
    pub const NORMAL: [ScenarioKind; 4] = [
        ScenarioKind::SideBySide,
        ScenarioKind::Overtaking,
        ScenarioKind::Following,
        ScenarioKind::OppositeDirections,
    ];

    pub const ANOMALOUS: [ScenarioKind; 9] = [
        ScenarioKind::AggressiveOvertaking,
        ScenarioKind::PushingAside,
        ScenarioKind::Tailgating,
        ScenarioKind::OffRoad,
        ScenarioKind::WrongWay,
        ScenarioKind::Skidding,
        ScenarioKind::LeftSpreading,
        ScenarioKind::RightSpreading,
        ScenarioKind::Reeving,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::SideBySide => "side_by_side",
            ScenarioKind::Overtaking => "overtaking",
            ScenarioKind::Following => "following",
            ScenarioKind::OppositeDirections => "opposite_directions",
            ScenarioKind::AggressiveOvertaking => "aggressive_overtaking",
            ScenarioKind::PushingAside => "pushing_aside",
            ScenarioKind::Tailgating => "tailgating",
            ScenarioKind::OffRoad => "off_road",
            ScenarioKind::WrongWay => "wrong_way",
            ScenarioKind::Skidding => "skidding",
            ScenarioKind::LeftSpreading => "left_spreading",
            ScenarioKind::RightSpreading => "right_spreading",
            ScenarioKind::Reeving => "reeving",
        }
    }

    pub fn is_anomalous(self) -> bool {
        Self::ANOMALOUS.contains(&self)
    }

    /// Anomalies that persist until the end of the scene once started.
    fn runs_to_end(self) -> bool {
        matches!(self, ScenarioKind::OffRoad | ScenarioKind::WrongWay)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::NORMAL
            .iter()
            .chain(&Self::ANOMALOUS)
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown scenario kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Number of timesteps `T`.
    pub duration: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Abnormal span `[start, end)`; drawn from the seed when absent.
    pub anomaly_window: Option<(usize, usize)>,
    /// Width of the `ignored` band on each side of the abnormal span.
    pub ignored_width: usize,
    pub timestep_dt: f64,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, duration: usize, seed: u64) -> Self {
        ScenarioSpec {
            kind,
            duration,
            noise_std: DEFAULT_NOISE_STD,
            seed,
            anomaly_window: None,
            ignored_width: 1,
            timestep_dt: DEFAULT_DT,
        }
    }
}

/// Longitudinal and lateral script of one vehicle.
struct Plan {
    direction: Direction,
    x0: f64,
    /// Signed speed along `direction` during step `t -> t + 1`.
    speed: Vec<f64>,
    /// Lateral position at each step.
    y: Vec<f64>,
}

impl Plan {
    fn cruise(direction: Direction, x0: f64, speed: f64, y: f64, steps: usize) -> Self {
        Plan {
            direction,
            x0,
            speed: vec![speed; steps],
            y: vec![y; steps],
        }
    }

    /// Adds `delta` to the lateral position, blended in over `len` steps
    /// starting at `from` with a half-cosine profile.
    fn shift(&mut self, from: usize, len: usize, delta: f64) {
        for (t, y) in self.y.iter_mut().enumerate().skip(from) {
            let tau = ((t - from) as f64 / len.max(1) as f64).min(1.0);
            *y += delta * 0.5 * (1.0 - (PI * tau).cos());
        }
    }

    /// Adds a constant acceleration `accel` (m/s^2 along `direction`) to the
    /// speed for steps in `[from, to)`, holding the reached speed afterwards.
    fn accelerate(&mut self, from: usize, to: usize, accel: f64, dt: f64) {
        for t in from..self.speed.len() {
            let gained = if t < to {
                accel * dt * (t - from) as f64 + 0.5 * accel * dt
            } else {
                accel * dt * (to - from) as f64
            };
            self.speed[t] += gained;
        }
    }

    fn positions(&self, dt: f64) -> Vec<Point> {
        let sign = self.direction.sign();
        let mut x = self.x0;
        self.y
            .iter()
            .enumerate()
            .map(|(t, &y)| {
                let p = [x, y];
                x += sign * self.speed[t] * dt;
                p
            })
            .collect()
    }

    /// Position along the direction of travel at step `t`.
    fn progress(&self, t: usize, dt: f64) -> f64 {
        self.speed[..t].iter().sum::<f64>() * dt
    }
}

/// Lanes flowing in `direction`, ordered from the outermost (rightmost in
/// travel direction) to the innermost.
fn lanes_toward(map: &MapSpec, direction: Direction) -> Vec<usize> {
    let mut lanes: Vec<usize> = (0..map.lane_count()).filter(|&i| map.lane_direction[i] == direction).collect();
    // Left of travel is +y for +x traffic and -y for -x traffic.
    lanes.sort_by(|&a, &b| {
        let (ya, yb) = (map.lane_centers_y[a], map.lane_centers_y[b]);
        match direction {
            Direction::Positive => ya.total_cmp(&yb),
            Direction::Negative => yb.total_cmp(&ya),
        }
    });
    lanes
}

/// Lateral unit vector pointing to the driver's left.
fn left_of(direction: Direction) -> f64 {
    direction.sign()
}

struct Ctx<'a> {
    map: &'a MapSpec,
    rng: ChaCha8Rng,
    steps: usize,
    dt: f64,
}

impl Ctx<'_> {
    fn speed(&mut self) -> f64 {
        self.rng.random_range(20.0..30.0)
    }

    fn direction(&mut self) -> Direction {
        if self.rng.random_bool(0.5) {
            Direction::Positive
        } else {
            Direction::Negative
        }
    }

    /// Start coordinate leaving room to travel toward `direction`.
    fn entry(&mut self, direction: Direction) -> f64 {
        let offset = self.rng.random_range(10.0..60.0);
        match direction {
            Direction::Positive => self.map.x_min + offset,
            Direction::Negative => self.map.x_max - offset,
        }
    }

    fn lane_y(&self, lane: usize) -> f64 {
        self.map.lane_centers_y[lane]
    }

    fn pick_lane(&mut self, direction: Direction) -> Result<usize> {
        let lanes = lanes_toward(self.map, direction);
        if lanes.is_empty() {
            return Err(Error::Parameter(format!("map has no lane toward {direction:?}")));
        }
        let i = self.rng.random_range(0..lanes.len());
        Ok(lanes[i])
    }

    /// Same-side lane pair `(outer, inner)` for `direction`, if any.
    fn lane_pair(&self, direction: Direction) -> Option<(usize, usize)> {
        let lanes = lanes_toward(self.map, direction);
        (lanes.len() >= 2).then(|| (lanes[0], lanes[1]))
    }

    /// Any vehicle cruising normally somewhere else on the road.
    fn bystander(&mut self, direction: Direction, avoid_lane: usize) -> Result<Plan> {
        let dir = if self.rng.random_bool(0.5) { direction } else { direction.reversed() };
        let mut lane = self.pick_lane(dir)?;
        if lane == avoid_lane {
            if let Some(other) = lanes_toward(self.map, dir).into_iter().find(|&l| l != avoid_lane) {
                lane = other;
            } else {
                let opposite = dir.reversed();
                return self.bystander_in(opposite);
            }
        }
        let x0 = self.entry(dir);
        let v = self.speed();
        Ok(Plan::cruise(dir, x0, v, self.lane_y(lane), self.steps))
    }

    fn bystander_in(&mut self, dir: Direction) -> Result<Plan> {
        let lane = self.pick_lane(dir)?;
        let x0 = self.entry(dir);
        let v = self.speed();
        Ok(Plan::cruise(dir, x0, v, self.lane_y(lane), self.steps))
    }
}

/// Default abnormal span for `kind` in a scene of `steps` timesteps.
fn default_window<R: Rng>(kind: ScenarioKind, steps: usize, rng: &mut R) -> (usize, usize) {
    if kind == ScenarioKind::WrongWay {
        let lo = (BRAKE_STEPS + 2).max(steps.saturating_sub(30));
        let hi = steps.saturating_sub(10).max(lo);
        return (rng.random_range(lo..=hi), steps);
    }
    let lo = (steps / 4).max(2);
    let hi = (steps / 2).max(lo);
    let start = rng.random_range(lo..=hi);
    if kind.runs_to_end() {
        return (start, steps);
    }
    let len = match kind {
        ScenarioKind::AggressiveOvertaking => rng.random_range(20..=30),
        ScenarioKind::PushingAside => rng.random_range(27..=35),
        _ => rng.random_range(15..=30),
    };
    (start, (start + len).min(steps))
}

/// Scripts one scene.
pub fn generate(spec: &ScenarioSpec, map: &MapSpec) -> Result<Scene> {
    map.validate()?;
    let steps = spec.duration;
    if steps < 2 {
        return Err(Error::Parameter(format!("duration must be at least 2, got {steps}")));
    }
    if !(spec.noise_std >= 0.0) || !(spec.timestep_dt > 0.0) {
        return Err(Error::Parameter("noise_std must be >= 0 and timestep_dt > 0".into()));
    }
    if let Some((start, end)) = spec.anomaly_window {
        if !spec.kind.is_anomalous() {
            return Err(Error::Parameter(format!("normal kind {} takes no anomaly window", spec.kind)));
        }
        if start >= end || end > steps {
            return Err(Error::Parameter(format!(
                "anomaly window [{start}, {end}) outside [0, {steps})"
            )));
        }
        if spec.kind == ScenarioKind::WrongWay && start < BRAKE_STEPS + 2 {
            return Err(Error::Parameter(format!(
                "wrong-way window must start at or after step {}",
                BRAKE_STEPS + 2
            )));
        }
    }

    let mut ctx = Ctx {
        map,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        steps,
        dt: spec.timestep_dt,
    };
    let window = spec.kind.is_anomalous().then(|| {
        spec.anomaly_window
            .unwrap_or_else(|| default_window(spec.kind, steps, &mut ctx.rng))
    });
    let plans = script(spec.kind, window, &mut ctx)?;

    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Parameter(e.to_string()))?;
    let tracks = plans
        .iter()
        .enumerate()
        .map(|(i, plan)| Track {
            vehicle_id: i as u32,
            positions: plan
                .positions(ctx.dt)
                .into_iter()
                .map(|[x, y]| {
                    let p = if spec.noise_std > 0.0 {
                        [x + noise.sample(&mut ctx.rng), y + noise.sample(&mut ctx.rng)]
                    } else {
                        [x, y]
                    };
                    (p[0] >= map.x_min && p[0] < map.x_max).then_some(p)
                })
                .collect(),
        })
        .collect();

    let mut labels = vec![Label::Normal; steps];
    if let Some((start, end)) = window {
        let before = if spec.kind == ScenarioKind::WrongWay {
            spec.ignored_width.max(BRAKE_STEPS)
        } else {
            spec.ignored_width
        };
        for t in start.saturating_sub(before)..start {
            labels[t] = Label::Ignored;
        }
        for label in labels.iter_mut().take((end + spec.ignored_width).min(steps)).skip(end) {
            *label = Label::Ignored;
        }
        for label in &mut labels[start..end] {
            *label = Label::Abnormal;
        }
    }

    let scene = Scene {
        scene_id: format!("{}_{}", spec.kind, spec.seed),
        timestep_dt: spec.timestep_dt,
        anomaly_type: spec.kind.is_anomalous().then(|| spec.kind.to_string()),
        map: map.clone(),
        labels,
        tracks,
    };
    scene.validate()?;
    Ok(scene)
}

fn script(kind: ScenarioKind, window: Option<(usize, usize)>, ctx: &mut Ctx<'_>) -> Result<Vec<Plan>> {
    let steps = ctx.steps;
    let dt = ctx.dt;
    let (start, end) = window.unwrap_or((0, steps));
    let dir = ctx.direction();
    let plans = match kind {
        ScenarioKind::SideBySide => match ctx.lane_pair(dir) {
            Some((outer, inner)) => {
                let v = ctx.speed();
                let x0 = ctx.entry(dir);
                let dv = ctx.rng.random_range(-0.3..0.3);
                let dx = ctx.rng.random_range(-4.0..4.0);
                vec![
                    Plan::cruise(dir, x0, v, ctx.lane_y(outer), steps),
                    Plan::cruise(dir, x0 + dx, v + dv, ctx.lane_y(inner), steps),
                ]
            }
            None => return script(ScenarioKind::Following, None, ctx),
        },
        ScenarioKind::Following => {
            let lane = ctx.pick_lane(dir)?;
            let v = ctx.speed();
            let x0 = ctx.entry(dir);
            let gap = ctx.rng.random_range(15.0..35.0);
            let y = ctx.lane_y(lane);
            vec![
                Plan::cruise(dir, x0, v, y, steps),
                Plan::cruise(dir, x0 + dir.sign() * gap, v, y, steps),
            ]
        }
        ScenarioKind::Overtaking => match ctx.lane_pair(dir) {
            Some((outer, inner)) => {
                let v = ctx.speed().min(26.0);
                let dv = ctx.rng.random_range(4.0..7.0);
                let gap = ctx.rng.random_range(15.0..30.0);
                let x0 = ctx.entry(dir);
                let (y_out, y_in) = (ctx.lane_y(outer), ctx.lane_y(inner));
                let mut passer = Plan::cruise(dir, x0, v + dv, y_out, steps);
                let lead = Plan::cruise(dir, x0 + dir.sign() * gap, v, y_out, steps);
                let change = 30;
                let out_at = (((gap - 12.0).max(0.0) / dv) / dt) as usize;
                let back_at = (((gap + 12.0) / dv) / dt) as usize;
                passer.shift(out_at, change, y_in - y_out);
                passer.shift(back_at.max(out_at + change), change, y_out - y_in);
                vec![passer, lead]
            }
            None => return script(ScenarioKind::Following, None, ctx),
        },
        ScenarioKind::OppositeDirections => {
            let a = ctx.bystander_in(Direction::Positive)?;
            let b = ctx.bystander_in(Direction::Negative)?;
            vec![a, b]
        }
        ScenarioKind::AggressiveOvertaking => {
            let (outer, inner) = ctx.lane_pair(dir).unwrap_or_else(|| {
                let l = lanes_toward(ctx.map, dir)[0];
                (l, l)
            });
            let (y_out, y_in) = (ctx.lane_y(outer), ctx.lane_y(inner));
            let y_in = if inner == outer { y_out + left_of(dir) * 3.5 } else { y_in };
            let v = ctx.speed().min(25.0);
            let dv = ctx.rng.random_range(8.0..12.0);
            // Pull out 8 m behind the lead at `start`.
            let gap = 8.0 + dv * start as f64 * dt;
            let x0 = ctx.entry(dir);
            let lead = Plan::cruise(dir, x0 + dir.sign() * gap, v, y_out, steps);
            let mut actor = Plan::cruise(dir, x0, v + dv, y_out, steps);
            let abrupt = 6;
            actor.shift(start, abrupt, y_in - y_out);
            let cut_at = start + ((11.0 / dv) / dt) as usize;
            actor.shift(cut_at, abrupt, y_out - y_in);
            vec![actor, lead]
        }
        ScenarioKind::PushingAside => {
            let (outer, inner) = ctx.lane_pair(dir).unwrap_or_else(|| {
                let l = lanes_toward(ctx.map, dir)[0];
                (l, l)
            });
            let (y_a, y_b) = (ctx.lane_y(outer), ctx.lane_y(inner));
            let y_b = if inner == outer { y_a + left_of(dir) * 3.5 } else { y_b };
            let v = ctx.speed();
            let x0 = ctx.entry(dir);
            let dx = ctx.rng.random_range(-3.0..3.0);
            let mut actor = Plan::cruise(dir, x0, v, y_a, steps);
            let mut victim = Plan::cruise(dir, x0 + dx, v, y_b, steps);
            let toward = (y_b - y_a).signum();
            let push = ctx.rng.random_range(1.0..1.4);
            let back_at = start + 10 + (end - start).saturating_sub(27);
            actor.shift(start, 7, toward * push);
            victim.shift(start + 3, 7, toward * push);
            actor.shift(back_at, 15, -toward * push);
            victim.shift(back_at + 2, 15, -toward * push);
            vec![actor, victim]
        }
        ScenarioKind::Tailgating => {
            let lane = ctx.pick_lane(dir)?;
            let y = ctx.lane_y(lane);
            let v = ctx.speed().min(27.0);
            let dv = ctx.rng.random_range(3.0..5.0);
            let close = ctx.rng.random_range(3.0..5.0);
            // Close in at `v + dv`, then match speed over five steps ending at
            // `start` with the gap at `close`.
            let ramp = 5usize.min(start);
            let mut actor = Plan::cruise(dir, 0.0, v + dv, y, steps);
            actor.accelerate(start - ramp, start, -dv / (ramp.max(1) as f64 * dt), dt);
            let fall_back = ctx.rng.random_range(1.0..2.0);
            actor.accelerate(end.min(steps), steps, -fall_back, dt);
            actor.x0 = ctx.entry(dir);
            let mut lead = Plan::cruise(dir, 0.0, v, y, steps);
            let behind = actor.progress(start, dt) - lead.progress(start, dt);
            lead.x0 = actor.x0 + dir.sign() * (close + behind);
            vec![actor, lead]
        }
        ScenarioKind::OffRoad => {
            let lane = lanes_toward(ctx.map, dir)[0];
            let v = ctx.speed();
            let x0 = ctx.entry(dir);
            let mut actor = Plan::cruise(dir, x0, v, ctx.lane_y(lane), steps);
            let drift = ctx.rng.random_range(4.0..7.0);
            actor.shift(start, 15, -left_of(dir) * drift);
            actor.accelerate(start, steps, -2.0, dt);
            let other = ctx.bystander(dir, lane)?;
            vec![actor, other]
        }
        ScenarioKind::WrongWay => {
            let lane = ctx.pick_lane(dir)?;
            let v = ctx.speed();
            let x0 = ctx.entry(dir);
            let mut actor = Plan::cruise(dir, x0, v, ctx.lane_y(lane), steps);
            // Brake to a standstill over the steps before `start`, then
            // accelerate against the lane direction.
            let reverse = ctx.rng.random_range(6.0..10.0);
            for t in start - 1 - BRAKE_STEPS..steps {
                actor.speed[t] = if t + 1 < start {
                    v * (start - 2 - t) as f64 / BRAKE_STEPS as f64
                } else {
                    -reverse * dt * (t + 2 - start) as f64
                };
            }
            let other = ctx.bystander(dir, lane)?;
            vec![actor, other]
        }
        ScenarioKind::Skidding => {
            let lane = ctx.pick_lane(dir)?;
            let v = ctx.speed();
            let x0 = ctx.entry(dir);
            let mut actor = Plan::cruise(dir, x0, v, ctx.lane_y(lane), steps);
            let amp = ctx.rng.random_range(0.3..0.6);
            let period = ctx.rng.random_range(4.0..7.0);
            for t in start..end {
                actor.y[t] += amp * (2.0 * PI * (t - start) as f64 / period).sin();
            }
            let other = ctx.bystander(dir, lane)?;
            vec![actor, other]
        }
        ScenarioKind::LeftSpreading | ScenarioKind::RightSpreading => {
            let lane = ctx.pick_lane(dir)?;
            let v = ctx.speed();
            let x0 = ctx.entry(dir);
            let mut actor = Plan::cruise(dir, x0, v, ctx.lane_y(lane), steps);
            let side = if kind == ScenarioKind::LeftSpreading { 1.0 } else { -1.0 };
            let offset = side * left_of(dir) * ctx.rng.random_range(1.5..2.0);
            let settle = 10.min((end - start) / 2).max(1);
            actor.shift(start, settle, offset);
            actor.shift(end - settle, settle, -offset);
            let other = ctx.bystander(dir, lane)?;
            vec![actor, other]
        }
        ScenarioKind::Reeving => {
            let (outer, inner) = ctx.lane_pair(dir).unwrap_or_else(|| {
                let l = lanes_toward(ctx.map, dir)[0];
                (l, l)
            });
            let (y_out, y_in) = (ctx.lane_y(outer), ctx.lane_y(inner));
            let y_in = if inner == outer { y_out + left_of(dir) * 3.5 } else { y_in };
            let v = ctx.speed();
            let x0 = ctx.entry(dir);
            let mut actor = Plan::cruise(dir, x0, v, y_out, steps);
            let change = 8;
            let mut t = start;
            let mut toward = y_in - y_out;
            while t + change <= end {
                actor.shift(t, change, toward);
                toward = -toward;
                t += change + ctx.rng.random_range(2..=5);
            }
            let other = ctx.bystander_in(dir.reversed())?;
            vec![actor, other]
        }
    };
    Ok(plans)
}

/// Scene counts per kind for each split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub train: BTreeMap<ScenarioKind, usize>,
    pub test: BTreeMap<ScenarioKind, usize>,
    /// Inclusive range of scene durations in timesteps.
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_std: f64,
    pub timestep_dt: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    /// 80 normal training scenes and 66 mixed test scenes.
    fn default() -> Self {
        use ScenarioKind::*;
        DatasetSpec {
            train: ScenarioKind::NORMAL.iter().map(|&k| (k, 20)).collect(),
            test: [
                (SideBySide, 8),
                (Overtaking, 8),
                (Following, 8),
                (OppositeDirections, 8),
                (WrongWay, 6),
                (OffRoad, 4),
                (AggressiveOvertaking, 4),
                (PushingAside, 4),
                (Tailgating, 4),
                (Skidding, 3),
                (LeftSpreading, 3),
                (RightSpreading, 3),
                (Reeving, 3),
            ]
            .into_iter()
            .collect(),
            min_duration: 25,
            max_duration: 127,
            noise_std: DEFAULT_NOISE_STD,
            timestep_dt: DEFAULT_DT,
            seed: 0,
        }
    }
}

/// Generates the training (normal only) and test splits. Scene seeds are
/// drawn from the master seed in a fixed order, so the output depends only
/// on `spec` and `map`.
pub fn generate_dataset(spec: &DatasetSpec, map: &MapSpec) -> Result<(Vec<Scene>, Vec<Scene>)> {
    if let Some((kind, _)) = spec.train.iter().find(|(k, &n)| k.is_anomalous() && n > 0) {
        return Err(Error::Parameter(format!("anomalous kind {kind} requested in the training split")));
    }
    if spec.min_duration < 2 || spec.min_duration > spec.max_duration {
        return Err(Error::Parameter(format!(
            "invalid duration range [{}, {}]",
            spec.min_duration, spec.max_duration
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |name: &str, counts: &BTreeMap<ScenarioKind, usize>| -> Result<Vec<Scene>> {
        let mut scenes = Vec::new();
        for (&kind, &count) in counts {
            for i in 0..count {
                let mut min = spec.min_duration;
                if kind == ScenarioKind::WrongWay {
                    min = min.max(BRAKE_STEPS + 12);
                }
                let duration = rng.random_range(min..=spec.max_duration.max(min));
                let scenario = ScenarioSpec {
                    noise_std: spec.noise_std,
                    timestep_dt: spec.timestep_dt,
                    ..ScenarioSpec::new(kind, duration, rng.random())
                };
                let mut scene = generate(&scenario, map)?;
                scene.scene_id = format!("{name}_{kind}_{i:03}");
                scenes.push(scene);
            }
        }
        Ok(scenes)
    };
    let train = split("train", &spec.train)?;
    let test = split("test", &spec.test)?;
    Ok((train, test))
}
