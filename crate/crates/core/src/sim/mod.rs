//! Discrete-time microscopic simulator of a grid of signalized junctions.
//!
//! Each step runs, in order: action intake at decision points, car-following
//! for every lane (front to back), stop-line crossings and retirements,
//! arrivals, signal ticks, and per-step safety bookkeeping. All iteration is
//! by index, so a given (config, seed, action sequence) replays bit-exactly.

pub mod config;
pub mod metrics;
pub mod network;
pub mod observation;
pub mod record;
pub mod reward;
pub mod safety;
pub mod signal;

use std::collections::VecDeque;

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};

pub use config::{CarFollowing, ConfigError, Diurnal, SimConfig, Surge, B_EMERGENCY, LEFT_TURN_FRACTION};
pub use metrics::{average_metrics, episode_metrics, EpisodeLog, EpisodeMetrics, HARSH_BRAKE, STOP_SPEED};
pub use network::{LaneKind, Movement, Network, Phase, Side};
pub use observation::Observation;
pub use reward::{external_reward_tl, pressure_reward};
pub use safety::{ttc_statistics, TtcPool, TtcSummary, TTC_CAP};
pub use signal::{Decision, LaneSignal, PhaseState, SignalStage};

use crate::rng::{self, streams, Rng};
use signal::SignalController;

/// Trailing window for the throughput slot (s).
pub const THROUGHPUT_WINDOW_S: f64 = 30.0;
/// Trailing window for TTC and harsh-brake pools (s): one green plus the
/// yellow/all-red transition that may precede it.
pub const SAFETY_WINDOW_S: f64 = 35.0;

#[derive(Debug, Clone)]
pub struct Vehicle {
    pub id: u64,
    pub route: usize,
    /// Index into the route's link list.
    pub leg: usize,
    pub lane: usize,
    /// Metres from the start of the current link.
    pub position: f64,
    pub speed: f64,
    pub accel: f64,
    pub movement: Movement,
    pub spawn_time: f64,
    pub finish_time: Option<f64>,
    pub cum_wait: f64,
    pub link_enter_time: f64,
}

#[derive(Debug, Clone, Default)]
struct WindowSlot {
    ttc: TtcPool,
    brakes: u32,
    crossed: u32,
}

#[derive(Debug, Clone)]
struct JunctionState {
    signal: SignalController,
    window: Vec<WindowSlot>,
}

/// Per-junction outcome of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct JunctionEvents {
    pub decision: Option<Decision>,
    pub crossed: u32,
    pub harsh_brakes: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepEvents {
    pub spawned: u32,
    pub completed: u32,
    pub junctions: Vec<JunctionEvents>,
}

#[derive(Debug, Clone)]
pub struct SimState {
    pub config: SimConfig,
    pub network: Network,
    lanes: Vec<VecDeque<Vehicle>>,
    backlog: Vec<VecDeque<Vehicle>>,
    entry_rngs: Vec<Rng>,
    junctions: Vec<JunctionState>,
    tick: u32,
    next_vehicle_id: u64,
    completed: u64,
    log: EpisodeLog,
    throughput_ticks: usize,
    safety_ticks: usize,
    step_ttc: TtcPool,
}

/// Build an empty network from a validated config.
pub fn init_network(config: SimConfig) -> Result<SimState, ConfigError> {
    SimState::new(config)
}

fn idm_accel(cf: &CarFollowing, v: f64, leader: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (v / cf.v_max).powi(4);
    let interaction = match leader {
        Some((spacing, leader_speed)) => {
            let s = spacing.max(0.01);
            let dv = v - leader_speed;
            let s_star = cf.min_gap + (v * cf.headway + v * dv / (2.0 * (cf.a_max_accel * cf.b_comfort).sqrt())).max(0.0);
            (s_star / s).powi(2)
        }
        None => 0.0,
    };
    (cf.a_max_accel * (free - interaction)).clamp(-B_EMERGENCY, cf.a_max_accel)
}

impl SimState {
    pub fn new(config: SimConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let network = Network::grid(config.grid_rows, config.grid_cols, config.lanes_per_movement);
        let windows = |s: f64| ((s / config.dt).ceil() as usize).max(1);
        let throughput_ticks = windows(THROUGHPUT_WINDOW_S);
        let safety_ticks = windows(SAFETY_WINDOW_S);
        let slots = throughput_ticks.max(safety_ticks);
        let junctions = (0..network.junctions.len())
            .map(|_| JunctionState {
                signal: SignalController::new(config.green_ticks(), config.yellow_ticks(), config.allred_ticks()),
                window: vec![WindowSlot::default(); slots],
            })
            .collect();
        let entry_rngs = (0..network.entries.len())
            .map(|e| rng::stream(config.seed, streams::SIM_ENTRY_BASE + e as u64))
            .collect();
        let log = EpisodeLog {
            horizon_s: config.horizon_s,
            ..EpisodeLog::default()
        };
        Ok(Self {
            lanes: vec![VecDeque::new(); network.lanes.len()],
            backlog: vec![VecDeque::new(); network.entries.len()],
            entry_rngs,
            junctions,
            tick: 0,
            next_vehicle_id: 0,
            completed: 0,
            log,
            throughput_ticks,
            safety_ticks,
            step_ttc: TtcPool::default(),
            network,
            config,
        })
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.config.dt
    }

    pub fn is_done(&self) -> bool {
        self.tick >= self.config.horizon_ticks()
    }

    pub fn num_junctions(&self) -> usize {
        self.junctions.len()
    }

    pub fn phase_state(&self, junction: usize) -> PhaseState {
        self.junctions[junction].signal.state(self.config.dt)
    }

    pub fn current_phase(&self, junction: usize) -> Phase {
        self.junctions[junction].signal.phase
    }

    pub fn at_decision_point(&self, junction: usize) -> bool {
        self.junctions[junction].signal.at_decision_point()
    }

    pub fn lane_vehicles(&self, lane: usize) -> impl Iterator<Item = &Vehicle> {
        self.lanes[lane].iter()
    }

    pub fn vehicles_on_network(&self) -> usize {
        self.lanes.iter().map(VecDeque::len).sum()
    }

    pub fn vehicles_waiting_to_enter(&self) -> usize {
        self.backlog.iter().map(VecDeque::len).sum()
    }

    pub fn spawned(&self) -> u64 {
        self.log.spawned
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }

    pub fn log(&self) -> &EpisodeLog {
        &self.log
    }

    pub fn log_mut(&mut self) -> &mut EpisodeLog {
        &mut self.log
    }

    pub fn into_log(self) -> EpisodeLog {
        self.log
    }

    pub fn metrics(&self) -> EpisodeMetrics {
        episode_metrics(&self.log)
    }

    /// Step and return fresh observations for every junction.
    pub fn step(&mut self, actions: &[Phase]) -> (Vec<Observation>, StepEvents) {
        let events = self.advance(actions);
        (self.observe_all(), events)
    }

    fn lane_signal(&self, lane: usize) -> Option<(usize, LaneSignal)> {
        match self.network.lanes[lane].kind {
            LaneKind::Approach {
                junction,
                side,
                movement,
            } => Some((junction, self.junctions[junction].signal.lane_signal(side, movement))),
            LaneKind::Exit => None,
        }
    }

    /// Least-occupied lane of `link` serving `movement` (lowest id on ties).
    fn pick_lane(&self, link: usize, movement: Option<Movement>) -> usize {
        self.network
            .lanes_for(link, movement)
            .min_by_key(|&l| (self.lanes[l].len(), l))
            .expect("every link has a lane for each movement it carries")
    }

    /// Lane a vehicle at the front of its current lane would enter next.
    fn next_lane(&self, v: &Vehicle) -> Option<usize> {
        let route = &self.network.routes[v.route];
        let next_leg = v.leg + 1;
        route
            .links
            .get(next_leg)
            .map(|&link| self.pick_lane(link, route.movements[next_leg]))
    }

    fn must_proceed_on_yellow(&self, v: &Vehicle) -> bool {
        let d = self.config.link_length - v.position;
        d <= 0.0 || (v.speed > 0.0 && v.speed * v.speed / (2.0 * d) > self.config.car_following.b_comfort)
    }

    /// Advance one `dt`. Actions are consumed only by junctions sitting at a
    /// decision point; all other entries are ignored.
    pub fn advance(&mut self, actions: &[Phase]) -> StepEvents {
        assert_eq!(actions.len(), self.junctions.len(), "one action per junction");
        let dt = self.config.dt;
        let t = self.time();
        let cf = self.config.car_following;
        let length = self.config.link_length;
        let mut events = StepEvents {
            junctions: vec![JunctionEvents::default(); self.junctions.len()],
            ..StepEvents::default()
        };

        for (j, js) in self.junctions.iter_mut().enumerate() {
            if let Some(d) = js.signal.apply(actions[j]) {
                events.junctions[j].decision = Some(d);
                self.log.decision_points += 1;
                if d == Decision::Switch {
                    self.log.switches += 1;
                }
            }
        }

        // Car following, front to back within each lane.
        for lane in 0..self.lanes.len() {
            if self.lanes[lane].is_empty() {
                continue;
            }
            let signal = self.lane_signal(lane);
            // Front vehicle: decide whether the stop line is passable this step.
            let front = &self.lanes[lane][0];
            let mut pass_leader: Option<(f64, f64)> = None;
            let mut passable = false;
            if let Some((_, sig)) = signal {
                let permitted = match sig {
                    LaneSignal::Green => true,
                    LaneSignal::Yellow => self.must_proceed_on_yellow(front),
                    LaneSignal::Red => false,
                };
                if permitted {
                    let target = self.next_lane(front).expect("approach lanes always continue");
                    match self.lanes[target].back() {
                        Some(last) if last.position < cf.min_gap => {}
                        Some(last) => {
                            passable = true;
                            pass_leader = Some((length - front.position + last.position, last.speed));
                        }
                        None => passable = true,
                    }
                }
            } else {
                passable = true;
            }

            let junction = signal.map(|(j, _)| j);
            let mut leader_pos = f64::INFINITY;
            let mut leader_speed = 0.0;
            let n = self.lanes[lane].len();
            for k in 0..n {
                let v = &self.lanes[lane][k];
                let leader = if k == 0 {
                    if passable {
                        pass_leader
                    } else {
                        Some((length + cf.min_gap - v.position, 0.0))
                    }
                } else {
                    Some((leader_pos - v.position, leader_speed))
                };
                let a = idm_accel(&cf, v.speed, leader);
                let v_new = (v.speed + a * dt).clamp(0.0, cf.v_max);
                let mut x_new = v.position + 0.5 * (v.speed + v_new) * dt;
                if k == 0 {
                    if !passable {
                        x_new = x_new.min(length);
                    }
                } else {
                    x_new = x_new.min(leader_pos - cf.min_gap);
                }
                x_new = x_new.max(v.position);
                let a_eff = (v_new - v.speed) / dt;
                let moved = x_new - v.position;

                let v = &mut self.lanes[lane][k];
                v.position = x_new;
                v.speed = v_new;
                v.accel = a_eff;
                if v_new < STOP_SPEED {
                    v.cum_wait += dt;
                }
                self.log.vehicle_km += moved / 1000.0;
                if a_eff < HARSH_BRAKE {
                    self.log.harsh_brakes += 1;
                    if let Some(j) = junction {
                        events.junctions[j].harsh_brakes += 1;
                    }
                }
                leader_pos = x_new;
                leader_speed = v_new;
            }
        }

        // Stop-line crossings and retirements.
        let t_next = t + dt;
        for lane in 0..self.lanes.len() {
            let junction = self.lane_signal(lane).map(|(j, _)| j);
            while let Some(front) = self.lanes[lane].front() {
                if front.position <= length {
                    break;
                }
                match junction {
                    None => {
                        let mut v = self.lanes[lane].pop_front().expect("front exists");
                        v.finish_time = Some(t_next);
                        self.log.travel_times.push(t_next - v.spawn_time);
                        self.log.wait_times.push(v.cum_wait);
                        self.completed += 1;
                        events.completed += 1;
                    }
                    Some(j) => {
                        let target = self.next_lane(front).expect("approach lanes always continue");
                        let overshoot = front.position - length;
                        let new_pos = match self.lanes[target].back() {
                            Some(last) => overshoot.min(last.position - cf.min_gap),
                            None => overshoot,
                        };
                        if new_pos < 0.0 {
                            self.lanes[lane][0].position = length;
                            break;
                        }
                        let mut v = self.lanes[lane].pop_front().expect("front exists");
                        v.leg += 1;
                        v.lane = target;
                        v.position = new_pos;
                        v.link_enter_time = t_next;
                        self.lanes[target].push_back(v);
                        events.junctions[j].crossed += 1;
                    }
                }
            }
        }

        // Arrivals, then insertion from the per-entry backlog (FIFO).
        for e in 0..self.network.entries.len() {
            let rate = self.config.arrival_rate(t) * dt;
            let arrivals = if rate > 0.0 {
                Poisson::new(rate).expect("positive rate").sample(&mut self.entry_rngs[e]) as u64
            } else {
                0
            };
            for _ in 0..arrivals {
                let routes = &self.network.entries[e].routes;
                let rng = &mut self.entry_rngs[e];
                let route = if routes.len() > 1 && rng.random::<f64>() < LEFT_TURN_FRACTION {
                    routes[1 + rng.random_range(0..routes.len() - 1)]
                } else {
                    routes[0]
                };
                let movement = if self.network.routes[route].turns_left {
                    Movement::Left
                } else {
                    Movement::Straight
                };
                self.backlog[e].push_back(Vehicle {
                    id: self.next_vehicle_id,
                    route,
                    leg: 0,
                    lane: usize::MAX,
                    position: 0.0,
                    speed: 0.0,
                    accel: 0.0,
                    movement,
                    spawn_time: t,
                    finish_time: None,
                    cum_wait: 0.0,
                    link_enter_time: t,
                });
                self.next_vehicle_id += 1;
                self.log.spawned += 1;
                events.spawned += 1;
            }
            while let Some(head) = self.backlog[e].front() {
                let route = &self.network.routes[head.route];
                let lane = self.pick_lane(route.links[0], route.movements[0]);
                let speed = match self.lanes[lane].back() {
                    Some(last) if last.position < cf.min_gap => break,
                    Some(last) => cf
                        .v_max
                        .min(last.speed)
                        .min((2.0 * cf.b_comfort * (last.position - cf.min_gap)).sqrt()),
                    None => cf.v_max,
                };
                let mut v = self.backlog[e].pop_front().expect("head exists");
                v.lane = lane;
                v.speed = speed;
                v.link_enter_time = t_next;
                self.lanes[lane].push_back(v);
            }
            for v in self.backlog[e].iter_mut() {
                v.cum_wait += dt;
            }
        }

        for js in self.junctions.iter_mut() {
            js.signal.tick();
        }
        self.tick += 1;

        self.record_step(&events);
        events
    }

    /// Per-step safety and queue bookkeeping after the signals have ticked.
    fn record_step(&mut self, events: &StepEvents) {
        let slot = self.tick as usize % self.junctions[0].window.len();
        for (j, js) in self.junctions.iter_mut().enumerate() {
            let s = &mut js.window[slot];
            s.ttc.clear();
            s.brakes = events.junctions[j].harsh_brakes;
            s.crossed = events.junctions[j].crossed;
        }
        let cf = self.config.car_following;
        let length = self.config.link_length;
        let mut queued = 0u64;
        for lane in 0..self.lanes.len() {
            let Some((j, sig)) = self.lane_signal(lane) else {
                continue;
            };
            let vehicles = &self.lanes[lane];
            self.step_ttc.clear();
            for (k, v) in vehicles.iter().enumerate() {
                if v.speed < STOP_SPEED {
                    queued += 1;
                    continue;
                }
                let (gap, closing) = if k == 0 {
                    if sig == LaneSignal::Green {
                        continue;
                    }
                    (length + cf.min_gap - v.position, v.speed)
                } else {
                    let l = &vehicles[k - 1];
                    (l.position - v.position, v.speed - l.speed)
                };
                self.step_ttc.push(safety::time_to_collision(gap, closing));
            }
            self.junctions[j].window[slot].ttc.extend_from(&self.step_ttc);
            self.log.ttc.extend_from(&self.step_ttc);
        }
        self.log.steps += 1;
        self.log.queue_per_junction_sum += queued as f64 / self.junctions.len() as f64;
    }

    pub fn observe_all(&self) -> Vec<Observation> {
        (0..self.junctions.len()).map(|j| self.observe(j)).collect()
    }

    pub fn observe(&self, j: usize) -> Observation {
        let cf = &self.config.car_following;
        let length = self.config.link_length;
        let t = self.time();
        let junction = &self.network.junctions[j];
        let js = &self.junctions[j];

        let mut q = [0u32; 4];
        let mut p = [0i32; 4];
        let mut delay_sum = 0.0;
        let mut delay_n = 0usize;
        let mut rho_red = false;
        let mut nearest: Option<((bool, f64, usize), &Vehicle)> = None;
        for side in Side::ALL {
            let i = side.index();
            let link_in = junction.incoming[i];
            let link_out = junction.outgoing[side.opposite().index()];
            let mut n_in = 0i32;
            for &lane in &self.network.links[link_in].lanes {
                let sig = self.lane_signal(lane).map(|(_, s)| s);
                for v in &self.lanes[lane] {
                    n_in += 1;
                    if v.speed < STOP_SPEED {
                        q[i] += 1;
                    }
                    delay_sum += ((t - v.link_enter_time) - v.position / cf.v_max).max(0.0);
                    delay_n += 1;
                    let d = length - v.position;
                    if sig == Some(LaneSignal::Red)
                        && d > 0.0
                        && v.speed >= STOP_SPEED
                        && d / v.speed <= self.config.yellow_s
                        && v.speed * v.speed / (2.0 * d) > cf.b_comfort
                    {
                        rho_red = true;
                    }
                }
                // Moving lane fronts take precedence over vehicles already
                // standing at a stop line.
                if let Some(front) = self.lanes[lane].front() {
                    let d = (length - front.position).max(0.0);
                    let key = (front.speed < STOP_SPEED, d, lane);
                    let better = match nearest {
                        None => true,
                        Some((bk, _)) => key.0 < bk.0 || (key.0 == bk.0 && (key.1, key.2) < (bk.1, bk.2)),
                    };
                    if better {
                        nearest = Some((key, front));
                    }
                }
            }
            let n_out: i32 = self.network.links[link_out]
                .lanes
                .iter()
                .map(|&l| self.lanes[l].len() as i32)
                .sum();
            p[i] = n_in - n_out;
        }

        let slots = js.window.len();
        let now = self.tick as usize;
        let recent = |w: usize| (0..w.min(now)).map(move |back| (now - back) % slots);
        let throughput = recent(self.throughput_ticks).map(|s| js.window[s].crossed).sum();
        let h_brake = recent(self.safety_ticks).map(|s| js.window[s].brakes).sum();
        let mut pool = TtcPool::default();
        for s in recent(self.safety_ticks) {
            pool.extend_from(&js.window[s].ttc);
        }
        let ttc = pool.summary();
        let (v_near, a_near, d_stop) = nearest.map_or((0.0, 0.0, 0.0), |((_, d, _), v)| (v.speed, v.accel, d));

        Observation {
            intersection_id: j,
            time: t,
            phase: js.signal.state(self.config.dt),
            q,
            p,
            mean_delay: if delay_n > 0 { delay_sum / delay_n as f64 } else { 0.0 },
            throughput,
            ttc_p10: ttc.p10,
            ttc_p50: ttc.p50,
            h_brake,
            rho_red,
            v_near,
            a_near,
            d_stop,
        }
    }

    /// First lane of `link` serving `movement` at its downstream end.
    pub fn lane_of(&self, link: usize, movement: Option<Movement>) -> Option<usize> {
        self.network.lanes_for(link, movement).next()
    }

    /// Place a vehicle directly on a lane, for building fixture scenes. The
    /// vehicle takes the first route that uses the lane; it counts as spawned.
    pub fn place_vehicle(&mut self, lane: usize, position: f64, speed: f64) -> Result<u64, String> {
        let cf = self.config.car_following;
        if !(0.0..=self.config.link_length).contains(&position) || !(0.0..=cf.v_max).contains(&speed) {
            return Err(format!("position {position} or speed {speed} out of range"));
        }
        let spec = self.network.lanes.get(lane).ok_or_else(|| format!("no lane {lane}"))?;
        let want = match spec.kind {
            LaneKind::Approach { movement, .. } => Some(movement),
            LaneKind::Exit => None,
        };
        let (route, leg) = self
            .network
            .routes
            .iter()
            .enumerate()
            .find_map(|(r, route)| {
                (0..route.links.len())
                    .find(|&k| route.links[k] == spec.link && route.movements[k] == want)
                    .map(|k| (r, k))
            })
            .ok_or_else(|| format!("lane {lane} is not on any route"))?;
        let at = self.lanes[lane].partition_point(|v| v.position > position);
        let clear_ahead = at == 0 || self.lanes[lane][at - 1].position >= position + cf.min_gap;
        let clear_behind = at == self.lanes[lane].len() || self.lanes[lane][at].position + cf.min_gap <= position;
        if !(clear_ahead && clear_behind) {
            return Err(format!("position {position} overlaps a vehicle on lane {lane}"));
        }
        let t = self.time();
        let id = self.next_vehicle_id;
        self.next_vehicle_id += 1;
        self.log.spawned += 1;
        self.lanes[lane].insert(
            at,
            Vehicle {
                id,
                route,
                leg,
                lane,
                position,
                speed,
                accel: 0.0,
                movement: if self.network.routes[route].turns_left {
                    Movement::Left
                } else {
                    Movement::Straight
                },
                spawn_time: t,
                finish_time: None,
                cum_wait: 0.0,
                link_enter_time: t,
            },
        );
        Ok(id)
    }

    /// Check internal invariants; used by tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        let cf = &self.config.car_following;
        let active = (self.vehicles_on_network() + self.vehicles_waiting_to_enter()) as u64;
        if self.log.spawned != active + self.completed {
            return Err(format!(
                "conservation: spawned {} != active {} + completed {}",
                self.log.spawned, active, self.completed
            ));
        }
        for (l, lane) in self.lanes.iter().enumerate() {
            for (k, v) in lane.iter().enumerate() {
                if !(0.0..=cf.v_max + 1e-9).contains(&v.speed) {
                    return Err(format!("lane {l}: speed {} out of range", v.speed));
                }
                if v.accel < -B_EMERGENCY - 1e-9 {
                    return Err(format!("lane {l}: accel {} below emergency bound", v.accel));
                }
                if k > 0 && v.position + cf.min_gap > lane[k - 1].position + 1e-9 {
                    return Err(format!(
                        "lane {l}: overlap {} + {} > {}",
                        v.position, cf.min_gap, lane[k - 1].position
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Fixed-time plan: cycle through the four phases, one green each.
pub fn fixed_time_actions(state: &SimState) -> Vec<Phase> {
    (0..state.num_junctions())
        .map(|j| {
            let p = state.current_phase(j).index();
            Phase::from_index((p + 1) % 4).expect("index in range")
        })
        .collect()
}

#[cfg(test)]
mod tests;
