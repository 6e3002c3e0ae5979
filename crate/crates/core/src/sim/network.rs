//! Grid topology: junctions, directed links, lanes and corridor routes.

use serde::{Deserialize, Serialize};

/// Compass side of a junction. Index order N, E, S, W is used everywhere a
/// per-approach 4-vector appears.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    N,
    E,
    S,
    W,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::N, Side::E, Side::S, Side::W];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::N => Side::S,
            Side::E => Side::W,
            Side::S => Side::N,
            Side::W => Side::E,
        }
    }

    /// Heading after a left turn, for a vehicle currently heading toward `self`.
    pub fn left_of(self) -> Side {
        match self {
            Side::E => Side::N,
            Side::N => Side::W,
            Side::W => Side::S,
            Side::S => Side::E,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Side::N => "N",
            Side::E => "E",
            Side::S => "S",
            Side::W => "W",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Movement {
    Straight,
    Left,
}

/// Signal phase: a set of non-conflicting protected movements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "EW_straight")]
    EwStraight,
    #[serde(rename = "EW_left")]
    EwLeft,
    #[serde(rename = "NS_straight")]
    NsStraight,
    #[serde(rename = "NS_left")]
    NsLeft,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::EwStraight, Phase::EwLeft, Phase::NsStraight, Phase::NsLeft];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Phase> {
        Phase::ALL.get(i).copied()
    }

    /// Short caption token.
    pub fn code(self) -> &'static str {
        match self {
            Phase::EwStraight => "EW_S",
            Phase::EwLeft => "EW_L",
            Phase::NsStraight => "NS_S",
            Phase::NsLeft => "NS_L",
        }
    }

    pub fn from_code(code: &str) -> Option<Phase> {
        Phase::ALL.into_iter().find(|p| p.code() == code)
    }

    pub fn serves(self, side: Side, movement: Movement) -> bool {
        let ew = matches!(side, Side::E | Side::W);
        match self {
            Phase::EwStraight => ew && movement == Movement::Straight,
            Phase::EwLeft => ew && movement == Movement::Left,
            Phase::NsStraight => !ew && movement == Movement::Straight,
            Phase::NsLeft => !ew && movement == Movement::Left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Junction(usize),
    Boundary,
}

#[derive(Debug, Clone)]
pub struct Link {
    pub from: Endpoint,
    pub to: Endpoint,
    /// Direction of travel.
    pub heading: Side,
    pub lanes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneKind {
    /// Ends at a junction stop line; vehicles in it perform `Movement` there.
    Approach { junction: usize, side: Side, movement: Movement },
    /// Ends at the network boundary.
    Exit,
}

#[derive(Debug, Clone)]
pub struct LaneSpec {
    pub link: usize,
    pub kind: LaneKind,
}

#[derive(Debug, Clone)]
pub struct Junction {
    pub row: usize,
    pub col: usize,
    /// Incoming link per arrival side.
    pub incoming: [usize; 4],
    /// Outgoing link per departure side.
    pub outgoing: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct Route {
    pub links: Vec<usize>,
    /// Movement performed at the downstream end of `links[k]`; `None` for the exit link.
    pub movements: Vec<Option<Movement>>,
    pub turns_left: bool,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub link: usize,
    /// Route ids usable from this entry: index 0 is straight-through, the rest
    /// turn left at successive junctions of the corridor.
    pub routes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub rows: usize,
    pub cols: usize,
    pub junctions: Vec<Junction>,
    pub links: Vec<Link>,
    pub lanes: Vec<LaneSpec>,
    pub routes: Vec<Route>,
    pub entries: Vec<Entry>,
}

impl Network {
    pub fn grid(rows: usize, cols: usize, lanes_per_movement: usize) -> Network {
        let n = rows * cols;
        let mut links: Vec<Link> = Vec::new();
        let mut lanes: Vec<LaneSpec> = Vec::new();
        let mut incoming = vec![[usize::MAX; 4]; n];
        let mut outgoing = vec![[usize::MAX; 4]; n];
        let neighbor = |j: usize, side: Side| -> Option<usize> {
            let (r, c) = (j / cols, j % cols);
            match side {
                Side::N if r > 0 => Some(j - cols),
                Side::S if r + 1 < rows => Some(j + cols),
                Side::W if c > 0 => Some(j - 1),
                Side::E if c + 1 < cols => Some(j + 1),
                _ => None,
            }
        };

        let add_link = |from: Endpoint, to: Endpoint, heading: Side, links: &mut Vec<Link>, lanes: &mut Vec<LaneSpec>| {
            let id = links.len();
            let mut lane_ids = Vec::new();
            match to {
                Endpoint::Junction(j) => {
                    let side = heading.opposite();
                    for movement in [Movement::Straight, Movement::Left] {
                        for _ in 0..lanes_per_movement {
                            lane_ids.push(lanes.len());
                            lanes.push(LaneSpec {
                                link: id,
                                kind: LaneKind::Approach { junction: j, side, movement },
                            });
                        }
                    }
                }
                Endpoint::Boundary => {
                    for _ in 0..lanes_per_movement {
                        lane_ids.push(lanes.len());
                        lanes.push(LaneSpec {
                            link: id,
                            kind: LaneKind::Exit,
                        });
                    }
                }
            }
            links.push(Link {
                from,
                to,
                heading,
                lanes: lane_ids,
            });
            id
        };

        // Incoming links, one per junction side; interior ones double as the
        // neighbor's outgoing link.
        for j in 0..n {
            for side in Side::ALL {
                let heading = side.opposite();
                let from = match neighbor(j, side) {
                    Some(k) => Endpoint::Junction(k),
                    None => Endpoint::Boundary,
                };
                let id = add_link(from, Endpoint::Junction(j), heading, &mut links, &mut lanes);
                incoming[j][side.index()] = id;
                if let Some(k) = neighbor(j, side) {
                    outgoing[k][side.opposite().index()] = id;
                }
            }
        }
        for j in 0..n {
            for side in Side::ALL {
                if neighbor(j, side).is_none() {
                    let id = add_link(Endpoint::Junction(j), Endpoint::Boundary, side, &mut links, &mut lanes);
                    outgoing[j][side.index()] = id;
                }
            }
        }

        let junctions: Vec<Junction> = (0..n)
            .map(|j| Junction {
                row: j / cols,
                col: j % cols,
                incoming: incoming[j],
                outgoing: outgoing[j],
            })
            .collect();

        // Corridor routes from every boundary entry.
        let mut routes = Vec::new();
        let mut entries = Vec::new();
        for (j, junction) in junctions.iter().enumerate() {
            for side in Side::ALL {
                if neighbor(j, side).is_some() {
                    continue;
                }
                let entry_link = junction.incoming[side.index()];
                let heading = side.opposite();
                // Junctions crossed when driving straight through.
                let mut corridor = vec![j];
                let mut cur = j;
                while let Some(k) = neighbor(cur, heading) {
                    corridor.push(k);
                    cur = k;
                }
                let mut ids = Vec::new();
                for turn_at in std::iter::once(None).chain((0..corridor.len()).map(Some)) {
                    let mut route_links = vec![entry_link];
                    let mut movements = Vec::new();
                    let mut cur = j;
                    let mut h = heading;
                    let mut step = 0usize;
                    loop {
                        let movement = if turn_at == Some(step) {
                            h = h.left_of();
                            Movement::Left
                        } else {
                            Movement::Straight
                        };
                        movements.push(Some(movement));
                        route_links.push(junctions[cur].outgoing[h.index()]);
                        match neighbor(cur, h) {
                            Some(k) => {
                                cur = k;
                                step += 1;
                            }
                            None => break,
                        }
                    }
                    movements.push(None);
                    ids.push(routes.len());
                    routes.push(Route {
                        links: route_links,
                        movements,
                        turns_left: turn_at.is_some(),
                    });
                }
                entries.push(Entry {
                    link: entry_link,
                    routes: ids,
                });
            }
        }

        Network {
            rows,
            cols,
            junctions,
            links,
            lanes,
            routes,
            entries,
        }
    }

    /// Lanes ending at a junction stop line.
    pub fn approach_lane_count(&self) -> usize {
        self.lanes
            .iter()
            .filter(|l| matches!(l.kind, LaneKind::Approach { .. }))
            .count()
    }

    /// Lanes of `link` that serve `movement` (all lanes for an exit link).
    pub fn lanes_for(&self, link: usize, movement: Option<Movement>) -> impl Iterator<Item = usize> + '_ {
        self.links[link].lanes.iter().copied().filter(move |&l| match (self.lanes[l].kind, movement) {
            (LaneKind::Approach { movement: m, .. }, Some(want)) => m == want,
            (LaneKind::Exit, None) => true,
            _ => false,
        })
    }
}
