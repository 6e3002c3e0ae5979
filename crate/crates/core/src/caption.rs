//! Schema-constrained captions of observations.
//!
//! The structured grammar is a fixed sequence of `key=value` slots joined by
//! `"; "`:
//!
//! ```text
//! phase=NS_S; elapsed=12s; q=[N:5,E:2,S:4,W:0]veh; p=[N:3,E:1,S:2,W:-1]; delay=8.4s; thru=12veh/30s; ttc_p10=1.62s; ttc_p50=4.10s; brakes=2; red_risk=0; near_v=6.30m/s; near_a=-1.20m/s2; near_d=18.5m
//! ```
//!
//! Counts are integers, `delay` and `near_d` carry one decimal, TTC and the
//! near-vehicle kinematics two. Negative zero is printed as zero. The parser
//! only accepts canonical text, so `render(parse(s)) == s` for every accepted
//! `s`.
//!
//! Two ablation renderings live here as well: free prose with seeded order,
//! synonyms and filler sentences, and a shuffled slot list without units.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::Rng;
use crate::sim::{Observation, Phase, TTC_CAP};

pub const SCHEMA_VERSION: &str = "caption-v1";

const SIDES: [&str; 4] = ["N", "E", "S", "W"];
const SIDE_WORDS: [&str; 4] = ["north", "east", "south", "west"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CaptionError {
    #[error("slot {index}: expected `{expected}`")]
    Slot { index: usize, expected: &'static str },
    #[error("slot `{slot}`: bad value `{value}`")]
    Value { slot: &'static str, value: String },
    #[error("expected {expected} slots, found {found}")]
    SlotCount { expected: usize, found: usize },
    #[error("caption is not in canonical form")]
    NonCanonical,
    #[error("could not find {0} in the text")]
    Missing(&'static str),
}

/// Parsed caption slots, held at rendered precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionFields {
    pub phase: Phase,
    pub elapsed: u32,
    pub q: [u32; 4],
    pub p: [i32; 4],
    pub delay: f64,
    pub thru: u32,
    pub ttc_p10: f64,
    pub ttc_p50: f64,
    pub brakes: u32,
    pub red_risk: bool,
    pub near_v: f64,
    pub near_a: f64,
    pub near_d: f64,
}

fn round_to(x: f64, decimals: usize) -> f64 {
    let r: f64 = format!("{x:.decimals$}").parse().expect("formatted float parses");
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn fmt(x: f64, decimals: usize) -> String {
    format!("{:.decimals$}", round_to(x, decimals))
}

impl CaptionFields {
    pub fn from_observation(obs: &Observation) -> Self {
        Self {
            phase: obs.phase.phase_id,
            elapsed: obs.phase.elapsed.max(0.0).round() as u32,
            q: obs.q,
            p: obs.p,
            delay: round_to(obs.mean_delay, 1),
            thru: obs.throughput,
            ttc_p10: round_to(obs.ttc_p10, 2),
            ttc_p50: round_to(obs.ttc_p50, 2),
            brakes: obs.h_brake,
            red_risk: obs.rho_red,
            near_v: round_to(obs.v_near, 2),
            near_a: round_to(obs.a_near, 2),
            near_d: round_to(obs.d_stop, 1),
        }
    }

    pub fn mean_queue(&self) -> f64 {
        self.q.iter().map(|&x| f64::from(x)).sum::<f64>() / 4.0
    }

    fn slots(&self) -> [(&'static str, String, &'static str); 13] {
        let list = |v: &dyn Fn(usize) -> String| {
            (0..4)
                .map(|i| format!("{}:{}", SIDES[i], v(i)))
                .collect::<Vec<_>>()
                .join(",")
        };
        [
            ("phase", self.phase.code().to_string(), ""),
            ("elapsed", self.elapsed.to_string(), "s"),
            ("q", format!("[{}]", list(&|i| self.q[i].to_string())), "veh"),
            ("p", format!("[{}]", list(&|i| self.p[i].to_string())), ""),
            ("delay", fmt(self.delay, 1), "s"),
            ("thru", self.thru.to_string(), "veh/30s"),
            ("ttc_p10", fmt(self.ttc_p10, 2), "s"),
            ("ttc_p50", fmt(self.ttc_p50, 2), "s"),
            ("brakes", self.brakes.to_string(), ""),
            ("red_risk", u8::from(self.red_risk).to_string(), ""),
            ("near_v", fmt(self.near_v, 2), "m/s"),
            ("near_a", fmt(self.near_a, 2), "m/s2"),
            ("near_d", fmt(self.near_d, 1), "m"),
        ]
    }

    pub fn render(&self) -> String {
        self.slots()
            .iter()
            .map(|(k, v, u)| format!("{k}={v}{u}"))
            .collect::<Vec<_>>()
            .join("; ")
    }

    pub fn bins(&self) -> TemplateBins {
        TemplateBins {
            phase: self.phase,
            queue: self.q.map(queue_bin),
            delay: (self.delay.max(0.0) / 5.0).floor() as u32,
            ttc: ttc_bin(self.ttc_p10),
            red_risk: self.red_risk,
        }
    }

    pub fn template_id(&self) -> u64 {
        self.bins().id()
    }
}

/// Queue bins: 0, 1-3, 4-8, more than 8.
pub fn queue_bin(q: u32) -> u8 {
    match q {
        0 => 0,
        1..=3 => 1,
        4..=8 => 2,
        _ => 3,
    }
}

/// TTC p10 bins: below 1.5 s, 1.5-3 s, above 3 s.
pub fn ttc_bin(ttc: f64) -> u8 {
    if ttc < 1.5 {
        0
    } else if ttc <= 3.0 {
        1
    } else {
        2
    }
}

/// The coarse tuple that defines a caption template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TemplateBins {
    pub phase: Phase,
    pub queue: [u8; 4],
    pub delay: u32,
    pub ttc: u8,
    pub red_risk: bool,
}

impl TemplateBins {
    /// Stable 64-bit id: the first 8 bytes of SHA-256 over a canonical encoding.
    pub fn id(&self) -> u64 {
        let key = format!(
            "{}|{}{}{}{}|{}|{}|{}",
            self.phase.code(),
            self.queue[0],
            self.queue[1],
            self.queue[2],
            self.queue[3],
            self.delay,
            self.ttc,
            u8::from(self.red_risk)
        );
        let digest = Sha256::digest(key.as_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub template_id: u64,
    pub schema_version: String,
}

impl Caption {
    pub fn from_fields(fields: &CaptionFields) -> Self {
        Self {
            text: fields.render(),
            template_id: fields.template_id(),
            schema_version: SCHEMA_VERSION.to_string(),
        }
    }
}

pub fn render_caption(obs: &Observation) -> Caption {
    Caption::from_fields(&CaptionFields::from_observation(obs))
}

/// Template id of a caption produced by [`render_caption`].
pub fn template_id(caption: &Caption) -> Result<u64, CaptionError> {
    Ok(parse_caption(&caption.text)?.template_id())
}

fn parse_decimal(slot: &'static str, v: &str, decimals: usize) -> Result<f64, CaptionError> {
    let bad = || CaptionError::Value {
        slot,
        value: v.to_string(),
    };
    let digits = v.strip_prefix('-').unwrap_or(v);
    let (int, frac) = digits.split_once('.').ok_or_else(bad)?;
    if int.is_empty()
        || frac.len() != decimals
        || !int.bytes().all(|b| b.is_ascii_digit())
        || !frac.bytes().all(|b| b.is_ascii_digit())
    {
        return Err(bad());
    }
    v.parse().map_err(|_| bad())
}

fn parse_int<T: std::str::FromStr>(slot: &'static str, v: &str) -> Result<T, CaptionError> {
    let digits = v.strip_prefix('-').unwrap_or(v);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(CaptionError::Value {
            slot,
            value: v.to_string(),
        });
    }
    v.parse().map_err(|_| CaptionError::Value {
        slot,
        value: v.to_string(),
    })
}

fn parse_list<T: std::str::FromStr + Copy + Default>(slot: &'static str, v: &str) -> Result<[T; 4], CaptionError> {
    let bad = || CaptionError::Value {
        slot,
        value: v.to_string(),
    };
    let inner = v.strip_prefix('[').and_then(|s| s.strip_suffix(']')).ok_or_else(bad)?;
    let parts: Vec<&str> = inner.split(',').collect();
    if parts.len() != 4 {
        return Err(bad());
    }
    let mut out = [T::default(); 4];
    for (i, part) in parts.iter().enumerate() {
        let value = part
            .strip_prefix(SIDES[i])
            .and_then(|s| s.strip_prefix(':'))
            .ok_or_else(bad)?;
        out[i] = parse_int(slot, value)?;
    }
    Ok(out)
}

/// Parse the structured grammar. Only canonical renderings are accepted.
pub fn parse_caption(text: &str) -> Result<CaptionFields, CaptionError> {
    const KEYS: [(&str, &str); 13] = [
        ("phase", ""),
        ("elapsed", "s"),
        ("q", "veh"),
        ("p", ""),
        ("delay", "s"),
        ("thru", "veh/30s"),
        ("ttc_p10", "s"),
        ("ttc_p50", "s"),
        ("brakes", ""),
        ("red_risk", ""),
        ("near_v", "m/s"),
        ("near_a", "m/s2"),
        ("near_d", "m"),
    ];
    let parts: Vec<&str> = text.split("; ").collect();
    if parts.len() != KEYS.len() {
        return Err(CaptionError::SlotCount {
            expected: KEYS.len(),
            found: parts.len(),
        });
    }
    let mut values = [""; 13];
    for (i, (part, (key, unit))) in parts.iter().zip(KEYS).enumerate() {
        let value = part
            .strip_prefix(key)
            .and_then(|s| s.strip_prefix('='))
            .and_then(|s| s.strip_suffix(unit))
            .ok_or(CaptionError::Slot { index: i, expected: key })?;
        values[i] = value;
    }
    let phase = Phase::from_code(values[0]).ok_or_else(|| CaptionError::Value {
        slot: "phase",
        value: values[0].to_string(),
    })?;
    let red_risk = match values[9] {
        "0" => false,
        "1" => true,
        other => {
            return Err(CaptionError::Value {
                slot: "red_risk",
                value: other.to_string(),
            })
        }
    };
    let fields = CaptionFields {
        phase,
        elapsed: parse_int("elapsed", values[1])?,
        q: parse_list("q", values[2])?,
        p: parse_list("p", values[3])?,
        delay: parse_decimal("delay", values[4], 1)?,
        thru: parse_int("thru", values[5])?,
        ttc_p10: parse_decimal("ttc_p10", values[6], 2)?,
        ttc_p50: parse_decimal("ttc_p50", values[7], 2)?,
        brakes: parse_int("brakes", values[8])?,
        red_risk,
        near_v: parse_decimal("near_v", values[10], 2)?,
        near_a: parse_decimal("near_a", values[11], 2)?,
        near_d: parse_decimal("near_d", values[12], 1)?,
    };
    if fields.render() != text {
        return Err(CaptionError::NonCanonical);
    }
    Ok(fields)
}

/// Parse either grammar: structured first, then prose extraction.
pub fn parse_any(text: &str) -> Result<CaptionFields, CaptionError> {
    parse_caption(text).or_else(|_| extract_unstructured(text))
}

fn phase_words(p: Phase) -> &'static str {
    match p {
        Phase::EwStraight => "east-west through traffic",
        Phase::EwLeft => "east-west left turns",
        Phase::NsStraight => "north-south through traffic",
        Phase::NsLeft => "north-south left turns",
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

const FILLERS: [&str; 8] = [
    "A delivery van is double parked around the corner.",
    "The sky is overcast.",
    "Street lamps along the avenue have just switched on.",
    "A cyclist rests by the curb.",
    "Someone is walking a dog across the plaza.",
    "Roadwork signs lean against a fence.",
    "A bus shelter advertises a new film.",
    "Pigeons crowd the pavement outside a bakery.",
];

fn pick<'a>(rng: &mut Rng, options: &[&'a str]) -> &'a str {
    options[rng.random_range(0..options.len())]
}

fn side_pairs(rng: &mut Rng, values: [String; 4]) -> String {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let items: Vec<String> = order.iter().map(|&i| format!("{} {}", SIDE_WORDS[i], values[i])).collect();
    format!("{}, {} and {}", items[0], items[1..3].join(", "), items[3])
}

/// Free-prose rendering of the same facts, for the unstructured ablation.
/// Numbers carry the structured precision; sentence order, wording and one or
/// two filler sentences depend on `style_seed`.
pub fn unstructured_caption(fields: &CaptionFields, style_seed: u64) -> String {
    let mut rng = Rng::seed_from_u64(style_seed);
    let f = fields;
    let pw = phase_words(f.phase);
    let e = f.elapsed;
    let mut sentences: Vec<String> = Vec::new();

    sentences.push(match rng.random_range(0..3) {
        0 => format!("The light has given {pw} the green for {e} seconds."),
        1 => format!("{} has held the green for {e} seconds now.", capitalize(pw)),
        _ => format!("Right now {pw} is being served, {e} seconds into its green."),
    });
    let intro = pick(
        &mut rng,
        &["Queue lengths by approach are", "Counting halted cars, the queues are", "The standing queues read"],
    );
    sentences.push(format!("{intro} {}.", side_pairs(&mut rng, f.q.map(|x| x.to_string()))));
    let intro = pick(
        &mut rng,
        &["The pressure imbalance per approach is", "Pressure readings give", "Net pressure by approach is"],
    );
    sentences.push(format!("{intro} {}.", side_pairs(&mut rng, f.p.map(|x| x.to_string()))));
    let d = fmt(f.delay, 1);
    sentences.push(match rng.random_range(0..3) {
        0 => format!("Average delay sits at {d} seconds."),
        1 => format!("Each driver has lost about {d} seconds to delay on average."),
        _ => format!("The mean delay is {d} s."),
    });
    let n = f.thru;
    sentences.push(match rng.random_range(0..3) {
        0 => format!("{n} vehicles cleared the stop lines in the last half minute."),
        1 => format!("Over the last half minute, {n} vehicles got through."),
        _ => format!("Throughput over the last half minute was {n} vehicles."),
    });
    let (a, b) = (fmt(f.ttc_p10, 2), fmt(f.ttc_p50, 2));
    sentences.push(match rng.random_range(0..2) {
        0 => format!("Time to collision is {a} s at the tenth percentile and {b} s at the median."),
        _ => format!("The tenth percentile time to collision is {a} s, while the median is {b} s."),
    });
    let n = f.brakes;
    sentences.push(match rng.random_range(0..3) {
        0 => format!("{n} hard braking events were recorded recently."),
        1 => format!("Drivers braked hard {n} times lately."),
        _ => format!("Hard braking count: {n}."),
    });
    sentences.push(
        if f.red_risk {
            pick(&mut rng, &["At least one car looks likely to run the red.", "Someone may run the red light."])
        } else {
            pick(&mut rng, &["Nobody looks likely to run the red.", "No one seems at risk of running the red light."])
        }
        .to_string(),
    );
    let (d, v, acc) = (fmt(f.near_d, 1), fmt(f.near_v, 2), fmt(f.near_a, 2));
    sentences.push(match rng.random_range(0..3) {
        0 => format!("The nearest car is {d} m from its stop line, travelling at {v} m/s and accelerating at {acc} m/s2."),
        1 => format!("Closest to a stop line, {d} m out, one car moves at {v} m/s with acceleration {acc} m/s2."),
        _ => format!("A car {d} m before the stop line is going {v} m/s, accelerating at {acc} m/s2."),
    });

    sentences.shuffle(&mut rng);
    let fillers = rng.random_range(1..=2);
    let mut pool = FILLERS.to_vec();
    pool.shuffle(&mut rng);
    for filler in pool.into_iter().take(fillers) {
        let at = rng.random_range(0..=sentences.len());
        sentences.insert(at, filler.to_string());
    }
    sentences.join(" ")
}

fn numbers(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let neg = bytes[i] == b'-' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit();
        if bytes[i].is_ascii_digit() || neg {
            let start = i;
            i += 1;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || (bytes[i] == b'.' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit())) {
                i += 1;
            }
            out.push(&s[start..i]);
        } else {
            i += 1;
        }
    }
    out
}

fn side_values<T: std::str::FromStr + Copy + Default>(sentence: &str, what: &'static str) -> Result<[T; 4], CaptionError> {
    let mut out = [T::default(); 4];
    for (i, word) in SIDE_WORDS.iter().enumerate() {
        let at = sentence.find(&format!("{word} ")).ok_or(CaptionError::Missing(what))?;
        let rest = &sentence[at + word.len() + 1..];
        let n = numbers(rest).first().copied().ok_or(CaptionError::Missing(what))?;
        out[i] = n.parse().map_err(|_| CaptionError::Missing(what))?;
    }
    Ok(out)
}

fn nth_number(sentence: &str, n: usize, what: &'static str) -> Result<f64, CaptionError> {
    numbers(sentence)
        .get(n)
        .and_then(|s| s.parse::<f64>().ok())
        .filter(|x| x.is_finite())
        .ok_or(CaptionError::Missing(what))
}

/// Recover slot values from prose produced by [`unstructured_caption`] by
/// keyword-anchored number extraction.
pub fn extract_unstructured(text: &str) -> Result<CaptionFields, CaptionError> {
    let mut fields = CaptionFields {
        phase: Phase::EwStraight,
        elapsed: 0,
        q: [0; 4],
        p: [0; 4],
        delay: 0.0,
        thru: 0,
        ttc_p10: TTC_CAP,
        ttc_p50: TTC_CAP,
        brakes: 0,
        red_risk: false,
        near_v: 0.0,
        near_a: 0.0,
        near_d: 0.0,
    };
    let mut seen = [false; 9];
    for raw in text.split(". ") {
        let s = raw.to_lowercase();
        if s.contains("green") {
            fields.phase = Phase::ALL
                .into_iter()
                .find(|&p| s.contains(phase_words(p)))
                .ok_or(CaptionError::Missing("phase"))?;
            fields.elapsed = nth_number(&s, 0, "elapsed")? as u32;
            seen[0] = true;
        } else if s.contains("queue") {
            fields.q = side_values(&s, "queues")?;
            seen[1] = true;
        } else if s.contains("pressure") {
            fields.p = side_values(&s, "pressures")?;
            seen[2] = true;
        } else if s.contains("delay") {
            fields.delay = nth_number(&s, 0, "delay")?;
            seen[3] = true;
        } else if s.contains("half minute") {
            fields.thru = nth_number(&s, 0, "throughput")? as u32;
            seen[4] = true;
        } else if s.contains("collision") {
            fields.ttc_p10 = nth_number(&s, 0, "ttc_p10")?;
            fields.ttc_p50 = nth_number(&s, 1, "ttc_p50")?;
            seen[5] = true;
        } else if s.contains("brak") {
            fields.brakes = nth_number(&s, 0, "brakes")? as u32;
            seen[6] = true;
        } else if s.contains("the red") {
            fields.red_risk = !(s.contains("nobody") || s.contains("no one"));
            seen[7] = true;
        } else if s.contains("stop line") {
            fields.near_d = nth_number(&s, 0, "near_d")?;
            fields.near_v = nth_number(&s, 1, "near_v")?;
            fields.near_a = nth_number(&s, 2, "near_a")?;
            seen[8] = true;
        }
    }
    const NAMES: [&str; 9] = ["phase", "queues", "pressures", "delay", "throughput", "ttc", "brakes", "red risk", "nearest vehicle"];
    if let Some(i) = seen.iter().position(|&s| !s) {
        return Err(CaptionError::Missing(NAMES[i]));
    }
    Ok(fields)
}

/// Slots in seeded random order with unit tokens removed.
pub fn shuffled_no_units(fields: &CaptionFields, seed: u64) -> String {
    let mut rng = Rng::seed_from_u64(seed);
    let mut slots: Vec<String> = fields.slots().iter().map(|(k, v, _)| format!("{k}={v}")).collect();
    slots.shuffle(&mut rng);
    slots.join("; ")
}
