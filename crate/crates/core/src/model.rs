// SPDX-License-Identifier: Apache-2.0

//! Phases, phase pairs and the ring-and-barrier structure of an intersection.
//!
//! Everything here is pure: a [`RingBarrierConfig`] is immutable once built
//! and every operation is a function of it, so it can be shared freely
//! between the controller emulator, the middleware and the harness.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest phase id a one-byte phase bitmask can carry.
pub const MAX_PHASES: u8 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("phase id {0} is outside 1..={MAX_PHASES}")]
    PhaseOutOfRange(u8),
    #[error("phase {0} is not part of this configuration")]
    UnknownPhase(PhaseId),
    #[error("phase pair {0} is not admissible")]
    Conflict(PhasePair),
    #[error("phase pair {0} is not in the configured sequence")]
    NotInSequence(PhasePair),
    #[error("invalid action: {0}")]
    InvalidAction(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing configuration: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// A signal phase, numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct PhaseId(u8);

impl PhaseId {
    pub fn new(id: u8) -> Result<Self, ModelError> {
        if (1..=MAX_PHASES).contains(&id) {
            Ok(PhaseId(id))
        } else {
            Err(ModelError::PhaseOutOfRange(id))
        }
    }

    pub const fn get(self) -> u8 {
        self.0
    }

    /// Zero-based slot used for bitmasks and matrix rows.
    pub(crate) const fn index(self) -> usize {
        (self.0 - 1) as usize
    }

    pub fn all() -> impl Iterator<Item = PhaseId> {
        (1..=MAX_PHASES).map(PhaseId)
    }
}

impl TryFrom<u8> for PhaseId {
    type Error = ModelError;

    fn try_from(id: u8) -> Result<Self, Self::Error> {
        PhaseId::new(id)
    }
}

impl From<PhaseId> for u8 {
    fn from(p: PhaseId) -> u8 {
        p.0
    }
}

impl fmt::Display for PhaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Ring {
    One,
    Two,
}

impl TryFrom<u8> for Ring {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Ring::One),
            2 => Ok(Ring::Two),
            other => Err(format!("ring must be 1 or 2, got {other}")),
        }
    }
}

impl From<Ring> for u8 {
    fn from(r: Ring) -> u8 {
        match r {
            Ring::One => 1,
            Ring::Two => 2,
        }
    }
}

/// One phase from each ring, served together. Serialized as `[ring1, ring2]`.
///
/// Construction does not check admissibility; that depends on the
/// configuration and is done by [`RingBarrierConfig::check_pair`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u8; 2]", into = "[u8; 2]")]
pub struct PhasePair {
    pub ring1: PhaseId,
    pub ring2: PhaseId,
}

impl PhasePair {
    pub const fn new(ring1: PhaseId, ring2: PhaseId) -> Self {
        PhasePair { ring1, ring2 }
    }

    /// Convenience constructor from raw ids.
    pub fn from_ids(ring1: u8, ring2: u8) -> Result<Self, ModelError> {
        Ok(PhasePair::new(PhaseId::new(ring1)?, PhaseId::new(ring2)?))
    }

    pub fn phases(self) -> [PhaseId; 2] {
        [self.ring1, self.ring2]
    }

    pub fn contains(self, p: PhaseId) -> bool {
        self.ring1 == p || self.ring2 == p
    }
}

impl TryFrom<[u8; 2]> for PhasePair {
    type Error = ModelError;

    fn try_from(ids: [u8; 2]) -> Result<Self, Self::Error> {
        PhasePair::from_ids(ids[0], ids[1])
    }
}

impl From<PhasePair> for [u8; 2] {
    fn from(p: PhasePair) -> [u8; 2] {
        [p.ring1.get(), p.ring2.get()]
    }
}

impl fmt::Display for PhasePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.ring1, self.ring2)
    }
}

/// Per-phase timing parameters, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub min_green: f64,
    pub max_green: f64,
    pub yellow: f64,
    pub red_clearance: f64,
}

impl PhaseTiming {
    pub fn validate(&self) -> Result<(), String> {
        let finite = [self.min_green, self.max_green, self.yellow, self.red_clearance]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err("timing values must be finite".into());
        }
        if !(self.min_green > 0.0 && self.min_green <= self.max_green) {
            return Err(format!(
                "need 0 < min_green <= max_green, got {} / {}",
                self.min_green, self.max_green
            ));
        }
        if self.yellow <= 0.0 {
            return Err(format!("yellow must be positive, got {}", self.yellow));
        }
        if self.red_clearance < 0.0 {
            return Err(format!(
                "red_clearance must be non-negative, got {}",
                self.red_clearance
            ));
        }
        Ok(())
    }

    pub fn min_green_duration(&self) -> Duration {
        Duration::from_secs_f64(self.min_green)
    }

    pub fn yellow_duration(&self) -> Duration {
        Duration::from_secs_f64(self.yellow)
    }

    pub fn red_clearance_duration(&self) -> Duration {
        Duration::from_secs_f64(self.red_clearance)
    }
}

/// Description of one phase as it appears in a configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub id: PhaseId,
    pub ring: Ring,
    pub barrier: u8,
    pub timing: PhaseTiming,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixRepr {
    Rows(Vec<Vec<u8>>),
    Flat(Vec<u8>),
}

/// File form of [`RingBarrierConfig`]. The compatibility matrix is given
/// row-major with rows and columns in the order of `phases`, either as
/// nested rows or as one flat array of `N*N` zeros and ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntersectionSpec {
    pub phases: Vec<PhaseSpec>,
    compat: MatrixRepr,
    #[serde(default)]
    pub sequence: Vec<PhasePair>,
}

/// Phases, ring and barrier membership, the compatibility matrix, timing and
/// the cyclic phase-pair sequence of one intersection.
#[derive(Debug, Clone, PartialEq)]
pub struct RingBarrierConfig {
    phases: Vec<PhaseId>,
    ring_of: [Option<Ring>; MAX_PHASES as usize],
    barrier_of: [u8; MAX_PHASES as usize],
    compat: [[bool; MAX_PHASES as usize]; MAX_PHASES as usize],
    timing: [Option<PhaseTiming>; MAX_PHASES as usize],
    sequence: Vec<PhasePair>,
}

const STANDARD8: &str = include_str!("../configs/standard8.json");

impl RingBarrierConfig {
    /// Builds and validates a configuration. `compat[i][j]` refers to
    /// `phases[i]` and `phases[j]`.
    pub fn new(phases: Vec<PhaseSpec>, compat: Vec<Vec<bool>>, sequence: Vec<PhasePair>) -> Result<Self, ConfigError> {
        if phases.is_empty() {
            return Err(invalid("no phases configured"));
        }
        let mut cfg = RingBarrierConfig {
            phases: Vec::with_capacity(phases.len()),
            ring_of: [None; MAX_PHASES as usize],
            barrier_of: [0; MAX_PHASES as usize],
            compat: [[false; MAX_PHASES as usize]; MAX_PHASES as usize],
            timing: [None; MAX_PHASES as usize],
            sequence,
        };
        for spec in &phases {
            let slot = spec.id.index();
            if cfg.ring_of[slot].is_some() {
                return Err(invalid(format!("phase {} listed twice", spec.id)));
            }
            spec.timing
                .validate()
                .map_err(|e| invalid(format!("phase {}: {e}", spec.id)))?;
            cfg.ring_of[slot] = Some(spec.ring);
            cfg.barrier_of[slot] = spec.barrier;
            cfg.timing[slot] = Some(spec.timing);
            cfg.phases.push(spec.id);
        }
        for ring in [Ring::One, Ring::Two] {
            if !cfg.phases.iter().any(|p| cfg.ring_of[p.index()] == Some(ring)) {
                return Err(invalid(format!(
                    "ring {} has no phases; two rings are required",
                    u8::from(ring)
                )));
            }
        }

        let n = phases.len();
        if compat.len() != n || compat.iter().any(|row| row.len() != n) {
            return Err(invalid(format!("compatibility matrix must be {n}x{n}")));
        }
        for (a, spec_a) in phases.iter().enumerate() {
            for (b, spec_b) in phases.iter().enumerate() {
                let ok = compat[a][b];
                if ok != compat[b][a] {
                    return Err(invalid(format!(
                        "compatibility matrix is not symmetric at ({}, {})",
                        spec_a.id, spec_b.id
                    )));
                }
                if ok && a == b {
                    return Err(invalid(format!("phase {} marked compatible with itself", spec_a.id)));
                }
                if ok && spec_a.ring == spec_b.ring {
                    return Err(invalid(format!(
                        "phases {} and {} share a ring but are marked compatible",
                        spec_a.id, spec_b.id
                    )));
                }
                if ok && spec_a.barrier != spec_b.barrier {
                    return Err(invalid(format!(
                        "phases {} and {} sit in different barrier groups but are marked compatible",
                        spec_a.id, spec_b.id
                    )));
                }
                cfg.compat[spec_a.id.index()][spec_b.id.index()] = ok;
            }
        }

        for pair in &cfg.sequence {
            cfg.check_pair(*pair)
                .map_err(|e| invalid(format!("sequence entry {pair}: {e}")))?;
        }
        for pair in cfg.enumerate_admissible_pairs() {
            let t = cfg.pair_timing(pair);
            if t.min_green > t.max_green {
                return Err(invalid(format!(
                    "pair {pair}: combined min green {} exceeds combined max green {}",
                    t.min_green, t.max_green
                )));
            }
        }
        Ok(cfg)
    }

    /// Validates a configuration in file form. A sequence is mandatory here since every
    /// loaded configuration may be driven by cyclic actions.
    pub fn from_spec(spec: IntersectionSpec) -> Result<Self, ConfigError> {
        let n = spec.phases.len();
        let compat = match spec.compat {
            MatrixRepr::Rows(rows) => rows,
            MatrixRepr::Flat(flat) => {
                if flat.len() != n * n {
                    return Err(invalid(format!(
                        "flat compatibility matrix needs {} entries, got {}",
                        n * n,
                        flat.len()
                    )));
                }
                flat.chunks(n.max(1)).map(<[u8]>::to_vec).collect()
            }
        };
        let mut bool_rows = Vec::with_capacity(compat.len());
        for row in compat {
            let mut out = Vec::with_capacity(row.len());
            for v in row {
                match v {
                    0 => out.push(false),
                    1 => out.push(true),
                    other => return Err(invalid(format!("matrix entries must be 0 or 1, got {other}"))),
                }
            }
            bool_rows.push(out);
        }
        let cfg = RingBarrierConfig::new(spec.phases, bool_rows, spec.sequence)?;
        if cfg.sequence.is_empty() {
            return Err(invalid("phase sequence is empty"));
        }
        Ok(cfg)
    }

    pub fn to_spec(&self) -> IntersectionSpec {
        let phases = self
            .phases
            .iter()
            .map(|&id| PhaseSpec {
                id,
                ring: self.ring_of[id.index()].expect("configured phase has a ring"),
                barrier: self.barrier_of[id.index()],
                timing: self.timing[id.index()].expect("configured phase has timing"),
            })
            .collect();
        let rows = self
            .phases
            .iter()
            .map(|a| {
                self.phases
                    .iter()
                    .map(|b| u8::from(self.compat[a.index()][b.index()]))
                    .collect()
            })
            .collect();
        IntersectionSpec {
            phases,
            compat: MatrixRepr::Rows(rows),
            sequence: self.sequence.clone(),
        }
    }

    /// The bundled standard 4-leg, 8-phase dual-ring intersection.
    pub fn standard8() -> Self {
        #[derive(Deserialize)]
        struct File {
            intersection: IntersectionSpec,
        }
        let file: File = serde_json::from_str(STANDARD8).expect("bundled standard8.json parses");
        RingBarrierConfig::from_spec(file.intersection).expect("bundled standard8.json is valid")
    }

    /// Same structure with a different phase sequence.
    pub fn with_sequence(&self, sequence: Vec<PhasePair>) -> Result<Self, ConfigError> {
        for pair in &sequence {
            self.check_pair(*pair)
                .map_err(|e| invalid(format!("sequence entry {pair}: {e}")))?;
        }
        Ok(RingBarrierConfig {
            sequence,
            ..self.clone()
        })
    }

    pub fn phases(&self) -> &[PhaseId] {
        &self.phases
    }

    pub fn sequence(&self) -> &[PhasePair] {
        &self.sequence
    }

    pub fn contains(&self, p: PhaseId) -> bool {
        self.ring_of[p.index()].is_some()
    }

    fn require(&self, p: PhaseId) -> Result<(), ModelError> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(ModelError::UnknownPhase(p))
        }
    }

    pub fn ring_of(&self, p: PhaseId) -> Result<Ring, ModelError> {
        self.ring_of[p.index()].ok_or(ModelError::UnknownPhase(p))
    }

    pub fn barrier_of(&self, p: PhaseId) -> Result<u8, ModelError> {
        self.require(p)?;
        Ok(self.barrier_of[p.index()])
    }

    pub fn timing(&self, p: PhaseId) -> Result<PhaseTiming, ModelError> {
        self.timing[p.index()].ok_or(ModelError::UnknownPhase(p))
    }

    /// Conflict-matrix lookup. Symmetric, and false on the diagonal.
    pub fn is_compatible(&self, i: PhaseId, j: PhaseId) -> Result<bool, ModelError> {
        self.require(i)?;
        self.require(j)?;
        Ok(self.compat[i.index()][j.index()])
    }

    /// Ok when `pair` has its first phase in ring 1, its second in ring 2,
    /// and the two are compatible.
    pub fn check_pair(&self, pair: PhasePair) -> Result<(), ModelError> {
        let admissible = self.ring_of(pair.ring1)? == Ring::One
            && self.ring_of(pair.ring2)? == Ring::Two
            && self.is_compatible(pair.ring1, pair.ring2)?;
        if admissible {
            Ok(())
        } else {
            Err(ModelError::Conflict(pair))
        }
    }

    /// Successor of `current` in the cyclic sequence, wrapping at the end.
    pub fn next_pair(&self, current: PhasePair) -> Result<PhasePair, ModelError> {
        let k = self
            .sequence
            .iter()
            .position(|&p| p == current)
            .ok_or(ModelError::NotInSequence(current))?;
        Ok(self.sequence[(k + 1) % self.sequence.len()])
    }

    /// Every (ring-1, ring-2) pair the matrix allows, in ascending order.
    pub fn enumerate_admissible_pairs(&self) -> BTreeSet<PhasePair> {
        let ring = |r| {
            self.phases
                .iter()
                .copied()
                .filter(move |p| self.ring_of[p.index()] == Some(r))
        };
        ring(Ring::One)
            .flat_map(|a| ring(Ring::Two).map(move |b| PhasePair::new(a, b)))
            .filter(|pair| self.compat[pair.ring1.index()][pair.ring2.index()])
            .collect()
    }

    /// Timing that governs a pair served together: the green window is the
    /// intersection of both phases' windows, clearance intervals the longer
    /// of the two.
    pub fn pair_timing(&self, pair: PhasePair) -> PhaseTiming {
        let a = self.timing[pair.ring1.index()].expect("pair phases are configured");
        let b = self.timing[pair.ring2.index()].expect("pair phases are configured");
        PhaseTiming {
            min_green: a.min_green.max(b.min_green),
            max_green: a.max_green.min(b.max_green),
            yellow: a.yellow.max(b.yellow),
            red_clearance: a.red_clearance.max(b.red_clearance),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Selection,
    Switch,
    Duration,
}

impl ActionKind {
    pub const ALL: [ActionKind; 3] = [ActionKind::Selection, ActionKind::Switch, ActionKind::Duration];

    pub fn label(self) -> &'static str {
        match self {
            ActionKind::Selection => "phase_selection",
            ActionKind::Switch => "phase_switch",
            ActionKind::Duration => "phase_duration",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// An agent output in one of the three supported action spaces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Action {
    /// Serve this pair next.
    Selection(PhasePair),
    /// 0 keeps the current pair, 1 advances along the sequence.
    Switch(u8),
    /// Green time of the next pair, as a fraction of its green window.
    Duration(f64),
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Selection(_) => ActionKind::Selection,
            Action::Switch(_) => ActionKind::Switch,
            Action::Duration(_) => ActionKind::Duration,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match *self {
            Action::Selection(_) => Ok(()),
            Action::Switch(0 | 1) => Ok(()),
            Action::Switch(bit) => Err(ModelError::InvalidAction(format!(
                "switch bit must be 0 or 1, got {bit}"
            ))),
            Action::Duration(f) if (0.0..=1.0).contains(&f) => Ok(()),
            Action::Duration(f) => Err(ModelError::InvalidAction(format!(
                "duration fraction {f} outside [0, 1]"
            ))),
        }
    }
}

/// The single form every action is converted to before dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedCommand {
    pub pair: PhasePair,
    /// Green hold, only for duration actions. Millisecond resolution.
    pub hold: Option<Duration>,
}

/// Affine map of `fraction` onto `[min_green, max_green]`, in seconds.
pub fn map_duration(fraction: f64, timing: &PhaseTiming) -> Result<f64, ModelError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(ModelError::InvalidAction(format!(
            "duration fraction {fraction} outside [0, 1]"
        )));
    }
    let g = timing.min_green + fraction * (timing.max_green - timing.min_green);
    Ok(g.clamp(timing.min_green, timing.max_green))
}

fn millis(seconds: f64) -> Duration {
    Duration::from_millis((seconds * 1000.0).round() as u64)
}

/// Converts any action into a [`UnifiedCommand`] relative to the pair
/// currently being served.
pub fn convert_action(
    cfg: &RingBarrierConfig,
    action: &Action,
    current: PhasePair,
) -> Result<UnifiedCommand, ModelError> {
    action.validate()?;
    match *action {
        Action::Selection(pair) => {
            cfg.check_pair(pair)?;
            Ok(UnifiedCommand { pair, hold: None })
        }
        Action::Switch(bit) => {
            let pair = if bit == 0 { current } else { cfg.next_pair(current)? };
            // `current` must itself be a sequence member even when kept.
            cfg.next_pair(current)?;
            cfg.check_pair(pair)?;
            Ok(UnifiedCommand { pair, hold: None })
        }
        Action::Duration(fraction) => {
            let pair = cfg.next_pair(current)?;
            cfg.check_pair(pair)?;
            let seconds = map_duration(fraction, &cfg.pair_timing(pair))?;
            Ok(UnifiedCommand {
                pair,
                hold: Some(millis(seconds)),
            })
        }
    }
}
