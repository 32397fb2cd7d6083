//! Two-stream list scheduling of compute and communication events.
//!
//! Events are taken in one topological order (ties keep input order). In
//! sync mode a single stream runs everything, so communication stalls
//! compute. In async mode communication has its own stream and an event
//! waits only for its stream and its dependencies; a trigger/block pair is
//! just a dependency edge into the consumer. Each event then ends no later
//! than the sum of durations up to it in that order, so async never loses.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIMELINE_SCHEMA: &str = "evoshard.timeline/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Compute,
    Comm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sync,
    Async,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub id: String,
    pub stream: Stream,
    pub duration: f64,
    #[serde(default)]
    pub deps: Vec<String>,
}

impl TimelineEvent {
    pub fn new(id: &str, stream: Stream, duration: f64, deps: &[&str]) -> TimelineEvent {
        TimelineEvent { id: id.into(), stream, duration, deps: deps.iter().map(|d| d.to_string()).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledEvent {
    pub id: String,
    pub stream: Stream,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub mode: Mode,
    pub makespan: f64,
    /// In execution order.
    pub events: Vec<ScheduledEvent>,
}

/// Kahn order with ties broken by input position.
fn topo_order(events: &[TimelineEvent]) -> Result<Vec<usize>> {
    let mut index = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        if !e.duration.is_finite() || e.duration < 0.0 {
            return Err(Error::Schedule(format!("event {} has invalid duration {}", e.id, e.duration)));
        }
        if index.insert(e.id.as_str(), i).is_some() {
            return Err(Error::Schedule(format!("duplicate event id {}", e.id)));
        }
    }
    let mut indeg = vec![0usize; events.len()];
    let mut succ = vec![Vec::new(); events.len()];
    for (i, e) in events.iter().enumerate() {
        for d in &e.deps {
            let &j = index
                .get(d.as_str())
                .ok_or_else(|| Error::Schedule(format!("event {} depends on unknown {d}", e.id)))?;
            succ[j].push(i);
            indeg[i] += 1;
        }
    }
    // A binary heap is unnecessary at these sizes; keep the ready list sorted.
    let mut ready: VecDeque<usize> = (0..events.len()).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(events.len());
    while let Some(i) = ready.pop_front() {
        order.push(i);
        for &s in &succ[i] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                let at = ready.partition_point(|&r| r < s);
                ready.insert(at, s);
            }
        }
    }
    if order.len() != events.len() {
        let stuck: Vec<&str> = (0..events.len()).filter(|&i| indeg[i] > 0).map(|i| events[i].id.as_str()).collect();
        return Err(Error::Schedule(format!("dependency cycle through {stuck:?}")));
    }
    Ok(order)
}

pub fn simulate_schedule(events: &[TimelineEvent], mode: Mode) -> Result<Timeline> {
    let order = topo_order(events)?;
    let pos: BTreeMap<&str, usize> = events.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    let mut end = vec![0.0f64; events.len()];
    let (mut compute_free, mut comm_free) = (0.0f64, 0.0f64);
    let mut out = Vec::with_capacity(events.len());
    for i in order {
        let e = &events[i];
        let ready = e.deps.iter().map(|d| end[pos[d.as_str()]]).fold(0.0, f64::max);
        let free = match (mode, e.stream) {
            (Mode::Async, Stream::Comm) => &mut comm_free,
            _ => &mut compute_free,
        };
        let start = ready.max(*free);
        end[i] = start + e.duration;
        *free = end[i];
        out.push(ScheduledEvent { id: e.id.clone(), stream: e.stream, start, end: end[i] });
    }
    let makespan = end.iter().copied().fold(0.0, f64::max);
    Ok(Timeline { mode, makespan, events: out })
}

/// Compute `A` (10) and communication `C` (4) are independent; `B` (5) needs both.
pub fn example_timeline() -> Vec<TimelineEvent> {
    vec![
        TimelineEvent::new("A", Stream::Compute, 10.0, &[]),
        TimelineEvent::new("C", Stream::Comm, 4.0, &[]),
        TimelineEvent::new("B", Stream::Compute, 5.0, &["A", "C"]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub schema: String,
    pub sync: Timeline,
    #[serde(rename = "async")]
    pub async_: Timeline,
    /// `1 - async/sync`; zero for an empty timeline.
    pub saving: f64,
}

pub fn compare_schedules(events: &[TimelineEvent]) -> Result<ScheduleReport> {
    let sync = simulate_schedule(events, Mode::Sync)?;
    let async_ = simulate_schedule(events, Mode::Async)?;
    let saving = if sync.makespan > 0.0 { 1.0 - async_.makespan / sync.makespan } else { 0.0 };
    Ok(ScheduleReport { schema: TIMELINE_SCHEMA.into(), sync, async_, saving })
}

pub const EVENTS_SCHEMA: &str = "evoshard.timeline_events/v1";

/// On-disk list of events to schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventsFile {
    pub schema: String,
    pub events: Vec<TimelineEvent>,
}

impl EventsFile {
    pub fn new(events: Vec<TimelineEvent>) -> EventsFile {
        EventsFile { schema: EVENTS_SCHEMA.into(), events }
    }

    pub fn from_json(s: &str) -> Result<EventsFile> {
        let f: EventsFile = serde_json::from_str(s)?;
        if f.schema != EVENTS_SCHEMA {
            return Err(Error::Parse(format!("unexpected schema {}", f.schema)));
        }
        Ok(f)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
