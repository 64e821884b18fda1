//! Execution traces for the SAVI schedules.
//!
//! One event per latent initialization or gradient-ascent step, in execution
//! order. The line format `<node> <step> <action>` is stable and used for
//! golden-file comparison of the recursive schedule.

use std::fmt;
use std::str::FromStr;

use crate::graph::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceAction {
    Init,
    Ascent,
    Backward,
}

impl fmt::Display for TraceAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TraceAction::Init => "init",
            TraceAction::Ascent => "ascent",
            TraceAction::Backward => "backward",
        };
        f.write_str(s)
    }
}

impl FromStr for TraceAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "init" => Ok(TraceAction::Init),
            "ascent" => Ok(TraceAction::Ascent),
            "backward" => Ok(TraceAction::Backward),
            other => Err(format!("unknown trace action: {other}")),
        }
    }
}

/// One scheduled event: `step` is the node's step counter after the event
/// (0 for an init).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub node: NodeId,
    pub step: usize,
    pub action: TraceAction,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecutionTrace {
    events: Vec<TraceEvent>,
}

impl ExecutionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, node: NodeId, step: usize, action: TraceAction) {
        self.events.push(TraceEvent { node, step, action });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Line-oriented serialization, one `<node> <step> <action>` per event,
    /// newline-terminated.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&format!("{} {} {}\n", e.node, e.step, e.action));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut events = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let err = |what: &str| format!("line {}: {what}", lineno + 1);
            let node: usize = parts
                .next()
                .ok_or_else(|| err("missing node"))?
                .parse()
                .map_err(|_| err("bad node"))?;
            let step: usize = parts
                .next()
                .ok_or_else(|| err("missing step"))?
                .parse()
                .map_err(|_| err("bad step"))?;
            let action: TraceAction = parts
                .next()
                .ok_or_else(|| err("missing action"))?
                .parse()
                .map_err(|e: String| err(&e))?;
            events.push(TraceEvent {
                node: NodeId(node),
                step,
                action,
            });
        }
        Ok(Self { events })
    }
}
