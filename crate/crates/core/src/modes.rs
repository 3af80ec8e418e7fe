//! Execution modes: how a mode turns the estimated motion into the field the
//! caches are aligned with, and whether it runs sparse at all.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::motion::MvField;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Edge,
    Cloud,
}

impl Endpoint {
    pub fn as_str(self) -> &'static str {
        match self {
            Endpoint::Edge => "edge",
            Endpoint::Cloud => "cloud",
        }
    }
}

pub trait ExecutionMode: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether this mode consumes estimated motion at all.
    fn needs_motion(&self) -> bool {
        true
    }

    /// Field used for cache alignment given the estimated one.
    fn motion_field(&self, estimated: &MvField) -> MvField;

    /// Forces every frame to be fully recomputed.
    fn dense(&self) -> bool {
        false
    }

    fn pinned_endpoint(&self) -> Option<Endpoint> {
        None
    }
}

/// Per-block motion as estimated.
pub struct FluxShard;

impl ExecutionMode for FluxShard {
    fn name(&self) -> &'static str {
        "fluxshard"
    }

    fn motion_field(&self, estimated: &MvField) -> MvField {
        estimated.clone()
    }
}

/// Full-frame offload on every frame.
pub struct Dense;

impl ExecutionMode for Dense {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn needs_motion(&self) -> bool {
        false
    }

    fn motion_field(&self, estimated: &MvField) -> MvField {
        zero_like(estimated)
    }

    fn dense(&self) -> bool {
        true
    }

    fn pinned_endpoint(&self) -> Option<Endpoint> {
        Some(Endpoint::Cloud)
    }
}

/// Caches stay in a fixed coordinate system.
pub struct FixedCoord;

impl ExecutionMode for FixedCoord {
    fn name(&self) -> &'static str {
        "fixed-coord"
    }

    fn needs_motion(&self) -> bool {
        false
    }

    fn motion_field(&self, estimated: &MvField) -> MvField {
        zero_like(estimated)
    }
}

/// The whole cache shifts by the modal block vector.
pub struct GlobalShift;

impl ExecutionMode for GlobalShift {
    fn name(&self) -> &'static str {
        "global-shift"
    }

    fn motion_field(&self, estimated: &MvField) -> MvField {
        let (dy, dx) = estimated.modal_vector();
        let (gh, gw) = estimated.grid();
        MvField::uniform(estimated.block_size(), gh, gw, dy, dx).expect("grid already validated")
    }
}

fn zero_like(f: &MvField) -> MvField {
    let (gh, gw) = f.grid();
    MvField::zero(f.block_size(), gh, gw).expect("grid already validated")
}

pub struct ModeRegistry {
    modes: BTreeMap<&'static str, Box<dyn ExecutionMode>>,
}

impl Default for ModeRegistry {
    fn default() -> Self {
        let mut r = Self { modes: BTreeMap::new() };
        r.register(Box::new(FluxShard));
        r.register(Box::new(Dense));
        r.register(Box::new(FixedCoord));
        r.register(Box::new(GlobalShift));
        r
    }
}

impl ModeRegistry {
    pub fn register(&mut self, mode: Box<dyn ExecutionMode>) {
        self.modes.insert(mode.name(), mode);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.modes.keys().copied().collect()
    }

    /// Removes and returns a mode by name.
    pub fn take(&mut self, name: &str) -> Result<Box<dyn ExecutionMode>> {
        let known = self.names().join(", ");
        self.modes
            .remove(name)
            .ok_or_else(|| Error::Usage(format!("unknown mode `{name}` (known: {known})")))
    }
}

/// Convenience lookup against the default registry.
pub fn mode_by_name(name: &str) -> Result<Box<dyn ExecutionMode>> {
    ModeRegistry::default().take(name)
}
