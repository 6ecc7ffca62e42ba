//! Emulation session lifecycle.

use core::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionState {
    Prepared,
    Booted,
    WebUp,
    Failed,
    Stopped,
}

impl SessionState {
    /// Allowed moves: Prepared→Booted→WebUp→Stopped, Failed from Prepared or
    /// Booted, and stopping from any live state.
    pub fn can_transition(self, to: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, to),
            (Prepared, Booted)
                | (Booted, WebUp)
                | (Prepared, Failed)
                | (Booted, Failed)
                | (WebUp, Stopped)
                | (Booted, Stopped)
                | (Prepared, Stopped)
                | (Failed, Stopped)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionError {
    pub from: SessionState,
    pub to: SessionState,
}

impl fmt::Display for TransitionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "illegal session transition {:?} -> {:?}", self.from, self.to)
    }
}

impl core::error::Error for TransitionError {}

/// State holder that rejects illegal transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lifecycle {
    state: SessionState,
    reached_web: bool,
}

impl Default for Lifecycle {
    fn default() -> Self {
        Lifecycle { state: SessionState::Prepared, reached_web: false }
    }
}

impl Lifecycle {
    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn reached_web(&self) -> bool {
        self.reached_web
    }

    pub fn advance(&mut self, to: SessionState) -> Result<(), TransitionError> {
        if !self.state.can_transition(to) {
            return Err(TransitionError { from: self.state, to });
        }
        self.reached_web |= to == SessionState::WebUp;
        self.state = to;
        Ok(())
    }
}
