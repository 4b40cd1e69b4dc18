//! Grid and random search over the design space, and asynchronous
//! successive halving over epochs.

mod asha;
mod space;
mod sweep;

pub use asha::{AshaConfig, Decision, RungLadder};
pub use space::{DesignChoice, SearchSpace, Strategy, Suggester, DEFAULT_LOCAL_WINDOWS};
pub use sweep::{
    replay, run_sweep, trial_specs, LeaderboardEntry, ReplayEntry, SweepOutcome, TrainingExecutor,
    TrialExecutor, TrialOutcome, TrialSpec,
};
