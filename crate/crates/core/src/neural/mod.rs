//! Small dense networks, a recording autodiff tape and Adam.

mod adam;
mod net;
mod params;
mod tape;

pub use adam::{lr_schedule, Adam};
pub use net::{Architecture, NetSpec, OutputInit};
pub use params::{load_checkpoint, save_checkpoint, ParamSet, ParamSlice};
pub use tape::{Gradients, Tape, Var};
