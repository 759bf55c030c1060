//! Out-of-core simulation state kept as memory-mapped files on a ramdisk.
//!
//! The state of a time step is a directory of slab files plus an ASCII
//! metadata file. A stepper maps the read state, computes forces, and writes
//! the next state straight into new mapped files; a driver renames the write
//! state to the read state between steps. Because nothing else survives
//! between steps, copying the state directory is a complete checkpoint.

pub mod arena;
pub mod bench;
pub mod checkpoint;
pub mod driver;
pub mod io_subsystem;
pub mod keyval;
pub mod slab_buffer;
pub mod sim_kernel;
pub mod state_format;

pub use arena::{Arena, ArenaAllocator, ArenaError, MapMode, ReleasePolicy, ReleaseTiming};
pub use slab_buffer::{is_ramdisk, RamdiskConfig, SlabBuffer, SlabHandle, SlabOrigin};
pub use state_format::{SlabId, SlabPayload, SlabType, StateMetadata};
