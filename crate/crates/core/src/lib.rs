//! Co-located streaming storage and processing.

pub mod bench;
pub mod broker;
pub mod clients;
pub mod pipeline;
pub mod shared_store;
pub mod stream;
pub mod wire;
