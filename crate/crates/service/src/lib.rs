//! Interactive session service: clients add "more like A than B"
//! constraints one at a time and receive regenerated images for a fixed set
//! of noise vectors, with per-constraint satisfaction flags.

pub mod error;
pub mod http;
pub mod session;
pub mod store;
pub mod wire;

pub use error::ServiceError;
pub use http::router;
pub use session::{LogEvent, LogHeader, ModelEntry, Session, SessionLog};
pub use store::{load_models, Service};
