//! Clients of the scope service: a blocking HTTP adapter that implements the
//! backend traits, and the live session stream and controls.

pub mod http;
pub mod stream;

pub use http::{http_backends, http_descriptors, HttpBackend};
pub use stream::{ClientError, EventStream, SessionControl};
