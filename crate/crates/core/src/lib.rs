pub mod agent;
pub mod backends;
pub mod candidates;
pub mod config;
pub mod geometry;
pub mod mask;
pub mod metrics;
pub mod session;
pub mod virtual_cursor;
