//! Command-line tools and the WebSocket frame service for splat avatars.

pub mod bench;
pub mod cli;
pub mod error;
pub mod pipeline;
pub mod record;
pub mod server;
pub mod wire;

/// Worker threads: `ASH_THREADS` if set to a positive integer, otherwise
/// the available parallelism.
pub fn thread_count() -> usize {
    std::env::var("ASH_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
