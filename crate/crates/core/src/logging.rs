//! Logging setup. `TDA_LOG_LEVEL` picks `error`, `info` (default) or `debug`.

use log::LevelFilter;

pub const LEVEL_VAR: &str = "TDA_LOG_LEVEL";

pub fn level_from(value: Option<&str>) -> LevelFilter {
    match value.map(|v| v.trim().to_ascii_lowercase()).as_deref() {
        Some("error") => LevelFilter::Error,
        Some("debug") => LevelFilter::Debug,
        Some("warn") => LevelFilter::Warn,
        Some("off") => LevelFilter::Off,
        _ => LevelFilter::Info,
    }
}

/// Installs the stderr logger once; later calls are no-ops.
pub fn init() {
    let level = level_from(std::env::var(LEVEL_VAR).ok().as_deref());
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp_millis()
        .format_target(false)
        .try_init();
}
