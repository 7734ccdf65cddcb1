//! Line-oriented JSON events on stdout.

use std::io::Write;

use serde_json::{json, Map, Value};

/// Writes one JSON object per line to stdout.
pub fn emit(stage: &str, event: &str, fields: Value) {
    let mut obj = Map::new();
    obj.insert("stage".into(), json!(stage));
    obj.insert("event".into(), json!(event));
    if let Value::Object(extra) = fields {
        obj.extend(extra);
    }
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", Value::Object(obj));
}

/// Forwards `log` records from the library as JSON events.
struct JsonLogger;

impl log::Log for JsonLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::Level::Info
    }

    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            emit(
                record.target(),
                "log",
                json!({"level": record.level().as_str().to_lowercase(), "message": record.args().to_string()}),
            );
        }
    }

    fn flush(&self) {}
}

static LOGGER: JsonLogger = JsonLogger;

/// Installs the JSON logger once; later calls are no-ops.
pub fn init() {
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(log::LevelFilter::Info);
    }
}
