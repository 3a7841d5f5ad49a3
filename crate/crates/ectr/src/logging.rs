//! Minimal stderr logging controlled by the `ECTR_LOG` environment
//! variable: `quiet`, `info` (default), or `trace`.

use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Quiet,
    Info,
    Trace,
}

fn level() -> Level {
    static LEVEL: OnceLock<Level> = OnceLock::new();
    *LEVEL.get_or_init(|| match std::env::var("ECTR_LOG").as_deref() {
        Ok("quiet") => Level::Quiet,
        Ok("trace") => Level::Trace,
        _ => Level::Info,
    })
}

pub fn info(msg: impl AsRef<str>) {
    if level() >= Level::Info {
        eprintln!("[ectr] {}", msg.as_ref());
    }
}

pub fn warn(msg: impl AsRef<str>) {
    if level() >= Level::Info {
        eprintln!("[ectr] warning: {}", msg.as_ref());
    }
}

pub fn trace(msg: impl AsRef<str>) {
    if level() >= Level::Trace {
        eprintln!("[ectr] {}", msg.as_ref());
    }
}
