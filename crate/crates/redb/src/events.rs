//! Line-oriented event log: `timestamp level event key=value...`, with the
//! timestamp in unix seconds. Every line is flushed as it is written.

use std::fmt::{Display, Write as _};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Info,
    Warn,
    Error,
}

impl Level {
    fn as_str(self) -> &'static str {
        match self {
            Level::Info => "INFO",
            Level::Warn => "WARN",
            Level::Error => "ERROR",
        }
    }
}

pub struct EventLog {
    sink: Mutex<Option<BufWriter<File>>>,
    stderr: bool,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog").field("stderr", &self.stderr).finish()
    }
}

impl EventLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(EventLog {
            sink: Mutex::new(Some(BufWriter::new(file))),
            stderr: false,
        })
    }

    /// Drops everything except, optionally, warnings and errors on stderr.
    pub fn sink(stderr: bool) -> Self {
        EventLog {
            sink: Mutex::new(None),
            stderr,
        }
    }

    pub fn mirror_to_stderr(mut self, on: bool) -> Self {
        self.stderr = on;
        self
    }

    pub fn info(&self, event: &str, fields: &[(&str, &dyn Display)]) {
        self.emit(Level::Info, event, fields);
    }

    pub fn warn(&self, event: &str, fields: &[(&str, &dyn Display)]) {
        self.emit(Level::Warn, event, fields);
    }

    pub fn error(&self, event: &str, fields: &[(&str, &dyn Display)]) {
        self.emit(Level::Error, event, fields);
    }

    pub fn emit(&self, level: Level, event: &str, fields: &[(&str, &dyn Display)]) {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let mut line = format!("{}.{:03} {} {event}", ts.as_secs(), ts.subsec_millis(), level.as_str());
        for (k, v) in fields {
            let v = v.to_string();
            if v.is_empty() || v.contains(char::is_whitespace) || v.contains('"') {
                let _ = write!(line, " {k}={v:?}");
            } else {
                let _ = write!(line, " {k}={v}");
            }
        }
        if self.stderr && level != Level::Info {
            eprintln!("{line}");
        }
        let mut sink = self.sink.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(w) = sink.as_mut() {
            let _ = writeln!(w, "{line}").and_then(|()| w.flush());
        }
    }
}

/// One parsed log line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub level: String,
    pub name: String,
    pub fields: Vec<(String, String)>,
}

impl Event {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Parses log text; quoted values lose their quotes.
pub fn parse_events(text: &str) -> Vec<Event> {
    text.lines()
        .filter_map(|line| {
            let mut rest = line.splitn(4, ' ');
            let _ts = rest.next()?;
            let level = rest.next()?.to_string();
            let name = rest.next()?.to_string();
            let fields = parse_fields(rest.next().unwrap_or(""));
            Some(Event { level, name, fields })
        })
        .collect()
}

fn parse_fields(mut s: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    loop {
        s = s.trim_start();
        let Some(eq) = s.find('=') else { break };
        let key = s[..eq].to_string();
        s = &s[eq + 1..];
        let value;
        if let Some(quoted) = s.strip_prefix('"') {
            let mut end = None;
            let mut escaped = false;
            for (i, c) in quoted.char_indices() {
                match c {
                    '\\' if !escaped => escaped = true,
                    '"' if !escaped => {
                        end = Some(i);
                        break;
                    }
                    _ => escaped = false,
                }
            }
            let end = end.unwrap_or(quoted.len());
            value = quoted[..end].replace("\\\"", "\"").replace("\\\\", "\\");
            s = quoted.get(end + 1..).unwrap_or("");
        } else {
            let end = s.find(' ').unwrap_or(s.len());
            value = s[..end].to_string();
            s = &s[end..];
        }
        out.push((key, value));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_and_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.log");
        let log = EventLog::create(&path).unwrap();
        log.info("round_start", &[("round", &1), ("epoch", &31)]);
        log.warn("note", &[("msg", &"two words"), ("n", &2.5)]);
        drop(log);
        let events = parse_events(&std::fs::read_to_string(&path).unwrap());
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].name, "round_start");
        assert_eq!(events[0].get("epoch"), Some("31"));
        assert_eq!(events[1].level, "WARN");
        assert_eq!(events[1].get("msg"), Some("two words"));
        assert_eq!(events[1].get("n"), Some("2.5"));
    }
}
