//! Machine-readable `key = value` reports. Keys keep insertion order so
//! the output is a deterministic function of the command's inputs.

use std::fmt::Display;
use std::hash::{Hash, Hasher};

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Report {
    entries: Vec<(String, String)>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        let mut r = Report::default();
        r.put("command", command);
        r
    }

    pub fn put(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Short stable digest of output bytes, for comparing runs.
pub fn digest(bytes: &[i8]) -> String {
    let mut h = std::hash::DefaultHasher::new();
    bytes.hash(&mut h);
    format!("{:016x}", h.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_order() {
        let mut r = Report::new("plan");
        r.put("b", 1);
        r.put("a", "x");
        assert_eq!(r.render(), "command = plan\nb = 1\na = x\n");
    }

    #[test]
    fn digest_is_stable_for_equal_input() {
        assert_eq!(digest(&[1, 2, 3]), digest(&[1, 2, 3]));
        assert_ne!(digest(&[1, 2, 3]), digest(&[1, 2, 4]));
    }
}
