//! Canonical JSON: sorted object keys, shortest round-trip float formatting.

use serde::Serialize;

/// Serializes `value` with object keys in sorted order.
///
/// Going through `serde_json::Value` sorts keys because its map is a
/// `BTreeMap`; floats are printed by `ryu`, which round-trips exactly.
pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

pub fn to_canonical_pretty<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string_pretty(&v)
}

/// Iterates non-blank lines of a JSON Lines document with 1-based numbers.
pub(crate) fn jsonl_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}
