//! Acceptance suite for adafuse; the checks live in `tests/acceptance.rs`.
