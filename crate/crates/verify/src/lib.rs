//! Acceptance checks for ctxpress; see `tests/acceptance.rs`.
