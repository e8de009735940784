//! Acceptance suite for the `reentangle` workspace. The checks live in
//! `tests/acceptance.rs`; run them with `cargo test -p reentangle-validation`.
