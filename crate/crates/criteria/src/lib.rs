//! Holds the `acceptance` test target. Run it with
//! `cargo test -p viewco-criteria --test acceptance`.
