//! Placeholder; filled in once the pipeline modules exist.
fn main() {}
