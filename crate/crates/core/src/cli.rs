//! Command-line interface (under construction).

pub fn run() -> i32 {
    0
}
