//! Library side of the `pairdet` command-line tool.

pub mod checks;
pub mod commands;
pub mod manifest;
pub mod oracles;
