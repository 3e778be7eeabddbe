pub mod bilevel;
pub mod config;
pub mod mcp;
pub mod nash;
pub mod problems;
pub mod racing;
pub mod sim;
pub mod study;
