#![allow(dead_code)]

pub mod fd;
pub mod modelfd;
pub mod planted;
