#![allow(dead_code)]

pub mod centroid;
pub mod conv;
pub mod grl;
pub mod small;
