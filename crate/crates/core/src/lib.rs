//! Needle pose estimation and a simulator for multi-throw robotic suturing.

pub mod controller;
pub mod geometry;
pub mod harness;
pub mod perception;
pub mod simworld;
