//! Semantic imperative local planning on 2D semantic worlds.
//!
//! A two-stream planner network maps a depth scan, a semantic scan and a goal
//! to sparse keypoints and a collision probability. It is trained end to end
//! by pushing analytic gradients of a trajectory cost, evaluated on a smoothed
//! semantic costmap, back through a spline expansion of the keypoints and into
//! the network weights.

pub mod autodiff;
pub mod cli;
pub mod costmap;
pub mod datagen;
pub mod envworld;
pub mod evaluation;
pub mod grid;
pub mod losses;
pub mod planner;
pub mod semantics;
pub mod training;
pub mod trajectory;
