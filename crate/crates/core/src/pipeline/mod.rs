//! Desk-scale distillation: synthetic scenes, toy networks and training.

pub mod checkpoint;
pub mod run;
pub mod scene;
pub mod toynet;
pub mod train;

pub use run::{distill_run, RunSummary};
pub use scene::{generate_scene, scene_from_boxes, SceneConfig, SyntheticScene};
pub use toynet::ToyNet;
pub use train::{Dataset, Sgd, TrainState};
