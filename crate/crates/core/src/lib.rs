//! Classification of the atrial activation source (sinus rhythm, distal or
//! proximal coronary-sinus pacing) from intracardiac echocardiography
//! heartbeat videos.
//!
//! The crate covers the whole pipeline: corpus manifests and a synthetic
//! corpus generator, preprocessing, training-time augmentation, circular
//! patient-level folds, the 3D ResNet classifier and its training loop,
//! hierarchical majority-vote evaluation, Grad-CAM, and the experiment
//! driver that ties them together.

pub mod augment;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod folds;
pub mod gradcam;
pub mod model;
pub mod preprocess;
pub mod seed;
pub mod train;

pub use corpus::{BeatAnnotation, ClipRecord, DatasetManifest, PacingClass, PatientRecord, VideoTensor, ViewLabel};
pub use error::{Error, Result};
