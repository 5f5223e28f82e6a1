//! Audio and annotation input, few-shot task assembly, run configuration and
//! the synthetic dataset generator.

mod annotations;
mod config;
pub mod synth;
mod task;
mod wav;

pub use annotations::{
    read_annotation_rows, read_annotations, write_annotations, write_events_csv, AnnotationEvent, AnnotationRow,
};
pub use config::{GraftMode, RunConfig};
pub use synth::{synth_task_set, SynthSpec};
pub use task::{make_support_task, SupportTask, SHOTS};
pub use wav::{read_wav, write_wav, AudioClip};
