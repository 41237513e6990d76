//! ECG → ICD-10 discharge diagnosis toolkit.
//!
//! The crate covers the whole pipeline: ICD label engineering ([`icd`]),
//! waveform preprocessing ([`signal`]), linking ECGs to ED stays and hospital
//! admissions ([`cohort`]), fold-split labeled datasets ([`dataset`]) and
//! their construction from raw tables ([`build`]),
//! desk-scale S4 and XResNet1d classifiers ([`models`]), the training loop
//! ([`trainer`]) and the bootstrap evaluation engine ([`eval`]).

pub mod build;
pub mod cohort;
pub mod dataset;
pub mod eval;
pub mod icd;
pub mod models;
pub mod signal;
pub mod synth;
pub mod trainer;
