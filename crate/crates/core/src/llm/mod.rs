//! Transformer layers on the mesh: dense reference, per-phase plans,
//! distributed execution, the prefill-to-decode transition and autotuning.

pub mod autotune;
pub mod exec;
pub mod model;
pub mod plan;
pub mod reference;
pub mod shape;
pub mod transition;
pub mod weights;

pub use autotune::{autotune, tuning_inputs, AutotuneReport, IoLengths};
pub use exec::{execute_layer, LayerRun};
pub use model::{generate_distributed, Deployment, ModelRun};
pub use plan::{plan_decode, plan_prefill, LayerPlan, OpKind, Phase};
pub use reference::{generate, DenseKv, Generation};
pub use shape::ModelShape;
pub use transition::{transition, Transition};
pub use weights::{LayerWeights, ModelWeights};
