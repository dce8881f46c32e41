//! Pipeline step identifiers shared by ledgers, metrics, and reports.

use serde::{Deserialize, Serialize};
use std::fmt;

/// The four pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepId {
    TaskGen,
    CodeGen,
    Validate,
    Execute,
}

impl StepId {
    pub const ALL: [StepId; 4] = [StepId::TaskGen, StepId::CodeGen, StepId::Validate, StepId::Execute];

    /// 1-based position in the pipeline.
    pub fn index(self) -> u8 {
        match self {
            StepId::TaskGen => 1,
            StepId::CodeGen => 2,
            StepId::Validate => 3,
            StepId::Execute => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StepId::TaskGen => "task_gen",
            StepId::CodeGen => "code_gen",
            StepId::Validate => "validate",
            StepId::Execute => "execute",
        }
    }
}

impl fmt::Display for StepId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
