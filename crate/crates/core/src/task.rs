use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The five human-centric task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Reid,
    Par,
    Seg,
    Pose,
    #[serde(rename = "peddet")]
    PedDet,
}

impl TaskType {
    pub const ALL: [TaskType; 5] = [
        TaskType::Reid,
        TaskType::Par,
        TaskType::Seg,
        TaskType::Pose,
        TaskType::PedDet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Reid => "reid",
            TaskType::Par => "par",
            TaskType::Seg => "seg",
            TaskType::Pose => "pose",
            TaskType::PedDet => "peddet",
        }
    }

    /// Whether each query stands for one class (attribute, joint, part).
    pub fn queries_are_classes(self) -> bool {
        matches!(self, TaskType::Par | TaskType::Seg | TaskType::Pose)
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown task type `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDescriptor {
    pub task_id: String,
    pub task_type: TaskType,
    pub num_queries: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
    /// Learnable prompt tokens appended to every decoder block's
    /// cross-attention memory (deep prompt tuning). Zero disables.
    #[serde(default)]
    pub deep_prompt_tokens: usize,
}

impl TaskDescriptor {
    pub fn new(task_id: impl Into<String>, task_type: TaskType, num_queries: usize) -> Self {
        TaskDescriptor {
            task_id: task_id.into(),
            task_type,
            num_queries,
            class_names: Vec::new(),
            deep_prompt_tokens: 0,
        }
    }

    pub fn with_classes(mut self, names: Vec<String>) -> Self {
        self.class_names = names;
        self
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.task_id.is_empty() || self.task_id.contains(['.', '@']) {
            return Err(Error::config(format!(
                "task id `{}` must be non-empty and free of '.' and '@'",
                self.task_id
            )));
        }
        if self.num_queries == 0 {
            return Err(Error::config(format!("task `{}` has no queries", self.task_id)));
        }
        if self.task_type.queries_are_classes()
            && !self.class_names.is_empty()
            && self.class_names.len() != self.num_queries
        {
            return Err(Error::config(format!(
                "task `{}`: {} class names for {} queries",
                self.task_id,
                self.class_names.len(),
                self.num_queries
            )));
        }
        Ok(())
    }
}
