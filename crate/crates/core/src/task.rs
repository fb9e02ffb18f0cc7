use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The three downstream tasks, in the canonical det → sem → driv order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Det,
    Sem,
    Driv,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Det, Task::Sem, Task::Driv];

    pub fn index(self) -> usize {
        match self {
            Task::Det => 0,
            Task::Sem => 1,
            Task::Driv => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Det => "det",
            Task::Sem => "sem",
            Task::Driv => "driv",
        }
    }

    pub fn is_segmentation(self) -> bool {
        !matches!(self, Task::Det)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "det" => Ok(Task::Det),
            "sem" => Ok(Task::Sem),
            "driv" => Ok(Task::Driv),
            other => Err(Error::Config(format!("unknown task id `{other}` (expected det, sem or driv)"))),
        }
    }
}

/// One value per task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerTask<T> {
    pub det: T,
    pub sem: T,
    pub driv: T,
}

impl<T> PerTask<T> {
    pub fn new(det: T, sem: T, driv: T) -> Self {
        Self { det, sem, driv }
    }

    pub fn get(&self, task: Task) -> &T {
        match task {
            Task::Det => &self.det,
            Task::Sem => &self.sem,
            Task::Driv => &self.driv,
        }
    }

    pub fn get_mut(&mut self, task: Task) -> &mut T {
        match task {
            Task::Det => &mut self.det,
            Task::Sem => &mut self.sem,
            Task::Driv => &mut self.driv,
        }
    }

    pub fn from_fn(mut f: impl FnMut(Task) -> T) -> Self {
        Self { det: f(Task::Det), sem: f(Task::Sem), driv: f(Task::Driv) }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Task, &T) -> U) -> PerTask<U> {
        PerTask { det: f(Task::Det, &self.det), sem: f(Task::Sem, &self.sem), driv: f(Task::Driv, &self.driv) }
    }
}
