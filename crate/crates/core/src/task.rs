use serde::{Deserialize, Serialize};

/// The three LaMP personalization tasks the engine understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Personalized movie tagging.
    Lamp2,
    /// Personalized product rating.
    Lamp3,
    /// Personalized tweet paraphrasing.
    Lamp7,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Lamp2 => "lamp2",
            Task::Lamp3 => "lamp3",
            Task::Lamp7 => "lamp7",
        }
    }

    /// Whether history items of this task carry a label (tag or score).
    pub fn needs_label(self) -> bool {
        !matches!(self, Task::Lamp7)
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['_', '-', ' '], "").as_str() {
            "lamp2" => Ok(Task::Lamp2),
            "lamp3" => Ok(Task::Lamp3),
            "lamp7" => Ok(Task::Lamp7),
            other => Err(format!("unknown task {other:?} (expected lamp2, lamp3 or lamp7)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_variants() {
        assert_eq!("LaMP_2".parse::<Task>().unwrap(), Task::Lamp2);
        assert_eq!("lamp7".parse::<Task>().unwrap(), Task::Lamp7);
        assert!("lamp4".parse::<Task>().is_err());
    }
}
