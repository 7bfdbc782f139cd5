use serde::{Deserialize, Serialize};

/// Which conditions are visible to the model for one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionRegime {
    Uncond,
    TextOnly,
    ImageOnly,
    Joint,
}

impl ConditionRegime {
    pub const ALL: [ConditionRegime; 4] = [
        ConditionRegime::Uncond,
        ConditionRegime::TextOnly,
        ConditionRegime::ImageOnly,
        ConditionRegime::Joint,
    ];

    pub fn from_keep(keep_image: bool, keep_text: bool) -> Self {
        match (keep_image, keep_text) {
            (true, true) => ConditionRegime::Joint,
            (true, false) => ConditionRegime::ImageOnly,
            (false, true) => ConditionRegime::TextOnly,
            (false, false) => ConditionRegime::Uncond,
        }
    }

    pub fn keeps_image(self) -> bool {
        matches!(self, ConditionRegime::ImageOnly | ConditionRegime::Joint)
    }

    pub fn keeps_text(self) -> bool {
        matches!(self, ConditionRegime::TextOnly | ConditionRegime::Joint)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ConditionRegime::Uncond => "uncond",
            ConditionRegime::TextOnly => "text",
            ConditionRegime::ImageOnly => "image",
            ConditionRegime::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

impl std::fmt::Display for ConditionRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
