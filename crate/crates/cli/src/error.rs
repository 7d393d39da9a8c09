use std::fmt;

/// A failure reported as one line: `error: <class>: <message>`.
#[derive(Debug)]
pub struct CliError {
    pub class: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(class: &'static str, message: impl Into<String>) -> Self {
        Self {
            class,
            message: message.into(),
        }
    }

    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.class.starts_with("config.") {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let message = self.message.replace('\n', " ");
        write!(f, "error: {}: {}", self.class, message)
    }
}

impl From<coach::Error> for CliError {
    fn from(e: coach::Error) -> Self {
        use coach::Error::*;
        let class = match &e {
            Io { .. } => "io",
            Parse { .. } => "data.parse",
            Registry(_) => "data.registry",
            Split(_) => "data.split",
            Config(_) => "config.invalid",
            Diverged { .. } => "train.diverged",
            Checkpoint(_) => "checkpoint",
            _ => "internal",
        };
        CliError::new(class, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("io", e.to_string())
    }
}
