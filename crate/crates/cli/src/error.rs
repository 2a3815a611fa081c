use std::fmt;
use std::path::{Path, PathBuf};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_PIPELINE: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    /// Bad command line, config file or override.
    Config(String),
    /// Missing, unreadable, unwritable or malformed file.
    Io { path: PathBuf, message: String },
    /// A pipeline stage failed on valid inputs.
    Pipeline(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Io { .. } => EXIT_IO,
            Self::Pipeline(_) => EXIT_PIPELINE,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::Pipeline(_) => "pipeline",
        }
    }

    /// One-line JSON object for stderr.
    pub fn to_json(&self) -> String {
        let mut v = serde_json::json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": match self {
                Self::Config(m) | Self::Pipeline(m) => m.clone(),
                Self::Io { message, .. } => message.clone(),
            },
        });
        if let Self::Io { path, .. } = self {
            v["path"] = serde_json::Value::String(path.display().to_string());
        }
        v.to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Io { path, message } => write!(f, "i/o error on {}: {message}", path.display()),
            Self::Pipeline(m) => write!(f, "pipeline error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Core errors on file access keep the path; everything else is a stage failure.
pub fn core_err(path: &Path) -> impl Fn(scanfeat_core::Error) -> CliError + '_ {
    move |e| match e {
        scanfeat_core::Error::Io(_) | scanfeat_core::Error::Format(_) => CliError::io(path, e),
        other => CliError::Pipeline(other.to_string()),
    }
}

pub fn net_err(path: &Path) -> impl Fn(scanfeat_net::NetError) -> CliError + '_ {
    use scanfeat_net::NetError;
    move |e| match e {
        NetError::Io(_) | NetError::Format(_) | NetError::ShapeMismatch(_) => CliError::io(path, e),
        NetError::Core(c) => core_err(path)(c),
        other => CliError::Pipeline(other.to_string()),
    }
}

pub fn pipeline<E: fmt::Display>(e: E) -> CliError {
    CliError::Pipeline(e.to_string())
}
