use std::fmt;

/// Process exit status of a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub kind: ExitKind,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            kind: ExitKind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure {
            kind: ExitKind::Data,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Failure {
            kind: ExitKind::Numeric,
            message: message.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }

    pub fn context(mut self, what: &str) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    pub fn from_core(e: s2wat::Error) -> Self {
        use s2wat::Error as E;
        let kind = match e {
            E::Config(_) | E::UnknownTap(_) => ExitKind::Usage,
            E::NonFinite(_) | E::Contract(_) => ExitKind::Numeric,
            E::Dimension { .. }
            | E::Geometry(_)
            | E::UnsupportedPadding { .. }
            | E::InputTooSmall(_)
            | E::UnknownParameter(_)
            | E::Format(_)
            | E::Io(_) => ExitKind::Data,
        };
        Failure {
            kind,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl From<s2wat::Error> for Failure {
    fn from(e: s2wat::Error) -> Self {
        Failure::from_core(e)
    }
}

/// Attaches a path to core errors.
pub trait Context<T> {
    fn at(self, path: &std::path::Path) -> Result<T, Failure>;
}

impl<T> Context<T> for Result<T, s2wat::Error> {
    fn at(self, path: &std::path::Path) -> Result<T, Failure> {
        self.map_err(|e| Failure::from_core(e).context(&path.display().to_string()))
    }
}
