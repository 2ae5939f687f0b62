use std::fmt;

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage = 1,
    Data = 2,
    Internal = 3,
}

impl Kind {
    fn as_str(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Data => "data",
            Kind::Internal => "internal",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure {
            kind: Kind::Usage,
            msg: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Failure {
            kind: Kind::Data,
            msg: msg.into(),
        }
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Failure {
            kind: Kind::Internal,
            msg: msg.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

/// `error[kind]: message` on a single line.
impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.kind.as_str(), one_line(&self.msg))
    }
}

pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl From<canids::Error> for Failure {
    fn from(e: canids::Error) -> Self {
        Failure::data(e.to_string())
    }
}

/// Attaches a path to I/O and parse errors.
pub trait Context<T> {
    fn at(self, path: &std::path::Path) -> Result<T, Failure>;
}

impl<T, E: fmt::Display> Context<T> for Result<T, E> {
    fn at(self, path: &std::path::Path) -> Result<T, Failure> {
        self.map_err(|e| Failure::data(format!("{}: {e}", path.display())))
    }
}
