use std::fmt;

/// Exit statuses of the `volab` binary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

/// Arguments that parse but do not make sense together.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Usage errors win over numeric failures; anything else is a data error.
pub fn classify(err: &anyhow::Error) -> ExitStatus {
    if err.chain().any(|e| e.is::<UsageError>()) {
        return ExitStatus::Usage;
    }
    let numeric = err
        .chain()
        .any(|e| e.downcast_ref::<volab::Error>().is_some_and(volab::Error::is_numeric));
    if numeric {
        ExitStatus::Numeric
    } else {
        ExitStatus::Data
    }
}
