//! Flag parsing. Every flag takes exactly one value; flags may repeat where
//! a command documents it.

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<epp_core::Error> for CliError {
    fn from(e: epp_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub struct Args {
    flags: Vec<(String, String)>,
}

impl Args {
    pub fn parse(argv: &[String]) -> Result<Self, CliError> {
        let mut flags = Vec::new();
        let mut it = argv.iter();
        while let Some(token) = it.next() {
            let Some(name) = token.strip_prefix("--") else {
                return Err(CliError::Usage(format!(
                    "unexpected positional argument '{token}'"
                )));
            };
            let Some(value) = it.next() else {
                return Err(CliError::Usage(format!("flag --{name} needs a value")));
            };
            flags.push((name.to_string(), value.clone()));
        }
        Ok(Self { flags })
    }

    /// Reject flags outside `allowed` (one message naming all of them).
    pub fn expect_only(&self, allowed: &[&str]) -> Result<(), CliError> {
        let unknown: Vec<String> = self
            .flags
            .iter()
            .filter(|(name, _)| !allowed.contains(&name.as_str()))
            .map(|(name, _)| format!("--{name}"))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "unknown flag(s): {}",
                unknown.join(", ")
            )))
        }
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.flags
            .iter()
            .rev()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all(&self, name: &str) -> Vec<&str> {
        self.flags
            .iter()
            .filter(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
            .collect()
    }

    pub fn require(&self, name: &str) -> Result<&str, CliError> {
        self.get(name)
            .ok_or_else(|| CliError::Usage(format!("missing required flag --{name}")))
    }

    pub fn get_usize(&self, name: &str) -> Result<Option<usize>, CliError> {
        self.get(name)
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| CliError::Usage(format!("--{name} expects an integer, got '{v}'")))
            })
            .transpose()
    }

    pub fn get_u64(&self, name: &str) -> Result<Option<u64>, CliError> {
        self.get(name)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| CliError::Usage(format!("--{name} expects an integer, got '{v}'")))
            })
            .transpose()
    }
}
