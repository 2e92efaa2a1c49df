//! Identifier newtypes.
//!
//! Store-generated ids are a one-letter prefix followed by an eight digit,
//! zero-padded counter, so lexicographic order equals creation order.

use std::borrow::Borrow;
use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }

        impl Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }
    };
}

id_newtype!(ProjectId);
id_newtype!(
    /// Warehouse data object id.
    ObjectId
);
id_newtype!(AppId);
id_newtype!(TaskId);
id_newtype!(
    /// Workflow instance id.
    InstanceId
);
id_newtype!(
    /// Compute resource id, chosen by whoever registers the resource.
    ResourceId
);
id_newtype!(RuleId);
id_newtype!(UserId);

pub(crate) fn format_id(prefix: char, n: u64) -> String {
    format!("{prefix}{n:08}")
}

/// Logical time. The scheduler advances it once per tick.
pub type Tick = u64;
