//! Hierarchical interest naming.
//!
//! Every signal in the system travels as an interest whose name follows the
//! scheme `ccnx://<app>/<receiver>/<signal>[/<sender>][/<appended>]`:
//!
//! * `RTS` / `CTS` carry the sender as the fourth component, so the receiver
//!   can address the reply.
//! * `check` is a one-way coordinator-to-process notification and carries no
//!   sender; the resume notification reuses the check shape with a literal
//!   `resume` marker as its fourth component.
//! * `flush` carries, percent-escaped into a single trailing component, the
//!   full name of the last interest sent on the channel being flushed.
//! * `discover` follows the check shape and is answered by the named peer
//!   during recovery.
//!
//! Formatting and parsing are exact inverses on valid names, and no two
//! distinct valid names format to the same string.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// URI scheme prefix for every wire-visible name.
pub const SCHEME: &str = "ccnx://";

/// Errors raised when constructing, formatting, or parsing names. Each
/// variant names the offending component.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NameError {
    #[error("name does not start with the {SCHEME} scheme")]
    Scheme,
    #[error("{0} component is empty")]
    Empty(&'static str),
    #[error("{component} component {value:?} contains characters outside [A-Za-z0-9_-]")]
    InvalidIdentifier {
        component: &'static str,
        value: String,
    },
    #[error("unknown signal token {0:?}")]
    UnknownSignal(String),
    #[error("{signal} name must not carry a sender component")]
    UnexpectedSender { signal: &'static str },
    #[error("{signal} name requires a sender component")]
    MissingSender { signal: &'static str },
    #[error("flush name requires an appended name component")]
    MissingAppended,
    #[error("{signal} name must not carry an appended name component")]
    UnexpectedAppended { signal: &'static str },
    #[error("{signal} name has {got} components, expected {expected}")]
    ComponentCount {
        signal: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("appended component has invalid percent-encoding: {0}")]
    BadEscape(String),
    #[error("prefix {0:?} is not of the form /app/name")]
    BadPrefix(String),
}

/// The signal type carried in the third name component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Signal {
    /// Request-to-send: notifies the destination of incoming data.
    Rts,
    /// Clear-to-send: the interest the payload data will satisfy.
    Cts,
    /// One-way checkpoint notification from the coordinator.
    Check,
    /// One-way resume notification; check-shaped with a trailing marker.
    Resume,
    /// Channel flush request carrying the last interest sent.
    Flush,
    /// Direct data push notification (reserved; sender-shaped).
    Data,
    /// Namespace discovery probe used during recovery.
    Discover,
}

impl Signal {
    /// Wire token for the third name component.
    pub fn token(self) -> &'static str {
        match self {
            Signal::Rts => "RTS",
            Signal::Cts => "CTS",
            Signal::Check | Signal::Resume => "check",
            Signal::Flush => "flush",
            Signal::Data => "data",
            Signal::Discover => "discover",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Signal::Rts => "RTS",
            Signal::Cts => "CTS",
            Signal::Check => "check",
            Signal::Resume => "resume",
            Signal::Flush => "flush",
            Signal::Data => "data",
            Signal::Discover => "discover",
        }
    }

    fn takes_sender(self) -> bool {
        matches!(self, Signal::Rts | Signal::Cts | Signal::Data)
    }
}

/// A parsed CCN name: application, receiver, signal type, optional sender,
/// and the optional appended name a flush carries.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StructuredName {
    pub app: String,
    pub receiver: String,
    pub signal: Signal,
    /// Present exactly for RTS, CTS, and data signals.
    pub sender: Option<String>,
    /// Present exactly for flush signals; the unescaped inner name.
    pub appended: Option<String>,
}

impl StructuredName {
    pub fn rts(app: &str, receiver: &str, sender: &str) -> Self {
        Self {
            app: app.to_string(),
            receiver: receiver.to_string(),
            signal: Signal::Rts,
            sender: Some(sender.to_string()),
            appended: None,
        }
    }

    pub fn cts(app: &str, receiver: &str, sender: &str) -> Self {
        Self {
            signal: Signal::Cts,
            ..Self::rts(app, receiver, sender)
        }
    }

    pub fn check(app: &str, receiver: &str) -> Self {
        Self {
            app: app.to_string(),
            receiver: receiver.to_string(),
            signal: Signal::Check,
            sender: None,
            appended: None,
        }
    }

    pub fn resume(app: &str, receiver: &str) -> Self {
        Self {
            signal: Signal::Resume,
            ..Self::check(app, receiver)
        }
    }

    pub fn discover(app: &str, receiver: &str) -> Self {
        Self {
            signal: Signal::Discover,
            ..Self::check(app, receiver)
        }
    }

    pub fn flush(app: &str, receiver: &str, appended: &str) -> Self {
        Self {
            app: app.to_string(),
            receiver: receiver.to_string(),
            signal: Signal::Flush,
            sender: None,
            appended: Some(appended.to_string()),
        }
    }

    /// Checks the per-signal shape invariants and the identifier alphabet.
    pub fn validate(&self) -> Result<(), NameError> {
        validate_identifier("app", &self.app)?;
        validate_identifier("receiver", &self.receiver)?;
        if self.signal.takes_sender() {
            match &self.sender {
                Some(s) => validate_identifier("sender", s)?,
                None => {
                    return Err(NameError::MissingSender {
                        signal: self.signal.label(),
                    })
                }
            }
        } else if self.sender.is_some() {
            return Err(NameError::UnexpectedSender {
                signal: self.signal.label(),
            });
        }
        match self.signal {
            Signal::Flush => match &self.appended {
                Some(a) if a.is_empty() => return Err(NameError::Empty("appended")),
                Some(_) => {}
                None => return Err(NameError::MissingAppended),
            },
            _ => {
                if self.appended.is_some() {
                    return Err(NameError::UnexpectedAppended {
                        signal: self.signal.label(),
                    });
                }
            }
        }
        Ok(())
    }

    /// The routing prefix `/app/receiver` every name begins with.
    pub fn routing_prefix(&self) -> NamePrefix {
        NamePrefix(vec![self.app.clone(), self.receiver.clone()])
    }

    /// Name components in wire order (appended component escaped).
    pub fn components(&self) -> Vec<String> {
        let mut parts = vec![
            self.app.clone(),
            self.receiver.clone(),
            self.signal.token().to_string(),
        ];
        if let Some(s) = &self.sender {
            parts.push(s.clone());
        }
        if self.signal == Signal::Resume {
            parts.push("resume".to_string());
        }
        if let Some(a) = &self.appended {
            parts.push(escape_component(a));
        }
        parts
    }
}

impl fmt::Display for StructuredName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{SCHEME}{}", self.components().join("/"))
    }
}

impl FromStr for StructuredName {
    type Err = NameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_name(s)
    }
}

/// Formats a name to its wire string, rejecting invariant violations.
pub fn format_name(n: &StructuredName) -> Result<String, NameError> {
    n.validate()?;
    Ok(n.to_string())
}

/// Parses a wire string, the exact inverse of [`format_name`] on valid names.
pub fn parse_name(s: &str) -> Result<StructuredName, NameError> {
    let rest = s.strip_prefix(SCHEME).ok_or(NameError::Scheme)?;
    let parts: Vec<&str> = rest.split('/').collect();
    if parts.len() < 3 {
        return Err(NameError::ComponentCount {
            signal: "any",
            expected: 3,
            got: parts.len(),
        });
    }
    let app = parse_identifier("app", parts[0])?;
    let receiver = parse_identifier("receiver", parts[1])?;
    if parts[2].is_empty() {
        return Err(NameError::Empty("signal"));
    }

    let name = match parts[2] {
        "RTS" | "CTS" | "data" => {
            let signal = match parts[2] {
                "RTS" => Signal::Rts,
                "CTS" => Signal::Cts,
                _ => Signal::Data,
            };
            match parts.len() {
                3 => {
                    return Err(NameError::MissingSender {
                        signal: signal.label(),
                    })
                }
                4 => StructuredName {
                    app,
                    receiver,
                    signal,
                    sender: Some(parse_identifier("sender", parts[3])?),
                    appended: None,
                },
                n => {
                    return Err(NameError::ComponentCount {
                        signal: signal.label(),
                        expected: 4,
                        got: n,
                    })
                }
            }
        }
        "check" => match parts.len() {
            3 => StructuredName {
                app,
                receiver,
                signal: Signal::Check,
                sender: None,
                appended: None,
            },
            4 if parts[3] == "resume" => StructuredName {
                app,
                receiver,
                signal: Signal::Resume,
                sender: None,
                appended: None,
            },
            4 => return Err(NameError::UnexpectedSender { signal: "check" }),
            n => {
                return Err(NameError::ComponentCount {
                    signal: "check",
                    expected: 3,
                    got: n,
                })
            }
        },
        "discover" => match parts.len() {
            3 => StructuredName {
                app,
                receiver,
                signal: Signal::Discover,
                sender: None,
                appended: None,
            },
            4 => return Err(NameError::UnexpectedSender { signal: "discover" }),
            n => {
                return Err(NameError::ComponentCount {
                    signal: "discover",
                    expected: 3,
                    got: n,
                })
            }
        },
        "flush" => match parts.len() {
            3 => return Err(NameError::MissingAppended),
            4 => {
                let appended = unescape_component(parts[3])?;
                if appended.is_empty() {
                    return Err(NameError::Empty("appended"));
                }
                StructuredName {
                    app,
                    receiver,
                    signal: Signal::Flush,
                    sender: None,
                    appended: Some(appended),
                }
            }
            n => {
                return Err(NameError::ComponentCount {
                    signal: "flush",
                    expected: 4,
                    got: n,
                })
            }
        },
        other => return Err(NameError::UnknownSignal(other.to_string())),
    };
    Ok(name)
}

// ---------------------------------------------------------------------------
// Prefixes
// ---------------------------------------------------------------------------

/// A name prefix used for FIB registration and longest-prefix matching,
/// written `/app/name` externally.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NamePrefix(pub Vec<String>);

impl NamePrefix {
    pub fn parse(s: &str) -> Result<Self, NameError> {
        let rest = s
            .strip_prefix('/')
            .ok_or_else(|| NameError::BadPrefix(s.to_string()))?;
        if rest.is_empty() {
            return Err(NameError::BadPrefix(s.to_string()));
        }
        let parts: Vec<String> = rest.split('/').map(str::to_string).collect();
        for p in &parts {
            if p.is_empty() || !p.bytes().all(is_identifier_byte) {
                return Err(NameError::BadPrefix(s.to_string()));
            }
        }
        Ok(NamePrefix(parts))
    }

    /// Number of components; longer matching prefixes win.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True when every component equals the leading components of `name`.
    pub fn matches(&self, name: &StructuredName) -> bool {
        let comps = name.components();
        self.0.len() <= comps.len() && self.0.iter().zip(&comps).all(|(a, b)| a == b)
    }
}

impl fmt::Display for NamePrefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "/{}", self.0.join("/"))
    }
}

impl TryFrom<String> for NamePrefix {
    type Error = NameError;
    fn try_from(s: String) -> Result<Self, NameError> {
        NamePrefix::parse(&s)
    }
}

impl From<NamePrefix> for String {
    fn from(p: NamePrefix) -> String {
        p.to_string()
    }
}

// ---------------------------------------------------------------------------
// Component escaping
// ---------------------------------------------------------------------------

fn is_identifier_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b == b'-'
}

fn validate_identifier(component: &'static str, s: &str) -> Result<(), NameError> {
    if s.is_empty() {
        return Err(NameError::Empty(component));
    }
    if !s.bytes().all(is_identifier_byte) {
        return Err(NameError::InvalidIdentifier {
            component,
            value: s.to_string(),
        });
    }
    Ok(())
}

fn parse_identifier(component: &'static str, s: &str) -> Result<String, NameError> {
    validate_identifier(component, s)?;
    Ok(s.to_string())
}

/// Percent-escapes every byte outside the identifier alphabet so the result
/// occupies exactly one path component.
pub fn escape_component(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if is_identifier_byte(b) {
            out.push(b as char);
        } else {
            out.push('%');
            out.push_str(&format!("{b:02X}"));
        }
    }
    out
}

/// Inverse of [`escape_component`].
pub fn unescape_component(s: &str) -> Result<String, NameError> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'%' => {
                if i + 2 >= bytes.len() {
                    return Err(NameError::BadEscape(s.to_string()));
                }
                let hex = std::str::from_utf8(&bytes[i + 1..i + 3])
                    .map_err(|_| NameError::BadEscape(s.to_string()))?;
                let v =
                    u8::from_str_radix(hex, 16).map_err(|_| NameError::BadEscape(s.to_string()))?;
                out.push(v);
                i += 3;
            }
            b if is_identifier_byte(b) => {
                out.push(b);
                i += 1;
            }
            _ => return Err(NameError::BadEscape(s.to_string())),
        }
    }
    String::from_utf8(out).map_err(|_| NameError::BadEscape(s.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn formats_rts_per_naming_rules() {
        let n = StructuredName::rts("fib", "nodeB", "nodeA");
        assert_eq!(format_name(&n).unwrap(), "ccnx://fib/nodeB/RTS/nodeA");
    }

    #[test]
    fn formats_check_without_sender() {
        let n = StructuredName::check("fib", "nodeB");
        assert_eq!(format_name(&n).unwrap(), "ccnx://fib/nodeB/check");
    }

    #[test]
    fn formats_flush_with_escaped_inner_name() {
        let n = StructuredName::flush("fib", "nodeB", "ccnx://fib/nodeA/CTS/nodeB");
        let s = format_name(&n).unwrap();
        assert_eq!(
            s,
            "ccnx://fib/nodeB/flush/ccnx%3A%2F%2Ffib%2FnodeA%2FCTS%2FnodeB"
        );
        // The output must itself round-trip.
        assert_eq!(parse_name(&s).unwrap(), n);
    }

    #[test]
    fn parses_rts() {
        let n = parse_name("ccnx://fib/nodeB/RTS/nodeA").unwrap();
        assert_eq!(n, StructuredName::rts("fib", "nodeB", "nodeA"));
    }

    #[test]
    fn rejects_check_with_sender() {
        let err = parse_name("ccnx://fib/nodeB/check/nodeA").unwrap_err();
        assert_eq!(err, NameError::UnexpectedSender { signal: "check" });
    }

    #[test]
    fn resume_is_check_shaped_with_marker() {
        let n = StructuredName::resume("fib", "nodeB");
        let s = format_name(&n).unwrap();
        assert_eq!(s, "ccnx://fib/nodeB/check/resume");
        assert_eq!(parse_name(&s).unwrap(), n);
    }

    #[test]
    fn rejects_malformed_inputs_with_component_errors() {
        assert_eq!(parse_name("http://a/b/check").unwrap_err(), NameError::Scheme);
        assert_eq!(
            parse_name("ccnx://fib//check").unwrap_err(),
            NameError::Empty("receiver")
        );
        assert_eq!(
            parse_name("ccnx://fib/nodeB/nack").unwrap_err(),
            NameError::UnknownSignal("nack".to_string())
        );
        assert_eq!(
            parse_name("ccnx://fib/nodeB/RTS").unwrap_err(),
            NameError::MissingSender { signal: "RTS" }
        );
        assert_eq!(
            parse_name("ccnx://fib/nodeB/RTS/a/b").unwrap_err(),
            NameError::ComponentCount {
                signal: "RTS",
                expected: 4,
                got: 5
            }
        );
        assert_eq!(
            parse_name("ccnx://fib/nodeB/flush").unwrap_err(),
            NameError::MissingAppended
        );
        assert!(matches!(
            parse_name("ccnx://fib/node B/check").unwrap_err(),
            NameError::InvalidIdentifier { component: "receiver", .. }
        ));
    }

    #[test]
    fn escape_is_bijective_on_tricky_strings() {
        for s in ["a%2F", "%", "a/b", "ccnx://x/y/RTS/z", "\u{00e9}clair"] {
            let esc = escape_component(s);
            assert!(esc.bytes().all(|b| is_identifier_byte(b) || b == b'%'));
            assert_eq!(unescape_component(&esc).unwrap(), s);
        }
        assert!(unescape_component("abc%2").is_err());
        assert!(unescape_component("abc%zz").is_err());
        assert!(unescape_component("a b").is_err());
    }

    #[test]
    fn prefix_matching_routes_every_signal_to_receiver() {
        let p = NamePrefix::parse("/fib/nodeB").unwrap();
        for n in [
            StructuredName::rts("fib", "nodeB", "nodeA"),
            StructuredName::cts("fib", "nodeB", "nodeA"),
            StructuredName::check("fib", "nodeB"),
            StructuredName::resume("fib", "nodeB"),
            StructuredName::discover("fib", "nodeB"),
            StructuredName::flush("fib", "nodeB", "ccnx://fib/nodeA/RTS/nodeB"),
        ] {
            assert!(p.matches(&n), "{n}");
            assert!(n.to_string().starts_with("ccnx://fib/nodeB/"));
        }
        assert!(!p.matches(&StructuredName::check("fib", "nodeC")));
        assert!(!NamePrefix::parse("/other/nodeB").unwrap().matches(
            &StructuredName::check("fib", "nodeB")
        ));
    }

    fn ident_strategy() -> impl Strategy<Value = String> {
        proptest::string::string_regex("[A-Za-z0-9_-]{1,12}").unwrap()
    }

    fn name_strategy() -> impl Strategy<Value = StructuredName> {
        (
            ident_strategy(),
            ident_strategy(),
            ident_strategy(),
            proptest::string::string_regex(".{1,40}").unwrap(),
            0usize..7,
        )
            .prop_map(|(app, recv, sender, appended, which)| match which {
                0 => StructuredName::rts(&app, &recv, &sender),
                1 => StructuredName::cts(&app, &recv, &sender),
                2 => StructuredName::check(&app, &recv),
                3 => StructuredName::resume(&app, &recv),
                4 => StructuredName::discover(&app, &recv),
                5 => StructuredName::flush(&app, &recv, &appended),
                _ => StructuredName {
                    app,
                    receiver: recv,
                    signal: Signal::Data,
                    sender: Some(sender),
                    appended: None,
                },
            })
    }

    proptest! {
        #[test]
        fn round_trip_identity(n in name_strategy()) {
            let s = format_name(&n).unwrap();
            prop_assert_eq!(parse_name(&s).unwrap(), n);
        }

        #[test]
        fn formatting_is_injective(a in name_strategy(), b in name_strategy()) {
            let sa = format_name(&a).unwrap();
            let sb = format_name(&b).unwrap();
            if a != b {
                prop_assert_ne!(sa, sb);
            }
        }

        #[test]
        fn output_starts_with_routing_prefix(n in name_strategy()) {
            let s = format_name(&n).unwrap();
            let expected = format!("ccnx://{}/{}/", n.app, n.receiver);
            prop_assert!(s.starts_with(&expected));
        }
    }
}
