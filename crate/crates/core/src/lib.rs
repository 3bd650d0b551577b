//! Privacy-preserving contact-tracing matching.
//!
//! A client learns how many of its received contact tokens were sent by
//! users later diagnosed positive, and nothing else. Tokens are blinded with
//! Diffie-Hellman exponents, transformed by a server-held key, truncated, and
//! checked against a day-indexed bucketed database through two-server PIR
//! built on distributed point functions.

pub mod dpf;
pub mod group;
pub mod net;
pub mod par;
pub mod pir;
pub mod psica;
pub mod serverdb;
pub mod system;
pub mod tokens;
