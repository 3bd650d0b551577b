use std::io::{self, Read, Write};

use super::{Token, TOKEN_LEN};

/// On-disk record size: 16-byte token followed by a little-endian day.
pub const CONTACT_RECORD_LEN: usize = TOKEN_LEN + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Contact {
    pub token: Token,
    pub day: u32,
}

/// Tokens received from peers. Sent tokens are never stored; they are
/// regenerated from the seed on demand.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContactLog {
    received: Vec<Contact>,
    window_days: u32,
}

impl ContactLog {
    pub fn new(window_days: u32) -> Self {
        ContactLog { received: Vec::new(), window_days }
    }

    pub fn window_days(&self) -> u32 {
        self.window_days
    }

    pub fn record(&mut self, token: Token, day: u32) {
        self.received.push(Contact { token, day });
    }

    pub fn received(&self) -> &[Contact] {
        &self.received
    }

    pub fn len(&self) -> usize {
        self.received.len()
    }

    pub fn is_empty(&self) -> bool {
        self.received.is_empty()
    }

    /// Distinct received tokens, in first-seen order.
    pub fn distinct_tokens(&self) -> Vec<Token> {
        let mut seen = std::collections::HashSet::new();
        self.received.iter().filter(|c| seen.insert(c.token)).map(|c| c.token).collect()
    }

    /// Drop everything received before `current_day - window_days + 1`.
    pub fn expire(&mut self, current_day: u32) {
        let oldest = (current_day + 1).saturating_sub(self.window_days);
        self.received.retain(|c| c.day >= oldest);
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        for c in &self.received {
            w.write_all(&c.token.0)?;
            w.write_all(&c.day.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, window_days: u32) -> io::Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() % CONTACT_RECORD_LEN != 0 {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "truncated contact record"));
        }
        let received = buf
            .chunks_exact(CONTACT_RECORD_LEN)
            .map(|rec| Contact {
                token: Token(rec[..TOKEN_LEN].try_into().unwrap()),
                day: u32::from_le_bytes(rec[TOKEN_LEN..].try_into().unwrap()),
            })
            .collect();
        Ok(ContactLog { received, window_days })
    }
}

/// A contact event: each side keeps the other's token.
pub fn exchange(a_log: &mut ContactLog, a_token: Token, b_log: &mut ContactLog, b_token: Token, day: u32) {
    a_log.record(b_token, day);
    b_log.record(a_token, day);
}
