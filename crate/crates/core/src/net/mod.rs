//! Wire format, transports, and client-side adapters for remote servers.

mod transport;
mod wire;

use rand::{CryptoRng, RngCore};

use crate::group::GroupElement;
use crate::pir::{PirAnswer, PirQuery};
use crate::psica::{BatchProofBundle, DayInfo, PsiError, PsiServer, SessionId};
use crate::serverdb::{DayStore, EncryptedSeed, ReplicaSink};

pub use transport::{
    ConnContext, Direction, Handler, LocalTransport, RecordingHandler, TcpServer, TcpTransport, Transcript,
    TranscriptEntry, Transport,
};
pub use wire::{msg_type, ErrorCode, Message, WireError, FRAME_HEADER_LEN, MAX_FRAME_LEN, WIRE_VERSION};

/// Error reply for a failed server operation.
pub fn error_message(e: &PsiError) -> Message {
    let code = match e {
        PsiError::Policy(_) => ErrorCode::Policy,
        PsiError::RateLimited => ErrorCode::RateLimited,
        PsiError::UnknownDay(_) => ErrorCode::UnknownDay,
        PsiError::BadBatchProof => ErrorCode::BadBatchProof,
        PsiError::Unsupported(_) => ErrorCode::Unsupported,
        PsiError::Protocol(_) | PsiError::Pir(_) | PsiError::Group(_) => ErrorCode::Protocol,
        _ => ErrorCode::Internal,
    };
    Message::error(code, e.to_string())
}

fn remote_error(code: ErrorCode, message: String, day: u32) -> PsiError {
    match code {
        ErrorCode::Policy => PsiError::Policy(message),
        ErrorCode::RateLimited => PsiError::RateLimited,
        ErrorCode::UnknownDay => PsiError::UnknownDay(day),
        ErrorCode::BadBatchProof => PsiError::BadBatchProof,
        ErrorCode::Unsupported => PsiError::Unsupported("remote"),
        ErrorCode::AuthRequired => PsiError::Policy(message),
        _ => PsiError::Transport(format!("{code:?}: {message}")),
    }
}

fn unexpected(m: &Message) -> PsiError {
    PsiError::Protocol(format!("unexpected reply {}", m.name()))
}

fn wire(e: WireError) -> PsiError {
    PsiError::Transport(e.to_string())
}

/// A matching server reached over a [`Transport`].
pub struct RemoteServer<T: Transport> {
    transport: T,
    pending_day: std::sync::Mutex<u32>,
}

impl<T: Transport> RemoteServer<T> {
    pub fn new(transport: T) -> Self {
        RemoteServer { transport, pending_day: std::sync::Mutex::new(0) }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn check(m: Message, day: u32) -> Result<Message, PsiError> {
        match m {
            Message::Error { code, message } => Err(remote_error(code, message, day)),
            m => Ok(m),
        }
    }

    fn call(&self, msg: &Message, day: u32) -> Result<Message, PsiError> {
        Self::check(self.transport.request(msg).map_err(wire)?, day)
    }

    /// Present the client credential used for rate limiting.
    pub fn authenticate(&self, credential: [u8; 16]) -> Result<(), PsiError> {
        match self.call(&Message::Auth { credential }, 0)? {
            Message::Ack => Ok(()),
            m => Err(unexpected(&m)),
        }
    }

    pub fn retained_days(&self) -> Result<Vec<u32>, PsiError> {
        match self.call(&Message::DaysRequest, 0)? {
            Message::Days(d) => Ok(d),
            m => Err(unexpected(&m)),
        }
    }

    /// Forward a batch of sealed seeds (provider to server 1).
    pub fn upload_diagnoses(&self, batch_id: [u8; 16], seeds: &[EncryptedSeed]) -> Result<(), PsiError> {
        match self.call(&Message::DiagnosisUpload { batch_id, seeds: seeds.to_vec() }, 0)? {
            Message::Ack => Ok(()),
            m => Err(unexpected(&m)),
        }
    }
}

impl<T: Transport> PsiServer for RemoteServer<T> {
    fn day_info(&self, day: u32) -> Result<DayInfo, PsiError> {
        match self.call(&Message::DayInfoRequest { day }, day)? {
            Message::DayInfo(i) if i.day == day => Ok(i),
            m => Err(unexpected(&m)),
        }
    }

    fn transform(
        &self,
        session: &SessionId,
        day: u32,
        blinded: &[GroupElement],
        proof: Option<&BatchProofBundle>,
    ) -> Result<Vec<GroupElement>, PsiError> {
        let req = Message::ClientBlind {
            session: *session,
            day,
            elements: blinded.to_vec(),
            proof: proof.cloned().map(Box::new),
        };
        match self.call(&req, day)? {
            Message::ServerTransform { session: s, elements } if s == *session => Ok(elements),
            m => Err(unexpected(&m)),
        }
    }

    fn submit_queries(&self, session: &SessionId, day: u32, queries: &[PirQuery]) -> Result<(), PsiError> {
        *self.pending_day.lock().unwrap() = day;
        let req = Message::PirQueryBatch { session: *session, day, queries: queries.to_vec() };
        self.transport.send(&req).map_err(wire)
    }

    fn collect_answers(&self, session: &SessionId) -> Result<Vec<PirAnswer>, PsiError> {
        let day = *self.pending_day.lock().unwrap();
        match Self::check(self.transport.recv().map_err(wire)?, day)? {
            Message::PirAnswerBatch { session: s, answers } if s == *session => Ok(answers),
            m => Err(unexpected(&m)),
        }
    }
}

/// Server 2 reached over a transport, as a target for database publication.
pub struct RemoteReplica<T: Transport>(pub T);

impl<T: Transport> ReplicaSink for RemoteReplica<T> {
    fn install(&self, store: &DayStore) -> Result<[u8; 32], String> {
        match self.0.request(&Message::DbSync(Box::new(store.clone()))).map_err(|e| e.to_string())? {
            Message::DbInstalled { digest } => Ok(digest),
            Message::Error { message, .. } => Err(message),
            m => Err(format!("unexpected reply {}", m.name())),
        }
    }
}

/// Random 16-byte client credential.
pub fn new_credential<R: RngCore + CryptoRng>(rng: &mut R) -> [u8; 16] {
    let mut c = [0u8; 16];
    rng.fill_bytes(&mut c);
    c
}
