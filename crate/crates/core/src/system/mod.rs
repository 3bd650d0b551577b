//! The deployed roles (two servers, provider, client app), key material, and
//! the end-to-end simulator.

mod client;
mod servers;
mod simulate;

use std::collections::HashSet;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::group::{GroupElement, Scalar};
use crate::net::new_credential;
use crate::psica::ServerKeyState;
use crate::serverdb::ServerKeyPair;

pub use client::{AlertResult, ClientApp, ClientConfig, QueryOutcome};
pub use servers::{DayBuildReport, Provider, ProviderError, Server1, Server1Config, Server2};
pub use simulate::{dataflow_check, simulate, Encounter, SimConfig, SimError, SimOutput, SimReport, TransportKind};

#[derive(Debug, thiserror::Error)]
pub enum KeyFileError {
    #[error("bad key file: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Server 1's secrets, as stored by `epione keygen`.
#[derive(Clone, Serialize, Deserialize)]
pub struct Server1Secrets {
    pub upload_secret: String,
    pub epoch_id: u32,
    pub exponent: String,
    pub permutation_key: String,
    /// Presented to server 2 before pushing databases.
    pub sync_credential: String,
}

/// What clients and the provider need to know.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicParams {
    pub upload_public: String,
}

/// Server 2's only secret: the credential server 1 presents when syncing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Server2Secrets {
    pub sync_credential: String,
}

impl Server2Secrets {
    pub fn sync_credential(&self) -> Result<[u8; 16], KeyFileError> {
        hex_array(&self.sync_credential, "sync_credential")
    }
}

fn hex_array<const N: usize>(s: &str, what: &str) -> Result<[u8; N], KeyFileError> {
    let v = hex::decode(s).map_err(|e| KeyFileError::Format(format!("{what}: {e}")))?;
    v.try_into().map_err(|_| KeyFileError::Format(format!("{what}: expected {N} bytes")))
}

impl Server1Secrets {
    pub fn generate<R: RngCore + CryptoRng>(epoch_id: u32, rng: &mut R) -> Self {
        let upload = ServerKeyPair::generate(rng);
        let key = ServerKeyState::generate(epoch_id, rng);
        Server1Secrets {
            upload_secret: hex::encode(upload.secret().to_bytes()),
            epoch_id,
            exponent: hex::encode(key.exponent().to_bytes()),
            permutation_key: hex::encode(key.permutation_key()),
            sync_credential: hex::encode(new_credential(rng)),
        }
    }

    pub fn upload_keys(&self) -> Result<ServerKeyPair, KeyFileError> {
        let s = Scalar::from_bytes(&hex_array::<32>(&self.upload_secret, "upload_secret")?)
            .map_err(|e| KeyFileError::Format(e.to_string()))?;
        Ok(ServerKeyPair::from_secret(s))
    }

    pub fn key_state(&self) -> Result<ServerKeyState, KeyFileError> {
        let k = Scalar::from_bytes(&hex_array::<32>(&self.exponent, "exponent")?)
            .map_err(|e| KeyFileError::Format(e.to_string()))?;
        if k.is_zero() {
            return Err(KeyFileError::Format("exponent is zero".into()));
        }
        Ok(ServerKeyState::from_parts(k, self.epoch_id, hex_array(&self.permutation_key, "permutation_key")?))
    }

    pub fn sync_credential(&self) -> Result<[u8; 16], KeyFileError> {
        hex_array(&self.sync_credential, "sync_credential")
    }

    /// Fresh exponent and permutation key for the next epoch.
    pub fn rotate<R: RngCore + CryptoRng>(&mut self, rng: &mut R) {
        let key = ServerKeyState::generate(self.epoch_id + 1, rng);
        self.epoch_id += 1;
        self.exponent = hex::encode(key.exponent().to_bytes());
        self.permutation_key = hex::encode(key.permutation_key());
    }

    pub fn public(&self) -> Result<PublicParams, KeyFileError> {
        Ok(PublicParams { upload_public: hex::encode(self.upload_keys()?.public.to_bytes()) })
    }

    pub fn server2(&self) -> Server2Secrets {
        Server2Secrets { sync_credential: self.sync_credential.clone() }
    }
}

impl PublicParams {
    pub fn upload_public(&self) -> Result<GroupElement, KeyFileError> {
        GroupElement::from_bytes(&hex_array::<32>(&self.upload_public, "upload_public")?)
            .map_err(|e| KeyFileError::Format(e.to_string()))
    }
}

/// Every `N`-byte window of `haystack` that is in `needles`.
pub(crate) fn find_windows<const N: usize>(haystack: &[u8], needles: &HashSet<[u8; N]>) -> usize {
    if needles.is_empty() || haystack.len() < N {
        return 0;
    }
    haystack.windows(N).filter(|w| needles.contains(<&[u8; N]>::try_from(*w).unwrap())).count()
}

#[cfg(test)]
mod tests;
