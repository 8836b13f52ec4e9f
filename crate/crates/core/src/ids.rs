//! UUID source. Random in production; a seeded ChaCha stream in test mode
//! so repeated runs produce identical identifiers.

use parking_lot::Mutex;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use uuid::Uuid;

#[derive(Debug)]
pub struct IdGen {
    seeded: Option<Mutex<ChaCha20Rng>>,
}

impl IdGen {
    pub fn random() -> Self {
        IdGen { seeded: None }
    }

    pub fn seeded(seed: u64) -> Self {
        IdGen { seeded: Some(Mutex::new(ChaCha20Rng::seed_from_u64(seed))) }
    }

    pub fn next_uuid(&self) -> String {
        match &self.seeded {
            None => Uuid::new_v4().to_string(),
            Some(rng) => {
                let mut bytes = [0u8; 16];
                rng.lock().fill_bytes(&mut bytes);
                uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
            }
        }
    }
}

impl Default for IdGen {
    fn default() -> Self {
        IdGen::random()
    }
}
