#![allow(dead_code)]

use ecbr_core::enclave::{Outcome, SubscriptionOp};
use ecbr_core::filter::encode_publication;
use ecbr_core::provisioning::Initiator;
use ecbr_core::{Context, Enclave, FilterId, Identity, KeyId, KeyRing, Publication, SenderId};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// A client holding an established session with an enclave.
pub struct Client {
    pub ring: KeyRing,
    pub key: KeyId,
}

impl Client {
    pub fn connect(enclave: &mut Enclave, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let identity = Identity::generate(&mut rng);
        let mut ring = KeyRing::new(identity.clone());
        let init = Initiator::new(identity, &mut rng).expecting(enclave.measurement());
        let r = enclave.ecall_session_hello(init.hello());
        let Outcome::HandshakeReply { peer, message } = r.outcome else { panic!("hello refused: {:?}", r.outcome) };
        assert_eq!(peer, ring.sender_id());
        let (finished, session) = init.finish(&message, &mut ring).unwrap();
        let r = enclave.ecall_session_finish(peer, &finished);
        assert!(matches!(r.outcome, Outcome::SessionEstablished { .. }), "{:?}", r.outcome);
        Self { ring, key: session.key_id }
    }

    pub fn id(&self) -> SenderId {
        self.ring.sender_id()
    }

    pub fn subscribe_msg(&mut self, id: FilterId, filter: &str) -> Vec<u8> {
        let op = SubscriptionOp::Subscribe { filter_id: id, filter: filter.into() };
        self.ring.seal(self.key, Context::Sub, &op.encode()).unwrap().to_bytes()
    }

    pub fn unsubscribe_msg(&mut self, id: FilterId) -> Vec<u8> {
        let op = SubscriptionOp::Unsubscribe { filter_id: id };
        self.ring.seal(self.key, Context::Sub, &op.encode()).unwrap().to_bytes()
    }

    pub fn publish_msg(&mut self, p: &Publication) -> Vec<u8> {
        self.ring.seal(self.key, Context::Pub, &encode_publication(p)).unwrap().to_bytes()
    }

    pub fn open_delivery(&self, env: &[u8]) -> Publication {
        let plain = self.ring.open_bytes(env, Context::Pub).unwrap();
        ecbr_core::filter::decode_publication(&plain).unwrap()
    }
}

pub fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}
