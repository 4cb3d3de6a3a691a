//! Peer identity, bootstrap, and the trust-establishment protocol.
//!
//! A network starts with every founding peer generating keys, announcing
//! itself on the other peers' join queues, verifying everyone else's
//! announcement, and exchanging store passwords encrypted peer-to-peer.
//! After that handshake each peer holds a symmetric *trusted* map: the
//! public record plus the store password of every peer it accepted. Peers
//! whose announcement fails signature verification are excluded by
//! everyone.
//!
//! A later join replays the same handshake from one side: the newcomer
//! announces (this time carrying its store password encrypted separately
//! for each recipient), every member verifies, adds it, and mails back its
//! own password.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{self, CryptoScheme, KeyPair, KmsKey};
use crate::data::split_seed;
use crate::queue::QueueService;
use crate::store::{ByteConvention, PeerStore, StoreAddress};
use crate::SimError;

/// The public face of a peer: everything another peer may know before any
/// trust is established. This is also the bootstrap information a newcomer
/// reads from the network's public descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerRecord {
    pub rank: usize,
    /// Base64 as produced by [`crypto::encode_public_key`].
    pub public_key: String,
    pub store_host: String,
    pub store_port: u16,
    pub join_queue: String,
    pub passwords_queue: String,
}

impl PeerRecord {
    pub fn store_key(&self) -> String {
        format!("{}:{}", self.store_host, self.store_port)
    }
}

/// A membership announcement as it travels through a join queue. The
/// signature covers every field except `enc_password` (which differs per
/// recipient) and `sig` itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinAnnouncement {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enc_password: Option<String>,
    pub join_queue: String,
    pub passwords_queue: String,
    pub public_key: String,
    pub rank: usize,
    pub sig: String,
    pub store_host: String,
    pub store_port: u16,
}

/// The exact bytes an announcement signature covers. Field order is fixed
/// by this declaration, so signer and verifier always serialize
/// identically.
#[derive(Serialize)]
struct AnnouncementPayload<'a> {
    join_queue: &'a str,
    passwords_queue: &'a str,
    public_key: &'a str,
    rank: usize,
    store_host: &'a str,
    store_port: u16,
}

/// A store password mailed from one verified peer to another, encrypted to
/// the recipient and signed by the sender.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PasswordMessage {
    pub enc_password: String,
    pub sender_rank: usize,
    pub sig: String,
}

#[derive(Serialize)]
struct PasswordPayload<'a> {
    enc_password: &'a str,
    sender_rank: usize,
}

/// What a peer holds about a peer it has accepted.
#[derive(Clone, PartialEq, Eq)]
pub struct TrustedPeer {
    pub record: PeerRecord,
    pub store_password: String,
}

impl fmt::Debug for TrustedPeer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Password redacted.
        f.debug_struct("TrustedPeer")
            .field("record", &self.record)
            .finish_non_exhaustive()
    }
}

/// One peer's complete identity state: keys, store, and who it trusts.
pub struct PeerIdentity {
    pub rank: usize,
    pub record: PeerRecord,
    pub keypair: KeyPair,
    pub kms: KmsKey,
    pub store: Arc<PeerStore>,
    pub store_password: String,
    pub trusted: BTreeMap<usize, TrustedPeer>,
}

impl fmt::Debug for PeerIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PeerIdentity")
            .field("rank", &self.rank)
            .field("trusted", &self.trusted.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl PeerIdentity {
    /// Unwraps the private key (it is stored only KMS-wrapped) and signs.
    pub fn sign_bytes<R: Rng + rand::CryptoRng>(
        &self,
        msg: &[u8],
        rng: &mut R,
    ) -> Result<Vec<u8>, SimError> {
        let private = self.keypair.unwrap_private(&self.kms)?;
        crypto::sign(&private, msg, rng)
    }

    /// Decrypts a ciphertext addressed to this peer.
    pub fn decrypt_bytes(&self, ct: &[u8]) -> Result<Vec<u8>, SimError> {
        let private = self.keypair.unwrap_private(&self.kms)?;
        crypto::decrypt(&private, ct)
    }

    pub fn trusted_ranks(&self) -> Vec<usize> {
        self.trusted.keys().copied().collect()
    }
}

/// Maps "host:port" to the concrete store, standing in for the network the
/// addresses would otherwise name. The scenario driver owns one.
#[derive(Debug, Default)]
pub struct StoreDirectory {
    stores: BTreeMap<String, Arc<PeerStore>>,
}

impl StoreDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, store: Arc<PeerStore>) {
        self.stores.insert(store.address().to_string(), store);
    }

    /// Resolves a peer record's store address.
    pub fn resolve(&self, record: &PeerRecord) -> Result<&Arc<PeerStore>, SimError> {
        self.stores
            .get(&record.store_key())
            .ok_or_else(|| SimError::NotFound(format!("store {}", record.store_key())))
    }
}

/// Per-peer knobs for [`init_network`]. `bad_signature` makes the peer emit
/// a corrupted announcement signature, for exercising the rejection path.
#[derive(Debug, Clone, Copy)]
pub struct InitPeerConfig {
    pub rank: usize,
    pub bad_signature: bool,
}

impl InitPeerConfig {
    pub fn honest(rank: usize) -> Self {
        Self {
            rank,
            bad_signature: false,
        }
    }
}

/// Result of bootstrapping a network: the peers that made it in, and the
/// ranks everyone rejected.
pub struct InitOutcome {
    pub peers: Vec<PeerIdentity>,
    pub rejected: Vec<usize>,
}

fn join_queue_name(rank: usize) -> String {
    format!("join-{rank}")
}

fn passwords_queue_name(rank: usize) -> String {
    format!("passwords-{rank}")
}

/// Builds one peer's fresh key material, store, and public record.
fn forge_identity(
    rank: usize,
    scheme: CryptoScheme,
    convention: ByteConvention,
    rng: &mut ChaCha20Rng,
) -> Result<PeerIdentity, SimError> {
    let kms = KmsKey::generate(rng);
    let keypair = KeyPair::generate(scheme, &kms, rng)?;
    let store_password = format!("pw-{rank}-{:012x}", rng.gen::<u64>() & 0xFFFF_FFFF_FFFF);
    let address = StoreAddress::new(format!("peer-{rank}.store"), 6400);
    let store = Arc::new(PeerStore::new(address.clone(), store_password.clone(), convention));
    let record = PeerRecord {
        rank,
        public_key: crypto::encode_public_key(&keypair.public),
        store_host: address.host,
        store_port: address.port,
        join_queue: join_queue_name(rank),
        passwords_queue: passwords_queue_name(rank),
    };
    Ok(PeerIdentity {
        rank,
        record,
        keypair,
        kms,
        store,
        store_password,
        trusted: BTreeMap::new(),
    })
}

fn announcement_payload_bytes(record: &PeerRecord) -> Vec<u8> {
    serde_json::to_vec(&AnnouncementPayload {
        join_queue: &record.join_queue,
        passwords_queue: &record.passwords_queue,
        public_key: &record.public_key,
        rank: record.rank,
        store_host: &record.store_host,
        store_port: record.store_port,
    })
    .expect("announcement payload serialization cannot fail")
}

/// Signs `record` into an announcement carrying no password.
fn make_announcement(
    identity: &PeerIdentity,
    corrupt: bool,
    rng: &mut ChaCha20Rng,
) -> Result<JoinAnnouncement, SimError> {
    let mut sig = identity.sign_bytes(&announcement_payload_bytes(&identity.record), rng)?;
    if corrupt {
        let last = sig.len() - 1;
        sig[last] ^= 0x01;
    }
    Ok(JoinAnnouncement {
        enc_password: None,
        join_queue: identity.record.join_queue.clone(),
        passwords_queue: identity.record.passwords_queue.clone(),
        public_key: identity.record.public_key.clone(),
        rank: identity.rank,
        sig: crate::b64(&sig),
        store_host: identity.record.store_host.clone(),
        store_port: identity.record.store_port,
    })
}

/// Verifies an announcement's signature against the key it carries. On
/// success returns the sender's public record.
pub fn verify_announcement(a: &JoinAnnouncement) -> Result<PeerRecord, SimError> {
    let public = crypto::decode_public_key(&a.public_key)?;
    let record = PeerRecord {
        rank: a.rank,
        public_key: a.public_key.clone(),
        store_host: a.store_host.clone(),
        store_port: a.store_port,
        join_queue: a.join_queue.clone(),
        passwords_queue: a.passwords_queue.clone(),
    };
    let payload = announcement_payload_bytes(&record);
    let sig = crate::b64_decode(&a.sig)?;
    if crypto::verify(&public, &payload, &sig) {
        Ok(record)
    } else {
        Err(SimError::BadSignature(a.rank))
    }
}

fn password_payload_bytes(enc_password: &str, sender_rank: usize) -> Vec<u8> {
    serde_json::to_vec(&PasswordPayload {
        enc_password,
        sender_rank,
    })
    .expect("password payload serialization cannot fail")
}

/// Encrypts the sender's store password to `recipient` and signs it.
fn make_password_message(
    sender: &PeerIdentity,
    recipient: &PeerRecord,
    rng: &mut ChaCha20Rng,
) -> Result<PasswordMessage, SimError> {
    let recipient_key = crypto::decode_public_key(&recipient.public_key)?;
    let ct = crypto::encrypt_for(&recipient_key, sender.store_password.as_bytes(), rng)?;
    let enc_password = crate::b64(&ct);
    let sig = sender.sign_bytes(&password_payload_bytes(&enc_password, sender.rank), rng)?;
    Ok(PasswordMessage {
        enc_password,
        sender_rank: sender.rank,
        sig: crate::b64(&sig),
    })
}

/// Verifies a password message against the sender's known record and
/// decrypts the password with the recipient's private key.
fn open_password_message(
    recipient: &PeerIdentity,
    sender: &PeerRecord,
    msg: &PasswordMessage,
) -> Result<String, SimError> {
    let sender_key = crypto::decode_public_key(&sender.public_key)?;
    let payload = password_payload_bytes(&msg.enc_password, msg.sender_rank);
    let sig = crate::b64_decode(&msg.sig)?;
    if !crypto::verify(&sender_key, &payload, &sig) {
        return Err(SimError::BadSignature(msg.sender_rank));
    }
    let password = recipient.decrypt_bytes(&crate::b64_decode(&msg.enc_password)?)?;
    String::from_utf8(password).map_err(|_| SimError::Crypto("password is not valid UTF-8"))
}

/// Bootstraps a fresh network. All peers run the handshake in lockstep:
/// generate keys and announce; verify everyone else's announcement; mail
/// passwords to every verified peer; collect passwords in turn. Peers whose
/// announcement fails verification end up trusted by no one and are
/// reported in [`InitOutcome::rejected`] instead of `peers`.
pub fn init_network(
    configs: &[InitPeerConfig],
    scheme: CryptoScheme,
    convention: ByteConvention,
    queues: &QueueService,
    directory: &mut StoreDirectory,
    master_seed: u64,
) -> Result<InitOutcome, SimError> {
    if configs.len() < 2 {
        return Err(SimError::Config(
            "a network needs at least two founding peers".into(),
        ));
    }
    let mut seen = BTreeMap::new();
    for c in configs {
        if seen.insert(c.rank, ()).is_some() {
            return Err(SimError::Config(format!("duplicate rank {}", c.rank)));
        }
    }

    // Step 1: every peer forges its identity and announces to all others.
    let mut peers = Vec::with_capacity(configs.len());
    let mut rngs = Vec::with_capacity(configs.len());
    for c in configs {
        let mut rng =
            ChaCha20Rng::seed_from_u64(split_seed(master_seed, &format!("identity:{}", c.rank)));
        let identity = forge_identity(c.rank, scheme, convention, &mut rng)?;
        directory.register(Arc::clone(&identity.store));
        peers.push(identity);
        rngs.push(rng);
    }
    for (i, c) in configs.iter().enumerate() {
        let announcement = make_announcement(&peers[i], c.bad_signature, &mut rngs[i])?;
        let bytes = serde_json::to_vec(&announcement)?;
        for other in configs {
            if other.rank != c.rank {
                queues.send(&join_queue_name(other.rank), c.rank, bytes.clone());
            }
        }
    }

    // Step 2: every peer verifies the announcements in its join queue.
    let mut known: Vec<BTreeMap<usize, PeerRecord>> = vec![BTreeMap::new(); peers.len()];
    let mut rejected: BTreeMap<usize, ()> = BTreeMap::new();
    for (i, peer) in peers.iter().enumerate() {
        let queue = join_queue_name(peer.rank);
        for msg in queues.receive(&queue, usize::MAX) {
            match serde_json::from_slice::<JoinAnnouncement>(&msg.payload)
                .map_err(SimError::from)
                .and_then(|a| verify_announcement(&a))
            {
                Ok(record) => {
                    known[i].insert(record.rank, record);
                }
                Err(_) => {
                    rejected.insert(msg.sender_rank, ());
                }
            }
            queues.delete(&queue, msg.id)?;
        }
    }

    // Step 3: every peer mails its password to each peer it verified.
    for (i, _) in configs.iter().enumerate() {
        for record in known[i].values() {
            let pm = make_password_message(&peers[i], record, &mut rngs[i])?;
            queues.send(
                &record.passwords_queue,
                peers[i].rank,
                serde_json::to_vec(&pm)?,
            );
        }
    }

    // Step 4: every peer collects passwords; trust requires both a verified
    // announcement and a verified, decryptable password message.
    for (i, peer) in peers.iter_mut().enumerate() {
        let queue = passwords_queue_name(peer.rank);
        for msg in queues.receive(&queue, usize::MAX) {
            let pm: PasswordMessage = serde_json::from_slice(&msg.payload)?;
            if let Some(record) = known[i].get(&pm.sender_rank) {
                let password = open_password_message(peer, record, &pm)?;
                peer.trusted.insert(
                    pm.sender_rank,
                    TrustedPeer {
                        record: record.clone(),
                        store_password: password,
                    },
                );
            }
            queues.delete(&queue, msg.id)?;
        }
    }

    let rejected: Vec<usize> = rejected.into_keys().collect();
    let peers = peers
        .into_iter()
        .filter(|p| !rejected.contains(&p.rank))
        .collect();
    Ok(InitOutcome { peers, rejected })
}

/// Brings one new peer into an existing network.
///
/// The newcomer reads the members' public records (the network's public
/// descriptor), announces itself on every member's join queue with its
/// store password encrypted separately per recipient, and waits for the
/// members' password replies. A rank that is already present fails with
/// [`SimError::RankCollision`] before any message is sent; a corrupted
/// announcement signature (`corrupt_signature`, for tests) is rejected by
/// every member and leaves all membership state untouched.
#[allow(clippy::too_many_arguments)] // mirrors the join handshake's inputs one-to-one
pub fn join_network(
    rank: usize,
    scheme: CryptoScheme,
    convention: ByteConvention,
    corrupt_signature: bool,
    members: &mut [&mut PeerIdentity],
    queues: &QueueService,
    directory: &mut StoreDirectory,
    seed: u64,
) -> Result<PeerIdentity, SimError> {
    if members.is_empty() {
        return Err(SimError::Config("cannot join an empty network".into()));
    }
    for m in members.iter() {
        if m.rank == rank || m.trusted.contains_key(&rank) {
            return Err(SimError::RankCollision(rank));
        }
    }

    // Step 1: the newcomer forges its identity and reads the descriptor.
    let mut rng = ChaCha20Rng::seed_from_u64(split_seed(seed, &format!("join:{rank}")));
    let mut newcomer = forge_identity(rank, scheme, convention, &mut rng)?;
    let bootstrap: BTreeMap<usize, PeerRecord> =
        members.iter().map(|m| (m.rank, m.record.clone())).collect();

    // Step 2: announce to every member, password encrypted per recipient.
    let mut base = make_announcement(&newcomer, corrupt_signature, &mut rng)?;
    for record in bootstrap.values() {
        let member_key = crypto::decode_public_key(&record.public_key)?;
        let ct = crypto::encrypt_for(&member_key, newcomer.store_password.as_bytes(), &mut rng)?;
        base.enc_password = Some(crate::b64(&ct));
        queues.send(&record.join_queue, rank, serde_json::to_vec(&base)?);
    }

    // Step 3: each member verifies, learns the newcomer's password, and
    // replies with its own.
    let mut any_rejection = false;
    for member in members.iter_mut() {
        let member: &mut PeerIdentity = member;
        let queue = member.record.join_queue.clone();
        let mut member_rng = ChaCha20Rng::seed_from_u64(split_seed(
            seed,
            &format!("join-recv:{}:{}", rank, member.rank),
        ));
        for msg in queues.receive(&queue, usize::MAX) {
            let outcome = serde_json::from_slice::<JoinAnnouncement>(&msg.payload)
                .map_err(SimError::from)
                .and_then(|a| {
                    let record = verify_announcement(&a)?;
                    let enc = a
                        .enc_password
                        .as_deref()
                        .ok_or(SimError::Crypto("join announcement carries no password"))?;
                    let password = member.decrypt_bytes(&crate::b64_decode(enc)?)?;
                    let password = String::from_utf8(password)
                        .map_err(|_| SimError::Crypto("password is not valid UTF-8"))?;
                    Ok((record, password))
                });
            match outcome {
                Ok((record, password)) => {
                    member.trusted.insert(
                        record.rank,
                        TrustedPeer {
                            record: record.clone(),
                            store_password: password,
                        },
                    );
                    let pm = make_password_message(member, &record, &mut member_rng)?;
                    queues.send(&record.passwords_queue, member.rank, serde_json::to_vec(&pm)?);
                }
                Err(_) => any_rejection = true,
            }
            queues.delete(&queue, msg.id)?;
        }
    }

    // Step 4: the newcomer collects the members' passwords, verifying each
    // signature against the descriptor.
    let queue = newcomer.record.passwords_queue.clone();
    for msg in queues.receive(&queue, usize::MAX) {
        let pm: PasswordMessage = serde_json::from_slice(&msg.payload)?;
        if let Some(record) = bootstrap.get(&pm.sender_rank) {
            let password = open_password_message(&newcomer, record, &pm)?;
            newcomer.trusted.insert(
                pm.sender_rank,
                TrustedPeer {
                    record: record.clone(),
                    store_password: password,
                },
            );
        }
        queues.delete(&queue, msg.id)?;
    }

    // Step 5: the newcomer is a member once every current member accepted it.
    if any_rejection || newcomer.trusted.len() != members.len() {
        return Err(SimError::BadSignature(rank));
    }
    directory.register(Arc::clone(&newcomer.store));
    Ok(newcomer)
}
