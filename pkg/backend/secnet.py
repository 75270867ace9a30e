"""
PKI identities, certificate handshake and sealed channels
Overlay members only ever talk to peers holding a certificate from the community CA
"""

import hashlib
import hmac
import logging
import struct
import time
from dataclasses import dataclass, field
from typing import Optional, Protocol, Tuple, Union

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from typing_extensions import Self

from errors import AuthenticationFailure, HandshakeRejected, ReplayError

logger = logging.getLogger(__name__)

CA_LABEL = "archer-ca"
CERT_MAGIC = b"ACRT"
CERT_VERSION = 1
NODE_ID_BYTES = 32
COUNTER_BYTES = 8
HANDSHAKE_CONTEXT = b"archer-handshake-v1"
CHANNEL_CONTEXT = b"archer-channel-v1"


class CryptoSuite(Protocol):
    """Signature, key agreement and AEAD primitives used by secnet"""

    name: str
    tag_size: int

    def keypair(self, seed: bytes) -> Tuple[bytes, bytes]: ...

    def sign(self, private_key: bytes, message: bytes) -> bytes: ...

    def verify(self, public_key: bytes, signature: bytes, message: bytes) -> bool: ...

    def agree(self, private_key: bytes, peer_public_key: bytes) -> bytes: ...

    def derive(self, secret: bytes, salt: bytes, info: bytes) -> bytes: ...

    def encrypt(self, key: bytes, nonce: bytes, plaintext: bytes, aad: bytes) -> bytes: ...

    def decrypt(self, key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes) -> bytes: ...


class StandardSuite:
    """Ed25519 signatures, X25519 agreement, HKDF-SHA256 and ChaCha20-Poly1305

    Public keys are ed25519_public || x25519_public, private keys the two raw seeds.
    """

    name = "ed25519-x25519-chacha20poly1305"
    tag_size = 16

    def keypair(self, seed: bytes) -> Tuple[bytes, bytes]:
        ed_seed = hashlib.sha256(b"ed25519:" + seed).digest()
        x_seed = hashlib.sha256(b"x25519:" + seed).digest()
        ed_pub = Ed25519PrivateKey.from_private_bytes(ed_seed).public_key()
        x_pub = X25519PrivateKey.from_private_bytes(x_seed).public_key()
        raw = serialization.Encoding.Raw, serialization.PublicFormat.Raw
        return ed_pub.public_bytes(*raw) + x_pub.public_bytes(*raw), ed_seed + x_seed

    def sign(self, private_key: bytes, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(private_key[:32]).sign(message)

    def verify(self, public_key: bytes, signature: bytes, message: bytes) -> bool:
        if len(public_key) != 64:
            return False
        try:
            Ed25519PublicKey.from_public_bytes(public_key[:32]).verify(signature, message)
        except (InvalidSignature, ValueError):
            return False
        return True

    def agree(self, private_key: bytes, peer_public_key: bytes) -> bytes:
        mine = X25519PrivateKey.from_private_bytes(private_key[32:])
        return mine.exchange(X25519PublicKey.from_public_bytes(peer_public_key[32:]))

    def derive(self, secret: bytes, salt: bytes, info: bytes) -> bytes:
        return HKDF(algorithm=hashes.SHA256(), length=32, salt=salt or None, info=info).derive(secret)

    def encrypt(self, key: bytes, nonce: bytes, plaintext: bytes, aad: bytes) -> bytes:
        return ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)

    def decrypt(self, key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes) -> bytes:
        try:
            return ChaCha20Poly1305(key).decrypt(nonce, ciphertext, aad)
        except InvalidTag as e:
            raise AuthenticationFailure("ciphertext failed authentication") from e


DEFAULT_SUITE = StandardSuite()


@dataclass(frozen=True)
class Identity:
    node_id: int
    public_key: bytes
    private_key: bytes = field(repr=False)


@dataclass(frozen=True)
class Certificate:
    subject_node_id: int
    subject_public_key: bytes
    issuer: str
    expiry: int
    signature: bytes = b""

    def tbs_bytes(self) -> bytes:
        """Canonical to-be-signed encoding; see docs/certificate_layout.md"""
        issuer = self.issuer.encode("utf-8")
        return b"".join(
            [
                CERT_MAGIC,
                struct.pack(">B", CERT_VERSION),
                struct.pack(">H", NODE_ID_BYTES),
                self.subject_node_id.to_bytes(NODE_ID_BYTES, "big"),
                struct.pack(">H", len(self.subject_public_key)),
                self.subject_public_key,
                struct.pack(">H", len(issuer)),
                issuer,
                struct.pack(">Q", self.expiry),
            ]
        )

    def to_bytes(self) -> bytes:
        return self.tbs_bytes() + struct.pack(">H", len(self.signature)) + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> Self:
        """Parse the canonical layout; raises ValueError on any malformation"""
        view = memoryview(data)
        pos = 0

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(view):
                raise ValueError("truncated certificate")
            chunk = bytes(view[pos:pos + n])
            pos += n
            return chunk

        def take_field() -> bytes:
            (length,) = struct.unpack(">H", take(2))
            return take(length)

        if take(4) != CERT_MAGIC:
            raise ValueError("bad certificate magic")
        (version,) = struct.unpack(">B", take(1))
        if version != CERT_VERSION:
            raise ValueError(f"unsupported certificate version {version}")
        node_id = int.from_bytes(take_field(), "big")
        public_key = take_field()
        issuer = take_field().decode("utf-8")
        (expiry,) = struct.unpack(">Q", take(8))
        signature = take_field()
        if pos != len(view):
            raise ValueError("trailing bytes after certificate")
        return cls(node_id, public_key, issuer, expiry, signature)


@dataclass(frozen=True)
class Credentials:
    identity: Identity
    certificate: Certificate

    @property
    def node_id(self) -> int:
        return self.identity.node_id


def generate_identity(node_id: int, seed: Union[bytes, str], suite: CryptoSuite = DEFAULT_SUITE) -> Identity:
    """Deterministic key pair derived from the seed"""
    if isinstance(seed, str):
        seed = seed.encode("utf-8")
    public_key, private_key = suite.keypair(seed + b":" + node_id.to_bytes(NODE_ID_BYTES, "big"))
    return Identity(node_id, public_key, private_key)


def issue_certificate(
    ca: Identity,
    subject_public_key: bytes,
    subject_id: int,
    expiry: int,
    issuer: str = CA_LABEL,
    suite: CryptoSuite = DEFAULT_SUITE,
) -> Certificate:
    unsigned = Certificate(subject_id, subject_public_key, issuer, int(expiry))
    signature = suite.sign(ca.private_key, unsigned.tbs_bytes())
    return Certificate(subject_id, subject_public_key, issuer, int(expiry), signature)


def verify_certificate(
    ca_public_key: bytes,
    cert: Union[Certificate, bytes],
    now: float,
    suite: CryptoSuite = DEFAULT_SUITE,
) -> bool:
    """True iff the CA signature holds and now < expiry; malformed input is just False"""
    try:
        if isinstance(cert, (bytes, bytearray)):
            cert = Certificate.from_bytes(bytes(cert))
        if not now < cert.expiry:
            return False
        return bool(suite.verify(ca_public_key, cert.signature, cert.tbs_bytes()))
    except Exception as e:
        logger.debug(f"certificate rejected as malformed: {e}")
        return False


class CertificateAuthority:
    """The single community trust root"""

    def __init__(self, seed: Union[bytes, str] = b"archer-ca", suite: CryptoSuite = DEFAULT_SUITE, label: str = CA_LABEL):
        self.suite = suite
        self.label = label
        self.identity = generate_identity(0, seed, suite)

    @property
    def public_key(self) -> bytes:
        return self.identity.public_key

    def issue(self, identity: Identity, expiry: int) -> Credentials:
        cert = issue_certificate(
            self.identity, identity.public_key, identity.node_id, expiry, self.label, self.suite
        )
        return Credentials(identity, cert)


def _direction_tag(sender: int, receiver: int) -> bytes:
    return b"\x00\x00\x00\x01" if sender <= receiver else b"\x00\x00\x00\x02"


@dataclass
class SecureChannel:
    """One endpoint's view: peer_a is the local node, peer_b the remote"""

    peer_a: int
    peer_b: int
    session_key: bytes = field(repr=False)
    send_counter: int = 0
    recv_counter: int = 0
    suite: CryptoSuite = field(default=DEFAULT_SUITE, repr=False, compare=False)

    def mirror(self) -> Self:
        """The remote endpoint's view of the same session"""
        return type(self)(self.peer_b, self.peer_a, self.session_key, suite=self.suite)

    def seal(self, plaintext: bytes) -> bytes:
        counter = self.send_counter.to_bytes(COUNTER_BYTES, "big")
        nonce = _direction_tag(self.peer_a, self.peer_b) + counter
        sealed = self.suite.encrypt(self.session_key, nonce, bytes(plaintext), counter)
        self.send_counter += 1
        return counter + sealed

    def open(self, ciphertext: bytes) -> bytes:
        if len(ciphertext) < COUNTER_BYTES + self.suite.tag_size:
            raise AuthenticationFailure("ciphertext too short")
        counter = ciphertext[:COUNTER_BYTES]
        nonce = _direction_tag(self.peer_b, self.peer_a) + counter
        plaintext = self.suite.decrypt(self.session_key, nonce, bytes(ciphertext[COUNTER_BYTES:]), counter)
        value = int.from_bytes(counter, "big")
        if value < self.recv_counter:
            raise ReplayError(f"counter {value} already seen (expecting >= {self.recv_counter})")
        self.recv_counter = value + 1
        return plaintext


def seal(channel: SecureChannel, plaintext: bytes) -> bytes:
    return channel.seal(plaintext)


def unseal(channel: SecureChannel, ciphertext: bytes) -> bytes:
    return channel.open(ciphertext)


def _check_party(party: Credentials, ca_public_key: bytes, now: float, suite: CryptoSuite) -> None:
    cert = party.certificate
    if not verify_certificate(ca_public_key, cert, now, suite):
        raise HandshakeRejected(f"certificate for node {party.node_id:x} does not verify")
    if cert.subject_node_id != party.identity.node_id:
        raise HandshakeRejected(
            f"certificate names node {cert.subject_node_id:x} but peer claims {party.identity.node_id:x}"
        )
    if not hmac.compare_digest(cert.subject_public_key, party.identity.public_key):
        raise HandshakeRejected(f"certificate key does not belong to node {party.node_id:x}")


def establish_channel(
    a: Credentials,
    b: Credentials,
    ca_public_key: bytes,
    now: Optional[float] = None,
    salt: bytes = b"",
    suite: CryptoSuite = DEFAULT_SUITE,
) -> SecureChannel:
    """Mutually authenticated handshake; returns a's view of the channel"""
    if now is None:
        now = time.time()
    for party in (a, b):
        _check_party(party, ca_public_key, now, suite)

    # proof of possession over both certificates
    transcript = HANDSHAKE_CONTEXT + a.certificate.to_bytes() + b.certificate.to_bytes()
    for party in (a, b):
        proof = suite.sign(party.identity.private_key, transcript)
        if not suite.verify(party.certificate.subject_public_key, proof, transcript):
            raise HandshakeRejected(f"node {party.node_id:x} failed proof of possession")

    shared_a = suite.agree(a.identity.private_key, b.certificate.subject_public_key)
    shared_b = suite.agree(b.identity.private_key, a.certificate.subject_public_key)
    if not hmac.compare_digest(shared_a, shared_b):
        raise HandshakeRejected("key agreement mismatch")

    low, high = sorted((a.node_id, b.node_id))
    info = CHANNEL_CONTEXT + low.to_bytes(NODE_ID_BYTES, "big") + high.to_bytes(NODE_ID_BYTES, "big")
    key = suite.derive(shared_a, salt, info)
    logger.debug(f"channel established {a.node_id:x} <-> {b.node_id:x}")
    return SecureChannel(a.node_id, b.node_id, key, suite=suite)
