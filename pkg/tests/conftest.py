import hashlib
import hmac
import random

import pytest

from errors import AuthenticationFailure
from models import NatClass, NodeDescriptor
from overlay import Overlay
from secnet import CertificateAuthority


class MockSuite:
    """Hash-based stand-in for the real primitives; fast enough for thousand-node overlays

    Not secure: anyone holding a public key can forge its signatures. Tests only
    rely on keys that never leave the suite.
    """

    name = "mock-sha256"
    tag_size = 16

    def keypair(self, seed):
        private = hashlib.sha256(b"private:" + seed).digest()
        return self._public(private), private

    @staticmethod
    def _public(private):
        return hashlib.sha256(b"public:" + private).digest()

    def sign(self, private_key, message):
        return hashlib.sha256(self._public(private_key) + message).digest()

    def verify(self, public_key, signature, message):
        return hmac.compare_digest(hashlib.sha256(public_key + message).digest(), signature)

    def agree(self, private_key, peer_public_key):
        low, high = sorted((self._public(private_key), peer_public_key))
        return hashlib.sha256(b"agree:" + low + high).digest()

    def derive(self, secret, salt, info):
        return hmac.new(salt or b"\x00" * 32, secret + info, hashlib.sha256).digest()

    @staticmethod
    def _stream(key, nonce, length):
        blocks = []
        for i in range((length + 31) // 32):
            blocks.append(hashlib.sha256(key + nonce + i.to_bytes(4, "big")).digest())
        return b"".join(blocks)[:length]

    def _tag(self, key, nonce, ciphertext, aad):
        return hmac.new(key, nonce + aad + ciphertext, hashlib.sha256).digest()[: self.tag_size]

    def encrypt(self, key, nonce, plaintext, aad):
        body = bytes(a ^ b for a, b in zip(plaintext, self._stream(key, nonce, len(plaintext))))
        return body + self._tag(key, nonce, body, aad)

    def decrypt(self, key, nonce, ciphertext, aad):
        if len(ciphertext) < self.tag_size:
            raise AuthenticationFailure("ciphertext too short")
        body, tag = ciphertext[: -self.tag_size], ciphertext[-self.tag_size:]
        if not hmac.compare_digest(tag, self._tag(key, nonce, body, aad)):
            raise AuthenticationFailure("ciphertext failed authentication")
        return bytes(a ^ b for a, b in zip(body, self._stream(key, nonce, len(body))))


@pytest.fixture
def mock_suite():
    return MockSuite()


def build_overlay(
    n,
    bits=16,
    seed=0,
    suite=None,
    nat_weights=(1.0, 0.0, 0.0),
    use_shortcuts=True,
    certified=True,
    transport=None,
    first_public=True,
):
    """n nodes with distinct seeded ids, all bootstrapping through the first"""
    suite = suite or MockSuite()
    ca = CertificateAuthority(seed=f"{seed}:ca", suite=suite) if certified else None
    overlay = Overlay(bits=bits, seed=seed, ca=ca, suite=suite, use_shortcuts=use_shortcuts, transport=transport)
    ids = random.Random(f"{seed}:test-ids")
    nats = random.Random(f"{seed}:test-nat")
    chosen = []
    seen = set()
    while len(chosen) < n:
        candidate = ids.getrandbits(bits)
        if candidate not in seen:
            seen.add(candidate)
            chosen.append(candidate)
    for i, node_id in enumerate(chosen):
        nat = NatClass.PUBLIC if i == 0 and first_public else nats.choices(list(NatClass), weights=nat_weights)[0]
        descriptor = NodeDescriptor(
            id=node_id, vip=overlay.allocate_vip(), site="test", pool="test", speed=1.0, nat=nat,
        )
        overlay.join(descriptor, bootstraps=chosen[:1])
    overlay.stabilize()
    return overlay


@pytest.fixture
def overlay_factory(mock_suite):
    made = []

    def make(n, **kwargs):
        kwargs.setdefault("suite", mock_suite)
        overlay = build_overlay(n, **kwargs)
        made.append(overlay)
        return overlay

    yield make
    for overlay in made:
        overlay.close()
