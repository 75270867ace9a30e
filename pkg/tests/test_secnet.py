import random

import pytest

from errors import AuthenticationFailure, HandshakeRejected, ReplayError
from secnet import (
    CA_LABEL,
    DEFAULT_SUITE,
    Certificate,
    CertificateAuthority,
    Credentials,
    establish_channel,
    generate_identity,
    issue_certificate,
    seal,
    unseal,
    verify_certificate,
)

NOW = 1_000_000
LATER = NOW + 86400


@pytest.fixture
def ca():
    return CertificateAuthority(seed="test-ca")


@pytest.fixture
def alice(ca):
    return ca.issue(generate_identity(0xA11CE, "members"), LATER)


@pytest.fixture
def bob(ca):
    return ca.issue(generate_identity(0xB0B, "members"), LATER)


def test_identity_is_deterministic_and_self_consistent():
    one = generate_identity(7, "seed")
    two = generate_identity(7, b"seed")
    assert one == two
    assert generate_identity(8, "seed").public_key != one.public_key
    signature = DEFAULT_SUITE.sign(one.private_key, b"message")
    assert DEFAULT_SUITE.verify(one.public_key, signature, b"message")
    assert not DEFAULT_SUITE.verify(one.public_key, signature, b"other message")


def test_private_key_stays_out_of_repr():
    identity = generate_identity(7, "seed")
    assert identity.private_key.hex() not in repr(identity)


def test_issue_then_verify(ca, alice):
    assert verify_certificate(ca.public_key, alice.certificate, NOW)
    assert alice.certificate.issuer == CA_LABEL


def test_verify_under_other_ca_fails(alice):
    other = CertificateAuthority(seed="another-ca")
    assert not verify_certificate(other.public_key, alice.certificate, NOW)


def test_expired_certificate_fails(ca):
    creds = ca.issue(generate_identity(1, "members"), NOW - 1)
    assert not verify_certificate(ca.public_key, creds.certificate, NOW)
    # expiry is exclusive
    assert not verify_certificate(ca.public_key, creds.certificate, NOW - 1)
    assert verify_certificate(ca.public_key, creds.certificate, NOW - 2)


def test_certificate_bytes_round_trip(alice):
    data = alice.certificate.to_bytes()
    assert data[:4] == b"ACRT"
    assert Certificate.from_bytes(data) == alice.certificate


def test_every_single_bit_flip_breaks_the_certificate(ca, alice):
    data = bytearray(alice.certificate.to_bytes())
    for i in range(len(data) * 8):
        flipped = bytearray(data)
        flipped[i // 8] ^= 1 << (i % 8)
        assert not verify_certificate(ca.public_key, bytes(flipped), NOW), f"bit {i} survived"
    assert verify_certificate(ca.public_key, bytes(data), NOW)


@pytest.mark.parametrize("data", [b"", b"ACRT", b"garbage" * 10])
def test_malformed_certificate_bytes_are_false_not_errors(ca, data):
    assert verify_certificate(ca.public_key, data, NOW) is False


def test_trailing_bytes_are_rejected(ca, alice):
    with pytest.raises(ValueError):
        Certificate.from_bytes(alice.certificate.to_bytes() + b"\x00")
    assert not verify_certificate(ca.public_key, alice.certificate.to_bytes() + b"\x00", NOW)


def test_issue_certificate_directly(ca):
    subject = generate_identity(99, "members")
    cert = issue_certificate(ca.identity, subject.public_key, 99, LATER)
    assert verify_certificate(ca.public_key, cert, NOW)
    assert cert.subject_node_id == 99


# Handshake


def test_both_sides_derive_the_same_key(ca, alice, bob):
    forward = establish_channel(alice, bob, ca.public_key, now=NOW)
    backward = establish_channel(bob, alice, ca.public_key, now=NOW)
    assert forward.session_key == backward.session_key
    assert (forward.peer_a, forward.peer_b) == (alice.node_id, bob.node_id)


def test_distinct_pairs_get_distinct_keys(ca, alice, bob):
    carol = ca.issue(generate_identity(0xCA201, "members"), LATER)
    ab = establish_channel(alice, bob, ca.public_key, now=NOW)
    ac = establish_channel(alice, carol, ca.public_key, now=NOW)
    bc = establish_channel(bob, carol, ca.public_key, now=NOW)
    assert len({ab.session_key, ac.session_key, bc.session_key}) == 3


def test_salt_changes_the_session_key(ca, alice, bob):
    one = establish_channel(alice, bob, ca.public_key, now=NOW, salt=b"\x01")
    two = establish_channel(alice, bob, ca.public_key, now=NOW, salt=b"\x02")
    assert one.session_key != two.session_key


def test_expired_peer_is_rejected(ca, alice):
    stale = ca.issue(generate_identity(0xDEAD, "members"), NOW - 10)
    with pytest.raises(HandshakeRejected):
        establish_channel(alice, stale, ca.public_key, now=NOW)


def test_certificate_for_another_node_id_is_rejected(ca, alice, bob):
    liar = Credentials(generate_identity(0xB0B + 1, "members"), bob.certificate)
    with pytest.raises(HandshakeRejected):
        establish_channel(alice, liar, ca.public_key, now=NOW)


def test_substituted_public_key_is_rejected(ca, alice, bob):
    # attacker keeps bob's certificate but brings its own key pair
    mallory = generate_identity(bob.node_id, "mallory")
    with pytest.raises(HandshakeRejected):
        establish_channel(alice, Credentials(mallory, bob.certificate), ca.public_key, now=NOW)


def test_self_signed_certificate_is_rejected(ca, alice):
    mallory = generate_identity(0xBAD, "mallory")
    forged = issue_certificate(mallory, mallory.public_key, 0xBAD, LATER)
    with pytest.raises(HandshakeRejected):
        establish_channel(alice, Credentials(mallory, forged), ca.public_key, now=NOW)


def test_certificate_from_a_rogue_ca_is_rejected(ca, alice):
    rogue = CertificateAuthority(seed="rogue")
    outsider = rogue.issue(generate_identity(0xBAD, "outsider"), LATER)
    with pytest.raises(HandshakeRejected):
        establish_channel(alice, outsider, ca.public_key, now=NOW)


def test_mock_suite_handshake(mock_suite):
    ca = CertificateAuthority(seed="mock", suite=mock_suite)
    a = ca.issue(generate_identity(1, "m", mock_suite), LATER)
    b = ca.issue(generate_identity(2, "m", mock_suite), LATER)
    channel = establish_channel(a, b, ca.public_key, now=NOW, suite=mock_suite)
    peer = channel.mirror()
    assert peer.open(channel.seal(b"payload")) == b"payload"


# Sealed channels


@pytest.fixture
def pair(ca, alice, bob):
    channel = establish_channel(alice, bob, ca.public_key, now=NOW)
    return channel, channel.mirror()


def test_empty_message_round_trip(pair):
    a, b = pair
    assert unseal(b, seal(a, b"")) == b""


@pytest.mark.parametrize("size", [0, 1, 15, 16, 17, 1024, 65535, 65536])
def test_round_trip_sizes(pair, size):
    a, b = pair
    payload = random.Random(size).randbytes(size)
    sealed = a.seal(payload)
    assert len(sealed) == size + 8 + 16
    assert b.open(sealed) == payload


def test_random_round_trips_both_directions(pair):
    a, b = pair
    rng = random.Random(1)
    for _ in range(100):
        payload = rng.randbytes(rng.randint(0, 4096))
        assert b.open(a.seal(payload)) == payload
        assert a.open(b.seal(payload)) == payload


def test_any_bit_flip_fails_authentication(pair):
    a, b = pair
    sealed = a.seal(b"hello")
    for i in range(len(sealed) * 8):
        flipped = bytearray(sealed)
        flipped[i // 8] ^= 1 << (i % 8)
        with pytest.raises(AuthenticationFailure):
            b.open(bytes(flipped))
    assert b.open(sealed) == b"hello"


def test_truncated_ciphertext_fails(pair):
    a, b = pair
    with pytest.raises(AuthenticationFailure):
        b.open(a.seal(b"hello")[:10])


def test_replay_is_rejected(pair):
    a, b = pair
    sealed = a.seal(b"once")
    assert b.open(sealed) == b"once"
    with pytest.raises(ReplayError):
        b.open(sealed)


def test_reordered_frames_are_rejected(pair):
    a, b = pair
    first = a.seal(b"first")
    second = a.seal(b"second")
    assert b.open(second) == b"second"
    with pytest.raises(ReplayError):
        b.open(first)


def test_counters_increase(pair):
    a, b = pair
    for i in range(5):
        b.open(a.seal(b"x"))
        assert a.send_counter == i + 1
        assert b.recv_counter == i + 1


def test_own_ciphertext_does_not_open_on_the_sending_side(pair):
    a, _ = pair
    with pytest.raises(AuthenticationFailure):
        a.open(a.seal(b"echo"))


def test_other_channel_cannot_open(ca, alice, bob, pair):
    carol = ca.issue(generate_identity(0xCA201, "members"), LATER)
    a, _ = pair
    wrong = establish_channel(carol, alice, ca.public_key, now=NOW)
    with pytest.raises(AuthenticationFailure):
        wrong.open(a.seal(b"secret"))
