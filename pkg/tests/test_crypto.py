import hashlib
import random

import pytest
from hypothesis import given, settings, strategies as st

from fairdex.crypto import (
    CHUNK_SIZE,
    AuthenticationError,
    ChunkLayoutError,
    CipherChunk,
    DataKey,
    KeyPair,
    address_of,
    decrypt_chunk,
    decrypt_chunked,
    encrypt_chunked,
    sha256,
    sign,
    verify,
)

TID = bytes(range(16))
KEY = DataKey(bytes(range(32)))


def flip(b: bytes, i: int, bit: int = 0) -> bytes:
    out = bytearray(b)
    out[i] ^= 1 << bit
    return bytes(out)


class TestHash:
    def test_empty_vector(self):
        assert sha256(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"

    def test_abc_vector(self):
        assert sha256(b"abc").hex().startswith("ba7816bf8f01cfea")

    def test_no_collisions_in_random_corpus(self):
        rng = random.Random(1)
        corpus = {rng.randbytes(rng.randrange(0, 64)) for _ in range(10_000)}
        digests = {sha256(x) for x in corpus}
        assert len(digests) == len(corpus)

    def test_hash_is_not_a_fixed_point(self):
        rng = random.Random(2)
        for _ in range(1000):
            x = rng.randbytes(32)
            assert sha256(x) != x
            assert sha256(sha256(x)) != sha256(x)


class TestSignatures:
    def test_round_trip_empty(self):
        kp = KeyPair()
        assert verify(kp.public_key, b"", kp.sign(b""))

    def test_bit_flip_rejected(self):
        kp = KeyPair()
        msg = b"pay 10"
        sig = kp.sign(msg)
        assert not verify(kp.public_key, flip(msg, 0), sig)
        assert not verify(kp.public_key, msg, flip(sig, 5))

    def test_other_key_rejected(self):
        a, b = KeyPair(), KeyPair()
        assert not verify(b.public_key, b"m", a.sign(b"m"))

    def test_functional_sign_matches_keypair(self):
        kp = KeyPair()
        assert sign(kp.secret_key, b"x") == kp.sign(b"x")  # Ed25519 is deterministic

    def test_malformed_key(self):
        with pytest.raises(ValueError):
            verify(b"short", b"m", b"\x00" * 64)

    def test_rfc8032_test1(self):
        sk = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
        kp = KeyPair.from_seed(sk)
        assert kp.public_key.hex() == "d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a"
        assert kp.sign(b"").hex().startswith("e5564300c360ac729086e2cc806e828a")

    def test_address_is_truncated_hash(self):
        kp = KeyPair()
        assert kp.address == hashlib.sha256(kp.public_key).digest()[:20]
        assert address_of(kp.public_key) == kp.address


class TestChunkedEncryption:
    def test_single_byte(self):
        chunks = encrypt_chunked(KEY, b"x", TID)
        assert len(chunks) == 1
        assert decrypt_chunked(KEY, chunks, TID) == b"x"

    def test_chunk_boundary(self):
        data = random.Random(3).randbytes(CHUNK_SIZE + 1)
        chunks = encrypt_chunked(KEY, data, TID)
        assert len(chunks) == 2
        assert decrypt_chunk(KEY, chunks[0], TID) == data[:CHUNK_SIZE]
        assert decrypt_chunk(KEY, chunks[1], TID) == data[CHUNK_SIZE:]

    def test_cross_trade_replay_rejected(self):
        chunks = encrypt_chunked(KEY, b"secret", TID)
        with pytest.raises(AuthenticationError):
            decrypt_chunked(KEY, chunks, bytes(16))

    def test_empty_payload_rejected(self):
        with pytest.raises(ValueError):
            encrypt_chunked(KEY, b"", TID)

    def test_nonce_is_little_endian_counter(self):
        chunks = encrypt_chunked(KEY, bytes(2 * CHUNK_SIZE + 5), TID)
        assert [c.nonce for c in chunks] == [i.to_bytes(12, "little") for i in range(3)]
        assert all(len(c.tag) == 16 for c in chunks)

    @pytest.mark.parametrize("field", ["nonce", "tag", "body"])
    def test_any_bit_flip_fails(self, field):
        data = random.Random(4).randbytes(300)
        (chunk,) = encrypt_chunked(KEY, data, TID)
        raw = getattr(chunk, field)
        for i in range(len(raw)):
            for bit in (0, 7):
                bad = CipherChunk(**{**chunk.__dict__, field: flip(raw, i, bit)})
                with pytest.raises(AuthenticationError):
                    decrypt_chunk(KEY, bad, TID)

    def test_aad_fields_bound(self):
        chunks = encrypt_chunked(KEY, bytes(CHUNK_SIZE + 10), TID)
        c = chunks[1]
        with pytest.raises(AuthenticationError):
            decrypt_chunk(KEY, CipherChunk(0, c.total, c.nonce, c.tag, c.body), TID)
        with pytest.raises(ChunkLayoutError):
            decrypt_chunk(KEY, CipherChunk(c.index, 1, c.nonce, c.tag, c.body), TID)
        for i in range(16):
            with pytest.raises(AuthenticationError):
                decrypt_chunk(KEY, c, flip(TID, i))

    def test_incomplete_set_rejected(self):
        chunks = encrypt_chunked(KEY, bytes(3 * CHUNK_SIZE), TID)
        with pytest.raises(ChunkLayoutError):
            decrypt_chunked(KEY, chunks[:2], TID)

    def test_chunk_serialization(self):
        (c,) = encrypt_chunked(KEY, b"abc", TID)
        assert CipherChunk.from_bytes(c.to_bytes()) == c

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4 * 1024 * 1024), st.integers(0, 2**32))
    def test_round_trip_and_independence(self, size, seed):
        rnd = random.Random(seed)
        data = rnd.randbytes(size)
        key = DataKey(rnd.randbytes(32))
        chunks = encrypt_chunked(key, data, TID)
        assert all(len(c.body) <= CHUNK_SIZE for c in chunks)
        assert decrypt_chunked(key, chunks, TID) == data
        i = rnd.randrange(len(chunks))
        assert decrypt_chunk(key, chunks[i], TID) == data[i * CHUNK_SIZE : (i + 1) * CHUNK_SIZE]
