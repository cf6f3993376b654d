"""Encoder initialization, hashed bag-of-embeddings encoding, and the
on-disk parameter format."""

import struct
from dataclasses import replace

import numpy as np
import pytest

from retrievalab import biencoder as be
from retrievalab.errors import FormatError
from retrievalab.io_binary import write_artifact


class TestInitParams:
    def test_deterministic_per_seed(self):
        a = be.init_params(be.ROLE_QUESTION, "d0", seed=9)
        b = be.init_params(be.ROLE_QUESTION, "d0", seed=9)
        assert a.embeddings.tobytes() == b.embeddings.tobytes()

    def test_seeds_differ(self):
        a = be.init_params(be.ROLE_QUESTION, "d0", seed=1)
        b = be.init_params(be.ROLE_QUESTION, "d0", seed=2)
        assert a.embeddings.tobytes() != b.embeddings.tobytes()

    def test_roles_draw_different_streams(self):
        q = be.init_params(be.ROLE_QUESTION, "d0", seed=9)
        p = be.init_params(be.ROLE_PASSAGE, "d0", seed=9)
        assert q.embeddings.tobytes() != p.embeddings.tobytes()

    def test_domain_does_not_change_the_table(self):
        # separately trained domains share one starting point, like towers
        # fine-tuned from a single pretrained model
        a = be.init_params(be.ROLE_QUESTION, "d0", seed=9)
        b = be.init_params(be.ROLE_QUESTION, "d1", seed=9)
        assert a.embeddings.tobytes() == b.embeddings.tobytes()
        assert (a.domain, b.domain) == ("d0", "d1")

    def test_projection_starts_at_identity(self):
        p = be.init_params(be.ROLE_PASSAGE, "d", dim=5, vocab_buckets=16)
        np.testing.assert_array_equal(p.projection, np.eye(5, dtype=np.float32))
        np.testing.assert_array_equal(p.proj_bias, np.zeros(5, dtype=np.float32))

    def test_storage_dtype_is_float32(self):
        p = be.init_params(be.ROLE_QUESTION, "d")
        assert p.embeddings.dtype == np.float32
        assert p.projection.dtype == np.float32
        assert p.proj_bias.dtype == np.float32

    def test_bad_role_rejected(self):
        with pytest.raises(ValueError, match="role"):
            be.init_params("paragraph", "d")

    def test_shape_validation(self):
        p = be.init_params(be.ROLE_QUESTION, "d", dim=4, vocab_buckets=8)
        with pytest.raises(ValueError):
            replace(p, embeddings=np.zeros((8, 5), dtype=np.float32))
        with pytest.raises(ValueError):
            replace(p, projection=np.zeros((4, 5), dtype=np.float32))
        with pytest.raises(ValueError):
            replace(p, proj_bias=np.zeros(5, dtype=np.float32))


class TestHashTexts:
    def test_offsets_partition_flat_ids(self):
        flat, offsets = be.hash_texts(["one two three", "four", ""], 64)
        assert list(offsets) == [0, 3, 4, 4]
        assert flat.shape == (4,)
        assert flat.dtype == np.int64

    def test_empty_input(self):
        flat, offsets = be.hash_texts([], 64)
        assert flat.shape == (0,)
        assert list(offsets) == [0]

    def test_ids_within_bucket_range(self):
        flat, _ = be.hash_texts(["some words here and there"], 7)
        assert ((flat >= 0) & (flat < 7)).all()


class TestEncoding:
    def _tiny_params(self):
        emb = np.arange(8 * 3, dtype=np.float32).reshape(8, 3)
        return be.EncoderParams(
            role=be.ROLE_QUESTION, domain="t", dim=3, vocab_buckets=8, seed=0,
            embeddings=emb,
            projection=2.0 * np.eye(3, dtype=np.float32),
            proj_bias=np.array([0.5, 0.0, -0.5], dtype=np.float32),
        )

    def test_encode_pooled_is_mean_then_affine(self):
        params = self._tiny_params()
        ids = np.array([0, 2], dtype=np.int64)
        offsets = np.array([0, 2], dtype=np.int64)
        out = be.encode_pooled(params.embeddings, params.projection,
                               params.proj_bias, ids, offsets)
        pooled = params.embeddings[[0, 2]].astype(np.float64).mean(axis=0)
        expected = 2.0 * pooled + np.array([0.5, 0.0, -0.5])
        np.testing.assert_allclose(out[0], expected, atol=1e-12)

    def test_empty_text_encodes_to_bias(self):
        params = self._tiny_params()
        vec = be.encode(params, "")
        np.testing.assert_allclose(vec.values, [0.5, 0.0, -0.5], atol=0)

    def test_encode_batch_matches_single_encodes(self):
        params = be.init_params(be.ROLE_QUESTION, "d", dim=6, vocab_buckets=32, seed=4)
        texts = ["alpha beta", "gamma", "alpha gamma delta"]
        batch = be.encode_batch(params, texts)
        assert batch.shape == (3, 6)
        assert batch.dtype == np.float64
        for i, text in enumerate(texts):
            np.testing.assert_array_equal(batch[i], be.encode(params, text).values)

    def test_encode_carries_domain(self):
        params = be.init_params(be.ROLE_QUESTION, "news", dim=4, vocab_buckets=8)
        vec = be.encode(params, "hello")
        assert vec.domain == "news"
        assert vec.dim == 4


class TestSimilarity:
    def test_dot_product(self):
        q = be.EmbeddingVec(values=np.array([1.0, 2.0, 3.0]), domain="a")
        p = be.EmbeddingVec(values=np.array([0.5, -1.0, 2.0]), domain="b")
        assert be.similarity(q, p) == pytest.approx(1 * 0.5 - 2 + 6)

    def test_dim_mismatch_names_both_domains(self):
        q = be.EmbeddingVec(values=np.zeros(3), domain="news")
        p = be.EmbeddingVec(values=np.zeros(4), domain="wiki")
        with pytest.raises(ValueError, match="news.*wiki"):
            be.similarity(q, p)


class TestChecksum:
    def test_stable_across_calls(self):
        p = be.init_params(be.ROLE_PASSAGE, "d", dim=4, vocab_buckets=8, seed=1)
        assert be.checksum_params(p) == be.checksum_params(p)

    def test_sensitive_to_single_weight(self):
        p = be.init_params(be.ROLE_PASSAGE, "d", dim=4, vocab_buckets=8, seed=1)
        emb = p.embeddings.copy()
        emb[3, 2] += 1.0
        assert be.checksum_params(replace(p, embeddings=emb)) != be.checksum_params(p)

    def test_sensitive_to_metadata(self):
        p = be.init_params(be.ROLE_PASSAGE, "d", dim=4, vocab_buckets=8, seed=1)
        assert be.checksum_params(replace(p, domain="other")) != be.checksum_params(p)


class TestParamsFormat:
    def _params(self):
        return be.init_params(be.ROLE_PASSAGE, "news-fr", dim=6, vocab_buckets=32, seed=11)

    def test_round_trip(self, tmp_path):
        params = self._params()
        path = tmp_path / "enc.bin"
        be.save_params(params, path)
        back = be.load_params(path)
        assert (back.role, back.domain, back.dim, back.vocab_buckets, back.seed) == (
            params.role, params.domain, params.dim, params.vocab_buckets, params.seed
        )
        assert back.embeddings.tobytes() == params.embeddings.tobytes()
        assert back.projection.tobytes() == params.projection.tobytes()
        assert back.proj_bias.tobytes() == params.proj_bias.tobytes()

    def test_save_load_save_is_byte_stable(self, tmp_path):
        a = tmp_path / "a.bin"
        b = tmp_path / "b.bin"
        be.save_params(self._params(), a)
        be.save_params(be.load_params(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_bit_flip_detected(self, tmp_path):
        path = tmp_path / "enc.bin"
        be.save_params(self._params(), path)
        raw = bytearray(path.read_bytes())
        raw[40] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="checksum"):
            be.load_params(path)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "enc.bin"
        be.save_params(self._params(), path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            be.load_params(path)

    def test_wrong_magic_detected(self, tmp_path):
        path = tmp_path / "enc.bin"
        write_artifact(path, b"DIX1", b"not an encoder")
        with pytest.raises(FormatError, match="magic"):
            be.load_params(path)

    def test_unsupported_version_detected(self, tmp_path):
        path = tmp_path / "enc.bin"
        write_artifact(path, be.ENCODER_MAGIC, struct.pack("<H", 7))
        with pytest.raises(FormatError, match="version"):
            be.load_params(path)

    def test_unknown_role_code_detected(self, tmp_path):
        path = tmp_path / "enc.bin"
        write_artifact(
            path, be.ENCODER_MAGIC,
            struct.pack("<H", be.ENCODER_VERSION) + struct.pack("<B", 9),
        )
        with pytest.raises(FormatError, match="role"):
            be.load_params(path)
