import numpy as np
import pytest

from acmnet.datagen import REFERENCE, generate_synthetic_traverse
from acmnet.errors import FormatError, MismatchError, ParameterError
from acmnet.model import ModelConfig, init_params
from acmnet.retrieval import (
    DescriptorBank,
    build_bank,
    embed,
    knn_batch,
    knn_query,
    load_bank,
    save_bank,
)

SMALL = ModelConfig(image_size=16, encoder_channels=(8, 16), feature_dim=16, descriptor_dim=8)


def random_bank(rng, m, d):
    z = rng.normal(size=(m, d))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    manifest = [{"frame_index": i, "sequence_id": "ref", "condition_id": "ref"} for i in range(m)]
    return DescriptorBank(z.astype(np.float32), manifest, "0" * 16)


def brute_force(bank, q, k):
    sims = [(sum(float(a) * float(b) for a, b in zip(row, q)), i) for i, row in enumerate(bank.matrix)]
    sims.sort(key=lambda t: (-t[0], t[1]))
    return sims[:k]


@pytest.fixture(scope="module")
def small_setup():
    ds = generate_synthetic_traverse(12, [REFERENCE], 16, 4)
    params = init_params(SMALL)
    return ds, params, build_bank(params, ds.reference_frames())


class TestKnn:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            m, d = int(rng.integers(1, 40)), int(rng.integers(2, 12))
            bank = random_bank(rng, m, d)
            q = rng.normal(size=d)
            k = int(rng.integers(1, m + 1))
            got = knn_query(bank, q, k)
            want = brute_force(bank, q, k)
            assert [r for r, _ in got] == [i for _, i in want]
            np.testing.assert_allclose([s for _, s in got], [s for s, _ in want], atol=1e-9)

    def test_ties_break_by_row_id(self):
        z = np.array([[1, 0], [0, 1], [1, 0], [1, 0]], np.float32)
        bank = DescriptorBank(z, [{"frame_index": i} for i in range(4)], "")
        assert [r for r, _ in knn_query(bank, [1.0, 0.0], 3)] == [0, 2, 3]

    def test_batch_agrees(self):
        rng = np.random.default_rng(1)
        bank = random_bank(rng, 30, 6)
        qs = rng.normal(size=(5, 6))
        rows, sims = knn_batch(bank, qs, 4)
        for i, q in enumerate(qs):
            got = knn_query(bank, q, 4)
            assert rows[i].tolist() == [r for r, _ in got]
            np.testing.assert_allclose(sims[i], [s for _, s in got])

    def test_errors(self):
        bank = random_bank(np.random.default_rng(2), 5, 4)
        with pytest.raises(ParameterError):
            knn_query(bank, np.ones(4), 0)
        with pytest.raises(ParameterError):
            knn_query(bank, np.ones(4), 6)
        with pytest.raises(MismatchError):
            knn_query(bank, np.ones(3), 1)


class TestBank:
    def test_embed_unit_rows(self, small_setup):
        ds, params, _ = small_setup
        z = embed(params, np.stack([f.image for f in ds.frames]))
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)

    def test_self_retrieval(self, small_setup):
        ds, params, bank = small_setup
        # the random-init encoder maps some places onto the same descriptor,
        # so check rank 1 on rows whose descriptor is unique in the bank
        uniq = [i for i in range(bank.size)
                if np.sum(np.all(bank.matrix == bank.matrix[i], axis=1)) == 1]
        assert uniq
        for i in uniq:
            row, sim = knn_query(bank, bank.matrix[i], 1)[0]
            assert row == i and sim == pytest.approx(1.0, abs=1e-6)

    def test_empty(self):
        with pytest.raises(ParameterError):
            build_bank(init_params(SMALL), [])

    def test_round_trip_bit_exact(self, small_setup, tmp_path):
        _, _, bank = small_setup
        save_bank(bank, tmp_path / "b.acmb")
        assert load_bank(tmp_path / "b.acmb") == bank
        save_bank(load_bank(tmp_path / "b.acmb"), tmp_path / "c.acmb")
        assert (tmp_path / "b.acmb").read_bytes() == (tmp_path / "c.acmb").read_bytes()

    def test_truncated(self, small_setup, tmp_path):
        _, _, bank = small_setup
        save_bank(bank, tmp_path / "b.acmb")
        data = (tmp_path / "b.acmb").read_bytes()
        (tmp_path / "t.acmb").write_bytes(data[:40])
        with pytest.raises(FormatError):
            load_bank(tmp_path / "t.acmb")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"XXXX" + bytes(30))
        with pytest.raises(FormatError, match="magic"):
            load_bank(tmp_path / "x")

    def test_rejects_non_unit_rows(self, tmp_path):
        bank = random_bank(np.random.default_rng(3), 4, 3)
        bank.matrix[0] *= 2
        with pytest.raises(ParameterError):
            save_bank(bank, tmp_path / "b")

    def test_fingerprint_tracks_params(self, small_setup):
        ds, params, bank = small_setup
        other = build_bank(init_params(ModelConfig(**{**SMALL.to_dict(), "init_seed": 9})),
                           ds.reference_frames())
        assert other.fingerprint != bank.fingerprint
