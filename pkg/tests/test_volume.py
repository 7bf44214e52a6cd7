import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wsicl.volume import (ContextSet, VolumeFormatError, dice, load_volume, minmax_normalize,
                          resize, save_volume)


def brute_dice(a, b):
    inter = na = nb = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        na += x
        nb += y
        inter += x and y
    return 1.0 if na + nb == 0 else 2 * inter / (na + nb)


masks = arrays(np.uint8, (4, 5, 3), elements=st.integers(0, 1))


class TestNormalize:
    def test_affine(self):
        out = minmax_normalize(np.array([2.0, 4.0, 6.0]).reshape(1, 1, 3))
        np.testing.assert_array_equal(out.ravel(), [0, 0.5, 1])

    def test_negative_values(self):
        out = minmax_normalize(np.array([-1.0, 0.0, 3.0]).reshape(3, 1, 1))
        np.testing.assert_array_equal(out.ravel(), [0, 0.25, 1])

    def test_constant_maps_to_zero(self):
        out = minmax_normalize(np.full((2, 3, 4), 7.0))
        assert out.shape == (2, 3, 4) and not out.any()

    def test_rejects_non_finite(self):
        v = np.zeros((2, 2, 2))
        v[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            minmax_normalize(v)

    @given(arrays(np.float64, (3, 4, 2), elements=st.floats(-1e3, 1e3)))
    def test_idempotent_and_in_range(self, v):
        once = minmax_normalize(v)
        assert once.min() >= 0 and once.max() <= 1
        np.testing.assert_allclose(minmax_normalize(once), once, atol=1e-6)


class TestResize:
    def test_constant_volume(self):
        out = resize(np.full((4, 4, 4), 0.3, dtype=np.float32), (7, 9, 5))
        assert out.shape == (7, 9, 5)
        np.testing.assert_allclose(out, 0.3, rtol=1e-6)

    def test_identity_is_bitwise(self):
        v = np.random.default_rng(0).random((5, 6, 7)).astype(np.float32)
        assert np.array_equal(resize(v, v.shape), v)
        m = (v > 0.5).astype(np.uint8)
        assert np.array_equal(resize(m, m.shape), m)

    def test_mask_up_down_roundtrip(self):
        rng = np.random.default_rng(1)
        m = (rng.random((4, 4, 4)) > 0.5).astype(np.uint8)
        up = resize(m, (8, 8, 8))
        # nearest neighbour with half-pixel centres: up[i] = m[i // 2]
        expected_up = m.repeat(2, 0).repeat(2, 1).repeat(2, 2)
        assert np.array_equal(up, expected_up)
        assert np.array_equal(resize(up, (4, 4, 4)), m)

    def test_mask_stays_binary(self):
        m = (np.random.default_rng(2).random((6, 5, 4)) > 0.7).astype(np.uint8)
        out = resize(m, (11, 3, 9))
        assert out.dtype == np.uint8 and set(np.unique(out)) <= {0, 1}

    def test_zero_target_rejected(self):
        with pytest.raises(ValueError):
            resize(np.zeros((2, 2, 2), np.float32), (0, 2, 2))


class TestDice:
    def test_identical(self):
        a = np.zeros((3, 3, 3), np.uint8)
        a[1, 1, 1] = 1
        assert dice(a, a) == 1.0

    def test_disjoint(self):
        a = np.zeros((3, 3, 3), np.uint8)
        b = a.copy()
        a[0, 0, 0] = b[2, 2, 2] = 1
        assert dice(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((1, 1, 3), np.uint8)
        b = a.copy()
        a[0, 0, :2] = 1
        b[0, 0, 1:] = 1
        assert brute_dice(a, b) == 0.5
        assert dice(a, b) == 0.5

    def test_empty_pair(self):
        z = np.zeros((2, 2, 2), np.uint8)
        assert dice(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    @given(masks, masks)
    def test_symmetric_bounded_matches_brute(self, a, b):
        d = dice(a, b)
        assert d == dice(b, a)
        assert 0.0 <= d <= 1.0
        assert d == brute_dice(a, b)

    @given(masks)
    def test_self_dice(self, a):
        if a.any():
            assert dice(a, a) == 1.0


class TestVolb:
    @settings(deadline=None, max_examples=25)
    @given(arrays(np.float32, (3, 2, 4), elements=st.floats(-1e6, 1e6, width=32)))
    def test_float_roundtrip_bit_exact(self, tmp_path_factory, v):
        p = tmp_path_factory.mktemp("volb") / "img"
        save_volume(p, v)
        assert load_volume(p).tobytes() == v.tobytes()

    def test_mask_roundtrip(self, tmp_path):
        m = (np.random.default_rng(3).random((4, 3, 2)) > 0.5).astype(np.uint8)
        header = save_volume(tmp_path / "m", m)
        meta = json.loads(header.read_text())
        assert meta["dtype"] == "u8" and meta["shape"] == [4, 3, 2]
        assert meta["order"] == "row-major" and meta["endianness"] == "little"
        out = load_volume(tmp_path / "m.json")
        assert out.dtype == np.uint8 and np.array_equal(out, m)

    def test_payload_size_mismatch(self, tmp_path):
        save_volume(tmp_path / "v", np.zeros((2, 2, 2), np.float32))
        (tmp_path / "v.raw").write_bytes(b"\0" * 7)
        with pytest.raises(VolumeFormatError, match="payload"):
            load_volume(tmp_path / "v")

    def test_corrupt_header(self, tmp_path):
        save_volume(tmp_path / "v", np.zeros((2, 2, 2), np.float32))
        (tmp_path / "v.json").write_text("{not json")
        with pytest.raises(VolumeFormatError, match="corrupt"):
            load_volume(tmp_path / "v")

    def test_bad_shape_in_header(self, tmp_path):
        save_volume(tmp_path / "v", np.zeros((2, 2, 2), np.float32))
        hdr = json.loads((tmp_path / "v.json").read_text())
        hdr["shape"] = [2, 2]
        (tmp_path / "v.json").write_text(json.dumps(hdr))
        with pytest.raises(VolumeFormatError, match="shape"):
            load_volume(tmp_path / "v")


def test_context_set_invariants():
    img = np.zeros((2, 2, 2), np.float32)
    with pytest.raises(ValueError):
        ContextSet([], [], "box")
    with pytest.raises(ValueError):
        ContextSet([img, np.zeros((2, 2, 3))], [img, img], "box")
    with pytest.raises(ValueError):
        ContextSet([img], [img], "scribble")
    cs = ContextSet([img, img + 1], [img, img], "point")
    assert len(cs) == 2 and cs.shape == (2, 2, 2)
    assert cs.permuted([1, 0]).images[0][0, 0, 0] == 1
