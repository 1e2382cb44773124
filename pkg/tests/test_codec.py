import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unidiff import codec


def test_shapes_default_factor(rng):
    img = rng.uniform(-1, 1, (64, 64, 3)).astype(np.float32)
    z = codec.encode(img)
    assert z.shape == (32, 32, 12)
    assert codec.decode(z).shape == (64, 64, 3)
    assert codec.latent_channels() == 12


def test_zero_image_gives_zero_latent():
    assert not codec.encode(np.zeros((64, 64, 3), np.float32)).any()


def test_channel_layout_matches_block_order(rng):
    img = rng.uniform(-1, 1, (8, 8, 3)).astype(np.float32)
    z = codec.encode(img, 2)
    for i in range(4):
        for j in range(4):
            for dy in range(2):
                for dx in range(2):
                    for c in range(3):
                        assert z[i, j, (dy * 2 + dx) * 3 + c] == img[2 * i + dy, 2 * j + dx, c]


def test_round_trip_exact(rng):
    img = rng.uniform(-1, 1, (64, 64, 3)).astype(np.float32)
    assert np.array_equal(codec.decode(codec.encode(img)), img)
    z = rng.standard_normal((32, 32, 12)).astype(np.float32)
    assert np.array_equal(codec.encode(codec.decode(z)), z)


def test_batch_dims(rng):
    img = rng.uniform(-1, 1, (5, 64, 64, 3)).astype(np.float32)
    z = codec.encode(img)
    assert z.shape == (5, 32, 32, 12)
    assert np.array_equal(z[3], codec.encode(img[3]))


def test_rejects_bad_shapes():
    with pytest.raises(ValueError):
        codec.encode(np.zeros((63, 64, 3)))
    with pytest.raises(ValueError):
        codec.decode(np.zeros((32, 32, 8)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, (4, 6, 3), elements=st.floats(-1, 1, width=32)), st.sampled_from([1, 2]))
def test_round_trip_and_value_multiset_property(img, factor):
    z = codec.encode(img, factor)
    assert np.array_equal(codec.decode(z, factor), img)
    # a pure rearrangement: same multiset of values (implies equal energy)
    assert np.array_equal(np.sort(z, axis=None), np.sort(img, axis=None))


def test_resize_mask_examples():
    assert np.array_equal(codec.resize_mask(np.ones((64, 64)), 32, 32), np.ones((32, 32)))
    half = np.zeros((64, 64))
    half[:, :32] = 1
    r = codec.resize_mask(half, 32, 32)
    assert np.all(r[:, :16] == 1.0) and np.all(r[:, 16:] == 0.0)
    assert codec.resize_mask(np.array([[1, 0], [0, 0]]), 1, 1)[0, 0] == 0.25


def test_resize_mask_matches_loop_oracle(rng):
    m = (rng.random((12, 12)) < 0.4).astype(np.float32)
    r = codec.resize_mask(m, 4, 4)
    for i in range(4):
        for j in range(4):
            block = m[3 * i:3 * i + 3, 3 * j:3 * j + 3]
            assert r[i, j] == pytest.approx(sum(block.ravel()) / 9, abs=1e-7)


def test_resize_mask_rejects_non_integer_ratio():
    with pytest.raises(ValueError):
        codec.resize_mask(np.ones((64, 64)), 30, 30)


@settings(max_examples=40, deadline=None)
@given(arrays(np.bool_, (8, 8)), arrays(np.bool_, (8, 8)))
def test_resize_mask_monotone(a, b):
    lo, hi = a & b, a | b
    assert np.all(codec.resize_mask(lo, 4, 4) <= codec.resize_mask(hi, 4, 4))


def test_uint8_mapping():
    u = np.arange(256, dtype=np.uint8)
    x = codec.from_uint8(u)
    assert x[0] == -1.0 and x[255] == 1.0
    assert np.array_equal(codec.to_uint8(x), u)


def test_ppm_pgm_latent_io(tmp_path, rng):
    img = codec.from_uint8(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8))
    codec.write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n64 64\n255\n")
    assert np.array_equal(codec.read_ppm(tmp_path / "a.ppm"), img)
    mask = (rng.random((64, 64)) < 0.5).astype(np.float32)
    codec.write_pgm(tmp_path / "m.pgm", mask)
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5")
    assert np.array_equal(codec.read_pgm(tmp_path / "m.pgm"), mask)
    z = rng.standard_normal((32, 32, 12)).astype(np.float32)
    codec.write_latent(tmp_path / "z.lat", z)
    raw = (tmp_path / "z.lat").read_bytes()
    assert len(raw) == 16 + z.nbytes
    assert np.array_equal(np.frombuffer(raw[4:16], "<u4"), [32, 32, 12])
    assert np.array_equal(codec.read_latent(tmp_path / "z.lat"), z)
