import numpy as np
import pytest

from mmdrfuse import vgg as vggmod
from mmdrfuse.formats import FormatError
from mmdrfuse.ops import ShapeError


def test_blob_round_trip_bitwise(synthetic_vgg):
    fresh = vggmod.make_random_vgg(0)
    assert len(synthetic_vgg.layers) == 16
    for (wl, bl), (wf, bf) in zip(synthetic_vgg.layers, fresh.layers):
        np.testing.assert_array_equal(wl.data, wf.data)
        np.testing.assert_array_equal(bl.data, bf.data)
    np.testing.assert_array_equal(synthetic_vgg.mean, fresh.mean)
    np.testing.assert_array_equal(synthetic_vgg.std, fresh.std)


def test_blob_corruption_detected(tmp_path):
    blob = bytearray(vggmod.save_vgg(vggmod.make_random_vgg(1)))
    blob[len(blob) // 2] ^= 0xFF
    with pytest.raises(FormatError, match="checksum"):
        vggmod.load_vgg(bytes(blob))


def test_blob_truncation_detected():
    blob = vggmod.save_vgg(vggmod.make_random_vgg(1))
    with pytest.raises(FormatError):
        vggmod.load_vgg(blob[: len(blob) // 2])


def test_blob_magic_checked():
    from mmdrfuse import formats
    blob = vggmod.save_vgg(vggmod.make_random_vgg(1))
    body = bytearray(formats.split_checked(blob, "x"))
    body[0:4] = b"NOPE"
    rehashed = formats.finalize(body)
    with pytest.raises(FormatError, match="magic"):
        vggmod.load_vgg(rehashed)


def test_tap_shapes_at_128(synthetic_vgg):
    rng = np.random.default_rng(0)
    img = rng.random((128, 128)).astype(np.float32)
    taps = vggmod.extract_taps_data(img, synthetic_vgg)
    spatial = [t.shape[2] for t in taps]
    chans = [t.shape[1] for t in taps]
    assert spatial == [128, 64, 32, 16, 8]
    assert chans == [64, 128, 256, 512, 512]
    assert all(t.shape[0] == 1 and t.shape[2] == t.shape[3] for t in taps)


def test_zero_image_finite(synthetic_vgg):
    taps = vggmod.extract_taps_data(np.zeros((32, 32), np.float32),
                                    synthetic_vgg)
    for t in taps:
        assert np.all(np.isfinite(t))


def test_features_are_nonlinear(synthetic_vgg):
    rng = np.random.default_rng(3)
    img = rng.random((32, 32)).astype(np.float32)
    t1 = vggmod.extract_taps_data(img, synthetic_vgg)
    t2 = vggmod.extract_taps_data(0.5 * img, synthetic_vgg)
    # relu + normalization: halving the input must not halve the deepest tap
    a, b = t1[-1].ravel(), t2[-1].ravel()
    assert not np.allclose(a * 0.5, b, rtol=1e-3, atol=1e-5)


def test_input_gradient_matches_fd(synthetic_vgg):
    rng = np.random.default_rng(7)
    # float64 end to end: the kernels are dtype-generic, and double precision
    # keeps finite-difference cancellation noise below the tolerance
    img = rng.random((32, 32))
    cts = [rng.normal(size=(1, c, s, s))
           for c, s in zip(vggmod.TAP_CHANNELS, (32, 16, 8, 4, 2))]

    def f(x):
        taps = vggmod.extract_taps_data(x, synthetic_vgg)
        return float(sum(np.sum(t * ct) for t, ct in zip(taps, cts)))

    grad = vggmod.backward_to_input(img, synthetic_vgg, cts)
    assert grad.shape == (32, 32)
    eps = 1e-5
    probes = [(y, x) for y in (0, 13, 31) for x in (2, 16, 30)]
    for y, x in probes:
        hi = img.copy(); hi[y, x] += eps
        lo = img.copy(); lo[y, x] -= eps
        fd = (f(hi) - f(lo)) / (2 * eps)
        denom = max(abs(fd), abs(float(grad[y, x])), 1.0)
        assert abs(fd - float(grad[y, x])) / denom < 1e-2, (y, x)


def test_small_input_rejected(synthetic_vgg):
    with pytest.raises(ValueError, match="32"):
        vggmod.extract_taps(np.zeros((16, 16), np.float32), synthetic_vgg)


def test_non_divisible_input_rejected(synthetic_vgg):
    # 40 survives three halvings then hits an odd pool input
    with pytest.raises(ShapeError):
        vggmod.extract_taps(np.zeros((40, 40), np.float32), synthetic_vgg)


def test_wrong_layer_count_rejected():
    good = vggmod.make_random_vgg(0)
    layers = [(w.data, b.data) for w, b in good.layers]
    with pytest.raises(FormatError, match="15"):
        vggmod.VggWeights(layers[:15], good.mean, good.std)


def test_wrong_layer_shape_rejected():
    good = vggmod.make_random_vgg(0)
    layers = [(w.data, b.data) for w, b in good.layers]
    w0, b0 = layers[0]
    layers[0] = (w0[:, :2], b0)
    with pytest.raises(FormatError, match="layer 0"):
        vggmod.VggWeights(layers, good.mean, good.std)


def test_dump_round_trip(tmp_path, synthetic_vgg):
    rng = np.random.default_rng(11)
    img = rng.random((32, 32)).astype(np.float32)
    taps = vggmod.extract_taps_data(img, synthetic_vgg)
    path = str(tmp_path / "ref.vggd")
    vggmod.save_dump(taps, path)
    loaded = vggmod.load_dump(path)
    assert len(loaded) == 5
    for got, want in zip(loaded, taps):
        np.testing.assert_array_equal(got, want)
