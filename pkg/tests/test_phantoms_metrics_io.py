import numpy as np
import pytest
from hypothesis import given, strategies as st

from sparsedeq.io import (ContainerFormatError, ContainerTruncatedError, export_pgm, read_container, read_csv,
                          read_pgm, write_container, write_csv)
from sparsedeq.metrics import psnr, ssim
from sparsedeq.phantoms import MODIFIED_SHEPP_LOGAN, PhantomSpec, generate_phantom, phantom_set, shepp_logan


# -- phantoms -----------------------------------------------------------------

def test_phantom_deterministic():
    spec = PhantomSpec("random-ellipses", 32, 9)
    np.testing.assert_array_equal(generate_phantom(spec), generate_phantom(spec))


@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([8, 16, 33]))
def test_phantom_range(seed, side):
    x = generate_phantom(PhantomSpec("random-ellipses", side, seed))
    assert x.shape == (side, side) and x.min() >= 0.0 and x.max() <= 1.0


@pytest.mark.parametrize("kw", [dict(kind="cube"), dict(side=4), dict(n_min=0), dict(n_min=5, n_max=3)])
def test_phantom_spec_validation(kw):
    base = dict(kind="random-ellipses", side=16, seed=0)
    base.update(kw)
    with pytest.raises(ValueError):
        PhantomSpec(**base)


def test_phantom_set_distinct_items():
    imgs = phantom_set(4, 16, 0)
    assert len(imgs) == 4
    assert all(not np.array_equal(imgs[0], b) for b in imgs[1:])
    np.testing.assert_array_equal(phantom_set(4, 16, 0)[2], imgs[2])


def _inside(px, py, a, b, x0, y0, phi):
    t = np.deg2rad(phi)
    u = (px - x0) * np.cos(t) + (py - y0) * np.sin(t)
    v = -(px - x0) * np.sin(t) + (py - y0) * np.cos(t)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def test_shepp_logan_geometry():
    side = 64
    img = shepp_logan(side)
    outer, second = MODIFIED_SHEPP_LOGAN[0], MODIFIED_SHEPP_LOGAN[1]
    for r in range(side):
        for c in range(side):
            px = -1 + (2 * c + 1) / side
            py = 1 - (2 * r + 1) / side
            if not _inside(px, py, *outer[1:]):
                assert img[r, c] == 0.0
            elif not _inside(px, py, *second[1:]):
                assert img[r, c] > 0.0
    for corner in (img[0, 0], img[0, -1], img[-1, 0], img[-1, -1]):
        assert corner == 0.0


# -- metrics ------------------------------------------------------------------

def test_psnr_identical_is_inf(rng):
    x = rng.random((12, 12))
    assert psnr(x, x) == float("inf")


def test_psnr_known_value():
    ref = np.zeros((10, 10))
    x = np.full((10, 10), 0.1)
    assert psnr(x, ref, data_range=1.0) == pytest.approx(20.0, abs=1e-12)


def test_psnr_textbook(rng):
    x, ref = rng.random((2, 16, 16))
    mse = sum((a - b) ** 2 for a, b in zip(x.ravel(), ref.ravel())) / x.size
    expected = 10 * np.log10(ref.max() ** 2 / mse)
    assert psnr(x, ref) == pytest.approx(expected, abs=1e-12)


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 3)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        psnr(np.ones((3, 3)), np.zeros((3, 3)))


def _ssim_textbook(x, ref, data_range):
    t = np.arange(11) - 5.0
    g1 = np.exp(-t ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g1, g1)
    w /= w.sum()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            a = x[i:i + 11, j:j + 11]
            b = ref[i:i + 11, j:j + 11]
            ma, mb = np.sum(w * a), np.sum(w * b)
            va = np.sum(w * (a - ma) ** 2)
            vb = np.sum(w * (b - mb) ** 2)
            cov = np.sum(w * (a - ma) * (b - mb))
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_textbook(rng):
    ref = rng.random((20, 18))
    x = ref + 0.1 * rng.standard_normal(ref.shape)
    assert ssim(x, ref) == pytest.approx(_ssim_textbook(x, ref, ref.max()), abs=1e-9)


def test_ssim_self_is_one(rng):
    x = rng.random((16, 16))
    assert ssim(x, x) == 1.0


def test_ssim_symmetric(rng):
    x, ref = rng.random((2, 16, 16))
    assert ssim(x, ref, 1.0) == pytest.approx(ssim(ref, x, 1.0), abs=1e-12)


def test_ssim_constants_closed_form():
    L, c = 1.0, 0.2
    x = np.full((16, 16), c)
    ref = np.full((16, 16), c + 0.5 * L)
    c1 = (0.01 * L) ** 2
    expected = (2 * c * (c + 0.5 * L) + c1) / (c ** 2 + (c + 0.5 * L) ** 2 + c1)
    assert ssim(x, ref, L) == pytest.approx(expected, abs=1e-9)


def test_ssim_small_image_rejected():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)), 1.0)


@given(st.integers(0, 1000))
def test_ssim_bounded(seed):
    x, ref = np.random.default_rng(seed).standard_normal((2, 12, 12))
    assert -1.0 <= ssim(x, ref, 2.0) <= 1.0


# -- containers, PGM, CSV -------------------------------------------------------

@pytest.mark.parametrize("shape,kind", [((1, 1), "image"), ((7, 5), "sinogram"), ((32, 32), "image")])
def test_container_round_trip(tmp_path, rng, shape, kind):
    data = rng.standard_normal(shape)
    data[0, 0] = -0.0
    write_container(tmp_path / "a.tsdq", data, kind)
    c = read_container(tmp_path / "a.tsdq")
    assert c.kind == kind
    assert c.data.tobytes() == data.astype("<f8").tobytes()


def test_container_layout(tmp_path):
    write_container(tmp_path / "a.tsdq", np.array([[1.0, 2.0, 3.0]]), "sinogram")
    raw = (tmp_path / "a.tsdq").read_bytes()
    assert raw[:4] == b"TSDQ" and raw[4:6] == b"\x01\x00" and raw[6] == 1
    assert raw[8:16] == b"\x01\x00\x00\x00\x03\x00\x00\x00"
    assert np.frombuffer(raw[16:], "<f8").tolist() == [1.0, 2.0, 3.0]


def test_container_truncated(tmp_path, rng):
    write_container(tmp_path / "a.tsdq", rng.random((4, 4)))
    raw = (tmp_path / "a.tsdq").read_bytes()
    for cut in (3, 10, len(raw) - 1):
        (tmp_path / "t.tsdq").write_bytes(raw[:cut])
        with pytest.raises(ContainerTruncatedError):
            read_container(tmp_path / "t.tsdq")


def test_container_bad_magic_names_path(tmp_path):
    p = tmp_path / "bad.tsdq"
    p.write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(ContainerFormatError, match="bad.tsdq"):
        read_container(p)


def test_container_bad_version(tmp_path):
    p = tmp_path / "v.tsdq"
    write_container(p, np.zeros((2, 2)))
    raw = bytearray(p.read_bytes())
    raw[4] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(ContainerFormatError, match="version"):
        read_container(p)


@pytest.mark.parametrize("value,expected", [(0.0, 0), (1.0, 65535), (-3.0, 0), (5.0, 65535)])
def test_pgm_window_ends(tmp_path, value, expected):
    export_pgm(np.full((3, 4), value), tmp_path / "x.pgm", (0.0, 1.0))
    pix = read_pgm(tmp_path / "x.pgm")
    assert pix.shape == (3, 4) and np.all(pix == expected)


def test_pgm_midpoint_round_half_even(tmp_path):
    export_pgm(np.full((2, 2), 0.5), tmp_path / "m.pgm", (0.0, 1.0))
    assert np.all(read_pgm(tmp_path / "m.pgm") == 32768)  # 32767.5 rounds to even


def test_pgm_bad_window(tmp_path):
    with pytest.raises(ValueError):
        export_pgm(np.zeros((2, 2)), tmp_path / "w.pgm", (1.0, 1.0))


def test_csv_round_trip(tmp_path):
    write_csv(tmp_path / "a.csv", ["id", "name", "value"], [[1, "a,b", 0.1], [np.int64(2), 'q"x', np.float64(1 / 3)]])
    rows = read_csv(tmp_path / "a.csv")
    assert rows[0] == {"id": "1", "name": "a,b", "value": "0.1"}
    assert rows[1]["name"] == 'q"x' and float(rows[1]["value"]) == 1 / 3
