import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from episeg import synth
from episeg.errors import DimensionMismatch, GridTooSmall
from episeg.registration import (AffineTransform, DisplacementField, RegistrationConfig,
                                 curvature_energy, endpoint_error, merge_patch_fields,
                                 ngf_distance, register_affine, register_nonparametric,
                                 to_grayscale, warp_image, warp_mask)
from episeg.registration.patchwise import Patch


def grad_oracle(img):
    """Central differences, one-sided at the borders, written out per pixel."""
    h, w = img.shape
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            if w > 1:
                if x == 0:
                    gx[y, x] = img[y, 1] - img[y, 0]
                elif x == w - 1:
                    gx[y, x] = img[y, x] - img[y, x - 1]
                else:
                    gx[y, x] = (img[y, x + 1] - img[y, x - 1]) / 2
            if h > 1:
                if y == 0:
                    gy[y, x] = img[1, x] - img[0, x]
                elif y == h - 1:
                    gy[y, x] = img[y, x] - img[y - 1, x]
                else:
                    gy[y, x] = (img[y + 1, x] - img[y - 1, x]) / 2
    return gx, gy


def ngf_oracle(T, R, eps):
    tx, ty = grad_oracle(T)
    rx, ry = grad_oracle(R)
    total = 0.0
    e2 = eps * eps
    for a, b, c, d in zip(tx.ravel(), ty.ravel(), rx.ravel(), ry.ravel()):
        r = (a * c + b * d + e2) / (np.sqrt(a * a + b * b + e2) * np.sqrt(c * c + d * d + e2))
        total += 1 - r * r
    return total


def curvature_oracle(u):
    """Stencil sum with zero second differences across the border."""
    s = 0.0
    _, h, w = u.shape
    for c in range(2):
        for y in range(h):
            for x in range(w):
                lap = 0.0
                if 0 < x < w - 1:
                    lap += u[c, y, x - 1] - 2 * u[c, y, x] + u[c, y, x + 1]
                if 0 < y < h - 1:
                    lap += u[c, y - 1, x] - 2 * u[c, y, x] + u[c, y + 1, x]
                s += 0.5 * lap * lap
    return s


def affine_field(r, h, w):
    A = r.normal(size=(2, 2))
    t = r.normal(size=2) * 5
    y, x = np.mgrid[0:h, 0:w].astype(float)
    return np.stack([A[0, 0] * x + A[0, 1] * y + t[0], A[1, 0] * x + A[1, 1] * y + t[1]])


def test_grayscale():
    assert to_grayscale(np.array([[[255, 255, 255]]]))[0, 0] == pytest.approx(255.0)
    assert to_grayscale(np.array([[[255, 0, 0]]]))[0, 0] == pytest.approx(76.245)
    assert to_grayscale(np.array([[[37, 37, 37]]]))[0, 0] == pytest.approx(37.0)


def test_ngf_examples(rng):
    T = rng.random((12, 12)) * 255
    assert ngf_distance(T, T, 3.0)[0] == 0.0
    assert ngf_distance(np.full((8, 8), 10.0), np.full((8, 8), 200.0), 1.0)[0] == 0.0
    g, eps = 100.0, 1.0
    y, x = np.mgrid[0:10, 0:10].astype(float)
    T, R = g * x, g * y
    D = ngf_distance(T, R, eps)[0]
    assert D == pytest.approx(ngf_oracle(T, R, eps), rel=1e-12)
    assert D == pytest.approx(100 * (1 - (eps ** 2 / (g ** 2 + eps ** 2)) ** 2), rel=1e-12)
    with pytest.raises(DimensionMismatch):
        ngf_distance(np.zeros((4, 4)), np.zeros((4, 5)), 1.0)


def test_ngf_matches_brute_force(rng):
    for _ in range(5):
        T = rng.random((9, 13)) * 50
        R = rng.random((9, 13)) * 50
        eps = rng.uniform(0.5, 5)
        assert ngf_distance(T, R, eps)[0] == pytest.approx(ngf_oracle(T, R, eps), rel=1e-12)


def fd_relative_error(f, x, grad, h=1e-6):
    fd = np.zeros_like(x)
    flat, g = x.ravel(), fd.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return np.linalg.norm(fd - grad) / max(np.linalg.norm(fd), 1e-300)


def test_ngf_gradient_finite_differences(rng):
    for _ in range(3):
        T = rng.random((16, 16)) * 10
        R = rng.random((16, 16)) * 10
        _, g = ngf_distance(T, R, 1.0)
        err = fd_relative_error(lambda w: ngf_distance(T, w, 1.0)[0], R.copy(), g)
        assert err <= 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 100))
def test_ngf_range_and_scaling(seed, c):
    r = np.random.default_rng(seed)
    T, R = r.random((10, 10)) * 20, r.random((10, 10)) * 20
    D = ngf_distance(T, R, 2.0)[0]
    assert 0 <= D <= T.size
    assert ngf_distance(c * T, c * R, 2.0 * c)[0] == pytest.approx(D, abs=1e-10)
    assert ngf_distance(T, T, 2.0)[0] == 0.0


def test_curvature_examples():
    assert curvature_energy(np.zeros((2, 5, 5)))[0] == 0.0
    y, x = np.mgrid[0:6, 0:7].astype(float)
    u = np.stack([x ** 2, np.zeros_like(x)])
    # x-second difference is 2 wherever it is defined (columns 1..w-2)
    assert curvature_energy(u)[0] == pytest.approx(0.5 * 4 * 6 * 5)
    assert curvature_energy(u)[0] == pytest.approx(curvature_oracle(u))
    with pytest.raises(GridTooSmall):
        curvature_energy(np.zeros((2, 2, 5)))


def test_curvature_affine_null_space_and_positivity(rng):
    for _ in range(100):
        u = affine_field(rng, 9, 11)
        assert curvature_energy(u)[0] <= 1e-10
        pert = rng.normal(size=u.shape)
        pert *= 1e-3 / np.abs(pert).max()
        assert curvature_energy(u + pert)[0] > 0


def test_curvature_gradient_and_oracle(rng):
    u = rng.normal(size=(2, 16, 16))
    val, g = curvature_energy(u)
    assert val == pytest.approx(curvature_oracle(u), rel=1e-12)
    assert fd_relative_error(lambda v: curvature_energy(v)[0], u.copy(), g, h=1e-4) <= 1e-4


def test_warp_examples(rng):
    img = rng.integers(0, 256, (20, 30), dtype=np.uint8)
    assert np.array_equal(warp_image(img, np.zeros((2, 20, 30))), img)
    shift = np.zeros((2, 20, 30))
    shift[0] = 3
    out = warp_image(img, shift, interpolation="nearest")
    assert np.array_equal(out[:, :-3], img[:, 3:])
    assert not out[:, -3:].any()
    assert (warp_image(img, shift)[:, -3:] == 255).all()


def test_warp_mask_inverse_consistency():
    r = np.random.default_rng(3)
    from scipy import ndimage
    mask = ndimage.gaussian_filter(r.random((96, 96)), 4) > 0.5
    y, x = np.mgrid[0:96, 0:96].astype(float)
    u = np.stack([2.5 * np.sin(y / 15), 2.0 * np.cos(x / 18)])
    # inverse field by fixed-point iteration v(x) = -u(x + v(x))
    v = -u.copy()
    for _ in range(30):
        v = -np.stack([ndimage.map_coordinates(u[c], [y + v[1], x + v[0]], order=1, mode="nearest")
                       for c in range(2)])
    there = warp_mask(mask.astype(np.uint8), u)
    back = warp_mask(there, v).astype(bool)
    jac = (back & mask).sum() / (back | mask).sum()
    assert jac >= 0.95


def test_field_io_roundtrip(tmp_path, rng):
    f = DisplacementField(rng.normal(size=(2, 7, 9)).astype(np.float32))
    f.save(tmp_path / "f")
    g = DisplacementField.load(tmp_path / "f")
    assert np.array_equal(f.u, g.u)
    raw = np.fromfile(tmp_path / "f" / "field.bin", "<f4")
    assert raw[0] == np.float32(f.u[0, 0, 0]) and raw[1] == np.float32(f.u[1, 0, 0])


def test_merge_single_patch_is_identity(rng):
    cfg = RegistrationConfig(patch_size_px=64, patch_overlap_px=16)
    u = rng.normal(size=(2, 40, 50))
    merged = merge_patch_fields((40, 50), [Patch(0, 0, 40, 50)], [u], cfg)
    assert np.abs(merged - u).max() <= 1e-6


def blend_oracle(w, x0b, width_a, overlap, alpha, beta):
    """1-D merge of constant fields 0 (left patch) and 2 (right patch)."""
    xs = np.arange(w)
    wa = np.where(xs < width_a, np.minimum(1.0, (width_a - 1 - xs + 0.5) / overlap), 0.0)
    wb = np.where(xs >= x0b, np.minimum(1.0, (xs - x0b + 0.5) / overlap), 0.0)
    target = (2.0 * wb) / (wa + wb)
    free = (xs >= x0b) & (xs < width_a)
    # rows: sqrt(beta) (u - target) on free nodes, sqrt(alpha/2) second differences
    rows, rhs = [], []
    idx = np.flatnonzero(free)
    for k, j in enumerate(idx):
        r = np.zeros(idx.size)
        r[k] = np.sqrt(beta)
        rows.append(r)
        rhs.append(np.sqrt(beta) * target[j])
    for j in range(1, w - 1):
        r = np.zeros(idx.size)
        const = 0.0
        for off, c in ((-1, 1.0), (0, -2.0), (1, 1.0)):
            jj = j + off
            if free[jj]:
                r[np.searchsorted(idx, jj)] += c
            else:
                const += c * target[jj]
        rows.append(np.sqrt(alpha / 2) * r)
        rhs.append(-np.sqrt(alpha / 2) * const)
    sol = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
    out = target.copy()
    out[idx] = sol
    return out


def test_merge_conflicting_patches_blend():
    h, w, size, overlap = 64, 56, 32, 8
    cfg = RegistrationConfig(patch_size_px=size, patch_overlap_px=overlap, curvature_weight=10.0)
    pa, pb = Patch(0, 0, h, size), Patch(0, w - size, h, size)
    fa = np.zeros((2, h, size))
    fb = np.zeros((2, h, size))
    fb[0] = 2.0
    merged = merge_patch_fields((h, w), [pa, pb], [fa, fb], cfg)
    ux = merged[0]
    assert np.all(np.diff(ux, axis=1) >= -1e-9)
    assert ux.min() >= -1e-9 and ux.max() <= 2 + 1e-9
    assert np.abs(merged[1]).max() <= 1e-9
    assert np.abs(np.diff(ux, 2, axis=1)).max() <= 2.0
    # the border rows of the curvature operator couple rows near the top and
    # bottom edge; away from them every row is the 1-D blend
    expected = blend_oracle(w, w - size, size, overlap, 10.0, 1.0)
    assert np.abs(ux[24:40] - expected).max() <= 1e-6


@pytest.fixture(scope="module")
def gland_image():
    he, _, _ = synth.generate_pair(synth.SynthConfig(rng_seed=11))
    return to_grayscale(he)


def test_affine_self_registration(gland_image):
    T = register_affine(gland_image, gland_image, RegistrationConfig())
    assert np.linalg.norm(T.A - np.eye(2)) < 1e-3
    assert np.linalg.norm(T.t) < 0.1


def test_affine_recovers_shift(gland_image):
    # moving(x + (7, -3)) = fixed(x)
    truth = AffineTransform(np.eye(2), (7.0, -3.0))
    moving = warp_image(gland_image, AffineTransform(np.eye(2), (-7.0, 3.0)))
    T = register_affine(gland_image, moving)
    assert np.abs(T.t - truth.t).max() <= 0.5


def test_affine_recovers_rotation(gland_image):
    h, w = gland_image.shape
    center = ((w - 1) / 2, (h - 1) / 2)
    rot = AffineTransform.rigid(5.0, center=center)
    inv = AffineTransform.rigid(-5.0, center=center)
    moving = warp_image(gland_image, inv)
    T = register_affine(gland_image, moving)
    assert abs(T.angle_deg - rot.angle_deg) <= 0.25


def test_nonparametric_self_registration(gland_image):
    f = register_nonparametric(gland_image, gland_image)
    assert f.max_norm() < 0.1


def test_nonparametric_large_alpha_keeps_affine(gland_image):
    init = AffineTransform.rigid(1.0, shift=(2.0, -1.0), center=(128, 128))
    moving = warp_image(gland_image, AffineTransform.rigid(-2.0, center=(128, 128)))
    f = register_nonparametric(gland_image, moving, init, RegistrationConfig(curvature_weight=1e6))
    ref = init.displacement(gland_image.shape)
    assert np.abs(f.u - ref).max() <= 0.1


def test_solver_trace_monotone(gland_image):
    moving = warp_image(gland_image, AffineTransform(np.eye(2), (-2.0, 1.0)))
    trace = []
    register_nonparametric(gland_image, moving, None, RegistrationConfig(), trace=trace)
    by_level = {}
    for row in trace:
        by_level.setdefault(row["level"], []).append(row["objective"])
    assert by_level
    for objs in by_level.values():
        assert all(b <= a for a, b in zip(objs, objs[1:]))


def test_config_validation():
    from episeg.errors import InputError
    with pytest.raises(InputError):
        RegistrationConfig(ngf_epsilon=0)
    with pytest.raises(InputError):
        RegistrationConfig(patch_size_px=64, patch_overlap_px=64)
    with pytest.raises(InputError):
        RegistrationConfig.from_dict({"bogus": 1})
    assert endpoint_error(np.zeros((2, 3, 3)), np.ones((2, 3, 3))) == pytest.approx(np.sqrt(2))
