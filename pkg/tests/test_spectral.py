import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibeam import autodiff as ad
from vibeam.params import ParamStore
from vibeam.scene import stack_complex, synth_radar_cube
from vibeam.spectral import Frontend, FrontendSpec, dft_matrix, init_frontend, pad_cube


def make(n_rx=2, S=8, C=4, Cp=None, rect=False):
    spec = FrontendSpec(n_rx, S, C, Cp or C)
    store = ParamStore()
    init_frontend(store, "fe", spec)
    fe = Frontend(store, "fe", spec)
    if rect:
        fe._base_s = np.ones(S)
        fe._base_c = np.ones(spec.padded_chirps)
    return fe, store


def peak(fe, cube):
    Y = fe.forward(fe.encode_input(stack_complex(cube)[None])).data
    mag = np.hypot(Y[0], Y[1]).sum(axis=0)
    return np.unravel_index(np.argmax(mag), mag.shape), mag


def test_dft_matrix_is_unitary():
    F = dft_matrix(6)
    Fc = F[0] + 1j * F[1]
    np.testing.assert_allclose(Fc.conj().T @ Fc, np.eye(6), atol=1e-14)


def test_rectangular_window_peak():
    fe, _ = make(rect=True)
    for r0 in range(8):
        for d0 in range(4):
            assert peak(fe, synth_radar_cube([(1.0, r0, d0, 0.3)], 2, 8, 4))[0] == (r0, d0)


def test_two_targets_give_equal_peaks():
    fe, _ = make(rect=True)
    _, mag = peak(fe, synth_radar_cube([(1.0, 1, 0, 0.0), (1.0, 6, 3, 0.0)], 2, 8, 4))
    assert mag[1, 0] == pytest.approx(mag[6, 3], rel=1e-12)
    assert np.sort(mag.ravel())[-3] < 1e-9


def test_round_trip_with_small_window_offsets():
    rng = np.random.default_rng(0)
    fe, store = make(S=5, C=3, Cp=4)
    store.set_array("fe.delta_s", rng.uniform(-0.1, 0.1, 5))
    store.set_array("fe.delta_c", rng.uniform(-0.1, 0.1, 4))
    X = rng.standard_normal((2, 3, 5, 4))
    assert np.max(np.abs(fe.inverse(fe.forward(X)).data - X)) <= 1e-9


def test_unitarity_penalty_zero_at_init_and_gradient():
    rng = np.random.default_rng(1)
    fe, store = make(S=4, C=3)
    assert fe.unitarity_penalty().item() <= 1e-10
    store.set_array("fe.dft_r", rng.normal(0, 0.05, (2, 4, 4)))
    store.set_array("fe.dft_d", rng.normal(0, 0.05, (2, 3, 3)))
    res = ad.grad_check(fe.unitarity_penalty, [store["fe.dft_r"], store["fe.dft_d"]])
    assert res["max_rel_error"] <= 1e-5
    assert min(fe.unitarity_error()) > 0


def test_windows_have_unit_norm():
    fe, store = make(S=6, C=5)
    store.set_array("fe.delta_s", np.linspace(-1, 1, 6))
    for w in fe.windows():
        assert np.linalg.norm(w.data) == pytest.approx(1.0, abs=1e-14)


def test_degenerate_window_rejected():
    fe, store = make(S=4, C=4)
    store.set_array("fe.delta_s", np.array([-30.0, 0.0, 0.0, 0.0]))
    with pytest.raises(ValueError, match="singular"):
        fe.inverse(np.zeros((2, 1, 4, 4)))


def test_shape_checks_and_padding():
    fe, _ = make(S=4, C=3, Cp=4)
    with pytest.raises(ad.ShapeError):
        fe.forward(np.zeros((2, 1, 4, 3)))
    with pytest.raises(ValueError):
        pad_cube(np.zeros((1, 2, 5)), 4)
    padded = pad_cube(np.ones((1, 2, 3)), 4)
    assert padded.shape == (1, 2, 4) and not padded[..., 3].any()


def test_layout_helpers_round_trip():
    rng = np.random.default_rng(2)
    fe, _ = make(n_rx=3, S=4, C=3, Cp=4)
    x = rng.standard_normal((5, 6, 4, 3))
    pairs = fe.encode_input(x)
    flat = fe.data_from_pairs(ad.constant(pairs), 5).data
    np.testing.assert_array_equal(flat, x.reshape(5, -1))
    z = rng.standard_normal((5, fe.spec.z_size))
    back = fe.features_from_pairs(fe.pairs_from_features(z, 5), 5).data
    np.testing.assert_array_equal(back, z)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 8), st.integers(2, 6), st.data())
def test_hamming_peak_property(S, C, data):
    r0 = data.draw(st.integers(0, S - 1))
    d0 = data.draw(st.integers(0, C - 1))
    fe, _ = make(n_rx=1, S=S, C=C)
    assert peak(fe, synth_radar_cube([(1.0, r0, d0, 0.0)], 1, S, C))[0] == (r0, d0)
