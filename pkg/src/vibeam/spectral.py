"""Learnable range-Doppler front end for radar cubes.

Complex arrays travel through the autodiff engine as paired real tensors
with a leading axis of length 2.  A batch of cubes is laid out as
``[2, n, S, C]`` where ``n`` runs over (sample, antenna).

Windows are ``w = w0 * exp(delta) / ||w0 * exp(delta)||`` on both axes and
the transforms are ``F = F0 + Delta`` with unitary DFT bases ``F0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

MIN_WINDOW = 1e-6


def dft_matrix(n, sign=-1):
    """Unitary Fourier matrix ``exp(sign*2j*pi*k*n/N)/sqrt(N)`` as pairs [2, n, n]."""
    k = np.arange(n)
    F = np.exp(sign * 2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)
    return np.stack([F.real, F.imag])


def pad_cube(cube, target):
    """Zero-pad the chirp (last) axis of a complex cube up to ``target``."""
    cube = np.asarray(cube)
    c = cube.shape[-1]
    if c > target:
        raise ValueError(f"cube has {c} chirps, more than the padded extent {target}")
    if c == target:
        return cube.copy()
    pad = [(0, 0)] * (cube.ndim - 1) + [(0, target - c)]
    return np.pad(cube, pad)


@dataclass
class FrontendSpec:
    n_rx: int
    samples: int
    chirps: int
    padded_chirps: int

    @property
    def z_size(self):
        return 2 * self.n_rx * self.samples * self.padded_chirps

    @property
    def x_size(self):
        return 2 * self.n_rx * self.samples * self.chirps


def init_frontend(store, prefix, spec):
    store.add(f"{prefix}.delta_s", np.zeros(spec.samples))
    store.add(f"{prefix}.delta_c", np.zeros(spec.padded_chirps))
    store.add(f"{prefix}.dft_r", np.zeros((2, spec.samples, spec.samples)))
    store.add(f"{prefix}.dft_d", np.zeros((2, spec.padded_chirps, spec.padded_chirps)))


class Frontend:
    """Window and DFT parameters bound to a ParamStore prefix."""

    def __init__(self, store, prefix, spec):
        self.store = store
        self.prefix = prefix
        self.spec = spec
        self._base_s = np.hamming(spec.samples) if spec.samples > 1 else np.ones(1)
        self._base_c = np.hamming(spec.padded_chirps) if spec.padded_chirps > 1 else np.ones(1)
        self._F0_r = dft_matrix(spec.samples)
        # right-multiplying by F_d^H must be a forward DFT over slow time
        self._F0_d = dft_matrix(spec.padded_chirps, sign=+1)

    def windows(self):
        return (_window(self._base_s, self.store[f"{self.prefix}.delta_s"]),
                _window(self._base_c, self.store[f"{self.prefix}.delta_c"]))

    def F_r(self):
        return ad.add(self._F0_r, self.store[f"{self.prefix}.dft_r"])

    def F_d(self):
        return ad.add(self._F0_d, self.store[f"{self.prefix}.dft_d"])

    def window_matrix(self):
        w_s, w_c = self.windows()
        return ad.matmul(ad.reshape(w_s, (-1, 1)), ad.reshape(w_c, (1, -1)))

    def forward(self, X):
        """Windowed 2-D transform ``F_r (X * W) F_d^H`` of pairs [2, n, S, C']."""
        X = ad.constant(X)
        self._check(X)
        W = _tile_pair(self.window_matrix(), X.shape[1])
        return _two_sided(ad.mul(X, W), self.F_r(), conj_t(self.F_d()))

    def inverse(self, Y):
        """Mirror of :meth:`forward`: ``(F_r^H Y F_d) / W``."""
        Y = ad.constant(Y)
        self._check(Y)
        Wm = self.window_matrix()
        if np.min(Wm.data) < MIN_WINDOW:
            raise ValueError(f"window entry below {MIN_WINDOW}; de-windowing is singular")
        X = _two_sided(Y, conj_t(self.F_r()), self.F_d())
        return ad.div(X, _tile_pair(Wm, Y.shape[1]))

    def unitarity_penalty(self):
        return ad.add(_unitarity(self.F_r()), _unitarity(self.F_d()))

    def unitarity_error(self):
        """Frobenius norms ||F^H F - I|| for both transforms (no gradient)."""
        with ad.no_grad():
            return tuple(float(np.sqrt(_unitarity(F).item())) for F in (self.F_r(), self.F_d()))

    # layout helpers between stacked-real data and complex pairs

    def encode_input(self, x):
        """Stacked real cubes [batch, 2*n_rx, S, C] -> padded pairs [2, batch*n_rx, S, C']."""
        x = np.asarray(x, dtype=np.float64)
        b = x.shape[0]
        s = self.spec
        pair = x.reshape(b, 2, s.n_rx, s.samples, s.chirps).transpose(1, 0, 2, 3, 4)
        pair = pair.reshape(2, b * s.n_rx, s.samples, s.chirps)
        return pad_cube(pair, s.padded_chirps)

    def pairs_from_features(self, z, batch):
        """Flat features [batch, 2*n_rx*S*C'] -> pairs [2, batch*n_rx, S, C']."""
        s = self.spec
        z = ad.reshape(z, (batch, 2, s.n_rx, s.samples, s.padded_chirps))
        z = ad.transpose(z, (1, 0, 2, 3, 4))
        return ad.reshape(z, (2, batch * s.n_rx, s.samples, s.padded_chirps))

    def features_from_pairs(self, Y, batch):
        """Pairs [2, batch*n_rx, S, C'] -> flat real/imag stacked features."""
        s = self.spec
        Y = ad.reshape(Y, (2, batch, s.n_rx, s.samples, s.padded_chirps))
        Y = ad.transpose(Y, (1, 0, 2, 3, 4))
        return ad.reshape(Y, (batch, s.z_size))

    def data_from_pairs(self, X, batch):
        """Crop padded chirps and return flat stacked data [batch, 2*n_rx*S*C]."""
        s = self.spec
        if s.padded_chirps != s.chirps:
            X = ad.slice_(X, (slice(None), slice(None), slice(None), slice(0, s.chirps)))
        X = ad.reshape(X, (2, batch, s.n_rx, s.samples, s.chirps))
        X = ad.transpose(X, (1, 0, 2, 3, 4))
        return ad.reshape(X, (batch, s.x_size))

    def _check(self, X):
        s = self.spec
        if X.ndim != 4 or X.shape[0] != 2 or X.shape[2:] != (s.samples, s.padded_chirps):
            raise ad.ShapeError(
                f"expected pairs [2, n, {s.samples}, {s.padded_chirps}], got {X.shape}")


def _window(base, delta):
    w = ad.mul(base, ad.exp(delta))
    return ad.div(w, ad.sqrt(ad.sum_(ad.mul(w, w))))


def _tile_pair(Wm, n):
    return ad.expand(ad.expand(Wm, 0, n), 0, 2)


def conj_t(F):
    """Conjugate transpose of a paired matrix [2, a, b] -> [2, b, a]."""
    Ft = ad.transpose(F, (0, 2, 1))
    sign = np.ones(Ft.shape)
    sign[1] = -1.0
    return ad.mul(Ft, sign)


def _two_sided(X, L, R):
    """``L X R`` for every slice of pairs X [2, n, a, b]."""
    _, n, a, b = X.shape
    t = ad.reshape(ad.transpose(X, (0, 2, 1, 3)), (2, a, n * b))
    t = ad.cmatmul(L, t)
    a2 = L.shape[1]
    t = ad.transpose(ad.reshape(t, (2, a2, n, b)), (0, 2, 1, 3))
    t = ad.reshape(t, (2, n * a2, b))
    t = ad.cmatmul(t, R)
    return ad.reshape(t, (2, n, a2, R.shape[2]))


def _unitarity(F):
    n = F.shape[1]
    eye = np.zeros((2, n, n))
    eye[0] = np.eye(n)
    D = ad.sub(ad.cmatmul(conj_t(F), F), eye)
    return ad.sum_(ad.mul(D, D))
