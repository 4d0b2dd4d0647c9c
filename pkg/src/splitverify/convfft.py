"""Fourier-domain graph projection for multi-channel circular convolutions.

A circular convolution with ``n`` input and ``m`` output channels over ``p``
spatial positions is block-diagonalised by the DFT: at every frequency it
acts as a dense ``m x n`` channel-mixing matrix. ``(I + W^T W)^{-1}`` thus
becomes ``p`` small inverses, stored as a batch. Only the per-frequency
blocks are kept, never the expanded block-diagonal operators.

Transforms use numpy's convention: unnormalised forward, ``1/p`` inverse.
"""

from __future__ import annotations

from math import log2, prod

import numpy as np

from .model import CircularConv, GeometryError, ShapeError

__all__ = ["FourierConvCache", "build_fourier_cache", "project_circ_graph"]


class FourierConvCache:
    """Per-frequency channel blocks and inverses for one :class:`CircularConv`.

    Attributes
    ----------
    D : complex array, shape (p, m, n)
        Channel-mixing matrix at every frequency bin.
    inv_blocks : complex array, shape (p, k, k)
        ``(I_n + D^H D)^{-1}`` when ``n <= m`` (k = n), otherwise
        ``(I_m + D D^H)^{-1}`` (k = m) used through the Woodbury identity.
    """

    def __init__(self, layer: CircularConv):
        m, n = layer.channels
        self.m, self.n = m, n
        self.spatial = layer.spatial
        self.p = prod(self.spatial)
        self.axes = tuple(range(1, 1 + len(self.spatial)))
        self.D = np.ascontiguousarray(layer.spectrum.reshape(m, n, self.p).transpose(2, 0, 1))
        self.woodbury = m < n
        k = m if self.woodbury else n
        if self.woodbury:
            G = self.D @ self.D.conj().transpose(0, 2, 1)
        else:
            G = self.D.conj().transpose(0, 2, 1) @ self.D
        G = G + np.eye(k)
        self.inv_blocks = np.linalg.solve(G, np.broadcast_to(np.eye(k), G.shape))
        err = np.abs(self.inv_blocks @ G - np.eye(k)).max()
        if not err <= 1e-8:
            raise ArithmeticError(f"per-frequency inverse check failed ({err:.2e})")

    @property
    def block_size(self) -> int:
        return self.inv_blocks.shape[1]

    def system_blocks(self) -> np.ndarray:
        """The matrices that ``inv_blocks`` invert, one per frequency."""
        k = self.block_size
        if self.woodbury:
            return self.D @ self.D.conj().transpose(0, 2, 1) + np.eye(k)
        return self.D.conj().transpose(0, 2, 1) @ self.D + np.eye(k)

    def cost(self) -> dict[str, float]:
        """Scalar-operation budgets for construction and one projection."""
        m, n, p = self.m, self.n, self.p
        k = self.block_size
        lg = max(log2(p), 1.0)
        return {
            "build": n * m * p * lg + k**3 * p,
            "project": (n + m) * p * lg + n * n * m * p,
            "memory": m * n * p + k * k * p,
        }

    # Fourier-domain helpers on arrays shaped (channels, p, B)

    def _fft(self, v, c):
        B = v.shape[1] if v.ndim == 2 else 1
        x = v.reshape((c, *self.spatial, B))
        return np.fft.fftn(x, axes=self.axes).reshape(c, self.p, B)

    def _ifft(self, V, c):
        B = V.shape[2]
        x = np.fft.ifftn(V.reshape((c, *self.spatial, B)), axes=self.axes)
        return x.reshape(c * self.p, B)

    def apply_inverse_hat(self, R):
        """``(I + D^H D)^{-1} R`` bin by bin; ``R`` is (n, p, B)."""
        if self.woodbury:
            T = np.einsum("pmn,npb->mpb", self.D, R)
            T = np.einsum("pij,jpb->ipb", self.inv_blocks, T)
            return R - np.einsum("pmn,mpb->npb", self.D.conj(), T)
        return np.einsum("pij,jpb->ipb", self.inv_blocks, R)


def build_fourier_cache(layer: CircularConv) -> FourierConvCache:
    if not isinstance(layer, CircularConv):
        raise TypeError("build_fourier_cache expects a CircularConv layer")
    if any(k > s for k, s in zip(layer.kernels.shape[2:], layer.spatial)):
        raise GeometryError("kernel larger than the spatial extent")
    return FourierConvCache(layer)


def project_circ_graph(a, c, cache: FourierConvCache, return_residue: bool = False):
    """Project ``(a, c)`` onto the graph of the circular convolution.

    Solves ``(I + W^T W) y = a + W^T c`` in the Fourier domain and returns
    ``(y, W y)``. With ``return_residue`` the largest imaginary part
    discarded by the inverse transforms is returned as a third value.
    """
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    n, m, p = cache.n, cache.m, cache.p
    if a.shape[0] != n * p or c.shape[0] != m * p or a.shape[1:] != c.shape[1:]:
        raise ShapeError(
            f"circular projection expects ({n * p}, {m * p}) rows, got ({a.shape}, {c.shape})"
        )
    squeeze = a.ndim == 1
    A = cache._fft(a, n)
    C = cache._fft(c, m)
    R = A + np.einsum("pmn,mpb->npb", cache.D.conj(), C)
    Y = cache.apply_inverse_hat(R)
    Z = np.einsum("pmn,npb->mpb", cache.D, Y)
    y = cache._ifft(Y, n)
    z = cache._ifft(Z, m)
    residue = max(np.abs(y.imag).max(), np.abs(z.imag).max())
    y, z = y.real, z.real
    if squeeze:
        y, z = y[:, 0], z[:, 0]
    if return_residue:
        return y, z, residue
    return y, z
