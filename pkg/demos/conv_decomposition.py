"""A strided, padded convolution as pad, circular convolution and gather.

The script checks the three-layer rewrite against a direct convolution,
then shows that the Fourier-domain graph projection agrees with a dense
solve while storing only small per-frequency blocks.
"""

import numpy as np

from splitverify import ConvSpec, Network, decompose_conv
from splitverify.convfft import build_fourier_cache, project_circ_graph


def direct_conv(x, w, stride, pad, bias):
    xp = np.pad(x, [(0, 0), (pad, pad), (pad, pad)])
    m, _, k, _ = w.shape
    oh = (xp.shape[1] - k) // stride + 1
    ow = (xp.shape[2] - k) // stride + 1
    out = np.empty((m, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, i, j] = np.tensordot(w, patch, axes=3) + bias
    return out


def main():
    rng = np.random.default_rng(1)
    w, b = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    spec = ConvSpec(w, (2, 8, 8), stride=(2, 2), padding=(1, 1), bias=b)
    layers = decompose_conv(spec)
    for layer in layers:
        print(f"{type(layer).__name__:>13}: {layer.shape_in} -> {layer.shape_out}")
    x = rng.standard_normal((2, 8, 8))
    err = np.abs(Network(layers)(x) - direct_conv(x, w, 2, 1, b)).max()
    print(f"max deviation from direct convolution: {err:.1e}")

    circ = layers[1]
    cache = build_fourier_cache(circ)
    a, c = rng.standard_normal(circ.n_in), rng.standard_normal(circ.n_out)
    y, z = project_circ_graph(a, c, cache)
    W = circ.dense()
    y_ref = np.linalg.solve(np.eye(circ.n_in) + W.T @ W, a + W.T @ c)
    print(f"projection deviation from dense solve: {np.abs(y - y_ref).max():.1e}")
    print(f"dense system: {circ.n_in}x{circ.n_in}; Fourier cache: {cache.p} blocks of "
          f"{cache.block_size}x{cache.block_size} (woodbury={cache.woodbury})")
    print("operation budget:", {k: f"{v:.3g}" for k, v in cache.cost().items()})


if __name__ == "__main__":
    main()
