"""Counter-based random streams with a pinned uniform-consumption contract.

Every sampler documents how many uniforms one draw consumes so that seeded
runs are reproducible:

* ``normal``       -- 2 uniforms per element (Box-Muller, cosine branch only)
* ``exponential``  -- 1 uniform per element (inverse CDF)
* ``laplace``      -- 1 uniform per element (inverse CDF)
* ``categorical``  -- 1 uniform per draw
* ``gamma``        -- variable (Marsaglia-Tsang rejection); draws advance the
                      stream by a data-dependent amount, forward only.

Streams are backed by numpy's Philox counter generator; ``split`` derives an
independent child stream from ``(seed, path)`` so replicate r of a study can
use ``root.split(r)`` without coordinating consumption.
"""

from __future__ import annotations

import numpy as np


def _splitmix64(v: int) -> int:
    v = (v + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = v
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


class RngStream:
    """One independently seeded stream, confined to a single thread."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self.uniforms_consumed = 0

    def split(self, index: int) -> "RngStream":
        """Independent child stream for replicate/task ``index``."""
        child = _splitmix64(self.stream ^ _splitmix64(int(index) + 1))
        return RngStream(self.seed, child)

    # -- primitives ---------------------------------------------------------

    def uniform(self, shape=()) -> np.ndarray:
        """Uniforms in [0, 1); consumes exactly prod(shape) uniforms."""
        u = self._gen.random(shape)
        self.uniforms_consumed += int(np.prod(shape)) if shape else 1
        return u

    def _open_uniform(self, shape=()):
        # (0, 1]: avoids log(0) in inverse-CDF transforms.
        return 1.0 - self.uniform(shape)

    # -- samplers -----------------------------------------------------------

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals via Box-Muller; 2 uniforms per element."""
        u1 = self._open_uniform(shape)
        u2 = self.uniform(shape)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def exponential(self, rate=1.0, shape=()) -> np.ndarray:
        """Exponential(rate) via -log(u)/rate; 1 uniform per element."""
        return -np.log(self._open_uniform(shape)) / rate

    def laplace(self, loc=0.0, scale=1.0, shape=()) -> np.ndarray:
        """Laplace via inverse CDF of one uniform per element."""
        u = self.uniform(shape)
        u = np.where(u == 0.0, 0.5 * np.finfo(np.float64).eps, u)
        t = u - 0.5
        return loc - scale * np.sign(t) * np.log1p(-2.0 * np.abs(t))

    def categorical(self, probs: np.ndarray) -> int:
        """Index draw from a probability vector; 1 uniform."""
        edges = np.cumsum(np.asarray(probs, dtype=np.float64))
        u = self.uniform() * edges[-1]
        return int(np.searchsorted(edges, u, side="right").clip(0, len(edges) - 1))

    def gamma(self, concentration, rate=1.0, shape=None) -> np.ndarray:
        """Gamma(concentration, rate) via Marsaglia-Tsang squeeze.

        Stream consumption is variable (rejection); forward-only.
        """
        conc = np.asarray(concentration, dtype=np.float64)
        if shape is None:
            shape = conc.shape
        conc = np.broadcast_to(conc, shape)
        if np.any(conc <= 0.0):
            raise ValueError("gamma requires positive concentration")
        boost = np.ones(shape)
        a = np.array(conc, copy=True)
        small = a < 1.0
        if np.any(small):
            # Gamma(a) = Gamma(a+1) * U^(1/a) for a < 1.
            u = self._open_uniform(shape)
            boost = np.where(small, u ** (1.0 / np.where(small, a, 1.0)), 1.0)
            a = np.where(small, a + 1.0, a)
        d = a - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        out = np.zeros(shape)
        pending = np.ones(shape, dtype=bool)
        for _ in range(200):
            if not np.any(pending):
                break
            x = self.normal(shape)
            v = (1.0 + c * x) ** 3
            u = self._open_uniform(shape)
            ok = (v > 0.0) & (np.log(u) < 0.5 * x * x + d - d * v + d * np.log(np.maximum(v, 1e-300)))
            take = pending & ok
            out = np.where(take, d * v, out)
            pending = pending & ~take
        else:
            raise RuntimeError("gamma sampler failed to accept after 200 rounds")
        return out * boost / rate
