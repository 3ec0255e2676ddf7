"""Deterministic per-replica randomness streams.

Stream (seed, replica) is an independent generator keyed by the pair, so
adding replicas or running other seeds in the same batch never perturbs an
existing stream.  Draws are served as vectorized ``(B, R)`` blocks pulled
from per-stream buffers; every cycle consumes a fixed number of draws per
replica (unused draws are discarded), which keeps the streams aligned with
the trajectory regardless of holds or execution layout.

Kernel-based state moves draw from a separate child stream per replica so
that buffered block serving never interleaves with direct generator calls.
"""

from __future__ import annotations

import numpy as np

__all__ = ["ReplicaStreams"]

# Fixed buffer chunk: must not depend on batch or replica count, otherwise
# the uniform/normal interleaving within one stream would change with the
# execution layout.
_CHUNK = 1024


class ReplicaStreams:
    def __init__(self, seeds, replicas: int):
        self.seeds = [int(s) for s in np.atleast_1d(seeds)]
        self.R = int(replicas)
        self.B = len(self.seeds)
        self._gens = [
            [np.random.default_rng(np.random.SeedSequence((seed, r))) for r in range(self.R)]
            for seed in self.seeds
        ]
        self._kernel_gens = None
        self._buffers = {}  # kind -> [array (B, R, n), cursor]

    def _refill(self, kind: str, n: int):
        buf = np.empty((self.B, self.R, n))
        for b in range(self.B):
            for r in range(self.R):
                gen = self._gens[b][r]
                buf[b, r] = gen.random(n) if kind == "uniform" else gen.standard_normal(n)
        self._buffers[kind] = [buf, 0]

    def _take(self, kind: str, n: int) -> np.ndarray:
        """Next n draws per stream, in generator order regardless of call sizes."""
        if kind not in self._buffers:
            self._refill(kind, max(n, _CHUNK))
        buf, cursor = self._buffers[kind]
        if cursor + n <= buf.shape[2]:
            out = buf[:, :, cursor : cursor + n]
            self._buffers[kind][1] = cursor + n
            return out
        have = buf.shape[2] - cursor
        out = np.empty((self.B, self.R, n))
        out[:, :, :have] = buf[:, :, cursor:]
        self._refill(kind, max(n - have, _CHUNK))
        buf, _ = self._buffers[kind]
        out[:, :, have:] = buf[:, :, : n - have]
        self._buffers[kind][1] = n - have
        return out

    def uniform(self, n: int = 1) -> np.ndarray:
        """n uniforms in [0, 1) per replica; shape (B, R, n)."""
        return self._take("uniform", n)

    def normal(self, n: int = 1) -> np.ndarray:
        """n standard normals per replica; shape (B, R, n)."""
        return self._take("normal", n)

    def gumbel(self, n: int) -> np.ndarray:
        """n standard Gumbel draws per replica; shape (B, R, n)."""
        u = self._take("uniform", n)
        with np.errstate(divide="ignore"):
            return -np.log(-np.log(u))

    def kernel_generator(self, b: int, r: int) -> np.random.Generator:
        """Dedicated stream for kernel state moves of replica (b, r)."""
        if self._kernel_gens is None:
            self._kernel_gens = [
                [np.random.default_rng(np.random.SeedSequence((seed, r, 1))) for r in range(self.R)]
                for seed in self.seeds
            ]
        return self._kernel_gens[b][r]
