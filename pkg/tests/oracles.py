"""Independent reference checks shared by the unit and acceptance tests."""

from __future__ import annotations

import itertools

import numpy as np

from certsmooth.certify import certify, oracle_search
from certsmooth.classifiers import TinyConv
from certsmooth.smoothing import ChunkTally


def tinyconv_grad_errors(n_probes: int = 50, seed: int = 0, length: int = 96, eps: float = 1e-6) -> list[float]:
    """Relative error between the analytic gradient and a central difference,
    one random (params, chunk, coordinate) per probe."""
    rng = np.random.default_rng(seed)
    errors = []
    while len(errors) < n_probes:
        params = TinyConv.init_params(rng)
        params["out_b"] = rng.normal(0, 0.5, 1)
        params["conv_b"] = rng.normal(0, 0.1, TinyConv.channels)
        tokens = rng.integers(0, 257, size=length)
        y = float(rng.integers(0, 2))
        _, _, grads = TinyConv.loss_and_grad(params, tokens, y)
        name = ("embed", "conv_w", "conv_b", "out_w", "out_b")[len(errors) % 5]
        g = grads[name]
        nz = np.flatnonzero(np.abs(g) > 1e-9)
        if nz.size == 0:
            continue
        idx = np.unravel_index(int(rng.choice(nz)), g.shape)

        def loss(delta):
            p = {k: v.copy() for k, v in params.items()}
            p[name][idx] += delta
            return TinyConv.loss_and_grad(p, tokens, y)[0]

        numeric = (loss(eps) - loss(-eps)) / (2 * eps)
        analytic = float(g[idx])
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    return errors


def payload_grid(n: int, z: int) -> list[int]:
    """Payload sizes at chunk fractions 1/8 .. N, plus the boundary cases."""
    return sorted({max(1, n * z * k // 8) for k in range(1, 9)} | {1, z // 2, z, z + 1, 2 * z})


def soundness_sweep(max_n: int = 12, z: int = 16, tails=(None, 5)) -> tuple[int, list]:
    """Every certified (tally, kind, p) must survive the brute-force adversary.
    Returns (number of certified cases checked, violations)."""
    checked, violations = 0, []
    for n in range(1, max_n + 1):
        for bits in itertools.product((0, 1), repeat=n):
            for tail in tails:
                tally = ChunkTally.from_labels(bits, z, tail_bytes=tail)
                for kind in ("patch", "insertion"):
                    for p in payload_grid(n, z):
                        if not certify(tally, kind, [p], z).certified:
                            continue
                        checked += 1
                        if oracle_search(tally, kind, [p], z).flipped:
                            violations.append((bits, tail, kind, p))
    return checked, violations


def tightness_witnesses(z: int = 16) -> dict[str, bool]:
    """A tally whose margin is one short of the requirement that the oracle flips."""
    p = z  # delta = 2
    # patch: margin 2*delta - 1 = 3 (4 malicious, 1 benign)
    patch = ChunkTally.from_labels([1, 1, 1, 1, 0], z)
    # insertion: margin delta - 1 = 1 (3 malicious, 2 benign), malicious open tail
    insertion = ChunkTally.from_labels([0, 0, 1, 1, 1], z, tail_bytes=5)
    out = {}
    for name, tally, kind, need in (("patch", patch, "patch", 4), ("insertion", insertion, "insertion", 2)):
        cert = certify(tally, kind, [p], z)
        assert cert.delta == 2 and cert.margin_actual == need - 1, cert
        out[name] = (not cert.certified) and oracle_search(tally, kind, [p], z).flipped
    return out
