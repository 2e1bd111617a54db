"""Independent reference implementations used only by the tests.

They are written for clarity, with explicit loops and no shared code with
the package kernels (the noise schedule is the only package import).
"""

import math

import numpy as np

from dive.diffusion import NoiseSchedule


def brute_force_retrieval(qf, ql, qm, qc, gf, gl, gm, gc, normalize=True):
    """Return (first_hit_ranks, aps, skipped) by exhaustive enumeration.

    ``first_hit_ranks[i]`` is the 0-based rank of the first correct match of
    evaluated query ``i``.  Ties in distance are broken by gallery index.
    """
    def norm(v):
        n = math.sqrt(sum(x * x for x in v))
        return [x / n for x in v] if normalize and n > 0 else list(v)

    G = [norm(row) for row in gf]
    ranks, aps, skipped = [], [], 0
    for i, row in enumerate(qf):
        q = norm(row)
        cand = []
        for j, g in enumerate(G):
            if gl[j] == ql[i] and gm[j] == qm[i] and gc[j] == qc[i]:
                continue
            d = sum((a - b) ** 2 for a, b in zip(q, g))
            cand.append((d, j))
        cand.sort()
        rel = [gl[j] == ql[i] for _, j in cand]
        if not any(rel):
            skipped += 1
            continue
        ranks.append(rel.index(True))
        hits, precisions = 0, []
        for k, r in enumerate(rel, start=1):
            if r:
                hits += 1
                precisions.append(hits / k)
        aps.append(sum(precisions) / len(precisions))
    return ranks, aps, skipped


def cmc_from_ranks(ranks, length):
    return np.array([sum(1 for r in ranks if r < k) / len(ranks) for k in range(1, length + 1)])


def gaussian_flow_map(z, mu, s, sched_alpha_T, sched_sigma_T):
    """Exact probability-flow map from noise at ``T`` to data for N(mu, s^2) data."""
    a, sig = sched_alpha_T, sched_sigma_T
    return mu + s * (z - a * mu) / math.sqrt(a * a * s * s + sig * sig)


def random_fixture(rng, nq, ng, d=6, n_ids=5, ties=False):
    if ties:
        qf = rng.integers(-1, 2, size=(nq, d)).astype(float)
        gf = rng.integers(-1, 2, size=(ng, d)).astype(float)
    else:
        qf, gf = rng.normal(size=(nq, d)), rng.normal(size=(ng, d))
    ql, gl = rng.integers(n_ids, size=nq), rng.integers(n_ids, size=ng)
    qm = rng.choice(["visible", "infrared"], size=nq)
    gm = rng.choice(["visible", "infrared"], size=ng)
    qc, gc = rng.integers(2, size=nq), rng.integers(2, size=ng)
    return (qf, ql, qm, qc), (gf, gl, gm, gc)


def gaussian_eps(mu, s, sched=NoiseSchedule()):
    """Optimal noise predictor for N(mu, s^2) data."""
    def eps_fn(x, t):
        a, sig = sched.alpha(t), sched.sigma(t)
        x0 = mu + (a * s * s / (a * a * s * s + sig * sig)) * (x - a * mu)
        return (x - a * x0) / sig
    return eps_fn
