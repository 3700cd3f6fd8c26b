"""Deterministic random stream derivation.

Every stochastic quantity in the simulator is drawn from a stream keyed by
(master_seed, purpose, entity indices). Streams are independent of each other
and of execution order, so any single value can be recomputed in isolation and
article-level work can run in parallel without changing results.
"""

from __future__ import annotations

import numpy as np

# Purpose tags. Values are part of the reproducibility contract: changing them
# changes every simulated panel.
CATEGORY = 1        # category-level draws (alpha per cat_d, beta per cat_k, shifts)
ARTICLE_STATIC = 2  # per-article static draws (cats, gamma, sigma_tau, e_b, p0, promo)
EPS = 3             # weekly noise on the a-component
PSI = 4             # weekly noise on the b-component
TAU = 5             # weekly trend noise
POLICY = 6          # weekly pricing-policy uniforms
HOLDOUT = 7         # week resampling in holdout replacement


def stream(master_seed: int, *key: int) -> np.random.Generator:
    """Return the generator for one (purpose, entity...) stream."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(key))
    return np.random.Generator(np.random.PCG64(ss))


def article_stream(master_seed: int, purpose: int, article_id: int, attempt: int = 0) -> np.random.Generator:
    """Stream for one article; `attempt` advances when an article is resampled."""
    return stream(master_seed, purpose, article_id, attempt)
