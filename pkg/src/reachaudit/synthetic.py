"""Seeded synthetic rating tables with a planted item-popularity gradient."""

from __future__ import annotations

import numpy as np

from .core import RatingsDataset

__all__ = ["planted_popularity"]


def planted_popularity(
    n_users: int = 50,
    n_items: int = 60,
    min_per_user: int = 8,
    max_per_user: int = 20,
    noise: float = 0.5,
    seed: int = 0,
) -> tuple[RatingsDataset, np.ndarray]:
    """Explicit 1-5 ratings where item quality drives both rating level and rating frequency.

    Each item gets a latent quality on ``[-1, 1]`` (randomly assigned to ids).
    Users rate a random number of items, drawn with probability increasing in
    quality, and rate them ``round(3 + 1.5 quality + user offset + noise)``.

    Returns
    -------
    data : RatingsDataset
    quality : ndarray
        Planted per-item quality, the ground-truth popularity order.
    """
    rng = np.random.default_rng(seed)
    quality = rng.permutation(np.linspace(-1.0, 1.0, n_items))
    weight = np.exp(1.5 * quality)
    weight /= weight.sum()
    offsets = rng.normal(0.0, 0.3, n_users)
    users, items, values = [], [], []
    for u in range(n_users):
        k = int(rng.integers(min_per_user, max_per_user + 1))
        chosen = np.sort(rng.choice(n_items, size=min(k, n_items), replace=False, p=weight))
        raw = 3.0 + 1.5 * quality[chosen] + offsets[u] + rng.normal(0.0, noise, len(chosen))
        users.extend([u] * len(chosen))
        items.extend(chosen.tolist())
        values.extend(np.clip(np.rint(raw), 1.0, 5.0).tolist())
    data = RatingsDataset(
        n_users,
        n_items,
        np.array(users),
        np.array(items),
        np.array(values, dtype=float),
        (1.0, 5.0),
        user_keys=tuple(f"u{u}" for u in range(n_users)),
        item_keys=tuple(f"i{i}" for i in range(n_items)),
    )
    return data, quality
