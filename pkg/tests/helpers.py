"""Shared test helpers: independent oracles and instance generators."""

from __future__ import annotations

import itertools

import numpy as np

from textloop.association import (
    Association,
    ConsistencyGraph,
    Ltem,
    LtemEntity,
    build_consistency_graph,
    putative_associations,
)


def brute_force_densest_subset(graph: ConsistencyGraph) -> list[int]:
    """Reference solver: try every exclusion-feasible subset.

    Keeps the spirit of an oracle by using a completely separate code path:
    itertools over explicit index tuples, density via the normalized indicator
    vector, same deterministic tie-break (density, then size, then lexicographic).
    """
    n = len(graph)
    best: list[int] = []
    best_density = 0.0
    for size in range(1, n + 1):
        for subset in itertools.combinations(range(n), size):
            if any(graph.exclusion[i, j] for i, j in itertools.combinations(subset, 2)):
                continue
            u = np.zeros(n)
            u[list(subset)] = 1.0 / np.sqrt(size)
            density = float(u @ graph.affinity @ u)
            if density > best_density + 1e-12:
                best, best_density = list(subset), density
            elif abs(density - best_density) <= 1e-12 and best:
                if size > len(best) or (size == len(best) and list(subset) < sorted(best)):
                    best, best_density = list(subset), density
    return sorted(best)


def _random_ltem(rng: np.random.Generator, center: int, contents: list[str]) -> Ltem:
    entities = []
    for content in contents:
        entities.append(
            LtemEntity(
                content=content,
                position=rng.uniform(-8.0, 8.0, size=3),
                members=((center, (0.0, 0.0, 0.0)),),
            )
        )
    return Ltem(center_frame=center, window=(center, center), entities=tuple(entities))


def random_consistency_instance(
    rng: np.random.Generator, max_associations: int = 12
) -> ConsistencyGraph:
    """A consistency graph built from two random entity windows.

    Contents repeat so the putative set includes exclusion structure; entity
    positions are drawn independently per side so affinities span [0, 1].
    """
    vocabulary = ["EXIT", "STOP", "FIRE", "A1-R01", "A1-R02", "B2-R03"]
    while True:
        k_c = int(rng.integers(2, 5))
        k_p = int(rng.integers(2, 5))
        contents_c = [vocabulary[int(rng.integers(0, len(vocabulary)))] for _ in range(k_c)]
        contents_p = [vocabulary[int(rng.integers(0, len(vocabulary)))] for _ in range(k_p)]
        map_c = _random_ltem(rng, 0, contents_c)
        map_p = _random_ltem(rng, 100, contents_p)
        associations = putative_associations(map_c, map_p)
        if 1 <= len(associations) <= max_associations:
            epsilon = float(rng.uniform(0.5, 4.0))
            return build_consistency_graph(associations, map_c, map_p, epsilon)


def straight_line_poses(n: int, spacing: float = 1.0):
    from textloop.geometry import Pose

    return [Pose(np.eye(3), [i * spacing, 0.0, 0.0]) for i in range(n)]
