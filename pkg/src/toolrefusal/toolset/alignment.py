"""Structural alignment: does a bijection between query attributes and tool
parameters exist that respects the declared assignability relation?"""

from __future__ import annotations

from collections.abc import Sequence

from .types import CompatRelation, Sample, ToolsetError


def maximum_matching(n_left: int, n_right: int, edges) -> dict[int, int]:
    """Maximum bipartite matching by repeated augmenting-path search (Kuhn).

    Returns a mapping left index -> right index.
    """
    adj: list[list[int]] = [[] for _ in range(n_left)]
    for u, v in sorted(set(edges)):
        adj[u].append(v)
    match_right = [-1] * n_right

    def augment(u: int, seen: list[bool]) -> bool:
        for v in adj[u]:
            if seen[v]:
                continue
            seen[v] = True
            if match_right[v] == -1 or augment(match_right[v], seen):
                match_right[v] = u
                return True
        return False

    for u in range(n_left):
        augment(u, [False] * n_right)
    return {u: v for v, u in enumerate(match_right) if u != -1}


def check_structural_alignment(
    attributes: Sequence, parameters: Sequence, compat: CompatRelation
) -> int:
    """Return 1 iff every attribute can be assigned to a distinct parameter and
    vice versa under ``compat``; 0 otherwise.

    Zero attributes against zero parameters counts as aligned (the empty
    bijection exists).
    """
    m, n = len(attributes), len(parameters)
    for i, j in compat.pairs:
        if not (0 <= i < m and 0 <= j < n):
            raise ToolsetError(f"compat pair {(i, j)} out of range for {m} attributes x {n} params")
    if m != n:
        return 0
    if m == 0:
        return 1
    return int(len(maximum_matching(m, n, compat.pairs)) == m)


def sample_alignment(sample: Sample) -> int:
    attrs = sample.live_attributes()
    return check_structural_alignment(attrs, sample.tool.parameters, sample.compat())


def is_degenerate(sample: Sample) -> bool:
    """Aligned only vacuously (nothing to assign on either side)."""
    return not sample.live_attributes() and not sample.tool.parameters
