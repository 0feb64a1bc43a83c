"""Split a manifest into byte-balanced groups (longest processing time first)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .manifest import ManifestEntry


@dataclass(frozen=True)
class Grouping:
    groups: list[list[int]]
    loads: list[int]

    @property
    def makespan(self) -> int:
        return max(self.loads) if self.loads else 0


def lpt_bound(G: int) -> float:
    """Worst-case ratio of greedy LPT makespan to the optimum."""
    return 4.0 / 3.0 - 1.0 / (3.0 * G)


def fill_sizes(entries: list[ManifestEntry]) -> list[int]:
    """Entry sizes with gaps filled by the median of the same host (else all hosts, else 1)."""
    known: dict[str, list[int]] = {}
    for e in entries:
        if e.expected_bytes is not None:
            known.setdefault(e.host, []).append(e.expected_bytes)
    everything = [s for v in known.values() for s in v]
    fallback = int(np.median(everything)) if everything else 1
    out = []
    for e in entries:
        if e.expected_bytes is not None:
            out.append(e.expected_bytes)
        elif e.host in known:
            out.append(int(np.median(known[e.host])))
        else:
            out.append(fallback)
    return out


def lpt_groups(sizes, G: int) -> Grouping:
    """Sort descending, give each item to the lightest group; ties go to the lowest group."""
    if G < 1:
        raise ValueError("group count must be >= 1")
    sizes = [int(s) for s in sizes]
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i], i))
    loads = [0] * G
    groups: list[list[int]] = [[] for _ in range(G)]
    for i in order:
        g = min(range(G), key=lambda j: (loads[j], j))
        groups[g].append(i)
        loads[g] += sizes[i]
    return Grouping([sorted(g) for g in groups], loads)


def optimize_groups(entries: list[ManifestEntry], G: int) -> Grouping:
    return lpt_groups(fill_sizes(entries), G)


def to_ranges(indices) -> list[list[int]]:
    """Compress sorted indices into half-open ``[start, stop)`` ranges."""
    out: list[list[int]] = []
    for i in sorted(indices):
        if out and out[-1][1] == i:
            out[-1][1] = i + 1
        else:
            out.append([i, i + 1])
    return out


def from_ranges(ranges) -> list[int]:
    return [i for a, b in ranges for i in range(a, b)]


def write_group_file(path, manifest_path, grouping: Grouping) -> None:
    doc = {"manifest": str(manifest_path), "groups": [{"ranges": to_ranges(g), "bytes": load}
                                                    for g, load in zip(grouping.groups, grouping.loads)]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def read_group_file(path) -> tuple[str, list[list[int]]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return doc["manifest"], [from_ranges(g["ranges"]) for g in doc["groups"]]
