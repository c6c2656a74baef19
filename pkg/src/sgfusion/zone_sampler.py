"""Per-zone probabilistic dendrograms and bottom-up zone sampling.

For zone ``z`` every internal ancestor ``r`` gets ``p_r = softmax(-d_r)``
over the ancestors of ``z``. When sampling, each zone in the subtree of
``r`` that does not contain ``z`` is included independently with
probability ``p_r``. A zone ``z'`` is therefore considered exactly once, at
the lowest common ancestor of ``z`` and ``z'``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from sgfusion.dendrogram import Dendrogram, parse_annotated
from sgfusion.errors import DomainError, SchemaError
from sgfusion.rng import derive_rng


@dataclass(frozen=True)
class AncestorRecord:
    node: int
    d: float
    p: float
    sibling_zones: tuple[str, ...]


@dataclass(frozen=True)
class ProbDendrogram:
    owner: str
    ancestors: tuple[AncestorRecord, ...]  # bottom-up: leaf parent first, root last

    def probabilities(self) -> dict[str, float]:
        """``p_{owner,z'}`` for every other zone."""
        return {z: a.p for a in self.ancestors for z in a.sibling_zones}

    def validate(self, all_zones: Sequence[str] | None = None, tol: float = 1e-12) -> None:
        total = math.fsum(a.p for a in self.ancestors)
        if abs(total - 1.0) > tol:
            raise SchemaError(f"ancestor probabilities of {self.owner!r} sum to {total!r}")
        if any(not 0.0 <= a.p <= 1.0 for a in self.ancestors):
            raise SchemaError(f"probability outside [0, 1] for {self.owner!r}")
        seen = [z for a in self.ancestors for z in a.sibling_zones]
        if len(seen) != len(set(seen)) or self.owner in seen:
            raise SchemaError(f"sibling zone sets of {self.owner!r} overlap")
        if all_zones is not None and set(seen) != set(all_zones) - {self.owner}:
            raise SchemaError(f"sibling zone sets of {self.owner!r} do not cover the other zones")


@dataclass(frozen=True)
class SampledNeighborhood:
    owner: str
    round: int
    zones: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.zones)


def _softmax_neg(d: Sequence[float]) -> list[float]:
    m = min(d)
    w = [math.exp(-(x - m)) for x in d]
    s = math.fsum(w)
    return [x / s for x in w]


def build_prob_dendrogram(t: Dendrogram, z: str) -> ProbDendrogram:
    leaf = t.leaf_index(z)
    anc = t.ancestors(leaf)
    d = [t.scores[r] for r in anc]
    p = _softmax_neg(d)
    records = []
    child = leaf
    for r, dr, pr in zip(anc, d, p):
        other = t.right[r] if t.left[r] == child else t.left[r]
        records.append(AncestorRecord(r, dr, pr, tuple(sorted(t.zones_under(other)))))
        child = r
    return ProbDendrogram(z, tuple(records))


def build_all(t: Dendrogram) -> dict[str, ProbDendrogram]:
    return {z: build_prob_dendrogram(t, z) for z in t.zone_ids}


def sample_neighborhood(pd: ProbDendrogram, rng: np.random.Generator, round: int = 0) -> SampledNeighborhood:
    chosen: list[str] = []
    # sibling zones are stored sorted by id, so draws do not depend on node numbering
    for a in pd.ancestors:
        if not a.sibling_zones:
            continue
        u = rng.random(len(a.sibling_zones))
        chosen.extend(z for z, ui in zip(a.sibling_zones, u) if ui < a.p)
    return SampledNeighborhood(pd.owner, int(round), tuple(chosen))


def round_rng(master_seed: int, stream: str, zone_id: str, round: int) -> np.random.Generator:
    """Generator for one (zone, round) draw; independent across zones and rounds."""
    return derive_rng(master_seed, stream, zone_id, round)


def expected_neighborhood_size(pd: ProbDendrogram) -> float:
    return math.fsum(a.p * len(a.sibling_zones) for a in pd.ancestors)


def neighborhood_size_variance(pd: ProbDendrogram) -> float:
    return math.fsum(a.p * (1.0 - a.p) * len(a.sibling_zones) for a in pd.ancestors)


def pair_probabilities(pds: Mapping[str, ProbDendrogram], zone_ids: Sequence[str]) -> np.ndarray:
    """Matrix ``P[i, j] = p_{z_i, z_j}`` (zero diagonal)."""
    idx = {z: i for i, z in enumerate(zone_ids)}
    P = np.zeros((len(zone_ids), len(zone_ids)))
    for z, pd in pds.items():
        for other, p in pd.probabilities().items():
            P[idx[z], idx[other]] = p
    return P


# --- text format ----------------------------------------------------------------


def prob_dendrograms_to_text(t: Dendrogram, pds: Mapping[str, ProbDendrogram]) -> str:
    """One line per zone: ``zone_id<TAB>tree``; ancestors carry ``:d|p``."""
    lines = []
    for z in t.zone_ids:
        p_of = {a.node: a.p for a in pds[z].ancestors}

        def annot(r, p_of=p_of):
            s = repr(t.scores[r])
            return f"{s}|{p_of[r]!r}" if r in p_of else s

        lines.append(f"{z}\t{t.to_text(annot)}")
    return "\n".join(lines) + "\n"


def prob_dendrograms_from_text(text: str) -> dict[str, ProbDendrogram]:
    out: dict[str, ProbDendrogram] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            owner, tree = line.split("\t", 1)
        except ValueError:
            raise SchemaError(f"line {lineno}: expected 'zone_id<TAB>tree'") from None
        leaves, left, right, parent, annots = parse_annotated(tree)
        n = len(leaves)
        if owner not in leaves:
            raise DomainError(f"line {lineno}: zone {owner!r} is not a leaf")
        under: dict[int, list[str]] = {i: [z] for i, z in enumerate(leaves)}

        def collect(v):
            if v not in under:
                under[v] = sorted(collect(left[v]) + collect(right[v]))
            return under[v]

        records = []
        child = leaves.index(owner)
        v = parent[child]
        while v != -1:
            fields = annots[v].split("|")
            if len(fields) != 2:
                raise SchemaError(f"line {lineno}: ancestor node lacks a probability")
            other = right[v] if left[v] == child else left[v]
            records.append(AncestorRecord(v, float(fields[0]), float(fields[1]), tuple(collect(other))))
            child, v = v, parent[v]
        for r, a in annots.items():
            if "|" in a and r not in {rec.node for rec in records}:
                raise SchemaError(f"line {lineno}: non-ancestor node {r} carries a probability")
        if n < 2:
            raise SchemaError(f"line {lineno}: tree has fewer than two zones")
        if owner in out:
            raise SchemaError(f"line {lineno}: duplicate zone {owner!r}")
        out[owner] = ProbDendrogram(owner, tuple(records))
    return out
