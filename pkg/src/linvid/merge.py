"""Sorted visual token merging.

Each merge layer splits a frame's patch tokens into alternating sets A and B,
lets every A token pick its most similar B token, merges the ``r`` A tokens
with the strongest such edges into their partners (size-weighted mean), and
re-sorts the surviving tokens by how many original patches they cover. The
CLS token never takes part.

Two entry points share the selection rules: the list-of-:class:`MergedToken`
operations (``partition_alternating`` ... ``stome_layer``) used for
inspection and golden tests, and :func:`plan_layer`, a batched array version
that returns a mixing matrix so the caller can apply the merge to tensors of
any library (the vision encoder applies it to torch tensors).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ORDERS = ("ascending", "descending", "random")
_ORDER_ALIASES = {"asc": "ascending", "desc": "descending", "rand": "random"}


class ScheduleError(ValueError):
    """A merge count cannot be realised for the token count at hand."""


def normalize_order(order):
    order = _ORDER_ALIASES.get(order, order)
    if order not in ORDERS:
        raise ValueError(f"unknown sort order {order!r}; expected one of {ORDERS}")
    return order


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass
class MergedToken:
    embedding: np.ndarray
    size: int = 1
    origin: int = 0

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding)
        if self.size < 1:
            raise ValueError(f"token size must be >= 1, got {self.size}")

    def key(self):
        return (tuple(self.embedding.tolist()), self.size, self.origin)


@dataclass
class FrameTokenSet:
    cls: MergedToken
    patches: list
    n_original: int

    def __len__(self):
        return len(self.patches) + 1

    @classmethod
    def from_embeddings(cls, embeddings):
        """CLS at row 0, patches after it, all of size 1 with raster origins."""
        embeddings = np.asarray(embeddings)
        patches = [MergedToken(e, 1, i) for i, e in enumerate(embeddings[1:])]
        return cls(MergedToken(embeddings[0], 1, 0), patches, len(patches))

    def embeddings(self):
        return np.stack([self.cls.embedding] + [t.embedding for t in self.patches])

    def sizes(self):
        return np.array([t.size for t in self.patches], dtype=np.int64)

    def origins(self):
        return np.array([t.origin for t in self.patches], dtype=np.int64)


@dataclass
class MergeDecision:
    """``pairs`` are ``(A index, B index)``; ``unmerged`` are list positions
    of tokens that appear in no pair."""

    pairs: list
    unmerged: list
    n_a: int = 0
    n_b: int = 0


@dataclass
class MergeSchedule:
    removals: list
    keep_ratio: float
    n_patches: int

    @property
    def n_layers(self):
        return len(self.removals)

    @property
    def kept(self):
        return self.n_patches - sum(self.removals)

    def counts(self):
        """Patch count entering each layer, plus the final count."""
        n = [self.n_patches]
        for r in self.removals:
            n.append(n[-1] - r)
        return n

    def to_dict(self):
        return {
            "n_patches": self.n_patches,
            "keep_ratio": self.keep_ratio,
            "removals": list(self.removals),
            "kept": self.kept,
        }


def round_half_up(x):
    return int(math.floor(x + 0.5))


def kept_patches(n_patches, keep_ratio):
    return round_half_up(keep_ratio * n_patches)


def _split_removals(total, n_layers):
    base, extra = divmod(total, n_layers)
    return [base + 1 if i < extra else base for i in range(n_layers)]


def _feasible(n_patches, removals):
    n = n_patches
    for r in removals:
        if r > n // 2:
            return False
        n -= r
    return True


def plan_schedule(n_patches, n_merge_layers, keep_ratio):
    """Per-layer removal counts that leave ``round(keep_ratio * n_patches)``.

    The total is split evenly, remainder to the earliest layers. Raises
    :class:`ScheduleError` (with the nearest feasible ratio) if some layer
    would have to remove more than half of its input.
    """
    if not (0 < keep_ratio <= 1):
        raise ScheduleError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    if n_merge_layers < 1:
        raise ScheduleError(f"need at least one merge layer, got {n_merge_layers}")
    if n_patches < 1:
        raise ScheduleError(f"need at least one patch, got {n_patches}")
    keep = max(kept_patches(n_patches, keep_ratio), 1)
    removals = _split_removals(n_patches - keep, n_merge_layers)
    if not _feasible(n_patches, removals):
        m = keep
        while not _feasible(n_patches, _split_removals(n_patches - m, n_merge_layers)):
            m += 1
        raise ScheduleError(
            f"keep_ratio {keep_ratio} needs removals {removals} over {n_merge_layers} layers, "
            f"more than half of some layer's {n_patches}-patch input; nearest feasible "
            f"keep_ratio is {m / n_patches:.4f} ({m} patches)"
        )
    return MergeSchedule(removals, keep_ratio, n_patches)


# -- selection rules shared by the list and batched paths -------------------


def cosine_scores(a, b):
    """Cosine similarity of the last axis; zero-norm rows score 0."""
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    a = np.divide(a, na, out=np.zeros_like(a, dtype=np.float64), where=na > 0)
    b = np.divide(b, nb, out=np.zeros_like(b, dtype=np.float64), where=nb > 0)
    return a @ np.swapaxes(b, -1, -2)


def _select_sources(scores, origins_a, r):
    """Best B partner per A token, then the ``r`` A tokens with the highest
    best-edge score (ties: lower A origin first). Works on leading batch axes."""
    best_b = np.argmax(scores, axis=-1)
    best = np.take_along_axis(scores, best_b[..., None], axis=-1)[..., 0]
    rank = np.lexsort((origins_a, -best), axis=-1)
    return rank[..., :r], best_b


def _sort_permutation(sizes, origins, order, rng):
    if order == "ascending":
        return np.lexsort((origins, sizes), axis=-1)
    if order == "descending":
        return np.lexsort((origins, -sizes), axis=-1)
    if sizes.ndim == 1:
        return rng.permutation(sizes.shape[-1])
    return np.stack([rng.permutation(sizes.shape[-1]) for _ in range(sizes.shape[0])])


# -- list operations ----------------------------------------------------------


def partition_alternating(tokens):
    """Even positions form A, odd positions form B."""
    return tokens[::2], tokens[1::2]


def _embeddings(tokens):
    if len(tokens) == 0:
        return np.zeros((0, 0))
    if isinstance(tokens[0], MergedToken):
        return np.stack([t.embedding for t in tokens]).astype(np.float64)
    return np.asarray(tokens, dtype=np.float64)


def similarity_scores(A, B):
    """``|A| x |B|`` cosine similarity matrix."""
    if len(A) == 0 or len(B) == 0:
        return np.zeros((len(A), len(B)))
    return cosine_scores(_embeddings(A), _embeddings(B))


def bipartite_soft_match(tokens, scores, r):
    """Pick the ``r`` A tokens to merge and their B targets.

    Several A tokens may land on the same B token.
    """
    A, B = partition_alternating(tokens)
    if r < 0 or r > len(B):
        raise ScheduleError(f"cannot merge r={r} tokens with |B|={len(B)}")
    if r == 0:
        return MergeDecision([], list(range(len(tokens))), len(A), len(B))
    origins_a = np.array([t.origin for t in A])
    src, best_b = _select_sources(np.asarray(scores), origins_a, r)
    pairs = [(int(i), int(best_b[i])) for i in src]
    used = {2 * i for i, _ in pairs} | {2 * j + 1 for _, j in pairs}
    unmerged = [p for p in range(len(tokens)) if p not in used]
    return MergeDecision(pairs, unmerged, len(A), len(B))


def merge_tokens(decision, tokens):
    """Collapse every pair into its B token; everything else passes through.

    Survivors keep their relative list order. Merged embeddings are the
    size-weighted mean of all members and sizes add up.
    """
    groups = {}
    for i, j in decision.pairs:
        groups.setdefault(2 * j + 1, []).append(2 * i)
    sources = {2 * i for i, _ in decision.pairs}
    out = []
    for pos, tok in enumerate(tokens):
        if pos in sources:
            continue
        members = [tok] + [tokens[s] for s in groups.get(pos, [])]
        if len(members) == 1:
            out.append(tok)
            continue
        size = sum(m.size for m in members)
        emb = sum(m.size * m.embedding.astype(np.float64) for m in members) / size
        out.append(MergedToken(emb.astype(tok.embedding.dtype), size, min(m.origin for m in members)))
    return out


def sort_by_size(tokens, order="ascending", rng=None):
    """Reorder tokens by size; ties by origin. ``random`` shuffles with ``rng``."""
    order = normalize_order(order)
    if len(tokens) == 0:
        return []
    sizes = np.array([t.size for t in tokens])
    origins = np.array([t.origin for t in tokens])
    perm = _sort_permutation(sizes, origins, order, _as_rng(rng) if order == "random" else None)
    return [tokens[i] for i in perm]


def stome_layer(frame: FrameTokenSet, r, order="ascending", rng=None, trace=None):
    """One merge step on a frame: partition, score, match, merge, sort.

    Appends a per-layer record to ``trace`` (a list) when given.
    """
    if r > len(frame.patches) // 2:
        raise ScheduleError(f"r={r} exceeds half of {len(frame.patches)} patches")
    A, B = partition_alternating(frame.patches)
    scores = similarity_scores(A, B)
    decision = bipartite_soft_match(frame.patches, scores, r)
    merged = merge_tokens(decision, frame.patches)
    merged = sort_by_size(merged, order, rng)
    if trace is not None:
        trace.append(
            {
                "r": int(r),
                "pairs": [[i, j] for i, j in decision.pairs],
                "pair_origins": [[A[i].origin, B[j].origin] for i, j in decision.pairs],
                "sizes": [t.size for t in merged],
                "origins": [t.origin for t in merged],
            }
        )
    return FrameTokenSet(frame.cls, merged, frame.n_original)


# -- batched plan ------------------------------------------------------------


@dataclass
class LayerPlan:
    """Batched merge for ``F`` frames of ``n`` patch tokens each.

    ``weights[f] @ x[f]`` gives the merged, sorted patch embeddings of frame
    ``f``; rows are size-weighted averaging coefficients.
    """

    weights: np.ndarray  # (F, n_out, n)
    sizes: np.ndarray  # (F, n_out)
    origins: np.ndarray  # (F, n_out)
    pairs: list = field(default_factory=list)  # per frame list of (A, B) index pairs


def plan_layer(metric, sizes, origins, r, order="ascending", rng=None, keep_pairs=False):
    """Batched :func:`stome_layer` decision.

    ``metric`` is ``(F, n, d)`` (patch tokens only), ``sizes``/``origins``
    are ``(F, n)`` integer arrays.
    """
    order = normalize_order(order)
    metric = np.asarray(metric, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.int64)
    origins = np.asarray(origins, dtype=np.int64)
    F, n, _ = metric.shape
    if r < 0 or r > n // 2:
        raise ScheduleError(f"r={r} exceeds half of {n} patches")
    frames = np.arange(F)[:, None]
    keep = np.ones((F, n), dtype=bool)
    dest_pos = np.tile(np.arange(n), (F, 1))
    pairs = []
    if r > 0:
        scores = cosine_scores(metric[:, ::2], metric[:, 1::2])
        src, best_b = _select_sources(scores, origins[:, ::2], r)
        tgt = np.take_along_axis(best_b, src, axis=-1)
        keep[frames, 2 * src] = False
        dest_pos[frames, 2 * src] = 2 * tgt + 1
        if keep_pairs:
            pairs = [list(zip(s.tolist(), t.tolist())) for s, t in zip(src, tgt)]
    # slot index of every surviving position, survivors in list order
    slot_of = np.cumsum(keep, axis=1) - 1
    dest = np.take_along_axis(slot_of, dest_pos, axis=1)
    n_out = n - r
    new_sizes = np.zeros((F, n_out), dtype=np.int64)
    np.add.at(new_sizes, (frames, dest), sizes)
    new_origins = np.full((F, n_out), np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(new_origins, (frames, dest), origins)
    perm = _sort_permutation(new_sizes, new_origins, order, _as_rng(rng) if order == "random" else None)
    inv = np.argsort(perm, axis=1)
    final_slot = np.take_along_axis(inv, dest, axis=1)
    weights = np.zeros((F, n_out, n))
    weights[frames, final_slot, np.arange(n)[None, :]] = sizes
    new_sizes = np.take_along_axis(new_sizes, perm, axis=1)
    new_origins = np.take_along_axis(new_origins, perm, axis=1)
    weights /= new_sizes[:, :, None]
    return LayerPlan(weights, new_sizes, new_origins, pairs)
