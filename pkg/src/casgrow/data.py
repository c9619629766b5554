"""Cascade corpora: JSONL ingestion, windowing, labels, splits, synthesis.

A corpus file stores one cascade per line as
``{"id": str, "events": [{"user": str, "time": float, "parent": str|null}, ...]}``
with events sorted by time and the root (parent null) first. Each record
keeps its full event list; the observation window is applied at load
time, and the growth label is the number of retweets that fall beyond
the window. An optional sidecar file maps users to feature vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError

MIN_HORIZON_RETWEETS = 10  # cascades with fewer total retweets are discarded
MIN_SPLIT_SIZE = 10


@dataclass(eq=False)
class CascadeGraph:
    """One observed cascade: who joined, in what order, along which edges.

    ``edges`` point source -> retweeter. ``positions[i]`` is node i's
    activation rank (0 = root). ``growth_label`` counts retweets that
    arrived after the observation window.
    """

    cascade_id: str
    node_ids: list[str]
    edges: list[tuple[int, int]]
    positions: list[int]
    features: np.ndarray
    activation_times: list[float]
    growth_label: int

    def validate(self) -> None:
        n = len(self.node_ids)
        if n < 2:
            raise DataError(f"cascade {self.cascade_id}: needs at least 2 nodes, has {n}")
        if sorted(self.positions) != list(range(n)):
            raise DataError(f"cascade {self.cascade_id}: positions are not a permutation of 0..{n - 1}")
        for src, dst in self.edges:
            if not (0 <= src < n and 0 <= dst < n):
                raise DataError(f"cascade {self.cascade_id}: edge ({src}, {dst}) out of range")
            if src == dst:
                raise DataError(f"cascade {self.cascade_id}: self-loop on node {src}")
        if self.features.shape[0] != n:
            raise DataError(
                f"cascade {self.cascade_id}: {self.features.shape[0]} feature rows for {n} nodes"
            )
        if self.growth_label < 0:
            raise DataError(f"cascade {self.cascade_id}: negative growth label")
        by_rank = sorted(range(n), key=lambda i: self.positions[i])
        times = [self.activation_times[i] for i in by_rank]
        if any(b < a for a, b in zip(times, times[1:])):
            raise DataError(f"cascade {self.cascade_id}: activation times decrease along positions")


@dataclass
class DatasetSplit:
    train: list[CascadeGraph]
    validation: list[CascadeGraph]
    test: list[CascadeGraph]
    split_seed: int

    def all_cascades(self) -> list[CascadeGraph]:
        return [*self.train, *self.validation, *self.test]


# -- loading -----------------------------------------------------------------


def load_features(path) -> dict[str, list[float]]:
    """Sidecar JSONL of {"user": ..., "features": [...]} rows."""
    table: dict[str, list[float]] = {}
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                user, feats = row["user"], [float(x) for x in row["features"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: line {lineno}: bad feature row ({exc})") from exc
            if width is None:
                width = len(feats)
            elif len(feats) != width:
                raise DataError(f"{path}: line {lineno}: feature width {len(feats)} != {width}")
            table[user] = feats
    if not table:
        raise DataError(f"{path}: no feature rows")
    return table


def _parse_events(raw, lineno: int):
    try:
        cascade_id = raw["id"]
        events = raw["events"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"line {lineno}: missing 'id' or 'events' ({exc})") from exc
    if not isinstance(events, list) or not events:
        raise DataError(f"line {lineno}: 'events' must be a nonempty list")
    parsed = []
    for k, ev in enumerate(events):
        try:
            user, time, parent = ev["user"], float(ev["time"]), ev["parent"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"line {lineno}: event {k} malformed ({exc})") from exc
        parsed.append((user, time, parent))
    times = [t for _, t, _ in parsed]
    if any(b < a for a, b in zip(times, times[1:])):
        raise DataError(f"line {lineno}: cascade {cascade_id}: events not sorted by time")
    if parsed[0][2] is not None:
        raise DataError(f"line {lineno}: cascade {cascade_id}: first event must have null parent")
    seen = set()
    for k, (user, _, parent) in enumerate(parsed):
        if user in seen:
            raise DataError(f"line {lineno}: cascade {cascade_id}: duplicate user {user!r}")
        if k > 0:
            if parent is None:
                raise DataError(f"line {lineno}: cascade {cascade_id}: second root at event {k}")
            if parent not in seen:
                raise DataError(
                    f"line {lineno}: cascade {cascade_id}: parent {parent!r} activates after its child"
                )
        seen.add(user)
    return cascade_id, parsed


def load_corpus(
    path,
    window: float,
    feature_path=None,
    feature_dim: int | None = None,
) -> list[CascadeGraph]:
    """Parse a corpus file, truncate to the observation window, label, filter.

    Keeps events with time <= window; the growth label is the count of
    later events. Cascades with fewer than MIN_HORIZON_RETWEETS total
    retweets, or with no retweet inside the window, are dropped.
    """
    if window <= 0:
        raise ConfigError(f"observation window must be positive, got {window}")
    features = load_features(feature_path) if feature_path else None
    if features is not None:
        width = len(next(iter(features.values())))
        if feature_dim is not None and feature_dim != width:
            raise ConfigError(f"feature_dim {feature_dim} != sidecar width {width}")
        feature_dim = width
    elif feature_dim is None:
        raise ConfigError("feature_dim is required when no feature sidecar is given")

    corpus = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON: {exc}") from exc
            cascade_id, events = _parse_events(raw, lineno)
            if len(events) - 1 < MIN_HORIZON_RETWEETS:
                continue
            observed = [e for e in events if e[1] <= window]
            if len(observed) < 2:
                continue
            index = {user: i for i, (user, _, _) in enumerate(observed)}
            edges = [
                (index[parent], child)
                for child, (_, _, parent) in enumerate(observed)
                if parent is not None
            ]
            n = len(observed)
            feats = np.zeros((n, feature_dim))
            if features is not None:
                for i, (user, _, _) in enumerate(observed):
                    if user in features:
                        feats[i] = features[user]
            cascade = CascadeGraph(
                cascade_id=cascade_id,
                node_ids=[user for user, _, _ in observed],
                edges=edges,
                positions=list(range(n)),
                features=feats,
                activation_times=[t for _, t, _ in observed],
                growth_label=len(events) - len(observed),
            )
            cascade.validate()
            corpus.append(cascade)
    return corpus


def save_corpus(corpus, path, window: float, feature_path=None) -> None:
    """Write cascades back to the JSONL format.

    Growth labels are encoded as placeholder events beyond the window,
    so load_corpus(path, window) restores the corpus exactly. Requires
    tree-shaped cascades (every non-root node has exactly one parent).
    """
    with open(path, "w", encoding="utf-8") as fh:
        for cascade in corpus:
            n = len(cascade.node_ids)
            parent_of: dict[int, int] = {}
            for src, dst in cascade.edges:
                if dst in parent_of:
                    raise DataError(f"cascade {cascade.cascade_id}: node {dst} has two parents")
                parent_of[dst] = src
            order = sorted(range(n), key=lambda i: cascade.positions[i])
            root = order[0]
            missing = [i for i in order[1:] if i not in parent_of]
            if missing:
                raise DataError(
                    f"cascade {cascade.cascade_id}: nodes {missing} have no parent edge; "
                    "only tree-shaped cascades can be saved"
                )
            events = [
                {
                    "user": cascade.node_ids[i],
                    "time": cascade.activation_times[i],
                    "parent": None if i == root else cascade.node_ids[parent_of[i]],
                }
                for i in order
            ]
            for k in range(cascade.growth_label):
                events.append(
                    {
                        "user": f"{cascade.cascade_id}::future::{k}",
                        "time": window + 1.0 + k,
                        "parent": cascade.node_ids[root],
                    }
                )
            fh.write(json.dumps({"id": cascade.cascade_id, "events": events}) + "\n")
    if feature_path is not None:
        save_features(corpus, feature_path)


def save_features(corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cascade in corpus:
            for i, user in enumerate(cascade.node_ids):
                row = {"user": user, "features": [float(x) for x in cascade.features[i]]}
                fh.write(json.dumps(row) + "\n")


# -- splitting ---------------------------------------------------------------


def split_corpus(corpus, seed: int) -> DatasetSplit:
    """Seeded shuffle then 70/10/20 partition (leftover cascades go to train)."""
    n = len(corpus)
    if n < MIN_SPLIT_SIZE:
        raise DataError(f"corpus of {n} cascades is too small to split (need >= {MIN_SPLIT_SIZE})")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [corpus[i] for i in order]
    n_val = n // 10
    n_test = n // 5
    n_train = n - n_val - n_test
    return DatasetSplit(
        train=shuffled[:n_train],
        validation=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
        split_seed=seed,
    )


def split_manifest(split: DatasetSplit) -> dict:
    return {
        "split_seed": split.split_seed,
        "train": [c.cascade_id for c in split.train],
        "validation": [c.cascade_id for c in split.validation],
        "test": [c.cascade_id for c in split.test],
    }


def standardize_split(split: DatasetSplit) -> DatasetSplit:
    """Zero-mean/unit-variance features using train-split statistics only."""
    if not split.train:
        raise DataError("cannot standardize: empty train split")
    stacked = np.vstack([c.features for c in split.train])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std < 1e-8] = 1.0

    def rescale(cascades):
        return [replace(c, features=(c.features - mean) / std) for c in cascades]

    return DatasetSplit(
        train=rescale(split.train),
        validation=rescale(split.validation),
        test=rescale(split.test),
        split_seed=split.split_seed,
    )


# -- synthetic corpora -------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    """Random-tree cascade generator with a learnable growth rule.

    Trees grow by influence-weighted preferential attachment: with
    probability ``branching`` a new node picks its parent with odds
    proportional to influence x (out-degree + 1), otherwise it extends
    the chain from the latest node. Feature 0 carries each node's
    influence; the remaining columns are standard-normal noise. The
    growth label follows a closed-form rule of observed size, depth, and
    mean influence, plus bounded uniform noise.
    """

    cascade_count: int = 100
    min_nodes: int = 8
    max_nodes: int = 40
    feature_dim: int = 8
    branching: float = 0.6
    size_coef: float = 0.5
    depth_coef: float = 0.5
    influence_coef: float = 1.5
    noise: float = 0.0
    influence_mean: float = 2.0
    influence_spread: float = 0.8
    influence_sigma: float = 0.3
    window: float = 3600.0
    seed: int = 0

    def problems(self) -> list[str]:
        issues = []
        if self.cascade_count <= 0:
            issues.append(f"cascade_count must be positive, got {self.cascade_count}")
        if self.min_nodes < 2:
            issues.append(f"min_nodes must be >= 2, got {self.min_nodes}")
        if self.max_nodes < self.min_nodes:
            issues.append(f"max_nodes {self.max_nodes} < min_nodes {self.min_nodes}")
        if self.feature_dim <= 0:
            issues.append(f"feature_dim must be positive, got {self.feature_dim}")
        if not 0.0 <= self.branching <= 1.0:
            issues.append(f"branching must lie in [0, 1], got {self.branching}")
        if self.noise < 0:
            issues.append(f"noise must not be negative, got {self.noise}")
        if self.window <= 0:
            issues.append(f"window must be positive, got {self.window}")
        return issues

    def validated(self) -> "GeneratorConfig":
        issues = self.problems()
        if issues:
            raise ConfigError("; ".join(issues))
        return self


def growth_rule(config: GeneratorConfig, n: int, depth: int, mean_influence: float) -> float:
    """Noise-free part of the synthetic growth label."""
    return (
        config.size_coef * n
        + config.depth_coef * depth
        + config.influence_coef * n * mean_influence
    )


def cascade_depth(cascade: CascadeGraph) -> int:
    """Longest root-to-leaf distance along stored edges."""
    n = len(cascade.node_ids)
    children: dict[int, list[int]] = {}
    indegree = [0] * n
    for src, dst in cascade.edges:
        children.setdefault(src, []).append(dst)
        indegree[dst] += 1
    roots = [i for i in range(n) if indegree[i] == 0]
    depth = [0] * n
    frontier = roots
    best = 0
    while frontier:
        nxt = []
        for node in frontier:
            for child in children.get(node, []):
                depth[child] = depth[node] + 1
                best = max(best, depth[child])
                nxt.append(child)
        frontier = nxt
    return best


def generate_synthetic(config: GeneratorConfig) -> list[CascadeGraph]:
    """Seeded corpus of random-tree cascades; identical config => identical corpus."""
    config.validated()
    rng = np.random.default_rng(config.seed)
    corpus = []
    for idx in range(config.cascade_count):
        n = int(rng.integers(config.min_nodes, config.max_nodes + 1))
        # per-cascade influence level, floored so every cascade survives the
        # horizon retweet filter after serialization
        level = max(0.5, rng.normal(config.influence_mean, config.influence_spread))
        influence = rng.normal(level, config.influence_sigma, size=n)
        features = np.empty((n, config.feature_dim))
        features[:, 0] = influence
        if config.feature_dim > 1:
            features[:, 1:] = rng.normal(size=(n, config.feature_dim - 1))

        attach_weight = np.maximum(influence, 0.1)
        out_degree = np.zeros(n)
        parents = np.zeros(n, dtype=int)
        depth = np.zeros(n, dtype=int)
        for child in range(1, n):
            if config.branching > 0 and rng.random() < config.branching:
                odds = attach_weight[:child] * (out_degree[:child] + 1.0)
                parent = int(rng.choice(child, p=odds / odds.sum()))
            else:
                parent = child - 1
            parents[child] = parent
            out_degree[parent] += 1
            depth[child] = depth[parent] + 1

        times = [0.0] + sorted(rng.uniform(0.0, config.window, size=n - 1).tolist())
        raw = growth_rule(config, n, int(depth.max()), float(influence.mean()))
        if config.noise > 0:
            raw += rng.uniform(-config.noise, config.noise)
        cascade = CascadeGraph(
            cascade_id=f"syn{idx:06d}",
            node_ids=[f"u{idx:06d}n{j:04d}" for j in range(n)],
            edges=[(int(parents[j]), j) for j in range(1, n)],
            positions=list(range(n)),
            features=features,
            activation_times=times,
            growth_label=max(0, round(raw)),
        )
        cascade.validate()
        corpus.append(cascade)
    return corpus


# -- perturbation ------------------------------------------------------------


def edge_dropout(cascade: CascadeGraph, rate: float, seed: int) -> CascadeGraph:
    """Independently drop each edge not touching the root with probability rate.

    Nodes, positions, features, and the growth label are untouched.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return replace(cascade, edges=list(cascade.edges))
    root = cascade.positions.index(0)
    rng = np.random.default_rng(seed)
    kept = []
    for src, dst in cascade.edges:
        if src == root or dst == root:
            kept.append((src, dst))
        elif rng.random() >= rate:
            kept.append((src, dst))
    return replace(cascade, edges=kept)


def derive_seed(base: int, *parts: int) -> int:
    """Stable per-item seed derived from a base seed and index parts."""
    return int(np.random.SeedSequence([int(base), *[int(p) for p in parts]]).generate_state(1)[0])
