"""Shared fixtures: taxonomy-shaped hierarchies, random DAG builders, and
independent ranking oracles used by both the unit and acceptance suites."""

import numpy as np
import pytest

from levelwise.data import Document
from levelwise.evaluation import PredictionRecord
from levelwise.hierarchy import LevelIndex, augment, build_hierarchy

# Per-level label counts shaped like the EUROVOC taxonomy (8 levels,
# 8,178 labels) and the ICD-9 taxonomy (7 levels, 22,395 labels).
EUROVOC_LEVEL_COUNTS = (21, 127, 568, 4545, 2335, 497, 79, 6)
ICD9_LEVEL_COUNTS = (4, 79, 589, 3982, 9640, 7234, 867)


def leveled_hierarchy(counts):
    """Synthetic hierarchy with the given per-level node counts.

    Node i at level n > 1 takes one parent at level n-1 (round-robin),
    which reproduces the taxonomies' level structure without their ids.
    """
    records = []
    for level, count in enumerate(counts, start=1):
        for i in range(count):
            label = f"v{level}_{i:05d}"
            parents = (
                [] if level == 1 else [f"v{level - 1}_{i % counts[level - 2]:05d}"]
            )
            records.append((label, label, level, parents))
    return build_hierarchy(records)


def fruit_hierarchy():
    """Tiny 4-level food taxonomy used by the worked ranking examples."""
    records = [
        ("agri-foodstuffs", "agri-foodstuffs", 1, []),
        ("plant-product", "plant product", 2, ["agri-foodstuffs"]),
        ("animal-product", "animal product", 2, ["agri-foodstuffs"]),
        ("fruit", "fruit", 3, ["plant-product"]),
        ("vegetable", "vegetable", 3, ["plant-product"]),
        ("grape", "grape", 4, ["fruit"]),
        ("citrus-fruit", "citrus fruit", 4, ["fruit"]),
    ]
    return build_hierarchy(records)


def random_dag_records(rng, max_nodes=200):
    """Random leveled DAG as build_hierarchy records, plus a parent map."""
    n = int(rng.integers(2, max_nodes + 1))
    depth = int(rng.integers(1, 7))
    levels = [1] + [int(rng.integers(1, depth + 1)) for _ in range(n - 1)]
    ids = [f"n{i:04d}" for i in range(n)]
    by_level = {}
    for node_id, level in zip(ids, levels):
        by_level.setdefault(level, []).append(node_id)
    records = []
    parent_map = {}
    for node_id, level in zip(ids, levels):
        pool = [p for lv, group in by_level.items() if lv < level for p in group]
        parents = []
        if pool:
            k = int(rng.integers(0, min(3, len(pool)) + 1))
            if k:
                picks = rng.choice(len(pool), size=k, replace=False)
                parents = sorted(pool[int(j)] for j in picks)
        records.append((node_id, node_id, level, parents))
        parent_map[node_id] = set(parents)
    return records, parent_map


def closure_oracle(parent_map, labels):
    """Brute-force ancestor closure by fixpoint expansion."""
    result = set(labels)
    changed = True
    while changed:
        changed = False
        for label in list(result):
            for parent in parent_map[label]:
                if parent not in result:
                    result.add(parent)
                    changed = True
    return result


def oracle_r_precision(scores, gold, order):
    """Rank with python's sorted (stable, tuple keys) and count hits."""
    ranked = sorted(
        range(len(order)), key=lambda i: (-float(scores[i]), order[i])
    )
    top = {order[i] for i in ranked[: len(gold)]}
    return len(top & set(gold)) / len(gold)


def oracle_report(gold_per_doc, scores_per_doc, level_orders):
    """Plain-python per-level / micro / macro evaluation.

    gold_per_doc: per document, one gold set per level.
    scores_per_doc: per document, one score list per level.
    """
    depth = len(level_orders)
    sums = [0.0] * depth
    counts = [0] * depth
    micro_sum = 0.0
    micro_count = 0
    global_order = [label for order in level_orders for label in order]
    for gold_levels, score_levels in zip(gold_per_doc, scores_per_doc):
        all_gold = set()
        for n in range(depth):
            all_gold |= set(gold_levels[n])
            if gold_levels[n]:
                sums[n] += oracle_r_precision(
                    score_levels[n], gold_levels[n], level_orders[n]
                )
                counts[n] += 1
        if all_gold:
            flat = [x for level in score_levels for x in level]
            micro_sum += oracle_r_precision(flat, all_gold, global_order)
            micro_count += 1
    levels = [
        sums[i] / counts[i] if counts[i] else None for i in range(depth)
    ]
    present = [v for v in levels if v is not None]
    return {
        "levels": levels,
        "counts": counts,
        "micro": micro_sum / micro_count if micro_count else None,
        "macro": sum(present) / len(present) if present else None,
    }


def random_ranking_instance(rng):
    """A random ≤20-label, ≤3-level hierarchy with scored documents.

    Returns (index, documents, records, gold_per_doc, scores_per_doc);
    the last two feed oracle_report. Roughly half the scores draw from a
    coarse grid so that ties actually occur.
    """
    depth = int(rng.integers(1, 4))
    while True:
        sizes = [int(rng.integers(1, 8)) for _ in range(depth)]
        if sum(sizes) <= 20:
            break
    h_records = []
    for n in range(1, depth + 1):
        for i in range(sizes[n - 1]):
            parents = []
            if n > 1 and rng.random() < 0.8:
                count = int(rng.integers(1, min(2, sizes[n - 2]) + 1))
                picks = rng.choice(sizes[n - 2], size=count, replace=False)
                parents = sorted(f"r{n - 1}x{int(j):02d}" for j in picks)
            h_records.append((f"r{n}x{i:02d}", f"node {n}.{i}", n, parents))
    hierarchy = build_hierarchy(h_records)
    index = LevelIndex(hierarchy)
    documents = []
    records = []
    gold_per_doc = []
    scores_per_doc = []
    all_ids = [label for order in index.level_orders for label in order]
    for d in range(int(rng.integers(2, 6))):
        base_size = int(rng.integers(0, min(3, len(all_ids)) + 1))
        closed = set()
        if base_size:
            picks = rng.choice(len(all_ids), size=base_size, replace=False)
            closed = augment(hierarchy, {all_ids[int(j)] for j in picks})
        gold_levels = []
        targets = []
        for n in range(1, depth + 1):
            order = index.level_orders[n - 1]
            gold = {label for label in order if label in closed}
            gold_levels.append(gold)
            targets.append(
                np.array([1.0 if label in gold else 0.0 for label in order])
            )
        score_levels = []
        for n in range(1, depth + 1):
            size = index.size(n)
            if rng.random() < 0.5:
                scores = rng.integers(0, 4, size=size) / 3.0
            else:
                scores = rng.uniform(size=size)
            score_levels.append(np.asarray(scores, dtype=np.float64))
        documents.append(
            Document(
                doc_id=f"d{d}",
                text="",
                labels=frozenset(),
                level_targets=targets,
                flat_target=np.concatenate(targets),
            )
        )
        records.append(
            PredictionRecord(doc_id=f"d{d}", level_scores=tuple(score_levels))
        )
        gold_per_doc.append(gold_levels)
        scores_per_doc.append(score_levels)
    return index, documents, records, gold_per_doc, scores_per_doc


@pytest.fixture(scope="session")
def eurovoc_like():
    return leveled_hierarchy(EUROVOC_LEVEL_COUNTS)


@pytest.fixture(scope="session")
def icd9_like():
    return leveled_hierarchy(ICD9_LEVEL_COUNTS)


@pytest.fixture()
def fruits():
    return fruit_hierarchy()


@pytest.fixture()
def rng():
    return np.random.default_rng(20260815)
