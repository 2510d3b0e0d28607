"""Model-utilization analyses: CLS geometry and attention statistics.

Distances between per-layer CLS vectors are angular (arccos of the dot
product of unit vectors, scaled to [0, 1] so 0.5 means 90 degrees).
Attention rows are reduced per document to one distribution per layer
(and one per head) over the document's unmasked key positions, either by
averaging all valid query rows (default) or by taking the CLS query row
only. Entropy and KL-divergence are reported in nats; KL smooths its
second argument by epsilon = 1e-10 and renormalizes, so zero attention
cells never produce infinities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import pad_batch

REDUCTION_ALL = "all-queries"
REDUCTION_CLS = "cls-query"
REDUCTIONS = (REDUCTION_ALL, REDUCTION_CLS)

KL_EPSILON = 1e-10
_SUM_TOLERANCE = 1e-6


class IntrospectionError(ValueError):
    pass


def unit_normalize(vectors):
    """Scale rows to Euclidean norm 1; zero rows are an error."""
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise IntrospectionError("cannot unit-normalize a zero-norm vector")
    return vectors / norms


def angular_distance(u, v):
    """arccos(u . v) / pi for unit vectors: 0 same, 0.5 orthogonal, 1 opposite."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise IntrospectionError(f"shape mismatch: {u.shape} vs {v.shape}")
    for name, vec in (("first", u), ("second", v)):
        norm = float(np.linalg.norm(vec))
        if abs(norm - 1.0) > _SUM_TOLERANCE:
            raise IntrospectionError(
                f"{name} vector is not unit-normalized (norm {norm})"
            )
    dot = float(np.dot(u, v))
    return math.acos(min(1.0, max(-1.0, dot))) / math.pi


def entropy(p):
    """Shannon entropy in nats; 0 * ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise IntrospectionError(f"expected a 1-D distribution, got {p.shape}")
    if np.any(p < 0):
        raise IntrospectionError("distribution has negative entries")
    total = float(p.sum())
    if abs(total - 1.0) > _SUM_TOLERANCE:
        raise IntrospectionError(f"distribution sums to {total}, not 1")
    positive = p[p > 0]
    return float(-(positive * np.log(positive)).sum())


def kl_divergence(p, q):
    """KL(p || q) in nats; q is smoothed by KL_EPSILON and renormalized.

    Floating-point rounding can push the sum a few ulps below zero even
    though KL is non-negative (Gibbs' inequality); clamped at 0.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise IntrospectionError(
            f"support mismatch: {p.shape} vs {q.shape}"
        )
    if np.any(p < 0) or np.any(q < 0):
        raise IntrospectionError("distribution has negative entries")
    for name, dist in (("first", p), ("second", q)):
        total = float(dist.sum())
        if abs(total - 1.0) > _SUM_TOLERANCE:
            raise IntrospectionError(f"{name} argument sums to {total}, not 1")
    smoothed = q + KL_EPSILON
    smoothed = smoothed / smoothed.sum()
    mask = p > 0
    value = float(
        (p[mask] * (np.log(p[mask]) - np.log(smoothed[mask]))).sum()
    )
    return max(0.0, value)


@dataclass(frozen=True)
class ClsSnapshot:
    """Unit-normalized CLS vectors, shaped (layers, documents, hidden)."""

    vectors: np.ndarray
    doc_ids: tuple

    @classmethod
    def from_raw(cls, raw, doc_ids):
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 3:
            raise IntrospectionError(
                f"expected (layers, documents, hidden), got {raw.shape}"
            )
        if raw.shape[1] != len(doc_ids):
            raise IntrospectionError(
                f"{raw.shape[1]} vectors for {len(doc_ids)} documents"
            )
        return cls(vectors=unit_normalize(raw), doc_ids=tuple(doc_ids))

    @property
    def num_layers(self):
        return self.vectors.shape[0]

    @property
    def num_documents(self):
        return self.vectors.shape[1]


@dataclass(frozen=True)
class AttentionProfile:
    """One document's reduced attention: per-layer and per-head rows.

    layer_dists: (layers, keys); head_dists: (layers, heads, keys), where
    keys run over the document's unmasked positions only.
    """

    doc_id: str
    layer_dists: np.ndarray
    head_dists: np.ndarray
    reduction: str

    @property
    def num_layers(self):
        return self.layer_dists.shape[0]

    @property
    def num_heads(self):
        return self.head_dists.shape[1]


def _renormalize_rows(rows):
    sums = rows.sum(axis=-1, keepdims=True)
    return rows / np.maximum(sums, 1e-300)


def attention_profiles(activation, reduction=REDUCTION_ALL, doc_ids=None):
    """Reduce a batch's captured attention to per-document profiles."""
    if reduction not in REDUCTIONS:
        raise IntrospectionError(
            f"unknown reduction {reduction!r}; expected one of {REDUCTIONS}"
        )
    if not activation.attentions or activation.attentions[0] is None:
        raise IntrospectionError(
            "activation captured no attention (encode with capture_attention)"
        )
    mask = activation.sequence_mask
    batch = mask.shape[0]
    if doc_ids is None:
        doc_ids = [str(i) for i in range(batch)]
    profiles = []
    for b in range(batch):
        valid = mask[b] > 0
        layer_rows = []
        head_rows = []
        for attn in activation.attentions:
            heads = attn[b]  # (num_heads, seq, seq)
            if reduction == REDUCTION_CLS:
                rows = heads[:, 0, :]
            else:
                rows = heads[:, valid, :].mean(axis=1)
            rows = _renormalize_rows(rows[:, valid])
            head_rows.append(rows)
            layer = _renormalize_rows(rows.mean(axis=0))
            layer_rows.append(layer)
        profiles.append(
            AttentionProfile(
                doc_id=str(doc_ids[b]),
                layer_dists=np.stack(layer_rows),
                head_dists=np.stack(head_rows),
                reduction=reduction,
            )
        )
    return profiles


def attention_distribution(activation, layer, reduction=REDUCTION_ALL):
    """Head-averaged key distribution for one layer, per document.

    Returns (batch, seq); masked key positions hold 0 and each row sums
    to 1 over the document's unmasked positions.
    """
    if not 1 <= layer <= len(activation.attentions):
        raise IntrospectionError(
            f"layer {layer} out of range 1..{len(activation.attentions)}"
        )
    profiles = attention_profiles(activation, reduction)
    mask = activation.sequence_mask
    out = np.zeros(mask.shape, dtype=np.float64)
    for b, profile in enumerate(profiles):
        out[b, mask[b] > 0] = profile.layer_dists[layer - 1]
    return out


def head_pair_kl(activation, layer, reduction=REDUCTION_ALL):
    """Mean KL over all ordered head pairs (i != j), averaged over documents."""
    profiles = attention_profiles(activation, reduction)
    if not 1 <= layer <= profiles[0].num_layers:
        raise IntrospectionError(
            f"layer {layer} out of range 1..{profiles[0].num_layers}"
        )
    return float(
        np.mean([_profile_head_kl(p, layer) for p in profiles])
    )


def _profile_head_kl(profile, layer):
    dists = profile.head_dists[layer - 1]
    heads = dists.shape[0]
    if heads < 2:
        raise IntrospectionError("head-pair KL needs at least 2 heads")
    values = [
        kl_divergence(dists[i], dists[j])
        for i in range(heads)
        for j in range(heads)
        if i != j
    ]
    return sum(values) / len(values)


def cls_distance_matrix(snapshot):
    """Mean pairwise angular distance between layers' CLS vectors."""
    if snapshot.num_documents == 0:
        raise IntrospectionError("empty snapshot")
    v = snapshot.vectors
    dots = np.einsum("idh,jdh->ijd", v, v)
    angles = np.arccos(np.clip(dots, -1.0, 1.0)) / np.pi
    matrix = angles.mean(axis=2)
    matrix = 0.5 * (matrix + matrix.T)  # enforce exact symmetry
    np.fill_diagonal(matrix, 0.0)  # distance of a layer to itself
    return matrix


def layer_kl_matrix(profiles):
    """Entry (i, j): mean over documents of KL(layer i || layer j)."""
    if not profiles:
        raise IntrospectionError("no profiles")
    layers = profiles[0].num_layers
    matrix = np.zeros((layers, layers))
    for profile in profiles:
        if profile.num_layers != layers:
            raise IntrospectionError("profiles have different layer counts")
        for i in range(layers):
            for j in range(layers):
                if i != j:
                    matrix[i, j] += kl_divergence(
                        profile.layer_dists[i], profile.layer_dists[j]
                    )
    matrix /= len(profiles)
    return matrix


def entropy_by_layer(profiles):
    """Mean entropy of the per-layer distributions across documents."""
    if not profiles:
        raise IntrospectionError("no profiles")
    layers = profiles[0].num_layers
    values = np.zeros(layers)
    for profile in profiles:
        for i in range(layers):
            values[i] += entropy(profile.layer_dists[i])
    return values / len(profiles)


def head_pair_kl_by_layer(profiles):
    """Mean ordered-pair head KL per layer across documents."""
    if not profiles:
        raise IntrospectionError("no profiles")
    layers = profiles[0].num_layers
    values = np.zeros(layers)
    for profile in profiles:
        for i in range(layers):
            values[i] += _profile_head_kl(profile, i + 1)
    return values / len(profiles)


def mean_off_diagonal(matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.shape[0]
    if n < 2:
        raise IntrospectionError("matrix needs at least 2 rows")
    off = matrix.sum() - np.trace(matrix)
    return float(off / (n * (n - 1)))


@dataclass(frozen=True)
class UtilizationReport:
    """Per-layer utilization statistics over an evaluation set."""

    reduction: str
    documents: int
    angular: np.ndarray  # (layers, layers)
    attention_kl: np.ndarray  # (layers, layers)
    entropies: np.ndarray  # (layers,)
    head_kls: np.ndarray  # (layers,)

    @property
    def num_layers(self):
        return self.angular.shape[0]

    @property
    def mean_off_diagonal_angular(self):
        return mean_off_diagonal(self.angular)


def collect_analysis(
    encoder, documents, batch_size=8, pad_id=0, reduction=REDUCTION_ALL
):
    """Run the encoder over prepared documents, capturing CLS + attention."""
    if not documents:
        raise IntrospectionError("no documents to analyze")
    cls_chunks = []
    profiles = []
    for start in range(0, len(documents), batch_size):
        batch = documents[start : start + batch_size]
        for doc in batch:
            if doc.token_ids is None:
                raise IntrospectionError(
                    f"document {doc.doc_id} is not prepared"
                )
        ids, mask = pad_batch([doc.token_ids for doc in batch], pad_id)
        activation = encoder.encode(ids, mask, capture_attention=True)
        cls_chunks.append(
            np.stack([t.data for t in activation.cls_vectors])  # (L, B, H)
        )
        profiles.extend(
            attention_profiles(
                activation, reduction, doc_ids=[d.doc_id for d in batch]
            )
        )
    raw = np.concatenate(cls_chunks, axis=1)
    snapshot = ClsSnapshot.from_raw(raw, [d.doc_id for d in documents])
    return snapshot, profiles


def build_utilization_report(snapshot, profiles, reduction=None):
    """Assemble the report from a snapshot and matching profiles."""
    if snapshot.num_documents != len(profiles):
        raise IntrospectionError(
            f"{snapshot.num_documents} snapshot documents, "
            f"{len(profiles)} profiles"
        )
    if reduction is None:
        reduction = profiles[0].reduction if profiles else REDUCTION_ALL
    return UtilizationReport(
        reduction=reduction,
        documents=snapshot.num_documents,
        angular=cls_distance_matrix(snapshot),
        attention_kl=layer_kl_matrix(profiles),
        entropies=entropy_by_layer(profiles),
        head_kls=head_pair_kl_by_layer(profiles),
    )


def save_snapshot(path, snapshot, profiles, extra=None):
    """Persist CLS vectors and attention profiles (padded, with lengths)."""
    if snapshot.num_documents != len(profiles):
        raise IntrospectionError("snapshot/profile count mismatch")
    lengths = np.array(
        [p.layer_dists.shape[1] for p in profiles], dtype=np.int64
    )
    layers = snapshot.num_layers
    heads = profiles[0].num_heads if profiles else 0
    width = int(lengths.max()) if len(lengths) else 0
    layer_attention = np.zeros((layers, len(profiles), width))
    head_attention = np.zeros((layers, len(profiles), heads, width))
    for d, profile in enumerate(profiles):
        k = lengths[d]
        layer_attention[:, d, :k] = profile.layer_dists
        head_attention[:, d, :, :k] = profile.head_dists
    meta = {
        "kind": "snapshot",
        "doc_ids": list(snapshot.doc_ids),
        "reduction": profiles[0].reduction if profiles else REDUCTION_ALL,
    }
    if extra:
        meta["extra"] = dict(extra)
    checkpoint.save_arrays(
        path,
        {
            "cls": snapshot.vectors,
            "lengths": lengths,
            "layer_attention": layer_attention,
            "head_attention": head_attention,
        },
        meta,
    )


def load_snapshot(path):
    """Inverse of save_snapshot: (ClsSnapshot, profiles, extra)."""
    arrays, meta = checkpoint.load_arrays(path)
    if meta.get("kind") != "snapshot":
        raise IntrospectionError(f"{path}: not an analysis snapshot")
    doc_ids = tuple(meta["doc_ids"])
    reduction = meta["reduction"]
    snapshot = ClsSnapshot(vectors=arrays["cls"], doc_ids=doc_ids)
    lengths = arrays["lengths"]
    profiles = []
    for d, doc_id in enumerate(doc_ids):
        k = int(lengths[d])
        profiles.append(
            AttentionProfile(
                doc_id=doc_id,
                layer_dists=arrays["layer_attention"][:, d, :k].copy(),
                head_dists=arrays["head_attention"][:, d, :, :k].copy(),
                reduction=reduction,
            )
        )
    return snapshot, profiles, meta.get("extra", {})


def _matrix_csv_text(matrix):
    layers = matrix.shape[0]
    lines = ["layer," + ",".join(f"L{i:02d}" for i in range(1, layers + 1))]
    for i in range(layers):
        cells = ",".join(repr(float(x)) for x in matrix[i])
        lines.append(f"L{i + 1:02d},{cells}")
    return "\n".join(lines) + "\n"


def _heatmap_svg(matrix, title, path):
    """Viridis heatmap (dark = low, bright = high) with per-cell labels."""
    from matplotlib.figure import Figure

    layers = matrix.shape[0]
    fig = Figure(figsize=(0.65 * layers + 2.2, 0.65 * layers + 1.6))
    ax = fig.add_subplot()
    image = ax.imshow(matrix, cmap="viridis")
    span = float(matrix.max() - matrix.min())
    threshold = float(matrix.min()) + 0.55 * span
    for i in range(layers):
        for j in range(layers):
            value = float(matrix[i, j])
            color = "black" if span and value > threshold else "white"
            ax.text(
                j, i, f"{value:.2f}", ha="center", va="center",
                color=color, fontsize=7,
            )
    ticks = list(range(layers))
    labels = [str(i + 1) for i in ticks]
    ax.set_xticks(ticks, labels=labels)
    ax.set_yticks(ticks, labels=labels)
    ax.set_xlabel("layer")
    ax.set_ylabel("layer")
    ax.set_title(f"{title} (viridis: dark=low, bright=high)", fontsize=9)
    fig.colorbar(image, ax=ax, shrink=0.8)
    fig.savefig(path, format="svg", bbox_inches="tight")


def utilization_text(report):
    """Per-layer (entropy, head-pair KL) pairs plus the summary line."""
    lines = [
        f"# attention utilization (reduction: {report.reduction}, "
        f"documents: {report.documents})",
        "# entropy and KL-divergence are in nats",
        "# mean off-diagonal cls angular distance: "
        f"{report.mean_off_diagonal_angular!r}",
        "layer\tentropy\thead_pair_kl",
    ]
    for i in range(report.num_layers):
        lines.append(
            f"{i + 1}\t{float(report.entropies[i])!r}"
            f"\t{float(report.head_kls[i])!r}"
        )
    return "\n".join(lines) + "\n"


def emit_report(report, out_dir):
    """Write CSV matrices, SVG heatmaps, and the utilization table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "angular_csv": out_dir / "cls_angular_distance.csv",
        "kl_csv": out_dir / "attention_kl.csv",
        "utilization": out_dir / "utilization.txt",
        "angular_svg": out_dir / "cls_angular_distance.svg",
        "kl_svg": out_dir / "attention_kl.svg",
    }
    paths["angular_csv"].write_text(
        _matrix_csv_text(report.angular), encoding="utf-8"
    )
    paths["kl_csv"].write_text(
        _matrix_csv_text(report.attention_kl), encoding="utf-8"
    )
    paths["utilization"].write_text(utilization_text(report), encoding="utf-8")
    _heatmap_svg(
        report.angular, "CLS angular distance across layers",
        paths["angular_svg"],
    )
    _heatmap_svg(
        report.attention_kl, "Attention KL-divergence across layers",
        paths["kl_svg"],
    )
    return paths
