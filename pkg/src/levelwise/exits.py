"""Level-to-layer wiring schemes and their sigmoid classification heads.

A wiring assigns every hierarchy level to one encoder layer (or to a pair
of layers whose CLS vectors are concatenated), or routes the whole label
set through a single flat head on the last layer. Heads are plain affine
maps through a sigmoid: scores = sigmoid(W @ cls + b).

Named schemes assume the reference geometry of 12 encoder layers and a
depth-6 hierarchy; CUSTOM wirings lift that restriction.

Wiring file format (UTF-8, one level per line)::

    #wiring-v1	level	layers
    1	4
    3	6,7
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Parameter, ops
from .seeding import substream

WIRING_HEADER = "#wiring-v1\tlevel\tlayers"

FLAT = "flat"
LAST_SIX = "last-six"
ONE_BY_ONE = "one-by-one"
IN_PAIRS = "in-pairs"
HYBRID = "hybrid"
CUSTOM = "custom"

NAMED_SCHEMES = (FLAT, LAST_SIX, ONE_BY_ONE, IN_PAIRS, HYBRID)
ALL_SCHEMES = NAMED_SCHEMES + (CUSTOM,)


class WiringError(ValueError):
    """Invalid scheme, geometry, or head/wiring mismatch."""


@dataclass(frozen=True)
class Wiring:
    """Validated level -> layer assignment (or a single flat layer)."""

    scheme: str
    assignments: tuple = None  # index n-1 -> ordered tuple of layer ids
    flat_layer: int = None

    @property
    def is_flat(self):
        return self.flat_layer is not None

    @property
    def depth(self):
        return 0 if self.is_flat else len(self.assignments)

    def layers_for_level(self, n):
        if self.is_flat:
            raise WiringError("flat wiring has no per-level assignments")
        if not 1 <= n <= self.depth:
            raise WiringError(f"level {n} out of range 1..{self.depth}")
        return self.assignments[n - 1]

    def validate(self, num_layers, depth):
        if self.is_flat:
            if self.assignments is not None:
                raise WiringError("flat wiring cannot carry level assignments")
            if not 1 <= self.flat_layer <= num_layers:
                raise WiringError(
                    f"flat layer {self.flat_layer} outside 1..{num_layers}"
                )
            return self
        if len(self.assignments) != depth:
            raise WiringError(
                f"wiring covers {len(self.assignments)} levels, "
                f"hierarchy has {depth}"
            )
        previous_max = 0
        for n, layers in enumerate(self.assignments, start=1):
            if len(layers) not in (1, 2) or len(set(layers)) != len(layers):
                raise WiringError(
                    f"level {n} must use 1 or 2 distinct layers, got {layers}"
                )
            if list(layers) != sorted(layers):
                raise WiringError(f"level {n} pair {layers} must be ascending")
            if layers[0] < 1 or layers[-1] > num_layers:
                raise WiringError(
                    f"level {n} layers {layers} outside 1..{num_layers}"
                )
            if layers[0] <= previous_max:
                raise WiringError(
                    "layer indices must strictly increase with level "
                    f"(level {n} starts at {layers[0]} after {previous_max})"
                )
            previous_max = layers[-1]
        return self


def build_wiring(scheme, num_layers, depth, custom_map=None):
    """Construct the named assignment tables (or validate a custom map)."""
    if scheme not in ALL_SCHEMES:
        raise WiringError(
            f"unknown scheme {scheme!r}; valid schemes: {', '.join(ALL_SCHEMES)}"
        )
    if scheme == CUSTOM:
        if not custom_map:
            raise WiringError("custom scheme requires an assignment map")
        missing = [n for n in range(1, depth + 1) if n not in custom_map]
        extra = [n for n in custom_map if not 1 <= n <= depth]
        if missing or extra:
            raise WiringError(
                f"custom wiring must assign levels 1..{depth} exactly once "
                f"(missing {missing}, unexpected {extra})"
            )
        assignments = tuple(
            tuple(int(x) for x in custom_map[n]) for n in range(1, depth + 1)
        )
        return Wiring(scheme=CUSTOM, assignments=assignments).validate(
            num_layers, depth
        )
    if num_layers != 12 or depth != 6:
        raise WiringError(
            f"named scheme {scheme!r} requires 12 layers and depth 6, "
            f"got {num_layers} layers and depth {depth}"
        )
    if scheme == FLAT:
        return Wiring(scheme=FLAT, flat_layer=12).validate(num_layers, depth)
    if scheme == LAST_SIX:
        assignments = tuple((n + 6,) for n in range(1, 7))
    elif scheme == ONE_BY_ONE:
        assignments = tuple((2 * n,) for n in range(1, 7))
    elif scheme == IN_PAIRS:
        assignments = tuple((2 * n - 1, 2 * n) for n in range(1, 7))
    else:  # HYBRID: levels 1, 2, 6 pinned to layers 4, 5, 12; middle in pairs
        assignments = ((4,), (5,), (6, 7), (8, 9), (10, 11), (12,))
    return Wiring(scheme=scheme, assignments=assignments).validate(
        num_layers, depth
    )


def load_wiring_map(path):
    """Parse a custom wiring file into {level: (layer, ...)}."""
    path = Path(path)
    custom_map = {}
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != WIRING_HEADER:
            raise WiringError(
                f"{path}: unrecognized header {header!r} "
                f"(expected {WIRING_HEADER!r})"
            )
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise WiringError(f"{path}:{lineno}: expected 2 fields")
            try:
                level = int(fields[0])
                layers = tuple(int(x) for x in fields[1].split(","))
            except ValueError:
                raise WiringError(f"{path}:{lineno}: bad integer field") from None
            if level in custom_map:
                raise WiringError(f"{path}:{lineno}: duplicate level {level}")
            custom_map[level] = layers
    return custom_map


@dataclass
class ExitHead:
    """Sigmoid classifier reading one (or two concatenated) CLS vectors."""

    level: int  # 0 means "all labels" (flat)
    weight: Parameter  # (|labels|, input_width)
    bias: Parameter  # (|labels|,)

    @property
    def input_width(self):
        return self.weight.shape[1]

    @property
    def output_size(self):
        return self.weight.shape[0]


def _truncated_normal(rng, shape, std=0.02):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def create_heads(wiring, index, hidden_size, seed):
    """One ExitHead per level (or a single flat head over all labels).

    Input width is hidden_size, doubled when the wiring assigns a layer
    pair. Weights draw from the same truncated normal as the encoder but
    on an independent seed sub-stream.
    """
    rng = substream(seed, "init-heads")
    heads = []
    if wiring.is_flat:
        heads.append(
            ExitHead(
                level=0,
                weight=Parameter(
                    "head.flat.weight",
                    _truncated_normal(rng, (index.total, hidden_size)),
                ),
                bias=Parameter("head.flat.bias", np.zeros(index.total)),
            )
        )
        return heads
    for n in range(1, wiring.depth + 1):
        width = hidden_size * len(wiring.layers_for_level(n))
        out_size = index.size(n)
        heads.append(
            ExitHead(
                level=n,
                weight=Parameter(
                    f"head.level{n}.weight",
                    _truncated_normal(rng, (out_size, width)),
                ),
                bias=Parameter(f"head.level{n}.bias", np.zeros(out_size)),
            )
        )
    return heads


def head_parameters(heads):
    params = []
    for head in heads:
        params.extend([head.weight, head.bias])
    return params


def predict(activation, heads, wiring):
    """Per-level sigmoid scores (one flat vector for flat wirings).

    Returns a list of Tensors of shape (batch, |L_n|) ordered by level,
    or a single-element list [(batch, |L|)] when the wiring is flat.
    CLS inputs come from the wiring's assigned layers; layer pairs are
    concatenated in (lower; higher) order.
    """
    num_layers = activation.num_layers
    if wiring.is_flat:
        if len(heads) != 1 or heads[0].level != 0:
            raise WiringError("flat wiring requires exactly the flat head")
        if wiring.flat_layer > num_layers:
            raise WiringError(
                f"wiring reads layer {wiring.flat_layer}, "
                f"model has {num_layers}"
            )
        cls = activation.cls_vectors[wiring.flat_layer - 1]
        return [_apply_head(heads[0], cls)]
    if len(heads) != wiring.depth:
        raise WiringError(
            f"{len(heads)} heads for a depth-{wiring.depth} wiring"
        )
    scores = []
    for head in heads:
        layers = wiring.layers_for_level(head.level)
        if layers[-1] > num_layers:
            raise WiringError(
                f"wiring reads layer {layers[-1]}, model has {num_layers}"
            )
        parts = [activation.cls_vectors[i - 1] for i in layers]
        cls = parts[0] if len(parts) == 1 else ops.concat_last_axis(*parts)
        scores.append(_apply_head(head, cls))
    return scores


def _apply_head(head, cls):
    if cls.shape[-1] != head.input_width:
        raise WiringError(
            f"head level {head.level} expects width {head.input_width}, "
            f"got CLS width {cls.shape[-1]}"
        )
    return ops.sigmoid(ops.linear(cls, head.weight, head.bias))


def assemble_flat_scores(per_level_scores, index):
    """Concatenate per-level score arrays into the global label order.

    Accepts Tensors or ndarrays of shape (batch, |L_n|); the canonical
    per-level orders are level-major prefixes of the global order, so
    concatenation along the label axis is exactly the re-indexing map.
    """
    if len(per_level_scores) != index.depth:
        raise WiringError(
            f"{len(per_level_scores)} score vectors for depth {index.depth}"
        )
    arrays = []
    for n, scores in enumerate(per_level_scores, start=1):
        arr = scores.data if hasattr(scores, "data") else np.asarray(scores)
        if arr.shape[-1] != index.size(n):
            raise WiringError(
                f"level {n} scores have {arr.shape[-1]} labels, "
                f"expected {index.size(n)}"
            )
        arrays.append(arr)
    return np.concatenate(arrays, axis=-1)
