"""Weighted multi-exit training: loss, Adam, the epoch loop, grid search.

The total loss is a weighted sum of per-level mean binary cross-entropies
(one term per exit; a single unweighted term for flat wirings). Training
is deterministic given the root seed: document order and dropout draw
from named sub-streams, and the best parameter state (by validation
loss) is restored in place when the loop finishes.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels as K
from .autograd import Tape, ops
from .data import pad_batch
from .encoder import ModelConfig, TransformerEncoder
from .exits import build_wiring, create_heads, head_parameters, predict
from .seeding import substream

GRID_LEARNING_RATES = (2e-5, 3e-5, 5e-5)
GRID_DROPOUT_RATES = (0.0, 0.1)
GRID_TABLE_HEADER = (
    "#grid-v1\tlearning_rate\tdropout_rate\tbest_dev_loss\tbest_epoch\tepochs_run"
)


class TrainingError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-5
    batch_size: int = 8
    max_epochs: int = 20
    patience: int = 3
    min_delta: float = 0.0
    seed: int = 0

    def validate(self):
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be positive")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be at least 1")
        if self.max_epochs < 1:
            raise TrainingError("max_epochs must be at least 1")
        if self.patience < 1:
            raise TrainingError("patience must be at least 1")
        if self.min_delta < 0:
            raise TrainingError("min_delta cannot be negative")
        return self


@dataclass
class LossReport:
    """Scalar loss tensor plus the unweighted per-level values."""

    total: object  # Tensor, scalar
    level_values: tuple
    weights: tuple

    @property
    def value(self):
        return self.total.item()


def weighted_loss(per_level_scores, per_level_targets, weights):
    """Sum of weights[n] * mean-BCE(scores[n], targets[n])."""
    if not (len(per_level_scores) == len(per_level_targets) == len(weights)):
        raise TrainingError(
            f"{len(per_level_scores)} score groups, "
            f"{len(per_level_targets)} target groups, {len(weights)} weights"
        )
    total = None
    values = []
    for scores, targets, weight in zip(
        per_level_scores, per_level_targets, weights
    ):
        term = ops.bce_loss(scores, targets)
        values.append(term.item())
        scaled = ops.scale(term, float(weight))
        total = scaled if total is None else ops.add(total, scaled)
    return LossReport(
        total=total,
        level_values=tuple(values),
        weights=tuple(float(w) for w in weights),
    )


def _as_weight_floats(weights, wiring):
    if wiring.is_flat:
        return (1.0,)
    if weights is None:
        raise TrainingError("per-level wirings need level weights")
    floats = tuple(float(w) for w in weights)
    if len(floats) != wiring.depth:
        raise TrainingError(
            f"{len(floats)} weights for a depth-{wiring.depth} wiring"
        )
    return floats


def collate(documents, pad_id, flat=False):
    """Stack a batch: (token ids, mask, per-level target matrices)."""
    for doc in documents:
        if doc.token_ids is None or doc.level_targets is None:
            raise TrainingError(f"document {doc.doc_id} is not prepared")
    ids, mask = pad_batch([doc.token_ids for doc in documents], pad_id)
    if flat:
        targets = [np.stack([doc.flat_target for doc in documents])]
    else:
        depth = len(documents[0].level_targets)
        targets = [
            np.stack([doc.level_targets[n] for doc in documents])
            for n in range(depth)
        ]
    return ids, mask, targets


class AdamOptimizer:
    """Adam with bias correction; epsilon sits outside the square root."""

    def __init__(
        self, parameters, learning_rate, beta1=0.9, beta2=0.999, epsilon=1e-8
    ):
        self.parameters = list(parameters)
        names = [p.name for p in self.parameters]
        if len(set(names)) != len(names):
            raise TrainingError("duplicate parameter names")
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.value) for p in self.parameters}
        self._v = {p.name: np.zeros_like(p.value) for p in self.parameters}

    def zero_grad(self):
        for p in self.parameters:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for p in self.parameters:
            grad = p.gradient
            if not np.all(np.isfinite(grad)):
                raise TrainingDiverged(
                    f"non-finite gradient in {p.name} "
                    f"at step {self.step_count}"
                )
            K.adam_step(
                p.value,
                grad,
                self._m[p.name],
                self._v[p.name],
                self.learning_rate,
                self.beta1,
                self.beta2,
                self.epsilon,
                c1,
                c2,
            )


def run_loss(encoder, heads, wiring, documents, weights, batch_size, pad_id=0):
    """Mean weighted loss over documents with dropout disabled."""
    if not documents:
        raise TrainingError("no documents to score")
    level_weights = _as_weight_floats(weights, wiring)
    total = 0.0
    seen = 0
    for start in range(0, len(documents), batch_size):
        batch = documents[start : start + batch_size]
        ids, mask, targets = collate(batch, pad_id, flat=wiring.is_flat)
        activation = encoder.encode(ids, mask)
        scores = predict(activation, heads, wiring)
        report = weighted_loss(scores, targets, level_weights)
        total += report.value * len(batch)
        seen += len(batch)
    return total / seen


@dataclass
class TrainResult:
    best_epoch: int
    best_dev_loss: float
    history: tuple
    stopped_early: bool


def train(
    encoder,
    heads,
    wiring,
    train_docs,
    dev_docs,
    weights,
    config,
    pad_id=0,
    log_path=None,
    log_fn=None,
):
    """Run the epoch loop; leaves the best-validation parameters in place."""
    config.validate()
    if not train_docs:
        raise TrainingError("no training documents")
    if not dev_docs:
        raise TrainingError("no validation documents")
    level_weights = _as_weight_floats(weights, wiring)
    params = list(encoder.parameters()) + head_parameters(heads)
    optimizer = AdamOptimizer(params, config.learning_rate)
    order_rng = substream(config.seed, "data-order")
    dropout_rng = substream(config.seed, "dropout")
    best_loss = math.inf
    best_epoch = 0
    best_state = None
    bad_epochs = 0
    stopped_early = False
    history = []
    log_file = Path(log_path).open("w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = order_rng.permutation(len(train_docs))
            running = 0.0
            seen = 0
            for start in range(0, len(order), config.batch_size):
                batch = [
                    train_docs[i]
                    for i in order[start : start + config.batch_size]
                ]
                ids, mask, targets = collate(batch, pad_id, flat=wiring.is_flat)
                optimizer.zero_grad()
                with Tape() as tape:
                    activation = encoder.encode(
                        ids, mask, training=True, dropout_rng=dropout_rng
                    )
                    scores = predict(activation, heads, wiring)
                    report = weighted_loss(scores, targets, level_weights)
                value = report.value
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}"
                    )
                tape.backward(report.total)
                optimizer.step()
                running += value * len(batch)
                seen += len(batch)
            dev_loss = run_loss(
                encoder,
                heads,
                wiring,
                dev_docs,
                level_weights,
                config.batch_size,
                pad_id,
            )
            entry = {
                "epoch": epoch,
                "train_loss": running / seen,
                "dev_loss": dev_loss,
            }
            history.append(entry)
            if log_file:
                log_file.write(json.dumps(entry, sort_keys=True) + "\n")
                log_file.flush()
            if log_fn:
                log_fn(entry)
            if dev_loss < best_loss - config.min_delta:
                best_loss = dev_loss
                best_epoch = epoch
                bad_epochs = 0
                best_state = {p.name: p.value.copy() for p in params}
            else:
                bad_epochs += 1
                if bad_epochs >= config.patience:
                    stopped_early = True
                    break
    finally:
        if log_file:
            log_file.close()
    if best_state is not None:
        for p in params:
            p.value[...] = best_state[p.name]
    return TrainResult(
        best_epoch=best_epoch,
        best_dev_loss=best_loss,
        history=tuple(history),
        stopped_early=stopped_early,
    )


def _run_cell(packed):
    (
        config_dict,
        scheme,
        custom_map,
        index,
        weight_floats,
        train_docs,
        dev_docs,
        train_dict,
        learning_rate,
        dropout_rate,
    ) = packed
    model_config = ModelConfig.from_dict(
        {**config_dict, "dropout_rate": dropout_rate}
    )
    encoder = TransformerEncoder(model_config)
    wiring = build_wiring(
        scheme, model_config.num_layers, index.depth, custom_map=custom_map
    )
    heads = create_heads(
        wiring, index, model_config.hidden_size, seed=model_config.seed
    )
    config = TrainConfig(**{**train_dict, "learning_rate": learning_rate})
    result = train(
        encoder, heads, wiring, train_docs, dev_docs, weight_floats, config
    )
    return {
        "learning_rate": learning_rate,
        "dropout_rate": dropout_rate,
        "best_dev_loss": result.best_dev_loss,
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
    }


@dataclass
class GridResult:
    cells: tuple
    best: dict


def grid_search(
    model_config,
    scheme,
    custom_map,
    index,
    weights,
    train_docs,
    dev_docs,
    train_config,
    learning_rates=GRID_LEARNING_RATES,
    dropout_rates=GRID_DROPOUT_RATES,
    jobs=1,
):
    """Train one fresh model per (learning rate, dropout) cell.

    Every cell starts from the same seed, so cells differ only in the two
    searched values. Cells are independent; jobs > 1 fans them out across
    processes.
    """
    if not learning_rates or not dropout_rates:
        raise TrainingError("grid axes cannot be empty")
    weight_floats = (
        None if weights is None else tuple(float(w) for w in weights)
    )
    train_dict = asdict(train_config)
    packed_cells = [
        (
            model_config.to_dict(),
            scheme,
            custom_map,
            index,
            weight_floats,
            list(train_docs),
            list(dev_docs),
            train_dict,
            float(lr),
            float(dr),
        )
        for lr in learning_rates
        for dr in dropout_rates
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            cells = list(executor.map(_run_cell, packed_cells))
    else:
        cells = [_run_cell(packed) for packed in packed_cells]
    best = min(
        cells,
        key=lambda c: (c["best_dev_loss"], c["learning_rate"], c["dropout_rate"]),
    )
    return GridResult(cells=tuple(cells), best=best)


def grid_table(grid_result):
    """Render grid results as a stable tab-separated table."""
    lines = [GRID_TABLE_HEADER]
    for cell in grid_result.cells:
        lines.append(
            "\t".join(
                [
                    repr(cell["learning_rate"]),
                    repr(cell["dropout_rate"]),
                    repr(cell["best_dev_loss"]),
                    str(cell["best_epoch"]),
                    str(cell["epochs_run"]),
                ]
            )
        )
    return "\n".join(lines) + "\n"
