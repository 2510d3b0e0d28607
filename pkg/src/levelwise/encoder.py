"""Multi-layer bidirectional transformer encoder built on the tensor engine.

Each layer is a post-layer-norm block: self-attention sublayer and
feed-forward sublayer, each followed by residual addition and layer
normalization. The encoder returns the CLS (position 0) representation of
EVERY layer, because classification heads may attach anywhere in the
stack, plus optional detached attention tensors for analysis.
"""

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Parameter, ops
from .seeding import substream


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    vocabulary_size: int
    num_layers: int = 12
    hidden_size: int = 64
    num_heads: int = 4
    feed_forward_size: int = 256
    max_sequence_length: int = 128
    dropout_rate: float = 0.1
    seed: int = 0

    def validate(self):
        if self.vocabulary_size < 1:
            raise ConfigError("vocabulary_size must be positive")
        for field_name in ("num_layers", "hidden_size", "num_heads",
                           "feed_forward_size"):
            if getattr(self, field_name) < 1:
                raise ConfigError(f"{field_name} must be positive")
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.max_sequence_length < 2:
            raise ConfigError("max_sequence_length must be at least 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")

    def to_dict(self):
        return {
            "vocabulary_size": self.vocabulary_size,
            "num_layers": self.num_layers,
            "hidden_size": self.hidden_size,
            "num_heads": self.num_heads,
            "feed_forward_size": self.feed_forward_size,
            "max_sequence_length": self.max_sequence_length,
            "dropout_rate": self.dropout_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        config = cls(**d)
        config.validate()
        return config


@dataclass
class LayerActivation:
    """Per-layer CLS tensors plus optional detached attention arrays."""

    cls_vectors: list  # index i-1 -> Tensor (batch, hidden) for layer i
    attentions: list  # index i-1 -> ndarray (batch, heads, seq, seq) or None
    sequence_mask: np.ndarray  # (batch, seq) of {0.0, 1.0}

    @property
    def num_layers(self):
        return len(self.cls_vectors)


def _truncated_normal(rng, shape, std=0.02):
    """Normal(0, std) resampled until all values lie within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def parameter_count(config):
    """Closed-form total parameter count for a config.

    embeddings: vocab*h + seq*h + 2h (token, position, embedding norm)
    per layer:  4h^2 + 4h (attention projections) + 2h (attention norm)
                + 2*h*ff + ff + h (feed-forward)   + 2h (output norm)
    """
    h = config.hidden_size
    ff = config.feed_forward_size
    embeddings = config.vocabulary_size * h + config.max_sequence_length * h + 2 * h
    per_layer = 4 * h * h + 4 * h + 2 * h + 2 * h * ff + ff + h + 2 * h
    return embeddings + config.num_layers * per_layer


class TransformerEncoder:
    """Parameter container and forward pass."""

    def __init__(self, config):
        config.validate()
        self.config = config
        rng = substream(config.seed, "init")
        h = config.hidden_size
        ff = config.feed_forward_size
        self._params = {}

        def param(name, array):
            p = Parameter(name, array)
            self._params[name] = p
            return p

        def dense(name, out_dim, in_dim):
            param(f"{name}.weight", _truncated_normal(rng, (out_dim, in_dim)))
            param(f"{name}.bias", np.zeros(out_dim))

        def norm(name):
            param(f"{name}.gain", np.ones(h))
            param(f"{name}.bias", np.zeros(h))

        param("embeddings.token", _truncated_normal(rng, (config.vocabulary_size, h)))
        param(
            "embeddings.position",
            _truncated_normal(rng, (config.max_sequence_length, h)),
        )
        norm("embeddings.norm")
        for i in range(config.num_layers):
            prefix = f"layer{i:02d}"
            for proj in ("query", "key", "value", "output"):
                dense(f"{prefix}.attention.{proj}", h, h)
            norm(f"{prefix}.attention.norm")
            dense(f"{prefix}.ffn.inner", ff, h)
            dense(f"{prefix}.ffn.outer", h, ff)
            norm(f"{prefix}.ffn.norm")

    def parameters(self):
        """All parameters in stable creation order."""
        return list(self._params.values())

    def parameter(self, name):
        return self._params[name]

    def parameter_count(self):
        total = sum(p.size for p in self._params.values())
        assert total == parameter_count(self.config)
        return total

    def _dense(self, x2d, name):
        return ops.linear(
            x2d, self._params[f"{name}.weight"], self._params[f"{name}.bias"]
        )

    def _norm(self, x, name):
        return ops.layer_norm(
            x, self._params[f"{name}.gain"], self._params[f"{name}.bias"]
        )

    def encode(
        self,
        token_ids,
        mask=None,
        training=False,
        dropout_rng=None,
        capture_attention=False,
        cls_id=None,
    ):
        """Run the stack over a padded id batch.

        token_ids: (batch, seq) integers, CLS at position 0 of every row.
        mask: (batch, seq) with 1.0 on real tokens, 0.0 on padding; all
        ones when omitted. Dropout fires only when ``training`` and the
        config rate is nonzero, drawing from ``dropout_rng``. Attention
        tensors are captured as detached copies of the pre-dropout
        probabilities with padded key columns zeroed and rows renormalized.
        """
        config = self.config
        token_ids = np.asarray(token_ids)
        if token_ids.ndim != 2:
            raise ConfigError(f"token_ids must be 2-D, got {token_ids.shape}")
        batch, seq = token_ids.shape
        if seq > config.max_sequence_length:
            raise ConfigError(
                f"sequence length {seq} exceeds maximum "
                f"{config.max_sequence_length}"
            )
        if mask is None:
            mask = np.ones((batch, seq), dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (batch, seq):
            raise ConfigError(f"mask shape {mask.shape} != {(batch, seq)}")
        if cls_id is not None and not np.all(token_ids[:, 0] == cls_id):
            raise ConfigError("position 0 must hold the CLS token id")
        rate = config.dropout_rate if training else 0.0
        if rate and dropout_rng is None:
            raise ConfigError("training-mode dropout requires dropout_rng")

        def drop(x):
            return ops.dropout(x, rate, dropout_rng, training)

        h = config.hidden_size
        heads = config.num_heads
        head_dim = h // heads
        # additive pre-softmax mask: 0 on real keys, -1e9 on padding, which
        # underflows to an exact 0 after the softmax exponentiation
        attn_bias = ((1.0 - mask) * -1e9).reshape(batch, 1, 1, seq)

        tok = ops.embedding_lookup(self._params["embeddings.token"], token_ids)
        pos_ids = np.broadcast_to(np.arange(seq), (batch, seq))
        pos = ops.embedding_lookup(self._params["embeddings.position"], pos_ids)
        x = self._norm(ops.add(tok, pos), "embeddings.norm")
        x = drop(x)

        cls_vectors = []
        attentions = []
        for i in range(config.num_layers):
            prefix = f"layer{i:02d}"
            flat = ops.reshape(x, (batch * seq, h))

            def split_heads(name):
                y = self._dense(flat, f"{prefix}.attention.{name}")
                y = ops.reshape(y, (batch, seq, heads, head_dim))
                return ops.transpose(y, (0, 2, 1, 3))

            q = split_heads("query")
            k = split_heads("key")
            v = split_heads("value")
            scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))
            scores = ops.scale(scores, 1.0 / math.sqrt(head_dim))
            scores = ops.add_attention_bias(scores, attn_bias)
            probs = ops.softmax_rows(scores)
            if capture_attention:
                captured = probs.data * mask.reshape(batch, 1, 1, seq)
                captured /= np.maximum(
                    captured.sum(axis=-1, keepdims=True), 1e-300
                )
                attentions.append(captured)
            else:
                attentions.append(None)
            context = ops.matmul(drop(probs), v)
            context = ops.transpose(context, (0, 2, 1, 3))
            context = ops.reshape(context, (batch * seq, h))
            attn_out = self._dense(context, f"{prefix}.attention.output")
            attn_out = ops.reshape(attn_out, (batch, seq, h))
            x = self._norm(ops.add(x, drop(attn_out)), f"{prefix}.attention.norm")

            flat = ops.reshape(x, (batch * seq, h))
            inner = ops.gelu(self._dense(flat, f"{prefix}.ffn.inner"))
            outer = self._dense(inner, f"{prefix}.ffn.outer")
            outer = ops.reshape(outer, (batch, seq, h))
            x = self._norm(ops.add(x, drop(outer)), f"{prefix}.ffn.norm")

            cls_vectors.append(ops.select_position(x, 0))

        return LayerActivation(
            cls_vectors=cls_vectors, attentions=attentions, sequence_mask=mask
        )
