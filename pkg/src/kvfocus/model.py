"""Minimal decoder-only transformer with explicit, repositionable KV caches.

Blocks are pre-norm with RMS normalization, rotary embeddings on queries and
keys, and a two-layer feed-forward (4x expansion, SiLU), no biases. Weights
are float32: that is the on-disk format and the form the model fingerprint
hashes. All activations and matrix products run in float64, and keys/values
are rounded to float32 at the moment they enter a cache. Rounding at the
cache boundary makes monolithic, split, and store-loaded forward paths agree
bit-for-bit on cached tensors, so greedy decoding is reproducible no matter
how the context was assembled.

Caches carry explicit per-token position ids, segment ids tagging the source
of each token (prefix, a document, or the query), and a visibility flag so
padding keys can be masked out of attention.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .rope import PAIRING_INTERLEAVED, RopeConfig, rotate
from .tokenizer import VOCAB_SIZE

PREFIX_SEGMENT = -1
QUERY_SEGMENT = -2

FFN_MULT = 4
NORM_EPS = 1e-5

WEIGHT_MAGIC = b"CFWT"
WEIGHT_VERSION = 1

_CONFIG_STRUCT = struct.Struct("<IIIIIdB")  # layers, heads, head_dim, vocab, max_position, base, pairing


class CapacityError(RuntimeError):
    """The cache would exceed the configured hard token limit."""


class WeightFormatError(RuntimeError):
    """A weight file is malformed or does not match this format version."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    head_dim: int
    rope: RopeConfig
    vocab_size: int = VOCAB_SIZE
    max_cache_tokens: int = 16384

    def __post_init__(self):
        if self.num_layers < 1 or self.num_heads < 1:
            raise ValueError("num_layers and num_heads must be positive")
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ValueError("head_dim must be a positive even integer")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if self.rope.head_dim != self.head_dim:
            raise ValueError(
                f"rope.head_dim {self.rope.head_dim} does not match head_dim {self.head_dim}"
            )

    @property
    def hidden_dim(self) -> int:
        return self.num_heads * self.head_dim

    def packed(self) -> bytes:
        """Fixed binary encoding used in file headers and the fingerprint."""
        return _CONFIG_STRUCT.pack(
            self.num_layers,
            self.num_heads,
            self.head_dim,
            self.vocab_size,
            self.rope.max_position,
            self.rope.base,
            PAIRING_INTERLEAVED,
        )


def make_config(
    num_layers: int = 8,
    num_heads: int = 4,
    head_dim: int = 32,
    max_position: int = 512,
    rope_base: float = 10000.0,
    vocab_size: int = VOCAB_SIZE,
    max_cache_tokens: int = 16384,
) -> ModelConfig:
    rope = RopeConfig(head_dim=head_dim, base=rope_base, max_position=max_position)
    return ModelConfig(num_layers, num_heads, head_dim, rope, vocab_size, max_cache_tokens)


@dataclass
class LayerCache:
    """Cached keys/values for one layer, with per-token bookkeeping.

    keys/values: (num_heads, tokens, head_dim) float32; keys are rotated at
    position_ids. visible=False marks padding keys that attention must skip.
    """

    keys: np.ndarray
    values: np.ndarray
    position_ids: np.ndarray
    segment_ids: np.ndarray
    visible: np.ndarray

    @classmethod
    def empty(cls, num_heads: int, head_dim: int) -> "LayerCache":
        return cls(
            keys=np.zeros((num_heads, 0, head_dim), dtype=np.float32),
            values=np.zeros((num_heads, 0, head_dim), dtype=np.float32),
            position_ids=np.zeros(0, dtype=np.int64),
            segment_ids=np.zeros(0, dtype=np.int64),
            visible=np.zeros(0, dtype=bool),
        )

    @property
    def token_count(self) -> int:
        return self.keys.shape[1]

    def append(self, keys, values, position_ids, segment_ids, visible) -> None:
        self.keys = np.concatenate([self.keys, keys], axis=1)
        self.values = np.concatenate([self.values, values], axis=1)
        self.position_ids = np.concatenate([self.position_ids, np.asarray(position_ids, np.int64)])
        self.segment_ids = np.concatenate([self.segment_ids, np.asarray(segment_ids, np.int64)])
        self.visible = np.concatenate([self.visible, np.asarray(visible, bool)])

    def slice(self, start: int, stop: int) -> "LayerCache":
        return LayerCache(
            keys=self.keys[:, start:stop].copy(),
            values=self.values[:, start:stop].copy(),
            position_ids=self.position_ids[start:stop].copy(),
            segment_ids=self.segment_ids[start:stop].copy(),
            visible=self.visible[start:stop].copy(),
        )

    def copy(self) -> "LayerCache":
        return self.slice(0, self.token_count)


@dataclass
class KVCache:
    """One LayerCache per model layer; all layers hold the same token count."""

    layers: list[LayerCache]

    @classmethod
    def empty(cls, config: ModelConfig) -> "KVCache":
        return cls([LayerCache.empty(config.num_heads, config.head_dim) for _ in range(config.num_layers)])

    @property
    def token_count(self) -> int:
        counts = {layer.token_count for layer in self.layers}
        if len(counts) > 1:
            raise ValueError(f"layers disagree on token count: {sorted(counts)}")
        return counts.pop() if counts else 0

    def next_position(self) -> int:
        if self.token_count == 0:
            return 0
        return int(self.layers[0].position_ids.max()) + 1

    def slice(self, start: int, stop: int) -> "KVCache":
        return KVCache([layer.slice(start, stop) for layer in self.layers])

    def copy(self) -> "KVCache":
        return KVCache([layer.copy() for layer in self.layers])


@dataclass
class AttentionMap:
    """Softmax weights for one layer: (num_heads, query_rows, key_cols).

    col_segments tags every key column with the segment id of its source so
    per-document attention mass can be aggregated.
    """

    weights: np.ndarray
    col_segments: np.ndarray


class CostMeter:
    """Deterministic multiply-accumulate counters for attention products.

    Counts the query-key and weight-value products behind unmasked attention
    entries, the terms whose growth tracks context length. Masked entries and
    dense projections are excluded: the former so chunked and monolithic
    prefills count identically, the latter because they are the same for
    every context layout. That keeps the counters a clean scaling signal.
    """

    __slots__ = ("prefill_mults", "decode_mults", "phase")

    def __init__(self) -> None:
        self.prefill_mults = 0
        self.decode_mults = 0
        self.phase = "prefill"

    def add(self, count: int) -> None:
        if self.phase == "decode":
            self.decode_mults += int(count)
        else:
            self.prefill_mults += int(count)


def attention(queries, keys, values, causal_mask, *, segments=None, meter=None, collect_map=True):
    """Scaled dot-product attention over explicit key/value arrays.

    queries: (heads, rows, head_dim), already rotated at their positions.
    keys/values: (heads, cols, head_dim). causal_mask: (rows, cols) bool,
    True where a row may attend. Masked weights are exactly zero. Returns
    (outputs, AttentionMap or None); outputs are float64.
    """
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if k.shape != v.shape:
        raise ValueError(f"key shape {k.shape} != value shape {v.shape}")
    if q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ValueError(f"query shape {q.shape} incompatible with key shape {k.shape}")
    mask = np.asarray(causal_mask, dtype=bool)
    if mask.shape != (q.shape[1], k.shape[1]):
        raise ValueError(f"mask shape {mask.shape} != (rows, cols) {(q.shape[1], k.shape[1])}")
    if not mask.any(axis=1).all():
        raise ValueError("every query row must attend to at least one key")

    heads, rows, dim = q.shape
    cols = k.shape[1]
    scores = np.matmul(q, k.transpose(0, 2, 1)) / np.sqrt(float(dim))
    scores = np.where(mask[None, :, :], scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    if meter is not None:
        meter.add(2 * heads * dim * int(mask.sum()))
    outputs = np.matmul(weights, v)

    amap = None
    if collect_map:
        if segments is None:
            segments = np.full(cols, QUERY_SEGMENT, dtype=np.int64)
        amap = AttentionMap(weights.astype(np.float32), np.asarray(segments, np.int64))
    return outputs, amap


def _rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + NORM_EPS)
    return x / scale * gain


def _silu(x: np.ndarray) -> np.ndarray:
    return x * (0.5 * (1.0 + np.tanh(0.5 * x)))


def weight_names(config: ModelConfig) -> list[str]:
    """Canonical tensor order: the file layout and the fingerprint order."""
    names = ["embedding"]
    for i in range(config.num_layers):
        p = f"layers.{i}."
        names += [p + "attn_norm", p + "wq", p + "wk", p + "wv", p + "wo",
                  p + "ffn_norm", p + "w1", p + "w2"]
    names += ["final_norm", "lm_head"]
    return names


def _weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    h = config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {"embedding": (config.vocab_size, h)}
    for i in range(config.num_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (h,)
        shapes[p + "wq"] = (h, h)
        shapes[p + "wk"] = (h, h)
        shapes[p + "wv"] = (h, h)
        shapes[p + "wo"] = (h, h)
        shapes[p + "ffn_norm"] = (h,)
        shapes[p + "w1"] = (h, FFN_MULT * h)
        shapes[p + "w2"] = (FFN_MULT * h, h)
    shapes["final_norm"] = (h,)
    shapes["lm_head"] = (h, config.vocab_size)
    return shapes


def fingerprint(config: ModelConfig, weights: dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    digest.update(config.packed())
    for name in weight_names(config):
        digest.update(np.ascontiguousarray(weights[name]).tobytes())
    return digest.hexdigest()[:16]


class Model:
    """Decoder-only transformer; immutable and shareable after construction.

    Each inference session owns its KVCache exclusively; independent sessions
    may run concurrently against one model instance.
    """

    def __init__(self, config: ModelConfig, weights: dict[str, np.ndarray]):
        shapes = _weight_shapes(config)
        for name in weight_names(config):
            if name not in weights:
                raise ValueError(f"missing weight tensor {name}")
            arr = weights[name]
            if arr.shape != shapes[name]:
                raise ValueError(f"{name}: expected shape {shapes[name]}, got {arr.shape}")
            if arr.dtype != np.float32:
                raise ValueError(f"{name}: weights must be float32, got {arr.dtype}")
        self.config = config
        self.weights = weights
        self._w64 = {name: weights[name].astype(np.float64) for name in weight_names(config)}
        self._fingerprint = fingerprint(config, weights)

    @property
    def fingerprint(self) -> str:
        return self._fingerprint

    @classmethod
    def from_seed(cls, config: ModelConfig, seed: int) -> "Model":
        """Deterministic random weights; norm gains are ones and not drawn.

        Draw order (embedding, per-layer projections, lm_head) is fixed so a
        seed is a complete, portable weight specification.
        """
        rng = np.random.default_rng(seed)
        h = config.hidden_dim

        def draw(shape):
            scale = np.float32(shape[0] ** -0.5)
            return rng.standard_normal(shape, dtype=np.float32) * scale

        w: dict[str, np.ndarray] = {}
        w["embedding"] = rng.standard_normal((config.vocab_size, h), dtype=np.float32)
        for i in range(config.num_layers):
            p = f"layers.{i}."
            w[p + "attn_norm"] = np.ones(h, dtype=np.float32)
            w[p + "wq"] = draw((h, h))
            w[p + "wk"] = draw((h, h))
            w[p + "wv"] = draw((h, h))
            w[p + "wo"] = draw((h, h))
            w[p + "ffn_norm"] = np.ones(h, dtype=np.float32)
            w[p + "w1"] = draw((h, FFN_MULT * h))
            w[p + "w2"] = draw((FFN_MULT * h, h))
        w["final_norm"] = np.ones(h, dtype=np.float32)
        w["lm_head"] = draw((h, config.vocab_size))
        return cls(config, w)

    @classmethod
    def from_file(cls, path, max_cache_tokens: int = 16384) -> "Model":
        config, weights = load_weights(path, max_cache_tokens=max_cache_tokens)
        return cls(config, weights)

    def save_weights(self, path) -> None:
        save_weights(self.config, self.weights, path)

    def new_cache(self) -> KVCache:
        return KVCache.empty(self.config)

    def embed(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError("token id out of vocabulary range")
        return self._w64["embedding"][ids]

    def _split_heads(self, x: np.ndarray) -> np.ndarray:
        t = x.shape[0]
        return x.reshape(t, self.config.num_heads, self.config.head_dim).transpose(1, 0, 2)

    def _merge_heads(self, x: np.ndarray) -> np.ndarray:
        heads, t, dim = x.shape
        return x.transpose(1, 0, 2).reshape(t, heads * dim)

    def forward_layer(
        self,
        layer_index: int,
        hidden: np.ndarray,
        layer_cache: LayerCache | None,
        positions,
        *,
        segments=None,
        visible=None,
        meter: CostMeter | None = None,
        collect_map: bool = False,
        append: bool = True,
    ):
        """One transformer block over `hidden` (tokens, hidden_dim) float64.

        The new tokens attend to every visible cached key plus themselves
        under a causal mask, and their keys/values (float32, rotated at
        `positions`) are appended to layer_cache unless append=False.
        Returns (new_hidden, new_keys, new_values, attention_map_or_None).
        """
        cfg = self.config
        t = hidden.shape[0]
        positions = np.asarray(positions, dtype=np.int64)
        segments = (
            np.full(t, QUERY_SEGMENT, dtype=np.int64) if segments is None
            else np.asarray(segments, dtype=np.int64)
        )
        visible = np.ones(t, dtype=bool) if visible is None else np.asarray(visible, dtype=bool)
        w = self._w64
        p = f"layers.{layer_index}."

        x = _rms_norm(hidden, w[p + "attn_norm"])
        q = rotate(cfg.rope, self._split_heads(x @ w[p + "wq"]), positions)
        k32 = rotate(cfg.rope, self._split_heads(x @ w[p + "wk"]), positions).astype(np.float32)
        v32 = self._split_heads(x @ w[p + "wv"]).astype(np.float32)

        ctx = layer_cache.token_count if layer_cache is not None else 0
        if ctx:
            keys = np.concatenate([layer_cache.keys, k32], axis=1)
            values = np.concatenate([layer_cache.values, v32], axis=1)
            col_segments = np.concatenate([layer_cache.segment_ids, segments])
        else:
            keys, values, col_segments = k32, v32, segments

        mask = np.empty((t, ctx + t), dtype=bool)
        if ctx:
            mask[:, :ctx] = layer_cache.visible[None, :]
        # causal within the new block; invisible new keys stay self-visible
        mask[:, ctx:] = np.tril(np.ones((t, t), dtype=bool)) & (
            visible[None, :] | np.eye(t, dtype=bool)
        )

        out, amap = attention(
            q, keys, values, mask, segments=col_segments, meter=meter, collect_map=collect_map
        )
        hidden = hidden + self._merge_heads(out) @ w[p + "wo"]
        x2 = _rms_norm(hidden, w[p + "ffn_norm"])
        hidden = hidden + _silu(x2 @ w[p + "w1"]) @ w[p + "w2"]

        if append:
            if layer_cache is None:
                raise ValueError("append=True requires a layer cache")
            layer_cache.append(k32, v32, positions, segments, visible)
        return hidden, k32, v32, amap

    def forward(
        self,
        cache: KVCache,
        tokens,
        *,
        positions=None,
        segments=None,
        visible=None,
        meter: CostMeter | None = None,
        collect_maps: bool = False,
    ):
        """Run tokens through every layer, extending the cache in place.

        positions default to the next sequential positions after the highest
        one already cached. Returns final hidden states (tokens, hidden_dim),
        plus per-layer attention maps when collect_maps is set.
        """
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("tokens must be a non-empty 1-D sequence")
        if positions is None:
            start = cache.next_position()
            positions = np.arange(start, start + ids.size, dtype=np.int64)
        else:
            positions = np.asarray(positions, dtype=np.int64)
        existing = cache.layers[0].position_ids
        if existing.size and np.intersect1d(existing, positions).size:
            warnings.warn(
                "new tokens share positions with cached tokens (parallel windows "
                "legitimately do this)",
                stacklevel=2,
            )
        hidden = self.embed(ids)
        maps: list[AttentionMap] = []
        for layer_index in range(self.config.num_layers):
            hidden, _, _, amap = self.forward_layer(
                layer_index,
                hidden,
                cache.layers[layer_index],
                positions,
                segments=segments,
                visible=visible,
                meter=meter,
                collect_map=collect_maps,
                append=True,
            )
            if collect_maps:
                maps.append(amap)
        if collect_maps:
            return hidden, maps
        return hidden

    def logits(self, hidden: np.ndarray) -> np.ndarray:
        """Project hidden rows (n, hidden_dim) to vocabulary logits."""
        return _rms_norm(hidden, self._w64["final_norm"]) @ self._w64["lm_head"]

    def prefill(
        self,
        cache: KVCache,
        tokens,
        *,
        positions=None,
        segments=None,
        visible=None,
        meter: CostMeter | None = None,
        chunk_size: int = 256,
    ):
        """Process a full input sequence, then emit the first greedy token.

        Long inputs are run in chunks, which is exactly equivalent to one
        pass because cached keys/values round to float32 either way.
        """
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("prefill requires a non-empty token sequence")
        total = cache.token_count + ids.size
        if total > self.config.max_cache_tokens:
            raise CapacityError(
                f"cache would hold {total} tokens, over the limit of "
                f"{self.config.max_cache_tokens}"
            )
        if positions is None:
            start = cache.next_position()
            positions = np.arange(start, start + ids.size, dtype=np.int64)
        else:
            positions = np.asarray(positions, dtype=np.int64)
        segments = (
            np.full(ids.size, QUERY_SEGMENT, dtype=np.int64) if segments is None
            else np.asarray(segments, dtype=np.int64)
        )
        visible = np.ones(ids.size, dtype=bool) if visible is None else np.asarray(visible, bool)

        hidden = None
        for lo in range(0, ids.size, chunk_size):
            hi = min(lo + chunk_size, ids.size)
            hidden = self.forward(
                cache,
                ids[lo:hi],
                positions=positions[lo:hi],
                segments=segments[lo:hi],
                visible=visible[lo:hi],
                meter=meter,
            )
        first_token = int(np.argmax(self.logits(hidden[-1:])[0]))
        return first_token, cache

    def decode(
        self,
        cache: KVCache,
        prev_token: int,
        max_tokens: int,
        *,
        stop_token: int | None = None,
        meter: CostMeter | None = None,
    ) -> list[int]:
        """Greedy decoding loop: feed the previous token, take the argmax.

        New tokens sit immediately after the highest occupied position.
        Returns up to max_tokens generated tokens (prev_token not included);
        stops early after emitting stop_token.
        """
        out: list[int] = []
        token = int(prev_token)
        for _ in range(max_tokens):
            hidden = self.forward(cache, [token], meter=meter)
            token = int(np.argmax(self.logits(hidden[-1:])[0]))
            out.append(token)
            if stop_token is not None and token == stop_token:
                break
        return out


def save_weights(config: ModelConfig, weights: dict[str, np.ndarray], path) -> None:
    """Write the weight file: header, float32 tensors in canonical order, crc."""
    body = bytearray()
    for name in weight_names(config):
        body += np.ascontiguousarray(weights[name]).tobytes()
    header = WEIGHT_MAGIC + struct.pack("<I", WEIGHT_VERSION) + config.packed()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF))


def load_weights(path, max_cache_tokens: int = 16384):
    """Read a weight file back into (ModelConfig, weights)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != WEIGHT_MAGIC:
        raise WeightFormatError(f"bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != WEIGHT_VERSION:
        raise WeightFormatError(f"unsupported weight format version {version}")
    offset = 8
    layers, heads, head_dim, vocab, max_position, base, pairing = _CONFIG_STRUCT.unpack_from(raw, offset)
    offset += _CONFIG_STRUCT.size
    if pairing != PAIRING_INTERLEAVED:
        raise WeightFormatError(f"unknown pairing convention {pairing}")
    config = make_config(
        num_layers=layers,
        num_heads=heads,
        head_dim=head_dim,
        max_position=max_position,
        rope_base=base,
        vocab_size=vocab,
        max_cache_tokens=max_cache_tokens,
    )
    body_len = len(raw) - offset - 4
    body = raw[offset:offset + body_len]
    (crc,) = struct.unpack_from("<I", raw, offset + body_len)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise WeightFormatError("weight file checksum mismatch")
    weights: dict[str, np.ndarray] = {}
    cursor = 0
    for name, shape in _weight_shapes(config).items():
        n = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=cursor).reshape(shape)
        weights[name] = arr.copy()
        cursor += 4 * n
    if cursor != body_len:
        raise WeightFormatError("weight file length does not match its config")
    return config, weights
