"""Offline, query-independent construction and persistence of KV caches.

A store directory holds the cache of one shared prefix plus one file per
document, all built against one model. Document caches are computed on top
of the prefix cache and stored with keys rotated at their canonical
positions [prefix_len, prefix_len + passage_len); any other layout is
reached later by re-positioning. Entries are valid only for the exact
(model fingerprint, prefix hash) pair recorded in the manifest, which makes
invalidation after a model or prefix change a directory-level check.

Cache file layout (little-endian):
    magic "CFKV" | version u32 | model_fingerprint 16s | prefix_hash 16s |
    num_layers u32 | num_heads u32 | head_dim u32 | token_count u32 |
    rope_base f64 | pairing u8 |
    per layer: keys then values, row-major float32 (heads, tokens, head_dim) |
    crc32 of the tensor body, u32
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import PREFIX_SEGMENT, CostMeter, KVCache, LayerCache, Model
from .rope import PAIRING_INTERLEAVED
from .tokenizer import PAD_ID, ByteTokenizer

CACHE_MAGIC = b"CFKV"
CACHE_VERSION = 1
MANIFEST_NAME = "manifest.json"

_HEADER_STRUCT = struct.Struct("<4sI16s16sIIIIdB")


class StaleCacheError(RuntimeError):
    """A cache entry was built against a different model or prefix."""


class CacheFormatError(RuntimeError):
    """A cache file is malformed."""


class MissingEntryError(KeyError):
    """No cache entry exists for the requested document."""


@dataclass
class PrefixCacheEntry:
    """The shared prefix cache, occupying positions [0, prefix_len)."""

    prefix_hash: str
    model_fingerprint: str
    tokens: list[int]
    kv: KVCache

    @property
    def token_count(self) -> int:
        return len(self.tokens)


@dataclass
class CacheStoreEntry:
    """One document's cache slice, keys at canonical positions.

    token_count is the fixed passage length; valid_len counts the real
    tokens before padding starts (padding keys are never attended).
    """

    doc_id: str
    model_fingerprint: str
    prefix_hash: str
    prefix_len: int
    token_count: int
    valid_len: int
    kv: KVCache


def hash_tokens(tokens) -> str:
    ids = np.asarray(tokens, dtype=np.int64)
    return hashlib.sha256(ids.astype("<i4").tobytes()).hexdigest()[:16]


def passage_tokens(tokenizer: ByteTokenizer, title: str, text: str, length: int):
    """Tokenize a document into a fixed-length passage.

    Truncates past `length`; shorter passages are padded with PAD tokens.
    Returns (tokens of exactly `length`, count of real tokens).
    """
    body = f"{title}\n{text}" if title else text
    ids = tokenizer.encode(body)[:length]
    valid = len(ids)
    if valid == 0:
        raise ValueError("document produced no tokens")
    ids = ids + [PAD_ID] * (length - valid)
    return ids, valid


def build_prefix_cache(model: Model, prefix_tokens, *, meter: CostMeter | None = None) -> PrefixCacheEntry:
    """Forward the shared prefix once; its cache starts at position 0."""
    tokens = [int(t) for t in prefix_tokens]
    if not tokens:
        raise ValueError("prefix must be non-empty")
    cache = model.new_cache()
    model.forward(
        cache,
        tokens,
        positions=np.arange(len(tokens)),
        segments=np.full(len(tokens), PREFIX_SEGMENT),
        meter=meter,
    )
    return PrefixCacheEntry(
        prefix_hash=hash_tokens(tokens),
        model_fingerprint=model.fingerprint,
        tokens=tokens,
        kv=cache,
    )


def build_document_cache(
    model: Model,
    prefix: PrefixCacheEntry,
    doc_tokens,
    *,
    doc_id: str = "",
    valid_len: int | None = None,
    meter: CostMeter | None = None,
) -> CacheStoreEntry:
    """Forward one fixed-length passage on top of the prefix cache.

    The stored slice covers only the document tokens, rotated at canonical
    positions [prefix_len, prefix_len + len(doc_tokens)). Independent of any
    query and of every other document, so builds can run in any order.
    """
    if prefix.model_fingerprint != model.fingerprint:
        raise StaleCacheError("prefix cache was built with a different model")
    tokens = [int(t) for t in doc_tokens]
    if not tokens:
        raise ValueError("document tokens must be non-empty")
    if valid_len is None:
        valid_len = len(tokens)
        while valid_len and tokens[valid_len - 1] == PAD_ID:
            valid_len -= 1
    if not 0 < valid_len <= len(tokens):
        raise ValueError(f"valid_len {valid_len} out of range for {len(tokens)} tokens")

    p = prefix.token_count
    cache = prefix.kv.copy()
    visible = np.arange(len(tokens)) < valid_len
    model.forward(
        cache,
        tokens,
        positions=np.arange(p, p + len(tokens)),
        segments=np.zeros(len(tokens), dtype=np.int64),
        visible=visible,
        meter=meter,
    )
    return CacheStoreEntry(
        doc_id=doc_id,
        model_fingerprint=model.fingerprint,
        prefix_hash=prefix.prefix_hash,
        prefix_len=p,
        token_count=len(tokens),
        valid_len=valid_len,
        kv=cache.slice(p, p + len(tokens)),
    )


def _write_kv_file(path: Path, *, model_fingerprint: str, prefix_hash: str, kv: KVCache, rope_base: float) -> int:
    layers = kv.layers
    num_layers = len(layers)
    num_heads, token_count, head_dim = layers[0].keys.shape
    body = bytearray()
    for layer in layers:
        body += np.ascontiguousarray(layer.keys, dtype=np.float32).tobytes()
        body += np.ascontiguousarray(layer.values, dtype=np.float32).tobytes()
    header = _HEADER_STRUCT.pack(
        CACHE_MAGIC,
        CACHE_VERSION,
        model_fingerprint.encode("ascii"),
        prefix_hash.encode("ascii"),
        num_layers,
        num_heads,
        head_dim,
        token_count,
        rope_base,
        PAIRING_INTERLEAVED,
    )
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF))
    os.replace(tmp, path)
    return _HEADER_STRUCT.size + len(body) + 4


def _read_kv_file(path: Path):
    raw = path.read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: bad magic {raw[:4]!r}")
    (magic, version, fp, ph, num_layers, num_heads, head_dim, token_count, rope_base, pairing
     ) = _HEADER_STRUCT.unpack_from(raw, 0)
    if version != CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported cache version {version}")
    if pairing != PAIRING_INTERLEAVED:
        raise CacheFormatError(f"{path}: unknown pairing convention {pairing}")
    body_len = len(raw) - _HEADER_STRUCT.size - 4
    expected = num_layers * 2 * num_heads * token_count * head_dim * 4
    if body_len != expected:
        raise CacheFormatError(f"{path}: body length {body_len}, expected {expected}")
    body = raw[_HEADER_STRUCT.size:_HEADER_STRUCT.size + body_len]
    (crc,) = struct.unpack_from("<I", raw, _HEADER_STRUCT.size + body_len)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CacheFormatError(f"{path}: checksum mismatch")
    layers = []
    cursor = 0
    n = num_heads * token_count * head_dim
    for _ in range(num_layers):
        keys = np.frombuffer(body, dtype="<f4", count=n, offset=cursor).reshape(
            num_heads, token_count, head_dim).copy()
        cursor += 4 * n
        values = np.frombuffer(body, dtype="<f4", count=n, offset=cursor).reshape(
            num_heads, token_count, head_dim).copy()
        cursor += 4 * n
        layers.append((keys, values))
    header = {
        "model_fingerprint": fp.decode("ascii"),
        "prefix_hash": ph.decode("ascii"),
        "num_layers": num_layers,
        "num_heads": num_heads,
        "head_dim": head_dim,
        "token_count": token_count,
        "rope_base": rope_base,
    }
    return header, layers


def _entry_filename(doc_id: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9_.-]", "_", doc_id)[:40]
    suffix = hashlib.sha1(doc_id.encode("utf-8")).hexdigest()[:8]
    return f"{safe}-{suffix}.cfkv"


class CacheStore:
    """On-disk store of the prefix cache and per-document cache entries.

    Bound to one model: every load checks the stored fingerprint and prefix
    hash and refuses mismatches rather than serving stale tensors. Writes
    go through a temp file and an atomic rename; concurrent readers are fine.
    """

    def __init__(self, root, model: Model):
        self.root = Path(root)
        self.model = model

    # -- manifest ---------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    def exists(self) -> bool:
        return self.manifest_path.exists()

    def read_manifest(self) -> dict:
        if not self.exists():
            raise MissingEntryError(f"no cache store at {self.root}")
        with open(self.manifest_path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    def _write_manifest(self, manifest: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        os.replace(tmp, self.manifest_path)

    def verify(self, manifest: dict | None = None) -> dict:
        manifest = manifest or self.read_manifest()
        if manifest.get("model_fingerprint") != self.model.fingerprint:
            raise StaleCacheError(
                f"store at {self.root} was built with model "
                f"{manifest.get('model_fingerprint')}, not {self.model.fingerprint}"
            )
        return manifest

    def __len__(self) -> int:
        return len(self.read_manifest()["docs"])

    def doc_ids(self) -> list[str]:
        return sorted(self.read_manifest()["docs"])

    @property
    def passage_len(self) -> int:
        return int(self.read_manifest()["passage_len"])

    # -- building ---------------------------------------------------------

    def build(self, prefix_tokens, passages, *, passage_len: int = 64, force: bool = False,
              meter: CostMeter | None = None) -> dict:
        """Build the prefix cache plus one entry per (doc_id, title, text).

        Refuses to overwrite a store built for a different model or prefix
        unless force is set. Returns {"documents": n, "bytes": total}.
        """
        prefix_entry = build_prefix_cache(self.model, prefix_tokens, meter=meter)
        if self.exists():
            old = self.read_manifest()
            stale = (
                old.get("model_fingerprint") != self.model.fingerprint
                or old.get("prefix_hash") != prefix_entry.prefix_hash
            )
            if stale and not force:
                raise StaleCacheError(
                    f"store at {self.root} belongs to another model/prefix; "
                    "pass force to rebuild"
                )
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "docs").mkdir(exist_ok=True)

        tokenizer = ByteTokenizer()
        total_bytes = self.save_prefix(prefix_entry)
        docs: dict[str, dict] = {}
        for doc_id, title, text in passages:
            if doc_id in docs:
                raise ValueError(f"duplicate document id {doc_id!r}")
            tokens, valid = passage_tokens(tokenizer, title, text, passage_len)
            entry = build_document_cache(
                self.model, prefix_entry, tokens, doc_id=doc_id, valid_len=valid, meter=meter
            )
            total_bytes += self.save_entry(entry, _manifest=False)
            docs[doc_id] = {"file": _entry_filename(doc_id), "valid_len": valid}
        manifest = {
            "format": CACHE_VERSION,
            "model_fingerprint": self.model.fingerprint,
            "prefix_hash": prefix_entry.prefix_hash,
            "prefix_tokens": prefix_entry.tokens,
            "prefix_len": prefix_entry.token_count,
            "passage_len": passage_len,
            "docs": docs,
        }
        self._write_manifest(manifest)
        return {"documents": len(docs), "bytes": total_bytes}

    # -- persistence ------------------------------------------------------

    def save_prefix(self, entry: PrefixCacheEntry) -> int:
        if entry.model_fingerprint != self.model.fingerprint:
            raise StaleCacheError("prefix entry does not belong to this store's model")
        self.root.mkdir(parents=True, exist_ok=True)
        return _write_kv_file(
            self.root / "prefix.cfkv",
            model_fingerprint=entry.model_fingerprint,
            prefix_hash=entry.prefix_hash,
            kv=entry.kv,
            rope_base=self.model.config.rope.base,
        )

    def save_entry(self, entry: CacheStoreEntry, _manifest: bool = True) -> int:
        if entry.model_fingerprint != self.model.fingerprint:
            raise StaleCacheError("entry does not belong to this store's model")
        (self.root / "docs").mkdir(parents=True, exist_ok=True)
        size = _write_kv_file(
            self.root / "docs" / _entry_filename(entry.doc_id),
            model_fingerprint=entry.model_fingerprint,
            prefix_hash=entry.prefix_hash,
            kv=entry.kv,
            rope_base=self.model.config.rope.base,
        )
        if _manifest:
            manifest = self.read_manifest()
            manifest["docs"][entry.doc_id] = {
                "file": _entry_filename(entry.doc_id),
                "valid_len": entry.valid_len,
            }
            self._write_manifest(manifest)
        return size

    def load_prefix(self) -> PrefixCacheEntry:
        manifest = self.verify()
        header, layers = _read_kv_file(self.root / "prefix.cfkv")
        self._check_header(header, manifest["prefix_hash"])
        count = header["token_count"]
        kv = KVCache([
            LayerCache(
                keys=keys,
                values=values,
                position_ids=np.arange(count, dtype=np.int64),
                segment_ids=np.full(count, PREFIX_SEGMENT, dtype=np.int64),
                visible=np.ones(count, dtype=bool),
            )
            for keys, values in layers
        ])
        return PrefixCacheEntry(
            prefix_hash=manifest["prefix_hash"],
            model_fingerprint=header["model_fingerprint"],
            tokens=[int(t) for t in manifest["prefix_tokens"]],
            kv=kv,
        )

    def load_entry(self, doc_id: str) -> CacheStoreEntry:
        manifest = self.verify()
        info = manifest["docs"].get(doc_id)
        if info is None:
            raise MissingEntryError(f"no cache entry for document {doc_id!r}")
        header, layers = _read_kv_file(self.root / "docs" / info["file"])
        self._check_header(header, manifest["prefix_hash"])
        count = header["token_count"]
        prefix_len = int(manifest["prefix_len"])
        valid = int(info["valid_len"])
        kv = KVCache([
            LayerCache(
                keys=keys,
                values=values,
                position_ids=np.arange(prefix_len, prefix_len + count, dtype=np.int64),
                segment_ids=np.zeros(count, dtype=np.int64),
                visible=np.arange(count) < valid,
            )
            for keys, values in layers
        ])
        return CacheStoreEntry(
            doc_id=doc_id,
            model_fingerprint=header["model_fingerprint"],
            prefix_hash=header["prefix_hash"],
            prefix_len=prefix_len,
            token_count=count,
            valid_len=valid,
            kv=kv,
        )

    def _check_header(self, header: dict, prefix_hash: str) -> None:
        if header["model_fingerprint"] != self.model.fingerprint:
            raise StaleCacheError(
                f"cache file fingerprint {header['model_fingerprint']} does not match "
                f"model {self.model.fingerprint}"
            )
        if header["prefix_hash"] != prefix_hash:
            raise StaleCacheError("cache file prefix hash does not match the store manifest")
        cfg = self.model.config
        if (header["num_layers"], header["num_heads"], header["head_dim"]) != (
            cfg.num_layers, cfg.num_heads, cfg.head_dim
        ):
            raise StaleCacheError("cache file dimensions do not match the model config")
