"""Lexical BM25 retrieval over the passage corpus.

Tokenization is NFC-normalize, lowercase, split on non-alphanumerics; no
stemming or stopwords, so rankings are reproducible across platforms. Titles
are indexed together with the text. Scoring uses k1=0.9, b=0.4 and

    idf(t)   = ln(1 + (N - df + 0.5) / (df + 0.5))
    score(d) = sum over unique query terms t of
               qtf(t) * idf(t) * (tf * (k1 + 1)) / (tf + k1 * (1 - b + b * dl / avgdl))

with unique terms visited in first-occurrence order. That order, and the
(-score, doc_id) ranking with ascending-id tie-break, pin the results down
to the bit.

Index file layout (little-endian): magic "CFIX" | version u32 | doc_count u32
| avgdl f64 | per doc: id (u16 len + utf-8), length u32 | term_count u32 |
per term: term (u16 len + utf-8), postings count u32, (doc_index u32, tf u32)*
| crc32 u32. Documents are sorted by id at build time so postings are sorted
by doc id too.
"""

from __future__ import annotations

import math
import os
import re
import struct
import unicodedata
import zlib
from dataclasses import dataclass
from pathlib import Path

K1 = 0.9
B = 0.4

INDEX_MAGIC = b"CFIX"
INDEX_VERSION = 1

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


class IndexFormatError(RuntimeError):
    """An index file is malformed."""


def tokenize_text(text: str) -> list[str]:
    return _WORD_RE.findall(unicodedata.normalize("NFC", text).lower())


@dataclass
class InvertedIndex:
    doc_ids: list[str]                      # sorted ascending
    doc_lengths: list[int]                  # tokens per document
    postings: dict[str, list[tuple[int, int]]]  # term -> [(doc_index, tf)], ascending index

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    @property
    def avg_doc_length(self) -> float:
        if not self.doc_lengths:
            return 0.0
        return sum(self.doc_lengths) / len(self.doc_lengths)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        if df == 0:
            return 0.0
        n = self.doc_count
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))


def index_corpus(corpus) -> InvertedIndex:
    """Build the index from (doc_id, title, text) records.

    Duplicate ids are rejected. Documents are sorted by id before indexing
    so the structure, and its serialized form, do not depend on input order.
    """
    docs: dict[str, list[str]] = {}
    for doc_id, title, text in corpus:
        if doc_id in docs:
            raise ValueError(f"duplicate document id {doc_id!r}")
        docs[doc_id] = tokenize_text(f"{title} {text}" if title else text)

    doc_ids = sorted(docs)
    doc_lengths = [len(docs[d]) for d in doc_ids]
    postings: dict[str, list[tuple[int, int]]] = {}
    for index, doc_id in enumerate(doc_ids):
        counts: dict[str, int] = {}
        for token in docs[doc_id]:
            counts[token] = counts.get(token, 0) + 1
        for term, tf in counts.items():
            postings.setdefault(term, []).append((index, tf))
    return InvertedIndex(doc_ids=doc_ids, doc_lengths=doc_lengths,
                         postings={t: postings[t] for t in sorted(postings)})


def search(index: InvertedIndex, query_text: str, k: int) -> list[tuple[str, float]]:
    """Top-k documents by BM25, descending score, ties by ascending doc id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    tokens = tokenize_text(query_text)
    query_terms: dict[str, int] = {}
    for token in tokens:
        query_terms[token] = query_terms.get(token, 0) + 1

    avgdl = index.avg_doc_length
    scores: dict[int, float] = {}
    for term, qtf in query_terms.items():
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for doc_index, tf in plist:
            dl = index.doc_lengths[doc_index]
            contribution = qtf * idf * (tf * (K1 + 1.0)) / (tf + K1 * (1.0 - B + B * dl / avgdl))
            scores[doc_index] = scores.get(doc_index, 0.0) + contribution
    ranked = sorted(scores.items(), key=lambda item: (-item[1], index.doc_ids[item[0]]))
    return [(index.doc_ids[i], s) for i, s in ranked[:k]]


def _pack_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for index format")
    return struct.pack("<H", len(raw)) + raw


def save_index(index: InvertedIndex, path) -> None:
    body = bytearray()
    body += struct.pack("<Id", index.doc_count, index.avg_doc_length)
    for doc_id, length in zip(index.doc_ids, index.doc_lengths):
        body += _pack_str(doc_id)
        body += struct.pack("<I", length)
    body += struct.pack("<I", len(index.postings))
    for term in index.postings:  # already sorted at build time
        plist = index.postings[term]
        body += _pack_str(term)
        body += struct.pack("<I", len(plist))
        for doc_index, tf in plist:
            body += struct.pack("<II", doc_index, tf)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(INDEX_MAGIC + struct.pack("<I", INDEX_VERSION))
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF))
    os.replace(tmp, path)


def load_index(path) -> InvertedIndex:
    raw = Path(path).read_bytes()
    if raw[:4] != INDEX_MAGIC:
        raise IndexFormatError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != INDEX_VERSION:
        raise IndexFormatError(f"{path}: unsupported index version {version}")
    body = raw[8:-4]
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise IndexFormatError(f"{path}: checksum mismatch")

    offset = 0

    def read_str() -> str:
        nonlocal offset
        (n,) = struct.unpack_from("<H", body, offset)
        offset += 2
        value = body[offset:offset + n].decode("utf-8")
        offset += n
        return value

    doc_count, _avgdl = struct.unpack_from("<Id", body, offset)
    offset += 12
    doc_ids, doc_lengths = [], []
    for _ in range(doc_count):
        doc_ids.append(read_str())
        (length,) = struct.unpack_from("<I", body, offset)
        offset += 4
        doc_lengths.append(length)
    (term_count,) = struct.unpack_from("<I", body, offset)
    offset += 4
    postings: dict[str, list[tuple[int, int]]] = {}
    for _ in range(term_count):
        term = read_str()
        (n,) = struct.unpack_from("<I", body, offset)
        offset += 4
        plist = []
        for _ in range(n):
            doc_index, tf = struct.unpack_from("<II", body, offset)
            offset += 8
            plist.append((doc_index, tf))
        postings[term] = plist
    return InvertedIndex(doc_ids=doc_ids, doc_lengths=doc_lengths, postings=postings)
