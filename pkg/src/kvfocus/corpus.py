"""Corpus input: one JSON object per line with fields {id, title, text}."""

from __future__ import annotations

import json


class CorpusError(ValueError):
    """A corpus line is malformed; the message carries the line number."""


def read_corpus(path):
    """Yield (doc_id, title, text) tuples from a JSON-lines corpus file."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict) or "id" not in record or "text" not in record:
                raise CorpusError(f"{path}:{lineno}: expected an object with id and text fields")
            yield str(record["id"]), str(record.get("title", "")), str(record["text"])
