"""Label prediction and row enhancement through a chat model.

Clients expose ``identity`` and ``send(prompt) -> str``.  ``MockClient`` is a
pure function of the prompt and is what every test uses; ``RemoteClient``
posts to an OpenAI-style chat endpoint configured through the environment.
Responses are memoized in an append-only JSON-lines file keyed by the client
identity and the prompt's SHA-256.
"""
import hashlib
import json
import logging
import os
import re
import string
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol

from .errors import CacheCorruptionError, InvalidArgumentError, TransportError
from .table import Column, ColumnKind, Table

log = logging.getLogger(__name__)

ENV_URL = "RELBRIDGE_LLM_URL"
ENV_KEY = "RELBRIDGE_LLM_KEY"
ENV_MODEL = "RELBRIDGE_LLM_MODEL"

REVIEW_THRESHOLD = 0.5

# editable starting points; placeholders are row field names
PREDICT_TEMPLATE = (
    "Assign a single label to the item below, choosing from: {classes}.\n"
    "Item: {row}\n"
    "Answer in the form: label=<one of the classes>; confidence=<number between 0 and 1>"
)
GENRE_TEMPLATE = (
    "Artist: {name}\nTags: {tag_list}\n"
    "Pick the single genre that best describes this artist from: {classes}.\n"
    "Reply as label=<genre>; confidence=<0..1>"
)
ENHANCE_TEMPLATE = "Write a short, factual description of the following record.\n{row}"
PAPER_ENHANCE_TEMPLATE = "Explain in two sentences what the paper titled \"{title}\" is about."


class ChatClient(Protocol):
    identity: str

    def send(self, prompt: str) -> str: ...


class MockClient:
    """Deterministic offline client; ``respond`` maps a prompt to a response."""

    def __init__(self, respond=None, identity="mock"):
        self.respond = respond or (lambda prompt: prompt)
        self.identity = identity
        self.sends = 0
        self._lock = threading.Lock()

    def send(self, prompt):
        with self._lock:
            self.sends += 1
        return self.respond(prompt)


def _urllib_transport(url, payload, headers, timeout):
    req = urllib.request.Request(url, data=json.dumps(payload).encode("utf-8"), headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read().decode("utf-8"))


class RemoteClient:
    """Chat-completions client with bounded retries and doubling backoff.

    ``transport(url, payload, headers, timeout) -> dict`` and ``sleep`` are
    injectable so retry behaviour can be exercised without a network.
    """

    def __init__(self, url=None, api_key=None, model=None, retries=3, backoff=1.0, timeout=60.0,
                 transport=None, sleep=time.sleep):
        self.url = url or os.environ.get(ENV_URL)
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_KEY)
        self.model = model or os.environ.get(ENV_MODEL)
        if not self.url or not self.model:
            raise InvalidArgumentError(f"remote client needs an endpoint and a model name (set {ENV_URL} and {ENV_MODEL})")
        self.identity = self.model
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.transport = transport or _urllib_transport
        self.sleep = sleep

    def send(self, prompt):
        payload = {"model": self.model, "messages": [{"role": "user", "content": prompt}]}
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        delay = self.backoff
        last = None
        for attempt in range(self.retries + 1):
            try:
                body = self.transport(self.url, payload, headers, self.timeout)
                return body["choices"][0]["message"]["content"]
            except (urllib.error.URLError, OSError, KeyError, IndexError, TypeError, ValueError) as exc:
                last = exc
                log.warning("send attempt %d failed: %s", attempt + 1, exc)
                if attempt < self.retries:
                    self.sleep(delay)
                    delay *= 2
        raise TransportError(f"{self.identity}: giving up after {self.retries + 1} attempts: {last}")


def prompt_hash(prompt):
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class PromptCache:
    """Append-only response store, one JSON object per line.

    Opening a file with an unreadable line truncates it to the valid prefix
    and raises :class:`CacheCorruptionError` naming that line; reopening then
    succeeds with the surviving entries.  Pass ``repair=True`` to truncate and
    continue without raising.
    """

    def __init__(self, path, repair=False):
        self.path = Path(path)
        self._entries = {}
        self._lock = threading.Lock()
        self.appends = 0
        self._load(repair)
        self._fh = self.path.open("a", encoding="utf-8")

    def _load(self, repair):
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            return
        raw = self.path.read_bytes()
        offset = 0
        for lineno, line in enumerate(raw.splitlines(keepends=True), start=1):
            try:
                if not line.endswith(b"\n"):
                    raise ValueError("truncated line")
                rec = json.loads(line)
                key = (rec["id"], rec["h"])
                response = rec["r"]
                if not isinstance(response, str) or prompt_hash(rec["p"]) != rec["h"]:
                    raise ValueError("malformed entry")
            except (ValueError, KeyError, TypeError) as exc:
                with self.path.open("r+b") as fh:
                    fh.truncate(offset)
                msg = f"{self.path}: corrupt cache entry on line {lineno} ({exc}); kept {len(self._entries)} entries"
                if not repair:
                    raise CacheCorruptionError(msg, line=lineno) from exc
                log.warning(msg)
                return
            self._entries[key] = response
            offset += len(line)

    def get(self, identity, prompt):
        with self._lock:
            return self._entries.get((identity, prompt_hash(prompt)))

    def put(self, identity, prompt, response):
        h = prompt_hash(prompt)
        line = json.dumps({"id": identity, "h": h, "p": prompt, "r": response}, ensure_ascii=False)
        with self._lock:
            if (identity, h) in self._entries:
                return
            self._fh.write(line + "\n")
            self._fh.flush()
            self._entries[(identity, h)] = response
            self.appends += 1

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        identity, prompt = key
        return self.get(identity, prompt) is not None

    def close(self):
        with self._lock:
            if not self._fh.closed:
                self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def cached_send(client, prompt, cache=None):
    if cache is None:
        return client.send(prompt)
    hit = cache.get(client.identity, prompt)
    if hit is not None:
        return hit
    response = client.send(prompt)
    cache.put(client.identity, prompt, response)
    return response


def render(template, row):
    """Fill ``{field}`` placeholders from ``row``; every placeholder must exist."""
    fields = {name for _, name, _, _ in string.Formatter().parse(template) if name}
    missing = sorted(fields - set(row))
    if missing:
        raise InvalidArgumentError(f"template placeholders {missing} are not row fields")
    return template.format_map({k: "" if v is None else v for k, v in row.items()})


def table_rows(table, id_field=None):
    """Rows of a :class:`Table` as dicts, plus a ``row`` field summarizing them."""
    names = table.column_names
    out = []
    for i in range(table.row_count):
        rec = {name: table.column(name).values[i] for name in names}
        rec["row"] = "; ".join(f"{k}: {v}" for k, v in rec.items() if v is not None and k != id_field)
        out.append(rec)
    return out


@dataclass
class Annotation:
    row_id: object
    label: str
    confidence: float
    failure: str = None

    @property
    def needs_review(self):
        return self.confidence < REVIEW_THRESHOLD


_LABEL_RE = re.compile(r"label\s*[:=]\s*([^;,\n]+)", re.IGNORECASE)
_CONF_RE = re.compile(r"confidence\s*[:=]\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)", re.IGNORECASE)


def parse_annotation(response, classes):
    """``(label, confidence, failure)``; failure is None when both fields parsed."""
    problems = []
    label = None
    m = _LABEL_RE.search(response)
    if m:
        wanted = m.group(1).strip().strip("\"'").lower()
        label = next((c for c in classes if c.lower() == wanted), None)
        if label is None:
            problems.append(f"label {m.group(1).strip()!r} is not a known class")
    else:
        problems.append("no label field")
    confidence = 0.0
    m = _CONF_RE.search(response)
    if m and 0.0 <= float(m.group(1)) <= 1.0:
        confidence = float(m.group(1))
    elif m:
        problems.append(f"confidence {m.group(1)} outside [0, 1]")
    else:
        problems.append("no confidence field")
    if label is None:
        label, confidence = classes[0], 0.0
    return label, confidence, "; ".join(problems) or None


def _row_ids(rows, id_field):
    return [row[id_field] if id_field else i for i, row in enumerate(rows)]


def _map_rows(fn, rows, workers):
    if workers <= 1 or len(rows) <= 1:
        return [fn(r) for r in rows]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, rows))


def predict_labels(rows, prompt_template, classes, client, cache=None, id_field=None, workers=4):
    """One :class:`Annotation` per row, in row order.

    The template may use ``{classes}`` in addition to row fields.  A failed
    send or an unparseable response never stops the batch: the row gets the
    first class with confidence 0 and a ``failure`` note.
    """
    classes = list(classes)
    if not classes:
        raise InvalidArgumentError("predict_labels needs a nonempty class list")
    ids = _row_ids(rows, id_field)
    listing = ", ".join(classes)
    prompts = [render(prompt_template, {"classes": listing, **row}) for row in rows]

    def one(k):
        try:
            response = cached_send(client, prompts[k], cache)
        except Exception as exc:  # noqa: BLE001 - any client failure is recorded per row
            log.warning("row %r: %s", ids[k], exc)
            return Annotation(ids[k], classes[0], 0.0, f"send failed: {exc}")
        label, conf, failure = parse_annotation(response, classes)
        return Annotation(ids[k], label, conf, failure)

    return _map_rows(one, range(len(rows)), workers)


def export_review(annotations, path):
    """Write rows below the confidence threshold as JSON lines; returns how many."""
    flagged = [a for a in annotations if a.needs_review]
    with Path(path).open("w", encoding="utf-8") as fh:
        for a in flagged:
            fh.write(json.dumps(asdict(a), default=str) + "\n")
    return len(flagged)


def enhance_rows(rows, prompt_template, client, cache=None, id_field=None, workers=4, errors=None):
    """``[(row_id, text), ...]``; failed rows get ``None`` and an entry in ``errors``."""
    ids = _row_ids(rows, id_field)
    prompts = [render(prompt_template, row) for row in rows]

    def one(k):
        try:
            return ids[k], cached_send(client, prompts[k], cache)
        except Exception as exc:  # noqa: BLE001
            log.warning("row %r: %s", ids[k], exc)
            if errors is not None:
                errors.append({"row_id": ids[k], "error": str(exc)})
            return ids[k], None

    return _map_rows(one, range(len(rows)), workers)


def attach_text_column(table, enhancements, name="llm_text"):
    """A copy of ``table`` with enhancement texts as a new text column, aligned by position."""
    texts = [text for _, text in enhancements]
    if len(texts) != table.row_count:
        raise InvalidArgumentError(f"{len(texts)} texts for a {table.row_count}-row table")
    if table.has_column(name):
        raise InvalidArgumentError(f"table {table.name!r} already has a column {name!r}")
    return Table(table.name, list(table.columns) + [Column(name, ColumnKind.TEXT, texts)], table.primary_key)
