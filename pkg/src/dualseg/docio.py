"""Versioned structured-text documents for model persistence.

Documents are JSON with all floating-point numbers rendered at 17
significant digits, which is enough to reproduce every IEEE-754 double
exactly.  A load -> save round trip is therefore byte-identical.
"""

import json

import numpy as np


class DocumentError(Exception):
    """Raised for malformed, unversioned, or wrong-kind documents."""


def _render(obj, out):
    if isinstance(obj, dict):
        out.append("{")
        for i, (k, v) in enumerate(obj.items()):
            if i:
                out.append(",")
            out.append(json.dumps(str(k)))
            out.append(":")
            _render(v, out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(",")
            _render(v, out)
        out.append("]")
    elif isinstance(obj, np.ndarray):
        _render(obj.tolist(), out)
    elif isinstance(obj, bool):  # bool before int: bool is an int subclass
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not np.isfinite(x):
            raise DocumentError(f"non-finite value {x!r} cannot be serialized")
        out.append(f"{x:.17g}")
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif obj is None:
        out.append("null")
    else:
        raise DocumentError(f"unsupported type {type(obj).__name__}")


def dumps_doc(kind, payload, version=1):
    """Serialize a document of the given kind to text."""
    out = []
    _render({"kind": kind, "version": version, "payload": payload}, out)
    return "".join(out) + "\n"


def loads_doc(text, kind, version=1):
    """Parse a document, checking its kind and version."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DocumentError(f"not a valid document: {exc}") from exc
    if not isinstance(doc, dict) or "kind" not in doc:
        raise DocumentError("missing document kind")
    if doc["kind"] != kind:
        raise DocumentError(f"expected kind {kind!r}, found {doc['kind']!r}")
    if doc.get("version") != version:
        raise DocumentError(
            f"unsupported {kind} version {doc.get('version')!r} (want {version})")
    return doc["payload"]


def save_doc(path, kind, payload, version=1):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_doc(kind, payload, version=version))


def load_doc(path, kind, version=1):
    with open(path, "r", encoding="utf-8") as fh:
        return loads_doc(fh.read(), kind, version=version)
