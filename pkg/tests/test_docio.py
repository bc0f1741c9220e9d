import numpy as np
import pytest

from dualseg.docio import DocumentError, dumps_doc, loads_doc


def test_round_trip_is_byte_identical():
    rng = np.random.default_rng(0)
    payload = {
        "matrix": rng.standard_normal((3, 4)),
        "vector": rng.standard_normal(5),
        "scalars": [0.1, 1.0 / 3.0, 1e-300, -1e17, 3],
        "flag": True,
        "name": "layer",
        "nothing": None,
    }
    text = dumps_doc("demo", payload)
    loaded = loads_doc(text, "demo")
    text2 = dumps_doc("demo", loaded)
    assert text == text2


def test_floats_survive_exactly():
    values = [0.1, 2.0 / 3.0, np.pi, 1.2345678901234567e-12, -7.25]
    text = dumps_doc("demo", {"v": values})
    loaded = loads_doc(text, "demo")
    assert loaded["v"] == values


def test_kind_and_version_are_checked():
    text = dumps_doc("alpha", {"x": 1})
    with pytest.raises(DocumentError):
        loads_doc(text, "beta")
    with pytest.raises(DocumentError):
        loads_doc(text, "alpha", version=2)
    with pytest.raises(DocumentError):
        loads_doc("not json", "alpha")


def test_non_finite_rejected():
    with pytest.raises(DocumentError):
        dumps_doc("demo", {"x": float("nan")})
