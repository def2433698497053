"""JSON model archives.

Floats are written with Python's shortest round-trip repr, so decoding
reproduces every parameter bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .htmm import HtmmParameters
from .network import HtnModel
from .trees import LabelVocab

FORMAT_VERSION = 1
KIND = "htn-model"


class ArchiveError(ValueError):
    pass


class VersionMismatch(ArchiveError):
    pass


def model_to_dict(model: HtnModel, vocab: LabelVocab | None = None, training: dict | None = None) -> dict:
    return {
        "kind": KIND,
        "format_version": FORMAT_VERSION,
        "dimensions": {"C": model.C, "L": model.L, "V": model.V, "M": model.M, "K": model.K},
        "vocab": vocab.symbols if vocab is not None else None,
        "normalization_mode": model.normalization_mode,
        "W_o": model.W_o.tolist(),
        "modules": [
            {
                "lambda_A": m.lambda_A.tolist(),
                "lambda_pi": m.lambda_pi.tolist(),
                "lambda_b": m.lambda_b.tolist(),
                "lambda_phi": m.lambda_phi.tolist(),
            }
            for m in model.modules
        ],
        "training": training or {},
    }


def model_from_dict(doc: dict) -> tuple[HtnModel, LabelVocab | None, dict]:
    if not isinstance(doc, dict) or doc.get("kind") != KIND:
        raise ArchiveError("not an htn model archive")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"archive format_version {version!r}, expected {FORMAT_VERSION}")
    try:
        dims = doc["dimensions"]
        mods = tuple(
            HtmmParameters(
                np.array(m["lambda_A"], dtype=np.float64),
                np.array(m["lambda_pi"], dtype=np.float64),
                np.array(m["lambda_b"], dtype=np.float64),
                np.array(m["lambda_phi"], dtype=np.float64),
            )
            for m in doc["modules"]
        )
        model = HtnModel(mods, np.array(doc["W_o"], dtype=np.float64), doc["normalization_mode"])
        stored = tuple(dims[k] for k in ("C", "L", "V", "M", "K"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchiveError(f"malformed archive: {exc}") from None
    if (model.C, model.L, model.V, model.M, model.K) != stored:
        raise ArchiveError("archive dimensions disagree with stored tensors")
    vocab = None
    if doc.get("vocab") is not None:
        vocab = LabelVocab(doc["vocab"]).freeze()
        if vocab.size != model.V:
            raise ArchiveError("vocabulary size disagrees with model alphabet")
    return model, vocab, doc.get("training", {})


def save_model(path: str | Path, model: HtnModel, vocab: LabelVocab | None = None, training: dict | None = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, vocab, training)), encoding="utf-8")


def load_model(path: str | Path) -> tuple[HtnModel, LabelVocab | None, dict]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"archive is not valid JSON: {exc}") from None
    return model_from_dict(doc)
