"""``htn`` command line.

Every command prints JSON lines on stdout (``inspect`` prints text) and a
one-line diagnostic on stderr when it fails. Exit codes:

    0  success
    1  gradient check exceeded tolerance
    2  bad command line
    3  file not found
    4  malformed config or archive
    5  archive format version mismatch
    6  dataset error
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .archive import ArchiveError, VersionMismatch, load_model, save_model
from .htmm import HtmmParameters, materialize
from .trees import (
    DatasetError,
    LabeledTree,
    SkeletonSpec,
    SyntheticSpec,
    TreeParseError,
    generate_synthetic,
    load_dataset,
    sample_skeleton,
    save_dataset,
)

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_USAGE = 2
EXIT_NOT_FOUND = 3
EXIT_CONFIG = 4
EXIT_VERSION = 5
EXIT_DATA = 6


class ConfigError(ValueError):
    pass


def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record) + "\n")
    sys.stdout.flush()


def _read_json(path: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def _train_config(doc: dict, seed: int | None) -> harness.TrainConfig:
    try:
        cfg = harness.TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training config: {exc}") from None
    if seed is not None:
        cfg = harness.TrainConfig.from_dict({**cfg.as_dict(), "seed": seed})
    return cfg


# -- gen -----------------------------------------------------------------------


def _model_from_spec(entry: dict) -> HtmmParameters:
    if "lambda_A" in entry:
        return HtmmParameters(*(np.array(entry[k], dtype=float) for k in ("lambda_A", "lambda_pi", "lambda_b", "lambda_phi")))
    return HtmmParameters.from_probs(*(np.array(entry[k], dtype=float) for k in ("A", "pi", "b", "phi")))


def synthetic_spec_from_dict(doc: dict) -> SyntheticSpec:
    """Generator config. Either ``"preset": "separated"`` or ``"classes"``, a
    list of per-class models given as probability tables (``A``, ``pi``,
    ``b``, ``phi``) or free parameters (``lambda_*``)."""
    try:
        skel = SkeletonSpec(**doc.get("skeleton", {}))
        if doc.get("preset") == "separated":
            models = harness.separated_generators(4, skel.L)
        elif "classes" in doc:
            models = [_model_from_spec(e) for e in doc["classes"]]
        else:
            raise ConfigError("generator config needs 'classes' or 'preset'")
        return SyntheticSpec(models, skel, doc.get("samples_per_class", 100), doc.get("symbols"))
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, FloatingPointError) as exc:
        raise ConfigError(f"bad generator config: {exc}") from None


def cmd_gen(args) -> int:
    spec = synthetic_spec_from_dict(_read_json(args.config))
    try:
        data = generate_synthetic(spec, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    save_dataset(data, args.out)
    _emit({"command": "gen", "out": str(args.out), "N": data.N, "K": data.K, "L": data.L, "V": data.V})
    return EXIT_OK


# -- train / eval ----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _train_config(_read_json(args.config) if args.config else {}, args.seed)
    tr = load_dataset(args.data, L=cfg.L)
    va = load_dataset(args.val, vocab=tr.vocab, K=tr.K, L=tr.L) if args.val else None
    if va is not None and va.L > tr.L:
        raise DatasetError("validation trees exceed the training outdegree")
    try:
        resolved = cfg.resolve(tr)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    model, history = harness.train(resolved, tr, va, callback=lambda r: _emit({"command": "train", **r}))
    save_model(
        args.out, model, tr.vocab,
        {"config": resolved.as_dict(), "seed": resolved.seed, "epochs_completed": len(history)},
    )
    _emit({"command": "train", "out": str(args.out), "final_loss": history[-1]["loss"]})
    return EXIT_OK


def _load_for_model(path: str, model, vocab):
    data = load_dataset(path, vocab=vocab, K=model.K, L=model.L)
    if data.L > model.L:
        raise DatasetError(f"trees have outdegree {data.L} > model L={model.L}")
    if data.K > model.K:
        raise DatasetError(f"data has {data.K} classes, model only {model.K}")
    if data.alphabet_size != model.V:
        raise DatasetError("data alphabet does not match model (archive has no vocabulary?)")
    return data


def cmd_eval(args) -> int:
    model, vocab, _ = load_model(args.model)
    data = _load_for_model(args.data, model, vocab)
    _emit({"command": "eval", "N": data.N, **harness.evaluate(model, data).as_dict()})
    return EXIT_OK


# -- gridsearch ------------------------------------------------------------------


def cmd_gridsearch(args) -> int:
    doc = _read_json(args.config)
    try:
        C_grid = [int(c) for c in doc["C"]]
        M_grid = [int(m) for m in doc["M"]]
        scheme = doc.get("scheme", "kfold")
        folds = int(doc.get("folds", 3))
        criterion = doc.get("criterion", "auto")
        n_jobs = int(doc.get("n_jobs", 1))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad grid config: {exc}") from None
    base = _train_config(doc.get("base", {}), None)
    seed = args.seed if args.seed is not None else base.seed
    data = load_dataset(args.data, L=base.L)
    val = load_dataset(args.val, vocab=data.vocab, K=data.K, L=data.L) if args.val else None
    try:
        best, cells = harness.grid_search(
            C_grid, M_grid, data, base, scheme=scheme, folds=folds, val_set=val, seed=seed,
            criterion=criterion, n_jobs=n_jobs,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for c in cells:
        _emit({"command": "gridsearch", "cell": c})
    _emit({"command": "gridsearch", "best": best.as_dict()})
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------------

GRADCHECK_DEFAULTS = {"C": 2, "M": 3, "K": 3, "L": 3, "V": 4, "min_nodes": 3, "max_nodes": 6,
                      "normalization_mode": "raw", "init_std": 1.0, "w_init_std": 1.0, "step": 1e-5}


def cmd_gradcheck(args) -> int:
    doc = {**GRADCHECK_DEFAULTS, **(_read_json(args.config) if args.config else {})}
    unknown = set(doc) - set(GRADCHECK_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown gradcheck fields: {sorted(unknown)}")
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    try:
        from .network import HtnModel

        model = HtnModel.init(doc["C"], doc["L"], doc["V"], doc["M"], doc["K"], seed=seed,
                              normalization_mode=doc["normalization_mode"], std=doc["init_std"], w_std=doc["w_init_std"])
        kids = sample_skeleton(SkeletonSpec(doc["min_nodes"], doc["max_nodes"], doc["L"]), rng)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad gradcheck config: {exc}") from None
    tree = LabeledTree(rng.integers(0, doc["V"], len(kids)), kids)
    cls = int(rng.integers(0, doc["K"]))
    report = harness.finite_difference_report(model, (tree, cls), step=doc["step"])
    _emit({"command": "gradcheck", "seed": seed, **report.as_dict()})
    return EXIT_OK if report.passed else EXIT_GRADCHECK


# -- inspect ---------------------------------------------------------------------


def _entropy(p: np.ndarray, axis: int) -> np.ndarray:
    return -(p * np.log(p)).sum(axis=axis)


def cmd_inspect(args) -> int:
    model, vocab, training = load_model(args.model)
    out = sys.stdout
    out.write(f"HTN model: M={model.M} C={model.C} L={model.L} V={model.V} K={model.K} "
              f"normalization={model.normalization_mode}\n")
    if vocab is not None:
        shown = ", ".join(vocab.symbols[:10]) + (" ..." if vocab.n_labels > 10 else "")
        out.write(f"vocabulary: {vocab.n_labels} labels + UNK [{shown}]\n")
    if training:
        out.write(f"training: seed={training.get('seed')} epochs={training.get('epochs_completed')}\n")
    out.write(f"W_o: frobenius={np.linalg.norm(model.W_o):.6g} "
              f"per-class=[{', '.join(f'{x:.4g}' for x in np.linalg.norm(model.W_o, axis=0))}]\n")
    out.write("module  H(pi)    H(phi)   mean H(A col)  mean H(b row)\n")
    for k, m in enumerate(model.modules):
        t = materialize(m)
        out.write(f"{k:<7d} {_entropy(t.pi, 0):<8.4f} {_entropy(t.phi, 0):<8.4f} "
                  f"{_entropy(t.A, 0).mean():<14.4f} {_entropy(t.b, 1).mean():.4f}\n")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="htn", description="Hidden tree Markov networks for tree classification")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="sample a synthetic dataset")
    g.add_argument("--config", required=True, help="generator config JSON")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train an HTN and write a model archive")
    t.add_argument("--config", help="training config JSON (defaults if omitted)")
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a model archive on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("gridsearch", help="select C and M by cross-validation")
    s.add_argument("--config", required=True, help="grid JSON: {C: [...], M: [...], scheme, folds, base}")
    s.add_argument("--data", required=True)
    s.add_argument("--val")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gridsearch)

    c = sub.add_parser("gradcheck", help="finite-difference check of the loss gradient")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="summarize a model archive")
    i.add_argument("--model", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        code, msg = EXIT_NOT_FOUND, f"file not found: {exc.filename}"
    except VersionMismatch as exc:
        code, msg = EXIT_VERSION, f"version mismatch: {exc}"
    except (ConfigError, ArchiveError) as exc:
        code, msg = EXIT_CONFIG, f"malformed input: {exc}"
    except (DatasetError, TreeParseError) as exc:
        code, msg = EXIT_DATA, f"dataset error: {exc}"
    sys.stderr.write(f"htn: {msg}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
