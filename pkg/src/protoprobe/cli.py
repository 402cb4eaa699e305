"""Command-line interface: ``protoprobe <subcommand> ...``.

Exit codes: 0 success, 1 internal error, 2 unreadable or invalid input file,
3 evaluation impossible (e.g. every attack failed), 4 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .adversary import AttackConfig, attack_set, save_adversaries
from .engine import NumericError
from .metrics import DEFAULT_THRESHOLD_ADV, DEFAULT_THRESHOLD_G, DegenerateFeatures, format_report
from .modelio import ModelFileError, fingerprint, load_model, save_model, spec_from_text
from .prototypes import SynthConfig, load_prototype_set, save_prototype_set, synthesize_set

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_IMPOSSIBLE, EXIT_USAGE = 0, 1, 2, 3, 4

log = logging.getLogger("protoprobe")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class EvaluationImpossible(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def default_seed() -> int:
    raw = os.environ.get("PROTOPROBE_SEED", "0")
    try:
        seed = int(raw)
    except ValueError:
        raise UsageError(f"PROTOPROBE_SEED must be a non-negative integer, got {raw!r}") from None
    if seed < 0:
        raise UsageError(f"PROTOPROBE_SEED must be a non-negative integer, got {raw!r}")
    return seed


def parse_seeds(text: str | None, base: int) -> tuple[int, ...]:
    """``"5"`` means five seeds starting at `base`; ``"3,8,9"`` lists them explicitly."""
    if text is None:
        text = "5"
    try:
        if "," in text:
            seeds = tuple(int(s) for s in text.split(","))
        else:
            count = int(text)
            if count < 1:
                raise UsageError("--seeds count must be at least 1")
            seeds = tuple(range(base, base + count))
    except ValueError:
        raise UsageError(f"--seeds must be a count or a comma-separated list, got {text!r}") from None
    if any(s < 0 for s in seeds):
        raise UsageError("seeds must be non-negative")
    if len(set(seeds)) != len(seeds):
        raise UsageError(f"duplicate seeds in {text!r}")
    return seeds


def parse_fractions(text: str) -> tuple[float, ...]:
    try:
        fr = tuple(float(f) for f in text.split(","))
    except ValueError:
        raise UsageError(f"--fractions must be comma-separated numbers, got {text!r}") from None
    if any(not 0 < f <= 1 for f in fr):
        raise UsageError(f"fractions must lie in (0, 1], got {text}")
    if any(b <= a for a, b in zip(fr, fr[1:])):
        raise UsageError(f"fractions must be strictly increasing, got {text}")
    return fr


def _validated(factory, **kwargs):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _synth_config(args) -> SynthConfig:
    return _validated(SynthConfig, learning_rate=args.proto_lr, max_iterations=args.proto_iters,
                      confidence_target=args.confidence, clip_to_unit_box=not args.no_clip)


def _attack_config(args) -> AttackConfig:
    return _validated(AttackConfig, max_iterations=args.attack_iters, overshoot=args.overshoot,
                      clip_to_unit_box=not args.no_clip)


def _thresholds(args) -> tuple[float, float]:
    for name in ("threshold_g", "threshold_adv"):
        v = getattr(args, name)
        if not 0 <= v <= 1:
            raise UsageError(f"--{name.replace('_', '-')} must lie in [0, 1], got {v}")
    return args.threshold_g, args.threshold_adv


def _load(path):
    try:
        return load_model(path)
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except (ModelFileError, ValueError, OSError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
        log.info("wrote %s", out)


def _config_header(seeds, synth, attack, thresholds) -> dict:
    return {
        "version": __version__,
        "seeds": ",".join(map(str, seeds)),
        "synth": json.dumps(asdict(synth), sort_keys=True),
        "attack": json.dumps(asdict(attack), sort_keys=True),
        "thresholds": json.dumps({"m_g": thresholds[0], "m_adv": thresholds[1]}),
    }


def _evaluate_model(model, seeds, synth, attack, thresholds):
    from .evaluate import evaluate
    try:
        return evaluate(model, seeds, synth, attack, *thresholds)
    except DegenerateFeatures as exc:
        raise EvaluationImpossible(str(exc)) from None
    except ValueError as exc:
        if "no adversaries available" in str(exc):
            raise EvaluationImpossible("every DeepFool attack failed; M_adv is undefined") from None
        raise


# --------------------------------------------------------------------------
# subcommands


def cmd_evaluate(args) -> int:
    seeds = parse_seeds(args.seeds, args.seed_base)
    synth, attack, thresholds = _synth_config(args), _attack_config(args), _thresholds(args)
    model = _load(args.model)
    ev = _evaluate_model(model, seeds, synth, attack, thresholds)
    header = {"model": fingerprint(model), "input": "x".join(map(str, model.spec.input_shape)),
              **_config_header(seeds, synth, attack, thresholds)}
    _emit(format_report(ev.report, header, _timestamp()), args.out)
    if args.save_prototypes:
        save_prototype_set(ev.prototypes, args.save_prototypes, model.spec.input_shape)
        save_adversaries(ev.adversaries, args.save_prototypes)
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.models) < 2:
        raise UsageError("compare needs at least two model files")
    seeds = parse_seeds(args.seeds, args.seed_base)
    synth, attack, thresholds = _synth_config(args), _attack_config(args), _thresholds(args)
    models = [_load(p) for p in args.models]
    ks = {m.spec.classes for m in models}
    if len(ks) > 1:
        raise InputError(f"models have different class counts {sorted(ks)}; prototypes are not comparable")
    rows = []
    for path, m in zip(args.models, models):
        rep = _evaluate_model(m, seeds, synth, attack, thresholds).report
        rows.append((path, fingerprint(m), rep))
    ranked = sorted(range(len(rows)), key=lambda i: (-rows[i][2].m_g, i))
    best_adv = min(range(len(rows)), key=lambda i: (-rows[i][2].m_adv, i))
    lines = ["# protoprobe model comparison", f"# generated={_timestamp()}"]
    lines += [f"# {k}={v}" for k, v in _config_header(seeds, synth, attack, thresholds).items()]
    lines.append("rank,model,fingerprint,m_g,m_adv,verdict_accuracy,verdict_robustness")
    for rank, i in enumerate(ranked, 1):
        path, fp, rep = rows[i]
        lines.append(f"{rank},{path},{fp},{rep.m_g:.6f},{rep.m_adv:.6f},"
                     f"{str(rep.verdict_accuracy).lower()},{str(rep.verdict_robustness).lower()}")
    lines.append(f"best_for_accuracy={rows[ranked[0]][0]}")
    lines.append(f"best_for_robustness={rows[best_adv][0]}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def _read_json(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except (json.JSONDecodeError, OSError) as exc:
        raise InputError(f"{path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: study config must be a JSON object")
    return cfg


STUDY_KEYS = {"classes", "per_class", "test_per_class", "image_shape", "difficulty", "data_seed", "model_seed",
              "schedule", "seeds", "synth", "attack", "train_idx", "test_idx"}


def study_settings(cfg: dict, args) -> dict:
    """Merge a JSON study config with command-line overrides and validate everything."""
    from .harness import REFERENCE_DIFFICULTY, REFERENCE_SCHEDULE
    unknown = set(cfg) - STUDY_KEYS
    if unknown:
        raise UsageError(f"unknown study config keys: {sorted(unknown)}")
    base = args.seed_base
    sched = dict(cfg.get("schedule", {}))
    if args.fractions is not None:
        sched["fractions"] = parse_fractions(args.fractions)
    elif "fractions" in sched:
        sched["fractions"] = parse_fractions(",".join(map(str, sched["fractions"])))
    schedule = _validated(lambda **kw: replace(REFERENCE_SCHEDULE, **kw), **sched)
    synth = dict(cfg.get("synth", {}))
    attack = dict(cfg.get("attack", {}))
    for key, flag in (("learning_rate", "proto_lr"), ("max_iterations", "proto_iters"),
                      ("confidence_target", "confidence")):
        if getattr(args, flag) is not None:
            synth[key] = getattr(args, flag)
    for key, flag in (("max_iterations", "attack_iters"), ("overshoot", "overshoot")):
        if getattr(args, flag) is not None:
            attack[key] = getattr(args, flag)
    seeds = args.seeds if args.seeds is not None else cfg.get("seeds")
    if isinstance(seeds, list):
        seeds = ",".join(map(str, seeds))
    out = {
        "schedule": schedule,
        "synth": _validated(SynthConfig, **synth),
        "attack": _validated(AttackConfig, **attack),
        "seeds": parse_seeds(None if seeds is None else str(seeds), base),
        "classes": int(cfg.get("classes", 8)),
        "per_class": int(cfg.get("per_class", 200)),
        "test_per_class": int(cfg.get("test_per_class", 50)),
        "image_shape": tuple(cfg.get("image_shape", (1, 32, 32))),
        "difficulty": float(cfg.get("difficulty", REFERENCE_DIFFICULTY)),
        "data_seed": int(cfg.get("data_seed", base)),
        "model_seed": int(cfg.get("model_seed", base)),
        "train_idx": cfg.get("train_idx"),
        "test_idx": cfg.get("test_idx"),
    }
    if not 0 <= out["difficulty"] <= 1:
        raise UsageError("difficulty must lie in [0, 1]")
    if out["classes"] < 2 or out["per_class"] < 2 or out["test_per_class"] < 2:
        raise UsageError("need classes >= 2, per_class >= 2, test_per_class >= 2")
    if (out["train_idx"] is None) != (out["test_idx"] is None):
        raise UsageError("train_idx and test_idx must be given together")
    return out


def _study_data(s: dict):
    from .harness import load_idx, reference_datasets
    if s["train_idx"] is not None:
        try:
            tr = load_idx(*s["train_idx"])
            te = load_idx(*s["test_idx"], classes=tr.classes)
        except (OSError, ValueError) as exc:
            raise InputError(str(exc)) from None
        return tr, te
    try:
        return reference_datasets(s["data_seed"], s["classes"], s["per_class"], s["test_per_class"],
                                  s["image_shape"], s["difficulty"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_study(args) -> int:
    from .harness import format_study_csv, reference_spec, run_study
    cfg = _read_json(args.config) if args.config else {}
    s = study_settings(cfg, args)
    train_set, test_set = _study_data(s)
    spec = reference_spec(train_set.classes, train_set.input_shape)
    study = run_study(spec, train_set, test_set, s["schedule"], s["seeds"], s["synth"], s["attack"],
                      s["model_seed"], args.checkpoints)
    header = {"version": __version__, "data": train_set.provenance, "test_data": test_set.provenance}
    _emit(format_study_csv(study, header, _timestamp()), args.out)
    return EXIT_OK


def _load_class_data(args, classes):
    from .harness import load_idx
    if (args.idx_images is None) != (args.idx_labels is None):
        raise UsageError("--idx-images and --idx-labels must be given together")
    if args.idx_images is None:
        return None
    try:
        return load_idx(args.idx_images, args.idx_labels, classes=classes)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None


def cmd_profile(args) -> int:
    from .profile import build_profile, export_profile_csv
    seeds = parse_seeds(args.seeds, args.seed_base)
    synth = _synth_config(args)
    if (args.idx_images is None) != (args.idx_labels is None):
        raise UsageError("--idx-images and --idx-labels must be given together")
    model = _load(args.model)
    k = args.class_index
    if not 0 <= k < model.spec.classes:
        raise UsageError(f"class {k} out of range for a {model.spec.classes}-class model")
    data = _load_class_data(args, model.spec.classes)
    protos = synthesize_set(model, seeds, synth)
    prof = build_profile(model, k, protos.for_class(k), None if data is None else data.of_class(k))
    out = args.out or f"profile_c{k}.csv"
    export_profile_csv(prof, out)
    log.info("wrote %s", out)
    return EXIT_OK


def _difficulty(args) -> float:
    from .harness import REFERENCE_DIFFICULTY
    return REFERENCE_DIFFICULTY if args.difficulty is None else args.difficulty


def cmd_train(args) -> int:
    from .engine import init_model
    from .harness import accuracy, gen_synthetic_dataset, load_idx, reference_spec, train
    args.difficulty = _difficulty(args)
    seed = args.seed_base if args.seed is None else args.seed
    for name in ("epochs", "batch_size"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be positive")
    if not args.lr > 0 or args.lr_min < 0:
        raise UsageError("--lr must be positive and --lr-min non-negative")
    from .harness import REFERENCE_SCHEDULE
    if args.momentum is None:
        args.momentum = REFERENCE_SCHEDULE.momentum
    if args.weight_decay is None:
        args.weight_decay = REFERENCE_SCHEDULE.weight_decay
    if not 0 <= args.momentum < 1 or args.weight_decay < 0:
        raise UsageError("--momentum must lie in [0, 1) and --weight-decay must be >= 0")
    if not 0 <= args.difficulty <= 1:
        raise UsageError("--difficulty must lie in [0, 1]")
    if (args.idx_images is None) != (args.idx_labels is None):
        raise UsageError("--idx-images and --idx-labels must be given together")
    spec_text = None
    if args.spec:
        try:
            spec_text = Path(args.spec).read_text()
        except OSError as exc:
            raise InputError(f"{args.spec}: {exc}") from None
    if args.idx_images:
        try:
            data = load_idx(args.idx_images, args.idx_labels)
        except (OSError, ValueError) as exc:
            raise InputError(str(exc)) from None
    else:
        try:
            data = gen_synthetic_dataset(args.classes, args.per_class, (1, args.size, args.size),
                                         args.difficulty, seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if spec_text is not None:
        try:
            spec = spec_from_text(spec_text)
        except ValueError as exc:
            raise InputError(f"{args.spec}: {exc}") from None
    else:
        spec = reference_spec(data.classes, data.input_shape)
    model, stats = train(init_model(spec, seed), data, args.epochs, args.lr, args.lr_min, args.batch_size, seed,
                          momentum=args.momentum, weight_decay=args.weight_decay)
    save_model(model, args.out)
    print(f"model={fingerprint(model)} train_accuracy={accuracy(model, data):.6f} "
          f"final_loss={stats[-1].loss:.6f} out={args.out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .harness import gen_synthetic_dataset, save_idx
    seed = args.seed_base if args.seed is None else args.seed
    args.difficulty = _difficulty(args)
    try:
        ds = gen_synthetic_dataset(args.classes, args.per_class, (1, args.size, args.size), args.difficulty, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    images, labels = f"{prefix}-images.idx", f"{prefix}-labels.idx"
    save_idx(ds, images, labels)
    print(f"wrote {len(ds)} examples to {images} and {labels}")
    return EXIT_OK


def cmd_attack(args) -> int:
    seeds = parse_seeds(args.seeds, args.seed_base)
    synth, attack = _synth_config(args), _attack_config(args)
    model = _load(args.model)
    if args.prototypes:
        try:
            protos = load_prototype_set(args.prototypes)
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"{args.prototypes}: cannot read prototype set ({exc})") from None
    else:
        protos = synthesize_set(model, seeds, synth)
    try:
        results = attack_set(model, protos, attack)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = Path(args.out or "adversaries")
    if not args.prototypes:
        save_prototype_set(protos, out, model.spec.input_shape)
    save_adversaries(results, out)
    ok = sum(r.success for r in results)
    print(f"attacks={ok}/{len(results)} succeeded out={out}")
    return EXIT_OK if ok else EXIT_IMPOSSIBLE


# --------------------------------------------------------------------------


def _add_metric_flags(p, for_study=False):
    defaults = SynthConfig(), AttackConfig()
    p.add_argument("--seeds", default=None,
                   help="prototype seeds: a count (starting at PROTOPROBE_SEED) or a comma list (default 5)")
    p.add_argument("--proto-lr", type=float, default=None if for_study else defaults[0].learning_rate)
    p.add_argument("--proto-iters", type=int, default=None if for_study else defaults[0].max_iterations)
    p.add_argument("--confidence", type=float, default=None if for_study else defaults[0].confidence_target)
    p.add_argument("--overshoot", type=float, default=None if for_study else defaults[1].overshoot)
    p.add_argument("--attack-iters", type=int, default=None if for_study else defaults[1].max_iterations)
    if not for_study:
        p.add_argument("--no-clip", action="store_true", help="do not project prototypes/adversaries into [0,1]")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="protoprobe", description="Dataless quality metrics for trained image classifiers.")
    p.add_argument("--version", action="version", version=f"protoprobe {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("evaluate", help="report M_g, M_adv and verdicts from a model file alone")
    e.add_argument("model")
    _add_metric_flags(e)
    e.add_argument("--threshold-g", type=float, default=DEFAULT_THRESHOLD_G)
    e.add_argument("--threshold-adv", type=float, default=DEFAULT_THRESHOLD_ADV)
    e.add_argument("--out", help="report path (default: stdout)")
    e.add_argument("--save-prototypes", metavar="DIR", help="also write prototypes and adversaries here")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="rank several models by M_g and M_adv")
    c.add_argument("models", nargs="+")
    _add_metric_flags(c)
    c.add_argument("--threshold-g", type=float, default=DEFAULT_THRESHOLD_G)
    c.add_argument("--threshold-adv", type=float, default=DEFAULT_THRESHOLD_ADV)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("study", help="growing-data training study correlating metrics with test accuracy")
    s.add_argument("config", nargs="?", help="JSON study config (default: reference configuration)")
    _add_metric_flags(s, for_study=True)
    s.add_argument("--fractions", help="comma-separated training fractions, strictly increasing")
    s.add_argument("--checkpoints", metavar="DIR", help="save the model after every stage")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_study)

    pr = sub.add_parser("profile", help="feature-layer activation profile of one class")
    pr.add_argument("model")
    pr.add_argument("--class", dest="class_index", type=int, required=True)
    _add_metric_flags(pr)
    pr.add_argument("--idx-images")
    pr.add_argument("--idx-labels")
    pr.add_argument("--out", help="CSV path (default: profile_c<k>.csv)")
    pr.set_defaults(func=cmd_profile)

    t = sub.add_parser("train", help="train the reference model (or --spec) and save it")
    t.add_argument("--out", required=True)
    t.add_argument("--spec", help="text network spec (default: reference architecture)")
    t.add_argument("--idx-images")
    t.add_argument("--idx-labels")
    t.add_argument("--classes", type=int, default=8)
    t.add_argument("--per-class", type=int, default=200)
    t.add_argument("--size", type=int, default=32)
    t.add_argument("--difficulty", type=float, default=None, help="0..1 (default: reference difficulty)")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--lr-min", type=float, default=0.001)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--momentum", type=float, default=None, help="default: reference schedule")
    t.add_argument("--weight-decay", type=float, default=None, help="default: reference schedule")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("gen-data", help="write a synthetic shapes dataset as an IDX pair")
    g.add_argument("--out", required=True, help="path prefix; writes <out>-images.idx and <out>-labels.idx")
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--difficulty", type=float, default=None, help="0..1 (default: reference difficulty)")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("attack", help="DeepFool adversaries for a model's prototypes")
    a.add_argument("model")
    _add_metric_flags(a)
    a.add_argument("--prototypes", metavar="DIR", help="reuse a saved prototype set")
    a.add_argument("--out", metavar="DIR")
    a.set_defaults(func=cmd_attack)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.seed_base = default_seed()
    except UsageError as exc:
        print(f"protoprobe: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"protoprobe: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"protoprobe: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EvaluationImpossible as exc:
        print(f"protoprobe: evaluation impossible: {exc}", file=sys.stderr)
        return EXIT_IMPOSSIBLE
    except NumericError as exc:
        print(f"protoprobe: numeric failure: {exc}", file=sys.stderr)
        return EXIT_IMPOSSIBLE
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"protoprobe: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
