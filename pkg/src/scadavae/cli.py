"""Command-line front end: gen, train, score, threshold, eval, rules.

Configuration comes from an optional JSON file (``--config``), then
environment variables ``SCADAVAE_<SECTION>__<KEY>`` (or ``SCADAVAE_SEED``),
then command-line flags. Exit codes: 0 ok, 2 config, 3 data, 4 numeric,
5 I/O.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import dataio, detector, evaluation, rulecheck, synthgen, training, vae

log = logging.getLogger("scadavae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5
ENV_PREFIX = "SCADAVAE_"
MODEL_FILE = "model.svm"


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "out": ".",
    "data": {
        "train": None,
        "test": None,
        "columns": {"label": "label"},
        "window_hours": 24,
        "stride": 1,
        "valid_fraction": None,
    },
    "model": {},  # VaeConfig overrides; channels come from the data
    "train": {"online_steps": 50},  # remaining keys are TrainConfig overrides
    "score": {"sampling": "mode", "thresholds": [], "svg": False},
    "threshold": {"strategy": "f1", "quantile": 0.01},
    "rules": {"meta": None, "back_hours": 48},
    "scenario": {"path": None},
}


def _merge(base, over, where="config"):
    for k, v in over.items():
        if k not in base:
            if where in ("model", "train"):  # passed through to the typed configs
                base[k] = v
                continue
            raise ConfigError(f"unknown key {where}.{k}")
        if isinstance(base[k], dict) and k != "columns":
            if not isinstance(v, dict):
                raise ConfigError(f"{where}.{k} must be an object")
            _merge(base[k], v, k)
        else:
            base[k] = v
    return base


def _env_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def env_overrides(environ=None):
    """``SCADAVAE_TRAIN__EPOCHS=5`` -> ``{"train": {"epochs": 5}}``."""
    environ = os.environ if environ is None else environ
    out = {}
    for key, val in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX) or key == "SCADAVAE_NUMBA":
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _env_value(val)
    return out


def load_config(path=None, environ=None):
    cfg = copy.deepcopy(DEFAULTS)
    explicit = set()
    if path:
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(cfg, user)
        explicit |= {"seed"} & set(user)
    env = env_overrides(environ)
    _merge(cfg, env)
    explicit |= {"seed"} & set(env)
    cfg["_explicit"] = explicit
    return cfg


# --------------------------------------------------------------------------
# provenance
# --------------------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def provenance(command, seed, inputs=()):
    lines = [f"scadavae {__version__}", f"command {command}", f"seed {seed}"]
    for p in inputs:
        if p is not None:
            lines.append(f"input {Path(p).name} sha256 {sha256_file(p)}")
    return lines


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _column_map(cfg):
    try:
        return dataio.ColumnMap.from_dict(cfg["data"]["columns"] or {})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"data.columns: {exc}") from None


def _load_dataset(path, cfg):
    if path is None:
        raise ConfigError("no dataset path given (argument or data.* in config)")
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset {path} not found")
    return dataio.load_csv(path, _column_map(cfg))


def _out_dir(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _typed(cls, overrides, label):
    known = {f.name for f in dataclasses.fields(cls)}
    kw = {k: v for k, v in overrides.items() if k in known}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{label}: {exc}") from None


def _vae_config(cfg, channels, window_hours):
    over = dict(cfg["model"])
    unknown = set(over) - {f.name for f in dataclasses.fields(vae.VaeConfig)}
    if unknown:
        raise ConfigError(f"unknown model keys: {sorted(unknown)}")
    if "conv_specs" in over:
        over["conv_specs"] = [tuple(s) for s in over["conv_specs"]]
    over.update(channels=channels, window_hours=window_hours, seed=int(cfg["seed"]))
    return _typed(vae.VaeConfig, over, "model")


def _train_config(cfg):
    over = {k: v for k, v in cfg["train"].items() if k != "online_steps"}
    unknown = set(over) - {f.name for f in dataclasses.fields(training.TrainConfig)}
    if unknown:
        raise ConfigError(f"unknown train keys: {sorted(unknown)}")
    return _typed(training.TrainConfig, over, "train")


def _thresholds(cfg):
    vals = cfg["score"]["thresholds"]
    if isinstance(vals, str):
        return detector.ThresholdSet.parse(vals) if vals.strip() else None
    return detector.ThresholdSet.from_values(vals) if vals else None


def _labels_required(series, what):
    if series.labels is None:
        raise dataio.DataError(f"{what} needs a label column in the LRP CSV")
    return series.labels


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen(cfg, args):
    path = args.scenario or cfg["scenario"]["path"]
    sc = synthgen.Scenario.load(path) if path else synthgen.default_scenario()
    if "seed" in cfg["_explicit"]:
        sc.seed = int(cfg["seed"])
    out = _out_dir(cfg)
    data = sc.generate()
    prov = provenance("gen", sc.seed, [path] if path else ())
    synthgen.emit(data.train, out / "train.csv", prov)
    synthgen.emit(data.attack, out / "attack.csv", prov)
    synthgen.emit(data.baseline, out / "baseline.csv", prov)
    (out / "network_meta.json").write_text(
        json.dumps(synthgen.network_meta(sc.network), indent=2, sort_keys=True) + "\n")
    (out / "scenario.json").write_text(json.dumps(sc.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'train.csv'} ({len(data.train)} h), {out / 'attack.csv'} "
          f"({len(data.attack)} h), {out / 'baseline.csv'}, {out / 'network_meta.json'}")
    return EXIT_OK


def cmd_train(cfg, args):
    path = args.data or cfg["data"]["train"]
    ds = _load_dataset(path, cfg)
    out = _out_dir(cfg)
    seed = int(cfg["seed"])
    model_path = Path(args.model) if args.model else out / MODEL_FILE
    W, stride = int(cfg["data"]["window_hours"]), int(cfg["data"]["stride"])

    if args.online:
        model = vae.load_model(model_path)
        batch = detector.windows_for(model, ds, W, stride)
        steps = int(cfg["train"]["online_steps"])
        tc = _train_config(cfg)
        training.online_update(model, batch.windows, steps=steps, seed=seed,
                               batch_size=tc.batch_size, clip_norm=tc.clip_norm)
        extra = dict(model.extra)
        extra.setdefault("history", []).append(provenance("train --online", seed, [path]))
        vae.save_model(model, model_path, extra)
        print(f"online update: {steps} steps on {len(batch)} windows -> {model_path}")
        return EXIT_OK

    tc = _train_config(cfg)
    vf = cfg["data"]["valid_fraction"]
    rows, vrows = (slice(None), None) if not vf else dataio.split(ds, float(vf), W)
    stats = dataio.fit_stats(ds, rows)
    model = vae.VaeModel(_vae_config(cfg, len(ds.channel_names), W), ds.channel_names,
                         stats.mean, stats.std)
    train_ds = ds.slice(rows)
    batch = detector.windows_for(model, train_ds, W, stride)
    valid = None if vrows is None else detector.windows_for(model, ds.slice(vrows), W, 1).windows

    def progress(rec):
        log.info("epoch %d mean_elbo %.4f", rec.epoch, rec.mean_elbo)

    report = training.fit(model, batch.windows, valid, tc, seed=seed, progress=progress)
    prov = provenance("train", seed, [path])
    vae.save_model(model, model_path, {"provenance": prov, "train_config": dataclasses.asdict(tc)})
    report.write_csv(out / "train_report.csv", prov)
    print(report.table() if args.verbose else
          f"trained {len(report.epochs)} epochs, final mean ELBO "
          f"{report.epochs[-1].mean_elbo:.4f}" if report.epochs else "trained 0 epochs")
    print(f"model -> {model_path}")
    return EXIT_OK


def cmd_score(cfg, args):
    model = vae.load_model(args.model)
    path = args.data or cfg["data"]["test"]
    ds = _load_dataset(path, cfg)
    ths = _thresholds(cfg)
    batch = detector.windows_for(model, ds, int(cfg["data"]["window_hours"]),
                                 int(cfg["data"]["stride"]))
    series = detector.score_series(model, batch, cfg["score"]["sampling"])
    out = _out_dir(cfg)
    prov = provenance("score", cfg["seed"], [args.model, path])
    detector.write_lrp_csv(series, out / "lrp.csv", ths, prov)
    msg = f"scored {len(series)} windows -> {out / 'lrp.csv'}"
    if cfg["score"]["svg"]:
        detector.write_svg(series, out / "lrp.svg", ths)
        msg += f", {out / 'lrp.svg'}"
    print(msg)
    return EXIT_OK


def cmd_threshold(cfg, args):
    series = detector.read_lrp_csv(args.lrp)
    strategy = "quantile" if args.quantile is not None else cfg["threshold"]["strategy"]
    if strategy == "quantile":
        q = float(args.quantile if args.quantile is not None else cfg["threshold"]["quantile"])
        t = detector.quantile_threshold(series, q)
        print(f"quantile {q} threshold {t!r}")
    elif strategy == "f1":
        t, f1 = evaluation.optimal_threshold_f1(series.lrp, _labels_required(series, "f1 threshold"))
        print(f"f1-optimal threshold {t!r} f1 {f1:.6f}")
    else:
        raise ConfigError(f"threshold.strategy must be f1 or quantile, got {strategy!r}")
    out = _out_dir(cfg)
    with open(out / "threshold.txt", "w") as fh:
        for line in provenance("threshold", cfg["seed"], [args.lrp]):
            fh.write(f"# {line}\n")
        fh.write(f"{strategy},{t!r}\n")
    return EXIT_OK


def cmd_eval(cfg, args):
    series = detector.read_lrp_csv(args.lrp)
    labels = _labels_required(series, "eval")
    curve = evaluation.roc(series.lrp, labels)
    t_opt, _ = evaluation.optimal_threshold_f1(series.lrp, labels)
    out = _out_dir(cfg)
    prov = provenance("eval", cfg["seed"], [args.lrp])
    ths = _thresholds(cfg)
    chosen = [("f1_optimal", t_opt)] + (list(ths.entries) if ths else [])
    blocks = []
    for name, t in chosen:
        cm = evaluation.confusion(series.lrp < t, labels)
        blocks.append(f"[{name}]\n" + evaluation.summary_text(cm, t, curve))
        tag = "" if name == "f1_optimal" else f"_{name}"
        evaluation.write_confusion_csv(cm, out / f"confusion{tag}.csv", t, prov)
    evaluation.write_roc_csv(curve, out / "roc.csv", prov)
    text = "\n\n".join(blocks)
    (out / "report.txt").write_text("\n".join(f"# {p}" for p in prov) + "\n" + text + "\n")
    print(text)
    return EXIT_OK


def cmd_rules(cfg, args):
    meta_path = args.meta or cfg["rules"]["meta"]
    if not meta_path:
        raise ConfigError("rules needs a network metadata file (--meta or rules.meta)")
    if not Path(meta_path).exists():
        raise ConfigError(f"network metadata file {meta_path} not found")
    meta = rulecheck.NetworkMeta.load(meta_path)
    path = args.data or cfg["data"]["test"]
    ds = _load_dataset(path, cfg)
    flags = rulecheck.run_rules(ds, meta, int(cfg["rules"]["back_hours"]))
    out = _out_dir(cfg)
    prov = provenance("rules", cfg["seed"], [meta_path, path])
    rulecheck.write_flags_csv(ds, flags, out / "rules.csv", prov)
    lines = [f"{f:18s} {int(flags.families[f].sum())}" for f in rulecheck.FAMILIES]
    lines += [f"{'combined':18s} {int(flags.combined.sum())}",
              f"{'smoothed':18s} {int(flags.smoothed.sum())}"]
    if ds.labels is not None and (ds.labels == dataio.ATTACK).any():
        for name in ("combined", "smoothed"):
            cm = evaluation.confusion(getattr(flags, name), ds.labels)
            p, r, f1 = evaluation.precision_recall_f1(cm)
            lines.append(f"{name}: tp {cm.tp} fp {cm.fp} fn {cm.fn} tn {cm.tn} "
                         f"precision {p:.4f} recall {r:.4f} f1 {f1:.4f}")
    text = "\n".join(lines)
    (out / "rules_report.txt").write_text("\n".join(f"# {p}" for p in prov) + "\n" + text + "\n")
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="seed for every random stream")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="scadavae", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"scadavae {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="simulate a synthetic tank/pump scenario")
    g.add_argument("--scenario", help="scenario JSON (default: bundled scenario)")

    t = sub.add_parser("train", parents=[common], help="train a model on a CSV")
    t.add_argument("data", nargs="?", help="training CSV")
    t.add_argument("--model", help="model file (default OUT/model.svm)")
    t.add_argument("--online", action="store_true", help="update an existing model in place")

    s = sub.add_parser("score", parents=[common], help="compute LRP per window")
    s.add_argument("model")
    s.add_argument("data", nargs="?")
    s.add_argument("--thresholds", help="comma-separated LRP thresholds")
    s.add_argument("--sampling", help="mode or mc:L[:seed]")
    s.add_argument("--svg", action="store_true", help="also write an SVG plot")

    th = sub.add_parser("threshold", parents=[common], help="choose a detection threshold")
    th.add_argument("lrp", help="LRP CSV from score")
    th.add_argument("--quantile", type=float, help="lower-tail quantile of (normal) LRP")

    e = sub.add_parser("eval", parents=[common], help="confusion, P/R/F1 and ROC of an LRP CSV")
    e.add_argument("lrp")
    e.add_argument("--thresholds", help="extra thresholds to report")

    r = sub.add_parser("rules", parents=[common], help="rule-violation baseline")
    r.add_argument("data", nargs="?")
    r.add_argument("--meta", help="network metadata JSON")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "score": cmd_score,
            "threshold": cmd_threshold, "eval": cmd_eval, "rules": cmd_rules}


def _apply_flags(cfg, args):
    if args.seed is not None:
        cfg["seed"] = args.seed
        cfg["_explicit"].add("seed")
    if args.out:
        cfg["out"] = args.out
    if getattr(args, "thresholds", None):
        cfg["score"]["thresholds"] = args.thresholds
    if getattr(args, "svg", False):
        cfg["score"]["svg"] = True
    if getattr(args, "sampling", None):
        cfg["score"]["sampling"] = args.sampling
    return cfg


def _exit_code(exc):
    if isinstance(exc, (ConfigError, synthgen.ScenarioError, rulecheck.MetaError,
                        detector.ThresholdError)):
        return EXIT_CONFIG
    if isinstance(exc, FloatingPointError):
        return EXIT_NUMERIC
    if isinstance(exc, (dataio.DataError, evaluation.SingleClassError, vae.ModelFileError)):
        return EXIT_DATA
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, ValueError):
        return EXIT_DATA
    return None


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _apply_flags(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit categories
        code = _exit_code(exc)
        if code is None:
            raise
        kind = {EXIT_CONFIG: "config", EXIT_DATA: "data", EXIT_NUMERIC: "numeric",
                EXIT_IO: "io"}[code]
        print(f"scadavae {args.command}: {kind} error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
