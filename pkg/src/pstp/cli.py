"""``pstp`` command line: gen, train, eval, profile, sweep, inspect, rerun.

Errors go to stderr as one JSON line (``error``, ``exit_code``, ``message``)
followed by a human-readable line.  Exit codes: 0 ok, 2 config, 3 data,
4 numerical abort.
"""
from __future__ import annotations

import functools
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np
import yaml

from pstp import __version__
from pstp.config import ABLATIONS, ModelConfig, SynthSpec, TrainConfig
from pstp.errors import ConfigError, DataError, PSTPError
from pstp.features import (
    check_compatible,
    generate_synthetic,
    load_dataset,
    read_bundle,
    read_index,
    resegment,
    split_dataset,
    tag_splits,
    write_dataset,
)
from pstp.model import PSTPNet, stack_bundles
from pstp.profiler import ablation_reports, cost_report, format_table, module_share
from pstp.training import evaluate, format_record, load_checkpoint, save_checkpoint, train

MANIFEST_NAME = "manifest.json"
SECTIONS = ("model", "train", "synth")
SWEEP_PARAMS = {"K": "K", "topk": "top_k", "topm": "top_m", "layers": "fusion_layers"}


# ------------------------------------------------------------------ plumbing


def _error_name(exc: PSTPError) -> str:
    return {2: "config_error", 3: "data_error", 4: "numerical_abort"}.get(exc.exit_code, "error")


def guarded(fn):
    """Map library errors onto exit codes with a parsable stderr line."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PSTPError as exc:
            message = str(exc).replace("\n", " ")
            click.echo(json.dumps({"error": _error_name(exc), "exit_code": exc.exit_code,
                                   "message": message}), err=True)
            click.echo(f"pstp: {_error_name(exc).replace('_', ' ')}: {message}", err=True)
            sys.exit(exc.exit_code)

    return wrapper


def load_config_file(path) -> dict:
    """Parse a YAML config into ``{section: mapping}``; parse errors carry line info."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{p}:{mark.line + 1}:{mark.column + 1}" if mark else str(p)
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{where}: {problem}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be a mapping of sections {SECTIONS}")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{p}: unknown section(s): {', '.join(map(str, unknown))}")
    return doc


def write_manifest(out: Path, command: str, config: dict, seed, inputs: dict, artifacts) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "artifacts": sorted(str(a) for a in artifacts),
        "tool_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.4f}"


def _require_data(data_dir) -> dict:
    if not Path(data_dir).is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    return read_index(data_dir)


def _model_config(index: dict, overrides: dict | None) -> ModelConfig:
    base = dict(index.get("model") or {})
    base.update(overrides or {})
    return ModelConfig.from_dict(base)


# ------------------------------------------------------------------ runners
# Each runner is a pure function of its resolved config and input paths so
# that ``rerun`` can replay a manifest.


def run_gen(config: dict, out: Path) -> None:
    cfg = ModelConfig.from_dict(config.get("model") or {})
    spec = SynthSpec.from_dict(config.get("synth") or {})
    spec.validate_for(cfg)
    bundles = generate_synthetic(spec, cfg)
    tag_splits(*split_dataset(bundles, spec.split, spec.seed))
    index = write_dataset(bundles, out, cfg)
    artifacts = [index.relative_to(out)] + [f"videos/{b.video_id}.pstp" for b in bundles]
    write_manifest(out, "gen", {"model": cfg.to_dict(), "synth": spec.to_dict()}, spec.seed, {}, artifacts)


def run_train(config: dict, data: Path, out: Path) -> dict:
    index = _require_data(data)
    cfg = _model_config(index, config.get("model"))
    tcfg = TrainConfig.from_dict(config.get("train") or {})
    train_set = load_dataset(data, "train")
    val_set = load_dataset(data, "val")
    if not train_set:
        raise DataError(f"{data}: train split is empty")
    check_compatible(train_set[0].dims, cfg, "dataset")

    out.mkdir(parents=True, exist_ok=True)
    resolved = {"model": cfg.to_dict(), "train": tcfg.to_dict()}
    artifacts = ["metrics.jsonl", "best.pstp", "last.pstp"]
    write_manifest(out, "train", resolved, tcfg.seed, {"data": str(data)}, artifacts)

    model = PSTPNet(cfg, seed=tcfg.seed, dtype=tcfg.dtype)
    with open(out / "metrics.jsonl", "w") as log:
        def emit(record):
            log.write(format_record(record) + "\n")
            log.flush()

        result = train(model, train_set, tcfg, val_set=val_set or None, log=emit, restore_best=False)
        save_checkpoint(out / "last.pstp", model, result.optimizer, tcfg,
                        extra={"epochs_done": result.epochs_done})
        if result.best_state is not None:
            model.load_state_dict(result.best_state)
        final = {"event": "final", "best_epoch": result.best_epoch, "epochs_done": result.epochs_done}
        if val_set:
            final["val"] = evaluate(model, val_set).to_dict()
        emit(final)
    save_checkpoint(out / "best.pstp", model, None, tcfg,
                    extra={"best_epoch": result.best_epoch, "split": "val"})
    return final


def _sweep_config(cfg: ModelConfig, param: str, value: int) -> ModelConfig:
    if param == "K":
        S = cfg.K * cfg.T
        if value < 1 or S % value:
            raise ConfigError(f"{S} snippets cannot be split into K={value} equal segments")
        return cfg.replace(K=value, T=S // value)
    return cfg.replace(**{SWEEP_PARAMS[param]: value})


def run_sweep(config: dict, param: str, values: list[int], data: Path | None, out: Path | None,
              echo=click.echo) -> list[dict]:
    index = _require_data(data) if data is not None else {}
    base = _model_config(index, config.get("model"))
    tcfg = TrainConfig.from_dict(config.get("train") or {})
    splits = {}
    if data is not None:
        splits = {s: load_dataset(data, s) for s in ("train", "val", "test")}
        if not splits["train"]:
            raise DataError(f"{data}: train split is empty")
        check_compatible(splits["train"][0].dims, base, "dataset")

    records = []
    for value in values:
        try:
            cfg = _sweep_config(base, param, value)
        except ConfigError as exc:
            records.append({"event": "skip", "param": param, "value": value, "reason": str(exc)})
            echo(format_record(records[-1]), err=True)
            continue
        report = cost_report(cfg)
        record = {"event": "sweep", "param": param, "value": value,
                  "params": report.params_total, "macs": report.macs_total}
        if splits:
            parts = {s: [resegment(b, cfg.K) for b in v] if cfg.K != base.K else v
                     for s, v in splits.items()}
            model = PSTPNet(cfg, seed=tcfg.seed, dtype=tcfg.dtype)
            train(model, parts["train"], tcfg, val_set=parts["val"] or None)
            target = parts["test"] or parts["val"]
            if target:
                record["eval_split"] = "test" if parts["test"] else "val"
                record["metrics"] = evaluate(model, target).to_dict()
        records.append(record)

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.jsonl").write_text("".join(format_record(r) + "\n" for r in records))
        inputs = {"data": str(data)} if data is not None else {}
        write_manifest(out, "sweep", {"model": base.to_dict(), "train": tcfg.to_dict(),
                                      "sweep": {"param": param, "values": values}},
                       tcfg.seed, inputs, ["results.jsonl"])
    return records


# ------------------------------------------------------------------ commands


@click.group()
@click.version_option(__version__, prog_name="pstp")
def main():
    """Question-guided spatio-temporal selection for audio-visual QA."""


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(dir_okay=False),
              help="YAML file with `model` and `synth` sections.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output dataset directory.")
@guarded
def gen(spec_path, out):
    """Generate a synthetic dataset with planted relevant segments and patches."""
    config = load_config_file(spec_path)
    run_gen(config, Path(out))
    n = len(read_index(out)["videos"])
    click.echo(f"wrote {n} videos to {out}")


@main.command("train")
@click.option("--data", required=True, type=click.Path(), help="Dataset directory from `pstp gen`.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              help="YAML with optional `model` overrides and `train` section.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Run directory.")
@click.option("--epochs", type=int, default=None, help="Override train.epochs.")
@click.option("--seed", type=int, default=None, help="Override train.seed.")
@guarded
def train_cmd(data, config_path, out, epochs, seed):
    """Train on the train split, selecting the best epoch on val."""
    config = load_config_file(config_path)
    overrides = {k: v for k, v in (("epochs", epochs), ("seed", seed)) if v is not None}
    if overrides:
        config = {**config, "train": {**(config.get("train") or {}), **overrides}}
    final = run_train(config, Path(data), Path(out))
    val = final.get("val")
    acc = "-" if val is None else f"{val['accuracy']:.4f}"
    click.echo(f"best_epoch={final['best_epoch']} val_accuracy={acc} run={out}")


def _eval_table(metrics: dict) -> str:
    qtypes = list(metrics["per_qtype"])
    head = ["split"] + qtypes + ["Avg"]
    row = [metrics["split"]] + [_fmt(metrics["per_qtype"][q]) for q in qtypes] + [_fmt(metrics["accuracy"])]
    lines = [_table([head, row]), f"n={metrics['n']} loss={metrics['loss']:.6f}"]
    if metrics["tssm_hit_rate"] is not None:
        lines.append(f"tssm_hit_rate={_fmt(metrics['tssm_hit_rate'])} "
                     f"srsm_hit_rate={_fmt(metrics['srsm_hit_rate'])}")
    return "\n".join(lines)


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False), help="Checkpoint file.")
@click.option("--data", required=True, type=click.Path(), help="Dataset directory.")
@click.option("--split", default="test", type=click.Choice(["train", "val", "test"]), show_default=True)
@click.option("--format", "fmt", default="table", type=click.Choice(["table", "json"]), show_default=True)
@guarded
def eval_cmd(ckpt, data, split, fmt):
    """Score a checkpoint on one split."""
    _require_data(data)
    model, _, _ = load_checkpoint(ckpt)
    bundles = load_dataset(data, split)
    if bundles:
        check_compatible(bundles[0].dims, model.cfg, "dataset")
    metrics = {"event": "eval", "split": split, **evaluate(model, bundles).to_dict()}
    click.echo(format_record(metrics) if fmt == "json" else _eval_table(metrics))


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              help="YAML with a `model` section; defaults to the published configuration.")
@click.option("--ablate", multiple=True, type=click.Choice(ABLATIONS), help="Module to remove (repeatable).")
@click.option("--format", "fmt", default="table", type=click.Choice(["table", "json"]), show_default=True)
@guarded
def profile(config_path, ablate, fmt):
    """Parameter and MAC report for the full model and requested ablations."""
    cfg = ModelConfig.from_dict(load_config_file(config_path).get("model") or {})
    reports = ablation_reports(cfg, ablate)
    if fmt == "json":
        for r in reports:
            click.echo(format_record({"event": "profile", **r.to_dict()}))
        return
    click.echo(format_table(reports))
    full = reports[0].macs_total
    for name, r in zip(ablate, reports[1:]):
        click.echo(f"w/o {name}: macs ratio {r.macs_total / full:.4f}, "
                   f"fraction of full saved {module_share(cfg, name):+.4f}")


def _parse_values(_ctx, _param, raw: str) -> list[int]:
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if not items:
        raise click.BadParameter("needs at least one value")
    try:
        return [int(v) for v in items]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {raw!r}") from None


@main.command()
@click.option("--param", required=True, type=click.Choice(list(SWEEP_PARAMS)))
@click.option("--values", required=True, callback=_parse_values, help="Comma-separated integers.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--data", type=click.Path(), default=None,
              help="Dataset directory; without it only costs are reported.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Run directory.")
@guarded
def sweep(param, values, config_path, data, out):
    """Vary one hyperparameter; report cost and (with --data) accuracy per value.

    A K sweep keeps the number of snippets K*T fixed.
    """
    records = run_sweep(load_config_file(config_path), param, values,
                        Path(data) if data else None, Path(out) if out else None)
    rows = [[param, "params", "MACs(M)", "accuracy", "tssm_hit"]]
    for r in records:
        if r["event"] != "sweep":
            continue
        m = r.get("metrics") or {}
        rows.append([str(r["value"]), str(r["params"]), f"{r['macs'] / 1e6:.3f}",
                     _fmt(m.get("accuracy")), _fmt(m.get("tssm_hit_rate"))])
    click.echo(_table(rows))


@main.command()
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--bundle", "bundle_path", required=True, type=click.Path(dir_okay=False))
@guarded
def inspect(ckpt, bundle_path):
    """Dump the selected segments and patches for one bundle as a JSON record."""
    model, _, _ = load_checkpoint(ckpt)
    bundle = read_bundle(bundle_path)
    check_compatible(bundle.dims, model.cfg, bundle.video_id or "bundle")
    res = model.forward(stack_bundles([bundle], model.dtype))
    probs = res.probs.data[0].astype(np.float64)
    record = {
        "event": "inspect",
        "video_id": bundle.video_id,
        "answer": bundle.answer,
        "predicted": int(probs.argmax()),
        "probs": probs.tolist(),
        "planted_segment": bundle.planted_segment,
        "planted_patch": bundle.planted_patch,
        **res.trace.sample(0),
    }
    click.echo(format_record(record))


@main.command()
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@guarded
def rerun(manifest, out):
    """Replay the run recorded in MANIFEST into a fresh directory."""
    try:
        doc = json.loads(Path(manifest).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {manifest}: {exc}") from None
    command, config, inputs = doc.get("command"), doc.get("config") or {}, doc.get("inputs") or {}
    out = Path(out)
    if command == "gen":
        run_gen(config, out)
    elif command == "train":
        run_train(config, Path(inputs["data"]), out)
    elif command == "sweep":
        sw = config.get("sweep") or {}
        data = Path(inputs["data"]) if "data" in inputs else None
        run_sweep({k: config[k] for k in ("model", "train")}, sw["param"], sw["values"], data, out)
    else:
        raise ConfigError(f"manifest command {command!r} cannot be replayed")
    click.echo(f"replayed {command} into {out}")


if __name__ == "__main__":
    main()
