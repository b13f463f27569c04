"""Command-line entry point: ``fastadd {train,gradcheck,bench,ablate,params}``.

Configuration is a JSON document with sections ``model``, ``train``,
``bench``, ``gradcheck``, ``ablate`` and ``output``. Every key has a default;
unknown keys are rejected. ``--set section.key=value`` overrides are applied
after the file is loaded (values are parsed as JSON, falling back to a plain
string).

Exit codes: 0 success, 1 configuration or input error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import bench as bn
from . import model as mdl
from . import train as tr
from .errors import ConfigError, DivergenceError, FastaddError, InputError, NumericError
from .model import FastformerConfig

log = logging.getLogger("fastadd")

GRADCHECK_TOLERANCE = 1e-4


@dataclass
class BenchSection:
    lengths: list = field(default_factory=lambda: [128, 256, 512, 1024, 2048, 4096, 8192])
    base_tokens: int = 8192
    warmup_iters: int = 3
    timed_iters: int = 9
    heads: int = 4
    head_dim: int = 16
    layers: int = 1
    seed: int = 0
    implementations: list = field(default_factory=lambda: ["fastformer", "vanilla"])
    modes: list = field(default_factory=lambda: ["forward", "forward_backward"])
    vanilla_max_len: Optional[int] = 2048

    def spec(self) -> bn.BenchSpec:
        return bn.BenchSpec(
            lengths=list(self.lengths), base_tokens=self.base_tokens, warmup_iters=self.warmup_iters,
            timed_iters=self.timed_iters, heads=self.heads, head_dim=self.head_dim, layers=self.layers,
            seed=self.seed,
        )


@dataclass
class GradcheckSection:
    # Finite differences at full model width are slow; null keeps the model section's value.
    heads: Optional[int] = 4
    head_dim: Optional[int] = 8
    seq_len: int = 16
    h: float = 1e-5
    max_scalars: int = 10_000
    seed: int = 0


@dataclass
class AblateSection:
    groups: list = field(default_factory=lambda: ["interaction", "sharing"])
    stop_at_threshold: bool = False


@dataclass
class RunConfig:
    model: FastformerConfig = field(default_factory=FastformerConfig)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    bench: BenchSection = field(default_factory=BenchSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    output: str = "runs"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "model": FastformerConfig,
    "train": tr.TrainConfig,
    "bench": BenchSection,
    "gradcheck": GradcheckSection,
    "ablate": AblateSection,
}


def _section(cls, values: dict, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key}")
    return cls(**values)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    kwargs = {}
    for key, value in doc.items():
        if key == "output":
            if not isinstance(value, str):
                raise ConfigError("output must be a directory path string")
            kwargs["output"] = value
        elif key in _SECTIONS:
            kwargs[key] = _section(_SECTIONS[key], value, key)
        else:
            raise ConfigError(f"unknown config key {key}")
    return RunConfig(**kwargs)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list) -> dict:
    """Apply ``section.key=value`` strings in order; the last writer wins."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        path, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        value = _parse_value(raw)
        if path == "output":
            doc["output"] = value
            continue
        section, dot, key = path.partition(".")
        if not dot or section not in _SECTIONS:
            raise ConfigError(f"unknown config key {path}")
        doc.setdefault(section, {})[key] = value
    return doc


def load_config(path: Optional[str], overrides: list, out: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    doc: dict = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    doc = apply_overrides(doc, overrides)
    if out is not None:
        doc["output"] = out
    if seed is not None:
        for section in ("train", "bench", "gradcheck"):
            doc.setdefault(section, {})["seed"] = seed
    try:
        config = config_from_dict(doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    problems = config.model.problems() + config.train.problems()
    if problems:
        raise ConfigError("; ".join(problems))
    return config


def run_dir(config: RunConfig, command: str) -> Path:
    """Fresh timestamped directory with the resolved config echoed into it."""
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = Path(config.output) / f"{command}-{stamp}"
    path.mkdir(parents=True, exist_ok=False)
    (path / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(config: RunConfig) -> int:
    out = run_dir(config, "train")
    try:
        result = tr.train_loop(config.model, config.train, out_dir=out)
    except DivergenceError as exc:
        print(f"diverged: {exc}; last finite step {exc.last_finite_step}", file=sys.stderr)
        return 2
    print(f"final val_accuracy {result.final_accuracy:.4f}")
    print(f"metrics {result.metrics_csv}")
    print(f"checkpoint {result.checkpoint}")
    return 0


def _group(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "layers":
        return ".".join(parts[:3])
    return parts[0]


def cmd_gradcheck(config: RunConfig) -> int:
    gc = config.gradcheck
    model_cfg = dataclasses.replace(
        config.model,
        heads=gc.heads or config.model.heads,
        head_dim=gc.head_dim or config.model.head_dim,
        max_len=max(config.model.max_len, gc.seq_len),
    )
    data = tr.gen_majority(gc.seed, 1, gc.seq_len, model_cfg.vocab_size)
    label = int(data.labels[0]) % model_cfg.num_classes
    report = tr.grad_check(model_cfg, (data.sequences[0], label), h=gc.h, seed=gc.seed, max_scalars=gc.max_scalars)
    groups: dict = {}
    for name, err in report.per_param.items():
        groups[_group(name)] = max(err, groups.get(_group(name), 0.0))
    for group, err in groups.items():
        print(f"{group:32s} max_rel_error {err:.3e}")
    print(f"checked {report.checked_scalars} of {report.total_scalars} scalars ({report.kink_skipped} on ReLU kinks skipped)")
    print(f"max_rel_error {report.max_rel_error:.3e}")
    return 0 if report.max_rel_error < GRADCHECK_TOLERANCE else 2


def cmd_bench(config: RunConfig) -> int:
    section = config.bench
    spec = section.spec()
    problems = spec.problems()
    for impl in section.implementations:
        if impl not in bn.IMPLEMENTATIONS:
            problems.append(f"unknown implementation {impl!r}")
    for mode in section.modes:
        if mode not in bn.MODES:
            problems.append(f"unknown bench mode {mode!r}")
    if problems:
        raise ConfigError("; ".join(problems))
    out = run_dir(config, "bench")
    records = bn.sweep(spec, section.implementations, section.modes, section.vanilla_max_len)
    bn.emit_csv(records, out / "bench.csv")
    bn.emit_plot_data(records, out / "plot.txt")
    for impl in section.implementations:
        for mode in section.modes:
            rows = [r for r in records if r.implementation == impl and r.mode == mode]
            if len(rows) >= 3:
                print(f"{impl:10s} {mode:16s} log-log slope {bn.fit_loglog_slope(rows):.3f}")
            else:
                print(f"{impl:10s} {mode:16s} too few points for a slope")
    print(f"csv {out / 'bench.csv'}")
    return 0


def ablation_variants(base: FastformerConfig, groups) -> list:
    """``(name, config)`` pairs for the interaction and parameter-sharing studies."""
    variants = []
    if "interaction" in groups:
        for mode in ("product", "add", "concat_project"):
            variants.append((f"interaction={mode}", dataclasses.replace(base, interaction=mode)))
    if "sharing" in groups:
        sharing = {
            "none": dict(share_qv=False, share_heads=False, share_layers=False),
            "qv": dict(share_qv=True, share_heads=False, share_layers=False),
            "qv+head": dict(share_qv=True, share_heads=True, share_layers=False),
            "qv+layer": dict(share_qv=True, share_heads=False, share_layers=True),
        }
        for name, flags in sharing.items():
            variants.append((f"sharing={name}", dataclasses.replace(base, interaction="product", **flags)))
    unknown = set(groups) - {"interaction", "sharing"}
    if unknown:
        raise ConfigError(f"unknown ablation group(s) {sorted(unknown)}")
    return variants


def run_ablation(config: RunConfig, out: Optional[Path] = None) -> list[dict]:
    train_cfg = dataclasses.replace(config.train, stop_at_threshold=config.ablate.stop_at_threshold)
    rows = []
    for name, model_cfg in ablation_variants(config.model, config.ablate.groups):
        result = tr.train_loop(model_cfg, train_cfg)
        rows.append({
            "variant": name,
            "final_accuracy": result.final_accuracy,
            "params": mdl.count_attention_params(model_cfg),
            "steps_to_threshold": result.steps_to_threshold,
        })
        log.info("%s acc %.4f steps %s", name, result.final_accuracy, result.steps_to_threshold)
    if out is not None:
        with open(out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "final_accuracy", "params", "steps_to_threshold"])
            for row in rows:
                steps = "" if row["steps_to_threshold"] is None else row["steps_to_threshold"]
                writer.writerow([row["variant"], f"{row['final_accuracy']:.6g}", row["params"], steps])
    return rows


def cmd_ablate(config: RunConfig) -> int:
    out = run_dir(config, "ablate")
    try:
        rows = run_ablation(config, out / "ablation.csv")
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 2
    for row in rows:
        print(f"{row['variant']:22s} acc {row['final_accuracy']:.4f} params {row['params']:7d} steps_to_threshold {row['steps_to_threshold']}")
    print(f"csv {out / 'ablation.csv'}")
    return 0


def cmd_params(config: RunConfig) -> int:
    cfg = config.model
    per_layer = mdl.count_attention_params_per_layer(cfg)
    formula = mdl.count_attention_params(cfg)
    structural = mdl.structural_attention_params(mdl.build_model(cfg, 0))
    stored_layers = 1 if cfg.share_layers else max(cfg.num_layers, 1)
    print(f"attention params per layer (formula): {per_layer}")
    print(f"attention params per layer (structural): {structural // stored_layers if cfg.num_layers else 0}")
    print(f"attention params total (formula): {formula}")
    print(f"attention params total (structural): {structural}")
    ok = formula == structural
    print("counts agree" if ok else "counts DISAGREE")
    return 0 if ok else 2


COMMANDS = {
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "params": cmd_params,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastadd", description="Additive-attention transformer toolkit")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    parser.add_argument("--out", help="output directory (overrides output)")
    parser.add_argument("--seed", type=int, help="seed for train, bench and gradcheck")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get("FASTADD_THREADS")
    if threads and args.command != "bench":
        log.info("FASTADD_THREADS=%s (evaluation is single-context; value recorded only)", threads)
    try:
        config = load_config(args.config, args.overrides, args.out, args.seed)
        return COMMANDS[args.command](config)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except FastaddError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
