"""Command-line entry point wiring all modules into reproducible runs.

Commands: ingest, train-coarse, train-fine, generate, evaluate, toy-demo.
Every command takes a TOML config (sections mirror the module configs), a
mandatory seed where randomness is involved, and repeatable
``--override section.key=value`` flags.  Artifacts are written atomically
and embed the config hash and seed.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from . import evaluate as ev
from .align import VisitHistory
from .diffusion import SamplerConfig, config_hash, load_checkpoint, save_checkpoint
from .ingest import IngestConfig, build_corpus, parse_checkins, split
from .pipeline import PerturbConfig, StageTrainConfig, synthesize, train_stage1, train_stage2
from .types import POIIndex, hat_to_json, poi_index_from_corpus, read_jsonl
from .toycity import toy_corpus, toy_poi_index, toy_stage_config

log = logging.getLogger(__name__)

DEFAULTS: dict = {
    "run": {"granularity": 3600, "duration": 7 * 86400, "count": 200},
    "ingest": {
        "format": "jsonl",
        "window_start": "2012-04-01",
        "window_end": "2012-07-01",
        "min_visits": 5,
        "bbox": [],
    },
    "stage1": {"epochs": 400},
    "stage2": {"epochs": 150},
    "perturb": {},
    "sampler": {"kind": "ddim", "ddim_steps": 50, "eta": 0.0},
    "align": {"radius_m": 200.0},
    "evaluate": {"bins": 50},
    "privacy": {"tr_s": 200.0, "tr_t": 1800.0, "sample_count": 1500},
    "toy": {"n_traces": 200, "stage1_epochs": 60, "stage2_epochs": 20},
}


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    """Validated bag of all module settings plus the seed."""

    data: dict
    seed: int
    device: str = "cpu"

    def section(self, name: str) -> dict:
        return self.data.get(name, {})

    @property
    def granularity(self) -> float:
        return float(self.data["run"]["granularity"])

    @property
    def duration(self) -> float:
        return float(self.data["run"]["duration"])

    def validate(self) -> None:
        gran, dur = self.granularity, self.duration
        if gran <= 0 or dur <= 0:
            raise ConfigError("granularity and duration must be positive")
        if abs(dur / gran - round(dur / gran)) > 1e-9:
            raise ConfigError(
                f"granularity must divide duration: duration={dur:.0f}s, "
                f"granularity={gran:.0f}s"
            )
        if gran % 60:
            raise ConfigError(f"granularity must be a multiple of 60s, got {gran:.0f}")

    def hash(self) -> str:
        return config_hash({"config": self.data, "seed": self.seed})


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value: {text!r}")
    key, raw = text.split("=", 1)
    path = key.strip().split(".")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return path, value


def load_run_config(path: str | None, overrides: list[str], seed: int,
                    device: str = "cpu") -> RunConfig:
    data = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(p, "rb") as f:
            data = _deep_merge(data, tomllib.load(f))
    for text in overrides:
        keys, value = _parse_override(text)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    cfg = RunConfig(data=data, seed=seed, device=device)
    cfg.validate()
    return cfg


def _atomic_write(path: Path, write_fn) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            write_fn(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_corpus_artifact(path: Path, corpus, cfg: RunConfig) -> None:
    """JSONL traces preceded by one artifact-metadata line."""
    meta = {"artifact_meta": {"config_hash": cfg.hash(), "seed": cfg.seed,
                              "count": len(corpus)}}

    def write(f):
        f.write(json.dumps(meta, separators=(",", ":")) + "\n")
        for h in corpus:
            f.write(hat_to_json(h) + "\n")

    _atomic_write(path, write)


def read_corpus_artifact(path, default_duration=None):
    corpus = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "trace_id" not in obj:
                continue  # metadata line
            from .types import hat_from_json
            corpus.append(hat_from_json(line, default_duration))
    return corpus


def _stage_cfg(section: dict, toy: bool = False, stage: int = 1) -> StageTrainConfig:
    base = toy_stage_config(section.get("epochs", 60), stage) if toy else StageTrainConfig(
        event_emphasis=(stage == 2))
    for k, v in section.items():
        if hasattr(base, k):
            if k == "channel_multipliers":
                v = tuple(v)
            setattr(base, k, v)
    return base


def _sampler(cfg: RunConfig) -> SamplerConfig:
    s = cfg.section("sampler")
    return SamplerConfig(kind=s.get("kind", "ddim"),
                         ddim_steps=int(s.get("ddim_steps", 50)),
                         eta=float(s.get("eta", 0.0)))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed or 0, args.device)
    ing = cfg.section("ingest")
    fmt = args.format or ing.get("format", "jsonl")
    bbox = tuple(ing["bbox"]) if ing.get("bbox") else None
    icfg = IngestConfig(
        source_format=fmt,
        window_start=_as_datetime(ing["window_start"]),
        window_end=_as_datetime(ing["window_end"]),
        duration=cfg.duration,
        min_visits=int(ing.get("min_visits", 5)),
        city_bbox=bbox,
    )
    if not Path(args.input).exists():
        raise ConfigError(f"input file not found: {args.input}")
    by_user, stats = parse_checkins(args.input, icfg)
    corpus = build_corpus(by_user, icfg)
    if len(corpus) >= 10:
        parts = split(corpus, seed=cfg.seed)
        log.info("split sizes: train=%d val=%d test=%d",
                 len(parts.train), len(parts.val), len(parts.test))
    write_corpus_artifact(Path(args.out), corpus, cfg)
    print(f"ingested {stats.kept} check-ins ({stats.malformed} malformed, "
          f"{stats.outside_window} outside window, {stats.outside_bbox} outside bbox) "
          f"-> {len(corpus)} traces -> {args.out}")
    return 0


def _as_datetime(v) -> datetime:
    if isinstance(v, datetime):
        return v
    if hasattr(v, "year") and not isinstance(v, str):  # tomllib date
        return datetime(v.year, v.month, v.day)
    return datetime.fromisoformat(str(v))


def cmd_train_coarse(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed, args.device)
    corpus = read_corpus_artifact(args.corpus, cfg.duration)
    stage_cfg = _stage_cfg(cfg.section("stage1"), toy=args.toy, stage=1)
    payload = train_stage1(corpus, cfg.granularity, stage_cfg, seed=cfg.seed)
    payload["config"]["run_config_hash"] = cfg.hash()
    save_checkpoint(args.out, model_state=payload["model_state"],
                    ema_state=payload["ema_state"], schedule=payload["schedule"],
                    config=payload["config"], extra=payload["extra"])
    print(f"stage-1 checkpoint -> {args.out} "
          f"(final loss {payload['extra']['loss_history'][-1]:.4f})")
    return 0


def cmd_train_fine(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed, args.device)
    corpus = read_corpus_artifact(args.corpus, cfg.duration)
    stage_cfg = _stage_cfg(cfg.section("stage2"), toy=args.toy, stage=2)
    perturb = PerturbConfig(**cfg.section("perturb"))
    payload = train_stage2(corpus, cfg.granularity, stage_cfg, perturb,
                           seed=cfg.seed)
    payload["config"]["run_config_hash"] = cfg.hash()
    save_checkpoint(args.out, model_state=payload["model_state"],
                    ema_state=payload["ema_state"], schedule=payload["schedule"],
                    config=payload["config"], extra=payload["extra"])
    print(f"stage-2 checkpoint -> {args.out} "
          f"(final loss {payload['extra']['loss_history'][-1]:.4f})")
    return 0


def cmd_generate(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed, args.device)
    s1 = load_checkpoint(args.coarse)
    s2 = load_checkpoint(args.fine)
    corpus = read_corpus_artifact(args.corpus, cfg.duration)
    index = poi_index_from_corpus(corpus)
    al = cfg.section("align")
    history = VisitHistory.build(
        corpus, index,
        kernel=al.get("kernel", "gaussian"),
        bandwidth=float(al.get("bandwidth", 3600.0)),
    )
    count = args.count if args.count is not None else int(cfg.data["run"]["count"])
    synth = synthesize(count, s1, s2, index, history, seed=cfg.seed,
                       radius_m=float(al.get("radius_m", 200.0)),
                       sampler=_sampler(cfg))
    write_corpus_artifact(Path(args.out), synth, cfg)
    print(f"synthesized {len(synth)} traces -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed or 0, args.device)
    real = read_corpus_artifact(args.real)
    synth = read_corpus_artifact(args.synth)
    report = ev.fidelity_report(real, synth, bins=int(cfg.section("evaluate").get("bins", 50)))
    privacy = None
    if args.privacy:
        p = cfg.section("privacy")
        pcfg = ev.PrivacyConfig(
            tr_s=float(p.get("tr_s", 200.0)), tr_t=float(p.get("tr_t", 1800.0)),
            sample_count=min(int(p.get("sample_count", 1500)), len(synth)),
        )
        privacy = ev.privacy_report(synth, real, pcfg, seed=cfg.seed)
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed}
    out = Path(args.out)
    _atomic_write(out, lambda f: json.dump(_report_payload(report, privacy, meta), f, indent=2))
    ev.write_report_csv(out.with_suffix(".csv"), report)
    print(json.dumps({"jsd": report.jsd_by_metric, "average": report.average}))
    return 0


def _report_payload(report, privacy, meta):
    payload = {"fidelity": report.to_dict(), "meta": meta}
    if privacy is not None:
        payload["privacy"] = privacy.to_dict()
    return payload


def cmd_toy_demo(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed, args.device)
    toy = cfg.section("toy")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    corpus = toy_corpus(int(toy.get("n_traces", 200)), seed=cfg.seed)
    write_corpus_artifact(outdir / "corpus.jsonl", corpus, cfg)
    index = toy_poi_index()
    history = VisitHistory.build(corpus, index)
    history.save(outdir / "visit_history.npz")

    s1_cfg = toy_stage_config(int(toy.get("stage1_epochs", 60)), stage=1)
    s2_cfg = toy_stage_config(int(toy.get("stage2_epochs", 20)), stage=2)
    s1 = train_stage1(corpus, cfg.granularity, s1_cfg, seed=cfg.seed)
    save_checkpoint(outdir / "coarse.ckpt", model_state=s1["model_state"],
                    ema_state=s1["ema_state"], schedule=s1["schedule"],
                    config=s1["config"], extra=s1["extra"])
    s2 = train_stage2(corpus, cfg.granularity, s2_cfg, PerturbConfig(),
                      seed=cfg.seed)
    save_checkpoint(outdir / "fine.ckpt", model_state=s2["model_state"],
                    ema_state=s2["ema_state"], schedule=s2["schedule"],
                    config=s2["config"], extra=s2["extra"])

    count = args.count if args.count is not None else int(toy.get("count", 50))
    synth = synthesize(count, s1, s2, index, history, seed=cfg.seed,
                       sampler=_sampler(cfg))
    write_corpus_artifact(outdir / "synth.jsonl", synth, cfg)
    report = ev.fidelity_report(corpus, synth)
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed}
    _atomic_write(outdir / "report.json",
                  lambda f: json.dump(_report_payload(report, None, meta), f, indent=2))
    print(f"toy demo complete: average JSD {report.average:.3f} -> {outdir}")
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synhat",
        description="Coarse-to-fine diffusion synthesis of human activity traces",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_seed=True):
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--seed", type=int, required=needs_seed,
                       default=None if needs_seed else 0)
        p.add_argument("--device", default="cpu", choices=["cpu"],
                       help="compute device (cpu-only build)")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE", help="config override (repeatable)")

    p = sub.add_parser("ingest", help="parse raw check-ins into a HAT corpus")
    common(p, needs_seed=False)
    p.add_argument("--format", default=None,
                   choices=["foursquare_tsv", "gowalla_tsv", "jsonl"])
    p.add_argument("--city", default=None, help="label recorded in logs")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train-coarse", help="train the stage-1 denoiser")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--toy", action="store_true", help="use the down-sized preset")
    p.set_defaults(fn=cmd_train_coarse)

    p = sub.add_parser("train-fine", help="train the stage-2 denoiser + context encoder")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--toy", action="store_true")
    p.set_defaults(fn=cmd_train_fine)

    p = sub.add_parser("generate", help="synthesize HATs from trained checkpoints")
    common(p)
    p.add_argument("--coarse", required=True)
    p.add_argument("--fine", required=True)
    p.add_argument("--corpus", required=True,
                   help="training corpus (POI index + visit history)")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="fidelity/privacy report")
    common(p, needs_seed=False)
    p.add_argument("--real", required=True)
    p.add_argument("--synth", required=True)
    p.add_argument("--privacy", action="store_true")
    p.add_argument("--out", default="report.json")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("toy-demo", help="end-to-end run on the bundled city")
    common(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_toy_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RuntimeError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
