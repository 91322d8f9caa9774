"""Command-line entry point: ``madapt <mode> --config file --out dir [--key value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import FIELD_TYPES, MODES, ConfigError, ExperimentConfig, parse_config, print_config
from .data import DataError, raw_features
from .evaluation import evaluate, probe_domain_gap
from .experiments import (
    Benchmark,
    build_benchmark,
    determinism,
    joint_probe,
    pretrained,
    run_ablation,
    run_adapt,
    run_finetune,
    run_fraction_study,
    run_target_only,
    write_splits,
)
from .training import DivergenceError, RunRecord

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("madapt")


def parse_overrides(extra: list[str]) -> dict[str, str]:
    """Turn ``--key value`` / ``--key=value`` pairs into a raw override dict."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override --{key} needs a value")
            i += 1
            value = extra[i]
        key = key.replace("-", "_")
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        out[key] = value
        i += 1
    return out


def resolve_config(mode: str, config_path: str | None, out: str | None, extra: list[str]) -> ExperimentConfig:
    text = ""
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc.strerror}") from exc
    overrides = parse_overrides(extra)
    overrides["mode"] = mode
    if out is not None:
        overrides["out"] = out
    return parse_config(text, overrides)


def _meta(bench: Benchmark) -> dict[str, object]:
    return {"source_answers": list(bench.source_vocab.answers), "target_answers": list(bench.target_vocab.answers)}


def _load_model(cfg: ExperimentConfig, bench: Benchmark):
    model, ckpt = load_checkpoint(cfg.checkpoint, cfg.model_config(len(bench.source_vocab), len(bench.target_vocab)))
    for key, vocab in (("source_answers", bench.source_vocab), ("target_answers", bench.target_vocab)):
        saved = ckpt.meta.get(key)
        if saved is not None and tuple(saved) != vocab.answers:
            raise CheckpointError(f"checkpoint {key} differ from the vocabulary built from the data")
    return model


def _source_model(cfg: ExperimentConfig, bench: Benchmark, record: RunRecord):
    if cfg.checkpoint:
        return _load_model(cfg, bench)
    model, rec = pretrained(cfg, bench, cfg.seed)
    record.extend(rec)
    return model


def run(cfg: ExperimentConfig) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = print_config(cfg)
    (out / "config.echo").write_text(echo, encoding="utf-8")

    if cfg.mode == "gen-data":
        paths = write_splits(cfg, out)
        for name, p in paths.items():
            log.info("wrote %s -> %s", name, p)
        return

    bench = build_benchmark(cfg)
    record = RunRecord(cfg.seed, echo)
    model = None
    domain = "target"

    if cfg.mode == "train-source":
        model, rec = pretrained(cfg, bench, cfg.seed)
        record.extend(rec)
        domain = "source"
    elif cfg.mode == "target-only":
        model, rec = run_target_only(cfg, bench, cfg.seed)
        record.extend(rec)
    elif cfg.mode == "finetune":
        src = _source_model(cfg, bench, record)
        model, rec = run_finetune(cfg, bench, cfg.seed, src)
        record.extend(rec)
    elif cfg.mode == "adapt":
        src = _source_model(cfg, bench, record)
        model, rec = run_adapt(cfg, bench, cfg.seed, src)
        record.extend(rec)
    elif cfg.mode == "eval":
        if not cfg.checkpoint:
            raise ConfigError("eval needs checkpoint=<path>")
        model = _load_model(cfg, bench)
    elif cfg.mode == "probe":
        lines = ["features,mmd_sq,probe_accuracy"]
        raw = probe_domain_gap(
            raw_features(bench.source_test, cfg.token_vocab),
            raw_features(bench.target_test, cfg.token_vocab),
            cfg.kernel(),
            cfg.seed,
        )
        lines.append(f"raw,{raw.mmd_sq!r},{raw.accuracy!r}")
        if cfg.checkpoint:
            res = joint_probe(_load_model(cfg, bench), bench, cfg, cfg.seed)
            lines.append(f"joint,{res.mmd_sq!r},{res.accuracy!r}")
        (out / "probe.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        return
    elif cfg.mode == "ablate":
        (out / "ablation.csv").write_text(run_ablation(cfg, bench).to_csv(), encoding="utf-8")
        return
    elif cfg.mode == "fraction-study":
        (out / "fraction.csv").write_text(run_fraction_study(cfg).to_csv(), encoding="utf-8")
        return

    (out / "run.csv").write_text(record.to_csv(), encoding="utf-8")
    if domain == "source":
        report = evaluate(model, bench.source_test, "source", bench.source_vocab.answers)
    else:
        report = evaluate(model, bench.target_test, "target", bench.target_vocab.answers)
    (out / "eval.csv").write_text(report.to_csv(), encoding="utf-8")
    if cfg.mode != "eval":
        save_checkpoint(model, out / "model.ckpt", echo, _meta(bench))
    log.info("%s accuracy %.4f on %d samples", domain, report.overall, report.count)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="madapt", description="Multi-modal domain adaptation experiments.", allow_abbrev=False)
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", help="output directory (overrides out=)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.mode, args.config, args.out, extra)
        with determinism(cfg.deterministic):
            run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
