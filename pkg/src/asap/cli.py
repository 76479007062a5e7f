"""``asap`` command line: gen-data, train, eval, viz-attn.

Exit status is 0 on success, 2 for usage or configuration problems and 1 for
failures while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from .data.auxtext import AuxTextClient
from .data.manifest import ManifestError, load_samples, write_dataset
from .data.synthetic import ConfigError, generate_dataset, parse_mix
from .metrics import per_type_f1, write_records
from .model import load_checkpoint
from .training import ABLATIONS, DESK_OVERRIDES, TrainConfig, evaluate, fit
from .viz import render_attention

log = logging.getLogger("asap")


class UsageError(Exception):
    """Bad flags, config or inputs; maps to exit status 2."""


def parse_ablations(spec: str | None) -> list[str]:
    if not spec:
        return []
    if spec.strip().lower() == "all":
        return list(ABLATIONS)
    names = [s.strip().upper() for s in spec.split(",") if s.strip()]
    bad = [n for n in names if n not in ABLATIONS]
    if bad:
        raise UsageError(f"unknown ablation(s) {bad}; choose from {', '.join(a.lower() for a in ABLATIONS)} or 'all'")
    return names


def _data_path(path: str) -> Path:
    p = Path(path)
    manifest = p / "manifest.jsonl" if p.is_dir() else p
    if not manifest.is_file():
        raise UsageError(f"no manifest found at {manifest}")
    return manifest


def build_config(args) -> TrainConfig:
    values = dict(DESK_OVERRIDES) if args.preset == "desk" else {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        try:
            values.update(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    for key in ("epochs", "batch_size", "seed", "lr_peak", "warmup_steps"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    if args.ablate is not None:
        values["ablations"] = parse_ablations(args.ablate)
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    try:
        mix = parse_mix(args.mix) if args.mix else None
        samples = generate_dataset(args.n, seed=args.seed, mix=mix)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    if args.use_llm:
        client = AuxTextClient.from_env(cache_dir=args.llm_cache)
        if not client.endpoint:
            log.warning("--use-llm given but ASAP_LLM_ENDPOINT is unset; keeping stub texts")
        for s in samples:
            s.caption = client.caption(s)
            s.explanation = client.explanation(s)
    path = write_dataset(args.out, samples)
    log.info("wrote %d samples to %s", len(samples), path)


def cmd_train(args) -> None:
    cfg = build_config(args)
    train = load_samples(_data_path(args.data), cfg.model_config().max_text_len)
    val = load_samples(_data_path(args.val), cfg.model_config().max_text_len, require_aux=False) if args.val else None
    torch.set_num_threads(args.threads)
    out = Path(args.out)
    _, history = fit(train, val, cfg, out_dir=out, max_steps=args.max_steps)
    final = history[-1] if history else {}
    log.info("finished after %s steps; final metrics %s", final.get("step"), final.get("val"))
    print(json.dumps({"config": asdict(cfg), "final": final}, indent=2))


def cmd_eval(args) -> None:
    if not Path(args.ckpt).is_file():
        raise UsageError(f"checkpoint {args.ckpt} not found")
    model, _ = load_checkpoint(args.ckpt)
    samples = load_samples(_data_path(args.data), model.cfg.max_text_len, require_aux=False)
    torch.set_num_threads(args.threads)
    records, table = evaluate(model, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records(out / "records.jsonl", records)
    (out / "metrics.json").write_text(json.dumps(table, indent=2))
    (out / "per_type_f1.json").write_text(json.dumps(per_type_f1(records), indent=2))
    print(json.dumps(table, indent=2))


def cmd_viz_attn(args) -> None:
    if not Path(args.ckpt).is_file():
        raise UsageError(f"checkpoint {args.ckpt} not found")
    model, _ = load_checkpoint(args.ckpt)
    samples = load_samples(_data_path(args.data), model.cfg.max_text_len, require_aux=False)
    by_id = {s.id: s for s in samples}
    if args.sample:
        missing = [i for i in args.sample if i not in by_id]
        if missing:
            raise UsageError(f"sample id(s) not in manifest: {missing}")
        chosen = [by_id[i] for i in args.sample]
    else:
        chosen = [s for s in samples if s.fake_text_pos][: args.n]
    words = [int(w) for w in args.words.split(",")] if args.words else None
    for s in chosen:
        summary = render_attention(model, s, args.out, words)
        log.info("%s: %d word maps", s.id, len(summary["word_files"]))


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asap", description="Synthetic multimodal manipulation detection and grounding.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, help="output directory (images/ + manifest.jsonl)")
    g.add_argument("--n", type=int, default=2000, help="number of samples")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mix", help='category proportions, e.g. "NONE=0.5,FS=0.25,TA=0.25"')
    g.add_argument("--use-llm", action="store_true", help="fetch captions/explanations from ASAP_LLM_ENDPOINT")
    g.add_argument("--llm-cache", help="cache directory for remote responses")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True, help="training dataset directory or manifest")
    t.add_argument("--val", help="validation dataset directory or manifest")
    t.add_argument("--out", required=True, help="run directory for logs and checkpoints")
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--preset", choices=("desk", "full"), default="desk",
                   help="base settings before --config and flags (default: desk)")
    t.add_argument("--ablate", help="comma list of lma,mgca,pmm,hnp or 'all'")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr-peak", dest="lr_peak", type=float)
    t.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", dest="max_steps", type=int, help="stop after this many updates")
    t.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a dataset with a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz-attn", help="write text-to-patch attention heatmaps")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--sample", action="append", help="sample id (repeatable); default: first text-manipulated samples")
    v.add_argument("--n", type=int, default=4, help="number of samples when --sample is not given")
    v.add_argument("--words", help="comma list of word positions; default: manipulated words")
    v.set_defaults(func=cmd_viz_attn)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except (UsageError, ManifestError) as exc:
        print(f"asap {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to exit status 1
        log.exception("asap %s failed: %s", args.command, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
