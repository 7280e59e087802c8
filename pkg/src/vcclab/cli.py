"""``vcclab`` command line.

Subcommands: crcalc, gen-data, train, eval, sweep, probe. Runs write to
``$VCCLAB_OUT/<run-id>/`` (default root ``runs``), where the run id hashes
the effective config; that config is echoed there as ``config.toml``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .accounting import compute_report, plan_average, spec_tokens, compression_ratio
from .compressor import IDENTITY, CompressorSpec
from .config import ExperimentConfig, load_config
from .errors import ConfigError, VCCError
from .schedule import SCHEME_NAMES, named_scheme

log = logging.getLogger("vcclab")

OUT_ENV = "VCCLAB_OUT"


class UsageError(Exception):
    """Bad arguments or config; maps to exit code 2."""


def _ints(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _parse_spec(text: str) -> CompressorSpec:
    if text.strip().lower() in ("identity", "none"):
        return IDENTITY
    return CompressorSpec.parse(text)


# crcalc


def cmd_crcalc(args) -> int:
    if args.scheme:
        if args.K is not None or args.S is not None:
            raise UsageError("--scheme cannot be combined with -K/-S")
        return _crcalc_scheme(args)
    if (args.K is None) != (args.S is None):
        raise UsageError("-K and -S must be given together")
    try:
        rep = compute_report(args.N, args.L, args.K, args.S, args.d_model, args.vocab, args.text_len)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if args.json:
        print(rep.to_json())
    else:
        print(rep.to_text())
        for n in rep.notes:
            print(f"note: {n}")
    return 0


def _crcalc_scheme(args) -> int:
    try:
        plan = named_scheme(args.scheme, args.scale, args.N)
        N = 32 if args.scale == "full" else args.N
        avg = plan_average(plan, N, args.L)
    except ValueError as e:
        raise UsageError(str(e)) from e
    rows = []
    for i, st in enumerate(plan.stages, start=1):
        tokens = spec_tokens(st.spec, N, args.L)
        if st.spec.is_identity:
            K = S = None
            pct = 100
        else:
            K, S = st.spec.layer, st.spec.stride
            pct = compression_ratio(N, args.L, K, S)[1]
        rows.append({"stage": i, "fraction": st.fraction, "K": K, "S": S, "tokens": tokens, "cr_percent": pct})
    summary = {
        "scheme": plan.name,
        "scale": args.scale,
        "N": N,
        "L": args.L,
        "stages": rows,
        "mean_tokens": avg.tokens,
        "mean_cr_percent": avg.cr_percent,
        "reported_tokens": avg.reported_tokens,
        "matches_reported": avg.reconciled,
    }
    if args.json:
        print(json.dumps(summary, indent=2))
        return 0
    for r in rows:
        k = "-" if r["K"] is None else r["K"]
        s = "-" if r["S"] is None else r["S"]
        print(f"stage {r['stage']}: fraction={r['fraction']:.4f} K={k} S={s} tokens={r['tokens']} cr={r['cr_percent']}%")
    line = f"mean: tokens={avg.tokens:.2f} cr={avg.cr_percent}%"
    if avg.reported_tokens is not None:
        flag = "matches" if avg.reconciled else "DIFFERS from"
        line += f"  ({flag} reported {avg.reported_tokens})"
    print(line)
    return 0


# config-driven commands


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise UsageError("--config is required")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from e
    except ConfigError as e:
        raise UsageError(f"invalid config: {e}") from e
    return cfg


def _run_dir(args, cfg: ExperimentConfig) -> Path:
    root = Path(args.out or os.environ.get(OUT_ENV, "runs"))
    d = root / cfg.run_id()
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.toml").write_text(cfg.to_toml(), encoding="utf-8")
    return d


def _datasets(cfg: ExperimentConfig):
    from .tasks import read_jsonl

    data = cfg.data.data_config()
    train = read_jsonl(cfg.data.train_path) if cfg.data.train_path else None
    ev = read_jsonl(cfg.data.eval_path) if cfg.data.eval_path else data.eval_set()
    return train, ev


def _checkpoint(args, run_dir: Path):
    from .model import load_checkpoint

    path = Path(args.checkpoint) if args.checkpoint else run_dir / "final.ckpt"
    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found; run `vcclab train` with this config first or pass --checkpoint")
    model, _ = load_checkpoint(path)
    return model


def _slug(spec: CompressorSpec) -> str:
    if spec.is_identity:
        return "identity"
    return f"{spec.kind.value}_K{spec.layer}_S{spec.stride}"


def _emit(obj: dict, path: Path | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if path is not None:
        path.write_text(text + "\n", encoding="utf-8")


def cmd_gen_data(args) -> int:
    from .tasks import write_jsonl

    cfg = _config(args)
    d = _run_dir(args, cfg)
    data = cfg.data.data_config()
    write_jsonl(data.train_set(), d / "train.jsonl")
    write_jsonl(data.eval_set(), d / "eval.jsonl")
    _emit({"run_dir": str(d), "train": str(d / "train.jsonl"), "eval": str(d / "eval.jsonl"),
           "n_train": data.n_train, "n_eval": data.n_eval, "seeds": cfg.seeds()}, None)
    return 0


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _config(args)
    run = cfg.run_config()
    d = _run_dir(args, cfg)
    log.info("training run %s in %s", cfg.run_id(), d)
    _, metrics = train(run, d)
    fe = metrics.final_eval
    _emit({"run_dir": str(d), "run_id": cfg.run_id(), "plan": run.plan.name, "steps": run.train.steps,
           "final_accuracy": fe.accuracy, "flops_total": metrics.flops_total, "seeds": cfg.seeds()}, None)
    return 0


def _eval_subset(cfg: ExperimentConfig, ev):
    n = cfg.diagnostics.eval_samples
    return ev[:n] if n > 0 else ev


def cmd_eval(args) -> int:
    from .trainer import evaluate

    cfg = _config(args)
    spec = args.spec
    d = _run_dir(args, cfg)
    model = _checkpoint(args, d)
    _, ev = _datasets(cfg)
    ev = _eval_subset(cfg, ev)
    try:
        spec.validate(model.config.n_layers)
    except ValueError as e:
        raise UsageError(str(e)) from e
    acc = evaluate(model, ev, spec, system_prompt_len=cfg.data.system_prompt_len)
    out = {"spec": spec.to_dict(), "label": spec.label(), "accuracy": acc, "overall": acc["overall"],
           "n": len(ev), "seeds": cfg.seeds()}
    _emit(out, d / f"eval_{_slug(spec)}.json")
    return 0


def cmd_sweep(args) -> int:
    from .diagnostics import compression_sweep, sweep_csv

    cfg = _config(args)
    d = _run_dir(args, cfg)
    model = _checkpoint(args, d)
    Ks = args.Ks or cfg.diagnostics.Ks
    Ss = args.Ss or cfg.diagnostics.Ss
    _, ev = _datasets(cfg)
    try:
        points = compression_sweep(model, _eval_subset(cfg, ev), Ks, Ss, cfg.data.system_prompt_len)
    except ValueError as e:
        raise UsageError(str(e)) from e
    (d / "sweep.csv").write_text(sweep_csv(points), encoding="utf-8")
    print(f"wrote {d / 'sweep.csv'} ({len(points)} points); seeds {cfg.seeds()}")
    return 0


def cmd_probe(args) -> int:
    from .diagnostics import attention_probe

    cfg = _config(args)
    d = _run_dir(args, cfg)
    model = _checkpoint(args, d)
    _, ev = _datasets(cfg)
    n = args.samples if args.samples is not None else cfg.diagnostics.probe_samples
    prof = attention_probe(model, ev, n, cfg.data.system_prompt_len)
    (d / "attn_profile.csv").write_text(prof.to_csv(), encoding="utf-8")
    print(f"wrote {d / 'attn_profile.csv'} ({prof.n_layers} layers, {prof.n_samples} samples); seeds {cfg.seeds()}")
    return 0


# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vcclab", description="Visual-token compression lab.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    cr = sub.add_parser("crcalc", help="token totals, compression ratio and FLOPs")
    cr.add_argument("-N", type=int, default=32, help="decoder layers (default 32)")
    cr.add_argument("-L", type=int, default=576, help="visual tokens (default 576)")
    cr.add_argument("-K", type=int, help="compress after this layer")
    cr.add_argument("-S", type=int, help="pooling stride")
    cr.add_argument("--scheme", choices=SCHEME_NAMES, help="report a named multi-stage scheme instead")
    cr.add_argument("--scale", choices=("full", "desk"), default="full")
    cr.add_argument("--d-model", type=int, default=4096)
    cr.add_argument("--vocab", type=int, default=32000)
    cr.add_argument("--text-len", type=int, default=0, help="text tokens added to every layer for FLOPs")
    cr.add_argument("--json", action="store_true")
    cr.set_defaults(func=cmd_crcalc)

    def with_config(p):
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--seed", type=int, help="override data, init and order seeds")
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
        return p

    with_config(sub.add_parser("gen-data", help="write train/eval JSONL")).set_defaults(func=cmd_gen_data)
    with_config(sub.add_parser("train", help="run a stage plan")).set_defaults(func=cmd_train)

    ev = with_config(sub.add_parser("eval", help="evaluate a checkpoint under one compressor"))
    ev.add_argument("--checkpoint", help="default: <run dir>/final.ckpt")
    ev.add_argument("--spec", type=_parse_spec, default=IDENTITY, help="e.g. K=2,S=8 or identity")
    ev.set_defaults(func=cmd_eval)

    sw = with_config(sub.add_parser("sweep", help="inference-time pooling sweep -> sweep.csv"))
    sw.add_argument("--checkpoint")
    sw.add_argument("--Ks", type=_ints)
    sw.add_argument("--Ss", type=_ints)
    sw.set_defaults(func=cmd_sweep)

    pr = with_config(sub.add_parser("probe", help="attention mass profile -> attn_profile.csv"))
    pr.add_argument("--checkpoint")
    pr.add_argument("--samples", type=int)
    pr.set_defaults(func=cmd_probe)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"vcclab {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (VCCError, ValueError, OSError) as e:
        print(f"vcclab {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
