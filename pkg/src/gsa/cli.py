"""Command-line entry point: ``gsa {equivcheck,gradcheck,bench,train,eval}``.

Exit codes: 0 success, 1 verification or evaluation failure, 2 usage or
configuration error.  ``GSA_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from . import bench, gradcheck, verify
from .checkpoint import CheckpointError
from .kernels import LINKS
from .model import GATE_MODES, ModelConfig
from .tasks import MqarSpec
from .tensor import DTYPES, ConfigError
from .training import EVAL_OFFSET, TrainConfig, TrainingDiverged, evaluate, load_checkpoint, train_loop

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _ints(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _words(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def cmd_equivcheck(a) -> int:
    kernels = verify.expand_kernels(a.kernel)
    tol = a.tol if a.tol is not None else verify.TOLERANCE[a.dtype]
    rows = verify.equivalence_suite(kernels, [a.T], a.C, a.d, a.m, a.seeds, a.dtype)
    bad = []
    for r in rows:
        ok = r.max_abs <= tol
        print(f"{r.kernel:10s} T={r.T:<5d} C={r.C:<5d} max|d|={r.max_abs:.3e} max rel={r.max_rel:.3e} "
              f"{'PASS' if ok else 'FAIL'}")
        if not ok:
            bad.append(r)
    for r in bad:
        print(f"tolerance {tol:g} exceeded: kernel={r.kernel} T={r.T} C={r.C} seed={r.seed}", file=sys.stderr)
    return EXIT_FAIL if bad else EXIT_OK


def cmd_gradcheck(a) -> int:
    dims = gradcheck.parse_dims(a.dims)
    tol = gradcheck.TOLERANCE[a.scope]
    failed = False
    for seed in range(a.seeds):
        res = gradcheck.run_scope(a.scope, dims, seed, a.link, a.gate_mode)
        for t in res.tensors:
            if a.verbose:
                print(f"  seed={seed} {t.name:24s} rel={t.error:.3e}")
        w = res.worst
        ok = res.passed()
        print(f"{a.scope} seed={seed} worst={w.name} rel={w.error:.3e} {'PASS' if ok else 'FAIL'}")
        if not ok:
            failed = True
            print(f"  worst coordinate {w.name}{list(w.worst_index)}: analytic={w.analytic:.9e} "
                  f"numeric={w.numeric:.9e} (tolerance {tol:g})", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bench(a) -> int:
    if a.kernel != "gsa":
        raise ConfigError(f"only the gsa kernel is benchmarked, got {a.kernel!r}")
    for f in a.forms:
        if f not in bench.FORMS:
            raise ConfigError(f"unknown form {f!r}")
    recs = bench.bench_grid(a.forms, a.T, a.C, a.d, a.m, a.dtype, a.recompute, a.repeat, a.warmup)
    if a.out in (None, "-"):
        bench.write_csv(recs, sys.stdout)
    else:
        with open(a.out, "w") as f:
            bench.write_csv(recs, f)
    return EXIT_OK


def _model_config(a, vocab: int) -> ModelConfig:
    return ModelConfig(layers=a.layers, dim=a.dim, heads=a.heads, slots=a.slots, vocab=vocab,
                       seq_len_max=max(a.seq_len, 1), tau=a.tau, link=a.link, gate_mode=a.gate_mode,
                       chunk_size=a.chunk, recompute=a.recompute, dtype=a.dtype, init_std=a.init_std,
                       gate_logit_std=a.gate_logit_std)


def cmd_train(a) -> int:
    task = MqarSpec(a.seq_len, a.pairs, a.keys, a.values, a.seed).validate()
    cfg = _model_config(a, task.vocab)
    tcfg = TrainConfig(steps=a.steps, batch=a.batch, peak_lr=a.lr, min_lr=a.min_lr, warmup=a.warmup,
                       clip=None if a.no_clip else a.clip, seed=a.seed, eval_instances=a.eval_instances,
                       checkpoint_every=a.checkpoint_every)
    tcfg.schedule()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    log_file = open(out / "log.jsonl", "a" if a.resume else "w")

    def log(rec):
        log_file.write(json.dumps(rec) + "\n")
        if not a.quiet and (rec["step"] % a.log_every == 0 or rec["step"] == a.steps - 1):
            print(f"step {rec['step']:5d} lr {rec['lr']:.2e} loss {rec['loss']:.4f} acc {rec['acc']:.3f}",
                  flush=True)

    try:
        report = train_loop(cfg, task, tcfg, ckpt, resume=a.resume, log=log)
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        log_file.close()
    (out / "report.json").write_text(report.to_json())
    print(json.dumps(report.summary))
    return EXIT_OK


def cmd_eval(a) -> int:
    try:
        params, cfg, _, extra = load_checkpoint(a.ckpt)
    except (CheckpointError, OSError) as exc:
        print(f"cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_FAIL
    trained = MqarSpec(**extra["task"]) if extra and "task" in extra else MqarSpec()
    task = replace(trained, seq_len=a.seq_len or trained.seq_len, num_pairs=a.pairs or trained.num_pairs,
                   seed=trained.seed if a.seed is None else a.seed).validate()
    if task.vocab > cfg.vocab:
        print(f"task vocab {task.vocab} exceeds model vocab {cfg.vocab}", file=sys.stderr)
        return EXIT_FAIL
    if task.seq_len > cfg.seq_len_max:
        cfg = replace(cfg, seq_len_max=task.seq_len)
    acc = evaluate(params, cfg, task, a.instances, EVAL_OFFSET)
    print(json.dumps({"accuracy": acc, "instances": a.instances, "seq_len": task.seq_len,
                      "pairs": task.num_pairs, "seed": task.seed}))
    if a.min_accuracy is not None and acc < a.min_accuracy:
        return EXIT_FAIL
    return EXIT_OK


def _add_model_flags(p):
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--slots", type=int, default=32)
    p.add_argument("--link", choices=LINKS, default="softmax")
    p.add_argument("--gate-mode", choices=GATE_MODES, default="data-dependent")
    p.add_argument("--tau", type=float, default=8.0)
    p.add_argument("--chunk", type=int, default=64)
    p.add_argument("--recompute", type=_on_off, default=True, metavar="{on,off}")
    p.add_argument("--dtype", choices=sorted(DTYPES), default="f32")
    p.add_argument("--init-std", type=float, default=ModelConfig.init_std)
    p.add_argument("--gate-logit-std", type=float, default=ModelConfig.gate_logit_std)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gsa", description="Gated slot attention kernels, checks and toy training.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("equivcheck", help="chunkwise vs recurrent forward equivalence")
    p.add_argument("--kernel", choices=sorted(verify.ALIASES) + list(verify.KERNELS[1:3]), required=True)
    p.add_argument("--T", type=int, default=64)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--C", type=_ints, default=[1, 8, 64])
    p.add_argument("--dtype", choices=sorted(DTYPES), default="f64")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_equivcheck)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients (float64)")
    p.add_argument("--scope", choices=("kernel", "layer", "model"), required=True)
    p.add_argument("--dims", default="")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--link", choices=LINKS, default="softmax")
    p.add_argument("--gate-mode", choices=GATE_MODES, default="data-dependent")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="forward+backward throughput, CSV output")
    p.add_argument("--kernel", default="gsa")
    p.add_argument("--forms", type=_words, default=list(bench.FORMS))
    p.add_argument("--T", type=_ints, default=[256, 1024, 4096])
    p.add_argument("--C", type=_ints, default=[16, 64, 256])
    p.add_argument("--d", type=int, default=256)
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--dtype", choices=sorted(DTYPES), default="f32")
    p.add_argument("--recompute", type=_on_off, default=True, metavar="{on,off}")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="train a toy model")
    p.add_argument("task", choices=("mqar",))
    _add_model_flags(p)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--pairs", type=int, default=8)
    p.add_argument("--keys", type=int, default=16)
    p.add_argument("--values", type=int, default=16)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--min-lr", type=float, default=3e-5)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-instances", type=int, default=1024)
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out instances")
    p.add_argument("task", choices=("mqar",))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--pairs", type=int, default=None)
    p.add_argument("--instances", type=int, default=1024)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--min-accuracy", type=float, default=None)
    p.set_defaults(func=cmd_eval)
    return ap


def _thread_limit():
    n = os.environ.get("GSA_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
