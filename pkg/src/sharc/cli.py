"""Command-line entry point: ``sharc {synth,train,infer,eval,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data, gnn, metrics
from .cluster import DEFAULT_MAX_LEVELS, sharc_infer
from .core import Dims, SharcError
from .simgraph import PrecomputedBackend
from .train import TrainConfig, build_training_hierarchy, grad_check_report, train

logger = logging.getLogger("sharc")

EMB_SUFFIX = ".emb"
CONFIG_KEYS = {"lr", "epochs", "batch_size", "k", "p_tau", "M", "dims", "seed", "augment_rotation"}


class CliError(SharcError):
    pass


def _expand_inputs(paths) -> list:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(p.glob(f"*{EMB_SUFFIX}")))
        elif p.exists():
            out.append(p)
        else:
            raise CliError(f"no such file: {p}")
    if not out:
        raise CliError("no embedding files found")
    return out


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _setting(args, cfg, name, key, default):
    """Flag value if given, else config value, else default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    return cfg.get(key, default)


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


# --- subcommands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = data.SynthConfig(
        n_recordings=args.n_recordings,
        speakers_range=tuple(args.speakers),
        F=args.dim,
        spread=args.spread,
        turn_length_range=tuple(args.turn_length),
        duration_range=tuple(args.duration),
        min_angle_deg=args.min_angle,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for es in data.synth_generate(cfg):
        data.write_embeddings(es, out / f"{es.recording_id}{EMB_SUFFIX}")
        records += data.labels_to_records(es.labels, es.segments, es.recording_id)
    (out / "ref.rttm").write_text(data.format_rttm(records))
    print(f"wrote {cfg.n_recordings} recordings to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    dims = _setting(args, cfg, "dims", "dims", None)
    tc = TrainConfig(
        learning_rate=float(_setting(args, cfg, "lr", "lr", 0.01)),
        epochs=int(_setting(args, cfg, "epochs", "epochs", 500)),
        batch_size=int(_setting(args, cfg, "batch_size", "batch_size", 8)),
        k=int(_setting(args, cfg, "k", "k", 60)),
        seed=int(_setting(args, cfg, "seed", "seed", 0)),
        dims=Dims(*dims) if dims else Dims(),
        workers=args.threads,
        augment_rotation=bool(_setting(args, cfg, "augment_rotation", "augment_rotation", False)),
    )
    sets = [data.read_embeddings(p) for p in _expand_inputs(args.inputs)]
    unlabeled = [es.recording_id for es in sets if es.labels is None]
    if unlabeled:
        raise CliError(f"recordings without labels: {unlabeled}")
    hier = _map(lambda es: build_training_hierarchy(es, tc.k), sets, args.threads)
    params, history = train(sets, tc, hierarchies=hier)
    gnn.save_params(params, args.out)
    if args.log:
        with open(args.log, "w") as fh:
            for rec in history:
                fh.write(json.dumps({"epoch": rec.epoch, "L": rec.loss, "L_conn": rec.conn, "L_den": rec.den}) + "\n")
    last = history[-1]
    print(f"trained {tc.epochs} epochs on {len(sets)} recordings: L={last.loss:.5f} "
          f"(conn {last.conn:.5f}, den {last.den:.5f}) -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    cfg = _load_config(args.config)
    params = gnn.load_params(args.checkpoint)
    k = int(_setting(args, cfg, "k", "k", 60))
    p_tau = float(_setting(args, cfg, "p_tau", "p_tau", 0.0))
    max_levels = int(_setting(args, cfg, "max_levels", "M", DEFAULT_MAX_LEVELS))
    sets = [data.read_embeddings(p) for p in _expand_inputs(args.inputs)]
    for es in sets:
        if es.dim != params.feature_dim:
            raise CliError(
                f"{es.recording_id}: embeddings have F={es.dim}, checkpoint expects "
                f"F={params.feature_dim}"
            )
        if es.segments is None:
            raise CliError(f"{es.recording_id}: no segment sidecar, cannot write RTTM")
    backend = None
    if args.similarity:
        if len(sets) != 1:
            raise CliError("--similarity supports a single recording")
        backend = PrecomputedBackend(data.read_similarity(args.similarity))

    def run(es):
        return sharc_infer(es, params, k, p_tau, max_levels, backend)

    hierarchies = _map(run, sets, args.threads)
    records = []
    for es, h in zip(sets, hierarchies):
        records += data.labels_to_records(h.final_labels, es.segments, es.recording_id)
        logger.info("%s: %d clusters, depth %d (%s)", es.recording_id,
                    h.final_labels.max() + 1, h.depth, h.stopped_by)
    text = data.format_rttm(records)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _report_lines(ref, hyp, collar, score_overlap, collar_mode, title):
    per = metrics.der_report(ref, hyp, collar, score_overlap, collar_mode)
    total = sum(per.values(), metrics.DerResult(0, 0, 0, 0))
    lines = [f"# {title}"]
    for rec, r in per.items():
        lines.append(f"{rec}\t{r.der:.2f}")
    lines.append(f"TOTAL\t{total.der:.2f}\t(miss {total.missed / 1000:.3f}s, "
                 f"fa {total.false_alarm / 1000:.3f}s, conf {total.confusion / 1000:.3f}s, "
                 f"ref {total.total / 1000:.3f}s)")
    return lines


def cmd_eval(args) -> int:
    ref = data.read_rttm(args.ref)
    hyp = data.read_rttm(args.hyp)
    if args.both_conditions:
        conditions = [(0.0, True, "with overlap, no collar"),
                      (0.25, False, "without overlap, collar 0.25 s")]
    else:
        ov = "without" if args.ignore_overlap else "with"
        conditions = [(args.collar, not args.ignore_overlap, f"{ov} overlap, collar {args.collar:g} s")]
    lines = []
    for collar, score_overlap, title in conditions:
        lines += _report_lines(ref, hyp, collar, score_overlap, args.collar_mode, title)
    print("\n".join(lines))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = data.SynthConfig(
        n_recordings=args.n_graphs, speakers_range=(2, 4), F=args.dim, spread=0.3,
        duration_range=(10.0, 20.0), turn_length_range=(1.5, 6.0), seed=args.seed,
    )
    graphs = []
    for es in data.synth_generate(cfg):
        graphs += [tg for tg in build_training_hierarchy(es, args.k) if tg.graph.n_edges]
    params = gnn.init_params(args.dim, Dims(*args.dims), seed=args.seed, bias_scale=0.1)
    rep = grad_check_report(params, graphs, args.n_coords, args.step, seed=args.seed)
    ok = rep.max_rel_error < args.tolerance and rep.checked > 0
    print(f"max relative error {rep.max_rel_error:.3e} over {rep.checked} coords on "
          f"{len(graphs)} graphs, {rep.skipped} skipped at ReLU kinks "
          f"(step {args.step:g}): {'ok' if ok else 'FAIL'}")
    return 0 if ok else 1


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sharc", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                    help="worker/BLAS thread cap (default: all cores)")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic labelled recordings")
    s.add_argument("--out", required=True)
    s.add_argument("--n-recordings", type=int, default=10)
    s.add_argument("--speakers", type=int, nargs=2, default=(2, 5), metavar=("MIN", "MAX"))
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--spread", type=float, default=0.3)
    s.add_argument("--turn-length", type=float, nargs=2, default=(3.0, 12.0), metavar=("MIN", "MAX"))
    s.add_argument("--duration", type=float, nargs=2, default=(60.0, 120.0), metavar=("MIN", "MAX"))
    s.add_argument("--min-angle", type=float, default=data.SynthConfig.min_angle_deg)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a scorer on labelled embedding files")
    t.add_argument("inputs", nargs="+", help="embedding files or directories")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="loss log (one JSON record per epoch)")
    t.add_argument("--config", help="JSON config; flags override it")
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--dims", type=int, nargs=3, metavar=("SAGE", "H1", "H2"))
    t.add_argument("--augment-rotation", action="store_true", default=None)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="cluster recordings and write RTTM")
    i.add_argument("inputs", nargs="+", help="embedding files or directories")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", help="RTTM output (default: stdout)")
    i.add_argument("--config", help="JSON config; flags override it")
    i.add_argument("--k", type=int)
    i.add_argument("--p-tau", type=float)
    i.add_argument("--max-levels", "-M", type=int)
    i.add_argument("--similarity", help="precomputed level-0 similarity matrix")
    i.add_argument("--seed", type=int, help="accepted for uniformity; inference is deterministic")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score a hypothesis RTTM against a reference")
    e.add_argument("--ref", required=True)
    e.add_argument("--hyp", required=True)
    e.add_argument("--collar", type=float, default=0.0)
    e.add_argument("--ignore-overlap", action="store_true")
    e.add_argument("--both-conditions", action="store_true",
                   help="report (overlap, no collar) and (no overlap, 0.25 s collar)")
    e.add_argument("--collar-mode", choices=("both", "reference"), default="both")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="compare analytic and numeric gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-graphs", type=int, default=10)
    g.add_argument("--n-coords", type=int, default=100)
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--dim", type=int, default=4)
    g.add_argument("--dims", type=int, nargs=3, default=(8, 8, 8))
    g.add_argument("--k", type=int, default=5)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads < 1:
        ap.error("--threads must be >= 1")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (SharcError, OSError) as exc:
        print(f"sharc: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
