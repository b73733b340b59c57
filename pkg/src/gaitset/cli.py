"""Command line: synth, train, embed, eval, sweep, ablate, gradcheck.

Exit codes: 0 success, 2 configuration error (including bad flags),
3 data error, 4 numeric failure. ``GAITSET_NUM_THREADS`` caps the
BLAS/OpenMP thread pools when set before the process starts.
"""

from __future__ import annotations

import os

_THREADS = os.environ.get("GAITSET_NUM_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse
import logging
import sys
from pathlib import Path

from . import evaluate as E
from .dataio import PROTOCOLS, SynthSpec, load_dataset, multicondition, resolve_protocol, spread_views, synth_generate
from .dataio.dataset import DEFAULT_LAYOUT
from .errors import ConfigError, DataError, GaitSetError, NumericError
from .metric import BatchSpec, TrainConfig
from .network import GaitSetModel
from .pipeline import (
    NETWORK_PRESETS,
    RunConfig,
    default_batch_for,
    evaluate_split,
    resolve_network,
    select_arms,
    train_on_split,
)

log = logging.getLogger("gaitset")

CHECKPOINT = "model.ckpt"
TRAIN_LOG = "train.log"
RUN_FILE = "run.txt"
GALLERY_STORE = "gallery.store"
TABLE_FILE = "results.txt"
RESULTS_FILE = "results.kv"


class _Parser(argparse.ArgumentParser):
    """Argument errors raise ``ConfigError`` so every failure shares one exit path."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _key_values(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(args, protocol=None):
    spec = resolve_protocol(protocol or args.protocol)
    dataset = load_dataset(args.data, layout=args.layout, protocol=spec)
    for w in dataset.warnings:
        log.warning("%s", w)
    return dataset.split


def _training_config(args, protocol: str) -> TrainConfig:
    batch = default_batch_for(protocol)
    batch = BatchSpec(
        p=args.p if args.p is not None else batch.p,
        k=args.k if args.k is not None else batch.k,
        m=args.m if args.m is not None else batch.m,
    )
    overrides = dict(seed=args.seed, margin=args.margin, batch=batch, checkpoint_every=args.checkpoint_every)
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.schedule:
        if args.lr is not None:
            overrides["lr_changes"] = ()
        return TrainConfig.preset(args.schedule, **overrides)
    return TrainConfig(**overrides)


def _progress(every: int):
    def report(it, rep):
        if every and it % every == 0:
            log.info("iteration %d loss %.4f nonzero %.4f", it, rep.loss, rep.nonzero_fraction)

    return report


def _write_evaluation(out: Path, results, run: dict) -> str:
    table = E.format_table(results)
    (out / TABLE_FILE).write_text(table, encoding="utf-8")
    values = {}
    for name, res in results.items():
        values.update(res.to_dict(f"result.{name}."))
    E.write_results(out / RESULTS_FILE, values, run)
    return table


# -- subcommands ------------------------------------------------------------------------------
def cmd_synth(args) -> int:
    views = spread_views(args.views) if args.view_list is None else tuple(_int_list(args.view_list))
    spec = SynthSpec(
        identities=args.identities,
        views=views,
        conditions=tuple(c.strip() for c in args.conditions.split(",")),
        frames=args.frames,
        sequences=args.sequences,
        seed=args.seed,
        noise=args.noise,
    )
    synth_generate(spec, args.out)
    print(f"wrote {spec.identities} identities x {len(spec.views)} views x {len(spec.conditions)} conditions to {args.out}")
    return 0


def cmd_train(args) -> int:
    split = _load_split(args)
    network = resolve_network(args.network, _key_values(args.set))
    config = _training_config(args, split.protocol.name)
    out = _out_dir(args.out)
    run = RunConfig(str(args.data), split.protocol.name, network, config, str(out))
    E.write_results(out / RUN_FILE, {}, run.to_dict())
    ckpt_dir = out / "checkpoints" if config.checkpoint_every else None
    if ckpt_dir:
        ckpt_dir.mkdir(exist_ok=True)
    log_path = out / TRAIN_LOG
    log_path.write_text("", encoding="utf-8")
    model = train_on_split(split, network, config, log_path, ckpt_dir, _progress(args.progress))
    model.save(out / CHECKPOINT)
    print(f"trained {config.iterations} iterations; checkpoint {out / CHECKPOINT}")
    return 0


def cmd_embed(args) -> int:
    model = GaitSetModel.load(args.checkpoint)
    split = _load_split(args)
    out = _out_dir(args.out)
    meta = {"checkpoint": str(args.checkpoint), "dataset": str(args.data), "protocol": split.protocol.name}
    gallery = E.embed_gallery(model, split, meta)
    gallery.save(out / GALLERY_STORE)
    probes = E.embed_probes(model, split, meta)
    for name, store in probes.items():
        store.save(out / f"probe-{name}.store")
    print(f"embedded {len(gallery)} gallery and {sum(len(s) for s in probes.values())} probe sequences into {out}")
    return 0


def _stores(args):
    if args.stores:
        root = Path(args.stores)
        gallery_path = root / GALLERY_STORE
        probe_paths = {p.stem[len("probe-"):]: p for p in sorted(root.glob("probe-*.store"))}
    else:
        if not args.gallery or not args.probe:
            raise ConfigError("give --stores DIR, or --gallery and at least one --probe NAME=PATH")
        gallery_path = Path(args.gallery)
        probe_paths = {k: Path(v) for k, v in _key_values(args.probe).items()}
    for p in [gallery_path, *probe_paths.values()]:
        if not p.is_file():
            raise DataError(f"missing embedding store {p}")
    if not probe_paths:
        raise DataError(f"no probe-*.store files in {args.stores}")
    return E.EmbeddingStore.load(gallery_path), {k: E.EmbeddingStore.load(p) for k, p in probe_paths.items()}


def cmd_eval(args) -> int:
    gallery, probes = _stores(args)
    results = {name: E.rank1(store, gallery, args.metric) for name, store in probes.items()}
    out = _out_dir(args.out or args.stores or ".")
    run = {k: v for k, v in gallery.meta.items() if isinstance(v, (str, int, float))}
    run["metric"] = args.metric
    print(_write_evaluation(out, results, run), end="")
    return 0


def cmd_sweep(args) -> int:
    if args.checkpoint:
        model = GaitSetModel.load(args.checkpoint)
    else:
        model = GaitSetModel.initialize(resolve_network(args.network, _key_values(args.set)), seed=args.seed)
        log.warning("sweeping an untrained model; accuracies are near chance")
    protocol = resolve_protocol(args.protocol)
    if args.mode == "multicondition":
        protocol = multicondition(protocol)
    split = _load_split(args, protocol)
    kw = dict(seeds=args.seeds, base_seed=args.seed, metric=args.metric)
    if args.mode == "frames":
        budgets = _int_list(args.budgets) if args.budgets else list(E.DEFAULT_BUDGETS)
        report = E.frames_sweep(model, split, budgets, subset=args.subset, restrict_gallery=not args.full_gallery, **kw)
        lines = [f"{'Frames':>6}  {'Mean':>6}"] + [f"{b:>6}  {m:6.1f}" for b, m in report["mean"].items()]
    elif args.mode == "multiview":
        report = E.multiview_sweep(model, split, per_view=args.per_view, subset=args.subset, **kw)
        lines = [f"single view ({2 * args.per_view} frames): {report['single_view']:.1f}",
                 f"two views ({args.per_view}+{args.per_view} frames): {report['two_view']:.1f}"]
        lines += [f"view difference {d:g}: {m:.1f}" for d, m in report["buckets"].items()]
    else:
        report = E.multicondition_sweep(model, split, **kw)
        width = max(len(k) for k in report["grid"])
        lines = [f"{k:<{width}}  {v:6.1f}" for k, v in report["grid"].items()]
    text = "\n".join(lines) + "\n"
    out = _out_dir(args.out)
    (out / f"sweep-{args.mode}.txt").write_text(text, encoding="utf-8")
    run = {"checkpoint": str(args.checkpoint or ""), "dataset": str(args.data), "protocol": split.protocol.name,
           "mode": args.mode, "seeds": args.seeds, "seed": args.seed}
    E.write_results(out / f"sweep-{args.mode}.kv", E.sweep_values(report), run)
    print(text, end="")
    return 0


def cmd_ablate(args) -> int:
    arms = select_arms(args.arms)
    if args.list:
        for i, arm in arms:
            settings = ", ".join(f"{k}={v}" for k, v in arm.overrides.items())
            print(f"{i}. {arm.name}: {settings}")
        return 0
    if not args.data or not args.out:
        raise ConfigError("ablate needs --data and --out (or --list)")
    split = _load_split(args)
    base = resolve_network(args.network, _key_values(args.set))
    config = _training_config(args, split.protocol.name)
    out = _out_dir(args.out)
    rows, values = [], {}
    for i, arm in arms:
        arm_dir = _out_dir(out / f"arm-{i}")
        network = arm.network(base)
        run = RunConfig(str(args.data), split.protocol.name, network, config, str(arm_dir))
        E.write_results(arm_dir / RUN_FILE, {}, run.to_dict())
        log.info("arm %d (%s): training", i, arm.name)
        model = train_on_split(split, network, config, arm_dir / TRAIN_LOG, callback=_progress(args.progress))
        model.save(arm_dir / CHECKPOINT)
        _, _, results = evaluate_split(model, split, args.metric)
        _write_evaluation(arm_dir, results, run.to_dict())
        rows.append((i, arm.name, {k: r.mean for k, r in results.items()}))
        for name, res in results.items():
            values[f"arm.{i}.{name}.mean"] = E.format_value(res.mean)
        values[f"arm.{i}.name"] = arm.name
    subsets = sorted({s for _, _, m in rows for s in m})
    width = max(len(n) for _, n, _ in rows)
    lines = [f"{'#':>2}  {'Arm':<{width}}  " + "  ".join(f"{s:>6}" for s in subsets)]
    for i, name, means in rows:
        lines.append(f"{i:>2}  {name:<{width}}  " + "  ".join(f"{means.get(s, float('nan')):6.1f}" for s in subsets))
    text = "\n".join(lines) + "\n"
    (out / "ablation.txt").write_text(text, encoding="utf-8")
    shared = RunConfig(str(args.data), split.protocol.name, base, config, str(out)).to_dict()
    E.write_results(out / "ablation.kv", values, shared)
    print(text, end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    strategies = [] if args.no_graph else None
    results = run_suite(args.instances, args.seed, strategies, report=lambda r: print(r.line(), flush=True))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericError(f"gradient check failed for {', '.join(failed)}")
    print(f"all {len(results)} gradient checks passed")
    return 0


# -- parser -----------------------------------------------------------------------------------
def _data_args(p, required=True):
    p.add_argument("--data", required=required, help="dataset root directory")
    p.add_argument("--protocol", default="SYNTH", help=f"preset ({', '.join(PROTOCOLS)}) or protocol file")
    p.add_argument("--layout", default=DEFAULT_LAYOUT, help="path template of frame files under the root")


def _network_args(p):
    p.add_argument("--network", default="casia_b", help=f"preset ({', '.join(NETWORK_PRESETS)}) or config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one network config value")


def _train_args(p):
    p.add_argument("--iterations", type=int, help="iteration budget (default 2000, or the schedule's)")
    p.add_argument("--schedule", choices=["ST", "MT", "LT", "OUMVLP"], help="published iteration/learning-rate schedule")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--p", type=int, help="identities per batch")
    p.add_argument("--k", type=int, help="sequences per identity")
    p.add_argument("--m", type=int, help="frames per sequence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--progress", type=int, default=0, metavar="N", help="log the loss every N iterations")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gaitset", description="Set-based gait recognition: training, embedding and evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic silhouette dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=20)
    p.add_argument("--views", type=int, default=8, help="number of views spread over 0-180 degrees")
    p.add_argument("--view-list", help="explicit comma-separated view angles")
    p.add_argument("--conditions", default="NM,BG,CL")
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--sequences", type=int, default=1, help="sequences per identity, condition and view")
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a protocol's training identities")
    _data_args(p)
    _network_args(p)
    _train_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed gallery and probe sequences")
    p.add_argument("--checkpoint", required=True)
    _data_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="rank-1 accuracy of probe stores against a gallery store")
    p.add_argument("--stores", help="directory holding gallery.store and probe-*.store")
    p.add_argument("--gallery")
    p.add_argument("--probe", action="append", metavar="NAME=PATH")
    p.add_argument("--metric", choices=E.METRICS, default="concat")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="limited-frames, multi-view or multi-condition probes")
    p.add_argument("--mode", choices=["frames", "multiview", "multicondition"], required=True)
    p.add_argument("--checkpoint")
    _network_args(p)
    _data_args(p)
    p.add_argument("--budgets", help="comma-separated frame budgets (frames mode; default 1..30)")
    p.add_argument("--full-gallery", action="store_true", help="frames mode: keep whole gallery sequences")
    p.add_argument("--per-view", type=int, default=5, help="multiview mode: frames drawn from each view")
    p.add_argument("--subset", default="NM")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metric", choices=E.METRICS, default="concat")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="train and evaluate the ablation arms")
    p.add_argument("--list", action="store_true", help="print the arms and exit")
    p.add_argument("--arms", help="comma-separated arm numbers (default all)")
    _data_args(p, required=False)
    _network_args(p)
    _train_args(p)
    p.add_argument("--metric", choices=E.METRICS, default="concat")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operation")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-graph", action="store_true", help="skip the full-network checks")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except GaitSetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
