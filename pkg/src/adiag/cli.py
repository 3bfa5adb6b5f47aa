"""Command-line entry point: ``adiag {gen,train,eval,predict,gradcheck}``.

Exit codes: 0 success, 2 config or validation error, 3 I/O error,
4 training divergence, 5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import logging
import sys
from pathlib import Path

from . import __version__
from . import config as cfgmod
from .errors import AdiagError, ConfigError, DivergenceError, FormatError
from .graph import MANIFEST_NAME, load_dataset, load_graph, save_graph_stream
from .model import load_checkpoint, predict, probability
from .synthgen import iter_cohort
from .train import evaluate, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_GRADCHECK = 5

CHECKPOINT_NAME = "checkpoint.adck"
METRICS_NAME = "metrics.csv"
RUN_MANIFEST_NAME = "run_manifest.txt"

log = logging.getLogger("adiag")


class _GradcheckFailed(Exception):
    pass


def _flag_type(key):
    def conv(text):
        try:
            return cfgmod.parse_value(key, text)
        except AdiagError as e:
            raise argparse.ArgumentTypeError(str(e)) from None
    conv.__name__ = cfgmod.KEY_TYPES[key].__name__
    return conv


def _common_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps subparser defaults from clobbering values given before the subcommand
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS,
                   help="key=value run configuration file")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS,
                   help="print nothing except requested output")
    keys = p.add_argument_group("config keys (override the config file)")
    for key in cfgmod.KEYS:
        keys.add_argument(f"--{key}", dest=f"key_{key}", type=_flag_type(key),
                          default=argparse.SUPPRESS, metavar=cfgmod.KEY_TYPES[key].__name__.upper())
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="adiag", parents=[common],
                                     description="Synthetic connectome generation and graph classification.")
    parser.add_argument("--version", action="version", version=f"adiag {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("out_dir", nargs="?", help="output directory (default: config out_dir)")

    t = sub.add_parser("train", parents=[common], help="train a classifier")
    t.add_argument("dataset_dir", nargs="?", help="dataset directory (default: config dataset_dir)")
    t.add_argument("out_dir", nargs="?", help="output directory (default: config out_dir)")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset_dir", nargs="?", help="dataset directory (default: config dataset_dir)")
    e.add_argument("--csv", metavar="PATH", help="also write the metrics as CSV")

    pr = sub.add_parser("predict", parents=[common], help="classify one graph file")
    pr.add_argument("checkpoint")
    pr.add_argument("graph_file")

    gc = sub.add_parser("gradcheck", parents=[common], help="verify gradients by finite differences")
    gc.add_argument("--inject-fault", metavar="OP", default=None, help=argparse.SUPPRESS)
    return parser


def _run_config(args) -> cfgmod.RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("key_")}
    return cfgmod.build(getattr(args, "config", None), overrides)


def _path(positional, run: cfgmod.RunConfig, key: str) -> Path:
    value = positional if positional is not None else run.get(key)
    if value is None:
        raise ConfigError(f"no {key} given (positional argument or '{key}' config key)")
    return Path(value)


def dataset_fingerprint(directory) -> str:
    """SHA-256 over the manifest and every graph file it lists."""
    d = Path(directory)
    h = hashlib.sha256()
    manifest = (d / MANIFEST_NAME).read_bytes()
    h.update(manifest)
    for line in manifest.decode("utf-8").splitlines()[1:]:
        if line.strip():
            h.update((d / line.split("\t")[0]).read_bytes())
    return h.hexdigest()


def cmd_gen(args, run: cfgmod.RunConfig, out) -> int:
    gcfg = run.gen_config()
    out_dir = _path(args.out_dir, run, "out_dir")
    summary = save_graph_stream(iter_cohort(gcfg), out_dir)
    edges = sorted(set(summary.edges))
    span = f"{edges[0]} edges each" if len(edges) == 1 else f"{edges[0]}-{edges[-1]} edges per graph"
    out(f"{summary.graphs} graphs ({summary.ad} AD / {summary.nc} NC), {span}")
    return EXIT_OK


def cmd_train(args, run: cfgmod.RunConfig, out) -> int:
    tcfg = run.train_config()
    dataset_dir = _path(args.dataset_dir, run, "dataset_dir")
    out_dir = _path(args.out_dir, run, "out_dir")
    ds = load_dataset(dataset_dir)
    fingerprint = dataset_fingerprint(dataset_dir)
    result = train(ds, tcfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CHECKPOINT_NAME).write_bytes(result.checkpoint)
    result.history.write_csv(out_dir / METRICS_NAME)
    header = [f"adiag {__version__}", f"dataset_sha256={fingerprint}"]
    echo = cfgmod.RunConfig({**run.values, "dataset_dir": str(dataset_dir), "out_dir": str(out_dir)})
    (out_dir / RUN_MANIFEST_NAME).write_text(echo.to_text(header), encoding="utf-8")
    best = result.history.best
    out(f"best epoch {best.epoch}, peak val accuracy {best.val_acc:.4f}")
    return EXIT_OK


def cmd_eval(args, run: cfgmod.RunConfig, out) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(_path(args.dataset_dir, run, "dataset_dir"))
    res = evaluate(model, ds.graphs)
    (tn, fp), (fn, tp) = res.confusion.tolist()
    out(f"accuracy {res.accuracy:.4f}, mean loss {res.mean_loss:.6f}, n={res.total}")
    out(f"confusion (rows true, cols predicted): tn={tn} fp={fp} fn={fn} tp={tp}")
    if args.csv:
        Path(args.csv).write_text(
            "accuracy,mean_loss,tn,fp,fn,tp\n"
            f"{res.accuracy:.6g},{res.mean_loss:.6g},{tn},{fp},{fn},{tp}\n",
            encoding="utf-8",
        )
    return EXIT_OK


def cmd_predict(args, run: cfgmod.RunConfig, out) -> int:
    model = load_checkpoint(args.checkpoint)
    g = load_graph(args.graph_file)
    if g.n_nodes != model.config.n_nodes:
        raise ConfigError(
            f"graph has {g.n_nodes} nodes, checkpoint expects {model.config.n_nodes}")
    z = model.logit(g)
    print(f"label={predict(z)} p={probability(z):.6g}")
    return EXIT_OK


def cmd_gradcheck(args, run: cfgmod.RunConfig, out) -> int:
    from . import autodiff as ad
    from .gradcheck import inject_fault, run_gradcheck

    seed = run.train_config().seed
    with contextlib.ExitStack() as stack:
        if args.inject_fault is not None:
            if args.inject_fault not in ad.BACKWARD_RULES:
                raise ConfigError(f"no backward rule named {args.inject_fault!r}")
            stack.enter_context(inject_fault(args.inject_fault))
        report = run_gradcheck(seed)
    for (act, mode) in sorted({k[:2] for k in report.errors}):
        worst = max(v for k, v in report.errors.items() if k[:2] == (act, mode))
        out(f"{act:8s}{mode:6s}max relative error {worst:.3e}")
    out(f"max relative error {report.max_error:.3e} (tolerance {report.tolerance:.0e}), {report.seconds:.1f} s")
    if not report.passed:
        for act, mode, name in report.failures:
            print(f"FAIL {act}/{mode} {name}: {report.errors[(act, mode, name)]:.3e}", file=sys.stderr)
        raise _GradcheckFailed()
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse uses 2 for usage errors, which matches the config exit code
        return int(e.code or 0)
    quiet = getattr(args, "quiet", False)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")

    def out(line: str) -> None:
        if not quiet:
            print(line)

    def err(msg: str) -> None:
        print(f"adiag {args.command}: {msg}", file=sys.stderr)

    try:
        run = _run_config(args)
        return COMMANDS[args.command](args, run, out)
    except _GradcheckFailed:
        err("gradient check failed")
        return EXIT_GRADCHECK
    except DivergenceError as e:
        err(f"training diverged: {e}")
        return EXIT_DIVERGED
    except (FormatError, ValueError) as e:
        err(str(e))
        return EXIT_CONFIG
    except OSError as e:
        err(str(e))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
