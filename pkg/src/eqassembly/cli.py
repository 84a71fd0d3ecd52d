"""Command-line surface: gen / train / sample / eval / check / bench.

Every command is deterministic under a fixed ``--seed``.  Configuration
comes from an optional JSON file (sections ``model``, ``train``,
``sampler``, plus ``data`` and ``out`` paths) with command-line overrides;
unknown keys anywhere in the file are rejected before any work starts.

Commands that write multiple files drop a ``status.json`` marker in their
output directory: it reads ``running`` while work is in flight and is
finalized to ``complete`` or ``failed``, so interrupted outputs are always
identifiable.

Exit codes: 0 on success, 1 on an operational failure (a failed property
suite, a corrupt input, a diverged run), 2 on a usage error (bad flags,
bad config, missing paths).

``--device-threads`` (or the ``EQASSEMBLY_THREADS`` environment variable)
caps the linear-algebra thread pools.  The cap is exported before the
numerical modules are imported, so it binds this process when given on the
command line, and is inherited by any child processes either way.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

THREADS_ENV = "EQASSEMBLY_THREADS"
_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


class UsageError(Exception):
    """Invalid invocation: bad flags, bad config file, or missing paths."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Validated model/train/sampler settings plus dataset and output paths."""

    model: "object"
    train: "object"
    sampler: "object"
    data_root: str | None
    out_dir: str | None


def _build_section(cls, payload: dict, where: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise UsageError(f"unknown keys in {where} config: {', '.join(unknown)}")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid {where} config: {err}")


def load_run_config(
    config_path=None,
    seed: int | None = None,
    train_steps: int | None = None,
    sampler_steps: int | None = None,
    order: int | None = None,
    data: str | None = None,
    out: str | None = None,
) -> RunConfig:
    """Parse the JSON config file and apply command-line overrides."""
    from .equinet import ModelConfig
    from .flowmatch import TrainConfig
    from .sampler import SamplerConfig

    payload = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise UsageError(f"config file {path} is not valid JSON: {err}")
        if not isinstance(payload, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(payload) - {"model", "train", "sampler", "data", "out"})
    if unknown:
        raise UsageError(f"unknown config sections: {', '.join(unknown)}")

    train_payload = dict(payload.get("train", {}))
    sampler_payload = dict(payload.get("sampler", {}))
    if seed is not None:
        train_payload["seed"] = seed
        sampler_payload["seed"] = seed
    if train_steps is not None:
        train_payload["steps"] = train_steps
    if sampler_steps is not None:
        sampler_payload["steps"] = sampler_steps
    if order is not None:
        sampler_payload["order"] = order

    return RunConfig(
        model=_build_section(ModelConfig, payload.get("model", {}), "model"),
        train=_build_section(TrainConfig, train_payload, "train"),
        sampler=_build_section(SamplerConfig, sampler_payload, "sampler"),
        data_root=data if data is not None else payload.get("data"),
        out_dir=out if out is not None else payload.get("out"),
    )


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required (flag or config file)")
    return value


# ---------------------------------------------------------------------------
# Output status markers
# ---------------------------------------------------------------------------


def _mark(out_dir: Path, status: str, **extra) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"status": status, "written": time.strftime("%Y-%m-%dT%H:%M:%S")}
    payload.update(extra)
    (out_dir / "status.json").write_text(json.dumps(payload, indent=2) + "\n")


class _StatusScope:
    """Marks an output directory running/complete/failed around a command."""

    def __init__(self, out_dir, command: str):
        self.out_dir = Path(out_dir)
        self.command = command

    def __enter__(self):
        _mark(self.out_dir, "running", command=self.command)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            _mark(self.out_dir, "complete", command=self.command)
        else:
            _mark(
                self.out_dir,
                "failed",
                command=self.command,
                error=f"{exc_type.__name__}: {exc}",
            )
        return False


# ---------------------------------------------------------------------------
# Inference helpers
# ---------------------------------------------------------------------------


def _load_net(checkpoint, use_ema: bool = True):
    """Load a network, preferring the averaged weights when present."""
    from .equinet import EquivariantNet

    path = Path(checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found")
    net, rest, meta = EquivariantNet.load(path)
    ema = {
        name[len("ema/"):]: arr for name, arr in rest.items() if name.startswith("ema/")
    }
    if use_ema and set(ema) == set(net.params):
        net.load_state_arrays(ema)
    return net, meta


def _find_record(records, shape_id: str | None, index: int):
    if shape_id is not None:
        matches = [r for r in records if r.shape_id == shape_id]
        if not matches:
            raise UsageError(f"shape id {shape_id!r} not found in dataset")
        return matches[0]
    if not 0 <= index < len(records):
        raise UsageError(f"--index {index} out of range (dataset has {len(records)})")
    return records[index]


def _scheme_label(config) -> str:
    return f"RK{config.order}, {config.steps} steps"


def _pose_entries(poses) -> list[dict]:
    from .lie import rot_to_quat

    quats = rot_to_quat(poses.rot)
    return [
        {"quat": quats[i].tolist(), "trans": poses.trans[i].tolist()}
        for i in range(poses.n)
    ]


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------


def _plot_loss_curve(log_path: Path, out_path: Path) -> bool:
    steps, losses = [], []
    if log_path.is_file():
        for line in log_path.read_text().splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            steps.append(record["step"])
            losses.append(record["loss"])
    if not steps:
        return False
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, lw=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_title("Training loss")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return True


def _plot_rotation_histogram(delta_rs, out_path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(delta_rs, bins=36, range=(0.0, 180.0), edgecolor="black", lw=0.3)
    ax.set_xlabel("rotation error (degrees)")
    ax.set_ylabel("shapes")
    ax.set_title("Rotation error distribution")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    import numpy as np

    from . import data

    out = Path(_require(args.out, "--out"))
    with _StatusScope(out, "gen"):
        records = data.generate_synthetic(
            args.family,
            args.pieces,
            args.count,
            np.random.default_rng(args.seed),
            n_points=args.points,
            min_piece_points=args.min_piece_points,
            split=args.split,
        )
        data.write_dataset(out, records)
    print(
        f"wrote {len(records)} {args.family} shapes "
        f"({args.pieces} pieces, split {args.split!r}) to {out}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    from . import data
    from .flowmatch import Trainer

    rc = load_run_config(
        args.config, seed=args.seed, train_steps=args.steps,
        data=args.data, out=args.out,
    )
    data_root = _require(rc.data_root, "--data")
    out = Path(_require(rc.out_dir, "--out"))
    records = data.read_dataset(data_root, split=args.split)
    if not records:
        raise UsageError(f"no records in {data_root} split {args.split!r}")
    dataset = data.as_training_pairs(records)

    with _StatusScope(out, "train"):
        trainer = Trainer(dataset, rc.model, rc.train, out)
        if args.resume is not None:
            trainer.restore(args.resume)

        def progress(step, loss):
            if step % rc.train.log_every == 0 or step == rc.train.steps:
                print(f"step {step}/{rc.train.steps}  loss {loss:.6f}", flush=True)

        final = trainer.run(progress=progress)
        plotted = _plot_loss_curve(out / "train_log.jsonl", out / "loss_curve.svg")
    print(f"final checkpoint: {final}")
    if plotted:
        print(f"loss curve: {out / 'loss_curve.svg'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    import numpy as np

    from . import data, sampler

    rc = load_run_config(
        args.config, seed=args.seed, sampler_steps=args.steps,
        order=args.order, data=args.data, out=args.out,
    )
    data_root = _require(rc.data_root, "--data")
    out = Path(_require(rc.out_dir, "--out"))
    net, _ = _load_net(args.checkpoint, use_ema=not args.raw_weights)
    records = data.read_dataset(data_root, split=args.split)
    if not records:
        raise UsageError(f"no records in {data_root} split {args.split!r}")
    record = _find_record(records, args.shape, args.index)

    with _StatusScope(out, "sample"):
        rng = np.random.default_rng(rc.sampler.seed)
        final, trajectory = sampler.sample(
            net, record.pieces.pieces, rc.sampler, rng, record=args.trajectory
        )
        metric = data.pairwise_error(final, record.poses)
        payload = {
            "format": "eqassembly-poses",
            "shape_id": record.shape_id,
            "split": record.split,
            "scheme": _scheme_label(rc.sampler),
            "seed": rc.sampler.seed,
            "poses": _pose_entries(final),
            "metric": {"delta_r": metric.delta_r, "delta_t": metric.delta_t},
        }
        (out / "poses.json").write_text(json.dumps(payload, indent=2) + "\n")
        if args.trajectory:
            sampler.write_trajectory(out / "trajectory.jsonl", trajectory)
    print(
        f"{record.shape_id} [{_scheme_label(rc.sampler)}]: "
        f"delta_r {metric.delta_r:.3f} deg, delta_t {metric.delta_t:.4f}"
    )
    if args.trajectory:
        print(f"trajectory: {out / 'trajectory.jsonl'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    import numpy as np

    from . import data, sampler

    rc = load_run_config(
        args.config, seed=args.seed, sampler_steps=args.steps,
        order=args.order, data=args.data, out=args.out,
    )
    data_root = _require(rc.data_root, "--data")
    out = Path(_require(rc.out_dir, "--out"))
    records = data.read_dataset(data_root, split=args.split)
    if not records:
        raise UsageError(f"no records in {data_root} split {args.split!r}")
    net = None
    if not args.use_ground_truth:
        if args.checkpoint is None:
            raise UsageError("--checkpoint is required unless --use-ground-truth")
        net, _ = _load_net(args.checkpoint, use_ema=not args.raw_weights)

    scheme = "ground truth" if args.use_ground_truth else _scheme_label(rc.sampler)
    rows = []
    with _StatusScope(out, "eval"):
        # one child generator per shape, so results do not depend on order
        children = np.random.default_rng(rc.sampler.seed).spawn(len(records))
        for record, child in zip(records, children):
            start = time.perf_counter()
            if args.use_ground_truth:
                predicted = record.poses
            else:
                predicted, _ = sampler.sample(
                    net, record.pieces.pieces, rc.sampler, child, record=False
                )
            metric = data.pairwise_error(predicted, record.poses)
            rows.append(
                {
                    "shape_id": record.shape_id,
                    "n_pieces": record.n,
                    "delta_r": metric.delta_r,
                    "delta_t": metric.delta_t,
                    "seconds": time.perf_counter() - start,
                }
            )
        delta_r = np.array([r["delta_r"] for r in rows])
        delta_t = np.array([r["delta_t"] for r in rows])
        seconds = np.array([r["seconds"] for r in rows])
        summary = {
            "scheme": scheme,
            "split": args.split,
            "shapes": len(rows),
            "delta_r_mean": float(delta_r.mean()),
            "delta_r_std": float(delta_r.std()),
            "delta_r_median": float(np.median(delta_r)),
            "delta_t_mean": float(delta_t.mean()),
            "delta_t_std": float(delta_t.std()),
            "delta_t_median": float(np.median(delta_t)),
            "seconds_total": float(seconds.sum()),
            "seconds_mean": float(seconds.mean()),
        }
        (out / "metrics.json").write_text(
            json.dumps({"summary": summary, "shapes": rows}, indent=2) + "\n"
        )
        # timing lives in metrics.json only, so this table is byte-stable
        # across identically seeded runs
        lines = [
            f"scheme: {scheme}   split: {args.split}   shapes: {len(rows)}",
            f"{'shape_id':<28} {'pieces':>6} {'delta_r':>10} {'delta_t':>10}",
        ]
        for r in rows:
            lines.append(
                f"{r['shape_id']:<28} {r['n_pieces']:>6d} "
                f"{r['delta_r']:>10.3f} {r['delta_t']:>10.4f}"
            )
        lines.append(
            f"{'mean':<28} {'':>6} {summary['delta_r_mean']:>10.3f} "
            f"{summary['delta_t_mean']:>10.4f}"
        )
        lines.append(
            f"{'std':<28} {'':>6} {summary['delta_r_std']:>10.3f} "
            f"{summary['delta_t_std']:>10.4f}"
        )
        lines.append(
            f"{'median':<28} {'':>6} {summary['delta_r_median']:>10.3f} "
            f"{summary['delta_t_median']:>10.4f}"
        )
        table = "\n".join(lines) + "\n"
        (out / "metrics.txt").write_text(table)
        _plot_rotation_histogram(delta_r, out / "delta_r_hist.svg")
    print(table, end="")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_property_suites

    results = run_property_suites(seed=args.seed, trials=args.trials)
    failed = 0
    for result in results:
        status = "PASS" if result.ok else "FAIL"
        print(f"{status} {result.name}: max err {result.error:.3e} (tol {result.tol:.0e})")
        failed += 0 if result.ok else 1
    total = len(results)
    print(f"{total - failed}/{total} property suites passed")
    return EXIT_OK if failed == 0 else EXIT_FAILURE


def cmd_bench(args) -> int:
    import numpy as np

    from .irreps import (
        EdgeFrame,
        IrrepsFeature,
        embed_tp_weights,
        message_paths,
        so2_reduced_message,
        tp_message,
    )

    rng = np.random.default_rng(args.seed)
    edges, channels, l_max = args.edges, args.channels, args.lmax
    frame = EdgeFrame.from_displacements(rng.normal(size=(edges, 3)), l_max=l_max)
    feature = IrrepsFeature(
        tuple(
            rng.normal(size=(edges, channels, 2 * l + 1)) for l in range(l_max + 1)
        )
    )
    coeffs = {p: rng.normal(size=(edges, channels)) for p in message_paths(l_max)}
    weights = embed_tp_weights(coeffs, feature)

    def clock(fn):
        fn()  # warm up
        best = float("inf")
        for _ in range(args.trials):
            start = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - start)
        return best

    t_tp = clock(lambda: tp_message(feature, frame, coeffs))
    t_so2 = clock(lambda: so2_reduced_message(feature, frame, weights))
    out_tp = tp_message(feature, frame, coeffs)
    out_so2 = so2_reduced_message(feature, frame, weights)
    err = max(
        float(np.abs(a - b).max()) for a, b in zip(out_tp.blocks, out_so2.blocks)
    )

    print(f"edges {edges}, channels {channels}, degrees up to {l_max}")
    print(f"{'kernel':<24} {'best ms':>10}")
    print(f"{'tensor product':<24} {t_tp * 1e3:>10.2f}")
    print(f"{'edge-aligned reduced':<24} {t_so2 * 1e3:>10.2f}")
    print(f"speedup: {t_tp / t_so2:.2f}x")
    print(f"max |difference| between kernels: {err:.3e}")
    if err > 1e-9:
        print("error: kernels disagree beyond 1e-9", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eqassembly",
        description="Equivariant flow matching for multi-piece point-cloud assembly.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, out=True):
        if config:
            p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=0, help="random seed")
        if out:
            p.add_argument("--out", help="output directory")
        p.add_argument(
            "--device-threads",
            type=int,
            default=None,
            help=f"cap linear-algebra threads (also {THREADS_ENV})",
        )

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p, config=False)
    p.add_argument("--family", default="composite", help="shape family")
    p.add_argument("--pieces", type=int, default=2, help="pieces per shape")
    p.add_argument("--count", type=int, required=True, help="number of shapes")
    p.add_argument("--split", default="train", help="dataset split name")
    p.add_argument("--points", type=int, default=512, help="surface points per shape")
    p.add_argument("--min-piece-points", type=int, default=30)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the twist-prediction network")
    common(p)
    p.add_argument("--data", help="dataset root directory")
    p.add_argument("--split", default="train")
    p.add_argument("--steps", type=int, default=None, help="override training steps")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="assemble one shape from noise")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root directory")
    p.add_argument("--split", default="test")
    p.add_argument("--shape", default=None, help="shape id (default: --index)")
    p.add_argument("--index", type=int, default=0, help="record index in the split")
    p.add_argument("--steps", type=int, default=None, help="integration steps")
    p.add_argument("--order", type=int, choices=(1, 4), default=None)
    p.add_argument(
        "--trajectory", action="store_true", help="also write the full trajectory"
    )
    p.add_argument(
        "--raw-weights",
        action="store_true",
        help="use the last raw weights instead of the averaged ones",
    )
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a split")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", help="dataset root directory")
    p.add_argument("--split", default="test")
    p.add_argument("--steps", type=int, default=None, help="integration steps")
    p.add_argument("--order", type=int, choices=(1, 4), default=None)
    p.add_argument(
        "--use-ground-truth",
        action="store_true",
        help="score the ground-truth poses instead of sampling (pipeline self-test)",
    )
    p.add_argument("--raw-weights", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run the numerical property suites")
    common(p, config=False, out=False)
    p.add_argument("--trials", type=int, default=3, help="trials per randomized suite")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("bench", help="compare the two message kernels")
    common(p, config=False, out=False)
    p.add_argument("--edges", type=int, default=10_000)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--lmax", type=int, default=2)
    p.add_argument("--trials", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    return parser


def _apply_thread_limit(args) -> None:
    threads = getattr(args, "device_threads", None)
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env is not None:
            try:
                threads = int(env)
            except ValueError:
                raise UsageError(f"{THREADS_ENV}={env!r} is not an integer")
    if threads is None:
        return
    if threads < 1:
        raise UsageError(f"thread count must be >= 1, got {threads}")
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_limit(args)
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as err:  # operational failure: actionable, nonzero
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
