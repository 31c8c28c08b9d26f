"""Command-line entry point.

Exit codes: 0 success, 1 invalid usage or input (nothing has been written),
2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def read_config(path) -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Keys use flag names with or without dashes."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="asyncchunk", description="Asynchronous action-chunk inference runtime.")
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key=value file providing defaults; explicit flags win")
        sp.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        return sp

    sp = common(sub.add_parser("teach", help="write scripted circle-tracing demonstrations to a new dataset"))
    sp.add_argument("--out", required=True, help="dataset root (must not exist yet)")
    sp.add_argument("--episodes", type=int, default=50)
    sp.add_argument("--laps", type=float, default=2.5, help="circle laps per episode")
    sp.add_argument("--noise", type=float, default=0.01, help="action noise std in rad")
    sp.add_argument("--dt-ms", type=float, default=33.0, help="control period in ms")
    sp.add_argument("--rows-per-file", type=int, default=1000)

    sp = common(sub.add_parser("train", help="fit a chunk policy on a dataset and write a checkpoint"))
    sp.add_argument("--data", required=True, help="dataset root")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--objective", choices=["cfm", "ddpm", "pi0"], default="cfm")
    sp.add_argument("--epochs", type=int, default=15)
    sp.add_argument("--lr", type=float, default=0.2)
    sp.add_argument("--lr-decay", type=float, default=0.8)
    sp.add_argument("--batch", type=int, default=1024)
    sp.add_argument("--h-o", type=int, default=2, help="observation stack length")
    sp.add_argument("--h-a", type=int, default=10, help="chunk length")
    sp.add_argument("--n-rff", type=int, default=1024, help="random Fourier features")
    sp.add_argument("--bandwidth", type=float, default=3.0)
    sp.add_argument("--ridge", type=float, default=1e-2, help="preconditioner ridge, relative")
    sp.add_argument("--plain-sgd", action="store_true", help="disable the second-moment preconditioner")
    sp.add_argument("--absolute", action="store_true", help="predict absolute joint targets, not offsets")
    sp.add_argument("--steps", type=int, default=10, help="Euler steps at inference (flow objectives)")
    sp.add_argument("--T", type=int, default=50, help="diffusion steps (ddpm)")
    sp.add_argument("--beta-min", type=float, default=1e-4)
    sp.add_argument("--beta-max", type=float, default=0.2)
    sp.add_argument("--pi0-s", type=float, default=1.0, help="time truncation for the pi0 objective")

    sp = common(sub.add_parser("serve", help="run the policy server"))
    sp.add_argument("--listen", default="127.0.0.1:8765", help="HOST:PORT")
    sp.add_argument("--ckpt", help="policy checkpoint")
    sp.add_argument("--demo-policy", action="store_true", help="serve the scripted oracle instead of a checkpoint")
    sp.add_argument("--h-a", type=int, default=50, help="chunk length of the scripted oracle")
    sp.add_argument("--dt-ms", type=float, default=33.0, help="control period assumed by the scripted oracle")
    sp.add_argument("--steps", type=int, help="override the checkpoint's Euler step count")
    sp.add_argument("--latency", default="none", help="none | fixed:S | lognormal:MU,SIGMA")
    sp.add_argument("--max-sessions", type=int, default=4)

    sp = common(sub.add_parser("run-client", help="run the control loop against a server"))
    sp.add_argument("--server", default="127.0.0.1:8765", help="HOST:PORT")
    sp.add_argument("--g", type=float, default=0.5, help="queue threshold in [0, 1]")
    sp.add_argument("--dt-ms", type=float, default=33.0)
    sp.add_argument("--ticks", type=int, default=500)
    sp.add_argument("--d-lim", type=float, default=0.01, help="similarity filter radius in rad")
    sp.add_argument("--mode", choices=["ema", "replace"], default="ema")
    sp.add_argument("--alpha-agg", type=float, default=0.5)
    sp.add_argument("--phase", type=float, default=0.0, help="start angle on the circle")
    sp.add_argument("--record", help="dataset root to append the run to")
    sp.add_argument("--task", default="policy rollout")
    sp.add_argument("--trace", help="write the queue trace CSV here ('-' for stdout)")

    sp = common(sub.add_parser("bench", help="queue-regime sweep g in {0, g_min+margin, 1} in simulated time"))
    sp.add_argument("--e-ls", type=float, default=0.3, help="server latency in s")
    sp.add_argument("--dt-ms", type=float, default=33.0)
    sp.add_argument("--h-a", type=int, default=50)
    sp.add_argument("--ticks", type=int, default=10000)
    sp.add_argument("--margin", type=float, default=0.05)
    sp.add_argument("--trace-dir", help="write one trace CSV per regime here")

    sp = common(sub.add_parser("dataset-inspect", help="print dataset info, stats and episode table"))
    sp.add_argument("--root", required=True)

    sp = common(sub.add_parser("bridge-demo", help="run the actor/learner loop"))
    sp.add_argument("--steps", type=int, default=1000)
    sp.add_argument("--update-every", type=int, default=100)
    sp.add_argument("--episode-len", type=int, default=50)
    sp.add_argument("--human-rate", type=float, default=0.2)
    return p


def parse_args(argv: List[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in values.items():
            if key not in known or key in ("help", "config"):
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            action = known[key]
            if action.const is True and action.nargs == 0:  # store_true
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    defaults[key] = action.type(raw) if action.type else raw
                except (TypeError, ValueError):
                    raise UsageError(f"bad value {raw!r} for config key {key!r}") from None
                if action.choices and defaults[key] not in action.choices:
                    raise UsageError(f"{key} must be one of {list(action.choices)}")
        # required flags may come from the config file
        for a in sub._actions:
            if a.dest in defaults:
                a.required = False
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _positive(name, value):
    if not value > 0:
        raise UsageError(f"--{name} must be positive")


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


# subcommands: each returns a callable doing the side effects, after validation

def cmd_teach(a):
    from . import demo

    _positive("episodes", a.episodes)
    _positive("laps", a.laps)
    _positive("dt-ms", a.dt_ms)
    if a.noise < 0:
        raise UsageError("--noise must be >= 0")
    if Path(a.out, "meta", "info.json").exists():
        raise UsageError(f"dataset already exists at {a.out}")

    def run():
        metas = demo.teach(a.out, a.episodes, a.seed, a.laps, a.dt_ms / 1000.0, a.noise, a.rows_per_file)
        _emit({"dataset": str(a.out), "episodes": len(metas), "frames": sum(m.length for m in metas)})
    return run


def cmd_train(a):
    from .policy import train_policy

    if not Path(a.data, "meta", "info.json").exists():
        raise UsageError(f"no dataset at {a.data}")
    for name in ("epochs", "batch", "h_o", "h_a", "n_rff", "bandwidth", "steps", "T"):
        _positive(name.replace("_", "-"), getattr(a, name))
    if a.lr < 0:
        raise UsageError("--lr must be >= 0")
    if not 0 < a.pi0_s <= 1:
        raise UsageError("--pi0-s must lie in (0, 1]")

    def run():
        policy, result = train_policy(
            a.data, a.objective, a.h_o, a.h_a, a.epochs, a.lr, a.seed, a.n_rff, a.bandwidth, a.batch,
            not a.plain_sgd, a.ridge, a.lr_decay, a.steps, a.T, a.beta_min, a.beta_max, not a.absolute, a.pi0_s)
        Path(a.out).parent.mkdir(parents=True, exist_ok=True)
        policy.save(a.out)
        _emit({"checkpoint": str(a.out), "objective": a.objective, "loss_trace": result.loss_trace})
    return run


def cmd_serve(a):
    from .server import LatencyModel, ServerConfig, parse_listen

    try:
        host, port = parse_listen(a.listen)
        cfg = ServerConfig(a.ckpt, host, port, a.steps, LatencyModel.parse(a.latency), a.max_sessions, a.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if a.demo_policy:
        _positive("h-a", a.h_a)
        _positive("dt-ms", a.dt_ms)
    elif not a.ckpt or not Path(a.ckpt).is_file():
        raise UsageError("--ckpt must name an existing checkpoint (or pass --demo-policy)")

    def run():
        from .server import serve

        policy = None
        if a.demo_policy:
            from .demo import DemoPolicy
            policy = DemoPolicy(a.h_a, a.dt_ms / 1000.0)
        serve(cfg, policy)
    return run


def cmd_run_client(a):
    from .client import ClientConfig
    from .server import parse_listen

    try:
        parse_listen(a.server)
        cfg = ClientConfig(server=a.server, dt=a.dt_ms / 1000.0, g=a.g, d_lim=a.d_lim, episode_len=a.ticks,
                           record_root=a.record, mode=a.mode, alpha_agg=a.alpha_agg, task=a.task)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if not 0 <= a.alpha_agg <= 1:
        raise UsageError("--alpha-agg must lie in [0, 1]")

    def run():
        from dataclasses import replace

        from .client import RealClock, WebSocketSession, control_loop, record_episode
        from .demo import circle_distance, circle_start

        session = WebSocketSession(a.server)
        info = session.open()
        try:
            run_cfg = replace(cfg, h_a=int(info.get("h_a", cfg.h_a)), h_o=int(info.get("h_o", cfg.h_o)))
            report = control_loop(run_cfg, circle_start(a.phase), session, RealClock())
        finally:
            session.close()
        record_episode(run_cfg, report)
        out = report.summary()
        out["tracking_error"] = float(np.mean(circle_distance(np.array(report.ee)))) if report.ee else None
        out["g"] = run_cfg.g
        out["h_a"] = run_cfg.h_a
        _emit(out)
        if a.trace == "-":
            sys.stdout.write(report.trace_csv())
        elif a.trace:
            Path(a.trace).write_text(report.trace_csv())
        return EXIT_RUNTIME if report.session_lost else EXIT_OK
    return run


def bench_rows(e_ls: float, dt: float, h_a: int, ticks: int, margin: float = 0.05, seed: int = 0):
    """Run the three threshold regimes in simulated time; returns (g_min, [(name, g, report)])."""
    from .chunking import queue_analytics
    from .client import ClientConfig, SimulatedSession, VirtualClock, control_loop
    from .demo import DemoPolicy, circle_start
    from .server import LatencyModel

    g_min, _ = queue_analytics(e_ls, dt, h_a)
    out = []
    for name, g in (("sequential", 0.0), ("threshold", min(1.0, g_min + margin)), ("every-tick", 1.0)):
        clock = VirtualClock()
        session = SimulatedSession(DemoPolicy(h_a, dt), LatencyModel("fixed", (e_ls,)), clock, seed)
        report = control_loop(ClientConfig(dt=dt, g=g, h_a=h_a, episode_len=ticks), circle_start(0.0), session,
                              clock)
        out.append((name, g, report))
    return g_min, out


def cmd_bench(a):
    from .chunking import DegenerateHorizon, queue_analytics, sawtooth_width

    for name in ("e_ls", "dt_ms", "h_a", "ticks"):
        _positive(name.replace("_", "-"), getattr(a, name))
    dt = a.dt_ms / 1000.0
    try:
        queue_analytics(a.e_ls, dt, a.h_a)
    except DegenerateHorizon as e:
        raise UsageError(str(e)) from None

    def run():
        g_min, rows = bench_rows(a.e_ls, dt, a.h_a, a.ticks, a.margin, a.seed)
        print(f"# g_min={g_min:.4f} idle_seq_s={a.e_ls:.4f} sawtooth_width={sawtooth_width(a.e_ls, dt)}")
        print("regime,g,ticks,sends,triggers,merges,starvations,mean_idle_s,fill_min,fill_max")
        for name, g, r in rows:
            lo, hi = r.fill_range(a.h_a)
            print(f"{name},{g:.4f},{r.ticks},{r.sends},{r.triggers},{r.merges},{r.starvations},"
                  f"{r.mean_idle_s:.4f},{lo:.4f},{hi:.4f}")
            if a.trace_dir:
                Path(a.trace_dir).mkdir(parents=True, exist_ok=True)
                Path(a.trace_dir, f"trace-{name}.csv").write_text(r.trace_csv())
    return run


def cmd_dataset_inspect(a):
    if not Path(a.root, "meta", "info.json").exists():
        raise UsageError(f"no dataset at {a.root}")

    def run():
        from . import dataset as ds

        info = ds.load_info(a.root)
        _emit({"info": info.to_json()})
        try:
            stats = ds.load_stats(a.root)
            _emit({"stats": {k: v.to_json() for k, v in stats.items()}})
        except (ds.StaleStats, FileNotFoundError):
            print("# stats: stale or missing")
        print("episode_index\tlength\tfile_id\trow_offset\ttask")
        for e in ds.load_episodes(a.root, info):
            print(f"{e.episode_index}\t{e.length}\t{e.file_id}\t{e.row_offset}\t{e.task}")
    return run


def cmd_bridge_demo(a):
    for name in ("steps", "update_every", "episode_len"):
        _positive(name.replace("_", "-"), getattr(a, name))
    if not 0 <= a.human_rate <= 1:
        raise UsageError("--human-rate must lie in [0, 1]")

    def run():
        from .rlbridge import actor_learner_loop

        report = actor_learner_loop(a.steps, a.update_every, a.episode_len, a.human_rate, a.seed)
        _emit(report.summary())
        return EXIT_RUNTIME if report.lost else EXIT_OK
    return run


COMMANDS = {"teach": cmd_teach, "train": cmd_train, "serve": cmd_serve, "run-client": cmd_run_client,
            "bench": cmd_bench, "dataset-inspect": cmd_dataset_inspect, "bridge-demo": cmd_bridge_demo}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
        run = COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        code = run()
    except KeyboardInterrupt:
        return EXIT_OK
    except Exception as e:
        logging.getLogger(__name__).debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
