"""Command-line front end.

``aerofed run`` executes an experiment: in-process by default, or as a thin
client against a running service with ``--server``.  ``aerofed serve``
starts the HTTP service.  Exit codes: 0 success, 1 usage/config error,
2 dataset missing, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

from . import nn
from .config import ConfigError, load_config
from .runner import DatasetMissingError, run_experiment

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATASET = 2
EXIT_DIVERGENCE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aerofed",
                                     description="aerial federated anomaly-detection simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", help="config file path")
    run.add_argument("--algo", help="ca2c_afl | dqn_afl | ddpg_fl | standalone | random")
    run.add_argument("--seed", type=int, help="run seed")
    run.add_argument("--episodes", type=int, help="number of training episodes")
    run.add_argument("--out", help="output directory for metrics and checkpoints")
    run.add_argument("--dataset", help="trace file path, or 'synthetic'")
    run.add_argument("--server", help="submit to a running service instead of "
                                      "executing locally")

    serve = sub.add_parser("serve", help="start the experiment service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--workdir", default="aerofed-runs",
                       help="directory for run artifacts")
    return parser


def _flag_overrides(args) -> dict[str, str]:
    overrides = {}
    if args.algo is not None:
        overrides["run.algo"] = args.algo
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.episodes is not None:
        overrides["run.episodes"] = str(args.episodes)
    if args.out is not None:
        overrides["run.out"] = args.out
    if args.dataset is not None:
        overrides["run.dataset"] = args.dataset
    return overrides


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, _flag_overrides(args),
                          env_seed=os.environ.get("AEROFED_SEED"))
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.server:
        return _run_remote(args.server, args, cfg.run.out)
    try:
        result = run_experiment(cfg, out_dir=cfg.run.out)
    except DatasetMissingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except nn.DivergenceError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    print(f"wrote metrics and report to {result.out_dir}")
    return EXIT_OK


def _run_remote(server: str, args, out_dir: str) -> int:
    import httpx

    config_text = ""
    if args.config:
        with open(args.config) as fh:
            config_text = fh.read()
    payload = {"config_text": config_text, "overrides": _flag_overrides(args)}
    with httpx.Client(base_url=server, timeout=30.0) as client:
        resp = client.post("/runs", json=payload)
        if resp.status_code == 422:
            print(f"error: {resp.json()['detail']}", file=sys.stderr)
            return EXIT_USAGE
        resp.raise_for_status()
        run_id = resp.json()["id"]
        print(f"submitted {run_id}")
        while True:
            info = client.get(f"/runs/{run_id}").json()
            if info["state"] in ("succeeded", "failed"):
                break
            time.sleep(0.5)
        if info["state"] == "failed":
            print(f"error: {info['error_kind']}: {info['error_detail']}",
                  file=sys.stderr)
            return {"dataset_missing": EXIT_DATASET,
                    "divergence": EXIT_DIVERGENCE}.get(info["error_kind"], EXIT_USAGE)
        os.makedirs(out_dir, exist_ok=True)
        for name, endpoint in (("metrics_slots.csv", "metrics/slots"),
                               ("metrics_episodes.csv", "metrics/episodes"),
                               ("report.txt", "report")):
            text = client.get(f"/runs/{run_id}/{endpoint}").text
            with open(os.path.join(out_dir, name), "w") as fh:
                fh.write(text)
    print(f"downloaded artifacts to {out_dir}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(args.workdir), host=args.host, port=args.port)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    return cmd_serve(args)


if __name__ == "__main__":
    sys.exit(main())
