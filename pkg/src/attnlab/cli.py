"""Command-line client for the service.

By default every subcommand runs against an in-process application instance,
so no server needs to be running; ``--server URL`` points the same client at
a remote instance instead.  ``serve`` starts the HTTP server.

The data directory for ``train`` comes from ``--data`` or, failing that, the
``ATTNLAB_DATA_DIR`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

DATA_DIR_ENV = "ATTNLAB_DATA_DIR"


def _client(server: str | None):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        from fastapi.testclient import TestClient

    from .service import create_app

    return TestClient(create_app())


def _fail(response) -> None:
    try:
        detail = response.json().get("detail", response.text)
    except ValueError:
        detail = response.text
    print(f"error ({response.status_code}): {detail}", file=sys.stderr)
    raise SystemExit(2)


def _post(server: str | None, route: str, payload: dict) -> dict:
    with _client(server) as client:
        response = client.post(route, json=payload)
        if response.status_code != 200:
            _fail(response)
        return response.json()


def _load_config(args) -> dict:
    if getattr(args, "preset", None):
        with _client(args.server) as client:
            response = client.get("/presets")
            if response.status_code != 200:
                _fail(response)
            presets = response.json()
        if args.preset not in presets:
            print(f"unknown preset {args.preset!r}; available: {sorted(presets)}", file=sys.stderr)
            raise SystemExit(2)
        return presets[args.preset]
    if not args.config:
        print("need --config PATH or --preset NAME", file=sys.stderr)
        raise SystemExit(2)
    return json.loads(Path(args.config).read_text())


def _write_json(path: str | None, payload: dict) -> None:
    text = json.dumps(payload, indent=2)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    config = _load_config(args)
    data_dir = args.data or os.environ.get(DATA_DIR_ENV)
    if not data_dir:
        print(f"need --data DIR or ${DATA_DIR_ENV}", file=sys.stderr)
        return 2
    report = _post(args.server, "/train", {"config": config, "data_dir": data_dir})
    _write_json(args.out, report)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["epoch", "lr", "train_loss", "test_acc", "lambda_min", "lambda_mean", "lambda_max"]
            )
            for e in report["epochs"]:
                writer.writerow(
                    [
                        e["epoch"],
                        repr(e["lr"]),
                        repr(e["train_loss"]),
                        repr(e["test_acc"]),
                        "" if e.get("lambda_min") is None else repr(e["lambda_min"]),
                        "" if e.get("lambda_mean") is None else repr(e["lambda_mean"]),
                        "" if e.get("lambda_max") is None else repr(e["lambda_max"]),
                    ]
                )
    final = report["final_test_acc"]
    print(f"final test accuracy: {final:.4f}", file=sys.stderr)
    return 0


def cmd_count_costs(args) -> int:
    doc = _load_config(args)
    model = doc.get("model", doc) if isinstance(doc, dict) else doc
    report = _post(args.server, "/costs", {"model": model})
    _write_json(args.out, report)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "type", "params", "multiplies", "adds"])
            for row in report["breakdown"]:
                writer.writerow([row["name"], row["type"], row["params"], row["multiplies"], row["adds"]])
            writer.writerow(["total", "", report["params"], report["multiplies"], report["adds"]])
    return 0


def cmd_grad_check(args) -> int:
    payload = {"mechanism": args.mechanism, "trials": args.trials, "seed": args.seed, "eps": args.eps}
    if args.gate:
        payload["gate"] = args.gate
    result = _post(args.server, "/grad-check", payload)
    print(json.dumps(result, indent=2))
    return 0 if result["passed"] else 1


def cmd_saturation_sweep(args) -> int:
    try:
        offsets = [float(tok) for tok in args.offsets.split(",") if tok.strip() != ""]
    except ValueError:
        print(f"could not parse --offsets {args.offsets!r} as comma-separated floats", file=sys.stderr)
        return 2
    if not offsets:
        print("need at least one offset", file=sys.stderr)
        return 2
    payload = {
        "mechanism": args.mechanism,
        "offsets": offsets,
        "seed": args.seed,
        "channels": args.channels,
        "spatial": args.spatial,
    }
    if args.gate:
        payload["gate"] = args.gate
    result = _post(args.server, "/saturation-sweep", payload)
    rows = result["rows"]
    lines = [["offset", "trunk_grad_norm", "branch_grad_norm", "input_grad_norm"]]
    lines += [
        [repr(r["offset"]), repr(r["trunk_grad_norm"]), repr(r["branch_grad_norm"]), repr(r["input_grad_norm"])]
        for r in rows
    ]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh).writerows(lines)
    else:
        csv.writer(sys.stdout).writerows(lines)
    return 0


def cmd_presets(args) -> int:
    with _client(args.server) as client:
        response = client.get("/presets")
        if response.status_code != 200:
            _fail(response)
        print(json.dumps(response.json(), indent=2))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def cmd_synth_data(args) -> int:
    from .data import write_synthetic_cifar10

    out = write_synthetic_cifar10(
        args.out,
        train_records=args.train_records,
        test_records=args.test_records,
        seed=args.seed,
    )
    print(f"wrote synthetic corpus to {out}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnlab",
        description="Channel-attention lab: training, cost accounting, gradient diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False):
        p.add_argument("--server", default=None, help="remote service URL (default: in-process)")
        if config:
            p.add_argument("--config", default=None, help="path to a JSON config document")
            p.add_argument("--preset", default=None, help="named preset instead of --config")

    p = sub.add_parser("train", help="run a training experiment and write its report")
    common(p, config=True)
    p.add_argument("--data", default=None, help=f"data directory (default: ${DATA_DIR_ENV})")
    p.add_argument("--out", default=None, help="write the JSON report here (default: stdout)")
    p.add_argument("--csv", default=None, help="also write per-epoch rows as CSV")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("count-costs", help="analytic parameter and multiply/add accounting")
    common(p, config=True)
    p.add_argument("--out", default=None, help="write the JSON report here (default: stdout)")
    p.add_argument("--csv", default=None, help="also write the per-layer breakdown as CSV")
    p.set_defaults(fn=cmd_count_costs)

    p = sub.add_parser("grad-check", help="verify unit gradients against central differences")
    common(p)
    p.add_argument("--mechanism", default="sb", choices=["static", "se", "sb", "dyconv"])
    p.add_argument("--gate", default=None, choices=["tanh", "sigmoid", "softmax", "relu", "none"])
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("saturation-sweep", help="gradient-path norms across gate saturation")
    common(p)
    p.add_argument("--mechanism", default="sb", choices=["se", "sb"])
    p.add_argument("--gate", default=None, choices=["tanh", "sigmoid", "softmax", "relu", "none"])
    p.add_argument("--offsets", required=True, help="comma-separated bias offsets, e.g. -20,-10,0,10,20")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--spatial", type=int, default=6)
    p.add_argument("--out", default=None, help="write sweep rows as CSV (default: stdout)")
    p.set_defaults(fn=cmd_saturation_sweep)

    p = sub.add_parser("presets", help="list the named experiment presets")
    common(p)
    p.set_defaults(fn=cmd_presets)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("synth-data", help="write a synthetic corpus in the CIFAR-10 binary format")
    p.add_argument("--out", required=True, help="target directory")
    p.add_argument("--train-records", type=int, default=10000)
    p.add_argument("--test-records", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth_data)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    for i, tok in enumerate(argv[:-1]):
        # let "--offsets -20,0,20" parse even though the value starts with "-"
        if tok == "--offsets" and argv[i + 1].startswith("-"):
            argv[i] = f"--offsets={argv[i + 1]}"
            del argv[i + 1]
            break
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
