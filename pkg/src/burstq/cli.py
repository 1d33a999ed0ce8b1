"""Command-line interface.

Client subcommands map 1:1 onto the HTTP API; ``serve`` and ``agent`` run
the two long-lived processes; ``simulate`` drives the accelerated-time
harness; ``store dump`` prints the database as text. Exit code 0 on
success; failures print a machine-readable JSON error on stderr and exit
nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import signal
import sys
import tarfile
import threading
import time
from pathlib import Path

import requests

from . import __version__
from .config import SystemConfig, read_config_file
from .errors import BurstqError, ConfigError
from .simulate import render_metrics, run_simulation
from .workload import WorkloadProfile, generate_workload


def fail(code: str, message: str, status: int = 1) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")
    return status


def emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def base_url(args) -> str:
    if args.url:
        return args.url.rstrip("/")
    cfg = SystemConfig.load(getattr(args, "config", None))
    return f"http://{cfg.bind_host}:{cfg.bind_port}"


def http_call(method: str, url: str, **kw) -> requests.Response:
    resp = requests.request(method, url, timeout=kw.pop("timeout", 30), **kw)
    if resp.status_code >= 400:
        try:
            payload = resp.json()
        except ValueError:
            payload = {"error": "http", "message": resp.text[:200]}
        err = BurstqError(payload.get("message", "") or payload.get("error", "http"))
        err.code = payload.get("error", "http")
        raise err
    return resp


# ----------------------------------------------------------------------
# subcommand implementations


def cmd_serve(args) -> int:
    from .service import Service

    cfg = SystemConfig.load(args.config)
    if args.port is not None:
        cfg = dataclasses.replace(cfg, bind_port=args.port)
    if args.data_dir is not None:
        cfg = dataclasses.replace(cfg, data_dir=args.data_dir)
    service = Service(cfg).start()
    print(f"burstq {__version__} serving on {service.url}", flush=True)

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    try:
        while not stop.is_set():
            time.sleep(0.2)
    finally:
        service.stop()
    return 0


def cmd_agent(args) -> int:
    from .agent import AgentCore, AgentHttpServer
    from .runtime import ThreadRuntime

    core = AgentCore(ThreadRuntime(), workdir=args.workdir, name="agent")
    server = AgentHttpServer(core, port=args.port).start()
    print(f"agent listening on {server.url}", flush=True)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    while not stop.is_set():
        time.sleep(0.2)
    server.stop()
    return 0


def cmd_submit(args) -> int:
    params: dict[str, str] = {}
    for item in args.param or []:
        if "=" not in item:
            return fail("usage", f"--param expects k=v, got {item!r}")
        k, _, v = item.partition("=")
        params[k] = v
    if args.markers is not None:
        params["markers"] = str(args.markers)
    if args.samples is not None:
        params["samples"] = str(args.samples)

    files = {}
    for item in args.file or []:
        if "=" not in item:
            return fail("usage", f"--file expects name=path, got {item!r}")
        name, _, path = item.partition("=")
        try:
            files[name] = (name, Path(path).read_bytes())
        except OSError as exc:
            return fail("io", f"cannot read {path}: {exc}")

    data = {"type": args.type}
    if params:
        data["params"] = json.dumps(params)
    if args.backend:
        data["backend"] = args.backend
    if args.derive_from:
        data["derive_from"] = args.derive_from
    if args.owner:
        data["owner"] = args.owner
    # encode fields as multipart parts (filename None) so the request is
    # always multipart/form-data, with or without file parts
    parts = [(k, (None, v)) for k, v in data.items()]
    parts += [(name, payload) for name, payload in files.items()]
    resp = http_call("POST", f"{base_url(args)}/jobs", files=parts)
    emit(resp.json())
    return 0


def cmd_status(args) -> int:
    emit(http_call("GET", f"{base_url(args)}/jobs/{args.id}").json())
    return 0


def cmd_results(args) -> int:
    resp = http_call("GET", f"{base_url(args)}/jobs/{args.id}/results")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    with tarfile.open(fileobj=io.BytesIO(resp.content)) as tar:
        for member in tar.getmembers():
            data = tar.extractfile(member).read()
            (out_dir / Path(member.name).name).write_bytes(data)
            names.append(member.name)
    emit({"id": args.id, "files": sorted(names), "out": str(out_dir)})
    return 0


def cmd_cancel(args) -> int:
    emit(http_call("DELETE", f"{base_url(args)}/jobs/{args.id}").json())
    return 0


def cmd_jobs(args) -> int:
    emit(http_call("GET", f"{base_url(args)}/jobs").json())
    return 0


def cmd_vms(args) -> int:
    emit(http_call("GET", f"{base_url(args)}/vms").json())
    return 0


def cmd_accounting(args) -> int:
    emit(http_call("GET", f"{base_url(args)}/accounting").json())
    return 0


def _profile_from_file(path: str) -> WorkloadProfile:
    mapping = read_config_file(path)
    kwargs = {}
    for key, raw in mapping.items():
        field = {f.name: f for f in dataclasses.fields(WorkloadProfile)}.get(key)
        if field is None:
            raise ConfigError(f"unknown profile key {key!r}")
        default = getattr(WorkloadProfile(), key)
        if isinstance(default, tuple):
            kwargs[key] = tuple(int(x) for x in raw.split(","))
        elif isinstance(default, float):
            kwargs[key] = float(raw)
        elif isinstance(default, int):
            kwargs[key] = int(raw)
        else:
            kwargs[key] = raw
    return WorkloadProfile(**kwargs)


def cmd_simulate(args) -> int:
    if args.profile == "paper-daily":
        profile = WorkloadProfile()
    else:
        profile = _profile_from_file(args.profile)
    cfg = SystemConfig.load(args.config)
    cfg = dataclasses.replace(cfg, durable_fsync=False, sim_transport="direct")
    schedule = generate_workload(profile, args.days, seed=args.seed)
    import tempfile

    data_dir = args.data_dir or tempfile.mkdtemp(prefix="burstq-sim-")
    metrics = run_simulation(
        schedule,
        cfg,
        data_dir,
        seed=args.seed,
        acceleration=args.accel,
        out_path=args.out,
    )
    if args.out:
        print(f"metrics written to {args.out}", flush=True)
    else:
        sys.stdout.write(render_metrics(metrics))
    return 0


def cmd_store(args) -> int:
    from .runtime import ThreadRuntime
    from .store import Store

    if args.action != "dump":
        return fail("usage", f"unknown store action {args.action!r}")
    cfg = SystemConfig.load(args.config)
    data_dir = Path(args.data_dir or cfg.data_dir)
    store = Store(data_dir / "store", clock=ThreadRuntime().now, fsync=False)
    sys.stdout.write(store.dump_text())
    store.close()
    return 0


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="burstq",
        description="Elastic cloud-bursting batch service",
    )
    parser.add_argument("--version", action="version", version=f"burstq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def client_args(p):
        p.add_argument("--url", help="service base URL (default: from config)")
        p.add_argument("--config", help="config file (default: $BURSTQ_CONFIG)")

    p = sub.add_parser("serve", help="run the job manager service")
    p.add_argument("--config", help="config file (default: $BURSTQ_CONFIG)")
    p.add_argument("--port", type=int, help="override bind port")
    p.add_argument("--data-dir", help="override data directory")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("agent", help="run a standalone execution agent")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--workdir", default=None)
    p.set_defaults(fn=cmd_agent)

    p = sub.add_parser("submit", help="submit a job")
    p.add_argument("--type", required=True, help="job kind (sleep, regression-scan)")
    p.add_argument("--file", action="append", metavar="NAME=PATH")
    p.add_argument("--param", action="append", metavar="K=V")
    p.add_argument("--backend", choices=["Local", "Grid", "Cloud"])
    p.add_argument("--derive-from", dest="derive_from", metavar="JOB_ID")
    p.add_argument("--owner")
    p.add_argument("--markers", type=int)
    p.add_argument("--samples", type=int)
    client_args(p)
    p.set_defaults(fn=cmd_submit)

    for name, fn, extra in (
        ("status", cmd_status, ["id"]),
        ("cancel", cmd_cancel, ["id"]),
        ("jobs", cmd_jobs, []),
        ("vms", cmd_vms, []),
        ("accounting", cmd_accounting, []),
    ):
        p = sub.add_parser(name)
        for arg in extra:
            p.add_argument(arg)
        client_args(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("results", help="download a completed job's outputs")
    p.add_argument("id")
    p.add_argument("--out", required=True, help="directory for extracted files")
    client_args(p)
    p.set_defaults(fn=cmd_results)

    p = sub.add_parser("simulate", help="run the accelerated-time simulator")
    p.add_argument("--profile", default="paper-daily", help="'paper-daily' or a profile file")
    p.add_argument("--days", type=float, required=True)
    p.add_argument("--accel", type=float, default=None, help="virtual seconds per real second (default: as fast as possible)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="metrics JSON path (default: stdout)")
    p.add_argument("--data-dir", help="simulation working directory (default: temp)")
    p.add_argument("--config", help="config file for the simulated system")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("store", help="store maintenance commands")
    p.add_argument("action", choices=["dump"])
    p.add_argument("--data-dir")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_store)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BurstqError as exc:
        return fail(exc.code, str(exc))
    except requests.RequestException as exc:
        return fail("connection", str(exc))


if __name__ == "__main__":
    sys.exit(main())
