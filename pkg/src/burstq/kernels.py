"""Job kernels executed by agents and the local tier.

A kernel is split into a *duration* (how long the work occupies its
executor) and a *produce* step (the instantaneous effect: reading inputs
and writing outputs). Live executors realize the duration as an abortable
wait before calling produce; the simulator schedules produce on the
virtual clock. Kernel crashes are converted into error results, never
raised.

Kernels:

* ``sleep`` - params ``duration_ms`` and ``fail``; writes ``done.txt``.
  The deterministic harness workload.
* ``regression-scan`` - reads ``geno.csv`` (n rows of m comma-separated
  additive genotype codes) and ``pheno.csv`` (n reals, one per line). For
  each marker column g fits y = a + b*g by least squares and emits the
  per-marker F statistic F = (SSR/1) / (SSE/(n-2)) to ``fprofile.tsv``
  plus the peak marker to ``peak.json``. A perfect fit (SSE = 0) reports
  F_CAP so output stays finite and sortable; a constant marker column
  reports F = 0.
"""

from __future__ import annotations

import json
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import JobKind

F_CAP = 1e12

REQUIRED_OUTPUTS = {
    JobKind.SLEEP: ("done.txt",),
    JobKind.REGRESSION_SCAN: ("fprofile.tsv", "peak.json"),
}


@dataclass
class KernelResult:
    exit_status: str  # "ok" | "error"
    outputs: dict[str, bytes] = field(default_factory=dict)
    log_text: str = ""

    @property
    def ok(self) -> bool:
        return self.exit_status == "ok"


def kernel_duration(kind: JobKind, params: dict[str, str]) -> float:
    """Seconds the kernel occupies its executor before producing output."""
    if kind is JobKind.SLEEP:
        return max(0.0, float(params.get("duration_ms", "0")) / 1000.0)
    # The scan itself is effectively instantaneous at demo scale; a
    # synthetic duration can be injected for capacity studies.
    return max(0.0, float(params.get("duration_s", "0")))


def run_kernel(kind: JobKind, params: dict[str, str], workdir: str | Path) -> KernelResult:
    """Produce the kernel's outputs in ``workdir``. Failures become data."""
    try:
        if kind is JobKind.SLEEP:
            return _sleep_produce(params, Path(workdir))
        if kind is JobKind.REGRESSION_SCAN:
            return _regression_produce(Path(workdir))
        return KernelResult("error", log_text=f"unknown kernel kind: {kind}")
    except Exception:
        return KernelResult(
            "error", log_text="kernel crashed:\n" + traceback.format_exc()
        )


def _sleep_produce(params: dict[str, str], workdir: Path) -> KernelResult:
    if str(params.get("fail", "")).lower() in ("1", "true", "yes"):
        return KernelResult("error", log_text="sleep kernel failed on request")
    payload = b"slept %s ms\n" % str(params.get("duration_ms", "0")).encode()
    (workdir / "done.txt").write_bytes(payload)
    return KernelResult("ok", outputs={"done.txt": payload}, log_text="slept")


def load_genotypes(path: Path) -> np.ndarray:
    rows = []
    for line in path.read_text().strip().splitlines():
        if not line.strip():
            continue
        rows.append([float(x) for x in line.split(",")])
    geno = np.asarray(rows, dtype=float)
    if geno.ndim != 2 or geno.size == 0:
        raise ValueError("geno.csv must be a non-empty matrix")
    return geno


def load_phenotypes(path: Path) -> np.ndarray:
    vals = [float(x) for x in path.read_text().split()]
    return np.asarray(vals, dtype=float)


def f_profile(geno: np.ndarray, pheno: np.ndarray) -> np.ndarray:
    """Per-marker F statistics for the single-marker regression scan."""
    n, m = geno.shape
    if pheno.shape != (n,):
        raise ValueError(f"phenotype length {pheno.shape} != sample count {n}")
    if n < 3:
        raise ValueError("regression scan needs at least 3 samples")

    y = pheno
    y_bar = y.mean()
    sst = float(((y - y_bar) ** 2).sum())
    fs = np.empty(m)
    for j in range(m):
        g = geno[:, j]
        g_bar = g.mean()
        sxx = float(((g - g_bar) ** 2).sum())
        if sxx == 0.0:
            fs[j] = 0.0  # constant regressor: no fit possible
            continue
        sxy = float(((g - g_bar) * (y - y_bar)).sum())
        b = sxy / sxx
        a = y_bar - b * g_bar
        resid = y - a - b * g
        sse = float((resid**2).sum())
        ssr = sst - sse
        if sse == 0.0:
            fs[j] = F_CAP
        else:
            fs[j] = min(ssr / (sse / (n - 2)), F_CAP)
    return fs


def _regression_produce(workdir: Path) -> KernelResult:
    geno_path = workdir / "geno.csv"
    pheno_path = workdir / "pheno.csv"
    if not geno_path.exists() or not pheno_path.exists():
        return KernelResult(
            "error", log_text="missing input: geno.csv and pheno.csv required"
        )
    geno = load_genotypes(geno_path)
    pheno = load_phenotypes(pheno_path)
    fs = f_profile(geno, pheno)

    lines = ["# F=0 for constant marker columns; F capped at 1e12 when SSE=0"]
    for j, f in enumerate(fs, start=1):
        lines.append(f"{j}\t{f:.12g}")
    profile_bytes = ("\n".join(lines) + "\n").encode()

    peak_idx = int(np.argmax(fs))  # first maximum wins ties
    peak = {"marker": peak_idx + 1, "f": float(fs[peak_idx])}
    peak_bytes = (json.dumps(peak) + "\n").encode()

    (workdir / "fprofile.tsv").write_bytes(profile_bytes)
    (workdir / "peak.json").write_bytes(peak_bytes)
    return KernelResult(
        "ok",
        outputs={"fprofile.tsv": profile_bytes, "peak.json": peak_bytes},
        log_text=f"scanned {geno.shape[1]} markers over {geno.shape[0]} samples",
    )


def parse_fprofile(data: bytes) -> list[tuple[int, float]]:
    """Read an fprofile.tsv back into (marker_index, F) pairs."""
    out = []
    for line in data.decode().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        idx, f = line.split("\t")
        out.append((int(idx), float(f)))
    return out
