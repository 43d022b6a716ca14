"""On-disk formats: parameter files and run directories.

Parameter file layout (all little-endian)::

    8 bytes   magic b"KDAIFPRM"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header {"spec_hash", "layer_sizes", "activation", "dim", ...}
    8*dim     float64 parameters
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError
from .model import MlpSpec, check_params

MAGIC = b"KDAIFPRM"
SCHEMA_VERSION = 1


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def save_params(path, spec: MlpSpec, params, extra: dict | None = None):
    params = check_params(spec, params)
    header = {
        "schema_version": SCHEMA_VERSION,
        "spec_hash": spec.spec_hash(),
        "dim": int(params.size),
        **spec.to_dict(),
        **(extra or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.astype("<f8").tobytes())


def load_params(path, expect: MlpSpec | None = None) -> tuple[MlpSpec, np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise InputError(f"{path}: not a parameter file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    spec = MlpSpec(tuple(header["layer_sizes"]), header["activation"])
    if spec.spec_hash() != header["spec_hash"]:
        raise InputError(f"{path}: header hash does not match its own spec")
    if expect is not None and expect.spec_hash() != header["spec_hash"]:
        raise InputError(
            f"{path}: spec hash {header['spec_hash']} does not match requested model {expect.spec_hash()}"
        )
    params = np.frombuffer(raw[12 + hlen :], dtype="<f8").astype(np.float64)
    if params.size != header["dim"]:
        raise InputError(f"{path}: expected {header['dim']} values, found {params.size}")
    return spec, check_params(spec, params), header


def write_metrics_csv(path, rows: list[dict]):
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow(["" if k not in r else (r[k] if isinstance(r[k], (int, str)) else repr(float(r[k]))) for k in keys])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k in ("iteration", "step") else float(v)) for k, v in r.items() if v != ""})
    return out


def save_run(run, out_dir, extra_config: dict | None = None, noise_mask=None):
    """Write a run directory; refuses to overwrite an existing run."""
    out = Path(out_dir)
    if (out / "config.json").exists():
        raise InputError(f"{out} already holds a run; run directories are append-only")
    out.mkdir(parents=True, exist_ok=True)
    cfg = {
        "schema_version": SCHEMA_VERSION,
        "mode": run.mode,
        "mechanism": run.mechanism,
        "train": run.config,
        "teacher_spec": run.teacher.spec.to_dict(),
        "student_spec": run.student.spec.to_dict(),
        **(extra_config or {}),
    }
    dump_json(cfg, out / "config.json")
    write_metrics_csv(out / "metrics.csv", run.metrics)
    for t, rep in enumerate(run.reports):
        (out / f"influence_iter_{t}.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    save_params(out / "final_params.bin", run.student.spec, run.student.params, {"role": "student"})
    save_params(out / "final_teacher_params.bin", run.teacher.spec, run.teacher.params, {"role": "teacher"})
    if noise_mask is not None:
        with open(out / "noise_mask.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "flipped"])
            for i, m in enumerate(noise_mask):
                w.writerow([i, int(m)])
    return out


def influence_files(run_dir) -> list[Path]:
    files = list(Path(run_dir).glob("influence_iter_*.json"))
    return sorted(files, key=lambda p: int(p.stem.rsplit("_", 1)[1]))
