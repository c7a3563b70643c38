"""Binary array containers plus the calibration artifact.

Container layout (one file):

    EXITFLOWC1\\n                      magic line
    <8-byte LE manifest length>
    <manifest JSON, utf-8>             format version, kind, metadata,
                                       array names + shapes in blob order
    <float64 little-endian blobs>      C-order, concatenated
    <32-byte sha256>                   over everything above

Floats travel as raw 64-bit little-endian words, so save -> load is
bit-exact. Writes go through a temp file and os.replace, so a crashed
write never leaves a half-written artifact behind.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np
import tomlkit

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

from .calibrate import ExitDistribution, ExitSchedule
from .nn import RngStream, rng_stream
from .policies import ToyPolicy, policy_params
from .task import Episode, Observation, SyntheticTaskSpec

MAGIC = b"EXITFLOWC1\n"
CONTAINER_VERSION = 1
CALIBRATION_VERSION = 1


class StoreError(Exception):
    """Artifact cannot be read or written."""


class VersionError(StoreError):
    """Artifact format version is not the one this code writes."""


class CorruptionError(StoreError):
    """Artifact bytes are inconsistent (checksum, truncation, manifest)."""


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise StoreError(f"cannot write {path}: {exc}") from exc


def save_container(path: str | Path, kind: str, meta: dict,
                   arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    names = sorted(arrays)
    blobs = []
    entries = []
    for name in names:
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    manifest = {"format_version": CONTAINER_VERSION, "kind": kind,
                "meta": meta, "arrays": entries}
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body = (MAGIC + len(mbytes).to_bytes(8, "little") + mbytes
            + b"".join(blobs))
    _atomic_write(path, body + hashlib.sha256(body).digest())


def load_container(path: str | Path,
                   expect_kind: str | None = None
                   ) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise StoreError(f"cannot read {path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise CorruptionError(f"{path}: not an exitflow container")
    if len(raw) < len(MAGIC) + 8 + 32:
        raise CorruptionError(f"{path}: truncated container")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError(f"{path}: checksum mismatch")
    off = len(MAGIC)
    mlen = int.from_bytes(body[off:off + 8], "little")
    off += 8
    try:
        manifest = json.loads(body[off:off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: bad manifest: {exc}") from exc
    off += mlen
    version = manifest.get("format_version")
    if version != CONTAINER_VERSION:
        raise VersionError(f"{path}: container version {version}, "
                           f"this build reads {CONTAINER_VERSION}")
    if expect_kind is not None and manifest.get("kind") != expect_kind:
        raise StoreError(f"{path}: expected a {expect_kind!r} container, "
                         f"found {manifest.get('kind')!r}")
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(body):
            raise CorruptionError(f"{path}: array data truncated")
        arrays[entry["name"]] = np.frombuffer(
            body[off:off + nbytes], dtype="<f8").reshape(shape).copy()
        off += nbytes
    if off != len(body):
        raise CorruptionError(f"{path}: trailing bytes after arrays")
    return manifest["meta"], arrays


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _all_params(policy: ToyPolicy) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for kind in ("mlp", "fm"):
        if policy.supports(kind):
            params.update(policy_params(policy, kind))
    if not params:
        raise StoreError("policy has no heads; nothing to checkpoint")
    return params


def save_checkpoint(policy: ToyPolicy, path: str | Path, *, step: int,
                    stream: RngStream, config_hash: str) -> None:
    fm = policy.fm_head
    topology = {
        "n_layers": policy.n_layers,
        "width": policy.backbone.width,
        "tap_stride": policy.tap_stride,
        "chunk_shape": list(policy.chunk_shape),
        "heads": [k for k in ("mlp", "fm") if policy.supports(k)],
        "fm_hidden_width": fm.hidden_width if fm else None,
        "fm_time_dim": fm.time_dim if fm else None,
    }
    meta = {"config_hash": config_hash, "step": step, "topology": topology,
            "rng": {"seed": stream.seed, "counter": stream.counter}}
    save_container(path, "checkpoint", meta, _all_params(policy))


def load_checkpoint(path: str | Path
                    ) -> tuple[ToyPolicy, int, RngStream, dict]:
    meta, arrays = load_container(path, expect_kind="checkpoint")
    topo = meta["topology"]
    policy = ToyPolicy.init(
        n_layers=int(topo["n_layers"]), width=int(topo["width"]),
        chunk_shape=tuple(topo["chunk_shape"]),
        head_kinds=tuple(topo["heads"]), seed=0,
        tap_stride=int(topo["tap_stride"]))
    if policy.fm_head is not None:
        built = (policy.fm_head.hidden_width, policy.fm_head.time_dim)
        saved = (topo["fm_hidden_width"], topo["fm_time_dim"])
        if built != tuple(saved):
            raise VersionError(f"{path}: fm head geometry {saved} not "
                               f"buildable by this code ({built})")
    dest = _all_params(policy)
    if set(dest) != set(arrays):
        missing = sorted(set(dest) ^ set(arrays))
        raise CorruptionError(f"{path}: parameter set mismatch: {missing}")
    for name, arr in arrays.items():
        if dest[name].shape != arr.shape:
            raise CorruptionError(f"{path}: {name} has shape {arr.shape}, "
                                  f"expected {dest[name].shape}")
        np.copyto(dest[name], arr)
    stream = rng_stream(int(meta["rng"]["seed"]),
                        int(meta["rng"]["counter"]))
    return policy, int(meta["step"]), stream, meta


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def save_dataset(episodes: list[Episode], path: str | Path, *,
                 spec: SyntheticTaskSpec, seed: int,
                 config_hash: str) -> None:
    if not episodes:
        raise StoreError("refusing to save an empty dataset")
    arrays = {
        "object_pos": np.stack([e.obs.object_pos for e in episodes]),
        "distractor_pos": np.stack([e.obs.distractor_pos
                                    for e in episodes]),
        "state": np.stack([e.obs.state for e in episodes]),
        "instruction": np.array([e.obs.instruction for e in episodes],
                                dtype=np.float64),
        "mode": np.array([e.mode for e in episodes], dtype=np.float64),
        "chunk": np.stack([e.chunk for e in episodes]),
    }
    meta = {"config_hash": config_hash, "seed": seed,
            "n": len(episodes), "spec": dataclasses.asdict(spec)}
    save_container(path, "dataset", meta, arrays)


def load_dataset(path: str | Path) -> tuple[list[Episode], dict]:
    meta, a = load_container(path, expect_kind="dataset")
    n = int(meta["n"])
    episodes = []
    for i in range(n):
        obs = Observation(object_pos=a["object_pos"][i],
                          distractor_pos=a["distractor_pos"][i],
                          state=a["state"][i],
                          instruction=int(a["instruction"][i]))
        episodes.append(Episode(obs=obs, mode=int(a["mode"][i]),
                                chunk=a["chunk"][i]))
    return episodes, meta


# ---------------------------------------------------------------------------
# Calibration artifact (human-readable)
# ---------------------------------------------------------------------------


def save_calibration(schedule: ExitSchedule, dist: ExitDistribution,
                     path: str | Path, *, config_hash: str,
                     collection: dict, v_summary: dict) -> None:
    doc = {
        "artifact": {"kind": "calibration",
                     "format_version": CALIBRATION_VERSION,
                     "config_hash": config_hash},
        "schedule": {
            "baseline_layer": schedule.baseline_layer,
            "exit_layers": list(schedule.exit_layers),
            "thresholds": [float(t) for t in schedule.thresholds],
            "metric": schedule.metric,
            "mode": schedule.mode,
            "exhausted": schedule.exhausted,
        },
        "distribution": {"kind": dist.kind, "criterion": dist.criterion,
                         "extra": dist.extra,
                         "probs": [float(p) for p in dist.probs]},
        "collection": collection,
        "v_summary": v_summary,
    }
    _atomic_write(Path(path), tomlkit.dumps(doc).encode("utf-8"))


def load_calibration(path: str | Path
                     ) -> tuple[ExitSchedule, ExitDistribution, dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise StoreError(f"cannot read {path}: {exc}") from exc
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise CorruptionError(f"{path}: malformed calibration artifact: "
                              f"{exc}") from exc
    art = doc.get("artifact", {})
    if art.get("kind") != "calibration":
        raise StoreError(f"{path}: not a calibration artifact")
    version = art.get("format_version")
    if version != CALIBRATION_VERSION:
        raise VersionError(f"{path}: calibration version {version}, "
                           f"this build reads {CALIBRATION_VERSION}")
    s = doc["schedule"]
    schedule = ExitSchedule(
        baseline_layer=int(s["baseline_layer"]),
        exit_layers=tuple(int(x) for x in s["exit_layers"]),
        thresholds=tuple(float(t) for t in s["thresholds"]),
        metric=s["metric"], mode=s["mode"],
        exhausted=bool(s["exhausted"]))
    d = doc["distribution"]
    dist = ExitDistribution(kind=d["kind"], criterion=float(d["criterion"]),
                            extra=float(d["extra"]),
                            probs=tuple(float(p) for p in d["probs"]))
    if any(not math.isfinite(p) for p in dist.probs):
        raise CorruptionError(f"{path}: non-finite probabilities")
    meta = {"config_hash": art.get("config_hash"),
            "collection": doc.get("collection", {}),
            "v_summary": doc.get("v_summary", {})}
    return schedule, dist, meta


def v_summary_dict(values: np.ndarray) -> dict:
    """Per-exit-row summary statistics of a discrepancy matrix."""
    return {
        "n_samples": int(values.shape[1]),
        "row_mean": [float(x) for x in values.mean(axis=1)],
        "row_std": [float(x) for x in values.std(axis=1)],
        "row_min": [float(x) for x in values.min(axis=1)],
        "row_max": [float(x) for x in values.max(axis=1)],
    }
