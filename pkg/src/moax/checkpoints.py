"""Checkpoint format: a JSON manifest plus one flat binary array file.

The manifest records the model geometry, allocation plan, task, seeds, and
per-array byte offsets; ``arrays.bin`` holds every trainable array as
little-endian float64 in row-major order. The frozen base is never stored:
it is rebuilt from the config and seed on load. Placeholder experts get a
manifest entry but no bytes.

Integrity: the manifest pins the byte length and sha256 of arrays.bin, and
loading verifies both before touching the model. Failures raise
:class:`CheckpointError` with an expected-vs-actual field diff.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .allocation import AllocationPlan, SiteSpec
from .errors import CheckpointError, ConfigError
from .gating import TopK, TopP
from .model import ToyModel, ToyModelConfig, build_model
from .tasks import SyntheticTask, task_from_dict, task_to_dict

FORMAT = "moax-checkpoint-v1"
MANIFEST_NAME = "manifest.json"
ARRAYS_NAME = "arrays.bin"
_DTYPE = np.dtype("<f8")


# -- dict round-trips --------------------------------------------------------

def policy_to_dict(policy) -> dict:
    if isinstance(policy, TopK):
        return {"kind": "topk", "k": policy.k}
    if isinstance(policy, TopP):
        return {"kind": "topp", "threshold": policy.threshold}
    raise ConfigError(f"unknown activation policy {policy!r}")


def policy_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "topk":
        return TopK(k=int(d["k"]))
    if kind == "topp":
        return TopP(threshold=float(d["threshold"]))
    raise ConfigError(f"unknown activation policy kind {kind!r}")


def plan_to_dict(plan: AllocationPlan) -> dict:
    return {
        "name": plan.name,
        "n_layers": plan.n_layers,
        "expert_counts": list(plan.expert_counts),
        "ranks": list(plan.ranks),
        "placeholder_counts": list(plan.placeholder_counts),
        "policy": policy_to_dict(plan.policy),
        "sites": [{"name": s.name, "n": s.n, "m": s.m} for s in plan.sites],
    }


def plan_from_dict(d: dict) -> AllocationPlan:
    return AllocationPlan(
        name=d["name"],
        n_layers=int(d["n_layers"]),
        expert_counts=tuple(int(v) for v in d["expert_counts"]),
        ranks=tuple(int(v) for v in d["ranks"]),
        placeholder_counts=tuple(int(v) for v in d["placeholder_counts"]),
        policy=policy_from_dict(d["policy"]),
        sites=tuple(SiteSpec(s["name"], int(s["n"]), int(s["m"])) for s in d["sites"]),
    )


def model_config_to_dict(cfg: ToyModelConfig) -> dict:
    return {
        "n_layers": cfg.n_layers,
        "d_model": cfg.d_model,
        "d_ff": cfg.d_ff,
        "n_heads": cfg.n_heads,
        "vocab_size": cfg.vocab_size,
        "seq_len": cfg.seq_len,
        "adapter_sites": cfg.adapter_sites,
        "nonlinearity": cfg.nonlinearity,
        "base_std": cfg.base_std,
        "adapter_std": cfg.adapter_std,
        "renorm_true_only": cfg.renorm_true_only,
        "plan": plan_to_dict(cfg.plan) if cfg.plan is not None else None,
    }


def model_config_from_dict(d: dict) -> ToyModelConfig:
    plan = d.get("plan")
    return ToyModelConfig(
        n_layers=int(d["n_layers"]),
        d_model=int(d["d_model"]),
        d_ff=int(d["d_ff"]),
        n_heads=int(d["n_heads"]),
        vocab_size=int(d["vocab_size"]),
        seq_len=int(d["seq_len"]),
        adapter_sites=d["adapter_sites"],
        nonlinearity=d["nonlinearity"],
        base_std=float(d["base_std"]),
        adapter_std=float(d["adapter_std"]),
        renorm_true_only=bool(d.get("renorm_true_only", False)),
        plan=plan_from_dict(plan) if plan is not None else None,
    )


# -- save / load -------------------------------------------------------------

def save_checkpoint(model: ToyModel, directory, *, step: int, seed: int,
                    task: SyntheticTask | None = None) -> Path:
    """Write manifest.json and arrays.bin under directory; returns the
    manifest path. seed is the model-build seed needed to regrow the base."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    chunks: list[bytes] = []
    offset = 0

    def append(arr: np.ndarray) -> tuple[int, int]:
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        start = offset
        chunks.append(raw)
        offset += len(raw)
        return start, len(raw)

    adapters = []
    gates = []
    for handle in model.sites:
        for j, e in enumerate(handle.site.experts):
            entry = {
                "layer": handle.layer,
                "site": handle.name,
                "index": j,
                "n": e.n,
                "m": e.m,
                "r": e.rank,
                "is_placeholder": e.is_placeholder,
            }
            if not e.is_placeholder:
                entry["a_offset"], entry["a_bytes"] = append(e.a)
                entry["b_offset"], entry["b_bytes"] = append(e.b)
            adapters.append(entry)
        g = handle.site.gate.weight
        g_offset, g_bytes = append(g)
        gates.append({
            "layer": handle.layer,
            "site": handle.name,
            "rows": g.shape[0],
            "cols": g.shape[1],
            "offset": g_offset,
            "bytes": g_bytes,
        })

    blob = b"".join(chunks)
    (directory / ARRAYS_NAME).write_bytes(blob)

    manifest = {
        "format": FORMAT,
        "seed": seed,
        "step": step,
        "model": model_config_to_dict(model.cfg),
        "task": task_to_dict(task) if task is not None else None,
        "arrays_file": ARRAYS_NAME,
        "arrays_bytes": len(blob),
        "arrays_sha256": hashlib.sha256(blob).hexdigest(),
        "adapters": adapters,
        "gates": gates,
    }
    manifest_path = directory / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise CheckpointError(f"no {MANIFEST_NAME} in {directory}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def _integrity_diff(manifest: dict, blob: bytes) -> list[str]:
    diff = []
    if len(blob) != manifest["arrays_bytes"]:
        diff.append(f"arrays_bytes: manifest {manifest['arrays_bytes']}, file {len(blob)}")
    actual = hashlib.sha256(blob).hexdigest()
    if actual != manifest["arrays_sha256"]:
        diff.append(f"arrays_sha256: manifest {manifest['arrays_sha256']}, file {actual}")
    return diff


def load_checkpoint(directory) -> tuple[ToyModel, dict]:
    """Rebuild the model from manifest geometry and restore trainable arrays.

    Returns (model, manifest). Raises CheckpointError on integrity failure
    or any manifest/model shape mismatch.
    """
    directory = Path(directory)
    manifest = read_manifest(directory)

    arrays_path = directory / manifest["arrays_file"]
    if not arrays_path.exists():
        raise CheckpointError(f"missing array file {arrays_path}")
    blob = arrays_path.read_bytes()
    diff = _integrity_diff(manifest, blob)
    if diff:
        raise CheckpointError("checkpoint integrity failure:\n  " + "\n  ".join(diff))

    cfg = model_config_from_dict(manifest["model"])
    model = build_model(cfg, manifest["seed"])

    def take(offset: int, nbytes: int, shape: tuple[int, int], what: str) -> np.ndarray:
        if offset < 0 or offset + nbytes > len(blob):
            raise CheckpointError(f"{what}: byte range [{offset}, {offset + nbytes}) outside array file")
        arr = np.frombuffer(blob, dtype=_DTYPE, count=nbytes // 8, offset=offset)
        expected = shape[0] * shape[1]
        if arr.size != expected:
            raise CheckpointError(f"{what}: manifest holds {arr.size} values, model expects {expected}")
        return arr.reshape(shape).astype(np.float64)

    by_site = {(h.layer, h.name): h for h in model.sites}
    for entry in manifest["adapters"]:
        handle = by_site.get((entry["layer"], entry["site"]))
        if handle is None:
            raise CheckpointError(f"manifest adapter at layer {entry['layer']} site {entry['site']!r} "
                                  "has no matching model site")
        experts = handle.site.experts
        j = entry["index"]
        if not (0 <= j < len(experts)):
            raise CheckpointError(f"manifest adapter index {j} out of range at layer {entry['layer']}")
        e = experts[j]
        if entry["is_placeholder"] != e.is_placeholder or entry["r"] != e.rank:
            raise CheckpointError(
                f"layer {entry['layer']} {entry['site']} expert {j}: manifest says "
                f"rank={entry['r']} placeholder={entry['is_placeholder']}, model has "
                f"rank={e.rank} placeholder={e.is_placeholder}"
            )
        if e.is_placeholder:
            continue
        what = f"layer {entry['layer']} {entry['site']} expert {j}"
        e.a[...] = take(entry["a_offset"], entry["a_bytes"], (e.n, e.rank), what + " a")
        e.b[...] = take(entry["b_offset"], entry["b_bytes"], (e.rank, e.m), what + " b")

    for entry in manifest["gates"]:
        handle = by_site.get((entry["layer"], entry["site"]))
        if handle is None:
            raise CheckpointError(f"manifest gate at layer {entry['layer']} site {entry['site']!r} "
                                  "has no matching model site")
        g = handle.site.gate.weight
        if g.shape != (entry["rows"], entry["cols"]):
            raise CheckpointError(
                f"layer {entry['layer']} {entry['site']} gate: manifest shape "
                f"{(entry['rows'], entry['cols'])}, model shape {g.shape}"
            )
        g[...] = take(entry["offset"], entry["bytes"], g.shape, f"layer {entry['layer']} gate")

    return model, manifest


def checkpoint_task(manifest: dict) -> SyntheticTask | None:
    d = manifest.get("task")
    return task_from_dict(d) if d is not None else None
