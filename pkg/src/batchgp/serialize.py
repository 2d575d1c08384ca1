"""Model and policy files: a zip container of ``.npy`` arrays plus a JSON header.

The container is byte-for-byte reproducible: entries are written in a fixed
order with a fixed timestamp. ``meta.json`` carries the format name, the
container version and the object kind; loaders refuse anything else.
"""
from __future__ import annotations

import io
import json
import zipfile
from typing import NamedTuple

import numpy as np

from .data import Normalizer
from .gp import FitReport, GpEnsemble, GpModel, Hyperparams, PredictiveCache
from .policy import MlpPolicy

FORMAT = "batchgp"
VERSION = 1
_STAMP = (1980, 1, 1, 0, 0, 0)


class FormatError(ValueError):
    pass


def _write(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    header = {"format": FORMAT, "version": VERSION, "kind": kind, **meta}
    with zipfile.ZipFile(path, "w") as zf:
        def put(name, payload):
            info = zipfile.ZipInfo(name, date_time=_STAMP)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, payload)

        put("meta.json", json.dumps(header, sort_keys=True, indent=1).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            put(name + ".npy", buf.getvalue())


def _read(path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as err:
        raise FormatError(f"{path}: not a {FORMAT} container") from err
    with zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except (KeyError, json.JSONDecodeError) as err:
            raise FormatError(f"{path}: missing or unreadable header") from err
        if meta.get("format") != FORMAT:
            raise FormatError(f"{path}: unknown format {meta.get('format')!r}")
        if meta.get("version") != VERSION:
            raise FormatError(f"{path}: container version {meta.get('version')!r}, "
                              f"this build reads version {VERSION}")
        if meta.get("kind") != kind:
            raise FormatError(f"{path}: holds a {meta.get('kind')!r}, expected {kind!r}")
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return meta, arrays


def _normalizer_arrays(nz: Normalizer, prefix="norm_"):
    return {prefix + "mean": nz.mean, prefix + "std": nz.std, prefix + "flagged": nz.flagged.astype(np.uint8)}


def _normalizer_from(arrays, p, prefix="norm_"):
    return Normalizer(arrays[prefix + "mean"], arrays[prefix + "std"],
                      arrays[prefix + "flagged"].astype(bool), p)


def _pack_lower(L):
    return L[np.tril_indices(L.shape[0])]


def _unpack_lower(v, n):
    L = np.zeros((n, n))
    L[np.tril_indices(n)] = v
    return L


def save_ensemble(ens: GpEnsemble, path) -> None:
    arrays = {"X": ens.X, "target_scale": ens.target_scale, **_normalizer_arrays(ens.normalizer)}
    outputs = []
    for m, (model, cache) in enumerate(zip(ens.models, ens.caches)):
        hp = model.hyperparams
        arrays[f"y{m}"] = model.y
        arrays[f"log_lengthscales{m}"] = hp.log_lengthscales
        arrays[f"alpha{m}"] = cache.alpha
        arrays[f"L{m}"] = _pack_lower(cache.L)
        if cache.root is not None:
            arrays[f"root{m}"] = cache.root
        outputs.append({"log_signal": hp.log_signal, "log_noise": hp.log_noise, "jitter": cache.jitter,
                        "has_root": cache.root is not None})
    if ens.state_low is not None:
        arrays["state_low"] = np.asarray(ens.state_low, dtype=np.float64)
        arrays["state_high"] = np.asarray(ens.state_high, dtype=np.float64)
    meta = {"p": ens.p, "n": int(ens.X.shape[0]), "d": ens.d, "dt": ens.dt, "outputs": outputs,
            "reports": [[r.initial_lml, r.final_lml, r.steps, r.converged] for r in ens.reports]}
    _write(path, "gp_ensemble", meta, arrays)


def load_ensemble(path) -> GpEnsemble:
    meta, a = _read(path, "gp_ensemble")
    X, n = a["X"], meta["n"]
    models, caches = [], []
    for m, out in enumerate(meta["outputs"]):
        hp = Hyperparams(a[f"log_lengthscales{m}"], out["log_signal"], out["log_noise"])
        models.append(GpModel(X, a[f"y{m}"], hp, fitted=True))
        caches.append(PredictiveCache(a[f"alpha{m}"], _unpack_lower(a[f"L{m}"], n), out["jitter"],
                                      a.get(f"root{m}")))
    # timing is not stored, so reloaded reports show 0 seconds
    reports = [FitReport(r[0], r[1], r[2], 0.0, r[3]) for r in meta.get("reports", [])]
    return GpEnsemble(X, models, a["target_scale"], _normalizer_from(a, meta["p"]), caches, reports,
                      a.get("state_low"), a.get("state_high"), meta["dt"])


class PolicyBundle(NamedTuple):
    policy: MlpPolicy
    normalizer: Normalizer | None
    goal: np.ndarray | None  # raw goal state a single-goal policy was trained for


def save_policy(policy: MlpPolicy, path, normalizer: Normalizer | None = None, goal=None) -> None:
    arrays = {"theta": policy.to_flat()}
    if normalizer is not None:
        arrays.update(_normalizer_arrays(normalizer))
    if goal is not None:
        arrays["goal"] = np.asarray(goal, dtype=np.float64)
    meta = {"layer_sizes": list(policy.layer_sizes), "goal_conditioned": policy.goal_conditioned,
            "state_dim": policy.state_dim, "p": None if normalizer is None else normalizer.p}
    _write(path, "policy", meta, arrays)


def load_policy(path) -> PolicyBundle:
    meta, a = _read(path, "policy")
    sizes = tuple(meta["layer_sizes"])
    shapes = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        shapes += [(fan_in, fan_out), (fan_out,)]
    template = MlpPolicy(sizes, tuple(np.zeros(s) for s in shapes), meta["goal_conditioned"],
                         meta["state_dim"])
    policy = template.from_flat(a["theta"])
    nz = _normalizer_from(a, meta["p"]) if "norm_mean" in a else None
    return PolicyBundle(policy, nz, a.get("goal"))


def file_kind(path) -> str:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("meta.json")).get("kind", "")


__all__ = ["FormatError", "VERSION", "save_ensemble", "load_ensemble", "save_policy", "load_policy",
           "PolicyBundle", "file_kind"]
