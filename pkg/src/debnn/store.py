"""Versioned on-disk containers for datasets, checkpoints, posteriors,
ensemble manifests and metric reports, plus an append-only result store.

Everything is canonical JSON (sorted keys, repr floats), which round-trips
float64 bit-exactly and re-serializes byte-identically.
"""
from __future__ import annotations

import json
import os

import numpy as np

from .data import Dataset, OodPair
from .ensemble import PosteriorHandle
from .metrics import MetricsReport
from .flows import RadialFlow
from .nn import Checkpoint, NetworkSpec, ParamVector, TrainConfig
from .posteriors import FlowPosterior, LllaPosterior, PointMassPosterior, SwagPosterior
from .util import canonical_json

FORMAT_PREFIX = "debnn"
VERSION = 1


class StoreError(RuntimeError):
    pass


class StoreVersionError(StoreError):
    pass


class StoreCorruptError(StoreError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        data = [float(v) for v in a.ravel()]
        dtype = "float64"
    elif a.dtype.kind in "iu":
        data = [int(v) for v in a.ravel()]
        dtype = "int64"
    else:
        raise TypeError(f"cannot encode array of dtype {a.dtype}")
    return {"__array__": True, "dtype": dtype, "shape": list(a.shape), "data": data}


def decode_array(d: dict) -> np.ndarray:
    dtype = np.float64 if d["dtype"] == "float64" else np.int64
    return np.asarray(d["data"], dtype=dtype).reshape(d["shape"])


def _wrap(kind: str, body: dict) -> dict:
    return {"format": f"{FORMAT_PREFIX}/{kind}", "version": VERSION, **body}


def serialize(kind: str, body: dict) -> str:
    return canonical_json(_wrap(kind, body)) + "\n"


def save_record(path, kind: str, body: dict) -> None:
    with open(path, "w") as f:
        f.write(serialize(kind, body))


def load_record(path, kind: str) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        rec = json.loads(raw)
    except json.JSONDecodeError as e:
        raise StoreCorruptError(f"cannot parse {path}", offset=e.pos) from e
    if not isinstance(rec, dict) or rec.get("format") != f"{FORMAT_PREFIX}/{kind}":
        raise StoreVersionError(f"{path} is not a {FORMAT_PREFIX}/{kind} file")
    if rec.get("version") != VERSION:
        raise StoreVersionError(f"{path} has version {rec.get('version')}, expected {VERSION}")
    return rec


# --- dataset ----------------------------------------------------------------

def dataset_body(ds: Dataset) -> dict:
    return {
        "inputs": encode_array(ds.inputs),
        "targets": encode_array(ds.targets),
        "task": ds.task,
        "n_classes": ds.n_classes,
        "splits": {k: encode_array(v) for k, v in ds.splits.items()},
        "generator": ds.generator,
    }


def save_dataset(path, ds: Dataset) -> None:
    save_record(path, "dataset", dataset_body(ds))


def load_dataset(path) -> Dataset:
    rec = load_record(path, "dataset")
    return Dataset(
        inputs=decode_array(rec["inputs"]), targets=decode_array(rec["targets"]),
        task=rec["task"], n_classes=rec["n_classes"],
        splits={k: decode_array(v) for k, v in rec["splits"].items()},
        generator=rec["generator"],
    )


def save_ood(path, pair: OodPair) -> None:
    save_record(path, "ood", {"id_name": pair.id_name, "kind": pair.kind,
                              "inputs": encode_array(pair.inputs), "generator": pair.generator})


def load_ood(path) -> OodPair:
    rec = load_record(path, "ood")
    return OodPair(id_name=rec["id_name"], kind=rec["kind"],
                   inputs=decode_array(rec["inputs"]), generator=rec["generator"])


# --- checkpoint -------------------------------------------------------------

def checkpoint_body(ckpt: Checkpoint) -> dict:
    return {
        "spec": ckpt.spec.to_dict(),
        "params": encode_array(ckpt.params.values),
        "partition": list(ckpt.params.partition),
        "config": ckpt.config.to_dict(),
        "trace": ckpt.trace,
        "member_id": ckpt.member_id,
    }


def save_checkpoint(path, ckpt: Checkpoint, cache_key: str = "") -> None:
    body = checkpoint_body(ckpt)
    body["cache_key"] = cache_key
    save_record(path, "checkpoint", body)


def load_checkpoint(path) -> Checkpoint:
    rec = load_record(path, "checkpoint")
    spec = NetworkSpec.from_dict(rec["spec"])
    return Checkpoint(
        spec=spec,
        params=ParamVector(decode_array(rec["params"]), tuple(rec["partition"])),
        config=TrainConfig.from_dict(rec["config"]),
        trace=rec["trace"], member_id=rec["member_id"],
    )


# --- posteriors -------------------------------------------------------------

def _posterior_body(post) -> dict:
    if isinstance(post, PointMassPosterior):
        return {"variant": "point_mass", "center": encode_array(post.center.values),
                "partition": list(post.center.partition)}
    if isinstance(post, SwagPosterior):
        return {"variant": "swag", "theta_swa": encode_array(post.theta_swa.values),
                "partition": list(post.theta_swa.partition),
                "sigma_diag": encode_array(post.sigma_diag),
                "deviations": encode_array(post.deviations),
                "scale_lambda": post.scale_lambda}
    if isinstance(post, LllaPosterior):
        return {"variant": "llla", "theta_map": encode_array(post.theta_map.values),
                "partition": list(post.theta_map.partition),
                "ggn": encode_array(post.ggn), "prior_precision": post.prior_precision,
                "mode": post.mode, "scale_lambda": post.scale_lambda}
    if isinstance(post, FlowPosterior):
        return {"variant": "llla_flow", "base": _posterior_body(post.base),
                "flows": [{"z0": encode_array(f.z0), "log_alpha": f.log_alpha,
                           "beta_raw": f.beta_raw} for f in post.flows]}
    raise TypeError(f"cannot serialize posterior {type(post).__name__}")


def _posterior_from_body(body: dict):
    variant = body["variant"]
    if variant == "point_mass":
        return PointMassPosterior(ParamVector(decode_array(body["center"]),
                                              tuple(body["partition"])))
    if variant == "swag":
        return SwagPosterior(
            theta_swa=ParamVector(decode_array(body["theta_swa"]), tuple(body["partition"])),
            sigma_diag=decode_array(body["sigma_diag"]),
            deviations=decode_array(body["deviations"]),
            scale_lambda=body["scale_lambda"])
    if variant == "llla":
        return LllaPosterior(
            theta_map=ParamVector(decode_array(body["theta_map"]), tuple(body["partition"])),
            ggn=decode_array(body["ggn"]), prior_precision=body["prior_precision"],
            mode=body["mode"], scale_lambda=body["scale_lambda"])
    if variant == "llla_flow":
        return FlowPosterior(
            base=_posterior_from_body(body["base"]),
            flows=tuple(RadialFlow(z0=decode_array(f["z0"]), log_alpha=f["log_alpha"],
                                   beta_raw=f["beta_raw"]) for f in body["flows"]))
    raise StoreVersionError(f"unknown posterior variant {variant!r}")


def save_posterior(path, handle: PosteriorHandle, cache_key: str = "") -> None:
    body = {
        "method": handle.method, "member_id": handle.member_id,
        "spec": handle.spec.to_dict(), "posterior": _posterior_body(handle.posterior),
        "tuning": handle.tuning, "cache_key": cache_key,
    }
    save_record(path, "posterior", body)


def load_posterior(path) -> PosteriorHandle:
    rec = load_record(path, "posterior")
    return PosteriorHandle(
        method=rec["method"], member_id=rec["member_id"],
        spec=NetworkSpec.from_dict(rec["spec"]),
        posterior=_posterior_from_body(rec["posterior"]), tuning=rec["tuning"],
    )


# --- ensemble manifest ------------------------------------------------------

def save_manifest(path, member_ids, weights, seed: int, k: int, method: str = "",
                  cache_key: str = "") -> None:
    save_record(path, "manifest", {
        "member_ids": list(member_ids), "weights": [float(w) for w in weights],
        "seed": seed, "k": k, "method": method, "cache_key": cache_key,
    })


def load_manifest(path) -> dict:
    rec = load_record(path, "manifest")
    return {k: rec[k] for k in ("member_ids", "weights", "seed", "k", "method")}


# --- metrics report ---------------------------------------------------------

def save_report(path, report: MetricsReport) -> None:
    save_record(path, "report", {"record": report.to_record()})


def load_report(path) -> MetricsReport:
    return MetricsReport.from_record(load_record(path, "report")["record"])


# --- result store -----------------------------------------------------------

RESULT_KEY_FIELDS = ("experiment", "method", "k", "seed")


class ResultStore:
    """Append-only JSONL store of metric records keyed by
    (experiment, method, k, seed). Each append is a single O_APPEND write, so
    records from interleaved appenders stay whole; readers skip a trailing
    partial line."""

    def __init__(self, path):
        self.path = str(path)

    def _key(self, record: dict) -> tuple:
        try:
            return tuple(record[f] for f in RESULT_KEY_FIELDS)
        except KeyError as e:
            raise ValueError(f"record missing key field {e}") from e

    def keys(self) -> set:
        return {self._key(r) for r in self.rows()}

    def rows(self) -> list:
        if not os.path.exists(self.path):
            return []
        with open(self.path, "rb") as f:
            raw = f.read()
        rows = []
        for line in raw.split(b"\n")[:-1]:      # unterminated tail = in-flight write
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise StoreCorruptError(f"corrupt record in {self.path}", offset=e.pos) from e
        return rows

    def contains(self, record_or_key) -> bool:
        key = self._key(record_or_key) if isinstance(record_or_key, dict) else tuple(record_or_key)
        return key in self.keys()

    def append(self, record: dict) -> None:
        key = self._key(record)
        if key in self.keys():
            raise ValueError(f"duplicate result key {key}")
        line = (canonical_json(record) + "\n").encode()
        fd = os.open(self.path, os.O_APPEND | os.O_CREAT | os.O_WRONLY, 0o644)
        try:
            os.write(fd, line)
        finally:
            os.close(fd)

    def append_if_new(self, record: dict) -> bool:
        if self.contains(record):
            return False
        self.append(record)
        return True


def write_csv(path, rows, columns) -> None:
    """Plain CSV with a fixed header; values rendered with repr-level floats."""
    def render(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(path, "w") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(render(row.get(c)) for c in columns) + "\n")
