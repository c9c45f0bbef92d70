"""Experiment driver: train a pool of MAP models, fit post-hoc posteriors,
assemble mixtures, and run the evaluation suite (ensemble-size sweeps,
MC-sample and stratification ablations, covariance scaling, OOD detection,
stacking, method rankings).

Stages communicate only through versioned artifacts in a working directory.
Each artifact carries a cache key hashed from its configuration slice and all
upstream artifact bytes, so reruns skip finished work and any upstream byte
change invalidates everything downstream.
"""
from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import metrics
from .data import make_dataset, make_ood
from .ensemble import (MixturePosterior, PosteriorHandle, build_mixture, draw_ensembles,
                       EnsembleDraw, mixture_predictive, normalized_entropy, stack_weights)
from .nn import NetworkSpec, TrainConfig, TrainingDivergedError, train_map
from .posteriors import (DEFAULT_SWAG_LR_GRID, DEFAULT_TAU_GRID, FLOW_PRIOR_GRID,
                         PointMassPosterior, scale_covariance, tune_flow_prior,
                         tune_prior_precision, tune_swag_lr)
from .store import (ResultStore, load_checkpoint, load_dataset, load_ood, load_posterior,
                    load_record, save_checkpoint, save_dataset, save_manifest, save_ood,
                    save_posterior, write_csv)
from .util import canonical_json, digest, substream

POINT_METHODS = ("de", "swa")

EVAL_COLUMNS = ("experiment", "dataset", "method", "k", "seed", "s", "lam", "sampler",
                "elpd", "accuracy", "n_mae", "ece", "auroc", "ece_bins", "ood_score",
                "members")


@dataclass
class ExperimentConfig:
    name: str
    dataset: dict
    network: dict
    train: dict
    ood_kind: str = "shifted_blobs"
    pool_size: int = 30
    k_list: tuple = (1, 2, 5, 10, 20)
    n_draws: int = 30
    s_select: int = 100
    s_test: int = 200
    methods: tuple = ("de", "swa", "swag", "llla", "la_nf")
    flow_lengths: tuple = (1, 5, 10, 30)
    main_flow_length: int = 10
    tau_grid: tuple = tuple(DEFAULT_TAU_GRID)
    swag_lr_grid: tuple = tuple(DEFAULT_SWAG_LR_GRID)
    flow_prior_grid: tuple = FLOW_PRIOR_GRID
    lambda_grid: tuple = tuple(np.logspace(-3.0, 0.0, 9))
    swag_epochs: int = 20
    swag_rank: int = 20
    flow_epochs: int = 20
    flow_lr: float = 1e-3
    flow_mc: int = 8
    sample_sweep: tuple = (1, 2, 5, 10, 20, 50, 100, 200, 500)
    ece_bins: int = 15
    master_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for name in ("k_list", "methods", "flow_lengths", "tau_grid", "swag_lr_grid",
                     "flow_prior_grid", "lambda_grid", "sample_sweep"):
            setattr(self, name, tuple(getattr(self, name)))
        if any(k > self.pool_size for k in self.k_list):
            raise ValueError("every ensemble size must be <= pool_size")
        if self.s_select < 1 or self.s_test < 1:
            raise ValueError("sample counts must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    def spec(self) -> NetworkSpec:
        return NetworkSpec.from_dict(self.network)

    def eval_methods(self) -> tuple:
        """Method ids with the flow family expanded per configured length."""
        out = []
        for m in self.methods:
            if m == "la_nf":
                out.extend(f"la_nf_{t}" for t in self.flow_lengths)
            else:
                out.append(m)
        return tuple(out)

    def rank_methods(self) -> tuple:
        """One representative per family, for rankings and headline tables."""
        out = []
        for m in self.methods:
            out.append(f"la_nf_{self.main_flow_length}" if m == "la_nf" else m)
        return tuple(out)


def default_config(kind: str = "two_moons", name: str | None = None) -> ExperimentConfig:
    """Desk-scale experiment defaults.

    MAP training runs at a constant learning rate without early stopping so
    the point estimates keep visible SGD noise for the iterate-averaging
    posteriors to exploit; cosine annealing and ELPD early stopping stay
    available through the train config.
    """
    if kind == "regression":
        dataset = {"kind": "regression", "n": 300, "seed": 0}
        network = {"layer_widths": [1, 64, 64, 2], "activation": "tanh", "head": "heteroscedastic"}
        train = {"epochs": 300, "batch_size": 64, "lr": 0.01, "momentum": 0.9,
                 "weight_decay": 3e-3, "lr_schedule": "constant", "early_stop_patience": None}
        ood_kind = "out_of_range"
    else:
        dataset = {"kind": kind, "n": 200, "noise": 0.4, "seed": 0}
        network = {"layer_widths": [2, 64, 64, 2 if kind == "two_moons" else 3],
                   "activation": "tanh", "head": "classifier"}
        train = {"epochs": 300, "batch_size": 64, "lr": 0.05, "momentum": 0.9,
                 "weight_decay": 1e-5, "lr_schedule": "constant", "early_stop_patience": None}
        ood_kind = "shifted_blobs"
    return ExperimentConfig(name=name or kind, dataset=dataset, network=network,
                            train=train, ood_kind=ood_kind)


def seed_int(master: int, *path) -> int:
    return int(substream(master, *path).integers(2 ** 62))


# ---------------------------------------------------------------------------
# Working directory


class Workdir:
    def __init__(self, root):
        self.root = str(root)
        for sub in ("checkpoints", "posteriors", "manifests", "results", "tables"):
            os.makedirs(os.path.join(self.root, sub), exist_ok=True)

    def path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    def checkpoint(self, member: int) -> str:
        return self.path("checkpoints", f"member{member:02d}.json")

    def failure(self, member: int, stage: str) -> str:
        return self.path("checkpoints", f"member{member:02d}.{stage}.failed")

    def posterior(self, member: int, method: str) -> str:
        return self.path("posteriors", f"member{member:02d}_{method}.json")

    def store(self, name: str) -> ResultStore:
        return ResultStore(self.path("results", f"{name}.jsonl"))


def _cached(path: str, key: str) -> bool:
    if not os.path.exists(path):
        return False
    try:
        rec = load_record(path, _kind_of(path))
    except Exception:
        return False
    return rec.get("cache_key") == key


def _kind_of(path: str) -> str:
    if "checkpoints" in path:
        return "checkpoint"
    if "posteriors" in path:
        return "posterior"
    raise ValueError(path)


def _file_digest(path: str) -> str:
    with open(path, "rb") as f:
        return digest(f.read())


# ---------------------------------------------------------------------------
# Stage: datasets


def ensure_dataset(cfg: ExperimentConfig, wd: Workdir):
    ds_path = wd.path("dataset.json")
    ood_path = wd.path("ood.json")
    if not os.path.exists(ds_path):
        save_dataset(ds_path, make_dataset(cfg.dataset))
    ds = load_dataset(ds_path)
    if not os.path.exists(ood_path):
        save_ood(ood_path, make_ood(ds, cfg.ood_kind, seed=seed_int(cfg.master_seed, "ood")))
    return ds, load_ood(ood_path)


# ---------------------------------------------------------------------------
# Stage: train pool


def _ckpt_key(cfg: ExperimentConfig, member: int) -> str:
    slice_ = {"dataset": cfg.dataset, "network": cfg.network, "train": cfg.train,
              "master_seed": cfg.master_seed, "member": member}
    return digest(canonical_json(slice_))


def _train_member(cfg_dict: dict, root: str, member: int) -> str:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    wd = Workdir(root)
    key = _ckpt_key(cfg, member)
    path = wd.checkpoint(member)
    if _cached(path, key):
        return "cached"
    ds, _ = ensure_dataset(cfg, wd)
    train_cfg = TrainConfig(**{**cfg.train, "seed": seed_int(cfg.master_seed, "train", member)})
    try:
        ckpt = train_map(cfg.spec(), ds, train_cfg)
    except TrainingDivergedError as e:
        with open(wd.failure(member, "train"), "w") as f:
            f.write(str(e) + "\n")
        return f"failed: {e}"
    ckpt.member_id = f"member{member:02d}"
    save_checkpoint(path, ckpt, cache_key=key)
    return "trained"


def cmd_train_pool(cfg: ExperimentConfig, wd: Workdir) -> dict:
    """Train pool_size MAP models with member seeds derived from the master
    seed. Divergent members are recorded as failures and skipped downstream."""
    ensure_dataset(cfg, wd)
    statuses = {}
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futs = {m: pool.submit(_train_member, cfg.to_dict(), wd.root, m)
                    for m in range(cfg.pool_size)}
            statuses = {m: f.result() for m, f in futs.items()}
    else:
        for m in range(cfg.pool_size):
            statuses[m] = _train_member(cfg.to_dict(), wd.root, m)
    return statuses


# ---------------------------------------------------------------------------
# Stage: fit posteriors


def _fit_member_posteriors(cfg_dict: dict, root: str, member: int) -> str:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    wd = Workdir(root)
    ckpt_path = wd.checkpoint(member)
    if not os.path.exists(ckpt_path):
        return "no checkpoint"
    ds, _ = ensure_dataset(cfg, wd)
    ckpt = load_checkpoint(ckpt_path)
    upstream = _file_digest(ckpt_path)
    spec = ckpt.spec
    mid = ckpt.member_id
    done = []

    def want(method: str, extra: dict) -> str | None:
        key = digest(upstream, canonical_json(extra))
        path = wd.posterior(member, method)
        return None if _cached(path, key) else key

    def put(method: str, post, tuning: dict, key: str):
        save_posterior(wd.posterior(member, method),
                       PosteriorHandle(method=method, member_id=mid, spec=spec,
                                       posterior=post, tuning=tuning), cache_key=key)
        done.append(method)

    try:
        key = want("de", {})
        if key:
            put("de", PointMassPosterior(center=ckpt.params.copy()), {}, key)

        if "llla" in cfg.methods:
            key = want("llla", {"grid": list(cfg.tau_grid), "s": cfg.s_select})
            if key:
                tau, post, table = tune_prior_precision(
                    ckpt, ds, grid=cfg.tau_grid, n_samples=cfg.s_select,
                    seed=seed_int(cfg.master_seed, "llla", member))
                put("llla", post, {"tau": tau, "table": table}, key)

        if "swag" in cfg.methods or "swa" in cfg.methods:
            extra = {"grid": list(cfg.swag_lr_grid), "m": cfg.swag_epochs,
                     "r": cfg.swag_rank, "s": cfg.s_select}
            key_g = want("swag", extra) if "swag" in cfg.methods else None
            key_a = want("swa", extra) if "swa" in cfg.methods else None
            if key_g or key_a:
                tuning = tune_swag_lr(ckpt, ds, grid=cfg.swag_lr_grid,
                                      n_epochs=cfg.swag_epochs, rank=cfg.swag_rank,
                                      n_samples=cfg.s_select,
                                      seed=seed_int(cfg.master_seed, "swag", member))
                if key_g:
                    put("swag", tuning.posterior,
                        {"lr": tuning.lr_swag, "table": tuning.table}, key_g)
                if key_a:
                    put("swa", tuning.swa,
                        {"lr": tuning.lr_swa, "table": tuning.table}, key_a)

        if "la_nf" in cfg.methods:
            for t in cfg.flow_lengths:
                method = f"la_nf_{t}"
                key = want(method, {"grid": list(cfg.flow_prior_grid), "t": t,
                                    "epochs": cfg.flow_epochs, "lr": cfg.flow_lr,
                                    "mc": cfg.flow_mc, "s": cfg.s_select})
                if key:
                    tau, post, table = tune_flow_prior(
                        ckpt, ds, t, grid=cfg.flow_prior_grid, epochs=cfg.flow_epochs,
                        lr=cfg.flow_lr, n_mc=cfg.flow_mc, n_samples=cfg.s_select,
                        seed=seed_int(cfg.master_seed, "flow", member, t))
                    put(method, post, {"tau": tau, "table": table}, key)
    except (TrainingDivergedError, np.linalg.LinAlgError) as e:
        with open(wd.failure(member, "fit"), "w") as f:
            f.write(str(e) + "\n")
        return f"failed: {e}"
    return "fit " + ",".join(done) if done else "cached"


def cmd_fit_posteriors(cfg: ExperimentConfig, wd: Workdir) -> dict:
    """Per member: tune and fit the configured post-hoc posteriors, all
    selections by validation ELPD with s_select samples."""
    statuses = {}
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futs = {m: pool.submit(_fit_member_posteriors, cfg.to_dict(), wd.root, m)
                    for m in range(cfg.pool_size)}
            statuses = {m: f.result() for m, f in futs.items()}
    else:
        for m in range(cfg.pool_size):
            statuses[m] = _fit_member_posteriors(cfg.to_dict(), wd.root, m)
    return statuses


# ---------------------------------------------------------------------------
# Ensembles + evaluation


def load_pool(cfg: ExperimentConfig, wd: Workdir, method: str) -> dict:
    """member index -> PosteriorHandle for every member with this method fitted."""
    out = {}
    for m in range(cfg.pool_size):
        path = wd.posterior(m, method)
        if os.path.exists(path):
            out[m] = load_posterior(path)
    return out


def draws_for_k(cfg: ExperimentConfig, k: int) -> list:
    """K=1 uses each pool member once (the MAP-estimate baseline rows).

    Larger K takes the first K entries of one seeded pool permutation per
    draw index: marginally each draw is still a uniform K-subset without
    replacement, but draws are nested across ensemble sizes, which pairs the
    size comparison and removes membership noise from the K-curves.
    """
    if k == 1:
        return [EnsembleDraw(member_ids=(m,), seed=cfg.master_seed, k=1)
                for m in range(cfg.pool_size)]
    draws = []
    for j in range(cfg.n_draws):
        perm = substream(cfg.master_seed, "draws", j).permutation(cfg.pool_size)
        draws.append(EnsembleDraw(member_ids=tuple(int(i) for i in perm[:k]),
                                  seed=cfg.master_seed, k=k))
    return draws


def _mixture_for(handles: dict, draw: EnsembleDraw, weights=None) -> MixturePosterior | None:
    if any(m not in handles for m in draw.member_ids):
        return None
    return build_mixture([handles[m] for m in draw.member_ids], weights=weights)


def _eval_record(cfg: ExperimentConfig, dataset, experiment: str, method: str, k: int,
                 draw_idx: int, draw: EnsembleDraw, mix: MixturePosterior,
                 x, y, s: int, lam: float = 1.0, sampler: str = "stratified",
                 rng=None, extra: dict | None = None) -> dict:
    pred = mixture_predictive(mix, x, y, n_samples=s, rng=rng,
                              stratified=(sampler == "stratified"))
    rep = metrics.evaluate_predictive(pred, y, ece_bins=cfg.ece_bins)
    rec = {"experiment": experiment, "dataset": cfg.name, "method": method, "k": k,
           "seed": draw_idx, "s": s, "lam": lam, "sampler": sampler,
           "members": list(draw.member_ids)}
    rec.update(rep.to_record())
    if extra:
        rec.update(extra)
    return rec


def cmd_evaluate(cfg: ExperimentConfig, wd: Workdir) -> int:
    """Test-set metrics for every method, ensemble size, and membership draw
    (uniform weights, stratified sampling at s_test), plus the two derived
    percent-change tables against the MAP baseline and the same-size plain
    ensemble."""
    ds, _ = ensure_dataset(cfg, wd)
    x, y = ds.split("test")
    store = wd.store("evaluate")
    added = 0
    for method in cfg.eval_methods():
        handles = load_pool(cfg, wd, method)
        for k in cfg.k_list:
            for draw_idx, draw in enumerate(draws_for_k(cfg, k)):
                if store.contains(("evaluate", method, k, draw_idx)):
                    continue
                mix = _mixture_for(handles, draw)
                if mix is None:
                    store.append({"experiment": "evaluate", "method": method, "k": k,
                                  "seed": draw_idx, "status": "skipped",
                                  "members": list(draw.member_ids), "dataset": cfg.name})
                    continue
                if method == "de":
                    manifest = wd.path("manifests", f"k{k:02d}_draw{draw_idx:03d}.json")
                    if not os.path.exists(manifest):
                        save_manifest(manifest, [f"member{m:02d}" for m in draw.member_ids],
                                      mix.weights, draw.seed, k)
                rng = substream(cfg.master_seed, "eval", method, k, draw_idx)
                store.append(_eval_record(cfg, ds, "evaluate", method, k, draw_idx, draw,
                                          mix, x, y, s=cfg.s_test, rng=rng))
                added += 1
    _write_pct_tables(cfg, wd)
    return added


def _rows(store: ResultStore, experiment: str) -> list:
    return [r for r in store.rows() if r.get("experiment") == experiment
            and r.get("status") != "skipped"]


def _pct(value: float, base: float) -> float:
    return 100.0 * (value - base) / abs(base)


def _mean_2se(values) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    se = v.std(ddof=1) / np.sqrt(len(v)) if len(v) > 1 else 0.0
    return float(v.mean()), float(2.0 * se), len(v)


def _write_pct_tables(cfg: ExperimentConfig, wd: Workdir) -> None:
    rows = _rows(wd.store("evaluate"), "evaluate")
    if not rows:
        return
    map_rows = [r["elpd"] for r in rows if r["method"] == "de" and r["k"] == 1]
    if not map_rows:
        return
    map_base = float(np.mean(map_rows))
    de_by_draw = {(r["k"], r["seed"]): r["elpd"] for r in rows if r["method"] == "de"}
    vs_map, vs_de = [], []
    for method in cfg.eval_methods():
        for k in cfg.k_list:
            sel = [r for r in rows if r["method"] == method and r["k"] == k]
            if not sel:
                continue
            mean, two_se, n = _mean_2se([_pct(r["elpd"], map_base) for r in sel])
            vs_map.append({"method": method, "k": k, "pct_elpd_mean": mean,
                           "pct_elpd_2se": two_se, "n_draws": n})
            paired = [(r["elpd"], de_by_draw.get((k, r["seed"]))) for r in sel]
            paired = [(v, b) for v, b in paired if b is not None]
            if paired:
                mean, two_se, n = _mean_2se([_pct(v, b) for v, b in paired])
                vs_de.append({"method": method, "k": k, "pct_elpd_mean": mean,
                              "pct_elpd_2se": two_se, "n_draws": n})
    cols = ("method", "k", "pct_elpd_mean", "pct_elpd_2se", "n_draws")
    write_csv(wd.path("tables", "elpd_vs_map.csv"), vs_map, cols)
    write_csv(wd.path("tables", "elpd_vs_de.csv"), vs_de, cols)


def cmd_ablate_samples(cfg: ExperimentConfig, wd: Workdir) -> int:
    """ELPD at the largest configured ensemble size as a function of the MC
    sample count, with both stratified and iid allocation."""
    ds, _ = ensure_dataset(cfg, wd)
    x, y = ds.split("test")
    store = wd.store("ablate")
    k = max(cfg.k_list)
    added = 0
    for method in cfg.eval_methods():
        handles = load_pool(cfg, wd, method)
        for sampler in ("stratified", "iid"):
            for s in cfg.sample_sweep:
                experiment = f"ablate:s{s}:{sampler}"
                for draw_idx, draw in enumerate(draws_for_k(cfg, k)):
                    if store.contains((experiment, method, k, draw_idx)):
                        continue
                    mix = _mixture_for(handles, draw)
                    if mix is None:
                        continue
                    # same stream across sampler modes and sample counts: the
                    # per-(component, draw) substreams make the comparisons paired
                    rng = substream(cfg.master_seed, "ablate", method, k, draw_idx)
                    store.append(_eval_record(cfg, ds, experiment, method, k, draw_idx,
                                              draw, mix, x, y, s=s, sampler=sampler, rng=rng))
                    added += 1
    _write_sample_tables(cfg, wd, k)
    return added


def _write_sample_tables(cfg: ExperimentConfig, wd: Workdir, k: int) -> None:
    rows = [r for r in wd.store("ablate").rows() if r.get("status") != "skipped"]
    map_rows = [r["elpd"] for r in _rows(wd.store("evaluate"), "evaluate")
                if r["method"] == "de" and r["k"] == 1]
    map_base = float(np.mean(map_rows)) if map_rows else None
    sweep, diffs = [], []
    for method in cfg.eval_methods():
        for s in cfg.sample_sweep:
            by_mode = {}
            for sampler in ("stratified", "iid"):
                sel = {r["seed"]: r["elpd"] for r in rows
                       if r["method"] == method and r["s"] == s and r["sampler"] == sampler}
                if sel:
                    mean, two_se, n = _mean_2se(list(sel.values()))
                    row = {"method": method, "k": k, "s": s, "sampler": sampler,
                           "elpd_mean": mean, "elpd_2se": two_se, "n_draws": n}
                    if map_base is not None:
                        row["pct_vs_map"] = _pct(mean, map_base)
                    sweep.append(row)
                    by_mode[sampler] = sel
            if "stratified" in by_mode and "iid" in by_mode and map_base is not None:
                common = sorted(set(by_mode["stratified"]) & set(by_mode["iid"]))
                deltas = [_pct(by_mode["stratified"][d], map_base)
                          - _pct(by_mode["iid"][d], map_base) for d in common]
                if deltas:
                    mean, two_se, n = _mean_2se(deltas)
                    diffs.append({"method": method, "k": k, "s": s,
                                  "pct_diff_mean": mean, "pct_diff_2se": two_se, "n_draws": n})
    write_csv(wd.path("tables", "sample_sweep.csv"), sweep,
              ("method", "k", "s", "sampler", "elpd_mean", "elpd_2se", "pct_vs_map", "n_draws"))
    write_csv(wd.path("tables", "stratification_diff.csv"), diffs,
              ("method", "k", "s", "pct_diff_mean", "pct_diff_2se", "n_draws"))


def cmd_sweep_lambda(cfg: ExperimentConfig, wd: Workdir) -> int:
    """Covariance scaling sweep for the sampled-posterior methods, with the
    same-size plain-ensemble ELPD as a reference line."""
    ds, _ = ensure_dataset(cfg, wd)
    x, y = ds.split("test")
    store = wd.store("lambda")
    added = 0
    methods = [m for m in ("swag", "llla") if m in cfg.methods]
    for method in methods:
        handles = load_pool(cfg, wd, method)
        for lam in cfg.lambda_grid:
            experiment = f"lambda:{lam:.6g}"
            for k in cfg.k_list:
                for draw_idx, draw in enumerate(draws_for_k(cfg, k)):
                    if store.contains((experiment, method, k, draw_idx)):
                        continue
                    mix = _mixture_for(handles, draw)
                    if mix is None:
                        continue
                    scaled = MixturePosterior(
                        components=tuple(dataclasses.replace(
                            h, posterior=scale_covariance(h.posterior, lam))
                            for h in mix.components),
                        weights=mix.weights)
                    rng = substream(cfg.master_seed, "eval", method, k, draw_idx)
                    store.append(_eval_record(cfg, ds, experiment, method, k, draw_idx,
                                              draw, scaled, x, y, s=cfg.s_test, lam=lam,
                                              rng=rng))
                    added += 1
    _write_lambda_table(cfg, wd)
    return added


def _write_lambda_table(cfg: ExperimentConfig, wd: Workdir) -> None:
    rows = [r for r in wd.store("lambda").rows() if r.get("status") != "skipped"]
    de_rows = [r for r in _rows(wd.store("evaluate"), "evaluate") if r["method"] == "de"]
    de_ref = {}
    for k in cfg.k_list:
        sel = [r["elpd"] for r in de_rows if r["k"] == k]
        if sel:
            de_ref[k] = float(np.mean(sel))
    out = []
    for r_method in ("swag", "llla"):
        for lam in cfg.lambda_grid:
            for k in cfg.k_list:
                sel = [r["elpd"] for r in rows if r["method"] == r_method
                       and r["k"] == k and abs(r["lam"] - lam) < 1e-12]
                if sel:
                    mean, two_se, n = _mean_2se(sel)
                    out.append({"method": r_method, "k": k, "lam": float(lam),
                                "elpd_mean": mean, "elpd_2se": two_se,
                                "de_elpd_mean": de_ref.get(k), "n_draws": n})
    write_csv(wd.path("tables", "lambda_sweep.csv"), out,
              ("method", "k", "lam", "elpd_mean", "elpd_2se", "de_elpd_mean", "n_draws"))


def cmd_ood(cfg: ExperimentConfig, wd: Workdir) -> int:
    """In-distribution test ELPD against OOD-detection AUROC per method and
    ensemble size (plain ensembles flagged for highlighting)."""
    ds, ood = ensure_dataset(cfg, wd)
    x, y = ds.split("test")
    store = wd.store("ood")
    added = 0
    for method in cfg.eval_methods():
        handles = load_pool(cfg, wd, method)
        for k in cfg.k_list:
            for draw_idx, draw in enumerate(draws_for_k(cfg, k)):
                if store.contains(("ood", method, k, draw_idx)):
                    continue
                mix = _mixture_for(handles, draw)
                if mix is None:
                    continue
                rng = substream(cfg.master_seed, "eval", method, k, draw_idx)
                pred_id = mixture_predictive(mix, x, y, n_samples=cfg.s_test, rng=rng)
                rng_ood = substream(cfg.master_seed, "eval-ood", method, k, draw_idx)
                pred_ood = mixture_predictive(mix, ood.inputs, None, n_samples=cfg.s_test,
                                              rng=rng_ood)
                rep = metrics.evaluate_predictive(pred_id, y, ece_bins=cfg.ece_bins)
                rep.auroc = metrics.auroc(metrics.ood_score(pred_id),
                                          metrics.ood_score(pred_ood))
                rec = {"experiment": "ood", "dataset": cfg.name, "method": method,
                       "k": k, "seed": draw_idx, "s": cfg.s_test, "lam": 1.0,
                       "sampler": "stratified", "members": list(draw.member_ids),
                       "de_highlight": method == "de", "ood_kind": ood.kind}
                rec.update(rep.to_record())
                store.append(rec)
                added += 1
    rows = [r for r in wd.store("ood").rows() if r.get("status") != "skipped"]
    write_csv(wd.path("tables", "ood_scatter.csv"), rows,
              ("method", "k", "seed", "elpd", "auroc", "de_highlight", "ood_kind"))
    return added


def cmd_stacking(cfg: ExperimentConfig, wd: Workdir) -> int:
    """Per draw: stacking weights from member validation log densities, their
    normalized entropy, and the stacked-vs-uniform test ELPD comparison."""
    ds, _ = ensure_dataset(cfg, wd)
    x_val, y_val = ds.split("val")
    x, y = ds.split("test")
    store = wd.store("stacking")
    added = 0
    for method in cfg.rank_methods():
        handles = load_pool(cfg, wd, method)
        dens_cache = {}

        def member_density(m):
            if m not in dens_cache:
                dens_cache[m] = _member_val_log_density(
                    cfg, handles[m], x_val, y_val,
                    substream(cfg.master_seed, "stack", method, m))
            return dens_cache[m]

        for k in [k for k in cfg.k_list if k >= 2]:
            for draw_idx, draw in enumerate(draws_for_k(cfg, k)):
                if store.contains(("stacking", method, k, draw_idx)):
                    continue
                mix = _mixture_for(handles, draw)
                if mix is None:
                    continue
                dens = np.column_stack([member_density(m) for m in draw.member_ids])
                pi, trace = stack_weights(dens)
                rng = substream(cfg.master_seed, "eval", method, k, draw_idx)
                pred_u = mixture_predictive(mix, x, y, n_samples=cfg.s_test, rng=rng)
                stacked = build_mixture(mix.components, weights=pi)
                pred_s = mixture_predictive(stacked, x, y, n_samples=cfg.s_test, rng=rng)
                store.append({
                    "experiment": "stacking", "dataset": cfg.name, "method": method,
                    "k": k, "seed": draw_idx, "members": list(draw.member_ids),
                    "weights": [float(w) for w in pi],
                    "normalized_entropy": normalized_entropy(pi),
                    "elpd_uniform": metrics.elpd(pred_u),
                    "elpd_stacked": metrics.elpd(pred_s),
                    "objective_iters": len(trace),
                })
                added += 1
    rows = [r for r in wd.store("stacking").rows() if r.get("status") != "skipped"]
    write_csv(wd.path("tables", "stacking.csv"), rows,
              ("method", "k", "seed", "normalized_entropy", "elpd_uniform", "elpd_stacked"))
    return added


def _member_val_log_density(cfg: ExperimentConfig, handle: PosteriorHandle,
                            x_val, y_val, rng) -> np.ndarray:
    """A member's own predictive log density on the validation set."""
    single = build_mixture([handle])
    pred = mixture_predictive(single, x_val, y_val, n_samples=cfg.s_select, rng=rng)
    return pred.log_density


def cmd_rank(cfg: ExperimentConfig, wd: Workdir) -> list:
    """Rank the representative methods 1..n per (draw, K, metric), average the
    ranks over draws, and emit a grid table. Ties share the average rank;
    missing methods are excluded and flagged."""
    rows = _rows(wd.store("evaluate"), "evaluate")
    methods = cfg.rank_methods()
    present = [m for m in methods if any(r["method"] == m for r in rows)]
    missing = sorted(set(methods) - set(present))
    task = "classification" if cfg.spec().head == "classifier" else "regression"
    metric_defs = [("elpd", +1), ("accuracy", +1) if task == "classification" else ("n_mae", +1)]
    if task == "classification":
        metric_defs.append(("ece", -1))
    out = []
    for k in cfg.k_list:
        draws = sorted({r["seed"] for r in rows if r["k"] == k})
        for metric_name, direction in metric_defs:
            sums = {m: 0.0 for m in present}
            count = 0
            for d in draws:
                vals = {}
                for m in present:
                    sel = [r for r in rows if r["method"] == m and r["k"] == k and r["seed"] == d]
                    if sel and sel[0].get(metric_name) is not None:
                        vals[m] = sel[0][metric_name]
                if len(vals) != len(present):
                    continue
                ranks = rankdata([-direction * vals[m] for m in present])
                for m, rk in zip(present, ranks):
                    sums[m] += rk
                count += 1
            if count:
                for m in present:
                    out.append({"method": m, "k": k, "metric": metric_name,
                                "avg_rank": sums[m] / count, "n_draws": count,
                                "missing_methods": ";".join(missing)})
    write_csv(wd.path("tables", "rank_table.csv"), out,
              ("method", "k", "metric", "avg_rank", "n_draws", "missing_methods"))
    return out


def cmd_report(cfg: ExperimentConfig, wd: Workdir) -> None:
    """Re-emit every derived table plus long-format dumps of the raw stores."""
    _write_pct_tables(cfg, wd)
    _write_sample_tables(cfg, wd, max(cfg.k_list))
    _write_lambda_table(cfg, wd)
    for name in ("evaluate", "ablate", "lambda", "ood", "stacking"):
        rows = wd.store(name).rows()
        if rows:
            cols = list(EVAL_COLUMNS) + sorted(
                {k for r in rows for k in r} - set(EVAL_COLUMNS))
            write_csv(wd.path("tables", f"{name}_long.csv"), rows, cols)
    cmd_rank(cfg, wd)


PIPELINE = ("train-pool", "fit-posteriors", "evaluate")
ALL_STAGES = PIPELINE + ("ablate-samples", "sweep-lambda", "ood", "stacking", "rank", "report")

STAGE_FNS = {
    "train-pool": cmd_train_pool,
    "fit-posteriors": cmd_fit_posteriors,
    "evaluate": cmd_evaluate,
    "ablate-samples": cmd_ablate_samples,
    "sweep-lambda": cmd_sweep_lambda,
    "ood": cmd_ood,
    "stacking": cmd_stacking,
    "rank": cmd_rank,
    "report": cmd_report,
}


def run_pipeline(cfg: ExperimentConfig, wd: Workdir, stages=PIPELINE) -> dict:
    results = {}
    for stage in stages:
        results[stage] = STAGE_FNS[stage](cfg, wd)
    return results
