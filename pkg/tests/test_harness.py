import json
import os

import numpy as np
import pytest

from debnn import harness, nn, posteriors, store
from debnn.harness import ExperimentConfig, Workdir, default_config


def tiny_config(**overrides):
    cfg = default_config("two_moons")
    cfg.dataset = {"kind": "two_moons", "n": 120, "noise": 0.25, "seed": 0}
    cfg.network = {"layer_widths": [2, 8, 2], "activation": "tanh", "head": "classifier"}
    cfg.train = {"epochs": 30, "batch_size": 32, "lr": 0.1, "momentum": 0.9,
                 "weight_decay": 1e-3, "lr_schedule": "cosine", "early_stop_patience": None}
    cfg.pool_size = 2
    cfg.k_list = (1, 2)
    cfg.n_draws = 3
    cfg.s_select = 20
    cfg.s_test = 40
    cfg.methods = ("de", "swa", "swag", "llla")
    cfg.tau_grid = (0.1, 1.0, 10.0)
    cfg.swag_lr_grid = (0.001, 0.01)
    cfg.swag_epochs = 4
    cfg.swag_rank = 3
    cfg.lambda_grid = (1e-3, 1.0)
    cfg.sample_sweep = (1, 2, 6)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    cfg = tiny_config()
    wd = Workdir(tmp_path_factory.mktemp("run"))
    harness.cmd_train_pool(cfg, wd)
    harness.cmd_fit_posteriors(cfg, wd)
    harness.cmd_evaluate(cfg, wd)
    return cfg, wd


class TestConfigDefaults:
    def test_protocol_defaults(self):
        cfg = default_config("two_moons")
        assert cfg.pool_size == 30
        assert cfg.k_list == (1, 2, 5, 10, 20)
        assert cfg.n_draws == 30
        assert cfg.s_select == 100 and cfg.s_test == 200
        assert cfg.flow_lengths == (1, 5, 10, 30)
        assert len(cfg.tau_grid) == 21
        assert len(cfg.swag_lr_grid) == 21
        assert len(cfg.flow_prior_grid) == 15
        assert cfg.swag_epochs == 20 and cfg.swag_rank == 20
        assert cfg.flow_epochs == 20
        assert len(cfg.lambda_grid) == 9
        assert cfg.lambda_grid[0] == pytest.approx(1e-3)
        assert cfg.lambda_grid[-1] == pytest.approx(1.0)

    def test_k_bounded_by_pool(self):
        with pytest.raises(ValueError):
            ExperimentConfig(name="x", dataset={}, network={}, train={},
                             pool_size=4, k_list=(1, 5))

    def test_round_trip_dict(self):
        cfg = tiny_config()
        back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg

    def test_eval_methods_expand_flows(self):
        cfg = default_config("two_moons")
        assert "la_nf_10" in cfg.eval_methods()
        assert cfg.rank_methods() == ("de", "swa", "swag", "llla", "la_nf_10")


class TestTrainPool:
    def test_smoke_completes_and_caches(self, tiny_run):
        cfg, wd = tiny_run
        assert all(os.path.exists(wd.checkpoint(m)) for m in range(cfg.pool_size))
        again = harness.cmd_train_pool(cfg, wd)
        assert all(v == "cached" for v in again.values())

    def test_distinct_seeds_distinct_parameters(self, tiny_run):
        cfg, wd = tiny_run
        a = store.load_checkpoint(wd.checkpoint(0)).params.values
        b = store.load_checkpoint(wd.checkpoint(1)).params.values
        assert not np.array_equal(a, b)

    def test_parallel_workers(self, tmp_path):
        cfg = tiny_config(workers=2)
        wd = Workdir(tmp_path)
        statuses = harness.cmd_train_pool(cfg, wd)
        assert set(statuses.values()) == {"trained"}


class TestFitPosteriors:
    def test_posterior_files_per_member_per_method(self, tiny_run):
        cfg, wd = tiny_run
        for m in range(cfg.pool_size):
            for method in cfg.eval_methods():
                assert os.path.exists(wd.posterior(m, method)), method

    def test_refit_hits_cache(self, tiny_run):
        cfg, wd = tiny_run
        statuses = harness.cmd_fit_posteriors(cfg, wd)
        assert all(v == "cached" for v in statuses.values())

    def test_upstream_change_invalidates_cache(self, tiny_run):
        cfg, wd = tiny_run
        ckpt = store.load_checkpoint(wd.checkpoint(1))
        store.save_checkpoint(wd.checkpoint(1), ckpt,
                              cache_key=harness._ckpt_key(cfg, 1) + "")  # same key
        # rewriting with identical bytes keeps the cache...
        assert harness.cmd_fit_posteriors(cfg, wd)[1] == "cached"
        # ...but any byte change invalidates every downstream artifact
        ckpt.member_id = "member01-touched"
        store.save_checkpoint(wd.checkpoint(1), ckpt, cache_key=harness._ckpt_key(cfg, 1))
        statuses = harness.cmd_fit_posteriors(cfg, wd)
        assert statuses[1].startswith("fit")
        assert statuses[0] == "cached"

    def test_default_grids_give_21_row_tables(self, tmp_path):
        cfg = tiny_config(methods=("llla", "swag"), pool_size=1, k_list=(1,))
        cfg.tau_grid = tuple(posteriors.DEFAULT_TAU_GRID)
        cfg.swag_lr_grid = tuple(posteriors.DEFAULT_SWAG_LR_GRID)
        wd = Workdir(tmp_path)
        harness.cmd_train_pool(cfg, wd)
        harness.cmd_fit_posteriors(cfg, wd)
        llla = store.load_posterior(wd.posterior(0, "llla"))
        assert len(llla.tuning["table"]) == 21
        swag = store.load_posterior(wd.posterior(0, "swag"))
        assert len(swag.tuning["table"]) == 21


class TestEvaluate:
    def test_de_k1_rows_equal_map_point_elpd(self, tiny_run):
        cfg, wd = tiny_run
        rows = [r for r in wd.store("evaluate").rows()
                if r["method"] == "de" and r["k"] == 1]
        assert len(rows) == cfg.pool_size
        from debnn.store import load_dataset
        ds = load_dataset(wd.path("dataset.json"))
        x, y = ds.split("test")
        for r in rows:
            ckpt = store.load_checkpoint(wd.checkpoint(r["members"][0]))
            assert r["elpd"] == pytest.approx(nn.point_elpd(ckpt.spec, ckpt.params, x, y),
                                              abs=1e-12)

    def test_vs_de_table_zero_for_de(self, tiny_run):
        cfg, wd = tiny_run
        path = wd.path("tables", "elpd_vs_de.csv")
        rows = [line.split(",") for line in open(path).read().splitlines()[1:]]
        de_rows = [r for r in rows if r[0] == "de"]
        assert de_rows
        assert all(float(r[2]) == 0.0 for r in de_rows)

    def test_vs_map_table_zero_mean_for_de_k1(self, tiny_run):
        cfg, wd = tiny_run
        path = wd.path("tables", "elpd_vs_map.csv")
        rows = [line.split(",") for line in open(path).read().splitlines()[1:]]
        row = next(r for r in rows if r[0] == "de" and r[1] == "1")
        assert abs(float(row[2])) < 1e-10

    def test_rerun_appends_nothing(self, tiny_run):
        cfg, wd = tiny_run
        assert harness.cmd_evaluate(cfg, wd) == 0

    def test_manifests_written(self, tiny_run):
        cfg, wd = tiny_run
        manifest = store.load_manifest(wd.path("manifests", "k02_draw000.json"))
        assert manifest["k"] == 2 and len(manifest["member_ids"]) == 2


class TestDownstreamCommands:
    def test_lambda_one_matches_evaluate_rows_exactly(self, tiny_run):
        cfg, wd = tiny_run
        harness.cmd_sweep_lambda(cfg, wd)
        lam_rows = {(r["method"], r["k"], r["seed"]): r["elpd"]
                    for r in wd.store("lambda").rows() if r["lam"] == 1.0}
        eval_rows = {(r["method"], r["k"], r["seed"]): r["elpd"]
                     for r in wd.store("evaluate").rows()
                     if r["method"] in ("swag", "llla")}
        assert lam_rows
        for key, elpd in lam_rows.items():
            assert elpd == eval_rows[key], key

    def test_point_mass_ablate_rows_constant_in_s(self, tiny_run):
        cfg, wd = tiny_run
        harness.cmd_ablate_samples(cfg, wd)
        rows = [r for r in wd.store("ablate").rows() if r["method"] == "de"]
        by_key = {}
        for r in rows:
            by_key.setdefault((r["sampler"], r["seed"]), []).append(r["elpd"])
        for vals in by_key.values():
            assert len(set(vals)) == 1

    def test_ood_rows_bounded_and_k1_matches_single_model(self, tiny_run):
        cfg, wd = tiny_run
        harness.cmd_ood(cfg, wd)
        rows = wd.store("ood").rows()
        assert rows
        assert all(0.0 <= r["auroc"] <= 1.0 for r in rows)
        assert all(r["de_highlight"] == (r["method"] == "de") for r in rows)

    def test_stacking_rows_schema(self, tiny_run):
        cfg, wd = tiny_run
        harness.cmd_stacking(cfg, wd)
        rows = wd.store("stacking").rows()
        assert rows
        for r in rows:
            assert 0.0 <= r["normalized_entropy"] <= 1.0
            assert "elpd_uniform" in r and "elpd_stacked" in r

    def test_report_emits_long_tables(self, tiny_run):
        cfg, wd = tiny_run
        harness.cmd_report(cfg, wd)
        for name in ("evaluate_long", "rank_table", "elpd_vs_map"):
            assert os.path.exists(wd.path("tables", f"{name}.csv"))


class TestRank:
    def _store_with_rows(self, tmp_path, rows):
        wd = Workdir(tmp_path)
        rs = wd.store("evaluate")
        for r in rows:
            rs.append(r)
        return wd

    def test_strictly_best_method_ranks_first(self, tmp_path):
        cfg = tiny_config(methods=("de", "swa"), k_list=(1,))
        rows = []
        for seed in range(3):
            rows.append({"experiment": "evaluate", "method": "de", "k": 1, "seed": seed,
                         "elpd": -0.1, "accuracy": 0.9, "ece": 0.01})
            rows.append({"experiment": "evaluate", "method": "swa", "k": 1, "seed": seed,
                         "elpd": -0.2, "accuracy": 0.8, "ece": 0.02})
        wd = self._store_with_rows(tmp_path, rows)
        table = harness.cmd_rank(cfg, wd)
        de_elpd = next(r for r in table if r["method"] == "de" and r["metric"] == "elpd")
        assert de_elpd["avg_rank"] == 1.0

    def test_all_tied_gives_average_rank(self, tmp_path):
        cfg = tiny_config(methods=("de", "swa", "swag", "llla"), k_list=(1,))
        rows = []
        for m in ("de", "swa", "swag", "llla"):
            rows.append({"experiment": "evaluate", "method": m, "k": 1, "seed": 0,
                         "elpd": -0.3, "accuracy": 0.8, "ece": 0.05})
        wd = self._store_with_rows(tmp_path, rows)
        table = harness.cmd_rank(cfg, wd)
        for r in table:
            assert r["avg_rank"] == 2.5        # average of 1..4

    def test_two_method_two_draw_hand_ranked(self, tmp_path):
        cfg = tiny_config(methods=("de", "swa"), k_list=(2,))
        rows = [
            {"experiment": "evaluate", "method": "de", "k": 2, "seed": 0,
             "elpd": -0.1, "accuracy": 0.9, "ece": 0.02},
            {"experiment": "evaluate", "method": "swa", "k": 2, "seed": 0,
             "elpd": -0.3, "accuracy": 0.7, "ece": 0.01},
            {"experiment": "evaluate", "method": "de", "k": 2, "seed": 1,
             "elpd": -0.4, "accuracy": 0.6, "ece": 0.05},
            {"experiment": "evaluate", "method": "swa", "k": 2, "seed": 1,
             "elpd": -0.2, "accuracy": 0.8, "ece": 0.04},
        ]
        wd = self._store_with_rows(tmp_path, rows)
        table = harness.cmd_rank(cfg, wd)
        # hand ranking: elpd de wins draw 0, swa wins draw 1 -> both average 1.5;
        # ece swa wins both draws -> swa 1.0, de 2.0
        by = {(r["method"], r["metric"]): r["avg_rank"] for r in table}
        assert by[("de", "elpd")] == 1.5 and by[("swa", "elpd")] == 1.5
        assert by[("swa", "ece")] == 1.0 and by[("de", "ece")] == 2.0

    def test_missing_method_flagged(self, tmp_path):
        cfg = tiny_config(methods=("de", "swa"), k_list=(1,))
        rows = [{"experiment": "evaluate", "method": "de", "k": 1, "seed": 0,
                 "elpd": -0.1, "accuracy": 0.9, "ece": 0.01}]
        wd = self._store_with_rows(tmp_path, rows)
        table = harness.cmd_rank(cfg, wd)
        assert all(r["missing_methods"] == "swa" for r in table)


class TestDeterminism:
    def test_same_config_byte_identical_stores(self, tmp_path):
        cfg = tiny_config()
        outputs = []
        for sub in ("a", "b"):
            wd = Workdir(tmp_path / sub)
            harness.cmd_train_pool(cfg, wd)
            harness.cmd_fit_posteriors(cfg, wd)
            harness.cmd_evaluate(cfg, wd)
            harness.cmd_sweep_lambda(cfg, wd)
            outputs.append((open(wd.path("results", "evaluate.jsonl"), "rb").read(),
                            open(wd.path("results", "lambda.jsonl"), "rb").read()))
        assert outputs[0][0] == outputs[1][0]
        assert outputs[0][1] == outputs[1][1]


def test_cli_show_config(capsys):
    from debnn import cli
    assert cli.main(["--preset", "regression", "--pool-size", "5", "--k", "1,2,5",
                     "--set", "dataset.n=64", "show-config"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["pool_size"] == 5
    assert out["k_list"] == [1, 2, 5]
    assert out["dataset"]["n"] == 64
    assert out["dataset"]["kind"] == "regression"


def test_cli_pipeline_smoke(tmp_path, capsys):
    from debnn import cli
    cfg = tiny_config(pool_size=2, methods=("de",))
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    rc = cli.main(["--config", str(cfg_path), "--workdir", str(tmp_path / "w"),
                   "train-pool"])
    assert rc == 0
    rc = cli.main(["--config", str(cfg_path), "--workdir", str(tmp_path / "w"),
                   "fit-posteriors"])
    assert rc == 0
    rc = cli.main(["--config", str(cfg_path), "--workdir", str(tmp_path / "w"),
                   "evaluate"])
    assert rc == 0
    assert os.path.exists(tmp_path / "w" / "results" / "evaluate.jsonl")
