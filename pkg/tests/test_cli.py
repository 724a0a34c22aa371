import csv
import json
import time

import pytest

from bridgecal.cli import main
from bridgecal.config import parse_config, parse_config_text
from bridgecal.errors import ConfigError
from bridgecal.fixture import make_planted
from bridgecal.trainer import load_checkpoint


@pytest.fixture(scope="module")
def cli_fixture(tmp_path_factory):
    """A small planted dataset plus a fast training config."""
    root = tmp_path_factory.mktemp("cli")
    paths = make_planted(40, 20, 4, noise=0.1, seed=3, out_dir=root,
                         interactions_per_user=8)
    cfg_path = root / "run.cfg"
    cfg_path.write_text(
        f"""
interactions = {paths['interactions']}
visual_features = {paths['v']}
text_features = {paths['t']}
artifact_dir = {root / 'artifacts'}
embed_dim = 8
epochs = 2
batch_size = 64
lr = 0.02
seed = 2020
k_b = 10
k_c_train = 8
k_c_eval = 8
knn_k = 3
lambda_b = 0.2
""".strip() + "\n",
        encoding="utf-8",
    )
    return root, cfg_path, paths


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class TestConfigParsing:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config_text("bogus_key = 1\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("epochs = 1\nepochs = 2\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="cannot parse"):
            parse_config_text("epochs = banana\n")

    def test_comments_and_blanks_ok(self):
        cfg = parse_config_text("# comment\n\nepochs = 3\n")
        assert cfg.epochs == 3

    def test_grid_parsing(self):
        cfg = parse_config_text("lambda_b_grid = 0.1, 0.3\n")
        assert cfg.lambda_b_grid == (0.1, 0.3)

    def test_conservative_defaults_lambda_eta(self):
        cfg = parse_config_text("coeff = conservative\n")
        assert cfg.lambda_eta == pytest.approx(0.001)
        cfg2 = parse_config_text("coeff = conservative\nlambda_eta = 0\n")
        assert cfg2.lambda_eta == 0.0

    def test_channels_respect_drops(self):
        cfg = parse_config_text("drop_image = true\n")
        assert cfg.channels() == ("id", "t")
        cfg = parse_config_text("drop_content = true\n")
        assert cfg.channels() == ("id",)

    def test_round_trip_text(self, tmp_path):
        cfg = parse_config_text("epochs = 7\nlambda_b = 0.6\n")
        path = tmp_path / "resolved.cfg"
        path.write_text(cfg.to_text(), encoding="utf-8")
        again = parse_config(path)
        assert again == cfg


class TestPrepare:
    def test_builds_and_caches(self, cli_fixture):
        root, cfg_path, paths = cli_fixture
        assert main(["prepare", "--config", str(cfg_path)]) == 0
        art = root / "artifacts"
        for name in ("bipartite.brsg", "item_graph.brsg", "behavior.brsg",
                     "cache_manifest.json", "split_report.txt",
                     "prepare_resolved_config.txt"):
            assert (art / name).exists(), name

    def test_idempotent_rerun(self, cli_fixture):
        root, cfg_path, _ = cli_fixture
        main(["prepare", "--config", str(cfg_path)])
        art = root / "artifacts"
        stamps = {p.name: p.stat().st_mtime_ns for p in art.glob("*.brsg")}
        time.sleep(0.01)
        assert main(["prepare", "--config", str(cfg_path)]) == 0
        for p in art.glob("*.brsg"):
            assert p.stat().st_mtime_ns == stamps[p.name]

    def test_feature_change_rebuilds_item_graph(self, cli_fixture, tmp_path):
        root, cfg_path, paths = cli_fixture
        main(["prepare", "--config", str(cfg_path)])
        art = root / "artifacts"
        before = {p.name: p.stat().st_mtime_ns for p in art.glob("*.brsg")}
        raw = bytearray(paths["v"].read_bytes())
        raw[-1] ^= 0x01  # flip one payload bit
        paths["v"].write_bytes(bytes(raw))
        time.sleep(0.01)
        assert main(["prepare", "--config", str(cfg_path)]) == 0
        after = {p.name: p.stat().st_mtime_ns for p in art.glob("*.brsg")}
        assert after["item_graph.brsg"] != before["item_graph.brsg"]
        assert after["bipartite.brsg"] == before["bipartite.brsg"]

    def test_integrity_violation_exits_2(self, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("a\tx\t0\nb\tx\t2\n", encoding="utf-8")
        cfg = tmp_path / "c.cfg"
        cfg.write_text(
            f"interactions = {bad}\nartifact_dir = {tmp_path / 'art'}\n"
            "drop_content = true\nbehavior = none\n",
            encoding="utf-8",
        )
        assert main(["prepare", "--config", str(cfg)]) == 2
        assert (tmp_path / "art" / "split_report.txt").exists()


class TestTrainEval:
    def test_train_writes_artifacts(self, cli_fixture):
        root, cfg_path, _ = cli_fixture
        assert main(["train", "--config", str(cfg_path)]) == 0
        art = root / "artifacts"
        rows = read_csv(art / "training_log.csv")
        assert len(rows) == 2  # one row per epoch
        assert (art / "checkpoint.brck").exists()
        assert (art / "training_curves.png").exists()
        assert (art / "train_resolved_config.txt").exists()

    def test_checkpoint_reload_reproduces_valid_metric(self, cli_fixture):
        root, cfg_path, _ = cli_fixture
        art = root / "artifacts"
        main(["train", "--config", str(cfg_path)])
        rows = read_csv(art / "training_log.csv")
        best_logged = max(float(r["valid_recall20"]) for r in rows)
        assert main(["eval", "--config", str(cfg_path)]) == 0
        report = json.loads((art / "eval_valid.json").read_text(encoding="utf-8"))
        assert report["recall"]["20"] == best_logged
        assert (art / "eval_metrics.png").exists()
        assert (art / "eval_test.txt").exists()

    def test_checkpoint_config_echo(self, cli_fixture):
        root, cfg_path, _ = cli_fixture
        main(["train", "--config", str(cfg_path)])
        _, echo = load_checkpoint(root / "artifacts" / "checkpoint.brck")
        assert "epochs = 2" in echo

    def test_missing_data_exits_2(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(
            f"interactions = {tmp_path / 'missing.tsv'}\n"
            f"artifact_dir = {tmp_path / 'art'}\n",
            encoding="utf-8",
        )
        assert main(["train", "--config", str(cfg)]) == 2

    def test_unknown_config_key_exits_1(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("frobnicate = 9\n", encoding="utf-8")
        assert main(["train", "--config", str(cfg)]) == 1

    def test_bad_subcommand_exits_1(self):
        assert main(["explode", "--config", "x"]) == 1

    def test_thread_cap_env(self, cli_fixture, monkeypatch):
        _, cfg_path, _ = cli_fixture
        monkeypatch.setenv("BRIDGECAL_THREADS", "1")
        assert main(["prepare", "--config", str(cfg_path)]) == 0
        monkeypatch.setenv("BRIDGECAL_THREADS", "zebra")
        assert main(["prepare", "--config", str(cfg_path)]) == 1

    def test_seed_flag_overrides_config(self, cli_fixture, tmp_path):
        _, cfg_path, _ = cli_fixture
        base = parse_config(cfg_path)
        import dataclasses
        cfg2 = dataclasses.replace(base, artifact_dir=str(tmp_path / "seeded"), epochs=1)
        p = tmp_path / "c.cfg"
        p.write_text(cfg2.to_text(), encoding="utf-8")
        assert main(["train", "--config", str(p), "--seed", "7"]) == 0
        resolved = (tmp_path / "seeded" / "train_resolved_config.txt").read_text()
        assert "seed = 7" in resolved


class TestSweep:
    def test_grid_plus_control_rows(self, cli_fixture, caplog):
        root, cfg_path, _ = cli_fixture
        main(["train", "--config", str(cfg_path)])
        with caplog.at_level("INFO"):
            assert main(["sweep", "--config", str(cfg_path)]) == 0
        art = root / "artifacts"
        rows = read_csv(art / "sweep.csv")
        assert len(rows) == 6  # five grid points plus the conservative control
        assert sum(1 for r in rows if r["setting"] == "conservative") == 1
        tested = [r for r in rows if r["test_recall20"]]
        assert len(tested) == 1  # test evaluated exactly once
        assert any("selection complete before any test evaluation" in r.message
                   for r in caplog.records)
        assert (art / "sweep_lambda.png").exists()

    def test_selected_is_argmax_valid(self, cli_fixture):
        root, _, _ = cli_fixture
        rows = read_csv(root / "artifacts" / "sweep.csv")
        best = max(rows, key=lambda r: float(r["valid_recall20"]))
        assert best["test_recall20"] != ""

    def test_sweep_needs_checkpoint(self, tmp_path, cli_fixture):
        _, cfg_path, _ = cli_fixture
        base = parse_config(cfg_path)
        import dataclasses
        cfg2 = dataclasses.replace(base, artifact_dir=str(tmp_path / "fresh"))
        p = tmp_path / "c.cfg"
        p.write_text(cfg2.to_text(), encoding="utf-8")
        assert main(["sweep", "--config", str(p)]) == 1

    def test_retrain_sweep(self, tmp_path, cli_fixture):
        _, cfg_path, _ = cli_fixture
        base = parse_config(cfg_path)
        import dataclasses
        cfg2 = dataclasses.replace(
            base, artifact_dir=str(tmp_path / "rs"), sweep_retrain=True,
            lambda_b_grid=(0.1, 0.4), epochs=1,
        )
        p = tmp_path / "c.cfg"
        p.write_text(cfg2.to_text(), encoding="utf-8")
        assert main(["sweep", "--config", str(p)]) == 0
        rows = read_csv(tmp_path / "rs" / "sweep.csv")
        assert len(rows) == 2
        assert sum(1 for r in rows if r["test_recall20"]) == 1


class TestAblate:
    def test_rows_and_figure(self, cli_fixture):
        root, cfg_path, _ = cli_fixture
        assert main(["ablate", "--config", str(cfg_path)]) == 0
        art = root / "artifacts"
        rows = read_csv(art / "ablation.csv")
        assert [r["variant"] for r in rows] == ["bridge", "no_behavior", "global"]
        assert (art / "ablation_recall.png").exists()

    def test_bridge_variant_equals_main_run(self, cli_fixture):
        root, cfg_path, _ = cli_fixture
        rows = read_csv(root / "artifacts" / "ablation.csv")
        bridge_row = next(r for r in rows if r["variant"] == "bridge")
        main(["train", "--config", str(cfg_path)])
        log_rows = read_csv(root / "artifacts" / "training_log.csv")
        best = max(float(r["valid_recall20"]) for r in log_rows)
        assert float(bridge_row["valid_recall20"]) == best


class TestDiagnose:
    def test_outputs(self, cli_fixture):
        root, cfg_path, _ = cli_fixture
        main(["train", "--config", str(cfg_path)])
        assert main(["diagnose", "--config", str(cfg_path)]) == 0
        art = root / "artifacts"
        diag = json.loads((art / "diagnostics.json").read_text(encoding="utf-8"))
        assert "low_high_item_cosine" in diag["diagnostics"]
        assert "head_exposure" in diag
        assert "band1_cross_view_cosine" in diag["diagnostics"]
        assert (art / "band_diagnostics.png").exists()
        assert (art / "strata_recall.png").exists()

    def test_identical_views_report_unit_cosine(self, tmp_path):
        paths = make_planted(30, 20, 4, noise=0.1, seed=9, out_dir=tmp_path,
                             interactions_per_user=8)
        # overwrite the text features with the visual ones
        paths["t"].write_bytes(paths["v"].read_bytes())
        cfg = tmp_path / "c.cfg"
        cfg.write_text(
            f"""
interactions = {paths['interactions']}
visual_features = {paths['v']}
text_features = {paths['t']}
artifact_dir = {tmp_path / 'art'}
embed_dim = 8
epochs = 1
batch_size = 64
lr = 0.02
k_b = 10
k_c_train = 8
k_c_eval = 8
knn_k = 3
""".strip() + "\n",
            encoding="utf-8",
        )
        assert main(["train", "--config", str(cfg)]) == 0
        assert main(["diagnose", "--config", str(cfg)]) == 0
        diag = json.loads((tmp_path / "art" / "diagnostics.json").read_text(encoding="utf-8"))
        for m in (1, 2, 3):
            key = f"band{m}_cross_view_cosine"
            assert diag["diagnostics"][key] == pytest.approx(1.0, abs=1e-4)
