import io
import json
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from mllma import cli, colormap
from mllma.featdsl import save_feature_manifest, seed_pool
from mllma.manifest import (
    ManifestError,
    RunManifest,
    canonical_json,
    diff_artifacts,
    hash_path,
    load_manifest,
    record_artifacts,
    save_manifest,
    sha256_dir,
    sha256_file,
)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One small end-to-end pipeline run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("pipeline")

    def run(*argv):
        code = cli.main([*argv])
        assert code == 0, f"command failed: {argv}"

    run("synth", "--n", "12", "--height", "64", "--width", "64",
        "--seed", "3", "--out", str(root / "synth"))
    dataset = root / "synth" / "dataset"
    run("extract", "--dataset", str(dataset), "--out", str(root / "extract"))
    run("train-pref", "--dataset", str(dataset), "--epochs", "40",
        "--out", str(root / "pref"))
    run("train-map", "--dataset", str(dataset), "--out", str(root / "map"))
    sid = sorted(p.name for p in dataset.iterdir())[0]
    return {
        "root": root,
        "dataset": dataset,
        "pref": root / "pref" / "pref.txt",
        "mappred": root / "map" / "mappred.txt",
        "sid": sid,
    }


class TestColormap:
    def test_table_shape_and_frozen_endpoints(self):
        assert len(colormap.COLOR_TABLE) == 256
        assert colormap.COLOR_TABLE[0] == (68, 1, 84)
        assert colormap.COLOR_TABLE[255] == (253, 231, 37)

    def test_extremes_map_to_table_ends(self):
        rgb = colormap.colorize(np.array([[0.0, 1.0]]))
        assert tuple(rgb[0, 0]) == colormap.COLOR_TABLE[0]
        assert tuple(rgb[0, 1]) == colormap.COLOR_TABLE[255]

    def test_constant_raster_uses_low_end(self):
        rgb = colormap.colorize(np.full((3, 3), 0.7))
        assert (rgb == colormap.COLOR_TABLE[0]).all()

    def test_explicit_range_wins(self):
        rgb = colormap.colorize(np.array([[0.5]]), vmin=0.0, vmax=1.0)
        assert tuple(rgb[0, 0]) == colormap.COLOR_TABLE[128]

    def test_rejects_non_2d(self):
        with pytest.raises(ValueError):
            colormap.colorize(np.zeros(5))

    def test_png_round_trip_matches_colorize(self):
        arr = np.linspace(0.0, 1.0, 48).reshape(6, 8)
        png = colormap.to_png(arr)
        assert png[:8] == b"\x89PNG\r\n\x1a\n"
        decoded = np.asarray(Image.open(io.BytesIO(png)).convert("RGB"))
        assert (decoded == colormap.colorize(arr)).all()


class TestManifestHelpers:
    def test_canonical_json_is_compact_and_sorted(self):
        s = canonical_json({"b": 1, "a": [1.5, 2]})
        assert s == '{"a":[1.5,2],"b":1}'

    def test_canonical_json_coerces_numpy_and_enums(self):
        from mllma.prefmodel import GatePolicy
        s = canonical_json({
            "x": np.float64(0.5),
            "v": np.array([1.0, 2.0]),
            "g": GatePolicy.FROZEN_GATING,
        })
        assert s == '{"g":"frozen_gating","v":[1.0,2.0],"x":0.5}'

    def test_canonical_json_rejects_nan(self):
        with pytest.raises(ValueError):
            canonical_json({"x": float("nan")})

    def test_dir_digest_sees_renames(self, tmp_path):
        (tmp_path / "a.txt").write_text("same")
        before = sha256_dir(tmp_path)
        (tmp_path / "a.txt").rename(tmp_path / "b.txt")
        assert sha256_dir(tmp_path) != before

    def test_hash_path_dispatches(self, tmp_path):
        f = tmp_path / "f.txt"
        f.write_text("x")
        assert hash_path(f) == sha256_file(f)
        assert hash_path(tmp_path) == sha256_dir(tmp_path)

    def test_manifest_round_trip(self, tmp_path):
        m = RunManifest(command="synth", config={"n": 5},
                        inputs={"dataset": "abc"}, seeds={"synth": 3})
        save_manifest(m, tmp_path)
        back = load_manifest(tmp_path)
        assert back.command == "synth"
        assert back.config == {"n": 5}
        assert back.seeds == {"synth": 3}
        assert back.versions["manifest"] == "run-manifest v1"

    def test_load_rejects_wrong_format(self, tmp_path):
        (tmp_path / "manifest.json").write_text('{"format": "other"}')
        with pytest.raises(ManifestError):
            load_manifest(tmp_path)

    def test_load_rejects_garbage(self, tmp_path):
        (tmp_path / "manifest.json").write_text("not json")
        with pytest.raises(ManifestError):
            load_manifest(tmp_path)
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "absent" / "manifest.json")

    def test_record_artifacts_skips_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{}")
        (tmp_path / "out.txt").write_text("data")
        (tmp_path / "sub").mkdir()
        (tmp_path / "sub" / "deep.txt").write_text("more")
        arts = record_artifacts(tmp_path)
        assert set(arts) == {"out.txt", "sub/deep.txt"}

    def test_diff_artifacts_categories(self):
        a = {"x": "1", "y": "2", "z": "3"}
        b = {"x": "1", "y": "9", "w": "4"}
        lines = diff_artifacts(a, b)
        assert any("differs: y" in ln for ln in lines)
        assert any("missing in replay: z" in ln for ln in lines)
        assert any("extra in replay: w" in ln for ln in lines)
        assert diff_artifacts(a, dict(a)) == []


class TestCliBasics:
    def test_no_subcommand_is_usage_error(self, capsys):
        assert cli.main([]) == 2
        capsys.readouterr()

    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert cli.main(["frobnicate"]) == 2
        capsys.readouterr()

    def test_version_flag(self, capsys):
        assert cli.main(["--version"]) == 0
        assert "mllma" in capsys.readouterr().out

    def test_missing_dataset_is_usage_error(self, tmp_path, capsys):
        assert cli.main(["extract", "--out", str(tmp_path / "o")]) == 2
        assert "--dataset" in capsys.readouterr().err

    def test_bad_dataset_path_is_pipeline_error(self, tmp_path, capsys):
        code = cli.main(["extract", "--dataset", str(tmp_path / "nope"),
                         "--out", str(tmp_path / "o")])
        assert code == 1
        assert "layout" in capsys.readouterr().err

    def test_synth_same_seed_is_bit_identical(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert cli.main(["synth", "--n", "4", "--height", "32",
                             "--width", "32", "--seed", "7",
                             "--out", str(tmp_path / name)]) == 0
        capsys.readouterr()
        assert sha256_dir(tmp_path / "a" / "dataset") == \
               sha256_dir(tmp_path / "b" / "dataset")

    def test_synth_seed_changes_dataset(self, tmp_path, capsys):
        for name, seed in (("a", "1"), ("b", "2")):
            assert cli.main(["synth", "--n", "4", "--height", "32",
                             "--width", "32", "--seed", seed,
                             "--out", str(tmp_path / name)]) == 0
        capsys.readouterr()
        assert sha256_dir(tmp_path / "a" / "dataset") != \
               sha256_dir(tmp_path / "b" / "dataset")

    def test_config_file_supplies_defaults_and_flags_win(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text("synth:\n  n: 5\n  height: 32\n  width: 32\n  seed: 9\n")
        assert cli.main(["synth", "--config", str(cfg),
                         "--out", str(tmp_path / "a")]) == 0
        assert len(list((tmp_path / "a" / "dataset").iterdir())) == 5
        assert cli.main(["synth", "--config", str(cfg), "--n", "3",
                         "--out", str(tmp_path / "b")]) == 0
        assert len(list((tmp_path / "b" / "dataset").iterdir())) == 3
        capsys.readouterr()

    def test_unknown_config_key_is_usage_error(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text("synth:\n  frobs: 12\n")
        assert cli.main(["synth", "--config", str(cfg),
                         "--out", str(tmp_path / "o")]) == 2
        assert "frobs" in capsys.readouterr().err

    def test_bad_override_syntax_is_usage_error(self, workspace, tmp_path, capsys):
        code = cli.main(["whatif", "--dataset", str(workspace["dataset"]),
                         "--model", str(workspace["pref"]),
                         "--sample", workspace["sid"],
                         "--set", "notanumber",
                         "--out", str(tmp_path / "o")])
        assert code == 2
        capsys.readouterr()

    def test_console_script_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "mllma.cli", "--version"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "mllma" in proc.stdout


class TestCliPipeline:
    def test_extract_table_shape(self, workspace):
        lines = (workspace["root"] / "extract" / "table.csv").read_text().splitlines()
        header = lines[0].split(",")
        assert header[0] == "sample_id" and header[-1] == "label"
        assert len(lines) == 13              # 12 samples + header
        assert len(header) == len(seed_pool()) + 2

    def test_every_run_writes_a_manifest(self, workspace):
        for name in ("synth", "extract", "pref", "map"):
            m = load_manifest(workspace["root"] / name)
            assert m.artifacts, f"{name} recorded no artifacts"

    def test_train_pref_summary_records_label_stats(self, workspace):
        summary = json.loads(
            (workspace["root"] / "pref" / "summary.json").read_text())
        assert summary["label_sigma"] > 0
        assert len(summary["feature_names"]) == len(seed_pool())

    def test_train_forest_writes_model_and_importance(self, workspace,
                                                      tmp_path, capsys):
        out = tmp_path / "forest"
        assert cli.main(["train-forest", "--dataset", str(workspace["dataset"]),
                         "--n-trees", "10", "--out", str(out)]) == 0
        capsys.readouterr()
        assert (out / "forest.txt").read_text().startswith("# forest-model v1")
        summary = json.loads((out / "summary.json").read_text())
        imp = summary["importance"]
        assert set(imp) == {s.name for s in seed_pool()}
        assert abs(sum(imp.values()) - 1.0) < 1e-9

    def test_evolve_zero_rounds_echoes_seed_pool(self, workspace, tmp_path, capsys):
        out = tmp_path / "ev0"
        assert cli.main(["evolve", "--dataset", str(workspace["dataset"]),
                         "--rounds", "0", "--n-trees", "20",
                         "--out", str(out)]) == 0
        capsys.readouterr()
        ref = tmp_path / "seed_pool.txt"
        save_feature_manifest(seed_pool(), ref)
        assert (out / "pool.txt").read_bytes() == ref.read_bytes()

    def test_evolve_one_round_grows_history(self, workspace, tmp_path, capsys):
        out = tmp_path / "ev1"
        assert cli.main(["evolve", "--dataset", str(workspace["dataset"]),
                         "--rounds", "1", "--n-trees", "20", "--seed", "5",
                         "--out", str(out)]) == 0
        capsys.readouterr()
        summary = json.loads((out / "summary.json").read_text())
        assert len(summary["rounds"]) == 2   # seed snapshot + final pool
        assert summary["importance"]

    def test_deck_markdown_mentions_sample(self, workspace, tmp_path, capsys):
        out = tmp_path / "deck"
        assert cli.main(["deck", "--dataset", str(workspace["dataset"]),
                         "--model", str(workspace["pref"]),
                         "--sample", workspace["sid"], "--top", "3",
                         "--window", "16", "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert workspace["sid"] in text
        assert (out / "deck.md").read_text() == text

    def test_deck_json_round_trips(self, workspace, tmp_path, capsys):
        from mllma.deck import parse_deck
        out = tmp_path / "deckj"
        assert cli.main(["deck", "--dataset", str(workspace["dataset"]),
                         "--model", str(workspace["pref"]),
                         "--sample", workspace["sid"], "--format", "json",
                         "--out", str(out)]) == 0
        capsys.readouterr()
        d = parse_deck((out / "deck.json").read_text())
        assert d.sample_id == workspace["sid"]

    def test_deck_unknown_sample_is_pipeline_error(self, workspace, tmp_path, capsys):
        code = cli.main(["deck", "--dataset", str(workspace["dataset"]),
                         "--model", str(workspace["pref"]),
                         "--sample", "nope", "--out", str(tmp_path / "o")])
        assert code == 1
        assert "unknown sample" in capsys.readouterr().err

    def test_whatif_emits_consistent_json(self, workspace, tmp_path, capsys):
        out = tmp_path / "wi"
        assert cli.main(["whatif", "--dataset", str(workspace["dataset"]),
                         "--model", str(workspace["pref"]),
                         "--sample", workspace["sid"],
                         "--set", "high_density_rudy_pin_ratio=0.5",
                         "--out", str(out)]) == 0
        body = json.loads(capsys.readouterr().out)
        assert body["sample_id"] == workspace["sid"]
        assert body["gating_mode"] == "frozen_gating"
        assert body["delta"] == pytest.approx(
            body["score_after"] - body["score_before"])
        assert (out / "whatif.json").read_text().strip() == \
               canonical_json(body)

    def test_eval_reports_both_model_families(self, workspace, tmp_path, capsys):
        out = tmp_path / "eval"
        assert cli.main(["eval", "--dataset", str(workspace["dataset"]),
                         "--model", str(workspace["pref"]),
                         "--mappred", str(workspace["mappred"]),
                         "--out", str(out)]) == 0
        capsys.readouterr()
        report = json.loads((out / "report.json").read_text())
        for key in ("plcc", "srcc", "krcc"):
            assert -1.0 <= report["pref"][key] <= 1.0
        for key in ("ssim", "nrmse", "peak_nrmse"):
            assert report["map"][key] >= 0.0 or key == "ssim"

    def test_eval_without_any_model_is_usage_error(self, workspace, tmp_path, capsys):
        code = cli.main(["eval", "--dataset", str(workspace["dataset"]),
                         "--out", str(tmp_path / "o")])
        assert code == 2
        capsys.readouterr()


class TestReplay:
    def test_replay_synth_is_bit_identical(self, workspace, tmp_path, capsys):
        code = cli.main(["replay",
                         "--manifest", str(workspace["root"] / "synth"),
                         "--out", str(tmp_path / "again")])
        assert code == 0
        assert "bit-identical" in capsys.readouterr().out

    def test_replay_train_pref_is_bit_identical(self, workspace, tmp_path, capsys):
        code = cli.main(["replay",
                         "--manifest", str(workspace["root"] / "pref"),
                         "--out", str(tmp_path / "again")])
        assert code == 0
        capsys.readouterr()

    def test_replay_flags_changed_inputs(self, workspace, tmp_path, capsys):
        src = load_manifest(workspace["root"] / "pref")
        src.inputs["dataset"] = "0" * 64    # pretend the dataset moved on
        tampered = tmp_path / "tampered"
        tampered.mkdir()
        save_manifest(src, tampered)
        code = cli.main(["replay", "--manifest", str(tampered),
                         "--out", str(tmp_path / "again")])
        assert code == 1
        assert "changed since" in capsys.readouterr().err

    def test_replay_reports_artifact_drift(self, workspace, tmp_path, capsys):
        src = load_manifest(workspace["root"] / "synth")
        src.artifacts["summary.json"] = "0" * 64
        tampered = tmp_path / "tampered"
        tampered.mkdir()
        save_manifest(src, tampered)
        code = cli.main(["replay", "--manifest", str(tampered),
                         "--out", str(tmp_path / "again")])
        assert code == 1
        assert "differs: summary.json" in capsys.readouterr().err


@pytest.fixture(scope="module")
def client(workspace):
    from fastapi.testclient import TestClient

    from mllma.service import build_app, build_state
    state = build_state(workspace["dataset"], model_path=workspace["pref"],
                        deck_top=3, deck_window=16)
    return TestClient(build_app(state))


@pytest.fixture(scope="module")
def bare_client(workspace):
    from fastapi.testclient import TestClient

    from mllma.service import build_app, build_state
    return TestClient(build_app(build_state(workspace["dataset"])))


class TestService:
    def test_health_reports_version(self, client):
        r = client.get("/health")
        assert r.status_code == 200
        body = r.json()
        assert body["status"] == "ok"
        assert body["version"]
        assert body["model_loaded"] is True

    def test_samples_listing_sorted(self, client):
        r = client.get("/samples")
        assert r.status_code == 200
        ids = [s["id"] for s in r.json()["samples"]]
        assert ids == sorted(ids) and len(ids) == 12

    def test_samples_carry_feature_stats(self, client):
        stats = client.get("/samples").json()["feature_stats"]
        assert set(stats) == {s.name for s in seed_pool()}
        for st in stats.values():
            assert st["min"] <= st["max"]
            assert st["sigma"] >= 0

    def test_sample_detail_carries_features(self, client, workspace):
        r = client.get(f"/samples/{workspace['sid']}")
        assert r.status_code == 200
        body = r.json()
        assert body["height"] == 64 and body["width"] == 64
        assert len(body["features"]) == len(seed_pool())
        assert set(body["rasters"]) == {"macro", "rudy", "rudy_pin", "congestion"}

    def test_unknown_sample_404(self, client):
        assert client.get("/samples/nope").status_code == 404

    def test_raster_png(self, client, workspace):
        r = client.get(f"/samples/{workspace['sid']}/raster/rudy")
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"
        assert r.content[:8] == b"\x89PNG\r\n\x1a\n"
        im = Image.open(io.BytesIO(r.content))
        assert im.size == (64, 64)

    def test_raster_unknown_kind_404(self, client, workspace):
        assert client.get(
            f"/samples/{workspace['sid']}/raster/thermal").status_code == 404

    def test_predict_shape_and_ordering(self, client, workspace):
        r = client.post("/predict", json={"sample_id": workspace["sid"]})
        assert r.status_code == 200
        body = r.json()
        mags = [abs(a["contribution"]) for a in body["attributions"]]
        assert mags == sorted(mags, reverse=True)
        assert len(body["weights"]) == len(seed_pool())
        assert body["score"] == pytest.approx(
            sum(a["contribution"] for a in body["attributions"]))

    def test_predict_override_moves_score(self, client, workspace):
        base = client.post("/predict", json={"sample_id": workspace["sid"]}).json()
        bumped = client.post("/predict", json={
            "sample_id": workspace["sid"],
            "feature_overrides": {"high_density_rudy_pin_ratio": 0.9},
        }).json()
        assert bumped["score"] != base["score"]

    def test_predict_error_codes(self, client, workspace):
        sid = workspace["sid"]
        assert client.post("/predict", content=b"garbage").status_code == 400
        assert client.post("/predict", json=[1, 2]).status_code == 400
        assert client.post("/predict", json={}).status_code == 400
        assert client.post("/predict", json={
            "sample_id": sid, "feature_overrides": {"x": "high"},
        }).status_code == 400
        assert client.post("/predict", json={
            "sample_id": "nope"}).status_code == 404
        assert client.post("/predict", json={
            "sample_id": sid, "feature_overrides": {"made_up": 1.0},
        }).status_code == 404

    def test_whatif_empty_overrides_is_identity(self, client, workspace):
        r = client.post("/whatif", json={"sample_id": workspace["sid"],
                                         "overrides": {}})
        assert r.status_code == 200
        body = r.json()
        assert body["score_before"] == body["score_after"]
        assert body["delta"] == 0.0

    def test_whatif_gating_modes_accepted(self, client, workspace):
        for mode in ("frozen", "frozen_gating", "refresh", "refresh_gating"):
            r = client.post("/whatif", json={
                "sample_id": workspace["sid"],
                "overrides": {"high_density_rudy_pin_ratio": 0.5},
                "gating_mode": mode,
            })
            assert r.status_code == 200
        assert client.post("/whatif", json={
            "sample_id": workspace["sid"], "gating_mode": "sideways",
        }).status_code == 400

    def test_whatif_matches_cli_byte_for_byte(self, client, workspace,
                                              tmp_path, capsys):
        assert cli.main(["whatif", "--dataset", str(workspace["dataset"]),
                         "--model", str(workspace["pref"]),
                         "--sample", workspace["sid"],
                         "--set", "high_density_rudy_pin_ratio=0.5",
                         "--out", str(tmp_path / "wi")]) == 0
        cli_body = capsys.readouterr().out.strip()
        r = client.post("/whatif", json={
            "sample_id": workspace["sid"],
            "overrides": {"high_density_rudy_pin_ratio": 0.5},
        })
        assert r.text == cli_body

    def test_deck_endpoint(self, client, workspace):
        r = client.get(f"/deck/{workspace['sid']}")
        assert r.status_code == 200
        body = r.json()
        assert body["format"] == "deck v1"
        assert 0 < len(body["items"]) <= 3
        assert client.get("/deck/absent").status_code == 404

    def test_model_free_service_returns_503(self, bare_client, workspace):
        sid = workspace["sid"]
        assert bare_client.post("/predict",
                                json={"sample_id": sid}).status_code == 503
        assert bare_client.post("/whatif",
                                json={"sample_id": sid}).status_code == 503
        assert bare_client.get(f"/deck/{sid}").status_code == 503
        assert bare_client.get("/health").json()["model_loaded"] is False

    def test_concurrent_predicts_agree(self, client, workspace):
        def hit(_):
            return client.post("/predict",
                               json={"sample_id": workspace["sid"]}).text

        with ThreadPoolExecutor(max_workers=8) as pool:
            bodies = list(pool.map(hit, range(16)))
        assert len(set(bodies)) == 1

    def test_static_webui_mount(self, workspace, tmp_path):
        from fastapi.testclient import TestClient

        from mllma.service import build_app, build_state
        ui = tmp_path / "ui"
        ui.mkdir()
        (ui / "index.html").write_text("<html><body>explorer</body></html>")
        state = build_state(workspace["dataset"], model_path=workspace["pref"],
                            webui_dir=ui)
        c = TestClient(build_app(state))
        r = c.get("/")
        assert r.status_code == 200
        assert "explorer" in r.text
        # API routes still win over the static mount
        assert c.get("/health").status_code == 200
